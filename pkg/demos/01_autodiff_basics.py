"""
Reverse-mode autodiff on numpy arrays
=====================================

The tensor library records every operation on a tape and replays it backwards.
This walk-through builds a small graph by hand, compares gradients with central
finite differences, and shows ``no_grad`` for inference.
"""

import numpy as np

from motionseq import autodiff as ad

rng = np.random.default_rng(0)

###############################################################################
# A two-layer expression. Inputs that need gradients are marked explicitly.

x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
w = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
loss = ad.mean(ad.tanh(x @ w) * ad.tanh(x @ w))
ad.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

###############################################################################
# ``gradcheck`` perturbs every entry of every input and reports the worst
# relative error between analytic and numeric gradients (float64 inputs).

err = ad.gradcheck(lambda a, b: ad.mean(ad.tanh(a @ b) * ad.tanh(a @ b)), x.data, w.data)
print(f"worst relative error {err:.2e}")

###############################################################################
# Masked softmax entries get exactly zero weight, which is what the causal
# attention layers rely on.

logits = ad.Tensor(rng.standard_normal((3, 3)))
mask = np.triu(np.full((3, 3), -np.inf), k=1)
print(ad.softmax(logits + mask).data)

###############################################################################
# Inside ``no_grad`` nothing is recorded, so forward passes are cheaper.

with ad.no_grad():
    y = ad.tanh(x @ w)
print("recorded parents:", y._parents)
