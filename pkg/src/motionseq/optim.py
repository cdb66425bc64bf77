"""AdamW with decoupled weight decay and a warmup-then-cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay: dict[str, bool] | None = None,
) -> None:
    """One in-place AdamW update.

    ``state`` holds ``"t"`` (steps taken) and per-name ``"m"``/``"v"`` moment
    buffers; missing buffers are created as zeros. A non-finite gradient aborts
    the whole step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter '{name}', step refused")
    b1, b2 = betas
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    for name, p in params.items():
        m = m_all.get(name)
        if m is not None and m.shape != p.shape:
            raise ValueError(f"optimizer state for '{name}' has shape {m.shape}, parameter {p.shape}")
    t = state.get("t", 0) + 1
    state["t"] = t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = m_all.setdefault(name, np.zeros_like(p))
        v = v_all.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and (decay is None or decay.get(name, True)):
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a named parameter table.

    Vectors (biases, norm gains) are excluded from weight decay.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self, lr: float | None = None, max_grad_norm: float | None = None) -> float:
        """Apply one update from the current ``.grad`` fields; returns the gradient norm."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if max_grad_norm is not None and math.isfinite(norm) and norm > max_grad_norm:
            scale = max_grad_norm / (norm + 1e-6)
            grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
        adamw_step(
            {k: p.data for k, p in self.params.items()},
            grads,
            self.state,
            self.lr if lr is None else lr,
            self.betas,
            self.eps,
            self.weight_decay,
            decay={k: p.ndim >= 2 for k, p in self.params.items()},
        )
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.state["t"]], dtype=np.int64)}
        for k, m in self.state["m"].items():
            out[f"m.{k}"] = m
        for k, v in self.state["v"].items():
            out[f"v.{k}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.state = {"t": int(tensors["t"][0]), "m": {}, "v": {}}
        for key, arr in tensors.items():
            if key.startswith("m."):
                self.state["m"][key[2:]] = np.array(arr, dtype=self.params[key[2:]].dtype)
            elif key.startswith("v."):
                self.state["v"][key[2:]] = np.array(arr, dtype=self.params[key[2:]].dtype)


def cosine_warmup_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp from 0 over ``warmup_steps`` then cosine decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
