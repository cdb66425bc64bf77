"""
Turning motion into tokens
==========================

Stage 1 compresses a pose sequence into one codebook index per frame. This
script trains a small VQ-VAE on synthetic sine motion, with and without the
codebook tricks (EMA updates, random restart, k-means initialisation), and
compares how much of the codebook ends up in use.
"""

import time

from motionseq.motion import compute_stats, normalize, synth_motion
from motionseq.vqvae import (
    TrainConfig,
    VqVae,
    VqVaeConfig,
    VqVaeTrainer,
    dataset_usage,
    detokenize,
    reconstruction_error,
    tokenize,
)

seqs = [synth_motion("sine-walk", 64, 16, base_freq=0.5 + 0.25 * i, seed=i) for i in range(8)]
stats = compute_stats(seqs)
data = [normalize(s, stats).frames for s in seqs]

###############################################################################
# Same model and data, tricks on and off.

models = {}
for tricks in (True, False):
    cfg = VqVaeConfig(
        motion_dim=16, codebook_size=64, code_dim=32, n_layers=1, n_heads=4,
        use_ema=tricks, random_restart=tricks, kmeans_init=tricks, restart_threshold=20,
    )  # fmt: skip
    model = models[tricks] = VqVae(cfg, seed=0)
    start = time.perf_counter()
    VqVaeTrainer(model, data, TrainConfig(steps=200, lr=2e-3, warmup_steps=20)).train()
    print(
        f"tricks={tricks!s:5}  usage {dataset_usage(model, data):.2f}  "
        f"recon {reconstruction_error(model, data):.4f}  ({time.perf_counter() - start:.0f}s)"
    )

###############################################################################
# Tokens are plain integers; ``detokenize`` maps them back to frames and undoes
# the normalisation when given the statistics.

model = models[True]
tokens = tokenize(model, data[0])
print("first tokens:", tokens.indices[:16].tolist())
back = detokenize(model, tokens, stats)
print("decoded shape:", back.frames.shape)
