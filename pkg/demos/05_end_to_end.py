"""
Music to motion, end to end
===========================

Drives the command-line pipeline in-process on ten synthetic (motion, click
track) pairs: prepare, train both stages, generate for every track, evaluate.
Step counts are cut down so the whole run takes a couple of minutes on a CPU.
Pass a directory as the first argument to keep the artifacts.
"""

import sys
import tempfile
from pathlib import Path

from motionseq.cli import main

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="motionseq-"))
raw, work, gen = root / "raw", root / "work", root / "gen"
cfg = root / "demo.cfg"
cfg.parent.mkdir(parents=True, exist_ok=True)
cfg.write_text(
    "vq_steps = 1500\nvq_lr = 2e-3\nvq_restart_threshold = 50\n"
    "dec_steps = 600\ndec_lr = 2e-3\ncheckpoint_every = 500\n"
)
common = ["--config", str(cfg), "--out_dir", str(work)]

###############################################################################
# Data, normalisation and the manifest.

main(["synth-data", str(raw), "--n", "10", "--seconds", "5"])
main(["prepare", str(raw), str(work)] + common)

###############################################################################
# Stage 1 then stage 2. Both write a checkpoint and a CSV log next to it.

main(["train-vqvae"] + common)
main(["train-decoder"] + common)

###############################################################################
# One generated clip per track, then the metric report.

models = ["--decoder", str(work / "decoder.ckpt"), "--vqvae", str(work / "vqvae.ckpt")]
gen.mkdir(exist_ok=True)
for wav in sorted(raw.glob("*.wav")):
    main(["generate", "--config", str(cfg)] + models + ["--music", str(wav), "--out", str(gen / f"{wav.stem}.motb")])
main(["evaluate", "--config", str(cfg), "--real", str(raw), "--generated", str(gen), "--music", str(raw), "--report", str(root / "report.csv")])
print("artifacts in", root)
