"""Pipeline configuration: flat ``key = value`` files with typed, documented fields."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .checkpoint import config_from_text
from .decoder import POSITION_MODES, DecoderConfig, DecoderTrainConfig
from .errors import ValidationError
from .vqvae import TrainConfig, VqVaeConfig

SEED_ENV = "MOTIONSEQ_SEED"


def _f(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass
class PipelineConfig:
    # Widths, depths and batch sizes are desk scale; full-scale values are noted
    # per field (batch 128 for stage 1 and 64 for stage 2 at full scale).
    seed: int = _f(0, "master seed for every random stream")
    fps: float = _f(20.0, "motion frame rate after resampling")
    data_dir: str = _f("", "input directory for prepare")
    out_dir: str = _f("", "working directory holding manifest, checkpoints and logs")

    vq_codebook_size: int = _f(64, "codebook entries K (1024 at full scale)")
    vq_code_dim: int = _f(32, "latent width d_c (768 at full scale)")
    vq_layers: int = _f(2, "encoder and decoder transformer layers")
    vq_heads: int = _f(4, "attention heads per VQ-VAE layer")
    vq_beta: float = _f(0.2, "commitment weight")
    vq_huber_delta: float = _f(1.0, "Huber threshold of the reconstruction loss")
    vq_stride: int = _f(1, "temporal downsampling between frames and tokens")
    vq_use_ema: bool = _f(True, "EMA codebook updates")
    vq_ema_decay: float = _f(0.99, "EMA decay")
    vq_random_restart: bool = _f(True, "re-seed stale codebook entries from the batch")
    vq_restart_threshold: int = _f(256, "steps without use before an entry is restarted")
    vq_kmeans_init: bool = _f(True, "k-means initialisation on the first batch")
    vq_steps: int = _f(5000, "stage-1 optimisation steps")
    vq_batch_size: int = _f(8, "stage-1 batch size")
    vq_window: int = _f(64, "stage-1 crop length in frames")
    vq_lr: float = _f(2e-4, "stage-1 peak learning rate")
    vq_warmup: int = _f(100, "stage-1 warmup steps")

    dec_d_model: int = _f(64, "decoder width d_k (768 at full scale)")
    dec_layers: int = _f(2, "decoder layers (12 at full scale)")
    dec_heads: int = _f(4, "decoder heads (8 at full scale)")
    dec_position: str = _f("alibi", "position mode: alibi or absolute")
    dec_use_style: bool = _f(False, "enable style modulation")
    dec_style_dim: int = _f(512, "style embedding width d_s")
    dec_steps: int = _f(5000, "stage-2 optimisation steps")
    dec_batch_size: int = _f(8, "stage-2 batch size")
    dec_window: int = _f(64, "stage-2 crop length in tokens")
    dec_lr: float = _f(2e-4, "stage-2 peak learning rate")
    dec_warmup: int = _f(100, "stage-2 warmup steps")

    beta1: float = _f(0.9, "AdamW first-moment decay")
    beta2: float = _f(0.999, "AdamW second-moment decay")
    weight_decay: float = _f(0.0, "AdamW decoupled weight decay on matrices")
    max_grad_norm: float = _f(1.0, "global gradient-norm clip")
    checkpoint_every: int = _f(500, "steps between periodic checkpoints")

    audio_source: str = _f("librosa", "conditioning: librosa (35-d from WAV) or precomputed (128-d files)")
    sample_rate: int = _f(16000, "analysis sample rate")
    n_fft: int = _f(1024, "STFT window length")
    n_mels: int = _f(40, "mel bands before the DCT")
    test_fraction: float = _f(0.1, "share of pairs held out as test")

    sampling: str = _f("greedy", "generation sampler: greedy or multinomial")
    temperature: float = _f(1.0, "multinomial temperature")
    first_token: str = _f("prior", "first token without a seed: prior or uniform")
    beat_sigma: float = _f(3.0, "beat-alignment Gaussian width in frames")
    eval_repeats: int = _f(20, "repetitions of seeded metrics")
    eval_pairs: int = _f(100, "random pairs per diversity estimate")

    def validate(self) -> PipelineConfig:
        checks = [
            ("fps", self.fps > 0, "must be positive"),
            ("vq_codebook_size", self.vq_codebook_size >= 2, "K must be >= 2"),
            ("vq_code_dim", self.vq_code_dim % max(self.vq_heads, 1) == 0, f"not divisible by vq_heads={self.vq_heads}"),
            ("vq_heads", self.vq_heads >= 1, "must be >= 1"),
            ("vq_layers", self.vq_layers >= 1, "must be >= 1"),
            ("vq_beta", self.vq_beta >= 0, "must be >= 0"),
            ("vq_stride", self.vq_stride >= 1, "must be >= 1"),
            ("vq_ema_decay", 0 <= self.vq_ema_decay < 1, "must be in [0, 1)"),
            ("vq_steps", self.vq_steps > self.vq_warmup, "must exceed vq_warmup"),
            ("dec_heads", self.dec_heads >= 1, "must be >= 1"),
            ("dec_d_model", self.dec_d_model % max(self.dec_heads, 1) == 0, f"not divisible by dec_heads={self.dec_heads}"),
            ("dec_layers", self.dec_layers >= 1, "must be >= 1"),
            ("dec_position", self.dec_position in POSITION_MODES, f"expected one of {POSITION_MODES}"),
            ("dec_steps", self.dec_steps > self.dec_warmup, "must exceed dec_warmup"),
            ("audio_source", self.audio_source in ("librosa", "precomputed"), "expected librosa or precomputed"),
            ("sampling", self.sampling in ("greedy", "multinomial"), "expected greedy or multinomial"),
            ("first_token", self.first_token in ("prior", "uniform"), "expected prior or uniform"),
            ("temperature", self.temperature >= 0, "must be >= 0"),
            ("test_fraction", 0 <= self.test_fraction < 1, "must be in [0, 1)"),
            ("beat_sigma", self.beat_sigma > 0, "must be positive"),
            ("eval_repeats", self.eval_repeats >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValidationError(f"{name}: {msg} (got {getattr(self, name)!r})")
        for name in ("vq_batch_size", "vq_window", "dec_batch_size", "dec_window", "checkpoint_every", "eval_pairs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name}: must be >= 1 (got {getattr(self, name)!r})")
        return self

    # views onto the module configs

    def vqvae_config(self, motion_dim: int) -> VqVaeConfig:
        return VqVaeConfig(
            motion_dim=motion_dim,
            codebook_size=self.vq_codebook_size,
            code_dim=self.vq_code_dim,
            n_layers=self.vq_layers,
            n_heads=self.vq_heads,
            beta=self.vq_beta,
            huber_delta=self.vq_huber_delta,
            stride=self.vq_stride,
            use_ema=self.vq_use_ema,
            ema_decay=self.vq_ema_decay,
            random_restart=self.vq_random_restart,
            restart_threshold=self.vq_restart_threshold,
            kmeans_init=self.vq_kmeans_init,
        )

    def vq_train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.vq_steps,
            batch_size=self.vq_batch_size,
            window=self.vq_window,
            lr=self.vq_lr,
            warmup_steps=self.vq_warmup,
            weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2),
            max_grad_norm=self.max_grad_norm,
            seed=self.seed,
        )

    def decoder_config(self, codebook_size: int, cond_dim: int) -> DecoderConfig:
        return DecoderConfig(
            codebook_size=codebook_size,
            d_model=self.dec_d_model,
            n_layers=self.dec_layers,
            n_heads=self.dec_heads,
            cond_dim=cond_dim,
            style_dim=self.dec_style_dim,
            use_style=self.dec_use_style,
            position=self.dec_position,
        )

    def decoder_train_config(self) -> DecoderTrainConfig:
        return DecoderTrainConfig(
            steps=self.dec_steps,
            batch_size=self.dec_batch_size,
            window=self.dec_window,
            lr=self.dec_lr,
            warmup_steps=self.dec_warmup,
            weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2),
            max_grad_norm=self.max_grad_norm,
            seed=self.seed,
        )

    def to_dict(self) -> dict[str, str]:
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
FIELD_DOCS = {f.name: f.metadata["doc"] for f in fields(PipelineConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(name: str, raw: str):
    kind = FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValidationError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def from_mapping(values: dict[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    parsed = {k: parse_value(k, v) for k, v in values.items()}
    return dataclasses.replace(base or PipelineConfig(), **parsed)


def load_config(path=None, overrides: dict[str, str] | None = None, env=None) -> PipelineConfig:
    """File values, then explicit overrides, then ``MOTIONSEQ_SEED``; validated."""
    env = os.environ if env is None else env
    cfg = PipelineConfig()
    if path is not None:
        cfg = from_mapping(config_from_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = from_mapping(overrides, cfg)
    if env.get(SEED_ENV):
        cfg = from_mapping({"seed": env[SEED_ENV]}, cfg)
    return cfg.validate()


def config_text(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"# {FIELD_DOCS[f.name]}")
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
