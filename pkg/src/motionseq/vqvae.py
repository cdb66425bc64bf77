"""Stage 1: motion VQ-VAE.

A bidirectional transformer encoder maps each (stride-grouped) frame to a
latent, the latent snaps to its nearest codebook entry, and a causal transformer
decoder maps the quantised latents back to frames. Codebook collapse is
countered with k-means initialisation, EMA updates and random restarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalAbort, ValidationError
from .motion import MotionSequence, MotionStats, denormalize
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, alibi_bias, causal_mask
from .optim import AdamW, cosine_warmup_lr
from .seeding import make_rng


@dataclass
class VqVaeConfig:
    motion_dim: int = 64
    codebook_size: int = 64
    code_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    beta: float = 0.2
    huber_delta: float = 1.0
    stride: int = 1
    use_ema: bool = True
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    random_restart: bool = True
    restart_threshold: int = 256
    kmeans_init: bool = True
    kmeans_iters: int = 10

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValidationError("codebook_size: K must be >= 2")
        if self.code_dim % self.n_heads:
            raise ValidationError(f"code_dim: {self.code_dim} not divisible by n_heads={self.n_heads}")
        if self.beta < 0:
            raise ValidationError("beta: must be >= 0")
        if self.stride < 1:
            raise ValidationError("stride: must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValidationError("ema_decay: must be in [0, 1)")


@dataclass
class TokenSequence:
    """Codebook indices in ``[0, K)``, optionally terminated by ``EOS = K``."""

    indices: np.ndarray
    vocab_size: int
    has_eos: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        body = self.indices[:-1] if self.has_eos else self.indices
        if self.has_eos and (self.indices.size == 0 or self.indices[-1] != self.vocab_size):
            raise ValidationError("has_eos set but the last index is not EOS")
        if body.size and (body.min() < 0 or body.max() >= self.vocab_size):
            bad = int(body[(body < 0) | (body >= self.vocab_size)][0])
            raise ValidationError(f"token {bad} outside [0, {self.vocab_size}) (EOS only allowed at the end)")

    @property
    def eos(self) -> int:
        return self.vocab_size

    @property
    def body(self) -> np.ndarray:
        return self.indices[:-1] if self.has_eos else self.indices

    def __len__(self) -> int:
        return int(self.indices.size)

    def with_eos(self) -> TokenSequence:
        if self.has_eos:
            return self
        return TokenSequence(np.append(self.indices, self.vocab_size), self.vocab_size, True)


# codebook mechanics -------------------------------------------------------------


class Codebook:
    """``K x d`` entries plus EMA accumulators and per-entry staleness counters."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator, dtype=np.float32, trainable: bool = False):
        self.embed = Tensor(np.asarray(rng.standard_normal((size, dim)), dtype=dtype), requires_grad=trainable)
        self.cluster_size = np.ones(size, dtype=dtype)
        self.embed_sum = self.embed.data.copy()
        self.usage_age = np.zeros(size, dtype=np.int64)
        self.initialized = False

    @property
    def entries(self) -> np.ndarray:
        return self.embed.data

    @entries.setter
    def entries(self, value: np.ndarray) -> None:
        self.embed.data = np.asarray(value, dtype=self.embed.dtype)

    @property
    def size(self) -> int:
        return self.embed.shape[0]

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {
            "entries": self.entries,
            "cluster_size": self.cluster_size,
            "embed_sum": self.embed_sum,
            "usage_age": self.usage_age,
            "initialized": np.array([int(self.initialized)], dtype=np.int64),
        }

    def load_state_tensors(self, t: dict[str, np.ndarray]) -> None:
        if t["entries"].shape != self.embed.shape:
            raise ValidationError(f"codebook shape {t['entries'].shape} does not match model {self.embed.shape}")
        self.entries = t["entries"]
        self.cluster_size = np.array(t["cluster_size"], dtype=self.embed.dtype)
        self.embed_sum = np.array(t["embed_sum"], dtype=self.embed.dtype)
        self.usage_age = np.array(t["usage_age"], dtype=np.int64)
        self.initialized = bool(t["initialized"][0])


def squared_distances(z: np.ndarray, entries: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """``N x K`` squared Euclidean distances from explicit differences."""
    out = np.empty((z.shape[0], entries.shape[0]), dtype=np.result_type(z, entries))
    for s in range(0, z.shape[0], chunk):
        diff = z[s : s + chunk, None, :] - entries[None, :, :]
        out[s : s + chunk] = (diff * diff).sum(axis=-1)
    return out


def quantize(entries: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest entry per row of ``z`` (ties go to the lowest index)."""
    z = np.asarray(z)
    if z.shape[-1] != entries.shape[1]:
        raise ValidationError(f"latent dim {z.shape[-1]} does not match codebook dim {entries.shape[1]}")
    flat = z.reshape(-1, entries.shape[1])
    idx = np.argmin(squared_distances(flat, entries), axis=1)
    return entries[idx].reshape(z.shape), idx.reshape(z.shape[:-1])


def ema_update(codebook: Codebook, z: np.ndarray, indices: np.ndarray, decay: float = 0.99, eps: float = 1e-5) -> None:
    """``n_k <- decay n_k + (1-decay) count_k``; ``s_k <- decay s_k + (1-decay) sum_k``;
    ``e_k <- s_k / (n_k + eps)``."""
    z = np.asarray(z).reshape(-1, codebook.dim)
    idx = np.asarray(indices).reshape(-1)
    counts = np.bincount(idx, minlength=codebook.size).astype(codebook.embed.dtype)
    sums = np.zeros_like(codebook.embed_sum)
    np.add.at(sums, idx, z.astype(sums.dtype))
    a = np.asarray(decay, dtype=sums.dtype)
    codebook.cluster_size = a * codebook.cluster_size + (1 - a) * counts
    codebook.embed_sum = a * codebook.embed_sum + (1 - a) * sums
    codebook.entries = codebook.embed_sum / (codebook.cluster_size + np.asarray(eps, dtype=sums.dtype))[:, None]


def record_usage(codebook: Codebook, indices: np.ndarray) -> None:
    """Age every entry by one step and reset those selected in this batch."""
    codebook.usage_age += 1
    codebook.usage_age[np.unique(np.asarray(indices).reshape(-1))] = 0


def random_restart(codebook: Codebook, z: np.ndarray, threshold: int, rng: np.random.Generator) -> int:
    """Re-seed entries unused for more than ``threshold`` steps from random latents
    of the batch. Returns the number of entries restarted."""
    z = np.asarray(z).reshape(-1, codebook.dim)
    if z.shape[0] == 0:
        raise ValidationError("random_restart needs a non-empty batch")
    stale = np.flatnonzero(codebook.usage_age > threshold)
    if stale.size == 0:
        return 0
    picks = z[rng.integers(0, z.shape[0], size=stale.size)]
    entries = codebook.entries.copy()
    entries[stale] = picks
    codebook.entries = entries
    codebook.cluster_size[stale] = 1
    codebook.embed_sum[stale] = codebook.entries[stale]
    codebook.usage_age[stale] = 0
    return int(stale.size)


def kmeans_plus_plus(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = [z[rng.integers(n)]]
    d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(z[i])
        d2 = np.minimum(d2, ((z - z[i]) ** 2).sum(axis=1))
    return np.stack(centers)


def kmeans(z: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds; empty clusters take the point
    farthest from its current centre."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] < k:
        z = z[rng.integers(0, z.shape[0], size=k)]
    centers = kmeans_plus_plus(z, k, rng)
    for _ in range(iters):
        d = squared_distances(z, centers)
        assign = np.argmin(d, axis=1)
        near = d[np.arange(z.shape[0]), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = z[members].mean(axis=0)
            else:
                far = int(np.argmax(near))
                centers[c] = z[far]
                assign[far] = c
                near[far] = 0.0
    return centers


def kmeans_init(codebook: Codebook, z: np.ndarray, rng: np.random.Generator, iters: int = 10) -> None:
    z = np.asarray(z).reshape(-1, codebook.dim)
    codebook.entries = kmeans(z, codebook.size, rng, iters)
    codebook.cluster_size[:] = 1
    codebook.embed_sum = codebook.entries.copy()
    codebook.usage_age[:] = 0
    codebook.initialized = True


def perplexity(indices: np.ndarray, size: int) -> float:
    p = np.bincount(np.asarray(indices).reshape(-1), minlength=size) / max(1, np.asarray(indices).size)
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def usage_fraction(indices: np.ndarray, size: int) -> float:
    return np.unique(np.asarray(indices)).size / size


# model --------------------------------------------------------------------------


class Block(Module):
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype):
        self.attn_norm = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ffn_norm = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, rng, dtype)

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        x = x + self.attn(self.attn_norm(x), bias=bias)
        return x + self.ffn(self.ffn_norm(x))


@dataclass
class VqOutput:
    x_rec: Tensor
    z_e: Tensor
    z_q: Tensor
    indices: np.ndarray
    losses: dict[str, Tensor] = field(default_factory=dict)


class VqVae(Module):
    def __init__(self, cfg: VqVaeConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = make_rng(seed, "vqvae.init")
        d, s = cfg.code_dim, cfg.stride
        self.in_proj = Linear(cfg.motion_dim * s, d, rng, dtype)
        self.enc_blocks = [Block(d, cfg.n_heads, rng, dtype) for _ in range(cfg.n_layers)]
        self.enc_norm = LayerNorm(d, dtype)
        self.enc_out = Linear(d, d, rng, dtype)
        self.dec_in = Linear(d, d, rng, dtype)
        self.dec_blocks = [Block(d, cfg.n_heads, rng, dtype) for _ in range(cfg.n_layers)]
        self.dec_norm = LayerNorm(d, dtype)
        self.out_proj = Linear(d, cfg.motion_dim * s, rng, dtype)
        self.codebook = Codebook(cfg.codebook_size, d, rng, dtype, trainable=not cfg.use_ema)

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            yield name, p
        if self.codebook.embed.requires_grad:
            yield prefix + "codebook.entries", self.codebook.embed

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x.frames if isinstance(x, MotionSequence) else x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[-1] != self.cfg.motion_dim:
            raise ValidationError(f"motion has d_h={x.shape[-1]}, model expects {self.cfg.motion_dim}")
        return x

    def _group(self, x: np.ndarray) -> np.ndarray:
        b, t, d = x.shape
        s = self.cfg.stride
        if t % s:
            x = np.concatenate([x, np.repeat(x[:, -1:], s - t % s, axis=1)], axis=1)
        return x.reshape(b, -1, s * d)

    def encode(self, x) -> Tensor:
        """``(B, T, d_h)`` (or ``T x d_h``) normalised motion to ``(B, T/stride, d_c)`` latents."""
        g = self._group(self._as_batch(x))
        h = self.in_proj(Tensor(g))
        bias = alibi_bias(self.cfg.n_heads, h.shape[1], symmetric=True)
        for blk in self.enc_blocks:
            h = blk(h, bias)
        return self.enc_out(self.enc_norm(h))

    def decode(self, z_q, n_frames: int | None = None) -> Tensor:
        """Quantised latents to ``(B, T, d_h)`` frames; causal in the latent sequence."""
        z_q = z_q if isinstance(z_q, Tensor) else Tensor(np.asarray(z_q, dtype=self.dtype))
        if z_q.ndim == 2:
            z_q = z_q.reshape(1, *z_q.shape)
        if z_q.shape[-1] != self.cfg.code_dim:
            raise ValidationError(f"latent dim {z_q.shape[-1]} does not match d_c={self.cfg.code_dim}")
        b, t, _ = z_q.shape
        bias = alibi_bias(self.cfg.n_heads, t) + causal_mask(t)
        h = self.dec_in(z_q)
        for blk in self.dec_blocks:
            h = blk(h, bias)
        out = self.out_proj(self.dec_norm(h))
        s = self.cfg.stride
        if s > 1:
            out = out.reshape(b, t * s, self.cfg.motion_dim)
        if n_frames is not None and n_frames != out.shape[1]:
            out = ad.getitem(out, (slice(None), slice(0, n_frames)))
        return out

    def quantize(self, z_e: Tensor) -> tuple[Tensor, np.ndarray]:
        """Nearest-entry lookup. With EMA on, the result is a constant; otherwise it
        is differentiable with respect to the entries."""
        vals, idx = quantize(self.codebook.entries, z_e.data)
        if self.codebook.embed.requires_grad and ad.grad_enabled():
            return ad.gather(self.codebook.embed, idx), idx
        return Tensor(vals), idx

    def forward(self, x) -> VqOutput:
        xb = self._as_batch(x)
        z_e = self.encode(xb)
        z_q, idx = self.quantize(z_e)
        x_rec = self.decode(ad.straight_through(z_e, z_q.data), xb.shape[1])
        losses = vq_loss(Tensor(xb), x_rec, z_e, z_q, self.cfg.beta, self.cfg.use_ema, self.cfg.huber_delta)
        return VqOutput(x_rec, z_e, z_q, idx, losses)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.state_dict())
        out.pop("codebook.entries", None)
        out.update({f"codebook.{k}": v for k, v in self.codebook.state_tensors().items()})
        return out

    def load_state_tensors(self, t: dict[str, np.ndarray]) -> None:
        cb = {k[len("codebook.") :]: v for k, v in t.items() if k.startswith("codebook.")}
        self.codebook.load_state_tensors(cb)
        params = {k: v for k, v in t.items() if not k.startswith("codebook.")}
        if self.codebook.embed.requires_grad:
            params["codebook.entries"] = cb["entries"]
        self.load_state_dict(params)


def vq_loss(
    x: Tensor, x_rec: Tensor, z_e: Tensor, z_q: Tensor, beta: float, ema: bool = True, delta: float = 1.0
) -> dict[str, Tensor]:
    """Reconstruction (Huber) + codebook + beta * commitment, squared errors averaged.

    The codebook term ``mean((sg[z_e] - z_q)^2)`` is always reported; it only
    enters ``total`` when the codebook is learned by gradient (``ema=False``).
    """
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    recon = ad.huber(x_rec, x, delta)
    codebook = ad.mse(z_q, ad.stop_gradient(z_e))
    commit = ad.mse(z_e, ad.stop_gradient(z_q)) * beta
    total = recon + commit
    if not ema:
        total = total + codebook
    return {"total": total, "reconstruction": recon, "codebook": codebook, "commit": commit}


# tokenisation -------------------------------------------------------------------


def tokenize(model: VqVae, seq, append_eos: bool = False) -> TokenSequence:
    """Normalised ``T x d_h`` motion to one index per latent frame."""
    with ad.no_grad():
        z_e = model.encode(seq)
    _, idx = quantize(model.codebook.entries, z_e.data[0])
    tokens = TokenSequence(idx, model.cfg.codebook_size)
    return tokens.with_eos() if append_eos else tokens


def detokenize(model: VqVae, tokens, stats: MotionStats | None = None, fps: float = 20.0, name: str = "") -> MotionSequence:
    """Entries lookup, causal decode and (with ``stats``) de-normalisation. EOS is stripped."""
    if isinstance(tokens, TokenSequence):
        idx = tokens.body
    else:
        idx = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if idx.size and idx[-1] == model.cfg.codebook_size:
            idx = idx[:-1]
    if idx.size == 0:
        raise ValidationError("cannot detokenize an empty token sequence")
    TokenSequence(idx, model.cfg.codebook_size)
    with ad.no_grad():
        out = model.decode(model.codebook.entries[idx][None])
    seq = MotionSequence(out.data[0], fps, name)
    return denormalize(seq, stats) if stats is not None else seq


# training -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    window: int = 64
    lr: float = 2e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    max_grad_norm: float = 1.0
    seed: int = 0


class VqVaeTrainer:
    """Single-threaded stage-1 training loop with resumable state."""

    LOG_FIELDS = ("step", "lr", "total", "reconstruction", "codebook", "commit", "usage", "perplexity")

    def __init__(self, model: VqVae, data: list[np.ndarray], cfg: TrainConfig):
        if not data:
            raise ValidationError("no training sequences")
        self.model = model
        self.data = [np.asarray(d, dtype=model.dtype) for d in data]
        self.cfg = cfg
        self.window = min(cfg.window, min(d.shape[0] for d in self.data))
        self.rng = make_rng(cfg.seed, "vqvae.train")
        self.opt = AdamW(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
        self.step = 0
        self.log: list[dict] = []

    def sample_batch(self) -> np.ndarray:
        rows = []
        for i in self.rng.integers(0, len(self.data), size=self.cfg.batch_size):
            seq = self.data[i]
            start = int(self.rng.integers(0, seq.shape[0] - self.window + 1))
            rows.append(seq[start : start + self.window])
        return np.stack(rows)

    def train_step(self) -> dict:
        m, cb, mc = self.model, self.model.codebook, self.model.cfg
        batch = self.sample_batch()
        if mc.kmeans_init and not cb.initialized:
            with ad.no_grad():
                z0 = m.encode(batch).data
            kmeans_init(cb, z0, self.rng, mc.kmeans_iters)
        cb.initialized = True
        out = m.forward(batch)
        total = out.losses["total"]
        if not total.is_finite():
            raise NumericalAbort(f"non-finite loss at step {self.step}")
        lr = cosine_warmup_lr(self.step + 1, self.cfg.lr, self.cfg.warmup_steps, self.cfg.steps + 1)
        self.opt.zero_grad()
        ad.backward(total)
        try:
            self.opt.step(lr, self.cfg.max_grad_norm)
        except FloatingPointError as exc:
            raise NumericalAbort(str(exc)) from None
        if mc.use_ema:
            ema_update(cb, out.z_e.data, out.indices, mc.ema_decay, mc.ema_eps)
        record_usage(cb, out.indices)
        if mc.random_restart:
            random_restart(cb, out.z_e.data, mc.restart_threshold, self.rng)
        self.step += 1
        rec = {
            "step": self.step,
            "lr": lr,
            **{k: float(v.item()) for k, v in out.losses.items()},
            "usage": usage_fraction(out.indices, mc.codebook_size),
            "perplexity": perplexity(out.indices, mc.codebook_size),
        }
        self.log.append(rec)
        return rec

    def train(self, steps: int | None = None, callback=None) -> list[dict]:
        target = self.cfg.steps if steps is None else self.step + steps
        while self.step < target:
            rec = self.train_step()
            if callback is not None:
                callback(self, rec)
        return self.log


def dataset_usage(model: VqVae, data: list[np.ndarray]) -> float:
    """Fraction of entries selected at least once over one pass of ``data``."""
    used = set()
    for x in data:
        used.update(tokenize(model, x).indices.tolist())
    return len(used) / model.cfg.codebook_size


def reconstruction_error(model: VqVae, data: list[np.ndarray]) -> float:
    """Mean Huber loss of encode -> quantize -> decode over whole sequences."""
    vals = []
    with ad.no_grad():
        for x in data:
            out = model.forward(x)
            vals.append(out.losses["reconstruction"].item())
    return float(np.mean(vals))


def moving_average(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window

