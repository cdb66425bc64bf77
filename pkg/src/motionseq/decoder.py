"""Stage 2: autoregressive decoder over motion tokens.

Each layer applies, in order: causal self-attention (ALiBi bias or absolute
sinusoidal positions), cross-attention to the music track restricted to rows at
or before the current step, optional style modulation, and a feed-forward block.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalAbort, ValidationError
from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    alibi_bias,
    causal_mask,
    sinusoidal_positions,
)
from .optim import AdamW, cosine_warmup_lr
from .seeding import make_rng
from .vqvae import TokenSequence

POSITION_MODES = ("alibi", "absolute")


@dataclass
class DecoderConfig:
    codebook_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    cond_dim: int = 35
    style_dim: int = 512
    use_style: bool = False
    position: str = "alibi"

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + 1

    @property
    def eos(self) -> int:
        return self.codebook_size

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValidationError("codebook_size: K must be >= 2")
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model: {self.d_model} not divisible by n_heads={self.n_heads}")
        if self.position not in POSITION_MODES:
            raise ValidationError(f"position: expected one of {POSITION_MODES}, got '{self.position}'")


# style ------------------------------------------------------------------------


@dataclass
class StyleEmbedding:
    vector: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValidationError(f"style embedding '{self.label}' is not finite")


def hash_style_embedding(label: str, dim: int = 512) -> StyleEmbedding:
    """Deterministic stand-in for a text encoder: a unit-norm Gaussian vector
    seeded by the SHA-256 of the label."""
    seed = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    v = np.random.Generator(np.random.Philox(seed)).standard_normal(dim)
    return StyleEmbedding(v / np.linalg.norm(v), label)


def style_modulate(a: Tensor, style_proj: Tensor) -> Tensor:
    """``proj(xi) * a[t] / |a[t]|`` per time step.

    ``style_proj`` is ``(d,)`` or ``(B, d)`` for a ``(B, T, d)`` input. Rows with
    norm below 1e-8 come out as zeros.
    """
    if style_proj.ndim == 1:
        scale = style_proj
    else:
        scale = style_proj.reshape(style_proj.shape[0], 1, style_proj.shape[1])
    return ad.l2_normalize(a) * scale


# model ------------------------------------------------------------------------


def self_attention_bias(n_heads: int, t: int, position: str) -> np.ndarray:
    """``(H, t, t)`` additive term: ALiBi ``-m (i - j)`` (alibi mode) plus the causal mask."""
    mask = causal_mask(t)
    if position == "alibi":
        return alibi_bias(n_heads, t) + mask
    return np.broadcast_to(mask, (n_heads, t, t))


def cross_attention_bias(n_heads: int, t: int, t_cond: int, position: str) -> np.ndarray:
    """Position ``i`` predicts token ``i + 1`` and may see conditioning rows
    ``j <= i + 1``; alibi mode adds the recency bias ``-m (i + 1 - j)``."""
    mask = causal_mask(t + 1, t_cond)[1:]
    if position == "alibi":
        return alibi_bias(n_heads, t + 1, t_cond)[:, 1:] + mask
    return np.broadcast_to(mask, (n_heads, t, t_cond))


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype):
        d = cfg.d_model
        self.self_norm = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, rng, dtype)
        self.cross_norm = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, rng, dtype)
        self.style_proj = Linear(cfg.style_dim, d, rng, dtype) if cfg.use_style else None
        self.ffn_norm = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, rng, dtype)

    def __call__(self, x, cond, self_bias, cross_bias, style: Tensor | None) -> Tensor:
        x = x + self.self_attn(self.self_norm(x), bias=self_bias)
        x = x + self.cross_attn(self.cross_norm(x), kv=cond, bias=cross_bias)
        if style is not None and self.style_proj is not None:
            x = style_modulate(x, self.style_proj(style))
        return x + self.ffn(self.ffn_norm(x))


class MotionSeqDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = make_rng(seed, "decoder.init")
        d = cfg.d_model
        self.token_emb = Embedding(cfg.vocab_size, d, rng, dtype)
        self.cond_proj = Linear(cfg.cond_dim, d, rng, dtype)
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.vocab_size, rng, dtype)
        # Buffers: conditioning standardisation and the first-token prior.
        self.cond_mean = np.zeros(cfg.cond_dim)
        self.cond_std = np.ones(cfg.cond_dim)
        self.first_token_logits = np.zeros(cfg.codebook_size)

    def fit_conditioning(self, tracks: list[np.ndarray]) -> None:
        allc = np.concatenate([np.asarray(t, dtype=np.float64) for t in tracks])
        self.cond_mean = allc.mean(axis=0)
        self.cond_std = np.maximum(allc.std(axis=0), 1e-3)

    def fit_first_tokens(self, first_tokens) -> None:
        counts = np.bincount(np.asarray(first_tokens, dtype=np.int64), minlength=self.cfg.codebook_size)
        self.first_token_logits = np.log((counts + 0.01) / (counts.sum() + 0.01 * self.cfg.codebook_size))

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            "cond_mean": self.cond_mean,
            "cond_std": self.cond_std,
            "first_token_logits": self.first_token_logits,
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {**self.state_dict(), **{f"buffer.{k}": v for k, v in self.buffers().items()}}

    def load_state_tensors(self, t: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: v for k, v in t.items() if not k.startswith("buffer.")})
        for k in self.buffers():
            setattr(self, k, np.array(t[f"buffer.{k}"], dtype=np.float64))

    def _inputs(self, tokens, cond, style):
        tok = np.asarray(tokens, dtype=np.int64)
        if tok.ndim == 1:
            tok = tok[None]
        c = np.asarray(cond, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        if c.shape[-1] != self.cfg.cond_dim:
            raise ValidationError(f"conditioning has d={c.shape[-1]}, model expects {self.cfg.cond_dim}")
        if c.shape[1] < tok.shape[1]:
            raise ValidationError(f"conditioning has {c.shape[1]} rows for {tok.shape[1]} tokens")
        if c.shape[0] != tok.shape[0]:
            c = np.broadcast_to(c, (tok.shape[0], *c.shape[1:]))
        if tok.size and (tok.min() < 0 or tok.max() >= self.cfg.vocab_size):
            raise ValidationError(f"token index outside [0, {self.cfg.vocab_size})")
        c = ((c - self.cond_mean) / self.cond_std).astype(self.dtype)
        s = None
        if style is not None and self.cfg.use_style:
            s = np.asarray(style.vector if isinstance(style, StyleEmbedding) else style, dtype=self.dtype)
            if s.shape[-1] != self.cfg.style_dim:
                raise ValidationError(f"style embedding has d={s.shape[-1]}, model expects {self.cfg.style_dim}")
            s = Tensor(s.reshape(-1, self.cfg.style_dim))
        return tok, c, s

    def forward(self, tokens, cond, style=None) -> Tensor:
        """Logits ``(B, T, K + 1)`` for the token following each position."""
        tok, c, s = self._inputs(tokens, cond, style)
        b, t = tok.shape
        cfg = self.cfg
        x = self.token_emb(tok)
        kv = self.cond_proj(Tensor(c))
        if cfg.position == "absolute":
            x = x + sinusoidal_positions(t, cfg.d_model).astype(self.dtype)
            kv = kv + sinusoidal_positions(c.shape[1], cfg.d_model).astype(self.dtype)
        sb = self_attention_bias(cfg.n_heads, t, cfg.position)
        cb = cross_attention_bias(cfg.n_heads, t, c.shape[1], cfg.position)
        for layer in self.layers:
            x = layer(x, kv, sb, cb, s)
        return self.head(self.final_norm(x))

    __call__ = forward


def next_token_targets(tokens, eos: int) -> np.ndarray:
    """``[s_2, ..., s_T, EOS]`` for input ``[s_1, ..., s_T]`` (per row)."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None]
    return np.concatenate([tok[:, 1:], np.full((tok.shape[0], 1), eos)], axis=1)


def gpt_loss(logits: Tensor, tokens, eos: int | None = None) -> Tensor:
    """Mean NLL of the left-shifted tokens with EOS as the final target."""
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.shape[-1] < 2:
        raise ValidationError("gpt_loss needs at least 2 tokens")
    eos = logits.shape[-1] - 1 if eos is None else eos
    return ad.cross_entropy(logits, next_token_targets(tok, eos))


# generation -------------------------------------------------------------------


def _pick(logits: np.ndarray, sampling: str, temperature: float, rng: np.random.Generator) -> int:
    if sampling == "greedy" or temperature <= 1e-8:
        return int(np.argmax(logits))
    if sampling != "multinomial":
        raise ValidationError(f"unknown sampling mode '{sampling}'")
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(p.size, p=p))


def hold_rows(cond: np.ndarray, length: int) -> np.ndarray:
    """Trim or edge-hold to exactly ``length`` rows, silently."""
    if cond.shape[0] >= length:
        return cond[:length]
    return np.concatenate([cond, np.repeat(cond[-1:], length - cond.shape[0], axis=0)])


def extend_condition(cond: np.ndarray, length: int) -> np.ndarray:
    cond = np.asarray(cond)
    if cond.shape[0] >= length:
        return cond
    warnings.warn(
        f"conditioning has {cond.shape[0]} rows, extending to {length} by repeating the last row", RuntimeWarning, stacklevel=3
    )
    return np.concatenate([cond, np.repeat(cond[-1:], length - cond.shape[0], axis=0)])


def generate(
    model: MotionSeqDecoder,
    cond,
    style=None,
    target_len: int = 1,
    sampling: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    seed_token: int | None = None,
    first_token: str = "prior",
    stop_at_eos: bool = True,
) -> TokenSequence:
    """Autoregressive sampling; token ``t`` is drawn from logits that see
    ``tokens[:t]`` and conditioning rows ``0..t``.

    Without ``seed_token`` the first token is drawn with the chosen sampler from
    the model's first-token prior (``first_token="prior"``) or uniformly from
    ``[0, K)`` (``"uniform"``). With ``stop_at_eos=False`` EOS is never emitted and
    exactly ``target_len`` tokens are produced.
    """
    if target_len < 1:
        raise ValidationError("target_len must be >= 1")
    feats = cond.features if hasattr(cond, "features") else cond
    feats = extend_condition(feats, target_len)
    rng = make_rng(seed, "generate")
    k = model.cfg.codebook_size
    if seed_token is not None:
        if not 0 <= seed_token < k:
            raise ValidationError(f"seed_token {seed_token} outside [0, {k})")
        first = int(seed_token)
    elif first_token == "uniform":
        first = int(rng.integers(0, k))
    elif first_token == "prior":
        first = _pick(model.first_token_logits, sampling, temperature, rng)
    else:
        raise ValidationError(f"unknown first_token mode '{first_token}'")
    tokens = [first]
    ended = False
    with ad.no_grad():
        while len(tokens) < target_len:
            t = len(tokens)
            logits = model.forward(np.array(tokens)[None], feats[None, : t + 1], style).data[0, -1].copy()
            if not stop_at_eos:
                logits[k] = -np.inf
            nxt = _pick(logits, sampling, temperature, rng)
            if nxt == k:
                ended = True
                break
            tokens.append(nxt)
    if ended:
        tokens.append(k)
    return TokenSequence(tokens, k, has_eos=ended)


def chain_generate(
    model: MotionSeqDecoder,
    cond_list,
    style=None,
    per_segment_len: int = 1,
    sampling: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    stop_at_eos: bool = False,
    seed_token: int | None = None,
    first_token: str = "prior",
) -> tuple[TokenSequence, list[TokenSequence]]:
    """Generate one segment per conditioning chunk, seeding each segment after the
    first with the last token of its predecessor. Returns the concatenation
    (EOS markers dropped) and the individual segments."""
    if not cond_list:
        raise ValidationError("cond_list must not be empty")
    segments: list[TokenSequence] = []
    for i, cond in enumerate(cond_list):
        seg = generate(
            model, cond, style, per_segment_len, sampling, temperature, seed + i, seed_token, first_token, stop_at_eos
        )
        segments.append(seg)
        seed_token = int(seg.body[-1])
    joined = np.concatenate([s.body for s in segments])
    return TokenSequence(joined, model.cfg.codebook_size), segments


# training ---------------------------------------------------------------------


@dataclass
class DecoderTrainConfig:
    steps: int = 5000
    batch_size: int = 8
    window: int = 64
    lr: float = 2e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    max_grad_norm: float = 1.0
    seed: int = 0


@dataclass
class DecoderExample:
    tokens: np.ndarray
    cond: np.ndarray
    style: np.ndarray | None = None
    ends: bool = True


class DecoderTrainer:
    """Teacher-forced NLL training on random windows of (tokens, music) pairs.

    A window ending at the sequence end has EOS as its final target; other
    windows are trained on the true next token.
    """

    LOG_FIELDS = ("step", "lr", "nll", "accuracy")

    def __init__(self, model: MotionSeqDecoder, examples: list[DecoderExample], cfg: DecoderTrainConfig):
        if not examples:
            raise ValidationError("no training examples")
        self.model = model
        self.examples = []
        for ex in examples:
            tok = np.asarray(ex.tokens, dtype=np.int64)
            if tok.size < 2:
                raise ValidationError("every training sequence needs at least 2 tokens")
            full = np.append(tok, model.cfg.eos) if ex.ends else tok
            # One row per entry of ``full`` so every window also carries the row
            # of the token it predicts last.
            cond = hold_rows(np.asarray(ex.cond), full.size)
            self.examples.append((tok, full, cond, ex.style, ex.ends))
        self.cfg = cfg
        self.rng = make_rng(cfg.seed, "decoder.train")
        self.opt = AdamW(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
        self.step = 0
        self.log: list[dict] = []

    def sample_batch(self):
        # One window length per batch keeps the batch rectangular.
        picks = self.rng.integers(0, len(self.examples), size=self.cfg.batch_size)
        n_in = min(self.cfg.window, min(self.examples[i][1].size - 1 for i in picks))
        toks, tgts, conds, styles = [], [], [], []
        for i in picks:
            tok, full, cond, style, _ = self.examples[i]
            start = int(self.rng.integers(0, full.size - n_in))
            toks.append(full[start : start + n_in])
            tgts.append(full[start + 1 : start + n_in + 1])
            conds.append(cond[start : start + n_in + 1])
            styles.append(style)
        style = None if any(s is None for s in styles) else np.stack(styles)
        return np.stack(toks), np.stack(tgts), np.stack(conds), style

    def train_step(self) -> dict:
        tok, tgt, cond, style = self.sample_batch()
        logits = self.model.forward(tok, cond, style)
        loss = ad.cross_entropy(logits, tgt)
        if not loss.is_finite():
            raise NumericalAbort(f"non-finite loss at step {self.step}")
        lr = cosine_warmup_lr(self.step + 1, self.cfg.lr, self.cfg.warmup_steps, self.cfg.steps + 1)
        self.opt.zero_grad()
        ad.backward(loss)
        try:
            self.opt.step(lr, self.cfg.max_grad_norm)
        except FloatingPointError as exc:
            raise NumericalAbort(str(exc)) from None
        self.step += 1
        acc = float((logits.data.argmax(axis=-1) == tgt).mean())
        rec = {"step": self.step, "lr": lr, "nll": float(loss.item()), "accuracy": acc}
        self.log.append(rec)
        return rec

    def train(self, steps: int | None = None, callback=None) -> list[dict]:
        target = self.cfg.steps if steps is None else self.step + steps
        while self.step < target:
            rec = self.train_step()
            if callback is not None:
                callback(self, rec)
        return self.log


def evaluate_nll(model: MotionSeqDecoder, tokens, cond, style=None, ends: bool = True) -> tuple[float, float]:
    """Teacher-forced NLL and next-token accuracy on one whole sequence."""
    tok = np.asarray(tokens, dtype=np.int64)
    full = np.append(tok, model.cfg.eos) if ends else tok
    inp, tgt = full[:-1], full[1:]
    cond = hold_rows(np.asarray(cond), full.size)
    with ad.no_grad():
        logits = model.forward(inp[None], cond[None], style)
        nll = ad.cross_entropy(logits, tgt[None]).item()
    acc = float((logits.data[0].argmax(axis=-1) == tgt).mean())
    return nll, acc


# length-extrapolation ablation ------------------------------------------------


def periodic_token_task(rng: np.random.Generator, perm: np.ndarray, n: int, length: int) -> list[np.ndarray]:
    """Sequences following ``s[t+1] = perm[s[t]]`` from random starts; each one is
    periodic with the cycle length of its start under ``perm``."""
    out = []
    for _ in range(n):
        x = np.empty(length, dtype=np.int64)
        x[0] = rng.integers(0, perm.size)
        for t in range(1, length):
            x[t] = perm[x[t - 1]]
        out.append(x)
    return out


def extrapolation_ablation(
    seed: int,
    train_len: int = 32,
    test_len: int = 128,
    vocab: int = 16,
    steps: int = 400,
    n_train: int = 64,
    n_test: int = 16,
) -> dict[str, float]:
    """Train one model per position mode on windows of ``train_len`` tokens and
    return each mode's teacher-forced next-token accuracy at ``test_len``."""
    rng = make_rng(seed, "ablation.data")
    perm = rng.permutation(vocab)
    train = periodic_token_task(rng, perm, n_train, train_len + 1)
    test = periodic_token_task(make_rng(seed, "ablation.test"), perm, n_test, test_len + 1)
    result = {}
    for pos in POSITION_MODES:
        cfg = DecoderConfig(codebook_size=vocab, d_model=32, n_layers=2, n_heads=4, cond_dim=4, position=pos)
        model = MotionSeqDecoder(cfg, seed=seed)
        exs = [DecoderExample(s, np.zeros((s.size, 4)), ends=False) for s in train]
        tcfg = DecoderTrainConfig(steps=steps, batch_size=16, window=train_len, lr=3e-3, warmup_steps=20, seed=seed)
        DecoderTrainer(model, exs, tcfg).train()
        result[pos] = float(np.mean([evaluate_nll(model, s, np.zeros((s.size, 4)), ends=False)[1] for s in test]))
    return result
