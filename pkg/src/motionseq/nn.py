"""Transformer building blocks on top of :mod:`motionseq.autodiff`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container. Parameters are ``Tensor`` attributes with
    ``requires_grad``; sub-modules may be attributes or lists of modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter '{k}': stored shape {arr.shape}, model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = _param(rng.standard_normal((d_in, d_out)) / math.sqrt(d_in), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = _param(rng.standard_normal((n, d)) * 0.5, dtype)

    def __call__(self, idx) -> Tensor:
        return ad.gather(self.weight, idx)


class FeedForward(Module):
    """``d -> 4d -> d`` with GELU."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32, mult: int = 4):
        self.up = Linear(d, mult * d, rng, dtype)
        self.down = Linear(mult * d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


# positional terms -------------------------------------------------------------


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Head slopes ``2^(-8 i / n)`` for ``i = 1..n``: a geometric sequence whose
    first term and ratio are both ``2^(-8/n)``."""
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    return np.array([2.0 ** (-8.0 * i / n_heads) for i in range(1, n_heads + 1)])


def alibi_bias(n_heads: int, t_q: int, t_k: int | None = None, symmetric: bool = False) -> np.ndarray:
    """``(heads, t_q, t_k)`` bias ``-m_h * (i - j)``.

    With ``symmetric`` the distance is ``|i - j|`` (used by the bidirectional
    encoder). Otherwise entries with ``j > i`` are left at ``+m(j - i)`` and are
    expected to be masked.
    """
    t_k = t_q if t_k is None else t_k
    dist = np.arange(t_q)[:, None] - np.arange(t_k)[None, :]
    if symmetric:
        dist = np.abs(dist)
    return -alibi_slopes(n_heads)[:, None, None] * dist[None, :, :]


def causal_mask(t_q: int, t_k: int | None = None) -> np.ndarray:
    """Additive mask: 0 where key ``j <= i``, ``-inf`` where ``j > i``."""
    t_k = t_q if t_k is None else t_k
    future = np.arange(t_k)[None, :] > np.arange(t_q)[:, None]
    return np.where(future, -np.inf, 0.0)


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((t, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: d // 2])
    return out


# attention --------------------------------------------------------------------


class MultiHeadAttention(Module):
    """Scaled dot-product attention with an optional additive per-head bias.

    ``logits = Q K^T / sqrt(d_head) + bias``; masked entries are ``-inf`` and
    receive exactly zero weight.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, d_kv: int | None = None):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng, dtype)
        self.k = Linear(d_kv, d_model, rng, dtype)
        self.v = Linear(d_kv, d_model, rng, dtype)
        self.o = Linear(d_model, d_model, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, kv: Tensor | None = None, bias: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        scale = 1.0 / math.sqrt(d // self.n_heads)
        logits = ad.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        if bias is not None:
            logits = logits + np.asarray(bias, dtype=x.dtype)
        w = ad.softmax(logits, axis=-1)
        self.last_weights = w.data
        heads = ad.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.o(heads)
