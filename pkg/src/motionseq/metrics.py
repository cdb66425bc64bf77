"""Evaluation metrics: motion feature extractors, FID, diversity, beat alignment,
R-precision and multimodal distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .motion import MotionSequence
from .seeding import make_rng

EXTRACTORS = ("kinetic", "geometric", "external")


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor: str = "external"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-d, got {f.shape}")
        if f.shape[1] < 2:
            raise ValidationError("feature vectors need at least 2 entries")
        if not np.all(np.isfinite(f)):
            raise ValidationError(f"{self.extractor} features contain non-finite values")
        if self.extractor not in EXTRACTORS:
            raise ValidationError(f"unknown extractor tag '{self.extractor}'")
        self.features = f

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _frames(seq) -> tuple[np.ndarray, float]:
    if isinstance(seq, MotionSequence):
        return seq.frames.astype(np.float64), seq.fps
    return np.asarray(seq, dtype=np.float64), 20.0


# extractors -------------------------------------------------------------------


def kinetic_features(seq, fps: float | None = None) -> np.ndarray:
    """Per channel mean squared velocity then mean squared acceleration, both
    from forward differences scaled to units per second."""
    x, seq_fps = _frames(seq)
    fps = seq_fps if fps is None else fps
    if x.shape[0] < 3:
        raise ValidationError(f"kinetic features need T >= 3, got {x.shape[0]}")
    vel = np.diff(x, axis=0) * fps
    acc = np.diff(x, n=2, axis=0) * fps**2
    return np.concatenate([np.mean(vel**2, axis=0), np.mean(acc**2, axis=0)])


@dataclass
class GeometricConfig:
    """Joint-mode relations: each listed pair contributes one "closer than
    ``distance_threshold``" flag and one ordering flag per axis."""

    n_joints: int | None = None
    pairs: list[tuple[int, int]] | None = None
    distance_threshold: float = 0.1

    def relation_pairs(self) -> list[tuple[int, int]]:
        if self.pairs is not None:
            return list(self.pairs)
        j = self.n_joints or 0
        return [(a, b) for a in range(j) for b in range(a + 1, j)]


def geometric_features(seq, cfg: GeometricConfig | None = None) -> np.ndarray:
    """Time-averaged boolean joint relations, or per-channel mean and std when the
    channels cannot be read as ``J x 3`` coordinates."""
    x, _ = _frames(seq)
    cfg = cfg or GeometricConfig()
    if cfg.n_joints is None or x.shape[1] != 3 * cfg.n_joints:
        return np.concatenate([x.mean(axis=0), x.std(axis=0)])
    joints = x.reshape(x.shape[0], cfg.n_joints, 3)
    rel = []
    for a, b in cfg.relation_pairs():
        diff = joints[:, a] - joints[:, b]
        rel.append(np.linalg.norm(diff, axis=1) < cfg.distance_threshold)
        rel.extend(diff[:, k] > 0 for k in range(3))
    return np.mean(np.stack(rel, axis=1), axis=0)


def feature_set(seqs, extractor: str, cfg: GeometricConfig | None = None) -> FeatureSet:
    if not seqs:
        raise ValidationError("no sequences to extract features from")
    if extractor == "kinetic":
        rows = [kinetic_features(s) for s in seqs]
    elif extractor == "geometric":
        rows = [geometric_features(s, cfg) for s in seqs]
    else:
        raise ValidationError(f"extractor must be 'kinetic' or 'geometric', got '{extractor}'")
    return FeatureSet(np.stack(rows), extractor)


# distribution distances -------------------------------------------------------


def gaussian_summary(features) -> GaussianSummary:
    f = features.features if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValidationError(f"gaussian summary needs N >= 2 rows, got {f.shape[0]}")
    mu = f.mean(axis=0)
    c = f - mu
    cov = c.T @ c / (f.shape[0] - 1)
    return GaussianSummary(mu, (cov + cov.T) / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((S_a S_b)^(1/2))`` is computed as the trace of the PSD square root of
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues and is symmetric.
    """
    if a.dim != b.dim:
        raise ValidationError(f"fid: dimension mismatch {a.dim} vs {b.dim}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.cov))):
            raise ValidationError("fid: non-finite summary")
    ra = _psd_sqrt(a.cov)
    cross = np.trace(_psd_sqrt(ra @ b.cov @ ra))
    d = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    if d < 0:
        if d < -1e-6:
            raise ValidationError(f"fid: negative distance {d}")
        d = 0.0
    return d


def feature_fid(real: FeatureSet, gen: FeatureSet, normalize: bool = True) -> float:
    """FID with both sets standardised by the real set's per-feature statistics."""
    r, g = real.features, gen.features
    if normalize:
        mu, sd = r.mean(axis=0), r.std(axis=0)
        sd = np.where(sd < 1e-8, 1.0, sd)
        r, g = (r - mu) / sd, (g - mu) / sd
    return fid(gaussian_summary(r), gaussian_summary(g))


def diversity(features, n_pairs: int | None = None, seed: int = 0) -> float:
    """Mean Euclidean distance over ``n_pairs`` seeded random distinct pairs; all
    pairs when ``n_pairs`` is None or at least the number of distinct pairs."""
    f = features.features if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    if n < 2:
        raise ValidationError("diversity needs N >= 2")
    ii, jj = np.triu_indices(n, k=1)
    if n_pairs is not None:
        if n_pairs < 1:
            raise ValidationError("n_pairs must be >= 1")
        if n_pairs < ii.size:
            pick = make_rng(seed, "diversity").choice(ii.size, size=n_pairs, replace=False)
            ii, jj = ii[pick], jj[pick]
    return float(np.mean(np.linalg.norm(f[ii] - f[jj], axis=1)))


# beats ------------------------------------------------------------------------


def aggregate_speed(seq) -> np.ndarray:
    """Per-frame L2 norm of the centred frame-difference vector."""
    x, _ = _frames(seq)
    return np.linalg.norm(np.gradient(x, axis=0), axis=1)


def kinematic_beats(seq, smooth: int = 5) -> np.ndarray:
    """Strict interior local minima of the smoothed aggregate speed."""
    x, _ = _frames(seq)
    if x.shape[0] < 3:
        raise ValidationError(f"kinematic beats need T >= 3, got {x.shape[0]}")
    speed = aggregate_speed(x)
    if smooth > 1:
        pad = smooth // 2
        padded = np.pad(speed, (pad, smooth - 1 - pad), mode="edge")
        speed = np.convolve(padded, np.ones(smooth) / smooth, mode="valid")
    mid = speed[1:-1]
    return np.flatnonzero((mid < speed[:-2]) & (mid < speed[2:])) + 1


def beat_alignment(kin_beats, music_beats, sigma: float = 3.0) -> float:
    """Mean over kinematic beats of ``exp(-d^2 / (2 sigma^2))``, ``d`` being the
    frame distance to the nearest music beat."""
    kin = np.asarray(kin_beats, dtype=np.float64).reshape(-1)
    mus = np.asarray(music_beats, dtype=np.float64).reshape(-1)
    if kin.size == 0:
        warnings.warn("no kinematic beats; beat alignment is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if mus.size == 0:
        return 0.0
    d = np.min(np.abs(kin[:, None] - mus[None, :]), axis=1)
    return float(np.mean(np.exp(-(d**2) / (2.0 * sigma**2))))


# retrieval --------------------------------------------------------------------


def r_precision(motion_feats, text_feats, n_candidates: int = 32, top: int = 1, seed: int = 0) -> float:
    """Fraction of motions whose own text ranks within ``top`` among itself and
    ``n_candidates - 1`` seeded mismatched texts (Euclidean distance)."""
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if m.shape != t.shape:
        raise ValidationError(f"r_precision: shape mismatch {m.shape} vs {t.shape}")
    n = m.shape[0]
    if n < n_candidates:
        raise ValidationError(f"r_precision needs N >= {n_candidates}, got {n}")
    rng = make_rng(seed, "r_precision")
    hits = 0
    for i in range(n):
        others = rng.choice(n - 1, size=n_candidates - 1, replace=False)
        others = others + (others >= i)
        d_true = np.linalg.norm(m[i] - t[i])
        d_other = np.linalg.norm(m[i] - t[others], axis=1)
        # Ties count against the true text.
        rank = 1 + int(np.sum(d_other <= d_true))
        hits += rank <= top
    return hits / n


def multimodal_distance(motion_feats, text_feats) -> float:
    m = np.asarray(motion_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if m.shape != t.shape:
        raise ValidationError(f"multimodal_distance: shape mismatch {m.shape} vs {t.shape}")
    return float(np.mean(np.linalg.norm(m - t, axis=1)))


class ToyCoEmbedding:
    """Stand-in co-embedding provider for desk-scale runs.

    Motions map to a fixed random projection of their standardised kinetic
    features. A text label maps to the mean motion embedding of the training
    motions carrying it, so paired motions and texts land near each other.
    """

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.proj = None
        self.mu = None
        self.sd = None
        self.text_table: dict[str, np.ndarray] = {}

    def fit(self, seqs, labels: list[str]) -> ToyCoEmbedding:
        f = np.stack([kinetic_features(s) for s in seqs])
        self.mu = f.mean(axis=0)
        self.sd = np.where(f.std(axis=0) < 1e-8, 1.0, f.std(axis=0))
        self.proj = make_rng(self.seed, "toy-coembed").standard_normal((f.shape[1], self.dim)) / np.sqrt(f.shape[1])
        emb = self.embed_motion(seqs)
        for lab in set(labels):
            self.text_table[lab] = emb[[i for i, x in enumerate(labels) if x == lab]].mean(axis=0)
        return self

    def embed_motion(self, seqs) -> np.ndarray:
        if self.proj is None:
            raise ValidationError("co-embedding provider is not fitted")
        f = np.stack([kinetic_features(s) for s in seqs])
        return ((f - self.mu) / self.sd) @ self.proj

    def embed_text(self, labels: list[str]) -> np.ndarray:
        missing = [x for x in labels if x not in self.text_table]
        if missing:
            raise ValidationError(f"unknown text labels: {missing[:3]}")
        return np.stack([self.text_table[x] for x in labels])


# repetition -------------------------------------------------------------------


def repeated(metric, n_repeats: int = 20, seed: int = 0) -> tuple[float, float]:
    """Mean and population std of ``metric(seed_i)`` over ``n_repeats`` derived seeds."""
    vals = np.array([metric(seed * 1000 + r) for r in range(n_repeats)], dtype=np.float64)
    return float(vals.mean()), float(vals.std())
