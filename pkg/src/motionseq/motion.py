"""Motion sequences: binary/CSV I/O, resampling, normalisation and synthetic data."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .seeding import make_rng

MAGIC = b"MOTB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")

# Every synthetic channel stays within +-SYNTH_AMPLITUDE.
SYNTH_AMPLITUDE = 2.0


@dataclass
class MotionSequence:
    """``T x d`` frame matrix (stored as float32) with its frame rate."""

    frames: np.ndarray
    fps: float = 20.0
    name: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2:
            raise ValidationError(f"frames must be 2-d, got shape {f.shape}")
        if f.shape[0] < 1:
            raise ValidationError("motion sequence has no frames (T = 0)")
        if not np.all(np.isfinite(f)):
            raise ValidationError(f"motion sequence '{self.name}' contains non-finite values")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        self.frames = f
        self.fps = float(self.fps)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def seconds(self) -> float:
        return self.n_frames / self.fps


# file I/O ---------------------------------------------------------------------


def write_motb(path, frames: np.ndarray, fps: float) -> None:
    """Write a ``T x d`` matrix in the MOTB layout."""
    f = np.ascontiguousarray(np.asarray(frames, dtype="<f4"))
    if f.ndim != 2:
        raise ValidationError(f"MOTB payload must be 2-d, got {f.shape}")
    header = _HEADER.pack(MAGIC, VERSION, f.shape[0], f.shape[1], float(fps))
    Path(path).write_bytes(header + f.tobytes())


def read_motb(path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes", len(raw))
    magic, version, t, d, fps = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    need = _HEADER.size + 4 * t * d
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, found {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes", need)
    data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=_HEADER.size)
    return data.reshape(t, d).astype(np.float32), float(fps)


def save_motion(seq: MotionSequence, path) -> None:
    write_motb(path, seq.frames, seq.fps)


def load_motion(path, fps: float = 20.0) -> MotionSequence:
    """Load a ``.motb`` file, or a CSV (``fps`` then comes from the argument)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_motion_csv(path, fps)
    frames, file_fps = read_motb(path)
    return MotionSequence(frames, file_fps, path.stem)


def load_motion_csv(path, fps: float = 20.0) -> MotionSequence:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if lines:
        try:
            [float(v) for v in lines[0].split(",")]
        except ValueError:
            lines = lines[1:]
    try:
        rows = [[float(v) for v in ln.split(",")] for ln in lines]
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric CSV cell ({exc})") from None
    if not rows:
        raise ValidationError(f"{path}: CSV has no frames")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged CSV rows")
    return MotionSequence(np.array(rows), fps, path.stem)


def save_motion_csv(seq: MotionSequence, path) -> None:
    np.savetxt(path, seq.frames, delimiter=",", fmt="%.9g")


# resampling and normalisation -------------------------------------------------


def resample_frames(frames: np.ndarray, src_fps: float, dst_fps: float) -> np.ndarray:
    """Per-channel linear interpolation onto the ``dst_fps`` grid.

    Output length is ``round(T * dst_fps / src_fps)`` (at least 1); output frame
    ``i`` samples source time ``i * src_fps / dst_fps`` frames, clamped at the end.
    """
    if not dst_fps > 0:
        raise ValidationError(f"target fps must be positive, got {dst_fps}")
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    n = max(1, int(round(t * dst_fps / src_fps)))
    pos = np.arange(n) * (src_fps / dst_fps)
    src = np.arange(t)
    return np.stack([np.interp(pos, src, frames[:, c]) for c in range(frames.shape[1])], axis=1)


def resample_fps(seq: MotionSequence, target_fps: float) -> MotionSequence:
    if not target_fps > 0:
        raise ValidationError(f"target fps must be positive, got {target_fps}")
    if target_fps == seq.fps:
        return MotionSequence(seq.frames.copy(), seq.fps, seq.name)
    return MotionSequence(resample_frames(seq.frames, seq.fps, target_fps), target_fps, seq.name)


@dataclass
class MotionStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), 1e-8)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.mean, self.std])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> MotionStats:
        return cls(m[0], m[1])


def compute_stats(seqs: list[MotionSequence]) -> MotionStats:
    allf = np.concatenate([s.frames.astype(np.float64) for s in seqs])
    return MotionStats(allf.mean(axis=0), allf.std(axis=0))


def _check_dim(seq: MotionSequence, stats: MotionStats) -> None:
    if seq.dim != stats.dim:
        raise ValidationError(f"sequence has d={seq.dim} but statistics have d={stats.dim}")


def normalize(seq: MotionSequence, stats: MotionStats) -> MotionSequence:
    _check_dim(seq, stats)
    return MotionSequence((seq.frames - stats.mean) / stats.std, seq.fps, seq.name)


def denormalize(seq: MotionSequence, stats: MotionStats) -> MotionSequence:
    _check_dim(seq, stats)
    return MotionSequence(seq.frames * stats.std + stats.mean, seq.fps, seq.name)


@dataclass
class MotionDataset:
    """Sequences sharing one feature size and frame rate.

    ``stats`` are fitted on the training split only (see :meth:`fit`).
    """

    sequences: list[MotionSequence]
    dim: int
    fps: float
    stats: MotionStats | None = None
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.sequences:
            if s.dim != self.dim:
                raise ValidationError(f"sequence '{s.name}' has d={s.dim}, dataset declares {self.dim}")
            if s.fps != self.fps:
                raise ValidationError(f"sequence '{s.name}' at {s.fps} fps, dataset declares {self.fps}")

    def train(self) -> list[MotionSequence]:
        return [s for s in self.sequences if self.split.get(s.name, "train") == "train"]

    def fit(self) -> MotionStats:
        self.stats = compute_stats(self.train())
        return self.stats

    def normalized(self) -> list[MotionSequence]:
        if self.stats is None:
            raise ValidationError("dataset statistics not fitted")
        return [normalize(s, self.stats) for s in self.sequences]


# synthetic motion -------------------------------------------------------------

SYNTH_KINDS = ("sine-walk", "pulse-dance", "constant")


def synth_motion(
    kind: str,
    n_frames: int,
    dim: int,
    base_freq: float = 2.0,
    seed: int = 0,
    fps: float = 20.0,
    name: str = "",
) -> MotionSequence:
    """Deterministic synthetic motion.

    ``sine-walk``
        Each channel is a sum of three sinusoids at 1x, 2x and 3x ``base_freq``
        with random phases and amplitudes.
    ``pulse-dance``
        Each channel is ``a cos(pi t / P) + b cos(2 pi t / P)`` with
        ``P = fps / base_freq`` and ``|b|`` small relative to ``|a|``. Every channel
        has zero velocity at ``t = kP``, so the aggregate speed has its minima
        (kinematic beats) exactly at multiples of ``P`` frames.
    ``constant``
        One random pose held for all frames.

    All channels stay within ``+-SYNTH_AMPLITUDE``.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    if kind not in SYNTH_KINDS:
        raise ValidationError(f"unknown synthetic motion kind '{kind}', expected one of {SYNTH_KINDS}")
    rng = make_rng(seed, f"synth:{kind}")
    t = np.arange(n_frames)[:, None]
    if kind == "constant":
        pose = rng.uniform(-1.0, 1.0, size=(1, dim))
        frames = np.repeat(pose, n_frames, axis=0)
    elif kind == "sine-walk":
        frames = np.zeros((n_frames, dim))
        for h in (1, 2, 3):
            amp = rng.uniform(0.2, 0.6, size=dim) / h
            phase = rng.uniform(0, 2 * np.pi, size=dim)
            frames += amp * np.sin(2 * np.pi * h * base_freq * t / fps + phase)
    else:
        period = fps / base_freq
        a = rng.uniform(0.5, 1.0, size=dim) * rng.choice([-1.0, 1.0], size=dim)
        b = rng.uniform(-0.08, 0.08, size=dim)
        offset = rng.uniform(-0.5, 0.5, size=dim)
        frames = offset + a * np.cos(np.pi * t / period) + b * np.cos(2 * np.pi * t / period)
    return MotionSequence(frames, fps, name or f"{kind}-{seed}")
