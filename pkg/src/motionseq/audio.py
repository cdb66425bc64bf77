"""Per-frame music conditioning features.

The hand-crafted track has 35 columns at the motion frame rate::

    [0, 20)   MFCC
    [20, 32)  chroma
    32        onset envelope (spectral flux)
    33        onset peaks, one-hot
    34        beats, one-hot

Precomputed deep-embedding tracks (128 columns) are read from MOTB files.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import FormatError, ValidationError
from .motion import read_motb, resample_frames, write_motb

N_MFCC = 20
N_CHROMA = 12
LIBROSA_DIM = N_MFCC + N_CHROMA + 3
PRECOMPUTED_DIM = 128

MFCC_COLS = slice(0, 20)
CHROMA_COLS = slice(20, 32)
ENVELOPE_COL = 32
PEAK_COL = 33
BEAT_COL = 34

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_FFT = 1024
DEFAULT_N_MELS = 40
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio contains non-finite samples")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ConditioningTrack:
    features: np.ndarray
    fps: float
    source: str = "librosa-style"
    beat_frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(f"conditioning features must be T x d with T >= 1, got {self.features.shape}")
        expected = {"librosa-style": LIBROSA_DIM, "precomputed": PRECOMPUTED_DIM}.get(self.source)
        if expected is None:
            raise ValidationError(f"unknown conditioning source '{self.source}'")
        if self.features.shape[1] != expected:
            raise ValidationError(f"{self.source} track needs d={expected}, got d={self.features.shape[1]}")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# WAV I/O ------------------------------------------------------------------------


def load_wav(path) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, EOFError, OSError, struct.error) as exc:
        raise FormatError(f"{path}: unreadable WAV ({exc})") from None
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, int(sr))


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV encoding '{encoding}'")
    wavfile.write(str(path), clip.sample_rate, data)


def resample_audio(clip: AudioClip, sample_rate: int) -> AudioClip:
    """Linear-interpolation resampling."""
    if clip.sample_rate == sample_rate:
        return clip
    n = max(1, int(round(clip.samples.size * sample_rate / clip.sample_rate)))
    pos = np.arange(n) * (clip.sample_rate / sample_rate)
    return AudioClip(np.interp(pos, np.arange(clip.samples.size), clip.samples), sample_rate)


# spectral analysis --------------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, n_fft: int = DEFAULT_N_FFT, hop: int = 512) -> np.ndarray:
    """Centered Hann-windowed STFT, ``ceil(len / hop) x (n_fft/2 + 1)`` complex.

    Frame ``t`` is centered on sample ``t * hop``; the signal is reflection padded
    by ``n_fft / 2`` on both sides.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ValidationError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValidationError(f"hop must be in (0, n_fft], got {hop}")
    if samples.size <= n_fft // 2:
        raise ValidationError(f"clip of {samples.size} samples is shorter than one window after padding")
    padded = np.pad(samples, n_fft // 2, mode="reflect")
    n_frames = math.ceil(samples.size / hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * hann(n_fft), axis=1)


def fft_frequencies(sample_rate: float, n_fft: int) -> np.ndarray:
    return np.arange(n_fft // 2 + 1) * sample_rate / n_fft


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: float, n_fft: int, n_mels: int = DEFAULT_N_MELS) -> np.ndarray:
    """``n_mels x (n_fft/2+1)`` triangular filters, equally spaced on the HTK mel scale."""
    freqs = fft_frequencies(sample_rate, n_fft)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an ``n x n`` matrix (rows are basis functions)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


def mfcc(spec: np.ndarray, sample_rate: float, n_mels: int = DEFAULT_N_MELS, n_mfcc: int = N_MFCC) -> np.ndarray:
    if n_mfcc > n_mels:
        raise ValidationError(f"n_mfcc={n_mfcc} exceeds n_mels={n_mels}")
    n_fft = 2 * (spec.shape[1] - 1)
    power = np.abs(spec) ** 2
    energies = power @ mel_filterbank(sample_rate, n_fft, n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR)) @ dct_matrix(n_mels)[:n_mfcc].T


def pitch_classes(sample_rate: float, n_fft: int) -> np.ndarray:
    """Pitch class per FFT bin (A = 9), or -1 for bins below 27.5 Hz."""
    f = fft_frequencies(sample_rate, n_fft)
    pc = np.full(f.size, -1)
    ok = f >= 27.5
    pc[ok] = (np.round(12 * np.log2(f[ok] / 440.0)).astype(int) + 9) % 12
    return pc


def chroma(spec: np.ndarray, sample_rate: float) -> np.ndarray:
    mag = np.abs(spec)
    pc = pitch_classes(sample_rate, 2 * (spec.shape[1] - 1))
    out = np.zeros((mag.shape[0], N_CHROMA))
    for c in range(N_CHROMA):
        out[:, c] = mag[:, pc == c].sum(axis=1)
    peak = out.max(axis=1, keepdims=True)
    return np.where(peak > 0, out / np.where(peak > 0, peak, 1.0), 0.0)


def onset_envelope(spec: np.ndarray) -> np.ndarray:
    """Spectral flux on magnitudes, max-normalised per clip; frame 0 is 0."""
    mag = np.abs(spec)
    flux = np.zeros(mag.shape[0])
    flux[1:] = np.maximum(0.0, mag[1:] - mag[:-1]).mean(axis=1)
    top = flux.max()
    return flux / top if top > 0 else flux


# peaks and beats ----------------------------------------------------------------


def envelope_peaks(env: np.ndarray, radius: int = 3) -> np.ndarray:
    """Boolean mask of frames that are the maximum of their ``+-radius`` window
    and exceed ``mean + 0.5 std`` of the envelope."""
    env = np.asarray(env, dtype=np.float64)
    if env.size == 0 or env.max() <= 0:
        return np.zeros(env.size, dtype=bool)
    padded = np.pad(env, radius, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1)
    local_max = env >= windows.max(axis=1)
    return local_max & (env > env.mean() + 0.5 * env.std())


def estimate_period(env: np.ndarray, fps: float, min_bpm: float = 30.0, max_bpm: float = 300.0) -> float:
    """Beat period in frames: the lag of maximal envelope autocorrelation."""
    env = np.asarray(env, dtype=np.float64)
    lo = max(1, int(math.floor(60.0 * fps / max_bpm)))
    hi = min(env.size - 1, int(math.ceil(60.0 * fps / min_bpm)))
    if hi < lo:
        return float(lo)
    lags = np.arange(lo, hi + 1)
    ac = np.array([np.dot(env[:-lag], env[lag:]) for lag in lags])
    return float(lags[int(np.argmax(ac))])


def track_beats(env: np.ndarray, fps: float, tightness: float = 100.0) -> list[int]:
    """Dynamic-programming beat tracker.

    Each frame's cumulative score is its envelope value plus the best predecessor
    score within ``[t - 2P, t - P/2]`` penalised by ``tightness * log(gap / P)^2``.
    The chain is backtracked from the last salient local maximum of the score,
    and weak leading/trailing beats are trimmed.
    """
    env = np.asarray(env, dtype=np.float64)
    if env.size == 0 or env.max() <= 0:
        return []
    period = estimate_period(env, fps)
    n = env.size
    score = env.copy()
    back = np.full(n, -1)
    far, near = int(round(2 * period)), max(1, int(round(period / 2)))
    for t in range(n):
        lo, hi = max(0, t - far), t - near
        if hi < lo:
            continue
        tau = np.arange(lo, hi + 1)
        cand = score[tau] - tightness * np.log((t - tau) / period) ** 2
        best = int(np.argmax(cand))
        if cand[best] > 0:
            score[t] = env[t] + cand[best]
            back[t] = tau[best]
    left = np.concatenate([[-np.inf], score[:-1]])
    right = np.concatenate([score[1:], [-np.inf]])
    maxima = np.flatnonzero((score >= left) & (score >= right) & (score > 0))
    if maxima.size == 0:
        return []
    keep = maxima[score[maxima] >= 0.5 * np.median(score[maxima])]
    beats = []
    t = int(keep[-1])
    while t >= 0:
        beats.append(t)
        t = int(back[t])
    beats.reverse()
    strength = env[beats]
    cutoff = 0.5 * np.sqrt(np.mean(strength**2))
    strong = np.flatnonzero(strength >= cutoff)
    if strong.size == 0:
        return []
    return [int(b) for b in beats[strong[0] : strong[-1] + 1]]


def peaks_and_beats(env: np.ndarray, fps: float) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """One-hot peak column, one-hot beat column and the beat frame list."""
    peaks = envelope_peaks(env).astype(np.float64)
    beats = track_beats(env, fps)
    onehot = np.zeros(np.asarray(env).size)
    onehot[beats] = 1.0
    return peaks, onehot, beats


# track assembly -----------------------------------------------------------------


def fit_length(features: np.ndarray, length: int) -> np.ndarray:
    """Trim, or pad by repeating the last row, to exactly ``length`` rows."""
    if features.shape[0] >= length:
        return features[:length]
    pad = np.repeat(features[-1:], length - features.shape[0], axis=0)
    return np.concatenate([features, pad])


def build_track(
    clip: AudioClip,
    fps: float = 20.0,
    length: int | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    n_fft: int = DEFAULT_N_FFT,
    n_mels: int = DEFAULT_N_MELS,
) -> ConditioningTrack:
    """Assemble the 35-column track with one row per motion frame."""
    if not fps > 0:
        raise ValidationError("fps must be positive")
    clip = resample_audio(clip, sample_rate)
    hop = int(round(sample_rate / fps))
    spec = stft(clip.samples, n_fft, hop)
    env = onset_envelope(spec)
    peaks, beat_col, beats = peaks_and_beats(env, fps)
    feats = np.concatenate(
        [mfcc(spec, sample_rate, n_mels), chroma(spec, sample_rate), env[:, None], peaks[:, None], beat_col[:, None]],
        axis=1,
    )
    if length is not None:
        feats = fit_length(feats, length)
        beats = [b for b in beats if b < length]
    return ConditioningTrack(feats, fps, "librosa-style", beats)


def save_track(track: ConditioningTrack, path) -> None:
    write_motb(path, track.features, track.fps)


def load_track(path, fps: float | None = None, length: int | None = None) -> ConditioningTrack:
    """Load a MOTB conditioning file of either width; see :func:`align_track`."""
    feats, file_fps = read_motb(path)
    source = "precomputed" if feats.shape[1] == PRECOMPUTED_DIM else "librosa-style"
    track = ConditioningTrack(feats, file_fps, source)
    if source == "librosa-style":
        track.beat_frames = [int(i) for i in np.flatnonzero(track.features[:, BEAT_COL] > 0.5)]
    return align_track(track, fps, length)


def load_precomputed(path, fps: float | None = None, length: int | None = None) -> ConditioningTrack:
    """Load a 128-column deep-embedding track, optionally aligning it to a motion."""
    feats, file_fps = read_motb(path)
    if feats.shape[1] != PRECOMPUTED_DIM:
        raise ValidationError(f"{path}: precomputed features need d={PRECOMPUTED_DIM}, got d={feats.shape[1]}")
    return align_track(ConditioningTrack(feats, file_fps, "precomputed"), fps, length)


def align_track(track: ConditioningTrack, fps: float | None = None, length: int | None = None) -> ConditioningTrack:
    """Resample to ``fps`` by linear interpolation and equalise to ``length`` rows."""
    feats = track.features
    beats = list(track.beat_frames)
    out_fps = track.fps
    if fps is not None and fps != track.fps:
        feats = resample_frames(feats, track.fps, fps)
        beats = sorted({int(round(b * fps / track.fps)) for b in beats})
        out_fps = fps
    if length is not None:
        feats = fit_length(feats, length)
        beats = [b for b in beats if b < length]
    return ConditioningTrack(feats, out_fps, track.source, beats)


def click_track(
    seconds: float,
    bpm: float = 120.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    offset: float = 0.0,
    click_ms: float = 5.0,
    freq: float = 1000.0,
    amplitude: float = 0.8,
) -> AudioClip:
    """Metronome: short decaying tone bursts every ``60 / bpm`` seconds from ``offset``."""
    n = int(round(seconds * sample_rate))
    x = np.zeros(n)
    width = max(1, int(sample_rate * click_ms / 1000))
    t = np.arange(width) / sample_rate
    burst = amplitude * np.sin(2 * np.pi * freq * t) * np.exp(-t / (click_ms / 4000))
    start = offset
    while start < seconds:
        i = int(round(start * sample_rate))
        seg = burst[: max(0, min(width, n - i))]
        x[i : i + seg.size] += seg
        start += 60.0 / bpm
    return AudioClip(x, sample_rate)


def tone(
    seconds: float, freq: float, sample_rate: int = DEFAULT_SAMPLE_RATE, amplitude: float = 0.5, phase: float = 0.0
) -> AudioClip:
    """``amplitude * cos(2 pi f t + phase)``.

    The default cosine phase is even about ``t = 0``, so the reflection padding of
    :func:`stft` continues it without a phase flip in frame 0.
    """
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(amplitude * np.cos(2 * np.pi * freq * t + phase), sample_rate)
