"""Filterbank front end: WAV I/O, energy VAD, log-mel + energy, deltas,
normalisation, and the cached feature file format."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"CSLF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    window_len: float = 0.025
    window_step: float = 0.010
    delta_window: int = 2
    vad_threshold: float = 0.05
    vad_min_silence: float = 0.3

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")
        if not 0 < self.window_step <= self.window_len:
            raise ValueError("need 0 < window_step <= window_len")

    @property
    def dim(self) -> int:
        return 3 * (self.n_mels + 1)

    def frame_sizes(self, sample_rate: int) -> tuple[int, int]:
        return (max(1, int(round(self.window_len * sample_rate))),
                max(1, int(round(self.window_step * sample_rate))))


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_step: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("feature sequence must be a non-empty T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature values must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------- wav io

def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM WAV file; stereo is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            if w.getsampwidth() != 2:
                raise ValueError(f"{path}: only 16-bit PCM is supported")
            rate, channels, n = w.getframerate(), w.getnchannels(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed WAV file ({exc})") from exc
    if n == 0 or not raw:
        raise ValueError(f"{path}: zero-length audio")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(pcm / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- framing

def frame_signal(x: np.ndarray, frame_len: int, step: int) -> np.ndarray:
    if len(x) < frame_len:
        raise ValueError(f"signal of {len(x)} samples is shorter than one window ({frame_len})")
    n = 1 + (len(x) - frame_len) // step
    idx = np.arange(frame_len)[None, :] + step * np.arange(n)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, equally spaced on the HTK mel scale from 0 Hz to Nyquist.

    Returns an (n_mels, n_fft//2 + 1) weight matrix evaluated at the exact bin
    frequencies.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel_energy(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """T x (n_mels + 1): log mel filterbank magnitudes, then log frame energy."""
    frame_len, step = cfg.frame_sizes(clip.sample_rate)
    frames = frame_signal(clip.samples, frame_len, step) * np.hamming(frame_len)
    n_fft = 1 << (frame_len - 1).bit_length()
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fb = mag @ mel_filterbank(cfg.n_mels, n_fft, clip.sample_rate).T
    energy = np.sum(frames * frames, axis=1, keepdims=True)
    return np.log(np.maximum(np.hstack([fb, energy]), LOG_FLOOR))


def append_deltas(static: np.ndarray, delta_window: int = 2) -> np.ndarray:
    """Append regression deltas and delta-deltas: columns [static, d, dd]."""
    static = np.asarray(static, dtype=np.float64)
    d = _deltas(static, delta_window)
    return np.hstack([static, d, _deltas(d, delta_window)])


def _deltas(x: np.ndarray, W: int) -> np.ndarray:
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], W, axis=0), x, np.repeat(x[-1:], W, axis=0)])
    num = np.zeros_like(x)
    for k in range(1, W + 1):
        num += k * (padded[W + k:W + k + T] - padded[W - k:W - k + T])
    return num / (2.0 * sum(k * k for k in range(1, W + 1)))


# ---------------------------------------------------------------- vad

def apply_vad(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> AudioClip:
    """Drop runs of low-energy frames longer than ``cfg.vad_min_silence``.

    A frame is silent when its energy is at most ``vad_threshold`` times the
    median frame energy. Samples covered by any retained frame are kept (the
    tail past the last full frame follows the last frame). Internal pauses
    are removed as well as leading and trailing silence. If everything would
    be dropped, the loudest frame survives.
    """
    x = clip.samples
    frame_len, step = cfg.frame_sizes(clip.sample_rate)
    if len(x) < frame_len:
        return clip
    frames = frame_signal(x, frame_len, step)
    energy = np.sum(frames * frames, axis=1)
    silent = energy <= cfg.vad_threshold * np.median(energy)
    drop = np.zeros_like(silent)
    min_frames = cfg.vad_min_silence / cfg.window_step
    start = None
    for i, s in enumerate(np.append(silent, False)):
        if s and start is None:
            start = i
        elif not s and start is not None:
            if i - start > min_frames:
                drop[start:i] = True
            start = None
    if not drop.any():
        return clip
    keep_frames = ~drop
    if not keep_frames.any():
        keep_frames[int(np.argmax(energy))] = True
    keep = np.zeros(len(x), dtype=bool)
    for i in np.flatnonzero(keep_frames):
        keep[i * step:i * step + frame_len] = True
    last_end = (len(frames) - 1) * step + frame_len
    if keep_frames[-1]:
        keep[last_end:] = True
    return AudioClip(x[keep], clip.sample_rate)


# ---------------------------------------------------------------- pipeline

def extract(clip: AudioClip, cfg: FeatureConfig = FeatureConfig(), vad: bool = True) -> FeatureSequence:
    """Audio -> VAD -> log-mel + energy -> deltas (T x 3(n_mels+1))."""
    if vad:
        clip = apply_vad(clip, cfg)
    static = log_mel_energy(clip, cfg)
    return FeatureSequence(append_deltas(static, cfg.delta_window), cfg.window_step)


def feature_stats(seqs, floor: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and (floored) std over all frames of ``seqs``."""
    allf = np.concatenate([np.asarray(s.frames if isinstance(s, FeatureSequence) else s)
                           for s in seqs], axis=0).astype(np.float64)
    return allf.mean(axis=0), np.maximum(allf.std(axis=0), floor)


def normalize(feats, stats: tuple[np.ndarray, np.ndarray]):
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    frames = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
    if frames.shape[1] != mean.shape[0] or std.shape != mean.shape:
        raise ValueError(f"feature width {frames.shape[1]} does not match stats width {mean.shape[0]}")
    out = (frames - mean) / np.maximum(std, 1e-8)
    if isinstance(feats, FeatureSequence):
        return FeatureSequence(out, feats.frame_step)
    return out


# ---------------------------------------------------------------- cache files

def write_features(path, feats: FeatureSequence) -> None:
    T, D = feats.frames.shape
    body = np.ascontiguousarray(feats.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D, feats.frame_step) + body)


def read_features(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, T, D, step = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    if len(data) != _HEADER.size + 4 * T * D:
        raise ValueError(f"{path}: size does not match header")
    frames = np.frombuffer(data, "<f4", T * D, _HEADER.size).reshape(T, D).astype(np.float32)
    return FeatureSequence(frames, step)
