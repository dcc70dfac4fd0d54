"""Waveform to model-input feature pipeline.

resample -> segment (time-reversed padding) -> STFT magnitude -> optional
spectrum correction (see :mod:`lungsound.speccorr`) -> mel projection ->
log -> dataset-level normalization -> 3-channel model input.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, EmptyInput, InvalidWarp, SegmentTooShort, ShapeMismatch

LOG_FLOOR = 1e-10
WARP_RANGE = (0.8, 1.25)
COLORMAP = "viridis"


@dataclass(frozen=True)
class SegmentSpec:
    length_s: float = 8.0
    overlap_fraction: float = 0.0
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.length_s <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("segment length and sample rate must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        exact = self.length_s * self.sample_rate_hz
        if abs(exact - round(exact)) > 1e-6:
            raise ConfigError(f"{self.length_s}s at {self.sample_rate_hz}Hz is not a whole number of samples")

    @property
    def n_samples(self) -> int:
        return int(round(self.length_s * self.sample_rate_hz))

    @property
    def hop_samples(self) -> int:
        return max(1, int(round(self.n_samples * (1.0 - self.overlap_fraction))))


@dataclass(frozen=True)
class SpectralConfig:
    sample_rate_hz: int = 16000
    nfft: int = 512
    hop: int = 256
    n_mels: int = 50
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    warp_factor: float = 1.0
    warp_fhi_hz: float = 3800.0
    window: str = "hann"

    def __post_init__(self):
        if self.hop * 2 != self.nfft:
            raise ConfigError("hop must be nfft / 2")
        if not 0 < self.n_mels < self.nfft // 2 + 1:
            raise ConfigError("n_mels must be below the number of FFT bins")
        if not 0 <= self.fmin_hz < self.f_max:
            raise ConfigError("need 0 <= fmin < fmax")
        if self.f_max > self.sample_rate_hz / 2:
            raise ConfigError("fmax above Nyquist")

    @property
    def f_max(self) -> float:
        return self.sample_rate_hz / 2 if self.fmax_hz is None else self.fmax_hz

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1

    def digest(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


@dataclass
class LogMelFeature:
    values: np.ndarray  # [n_mels, n_frames]
    normalized: bool = False
    segment_id: str = ""
    device: str = ""
    provenance: dict = field(default_factory=dict)


@dataclass
class ModelInput:
    values: np.ndarray  # [3, H, W] float32
    layout: str


# --- time domain ------------------------------------------------------------

def resample(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Band-limited polyphase resampling to ``round(n * sr_out / sr_in)`` samples."""
    if sr_in <= 0 or sr_out <= 0:
        raise ConfigError("sample rates must be positive")
    x = np.asarray(samples, dtype=np.float64)
    if sr_in == sr_out:
        return x
    ratio = Fraction(int(sr_out), int(sr_in))
    y = signal.resample_poly(x, ratio.numerator, ratio.denominator)
    n_out = int(round(len(x) * sr_out / sr_in))
    return y[:n_out]


def reflect_pad(samples: np.ndarray, target_len: int) -> np.ndarray:
    """Extend to ``target_len`` by repeated mirroring without repeating edge samples.

    ``[1, 2, 3] -> [1, 2, 3, 2, 1, 2, 3, ...]``
    """
    x = np.asarray(samples)
    n = len(x)
    if n == 0:
        raise EmptyInput("cannot pad an empty signal")
    if target_len < n:
        raise ConfigError(f"target length {target_len} shorter than input {n}")
    if n == 1:
        return np.repeat(x, target_len)
    period = 2 * (n - 1)
    k = np.arange(target_len) % period
    idx = np.where(k < n, k, period - k)
    return x[idx]


def segment(samples: np.ndarray, spec: SegmentSpec) -> list[np.ndarray]:
    """Split into fixed-length segments, reflect-padding the tail.

    A new segment starts every ``hop`` samples as long as the previous one
    stopped short of the end of the signal.
    """
    x = np.asarray(samples)
    n = len(x)
    if n == 0:
        raise EmptyInput("cannot segment an empty signal")
    L, hop = spec.n_samples, spec.hop_samples
    out = []
    start = 0
    while True:
        chunk = x[start:start + L]
        out.append(chunk if len(chunk) == L else reflect_pad(chunk, L))
        if start + L >= n:
            break
        start += hop
    return out


# --- spectral ---------------------------------------------------------------

def stft_magnitude(seg: np.ndarray, cfg: SpectralConfig) -> np.ndarray:
    """Magnitude STFT, frames fully inside the segment: ``[nfft/2+1, n_frames]``."""
    x = np.asarray(seg, dtype=np.float64)
    if len(x) < cfg.nfft:
        raise SegmentTooShort(f"segment of {len(x)} samples shorter than nfft={cfg.nfft}")
    window = signal.get_window(cfg.window, cfg.nfft)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.nfft)[::cfg.hop]
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def vtlp_breakpoint(alpha: float, fhi: float) -> float:
    return fhi * min(alpha, 1.0) / alpha


def effective_fhi(fhi: float, sample_rate_hz: int) -> float:
    # The upper warp segment needs fhi below Nyquist; low-rate tasks get it clipped.
    return min(fhi, 0.9 * sample_rate_hz / 2)


def vtlp_warp(freqs, alpha: float, fhi: float, sample_rate_hz: int) -> np.ndarray:
    """Piecewise-linear VTLP frequency map.

    Frequencies up to ``fhi * min(alpha, 1) / alpha`` are scaled by ``alpha``;
    the rest are mapped linearly so that Nyquist stays fixed.
    """
    f = np.asarray(freqs, dtype=np.float64)
    if alpha == 1.0:
        return f.copy()
    nyq = sample_rate_hz / 2
    fhi = effective_fhi(fhi, sample_rate_hz)
    f0 = vtlp_breakpoint(alpha, fhi)
    slope = (nyq - fhi * min(alpha, 1.0)) / (nyq - f0)
    return np.where(f <= f0, f * alpha, nyq - slope * (nyq - f))


def mel_edges(cfg: SpectralConfig) -> np.ndarray:
    """The ``n_mels + 2`` filter edge frequencies in Hz (after warping)."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    edges = mel_to_hz(mels)
    if cfg.warp_factor != 1.0:
        edges = vtlp_warp(edges, cfg.warp_factor, cfg.warp_fhi_hz, cfg.sample_rate_hz)
    return edges


def mel_filterbank(cfg: SpectralConfig) -> np.ndarray:
    """Triangular mel filters ``[n_mels, nfft/2+1]`` with unit peak height."""
    lo, hi = WARP_RANGE
    if not lo <= cfg.warp_factor <= hi:
        raise InvalidWarp(f"warp factor {cfg.warp_factor} outside [{lo}, {hi}]")
    edges = mel_edges(cfg)
    bins = np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.nfft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - left) / (center - left)
    falling = (right - bins[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(mags: np.ndarray, bank: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    if bank.shape[1] != mags.shape[0]:
        raise ShapeMismatch(f"filterbank {bank.shape} cannot project spectrogram {mags.shape}")
    return np.log(np.maximum(bank @ mags, floor))


@dataclass
class NormStats:
    """Global scalar mean/variance accumulator (mergeable count/mean/M2)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values: np.ndarray) -> "NormStats":
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return self
        other = NormStats(v.size, float(v.mean()), float(((v - v.mean()) ** 2).sum()))
        merged = self.merge(other)
        self.count, self.mean, self.m2 = merged.count, merged.mean, merged.m2
        return self

    def merge(self, other: "NormStats") -> "NormStats":
        n = self.count + other.count
        if n == 0:
            return NormStats()
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return NormStats(n, mean, m2)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 1.0

    def normalize(self, values: np.ndarray) -> np.ndarray:
        std = self.std if self.std > 0 else 1.0
        return (values - self.mean) / std


def logmel(mags: np.ndarray, bank: np.ndarray, floor: float = LOG_FLOOR,
           stats: NormStats | None = None, segment_id: str = "", device: str = "") -> LogMelFeature:
    values = log_mel(mags, bank, floor)
    if stats is not None:
        values = stats.normalize(values)
    return LogMelFeature(values, stats is not None, segment_id, device)


def to_model_input(feat: LogMelFeature, layout: str = "replicate3",
                   colormap: str = COLORMAP) -> ModelInput:
    v = np.asarray(feat.values, dtype=np.float64)
    if layout == "replicate3":
        return ModelInput(np.repeat(v[None].astype(np.float32), 3, axis=0), layout)
    if layout != "rgb_upscaled2x":
        raise ConfigError(f"unknown input layout {layout!r}")
    import matplotlib
    import torch
    import torch.nn.functional as F

    span = v.max() - v.min()
    scaled = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    rgb = matplotlib.colormaps[colormap](scaled)[..., :3]  # [H, W, 3]
    img = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))[None]
    h, w = v.shape
    up = F.interpolate(img, size=(2 * h, 2 * w), mode="bilinear", align_corners=False)
    return ModelInput(up[0].numpy().astype(np.float32), layout)


class FeatureCache:
    """On-disk feature cache keyed by (segment id, config hash)."""

    def __init__(self, root: str | Path, config: dict):
        self.key = config_hash(config)
        self.dir = Path(root) / self.key
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_file = self.dir / "config.json"
        if not cfg_file.exists():
            cfg_file.write_text(json.dumps(config, sort_keys=True, indent=2, default=str))

    def _path(self, segment_id: str) -> Path:
        safe = segment_id.replace("/", "_").replace("#", "-")
        return self.dir / f"{safe}.npy"

    def get(self, segment_id: str) -> np.ndarray | None:
        p = self._path(segment_id)
        return np.load(p) if p.exists() else None

    def put(self, segment_id: str, values: np.ndarray) -> None:
        np.save(self._path(segment_id), values)
