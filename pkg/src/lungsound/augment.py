"""Class-balancing augmentation.

Time domain: pitch-preserving time stretch plus randomized volume, noise,
pitch and speed changes. Time-frequency domain: VTLP through a warped mel
filterbank and frequency-axis flipping of log-mel features.

An :class:`AugmentPlan` is expanded into a deterministic list of
:class:`AugmentedItem` rows; every random parameter is drawn from a stream
seeded by ``(plan.seed, item_id)`` so parallel workers reproduce serial
output exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from scipy import signal

from .errors import ConfigError, InvalidFactor
from .features import LogMelFeature, SpectralConfig, mel_filterbank

STRETCH_RANGE = (0.8, 1.25)

DEFAULT_OP_PROBS = {"volume": 0.5, "noise": 0.5, "pitch": 0.5, "speed": 0.5}
DEFAULT_OP_RANGES = {
    "volume": (-6.0, 6.0),   # dB
    "noise": (20.0, 40.0),   # SNR dB
    "pitch": (-2.0, 2.0),    # semitones
    "speed": (0.9, 1.1),
}
TIME_OP_ORDER = ("volume", "noise", "pitch", "speed")


@dataclass
class VTLPConfig:
    alpha_low: float = 0.9
    alpha_high: float = 1.1
    fhi_low_hz: float = 3200.0
    fhi_high_hz: float = 3800.0


@dataclass
class AugmentPlan:
    multipliers: dict[str, int] = field(default_factory=dict)
    op_probs: dict[str, float] = field(default_factory=lambda: dict.fromkeys(DEFAULT_OP_PROBS, 0.0))
    op_ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_OP_RANGES))
    stretch_range: tuple[float, float] = (0.9, 1.1)
    vtlp: VTLPConfig | None = field(default_factory=VTLPConfig)
    flip_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        for op, p in self.op_probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability for {op} outside [0, 1]: {p}")
        if any(m < 1 for m in self.multipliers.values()):
            raise ConfigError("class multipliers must be >= 1")
        if self.vtlp is not None and self.vtlp.alpha_low > self.vtlp.alpha_high:
            raise ConfigError("vtlp alpha_low must not exceed alpha_high")


@dataclass(frozen=True)
class AugmentedItem:
    source_id: str
    item_id: str
    category: str
    label: int
    device: str
    ops: tuple = ()  # ((name, params), ...) in application order

    def op(self, name: str) -> dict | None:
        for n, params in self.ops:
            if n == name:
                return params
        return None

    @property
    def augmented(self) -> bool:
        return bool(self.ops)


def item_rng(seed: int, item_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(item_id.encode())])


# --- time domain ------------------------------------------------------------

def _phase_vocoder(samples: np.ndarray, rate: float, n_fft: int = 512, hop: int = 128) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n < n_fft:
        x = np.pad(x, (0, n_fft - n))
    _, _, Z = signal.stft(x, window="hann", nperseg=n_fft, noverlap=n_fft - hop,
                          boundary="zeros", padded=True)
    n_bins, n_frames = Z.shape
    steps = np.arange(0, n_frames - 1, rate)
    omega = np.pi * hop * np.arange(n_bins) / (n_fft / 2)  # expected phase advance per hop
    phase = np.angle(Z[:, 0])
    Zp = np.concatenate([Z, np.zeros((n_bins, 1), dtype=Z.dtype)], axis=1)
    out = np.empty((n_bins, len(steps)), dtype=np.complex128)
    for i, t in enumerate(steps):
        k = int(t)
        frac = t - k
        mag = (1.0 - frac) * np.abs(Zp[:, k]) + frac * np.abs(Zp[:, k + 1])
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(Zp[:, k + 1]) - np.angle(Zp[:, k]) - omega
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase = phase + omega + dphi
    _, y = signal.istft(out, window="hann", nperseg=n_fft, noverlap=n_fft - hop, boundary=True)
    target = int(round(n / rate))
    if len(y) < target:
        y = np.pad(y, (0, target - len(y)))
    return y[:target]


def time_stretch(samples: np.ndarray, factor: float) -> np.ndarray:
    """Change duration by ``1 / factor`` while keeping pitch (phase vocoder)."""
    lo, hi = STRETCH_RANGE
    if not lo <= factor <= hi:
        raise InvalidFactor(f"stretch factor {factor} outside [{lo}, {hi}]")
    if factor == 1.0:
        return np.asarray(samples, dtype=np.float64).copy()
    return _phase_vocoder(samples, factor)


def change_volume(samples: np.ndarray, gain_db: float) -> np.ndarray:
    return np.asarray(samples) * 10.0 ** (gain_db / 20.0)


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    power = np.mean(x ** 2)
    if power == 0:
        return x.copy()
    noise = rng.standard_normal(len(x)) * np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return x + noise


def pitch_shift(samples: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch keeping duration: stretch, then resample back to the input length."""
    if semitones == 0:
        return np.asarray(samples, dtype=np.float64).copy()
    rate = 2.0 ** (-semitones / 12.0)
    stretched = _phase_vocoder(samples, rate)
    return signal.resample(stretched, len(samples))


def change_speed(samples: np.ndarray, speed: float) -> np.ndarray:
    """Play faster/slower: duration and pitch both change."""
    x = np.asarray(samples, dtype=np.float64)
    if speed == 1.0:
        return x.copy()
    return signal.resample(x, max(1, int(round(len(x) / speed))))


def draw_time_ops(plan: AugmentPlan, rng: np.random.Generator) -> list[tuple[str, dict]]:
    ops = []
    for name in TIME_OP_ORDER:
        p = plan.op_probs.get(name, 0.0)
        if p > 0 and rng.random() < p:
            lo, hi = plan.op_ranges[name]
            ops.append((name, {"value": float(rng.uniform(lo, hi)),
                               "noise_seed": int(rng.integers(2**31))}))
    return ops


def apply_time_ops(samples: np.ndarray, ops: Iterable[tuple[str, dict]]) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    for name, params in ops:
        v = params.get("value")
        if name == "stretch":
            x = time_stretch(x, v)
        elif name == "volume":
            x = change_volume(x, v)
        elif name == "noise":
            x = add_noise(x, v, np.random.default_rng(params["noise_seed"]))
        elif name == "pitch":
            x = pitch_shift(x, v)
        elif name == "speed":
            x = change_speed(x, v)
    return x


def random_time_domain(samples: np.ndarray, plan: AugmentPlan,
                       rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[str, dict]]]:
    ops = draw_time_ops(plan, rng)
    return apply_time_ops(samples, ops), ops


# --- time-frequency domain --------------------------------------------------

def draw_vtlp(plan: AugmentPlan, rng: np.random.Generator) -> tuple[float, float]:
    v = plan.vtlp or VTLPConfig(1.0, 1.0)
    alpha = float(rng.uniform(v.alpha_low, v.alpha_high))
    fhi = float(rng.uniform(v.fhi_low_hz, v.fhi_high_hz))
    return alpha, fhi


def vtlp_bank(plan: AugmentPlan, rng: np.random.Generator,
              cfg: SpectralConfig) -> tuple[np.ndarray, float, float]:
    alpha, fhi = draw_vtlp(plan, rng)
    return mel_filterbank(replace(cfg, warp_factor=alpha, warp_fhi_hz=fhi)), alpha, fhi


def flip_frequency(feat: LogMelFeature) -> LogMelFeature:
    return LogMelFeature(feat.values[::-1].copy(), feat.normalized, feat.segment_id, feat.device,
                         {**feat.provenance, "flipped": not feat.provenance.get("flipped", False)})


# --- balance plan -----------------------------------------------------------

def build_balance_plan(class_counts: Mapping[str, int], task: str, seed: int = 0,
                       flip: bool | None = None) -> AugmentPlan:
    """Default balancing rules per task family.

    ``class_counts`` is keyed by category name: the 4-class cycle category
    for ICBHI cycle tasks (so ``alsc2`` still stretches wheeze and both), the
    task class name otherwise.
    """
    if task in ("alsc4", "alsc2"):
        mult = {c: (2 if c in ("wheeze", "both") else 1) for c in class_counts}
        return AugmentPlan(mult, seed=seed, flip_enabled=True if flip is None else flip)
    if task == "crackle2":
        return AugmentPlan(dict.fromkeys(class_counts, 1), seed=seed,
                           flip_enabled=True if flip is None else flip)
    if task in ("rdc3", "rdc2"):
        return AugmentPlan(dict.fromkeys(class_counts, 2), op_probs=dict(DEFAULT_OP_PROBS),
                           seed=seed, flip_enabled=False if flip is None else flip)
    raise ConfigError(f"no balance rules for task {task!r}")


def planned_count(class_counts: Mapping[str, int], plan: AugmentPlan) -> dict[str, int]:
    """Closed-form training-set size per category after expansion."""
    vtlp = 2 if plan.vtlp is not None else 1
    flip = 2 if plan.flip_enabled else 1
    return {c: n * plan.multipliers.get(c, 1) * vtlp * flip for c, n in class_counts.items()}


def expand_plan(items: Iterable[tuple[str, str, int, str]], plan: AugmentPlan) -> list[AugmentedItem]:
    """Expand ``(source_id, category, label, device)`` training rows by the plan."""
    out = []
    for source_id, category, label, device in items:
        base = [AugmentedItem(source_id, source_id, category, label, device)]
        for copy in range(1, plan.multipliers.get(category, 1)):
            iid = f"{source_id}|stretch{copy}"
            rng = item_rng(plan.seed, iid)
            lo, hi = plan.stretch_range
            base.append(AugmentedItem(source_id, iid, category, label, device,
                                      (("stretch", {"value": float(rng.uniform(lo, hi))}),)))
        if any(plan.op_probs.get(op, 0) > 0 for op in TIME_OP_ORDER):
            drawn = []
            for it in base:
                ops = draw_time_ops(plan, item_rng(plan.seed, it.item_id + "|time"))
                drawn.append(replace(it, ops=it.ops + tuple(ops)))
            base = drawn
        if plan.vtlp is not None:
            warped = []
            for it in base:
                iid = it.item_id + "|vtlp"
                alpha, fhi = draw_vtlp(plan, item_rng(plan.seed, iid))
                warped.append(replace(it, item_id=iid,
                                      ops=it.ops + (("vtlp", {"alpha": alpha, "fhi": fhi}),)))
            base = base + warped
        if plan.flip_enabled:
            base = base + [replace(it, item_id=it.item_id + "|flip", ops=it.ops + (("flip", {}),))
                           for it in base]
        out.extend(base)
    return out
