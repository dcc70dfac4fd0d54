"""Per-device spectrum correction.

Each device's mean magnitude spectrum is pulled onto a reference spectrum
(the unweighted mean of a chosen set of device means) by per-bin scaling of
the STFT magnitudes, before the mel projection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyDevice, EmptyStack, MissingDeviceProfile, ShapeMismatch
from .ingest import OTHER_DEVICE

logger = logging.getLogger(__name__)

COEFF_CLIP = (0.1, 10.0)

PRESETS = {
    "No-Calib": None,
    "Calib-Dev1": ("AKGC417L",),
    "Calib-Dev2": ("Meditron",),
    "Calib-Dev1Dev2": ("AKGC417L", "Meditron"),
    "Calib-AllDev": "all",
}


@dataclass
class DeviceSpectrumProfile:
    device: str
    mean_spectrum: np.ndarray
    n_segments: int


@dataclass
class CorrectionCoefficients:
    device: str
    coeffs: np.ndarray
    reference_set: tuple[str, ...]
    clipped_bins: int = 0
    provenance: dict = field(default_factory=dict)


def segment_mean_spectrum(mags: np.ndarray) -> np.ndarray:
    mags = np.asarray(mags, dtype=np.float64)
    if mags.ndim != 2 or mags.shape[1] < 1:
        raise EmptyStack("need at least one frame")
    return mags.mean(axis=1)


def device_profile(segment_spectra: Sequence[np.ndarray], device: str) -> DeviceSpectrumProfile:
    if len(segment_spectra) == 0:
        raise EmptyDevice(f"no segments for device {device!r}")
    stack = np.asarray(segment_spectra, dtype=np.float64)
    if stack.ndim != 2:
        raise ShapeMismatch("segment spectra must share one length")
    return DeviceSpectrumProfile(device, stack.mean(axis=0), len(stack))


def reference_spectrum(profiles: Iterable[DeviceSpectrumProfile], devices: Iterable[str]) -> np.ndarray:
    by_device = {p.device: p for p in profiles}
    devices = list(devices)
    missing = [d for d in devices if d not in by_device]
    if missing or not devices:
        raise MissingDeviceProfile(f"no profile for {missing or 'empty reference set'}")
    return np.mean([by_device[d].mean_spectrum for d in devices], axis=0)


def correction_coefficients(ref: np.ndarray, profile: DeviceSpectrumProfile,
                            reference_set: Sequence[str] = (),
                            clip: tuple[float, float] | None = COEFF_CLIP) -> CorrectionCoefficients:
    ref = np.asarray(ref, dtype=np.float64)
    mean = profile.mean_spectrum
    if ref.shape != mean.shape:
        raise ShapeMismatch(f"reference {ref.shape} vs device mean {mean.shape}")
    coeffs = np.ones_like(mean)
    nz = mean > 0
    with np.errstate(over="ignore"):
        coeffs[nz] = ref[nz] / mean[nz]
    overflow = ~np.isfinite(coeffs)
    if overflow.any():
        # subnormal device energy: treat like a silent bin
        logger.warning("device %s: %d bins too quiet to correct", profile.device, int(overflow.sum()))
        coeffs[overflow] = 1.0
        nz &= ~overflow
    clipped = 0
    if clip is not None:
        lo, hi = clip
        out = nz & ((coeffs < lo) | (coeffs > hi))
        clipped = int(out.sum())
        if clipped:
            logger.info("device %s: %d coefficients clipped to [%g, %g]", profile.device, clipped, lo, hi)
            coeffs = np.where(nz, np.clip(coeffs, lo, hi), coeffs)
    return CorrectionCoefficients(profile.device, coeffs, tuple(reference_set), clipped)


def apply_correction(mags: np.ndarray, coeffs: CorrectionCoefficients | np.ndarray) -> np.ndarray:
    c = coeffs.coeffs if isinstance(coeffs, CorrectionCoefficients) else np.asarray(coeffs)
    if mags.shape[0] != c.shape[0]:
        raise ShapeMismatch(f"{mags.shape[0]} bins vs {c.shape[0]} coefficients")
    return mags * c[:, None]


def resolve_reference(preset: str | Sequence[str] | None, devices: Iterable[str]) -> tuple[str, ...] | None:
    """Map a preset name (or an explicit device list) onto a reference set."""
    if isinstance(preset, str) and preset in PRESETS:
        preset = PRESETS[preset]
    if preset is None:
        return None
    if preset == "all":
        return tuple(sorted(d for d in devices if d != OTHER_DEVICE))
    return tuple(preset)


class SpectrumCorrector:
    """Fits coefficients on training segments and applies them to any split.

    Profiles accumulate as (sum, count) per device so partial fits from
    parallel workers can be merged with :meth:`merge`.
    """

    def __init__(self, preset: str | Sequence[str] | None = "Calib-AllDev",
                 clip: tuple[float, float] | None = COEFF_CLIP):
        self.preset = preset
        self.clip = clip
        self._sums: dict[str, np.ndarray] = {}
        self._counts: dict[str, int] = {}
        self.coefficients: dict[str, CorrectionCoefficients] = {}
        self.fit_tag: str | None = None

    @property
    def enabled(self) -> bool:
        if isinstance(self.preset, str):
            return PRESETS.get(self.preset, self.preset) is not None
        return self.preset is not None

    def accumulate(self, device: str, mags: np.ndarray) -> None:
        if device == OTHER_DEVICE:
            return
        s = segment_mean_spectrum(mags)
        if device in self._sums:
            self._sums[device] = self._sums[device] + s
            self._counts[device] += 1
        else:
            self._sums[device] = s.copy()
            self._counts[device] = 1

    def merge(self, other: "SpectrumCorrector") -> None:
        for d, s in other._sums.items():
            if d in self._sums:
                self._sums[d] = self._sums[d] + s
                self._counts[d] += other._counts[d]
            else:
                self._sums[d] = s.copy()
                self._counts[d] = other._counts[d]

    def profiles(self) -> list[DeviceSpectrumProfile]:
        return [DeviceSpectrumProfile(d, self._sums[d] / self._counts[d], self._counts[d])
                for d in sorted(self._sums)]

    def fit(self, tag: str = "train") -> dict[str, CorrectionCoefficients]:
        """Compute coefficients; ``tag`` records which data they came from."""
        profiles = self.profiles()
        ref_set = resolve_reference(self.preset, [p.device for p in profiles])
        self.fit_tag = tag
        if ref_set is None:
            self.coefficients = {}
            return self.coefficients
        ref = reference_spectrum(profiles, ref_set)
        self.coefficients = {}
        for p in profiles:
            cc = correction_coefficients(ref, p, ref_set, self.clip)
            cc.provenance = {"fit_on": tag, "n_segments": p.n_segments}
            self.coefficients[p.device] = cc
        return self.coefficients

    def __call__(self, mags: np.ndarray, device: str) -> np.ndarray:
        cc = self.coefficients.get(device)
        return mags if cc is None else apply_correction(mags, cc)

    def save(self, path: str | Path, config_hash: str = "") -> None:
        payload = {
            "preset": self.preset if isinstance(self.preset, (str, type(None))) else list(self.preset),
            "fit_on": self.fit_tag,
            "config_hash": config_hash,
            "devices": {d: {"coeffs": c.coeffs.tolist(), "reference_set": list(c.reference_set),
                            "clipped_bins": c.clipped_bins}
                        for d, c in self.coefficients.items()},
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "SpectrumCorrector":
        payload = json.loads(Path(path).read_text())
        obj = cls(payload["preset"])
        obj.fit_tag = payload["fit_on"]
        obj.coefficients = {
            d: CorrectionCoefficients(d, np.asarray(v["coeffs"]), tuple(v["reference_set"]),
                                      v["clipped_bins"], {"fit_on": payload["fit_on"]})
            for d, v in payload["devices"].items()
        }
        return obj


def mean_spectrum_gap(spectra_a: Sequence[np.ndarray], spectra_b: Sequence[np.ndarray]) -> float:
    """L2 distance between the mean spectra of two segment collections."""
    return float(np.linalg.norm(np.mean(spectra_a, axis=0) - np.mean(spectra_b, axis=0)))
