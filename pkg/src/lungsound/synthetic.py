"""Desk-scale synthetic corpus and source model for the smoke suite.

Two classes of 2 s clips at 16 kHz: a few band-limited tones ("normal")
versus band-pass filtered noise ("crackle"). Each patient is recorded on
one of two pseudo-devices whose first-order FIR tilts push the spectrum
towards low or high frequencies, so device calibration has something to
undo. A tiny source model, pre-trained on an unrelated 8-band tone task,
stands in for ImageNet weights.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch
from scipy import signal
from scipy.special import softmax
from torch import nn

from .backbone import ResNet, save_archive
from .cotuning import calibrate
from .features import NormStats, SegmentSpec, SpectralConfig, log_mel, mel_filterbank, segment, stft_magnitude
from .ingest import CycleAnnotation, serialize_annotation, write_wav
from .speccorr import mean_spectrum_gap

logger = logging.getLogger(__name__)

SMOKE_SR = 16000
CLIP_S = 2.0
DEVICE_TILTS = {"devA": 0.8, "devB": -0.8}   # y[n] = x[n] + k * x[n-1]
SOURCE_BANDS = np.geomspace(150.0, 6000.0, 9)
TONE_FREQS_HZ = (300.0, 450.0, 600.0, 750.0)
NOISE_BAND_HZ = (1500.0, 3500.0)


def tone_clip(rng: np.random.Generator, n: int, sr: int = SMOKE_SR) -> np.ndarray:
    t = np.arange(n) / sr
    x = np.zeros(n)
    for f in rng.choice(TONE_FREQS_HZ, size=int(rng.integers(2, 4)), replace=False):
        x += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x += 0.02 * rng.standard_normal(n)
    return x


def noise_clip(rng: np.random.Generator, n: int, sr: int = SMOKE_SR) -> np.ndarray:
    sos = signal.butter(4, NOISE_BAND_HZ, btype="bandpass", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def apply_tilt(x: np.ndarray, device: str) -> np.ndarray:
    return signal.lfilter([1.0, DEVICE_TILTS[device]], [1.0], x)


def _peak_normalize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.3, 0.8)


def record(x: np.ndarray, device: str, rng: np.random.Generator) -> np.ndarray:
    """Set the source level, then pass it through the device filter (gain <= 1.8)."""
    return apply_tilt(_peak_normalize(x, rng), device) / 2.0


def make_smoke_corpus(root: str | Path, n_clips: int = 200, n_patients: int = 40,
                      seed: int = 0) -> Path:
    """Write wav files, one-cycle annotations and ``manifest.csv``; returns the manifest path."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(CLIP_S * SMOKE_SR)
    devices = sorted(DEVICE_TILTS)
    labels = np.array([i % 2 for i in range(n_clips)])
    rng.shuffle(labels)
    rows = []
    for i in range(n_clips):
        patient = f"p{i % n_patients:03d}"
        device = devices[(i % n_patients) % len(devices)]
        crackle = bool(labels[i])
        x = noise_clip(rng, n) if crackle else tone_clip(rng, n)
        x = record(x, device, rng)
        name = f"clip{i:04d}"
        write_wav(root / "audio" / f"{name}.wav", x, SMOKE_SR)
        ann = serialize_annotation([CycleAnnotation(0.0, CLIP_S, crackle, False)])
        (root / "audio" / f"{name}.txt").write_text(ann)
        rows.append({"path": f"audio/{name}.wav", "patient": patient, "device": device,
                     "diagnosis": "", "cycles": f"audio/{name}.txt", "unit_id": name})
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return manifest


# --- source model -----------------------------------------------------------

def source_clip(rng: np.random.Generator, band: int, n: int, sr: int = SMOKE_SR) -> np.ndarray:
    lo, hi = SOURCE_BANDS[band], SOURCE_BANDS[band + 1]
    t = np.arange(n) / sr
    x = sum(np.sin(2 * np.pi * rng.uniform(lo, hi) * t + rng.uniform(0, 2 * np.pi)) for _ in range(2))
    return x + 0.05 * rng.standard_normal(n)


def _source_features(clips: list[np.ndarray], seg: SegmentSpec, cfg: SpectralConfig) -> list[np.ndarray]:
    bank = mel_filterbank(cfg)
    return [log_mel(stft_magnitude(segment(x, seg)[0], cfg), bank) for x in clips]


def pretrain_source(path: str | Path, seg: SegmentSpec, cfg: SpectralConfig, depth: int = 18,
                    base_width: int = 8, n_per_class: int = 24, epochs: int = 6,
                    seed: int = 0) -> float:
    """Train a tiny source classifier, save it as a weight archive with ``fc.*``.

    Returns the calibration temperature fitted on a held-out source split.
    """
    n_classes = len(SOURCE_BANDS) - 1
    rng = np.random.default_rng(seed + 1000)
    n = int(CLIP_S * SMOKE_SR)
    clips, labels = [], []
    for k in range(n_classes):
        for _ in range(n_per_class):
            clips.append(source_clip(rng, k, n))
            labels.append(k)
    feats = _source_features(clips, seg, cfg)
    stats = NormStats()
    for f in feats:
        stats.update(f)
    X = torch.from_numpy(np.stack([stats.normalize(f) for f in feats]).astype(np.float32))[:, None]
    X = X.expand(-1, 3, -1, -1).contiguous()
    y = torch.tensor(labels)
    perm = np.random.default_rng(seed).permutation(len(y))
    n_val = len(y) // 4
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    torch.manual_seed(seed)
    net = ResNet(depth, base_width)
    fc = nn.Linear(net.out_dim, n_classes)
    model = nn.Sequential(net, fc)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(tr_idx), generator=gen)
        for i in range(0, len(order), 32):
            idx = torch.as_tensor(tr_idx)[order[i:i + 32]]
            if len(idx) < 2:
                continue
            loss = nn.functional.cross_entropy(model(X[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        logits = model(X[torch.as_tensor(val_idx)]).numpy()
    yv = y[torch.as_tensor(val_idx)].numpy()
    acc = float((logits.argmax(1) == yv).mean())
    temperature = calibrate(logits, yv)
    nll = -np.log(softmax(logits / temperature, axis=1)[np.arange(len(yv)), yv] + 1e-12).mean()
    logger.info("source model: val acc %.3f, T=%.3f, calibrated NLL %.3f", acc, temperature, nll)
    state = {**net.state_dict(), "fc.weight": fc.weight, "fc.bias": fc.bias}
    save_archive(path, state)
    return temperature


def smoke_config(root: str | Path, manifest: str | Path, archive: str | Path, temperature: float,
                 epochs: int = 5, seed: int = 0) -> dict:
    """Config document for the smoke run (merged over the package defaults)."""
    return {
        "task": "crackle2",
        "data": {"kind": "manifest", "manifest": str(manifest)},
        "split": {"scheme": "kfold:5", "seed": seed, "validation_fraction": 0.2, "folds": [0]},
        "segment": {"length_s": CLIP_S},
        "speccorr": {"preset": "Calib-AllDev"},
        "augment": {"enabled": True, "flip": False, "vtlp": True, "seed": seed},
        "backbone": {"depth": 18, "pretrained": str(archive), "base_width": 8},
        "train": {"epochs": epochs, "batch_size": 32},
        "cotuning": {"temperature": float(temperature)},
        "experiment": {"n_runs": 1, "seed": seed, "output_dir": str(Path(root) / "runs"),
                       "modes": ["vanilla", "cotuning", "stochnorm", "cotuning_stochnorm"],
                       "depths": [18]},
    }


def device_gap(units, corrector, seg: SegmentSpec, cfg: SpectralConfig) -> tuple[float, float]:
    """Inter-device mean-spectrum L2 gap before and after correction."""
    raw: dict[str, list] = {}
    fixed: dict[str, list] = {}
    for u in units:
        for s in segment(u.samples, seg):
            mags = stft_magnitude(s, cfg)
            raw.setdefault(u.device, []).append(mags.mean(axis=1))
            fixed.setdefault(u.device, []).append(corrector(mags, u.device).mean(axis=1))
    a, b = sorted(raw)[:2]
    return mean_spectrum_gap(raw[a], raw[b]), mean_spectrum_gap(fixed[a], fixed[b])


def run_smoke(workdir: str | Path, epochs: int = 5, seed: int = 0, modes=None) -> dict:
    """Build the corpus and source model, then run every mode on fold 0.

    Returns the result rows, the device gap before and after correction and
    the config used.
    """
    from .config import ExperimentConfig
    from .experiment import fit_corrector, load_corpus, load_units, make_split, run_experiment

    workdir = Path(workdir)
    manifest = make_smoke_corpus(workdir / "corpus", seed=seed)
    probe = ExperimentConfig.from_dict({"task": "crackle2", "segment": {"length_s": CLIP_S}})
    archive = workdir / "source.npz"
    temperature = pretrain_source(archive, probe.segment_spec(), probe.spectral_config(), seed=seed)
    doc = smoke_config(workdir, manifest, archive, temperature, epochs, seed)
    if modes is not None:
        doc["experiment"]["modes"] = list(modes)
    cfg = ExperimentConfig.from_dict(doc)
    rows = run_experiment(cfg)

    recordings, folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, folds)
    units = load_units(cfg, recordings)
    parts = plan.partition(0)
    corrector = fit_corrector(cfg, [u for u in units if u.recording in set(parts["train"])])
    test_ids = set(parts["test"])
    before, after = device_gap([u for u in units if u.recording in test_ids], corrector,
                               cfg.segment_spec(), cfg.spectral_config())
    return {"rows": rows, "gap_before": before, "gap_after": after, "config": cfg}
