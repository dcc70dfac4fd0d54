"""Corpus parsing, task labels and patient-disjoint splits.

ICBHI recordings follow ``patient_recindex_location_mode_device.wav`` with a
sibling ``.txt`` holding one respiratory cycle per line
(``begin end crackle wheeze``). Other corpora are described by a generic CSV
manifest with columns ``path, patient, device, diagnosis, cycles`` and an
optional ``fold`` column.
"""

from __future__ import annotations

import csv
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import (
    DataError,
    InsufficientPatients,
    MalformedAnnotation,
    MalformedName,
    SplitFileMissing,
    UnknownDiagnosis,
    UnsupportedTask,
)

logger = logging.getLogger(__name__)

DEVICES = ("AKGC417L", "Meditron", "Litt3200", "LittC2SE")
OTHER_DEVICE = "other"
ACQUISITION_MODES = {"sc": "single_channel", "mc": "multi_channel"}
SUPPORTED_EXTENSIONS = (".wav", ".txt")

CHRONIC = ("COPD", "Bronchiectasis", "Asthma")
NON_CHRONIC = ("URTI", "LRTI", "Pneumonia", "Bronchiolitis")
DIAGNOSES = ("Healthy",) + CHRONIC + NON_CHRONIC

CYCLE_TASKS = ("alsc4", "alsc2", "crackle2")
RECORDING_TASKS = ("rdc3", "rdc2")
TASK_CLASSES = {
    "alsc4": ("normal", "crackle", "wheeze", "both"),
    "alsc2": ("normal", "abnormal"),
    "rdc3": ("healthy", "chronic", "non-chronic"),
    "rdc2": ("healthy", "unhealthy"),
    "crackle2": ("normal", "crackle"),
}

# Observed ICBHI cycle duration range; outside it we only warn.
CYCLE_DURATION_RANGE = (0.2, 16.0)


@dataclass(frozen=True)
class RecordingMeta:
    patient_id: str
    recording_index: str
    chest_location: str
    acquisition_mode: str
    device: str
    device_token: str
    sample_rate_hz: int | None = None
    duration_s: float | None = None
    diagnosis: str | None = None
    unit_id: str = ""
    path: str | None = None

    def __post_init__(self):
        if self.sample_rate_hz is not None and self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.duration_s is not None and self.duration_s <= 0:
            raise DataError(f"duration must be positive, got {self.duration_s}")


@dataclass(frozen=True)
class CycleAnnotation:
    begin_s: float
    end_s: float
    crackle: bool
    wheeze: bool

    @property
    def duration_s(self) -> float:
        return self.end_s - self.begin_s


@dataclass(frozen=True)
class TaskLabel:
    task: str
    label: int

    def __post_init__(self):
        if self.task not in TASK_CLASSES:
            raise UnsupportedTask(self.task)
        if not 0 <= self.label < len(TASK_CLASSES[self.task]):
            raise DataError(f"label {self.label} out of range for {self.task}")

    @property
    def name(self) -> str:
        return TASK_CLASSES[self.task][self.label]


@dataclass
class Recording:
    """A recording together with its cycle annotations."""

    meta: RecordingMeta
    cycles: list[CycleAnnotation] = field(default_factory=list)


def parse_recording_name(filename: str | Path) -> RecordingMeta:
    path = Path(filename)
    if path.suffix.lower() not in SUPPORTED_EXTENSIONS:
        raise MalformedName(f"unsupported extension: {path.name}")
    fields = path.stem.split("_")
    if len(fields) < 5:
        raise MalformedName(f"expected 5 underscore-separated fields: {path.name}")
    patient, recindex, location, mode = fields[:4]
    token = "_".join(fields[4:])
    if mode not in ACQUISITION_MODES:
        raise MalformedName(f"unknown acquisition mode {mode!r} in {path.name}")
    device = token if token in DEVICES else OTHER_DEVICE
    return RecordingMeta(
        patient_id=patient,
        recording_index=recindex,
        chest_location=location,
        acquisition_mode=ACQUISITION_MODES[mode],
        device=device,
        device_token=token,
        unit_id=path.stem,
    )


def parse_annotation(text: str) -> list[CycleAnnotation]:
    cycles = []
    for lineno, line in enumerate(text.splitlines(), 1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) != 4:
            raise MalformedAnnotation(f"line {lineno}: expected 4 columns, got {len(cols)}")
        try:
            begin, end = float(cols[0]), float(cols[1])
            crackle, wheeze = int(cols[2]), int(cols[3])
        except ValueError as exc:
            raise MalformedAnnotation(f"line {lineno}: {exc}") from None
        if crackle not in (0, 1) or wheeze not in (0, 1):
            raise MalformedAnnotation(f"line {lineno}: flags must be 0 or 1")
        if begin < 0 or end <= begin:
            raise MalformedAnnotation(f"line {lineno}: invalid interval [{begin}, {end}]")
        cycle = CycleAnnotation(begin, end, bool(crackle), bool(wheeze))
        lo, hi = CYCLE_DURATION_RANGE
        if not lo <= cycle.duration_s <= hi:
            logger.warning("line %d: cycle duration %.3fs outside [%g, %g]s",
                           lineno, cycle.duration_s, lo, hi)
        if cycles and begin < cycles[-1].end_s:
            logger.warning("line %d: cycle overlaps the previous one", lineno)
        cycles.append(cycle)
    return cycles


def serialize_annotation(cycles: Iterable[CycleAnnotation]) -> str:
    return "".join(
        f"{c.begin_s!r}\t{c.end_s!r}\t{int(c.crackle)}\t{int(c.wheeze)}\n" for c in cycles
    )


def cycle_label(crackle: bool, wheeze: bool, task: str) -> TaskLabel:
    if task == "alsc4":
        label = int(bool(crackle)) + 2 * int(bool(wheeze))
    elif task == "alsc2":
        label = int(bool(crackle) or bool(wheeze))
    elif task == "crackle2":
        label = int(bool(crackle))
    else:
        raise UnsupportedTask(f"{task!r} labels recordings, not cycles")
    return TaskLabel(task, label)


def diagnosis_label(diagnosis: str, task: str) -> TaskLabel:
    if task not in RECORDING_TASKS:
        raise UnsupportedTask(f"{task!r} is not a recording-level task")
    if diagnosis not in DIAGNOSES:
        raise UnknownDiagnosis(diagnosis)
    if diagnosis == "Healthy":
        return TaskLabel(task, 0)
    if task == "rdc2":
        return TaskLabel(task, 1)
    return TaskLabel(task, 1 if diagnosis in CHRONIC else 2)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file as float64 in [-1, 1], averaging channels."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(sr)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), int(sample_rate), pcm)


def extract_cycles(samples: np.ndarray, sample_rate: int,
                   cycles: Sequence[CycleAnnotation]) -> list[tuple[int, np.ndarray]]:
    """Cut annotated cycles out of a recording.

    Returns ``(cycle_index, samples)`` pairs; cycles that round to zero samples
    are dropped with a warning.
    """
    out = []
    for i, c in enumerate(cycles):
        lo = int(round(c.begin_s * sample_rate))
        hi = min(int(round(c.end_s * sample_rate)), len(samples))
        if hi <= lo:
            logger.warning("cycle %d [%g, %g]s has no samples, dropped", i, c.begin_s, c.end_s)
            continue
        out.append((i, samples[lo:hi]))
    return out


def load_diagnosis_table(path: str | Path) -> dict[str, str]:
    table = {}
    for line in Path(path).read_text().splitlines():
        cols = line.split()
        if len(cols) >= 2:
            table[cols[0]] = cols[1]
    return table


def load_split_file(path: str | Path | None) -> dict[str, str]:
    if path is None or not Path(path).exists():
        raise SplitFileMissing(f"split file not found: {path}")
    split = {}
    for line in Path(path).read_text().splitlines():
        cols = line.split()
        if len(cols) < 2:
            continue
        name, which = Path(cols[0]).stem, cols[1].lower()
        if which not in ("train", "test"):
            raise DataError(f"split file entry {cols[0]!r}: expected train/test, got {cols[1]!r}")
        split[name] = which
    return split


def scan_icbhi(root: str | Path, diagnosis_table: Mapping[str, str] | None = None,
               read_headers: bool = True) -> list[Recording]:
    """Collect every ``*.wav`` with a matching annotation file under ``root``."""
    root = Path(root)
    recordings = []
    for wav in sorted(root.glob("*.wav")):
        try:
            meta = parse_recording_name(wav.name)
        except MalformedName as exc:
            logger.warning("skipping %s: %s", wav.name, exc)
            continue
        ann = wav.with_suffix(".txt")
        cycles = parse_annotation(ann.read_text()) if ann.exists() else []
        sr = duration = None
        if read_headers:
            sr, data = wavfile.read(str(wav), mmap=True)
            duration = len(data) / sr
        diag = diagnosis_table.get(meta.patient_id) if diagnosis_table else None
        meta = RecordingMeta(**{**meta.__dict__, "sample_rate_hz": sr, "duration_s": duration,
                                "diagnosis": diag, "path": str(wav)})
        recordings.append(Recording(meta, cycles))
    return recordings


MANIFEST_COLUMNS = ("path", "patient", "device", "diagnosis", "cycles")


def read_manifest(path: str | Path) -> tuple[list[Recording], dict[str, int]]:
    """Read a generic corpus manifest.

    Returns the recordings and, when the manifest has a ``fold`` column, the
    unit → fold mapping used by the ``leave_manifest`` split scheme.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    recordings, folds = [], {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            audio = Path(row["path"])
            if not audio.is_absolute():
                audio = path.parent / audio
            device = row["device"] if row["device"] in DEVICES else row["device"] or OTHER_DEVICE
            unit = row.get("unit_id") or audio.stem
            meta = RecordingMeta(
                patient_id=row["patient"], recording_index=unit, chest_location="",
                acquisition_mode=row.get("mode") or "multi_channel", device=device,
                device_token=row["device"], diagnosis=row["diagnosis"] or None,
                unit_id=unit, path=str(audio),
            )
            cycles: list[CycleAnnotation] = []
            if row["cycles"]:
                cyc = Path(row["cycles"])
                if not cyc.is_absolute():
                    cyc = path.parent / cyc
                cycles = parse_annotation(cyc.read_text())
            recordings.append(Recording(meta, cycles))
            if row.get("fold") not in (None, ""):
                folds[unit] = int(row["fold"])
    return recordings, folds


def label_counts(recordings: Iterable[Recording], task: str) -> Counter:
    counts: Counter = Counter()
    for rec in recordings:
        if task in CYCLE_TASKS:
            for c in rec.cycles:
                counts[cycle_label(c.crackle, c.wheeze, task).label] += 1
        else:
            counts[diagnosis_label(rec.meta.diagnosis, task).label] += 1
    return counts


def device_shares(recordings: Iterable[Recording], by: str = "cycles") -> dict[str, float]:
    """Fraction of samples per device (``by`` is ``cycles`` or ``recordings``)."""
    counts: Counter = Counter()
    for rec in recordings:
        counts[rec.meta.device] += len(rec.cycles) if by == "cycles" else 1
    total = sum(counts.values())
    return {d: n / total for d, n in counts.items()} if total else {}


# --- splits -----------------------------------------------------------------

TRAIN_ONLY = -1


@dataclass
class SplitPlan:
    """Assignment of units to test folds.

    ``fold_assignments[unit] = f`` puts the unit in the test set of fold ``f``
    and in the training pool of every other fold; ``TRAIN_ONLY`` units are
    never tested. Validation patients are carved from each fold's training
    pool by :meth:`partition`.
    """

    scheme: str
    fold_assignments: dict[str, int]
    unit_patients: dict[str, str]
    n_folds: int
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError("validation_fraction must lie in (0, 1)")

    def partition(self, fold: int) -> dict[str, list[str]]:
        test = sorted(u for u, f in self.fold_assignments.items() if f == fold)
        pool = sorted(u for u, f in self.fold_assignments.items() if f != fold)
        patients = sorted({self.unit_patients[u] for u in pool})
        rng = random.Random(f"{self.seed}:{fold}")
        rng.shuffle(patients)
        n_val = int(round(self.validation_fraction * len(patients)))
        if len(patients) >= 2:
            n_val = min(max(n_val, 1), len(patients) - 1)
        else:
            n_val = 0
        val_patients = set(patients[:n_val])
        val = [u for u in pool if self.unit_patients[u] in val_patients]
        train = [u for u in pool if self.unit_patients[u] not in val_patients]
        return {"train": train, "val": val, "test": test}

    def check_patient_disjoint(self) -> None:
        for fold in range(self.n_folds):
            parts = self.partition(fold)
            sets = {k: {self.unit_patients[u] for u in v} for k, v in parts.items()}
            for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
                shared = sets[a] & sets[b]
                if shared:
                    raise DataError(f"fold {fold}: patients {sorted(shared)[:5]} in both {a} and {b}")

    def fingerprint(self) -> str:
        import hashlib
        items = sorted(self.fold_assignments.items())
        blob = f"{self.scheme}|{self.n_folds}|{self.validation_fraction}|{self.seed}|{items}"
        return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _parse_scheme(scheme: str) -> tuple[str, int]:
    if scheme.startswith("kfold"):
        _, _, k = scheme.partition(":")
        k = k or scheme[len("kfold"):].strip("()")
        return "kfold", int(k)
    return scheme, 1


def build_split(units: Sequence[RecordingMeta], scheme: str, seed: int = 0,
                split_file: str | Path | None = None,
                manifest_folds: Mapping[str, int] | None = None,
                validation_fraction: float = 0.2) -> SplitPlan:
    """Build a patient-disjoint split.

    ``scheme`` is ``official_6040`` (requires ``split_file``), ``kfold:K`` or
    ``leave_manifest`` (requires ``manifest_folds``). For k-fold, patients
    are grouped by diagnosis and dealt round-robin so every stratum spreads
    across folds and fold sizes differ by at most one patient.
    """
    kind, k = _parse_scheme(scheme)
    unit_patients = {u.unit_id: u.patient_id for u in units}

    if kind == "official_6040":
        split = load_split_file(split_file)
        assignments = {}
        for u in units:
            which = split.get(u.unit_id)
            if which is None:
                logger.warning("%s not in split file, excluded", u.unit_id)
                continue
            assignments[u.unit_id] = 0 if which == "test" else TRAIN_ONLY
        plan = SplitPlan("official_6040", assignments, unit_patients, 1, validation_fraction, seed)
    elif kind == "kfold":
        stratum: dict[str, str] = {}
        for u in units:
            stratum.setdefault(u.patient_id, u.diagnosis or "")
        if len(stratum) < k:
            raise InsufficientPatients(f"{len(stratum)} patients cannot fill {k} folds")
        by_stratum: dict[str, list[str]] = defaultdict(list)
        for p, s in stratum.items():
            by_stratum[s].append(p)
        rng = random.Random(seed)
        order = []
        for s in sorted(by_stratum):
            group = sorted(by_stratum[s])
            rng.shuffle(group)
            order.extend(group)
        patient_fold = {p: i % k for i, p in enumerate(order)}
        assignments = {u.unit_id: patient_fold[u.patient_id] for u in units}
        plan = SplitPlan(f"kfold:{k}", assignments, unit_patients, k, validation_fraction, seed)
    elif kind == "leave_manifest":
        if not manifest_folds:
            raise SplitFileMissing("leave_manifest scheme needs a manifest with a fold column")
        assignments = {u.unit_id: int(manifest_folds[u.unit_id]) for u in units
                       if u.unit_id in manifest_folds}
        n = max(assignments.values()) + 1
        plan = SplitPlan("leave_manifest", assignments, unit_patients, n, validation_fraction, seed)
    else:
        raise DataError(f"unknown split scheme {scheme!r}")

    plan.check_patient_disjoint()
    return plan


def write_normalized_manifest(path: str | Path, rows: Iterable[Mapping]) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def normalized_rows(recordings: Iterable[Recording], task: str,
                    plan: SplitPlan | None = None) -> list[dict]:
    """One row per cycle (cycle tasks) or per recording (recording tasks)."""
    rows = []
    for rec in recordings:
        m = rec.meta
        fold = plan.fold_assignments.get(m.unit_id, "") if plan else ""
        base = {"unit_id": m.unit_id, "patient": m.patient_id, "device": m.device,
                "diagnosis": m.diagnosis or "", "path": m.path or ""}
        if task in CYCLE_TASKS:
            for i, c in enumerate(rec.cycles):
                rows.append({**base, "unit_id": f"{m.unit_id}#{i}", "recording": m.unit_id,
                             "begin_s": c.begin_s, "end_s": c.end_s, "crackle": int(c.crackle),
                             "wheeze": int(c.wheeze),
                             "label": cycle_label(c.crackle, c.wheeze, task).label, "fold": fold})
        else:
            rows.append({**base, "recording": m.unit_id, "begin_s": "", "end_s": "",
                         "crackle": "", "wheeze": "",
                         "label": diagnosis_label(m.diagnosis, task).label, "fold": fold})
    return rows
