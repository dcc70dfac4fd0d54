"""Experiment orchestration.

For every fold x run x mode x depth:
ingest -> features (+ spectrum correction) -> augment -> build -> fit ->
majority vote -> metrics. Results go to an append-only CSV keyed by
(config hash, mode, depth, fold, run) so interrupted runs resume.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.special import softmax

from . import augment as aug
from .backbone import (
    attach_heads,
    build,
    n_source_classes,
    pooled_embedding,
    resolve_archive,
)
from .config import ExperimentConfig
from .cotuning import (
    CategoryRelationship,
    History,
    fit,
    predict_logits,
    relationship_direct,
    relationship_reverse,
)
from .errors import CheckpointMismatch, ConfigError, DataError, LungSoundError, MissingClassSamples
from .features import (
    NormStats,
    LogMelFeature,
    log_mel,
    mel_filterbank,
    resample,
    segment,
    stft_magnitude,
    to_model_input,
)
from .ingest import (
    TASK_CLASSES,
    Recording,
    build_split,
    cycle_label,
    diagnosis_label,
    extract_cycles,
    load_diagnosis_table,
    read_manifest,
    read_wav,
    scan_icbhi,
    SplitPlan,
)
from .metrics import MetricsReport, aggregate_units, compute_metrics
from .speccorr import SpectrumCorrector

logger = logging.getLogger(__name__)

RESULTS_VERSION = 1
RESULTS_COLUMNS = ("schema_version", "config_hash", "task", "mode", "depth", "fold", "run", "seed",
                   "n_units", "SE", "SP", "AS", "HS", "precision", "recall", "F1", "best_epoch",
                   "confusion")


@dataclass
class Unit:
    unit_id: str
    recording: str
    patient: str
    device: str
    label: int
    category: str
    samples: np.ndarray


# --- corpus -----------------------------------------------------------------

def load_corpus(cfg: ExperimentConfig) -> tuple[list[Recording], dict[str, int]]:
    data = cfg["data"]
    if data["kind"] == "icbhi":
        if not data["root"] or not Path(data["root"]).is_dir():
            raise DataError(f"ICBHI root not found: {data['root']}")
        table = load_diagnosis_table(data["diagnosis_table"]) if data["diagnosis_table"] else None
        if table is None and not cfg.is_cycle_task:
            raise ConfigError("recording tasks need data.diagnosis_table")
        return scan_icbhi(data["root"], table), {}
    if not data["manifest"]:
        raise ConfigError("data.manifest is required for kind=manifest")
    return read_manifest(data["manifest"])


def load_units(cfg: ExperimentConfig, recordings: list[Recording]) -> list[Unit]:
    sr = cfg.sample_rate
    units = []
    for rec in recordings:
        m = rec.meta
        x, sr_in = read_wav(m.path)
        x = resample(x, sr_in, sr).astype(np.float32)
        if cfg.is_cycle_task:
            for i, cyc in extract_cycles(x, sr, rec.cycles):
                c = rec.cycles[i]
                label = cycle_label(c.crackle, c.wheeze, cfg.task).label
                category = TASK_CLASSES["alsc4"][cycle_label(c.crackle, c.wheeze, "alsc4").label] \
                    if cfg.task in ("alsc4", "alsc2") else TASK_CLASSES[cfg.task][label]
                units.append(Unit(f"{m.unit_id}#{i}", m.unit_id, m.patient_id, m.device, label,
                                  category, cyc))
        else:
            label = diagnosis_label(m.diagnosis, cfg.task).label
            units.append(Unit(m.unit_id, m.unit_id, m.patient_id, m.device, label,
                              TASK_CLASSES[cfg.task][label], x))
    return units


def make_split(cfg: ExperimentConfig, recordings: list[Recording], manifest_folds: dict) -> SplitPlan:
    s = cfg["split"]
    return build_split([r.meta for r in recordings], s["scheme"], int(s["seed"]),
                       split_file=cfg["data"]["split_file"], manifest_folds=manifest_folds,
                       validation_fraction=float(s["validation_fraction"]))


# --- features ---------------------------------------------------------------

@dataclass
class FoldData:
    fold: int
    X: dict[str, torch.Tensor]
    y: dict[str, torch.Tensor]
    seg_units: dict[str, list[str]]
    unit_labels: dict[str, dict[str, int]]
    corrector: SpectrumCorrector
    stats: NormStats
    train_items: list[aug.AugmentedItem] = field(default_factory=list)


def item_features(samples: np.ndarray, device: str, ops: tuple, cfg: ExperimentConfig,
                  base_bank: np.ndarray, corrector: SpectrumCorrector | None) -> list[np.ndarray]:
    """Raw (unnormalized) log-mel features of every segment of one (augmented) item."""
    seg_spec, spec_cfg = cfg.segment_spec(), cfg.spectral_config()
    time_ops = [(n, p) for n, p in ops if n not in ("vtlp", "flip")]
    named = dict(ops)
    x = aug.apply_time_ops(samples, time_ops) if time_ops else np.asarray(samples, dtype=np.float64)
    if len(x) < spec_cfg.nfft:
        x = np.pad(x, (0, spec_cfg.nfft - len(x)))
    bank = base_bank
    if "vtlp" in named:
        bank = mel_filterbank(replace(spec_cfg, warp_factor=named["vtlp"]["alpha"],
                                      warp_fhi_hz=named["vtlp"]["fhi"]))
    out = []
    for seg in segment(x, seg_spec):
        mags = stft_magnitude(seg, spec_cfg)
        if corrector is not None:
            mags = corrector(mags, device)
        v = log_mel(mags, bank)
        out.append(v[::-1].copy() if "flip" in named else v)
    return out


def _stack(feats: list[np.ndarray], layout: str) -> torch.Tensor:
    if not feats:
        return torch.zeros((0, 3, 1, 1))
    if layout == "replicate3":
        x = torch.from_numpy(np.stack(feats).astype(np.float32))[:, None]
        return x.expand(-1, 3, -1, -1)
    return torch.from_numpy(np.stack([to_model_input(LogMelFeature(f, True), layout).values for f in feats]))


def fit_corrector(cfg: ExperimentConfig, train_units: list[Unit]) -> SpectrumCorrector:
    sc = cfg["speccorr"]
    corrector = SpectrumCorrector(sc["preset"], tuple(sc["clip"]) if sc["clip"] else None)
    if corrector.enabled:
        seg_spec, spec_cfg = cfg.segment_spec(), cfg.spectral_config()
        for u in train_units:
            x = u.samples if len(u.samples) >= spec_cfg.nfft else np.pad(u.samples, (0, spec_cfg.nfft - len(u.samples)))
            for seg in segment(x, seg_spec):
                corrector.accumulate(u.device, stft_magnitude(seg, spec_cfg))
        corrector.fit("train")
    return corrector


def prepare_fold(cfg: ExperimentConfig, units: list[Unit], plan: SplitPlan, fold: int) -> FoldData:
    parts = plan.partition(fold)
    where = {rec: name for name, recs in parts.items() for rec in recs}
    split_units = {"train": [], "val": [], "test": []}
    for u in units:
        if u.recording in where:
            split_units[where[u.recording]].append(u)
    if not split_units["train"]:
        raise DataError(f"fold {fold} has an empty training set")

    corrector = fit_corrector(cfg, split_units["train"])
    corr = corrector if corrector.enabled else None
    base_bank = mel_filterbank(cfg.spectral_config())

    by_id = {u.unit_id: u for u in split_units["train"]}
    rows = [(u.unit_id, u.category, u.label, u.device) for u in split_units["train"]]
    if cfg.augment_enabled():
        counts = Counter(u.category for u in split_units["train"])
        plan_ = aug.build_balance_plan(counts, cfg.task, seed=int(cfg["augment"]["seed"]) + fold,
                                       flip=cfg["augment"]["flip"])
        items = aug.expand_plan(rows, cfg.tune_plan(plan_))
    else:
        items = [aug.AugmentedItem(uid, uid, cat, lab, dev) for uid, cat, lab, dev in rows]

    feats: dict[str, list] = {k: [] for k in split_units}
    labels: dict[str, list] = {k: [] for k in split_units}
    seg_units: dict[str, list] = {k: [] for k in split_units}
    for it in items:
        u = by_id[it.source_id]
        for v in item_features(u.samples, u.device, it.ops, cfg, base_bank, corr):
            feats["train"].append(v)
            labels["train"].append(u.label)
            seg_units["train"].append(u.unit_id)
    for name in ("val", "test"):
        for u in split_units[name]:
            for v in item_features(u.samples, u.device, (), cfg, base_bank, corr):
                feats[name].append(v)
                labels[name].append(u.label)
                seg_units[name].append(u.unit_id)

    stats = NormStats()
    for v in feats["train"]:
        stats.update(v)
    X = {k: _stack([stats.normalize(v) for v in feats[k]], cfg.layout) for k in feats}
    y = {k: torch.tensor(labels[k], dtype=torch.long) for k in labels}
    unit_labels = {k: {u.unit_id: u.label for u in split_units[k]} for k in split_units}
    return FoldData(fold, X, y, seg_units, unit_labels, corrector, stats, items)


# --- training / evaluation --------------------------------------------------

def learn_relationship(cfg: ExperimentConfig, model, data: FoldData) -> CategoryRelationship:
    """Category relationship from a frozen forward pass of the pre-trained source head."""
    cot = cfg["cotuning"]
    temperature = float(cot["temperature"])
    for split in ("val", "train"):
        X, y = data.X[split], data.y[split].numpy()
        if len(y) == 0:
            continue
        probs = softmax(predict_logits(model, X, source=True) / temperature, axis=1)
        try:
            if cot["relationship"] == "reverse":
                return relationship_reverse(probs, y, n_target=cfg.n_classes,
                                            weight_decay=float(cot["reverse_weight_decay"]),
                                            temperature=temperature)
            return relationship_direct(probs, y, cfg.n_classes, temperature)
        except MissingClassSamples as exc:
            logger.warning("relationship from %s split failed (%s)", split, exc)
    raise MissingClassSamples("no split covers every target class")


def build_model(cfg: ExperimentConfig, mode: str, depth: int, seed: int, archive=None):
    spec = cfg.backbone_spec(mode, depth, seed)
    if archive is None:
        archive = resolve_archive(spec)
    backbone = build(spec, archive)
    n_source = n_source_classes(archive)
    if mode.startswith("cotuning") and n_source is None:
        raise ConfigError("co-tuning needs pre-trained source classifier weights (fc.*)")
    return attach_heads(backbone, n_source, cfg.n_classes, mode, archive, seed), spec


def train_fold(cfg: ExperimentConfig, data: FoldData, mode: str, depth: int, run_seed: int,
               archive=None):
    model, spec = build_model(cfg, mode, depth, run_seed, archive)
    rel = learn_relationship(cfg, model, data) if mode.startswith("cotuning") else None
    tcfg = cfg.train_config(mode, run_seed)
    val = (data.X["val"], data.y["val"]) if len(data.y["val"]) else None
    state, history = fit(model, (data.X["train"], data.y["train"]), val, tcfg, rel)
    return model, history, rel, spec


def evaluate(model, data: FoldData, task: str, split: str = "test", run_seed: int = 0) -> MetricsReport:
    probs = softmax(predict_logits(model, data.X[split]), axis=1)
    units, preds = aggregate_units(data.seg_units[split], probs)
    labels = [data.unit_labels[split][u] for u in units]
    return compute_metrics(preds, labels, task, fold=data.fold, run_seed=run_seed)


# --- persistence ------------------------------------------------------------

def save_checkpoint(path: Path, model, cfg: ExperimentConfig, plan: SplitPlan, data: FoldData,
                    mode: str, depth: int, run: int, seed: int, rel: CategoryRelationship | None,
                    history: History) -> None:
    n_source = model.source_head.out_features if model.source_head is not None else None
    torch.save({
        "model": model.state_dict(),
        "config_hash": cfg.digest(),
        "config": cfg.doc,
        "split_fingerprint": plan.fingerprint(),
        "fold": data.fold, "run": run, "seed": seed, "mode": mode, "depth": depth,
        "n_source": n_source, "n_classes": cfg.n_classes,
        "norm_stats": asdict(data.stats),
        "relationship": None if rel is None else {"matrix": rel.matrix.tolist(), "method": rel.method,
                                                  "temperature": rel.calibration_temperature},
        "best_epoch": history.best_epoch,
    }, path)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig, plan: SplitPlan | None = None):
    path = Path(path)
    if not path.exists():
        raise CheckpointMismatch(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("config_hash") != cfg.digest():
        raise CheckpointMismatch(f"{path} was trained with config {ckpt.get('config_hash')}, "
                                 f"current config is {cfg.digest()}")
    if plan is not None and ckpt.get("split_fingerprint") != plan.fingerprint():
        raise CheckpointMismatch(f"{path} was trained on a different split")
    spec = replace(cfg.backbone_spec(ckpt["mode"], ckpt["depth"], ckpt["seed"]), pretrained="random",
                   weights_path=None)
    backbone = build(spec, archive=None)
    state = ckpt["model"]
    heads = ({"fc.weight": state["source_head.weight"].numpy(), "fc.bias": state["source_head.bias"].numpy()}
             if "source_head.weight" in state else None)
    model = attach_heads(backbone, ckpt["n_source"], ckpt["n_classes"], ckpt["mode"], heads, ckpt["seed"])
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


def read_results(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def append_result(path: str | Path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow(row)


def result_row(cfg: ExperimentConfig, report: MetricsReport, mode: str, depth: int, run: int,
               seed: int, best_epoch: int) -> dict:
    r = report.row()
    return {"schema_version": RESULTS_VERSION, "config_hash": cfg.digest(), "task": cfg.task,
            "mode": mode, "depth": depth, "fold": report.fold, "run": run, "seed": seed,
            "n_units": report.n_units, "SE": r["SE"], "SP": r["SP"], "AS": r["AS"], "HS": r["HS"],
            "precision": "" if report.precision is None else report.precision,
            "recall": "" if report.recall is None else report.recall,
            "F1": "" if report.F1 is None else report.F1, "best_epoch": best_epoch,
            "confusion": r["confusion"]}


def result_key(row: dict) -> tuple:
    return (str(row["config_hash"]), str(row["mode"]), str(row["depth"]), str(row["fold"]), str(row["run"]))


# --- driver -----------------------------------------------------------------

def folds_to_run(cfg: ExperimentConfig, plan: SplitPlan) -> list[int]:
    chosen = cfg["split"]["folds"]
    return list(range(plan.n_folds)) if chosen is None else [int(f) for f in chosen]


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None,
                   archives: dict | None = None) -> list[dict]:
    """Run every (fold, run, mode, depth) combination; returns the result rows of this config."""
    out = Path(output_dir or cfg["experiment"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    results_path = out / "results.csv"
    done = {result_key(r) for r in read_results(results_path)}

    recordings, manifest_folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, manifest_folds)
    units = load_units(cfg, recordings)
    n_runs = int(cfg["experiment"]["n_runs"])
    base_seed = int(cfg["experiment"]["seed"])
    archives = archives or {}

    for fold in folds_to_run(cfg, plan):
        data = None
        for run in range(n_runs):
            seed = base_seed + run
            for depth in cfg.depths:
                for mode in cfg.modes:
                    key = (cfg.digest(), mode, str(depth), str(fold), str(run))
                    if key in done:
                        logger.info("skipping finished %s", key)
                        continue
                    if data is None:
                        data = prepare_fold(cfg, units, plan, fold)
                        if cfg["speccorr"]["preset"]:
                            data.corrector.save(out / f"speccorr_fold{fold}.json", cfg.digest())
                    if depth not in archives:
                        archives[depth] = resolve_archive(cfg.backbone_spec(mode, depth, seed))
                    try:
                        model, history, rel, _ = train_fold(cfg, data, mode, depth, seed, archives[depth])
                    except LungSoundError as exc:
                        raise type(exc)(f"fold {fold}, run {run}, {mode}/ResNet{depth}: {exc}") from exc
                    tag = f"{mode}_r{depth}_f{fold}_run{run}"
                    history.to_csv(out / f"history_{tag}.csv")
                    save_checkpoint(out / f"ckpt_{tag}.pt", model, cfg, plan, data, mode, depth, run,
                                    seed, rel, history)
                    report = evaluate(model, data, cfg.task, run_seed=seed)
                    append_result(results_path, result_row(cfg, report, mode, depth, run, seed,
                                                           history.best_epoch))
                    done.add(key)
                    logger.info("%s: AS=%.4f SE=%.4f SP=%.4f", tag, report.AS, report.SE, report.SP)
    rows = [r for r in read_results(results_path) if r["config_hash"] == cfg.digest()]
    write_summary(out / "summary.csv", rows)
    return rows


SUMMARY_METRICS = ("SE", "SP", "AS", "HS")


def summary_rows(rows: list[dict]) -> list[dict]:
    """Mean and std of each metric per (task, mode, depth) over folds and runs."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["task"], r["mode"], str(r["depth"])), []).append(r)
    out = []
    for (task, mode, depth), rs in groups.items():
        row = {"task": task, "mode": mode, "depth": depth, "n": len(rs)}
        for k in SUMMARY_METRICS:
            vals = np.array([float(r[k]) for r in rs])
            row[f"{k}_mean"], row[f"{k}_std"] = float(vals.mean()), float(vals.std())
        out.append(row)
    return out


def write_summary(path: str | Path, rows: list[dict]) -> None:
    summary = summary_rows(rows)
    if not summary:
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)


def summarize_results(rows: list[dict]) -> list[str]:
    return [f"{s['task']} {s['mode']:>20s} ResNet{s['depth']}: "
            + "  ".join(f"{k}={100 * s[k + '_mean']:.2f}±{100 * s[k + '_std']:.2f}" for k in SUMMARY_METRICS)
            + f"  (n={s['n']})" for s in summary_rows(rows)]


def export_embeddings(checkpoint: str | Path, cfg: ExperimentConfig, split: str, path: str | Path,
                      level: str = "unit") -> int:
    """Write ``unit_id, label, e0..eD`` rows of pooled embeddings; returns the row count."""
    recordings, manifest_folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, manifest_folds)
    model, ckpt = load_checkpoint(checkpoint, cfg, plan)
    data = prepare_fold(cfg, load_units(cfg, recordings), plan, ckpt["fold"])
    return write_embeddings(model, data, split, path, level)


def write_embeddings(model, data: FoldData, split: str, path: str | Path, level: str = "unit") -> int:
    emb = pooled_embedding(model, data.X[split]) if len(data.y[split]) else np.zeros((0, 0))
    ids, labels = data.seg_units[split], data.y[split].tolist()
    if level == "unit":
        order = list(dict.fromkeys(ids))
        idx = {u: [i for i, v in enumerate(ids) if v == u] for u in order}
        rows = [(u, data.unit_labels[split][u], emb[idx[u]].mean(axis=0)) for u in order]
    else:
        rows = [(f"{u}@{i}", labels[i], emb[i]) for i, u in enumerate(ids)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        dim = emb.shape[1] if len(rows) else 0
        w.writerow(["unit_id", "label"] + [f"e{i}" for i in range(dim)])
        for u, lab, vec in rows:
            w.writerow([u, lab] + [repr(float(v)) for v in vec])
    return len(rows)
