"""Category relationship learning and the fine-tuning loops.

Modes: ``vanilla`` (target head only), ``cotuning`` (target head plus the
retained source head supervised with probabilistic source labels),
``stochnorm`` and ``cotuning_stochnorm`` (same objectives over a backbone
whose normalization layers are :class:`~lungsound.stochnorm.StochNorm2d`).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import optimize
from scipy.special import log_softmax, softmax
from torch.utils.data import DataLoader, TensorDataset

from .errors import (
    ConfigError,
    DegenerateValidation,
    DivergenceDetected,
    EmptyValidation,
    MissingClassSamples,
    ShapeMismatch,
    SingularFit,
)

logger = logging.getLogger(__name__)

MODES = ("vanilla", "cotuning", "stochnorm", "cotuning_stochnorm")


@dataclass
class CategoryRelationship:
    matrix: np.ndarray  # [n_target, n_source], rows are p(y_s | y_t)
    method: str = "direct"
    calibration_temperature: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("relationship rows must be nonnegative and sum to 1")
        self.matrix = m


@dataclass
class TrainConfig:
    mode: str = "vanilla"
    lam: float = 1.0
    lr_backbone: float = 0.001
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.lr_backbone < 0 or self.lr_heads < 0 or self.lam < 0:
            raise ConfigError("learning rates and lambda must be nonnegative")

    @property
    def head_lr(self) -> float:
        # vanilla fine-tuning runs a single learning rate for everything
        return self.lr_backbone if self.mode == "vanilla" else self.lr_heads

    @property
    def uses_cotuning(self) -> bool:
        return self.mode.startswith("cotuning")

    @property
    def uses_stochnorm(self) -> bool:
        return self.mode.endswith("stochnorm")


# --- calibration ------------------------------------------------------------

def _nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    lp = log_softmax(logits / temperature, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def calibrate(logits: np.ndarray, labels: np.ndarray) -> float:
    """Temperature minimizing validation NLL of ``softmax(logits / T)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyValidation("no validation samples to calibrate on")
    if len(np.unique(labels)) < 2:
        raise DegenerateValidation("validation labels cover a single class")
    res = optimize.minimize_scalar(lambda lt: _nll(logits, labels, math.exp(lt)),
                                   bounds=(math.log(1e-2), math.log(1e2)), method="bounded",
                                   options={"xatol": 1e-8})
    return float(math.exp(res.x))


# --- category relationship --------------------------------------------------

def _class_count(labels: np.ndarray, n_target: int | None) -> int:
    return int(labels.max()) + 1 if n_target is None else n_target


def relationship_direct(source_probs: np.ndarray, target_labels: np.ndarray,
                        n_target: int | None = None, temperature: float = 1.0) -> CategoryRelationship:
    """Row ``y`` is the mean source distribution over samples labelled ``y``."""
    P = np.asarray(source_probs, dtype=np.float64)
    y = np.asarray(target_labels, dtype=np.int64)
    k = _class_count(y, n_target)
    rows = []
    for c in range(k):
        sel = P[y == c]
        if len(sel) == 0:
            raise MissingClassSamples(f"no samples for target class {c}")
        rows.append(sel.mean(axis=0))
    rel = np.asarray(rows)
    return CategoryRelationship(rel / rel.sum(axis=1, keepdims=True), "direct", temperature)


def bayes_invert(likelihood: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """``p(y_s|y_t)`` from ``likelihood[s, t] = p(y_t|y_s)`` and ``prior[s] = p(y_s)``."""
    joint = np.asarray(likelihood, dtype=np.float64).T * np.asarray(prior, dtype=np.float64)[None, :]
    return joint / joint.sum(axis=1, keepdims=True)


def fit_reverse_likelihood(source_probs: np.ndarray, target_labels: np.ndarray, n_target: int,
                           weight_decay: float = 1e-4) -> np.ndarray:
    """Multinomial logistic map source-probabilities -> target label.

    Returns ``p(y_t|y_s)`` as ``[n_source, n_target]``, read off by evaluating
    the fitted map on the source basis vectors.
    """
    X = np.asarray(source_probs, dtype=np.float64)
    y = np.asarray(target_labels, dtype=np.int64)
    n, d = X.shape
    Y = np.eye(n_target)[y]

    def objective(w):
        W = w.reshape(n_target, d)
        z = X @ W.T
        lp = log_softmax(z, axis=1)
        loss = -(Y * lp).sum() / n + 0.5 * weight_decay * (W ** 2).sum()
        grad = (softmax(z, axis=1) - Y).T @ X / n + weight_decay * W
        return loss, grad.ravel()

    res = optimize.minimize(objective, np.zeros(n_target * d), jac=True, method="L-BFGS-B",
                            options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
    W = res.x.reshape(n_target, d)
    if not np.all(np.isfinite(W)):
        raise SingularFit("logistic fit produced non-finite weights")
    return softmax(W.T, axis=1)


def relationship_reverse(source_probs: np.ndarray, target_labels: np.ndarray,
                         source_prior: np.ndarray | None = None, n_target: int | None = None,
                         weight_decay: float = 1e-4, temperature: float = 1.0) -> CategoryRelationship:
    """Learn ``y_s -> y_t`` and invert it with Bayes' rule.

    ``source_prior`` defaults to the mean of ``source_probs``. Falls back to
    the direct approach when the fit fails.
    """
    P = np.asarray(source_probs, dtype=np.float64)
    y = np.asarray(target_labels, dtype=np.int64)
    k = _class_count(y, n_target)
    missing = sorted(set(range(k)) - set(y.tolist()))
    if missing:
        raise MissingClassSamples(f"no samples for target classes {missing}")
    prior = P.mean(axis=0) if source_prior is None else np.asarray(source_prior, dtype=np.float64)
    try:
        likelihood = fit_reverse_likelihood(P, y, k, weight_decay)
        rel = bayes_invert(likelihood, prior)
        if not np.all(np.isfinite(rel)):
            raise SingularFit("Bayes inversion is not finite")
    except SingularFit as exc:
        logger.warning("reverse relationship failed (%s); using direct approach", exc)
        return relationship_direct(P, y, k, temperature)
    return CategoryRelationship(rel, "reverse", temperature)


# --- objective --------------------------------------------------------------

def soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    return -(target_probs * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def loss_cotuning(target_logits: torch.Tensor, source_logits: torch.Tensor | None, y_t: torch.Tensor,
                  rel: torch.Tensor | CategoryRelationship | None, lam: float) -> torch.Tensor:
    """Hard CE on the target head plus ``lam`` x soft CE of the source head against ``rel[y_t]``."""
    ce = F.cross_entropy(target_logits, y_t)
    if lam == 0 or source_logits is None:
        return ce
    if isinstance(rel, CategoryRelationship):
        rel = torch.as_tensor(rel.matrix)
    rel = rel.to(source_logits.dtype)
    if rel.shape[1] != source_logits.shape[1]:
        raise ShapeMismatch(f"relationship has {rel.shape[1]} source classes, logits {source_logits.shape[1]}")
    return ce + lam * soft_cross_entropy(source_logits, rel[y_t])


# --- training ---------------------------------------------------------------

@torch.no_grad()
def predict_logits(model, X: torch.Tensor, batch_size: int = 64, source: bool = False) -> np.ndarray:
    was = model.training
    model.eval()
    outs = []
    for i in range(0, len(X), batch_size):
        xb = X[i:i + batch_size]
        if source:
            outs.append(model.source_head(model.backbone(xb)))
        else:
            outs.append(model(xb))
    model.train(was)
    return torch.cat(outs).cpu().numpy() if outs else np.zeros((0, 0))


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = -math.inf

    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    def to_csv(self, path) -> None:
        import csv
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.SGD:
    head_ids = {id(p) for p in model.head_parameters()}
    backbone = [p for p in model.parameters() if id(p) not in head_ids]
    return torch.optim.SGD([{"params": backbone, "lr": cfg.lr_backbone},
                            {"params": model.head_parameters(), "lr": cfg.head_lr}],
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def fit(model, train_data: tuple[torch.Tensor, torch.Tensor], val_data: tuple[torch.Tensor, torch.Tensor] | None,
        cfg: TrainConfig, relationship: CategoryRelationship | None = None,
        on_epoch=None) -> tuple[dict, History]:
    """Mini-batch SGD fine-tuning; keeps the weights with the best validation accuracy.

    Returns ``(best_state_dict, history)``; ``model`` is left holding the
    best weights. The source head is only used in the loss, never for
    predictions.
    """
    if cfg.uses_cotuning and (relationship is None or model.source_head is None):
        raise ConfigError("co-tuning modes need a source head and a category relationship")
    torch.manual_seed(cfg.seed)
    X, y = train_data
    loader = DataLoader(TensorDataset(X, y), batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed))
    opt = make_optimizer(model, cfg)
    rel = torch.as_tensor(relationship.matrix) if (cfg.uses_cotuning and relationship) else None
    lam = cfg.lam if cfg.uses_cotuning else 0.0
    history = History()
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        model.train()
        total, count = 0.0, 0
        for xb, yb in loader:
            if len(xb) < 2:
                continue  # a single-sample batch has no batch statistics
            t_logits, s_logits = model.forward_both(xb)
            loss = loss_cotuning(t_logits, s_logits if lam else None, yb, rel, lam)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
            count += len(xb)
        row = {"epoch": epoch, "train_loss": total / max(count, 1)}
        if val_data is not None and len(val_data[0]):
            logits = predict_logits(model, val_data[0])
            yv = val_data[1].numpy()
            row["val_loss"] = float(F.cross_entropy(torch.from_numpy(logits), val_data[1]).item())
            row["val_acc"] = float((logits.argmax(1) == yv).mean())
            metric = row["val_acc"]
        else:
            metric = -row["train_loss"]
        if metric > history.best_metric:
            history.best_metric, history.best_epoch = metric, epoch
            best_state = copy.deepcopy(model.state_dict())
        history.rows.append(row)
        logger.info("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, row)

    model.load_state_dict(best_state)
    return best_state, history
