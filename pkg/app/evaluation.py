"""
Linear-probe protocol and group fairness metrics over frozen embeddings.

The probe is a logistic regression on standardized embeddings trained by full-batch
gradient descent. Fairness is reported as the equalized-odds gap

    EO = 100 * max(|TPR_0 - TPR_1|, |FPR_0 - FPR_1|)

where TPR_s = P(yhat=1 | y=1, s) and FPR_s = P(yhat=1 | y=0, s). Per-group confusion
counts are kept so other aggregations can be recomputed offline.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import structlog

from .diffcore import Tensor
from .exceptions import ContractViolation, DegenerateTaskError, UndefinedRateError

logger = structlog.get_logger()

DEFAULT_PROBE_EPOCHS = 200
DEFAULT_PROBE_LR = 0.1
_STD_FLOOR = 1e-12


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_frozen_array(embeddings) -> np.ndarray:
    if isinstance(embeddings, Tensor):
        if embeddings.requires_grad:
            raise ContractViolation("probe embeddings must be detached from the encoder graph")
        embeddings = embeddings.values
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"embeddings must be n x m, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("embeddings contain non-finite values")
    return arr


def _as_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values).ravel()
    if not np.isin(arr, (0, 1)).all():
        raise ContractViolation(f"{name} must be binary")
    return arr.astype(np.int64)


@dataclass
class LinearProbe:
    """Logistic classifier over standardized embeddings; mean/std come from the training split."""
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    loss_history: List[float] = field(default_factory=list)

    def decision_function(self, embeddings) -> np.ndarray:
        x = _as_frozen_array(embeddings)
        if x.shape[1] != self.weights.shape[0]:
            raise ContractViolation(f"probe expects width {self.weights.shape[0]}, got {x.shape[1]}")
        return ((x - self.mean) / self.std) @ self.weights + self.bias

    def predict_proba(self, embeddings) -> np.ndarray:
        return _sigmoid(self.decision_function(embeddings))

    def predict(self, embeddings) -> np.ndarray:
        return (self.decision_function(embeddings) > 0).astype(np.int64)


def train_linear_probe(
    embeddings,
    targets,
    epochs: int = DEFAULT_PROBE_EPOCHS,
    lr: float = DEFAULT_PROBE_LR,
    seed: int = 0,
) -> LinearProbe:
    """
    Fit the probe with full-batch gradient descent on mean cross-entropy.

    Args:
        embeddings: n x m frozen embeddings (array, or a Tensor without grad)
        targets: n binary labels
        epochs: gradient steps
        lr: step size
        seed: seeds the small random weight init

    Raises:
        DegenerateTaskError: targets contain a single class
    """
    x = _as_frozen_array(embeddings)
    y = _as_binary(targets, "targets")
    if y.shape[0] != x.shape[0]:
        raise ContractViolation(f"{y.shape[0]} targets for {x.shape[0]} embeddings")
    if np.unique(y).size < 2:
        raise DegenerateTaskError(f"probe target has a single class ({np.unique(y).tolist()})")
    if epochs < 0 or not lr > 0:
        raise ContractViolation(f"probe needs epochs >= 0 and lr > 0, got {epochs}, {lr}")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < _STD_FLOOR, 1.0, std)
    xs = (x - mean) / std

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=x.shape[1])
    b = 0.0
    n = x.shape[0]
    history = []
    for _ in range(epochs):
        logits = xs @ w + b
        history.append(float(np.mean(np.logaddexp(0.0, logits) - y * logits)))
        residual = _sigmoid(logits) - y
        w = w - lr * (xs.T @ residual) / n
        b = b - lr * float(residual.mean())

    logger.debug("probe_trained", samples=n, width=x.shape[1], epochs=epochs, final_loss=history[-1] if history else None)
    return LinearProbe(weights=w, bias=b, mean=mean, std=std, loss_history=history)


def accuracy(predictions, targets) -> float:
    """Percent of predictions equal to targets."""
    p = np.asarray(predictions).ravel()
    t = np.asarray(targets).ravel()
    if p.shape != t.shape:
        raise ContractViolation(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractViolation("accuracy of an empty prediction set")
    return 100.0 * float(np.mean(p == t))


# ─────────────────────────────────────────────────────────────────────────────
# Equalized odds
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class GroupConfusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class FairnessReport:
    """EO and its two components, all in percent, with per-group confusion counts."""
    eo: float
    tpr_gap: float
    fpr_gap: float
    confusion: Dict[int, GroupConfusion]

    def rates(self) -> Dict[int, Dict[str, float]]:
        return {
            s: {"tpr": c.tp / (c.tp + c.fn), "fpr": c.fp / (c.fp + c.tn)}
            for s, c in self.confusion.items()
        }


def group_confusion(predictions, targets, sensitive) -> Dict[int, GroupConfusion]:
    p = _as_binary(predictions, "predictions")
    t = _as_binary(targets, "targets")
    s = _as_binary(sensitive, "sensitive")
    if not (p.shape == t.shape == s.shape):
        raise ContractViolation(f"length mismatch: {p.size} predictions, {t.size} targets, {s.size} sensitive")
    out = {}
    for group in (0, 1):
        in_group = s == group
        out[group] = GroupConfusion(
            tp=int(np.sum(in_group & (t == 1) & (p == 1))),
            fp=int(np.sum(in_group & (t == 0) & (p == 1))),
            tn=int(np.sum(in_group & (t == 0) & (p == 0))),
            fn=int(np.sum(in_group & (t == 1) & (p == 0))),
        )
    return out


def fairness_report(predictions, targets, sensitive) -> FairnessReport:
    """
    Raises:
        UndefinedRateError: some (y, s) cell has no samples
    """
    confusion = group_confusion(predictions, targets, sensitive)
    for group, c in confusion.items():
        if c.tp + c.fn == 0:
            raise UndefinedRateError(target=1, sensitive=group)
        if c.fp + c.tn == 0:
            raise UndefinedRateError(target=0, sensitive=group)
    tpr = {g: c.tp / (c.tp + c.fn) for g, c in confusion.items()}
    fpr = {g: c.fp / (c.fp + c.tn) for g, c in confusion.items()}
    tpr_gap = 100.0 * abs(tpr[0] - tpr[1])
    fpr_gap = 100.0 * abs(fpr[0] - fpr[1])
    return FairnessReport(eo=max(tpr_gap, fpr_gap), tpr_gap=tpr_gap, fpr_gap=fpr_gap, confusion=confusion)


def equalized_odds(predictions, targets, sensitive) -> float:
    """EO gap in percent: 100 * max over y of |P(yhat=1 | y, s=0) - P(yhat=1 | y, s=1)|."""
    return fairness_report(predictions, targets, sensitive).eo


# ─────────────────────────────────────────────────────────────────────────────
# Probe protocol
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class ProbeResult:
    probe: LinearProbe
    accuracy: float
    eo: float
    tpr_gap: float
    fpr_gap: float
    confusion: Dict[int, GroupConfusion]

    def summary(self) -> Dict[str, object]:
        return {
            "accuracy": round(self.accuracy, 6),
            "eo": round(self.eo, 6),
            "tpr_gap": round(self.tpr_gap, 6),
            "fpr_gap": round(self.fpr_gap, 6),
            "confusion": {str(s): asdict(c) for s, c in self.confusion.items()},
        }


def evaluate_probe(probe: LinearProbe, embeddings, targets, sensitive) -> ProbeResult:
    predictions = probe.predict(embeddings)
    report = fairness_report(predictions, targets, sensitive)
    return ProbeResult(
        probe=probe,
        accuracy=accuracy(predictions, targets),
        eo=report.eo,
        tpr_gap=report.tpr_gap,
        fpr_gap=report.fpr_gap,
        confusion=report.confusion,
    )


def linear_probe_protocol(
    train_embeddings,
    train_targets,
    test_embeddings,
    test_targets,
    test_sensitive,
    epochs: int = DEFAULT_PROBE_EPOCHS,
    lr: float = DEFAULT_PROBE_LR,
    seed: int = 0,
    log=None,
) -> ProbeResult:
    """Train on the training split's frozen embeddings, score accuracy and EO on the test split."""
    probe = train_linear_probe(train_embeddings, train_targets, epochs=epochs, lr=lr, seed=seed)
    result = evaluate_probe(probe, test_embeddings, test_targets, test_sensitive)
    (log or logger).info(
        "probe_evaluated",
        accuracy=round(result.accuracy, 4),
        eo=round(result.eo, 4),
        tpr_gap=round(result.tpr_gap, 4),
        fpr_gap=round(result.fpr_gap, 4),
    )
    return result
