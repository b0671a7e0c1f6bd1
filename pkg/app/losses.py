"""
Contrastive objectives: SimCLR and SupCon base losses, and the ProtoFair regularizer.

All losses share one shape: for each anchor i with a non-empty positive set P_i,
average over j in P_i of

    -log( exp(s_ij / tau) / sum_{k in D_i} exp(s_ik / tau) )

then average over those anchors. Only the positive set and the denominator set D_i
change between losses. Denominators go through a masked log-sum-exp.
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np
import structlog

from . import diffcore as dc
from .diffcore import Tensor
from .exceptions import ContractViolation
from .feature_queue import QueueSnapshot

logger = structlog.get_logger()

UNIT_NORM_TOL = 1e-6


@dataclass
class BatchAnnotations:
    """Per-row sensitive attribute, detached cluster id and optional target label."""
    sensitive: np.ndarray
    cluster: np.ndarray
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64).ravel()
        self.cluster = np.asarray(self.cluster, dtype=np.int64).ravel()
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.int64).ravel()
        if self.sensitive.shape != self.cluster.shape:
            raise ContractViolation(
                f"annotation lengths differ: {self.sensitive.size} sensitive, {self.cluster.size} cluster"
            )
        if self.target is not None and self.target.shape != self.sensitive.shape:
            raise ContractViolation(f"{self.target.size} targets for {self.sensitive.size} samples")
        if not np.isin(self.sensitive, (0, 1)).all():
            raise ContractViolation("sensitive attribute must be binary")
        if self.cluster.size and self.cluster.min() < 0:
            raise ContractViolation("cluster ids must be non-negative")

    def __len__(self) -> int:
        return self.sensitive.size


@dataclass(frozen=True)
class LossConfig:
    """Temperature tau (> 0) and fairness weight lambda (>= 0)."""
    temperature: float = 0.1
    lambda_fair: float = 0.3

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractViolation(f"temperature must be > 0, got {self.temperature}")
        if not self.lambda_fair >= 0:
            raise ContractViolation(f"lambda_fair must be >= 0, got {self.lambda_fair}")


@dataclass
class PositiveSets:
    """
    Pseudo-counterfactual positives as a boolean anchor x candidate mask.

    mask[i, j] is True iff candidate j shares i's cluster and has the other
    sensitive value.
    """
    mask: np.ndarray

    @property
    def members(self) -> List[np.ndarray]:
        return [np.flatnonzero(row) for row in self.mask]

    @property
    def valid(self) -> np.ndarray:
        """Anchors with at least one positive (the set V)."""
        return np.flatnonzero(self.mask.any(axis=1))

    @property
    def num_pairs(self) -> int:
        return int(self.mask.sum())


class FairnessTerms(NamedTuple):
    """Within-batch, cross-batch and combined ProtoFair losses."""
    total: Tensor
    within: Tensor
    cross: Tensor
    within_anchors: int
    cross_anchors: int


def _check_unit_rows(z: Tensor, what: str) -> None:
    norms = np.linalg.norm(z.values, axis=1)
    tol = 1e-4 if z.dtype == np.float32 else UNIT_NORM_TOL
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ContractViolation(f"{what}: row {int(bad[0])} has norm {norms[bad[0]]:.9f}, expected unit norm")


def _mean_log_ratio(sims: Tensor, positives: np.ndarray, denominator: np.ndarray) -> Tensor:
    """
    mean_{i in V} mean_{j in P_i} [ logsumexp_{k in D_i} sims_ik - sims_ij ].

    Returns an exact gradient-free 0 when V is empty.
    """
    pos_counts = positives.sum(axis=1)
    anchors = pos_counts > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return dc.zeros_scalar(like=sims)

    # weight of pair (i, j): 1 / (|V| |P_i|)
    pair_weights = np.zeros(positives.shape, dtype=sims.dtype)
    pair_weights[anchors] = positives[anchors] / (pos_counts[anchors, None] * n_anchors)
    row_weights = pair_weights.sum(axis=1, keepdims=True)

    denom_mask = denominator & anchors[:, None]
    lse = dc.masked_log_sum_exp_rows(sims, denom_mask)
    return dc.add(dc.weighted_sum(lse, row_weights), dc.scale(dc.weighted_sum(sims, pair_weights), -1.0))


# ─────────────────────────────────────────────────────────────────────────────
# Pseudo-counterfactual positive sets
# ─────────────────────────────────────────────────────────────────────────────

def positive_sets(cluster, sensitive) -> PositiveSets:
    """P_i = { j != i : cluster_j == cluster_i and s_j != s_i }."""
    cluster = np.asarray(cluster, dtype=np.int64).ravel()
    sensitive = np.asarray(sensitive, dtype=np.int64).ravel()
    if cluster.shape != sensitive.shape:
        raise ContractViolation(f"{cluster.size} cluster ids for {sensitive.size} sensitive labels")
    # j == i is excluded automatically: a sample shares its own sensitive value
    mask = (cluster[:, None] == cluster[None, :]) & (sensitive[:, None] != sensitive[None, :])
    return PositiveSets(mask=mask)


def queue_positive_sets(cluster, sensitive, snapshot: QueueSnapshot) -> PositiveSets:
    """P^q_i = { j in queue : queued cluster_j == cluster_i and queued s_j != s_i }."""
    cluster = np.asarray(cluster, dtype=np.int64).ravel()
    sensitive = np.asarray(sensitive, dtype=np.int64).ravel()
    if cluster.shape != sensitive.shape:
        raise ContractViolation(f"{cluster.size} cluster ids for {sensitive.size} sensitive labels")
    mask = (cluster[:, None] == snapshot.cluster_ids[None, :]) & (sensitive[:, None] != snapshot.sensitive[None, :])
    return PositiveSets(mask=mask)


# ─────────────────────────────────────────────────────────────────────────────
# ProtoFair regularizer
# ─────────────────────────────────────────────────────────────────────────────

def within_batch_loss(z: Tensor, positives: PositiveSets, temperature: float) -> Tensor:
    """
    Within-batch fairness loss over pseudo-counterfactual positives.

    The denominator ranges over every non-self row of the batch.

    Args:
        z: B x d unit-norm contrastive embeddings
        positives: output of positive_sets for the same rows
        temperature: tau > 0
    """
    _check_unit_rows(z, "within_batch_loss")
    n = z.shape[0]
    if positives.mask.shape != (n, n):
        raise ContractViolation(f"positive mask {positives.mask.shape} does not match batch of {n}")
    if positives.valid.size == 0:
        return dc.zeros_scalar(like=z)
    sims = dc.scale(dc.matmul(z, z, transpose_b=True), 1.0 / temperature)
    return _mean_log_ratio(sims, positives.mask, ~np.eye(n, dtype=bool))


def cross_batch_loss(z: Tensor, snapshot: QueueSnapshot, positives: PositiveSets, temperature: float) -> Tensor:
    """
    Cross-batch fairness loss against the queue.

    The denominator sums over all queue entries. Queue values enter as constants,
    so gradient flows into z only.
    """
    _check_unit_rows(z, "cross_batch_loss")
    if len(snapshot) == 0 or positives.valid.size == 0:
        return dc.zeros_scalar(like=z)
    if positives.mask.shape != (z.shape[0], len(snapshot)):
        raise ContractViolation(
            f"queue positive mask {positives.mask.shape} does not match {z.shape[0]} x {len(snapshot)}"
        )
    queued = dc.constant(snapshot.z, like=z)
    sims = dc.scale(dc.matmul(z, queued, transpose_b=True), 1.0 / temperature)
    return _mean_log_ratio(sims, positives.mask, np.ones(positives.mask.shape, dtype=bool))


def protofair_terms(
    z: Tensor,
    annotations: BatchAnnotations,
    snapshot: Optional[QueueSnapshot],
    temperature: float,
) -> FairnessTerms:
    """Both ProtoFair components and their sum. A None snapshot disables the queue term."""
    if len(annotations) != z.shape[0]:
        raise ContractViolation(f"{len(annotations)} annotations for {z.shape[0]} rows")
    within_pos = positive_sets(annotations.cluster, annotations.sensitive)
    within = within_batch_loss(z, within_pos, temperature)

    if snapshot is None or len(snapshot) == 0:
        cross = dc.zeros_scalar(like=z)
        cross_anchors = 0
    else:
        cross_pos = queue_positive_sets(annotations.cluster, annotations.sensitive, snapshot)
        cross = cross_batch_loss(z, snapshot, cross_pos, temperature)
        cross_anchors = int(cross_pos.valid.size)

    return FairnessTerms(
        total=dc.add(within, cross),
        within=within,
        cross=cross,
        within_anchors=int(within_pos.valid.size),
        cross_anchors=cross_anchors,
    )


def protofair_loss(
    z: Tensor,
    annotations: BatchAnnotations,
    snapshot: Optional[QueueSnapshot],
    temperature: float,
) -> Tensor:
    """L_CF = L_within + L_cross."""
    return protofair_terms(z, annotations, snapshot, temperature).total


# ─────────────────────────────────────────────────────────────────────────────
# Base objectives
# ─────────────────────────────────────────────────────────────────────────────

def _view_partner_mask(n_rows: int) -> np.ndarray:
    if n_rows % 2:
        raise ContractViolation(f"two-view batch needs an even row count, got {n_rows}")
    half = n_rows // 2
    idx = np.arange(n_rows)
    mask = np.zeros((n_rows, n_rows), dtype=bool)
    mask[idx, (idx + half) % n_rows] = True
    return mask


def simclr_loss(z: Tensor, temperature: float) -> Tensor:
    """
    NT-Xent over a block-ordered 2B batch: rows [0, B) are view 1, [B, 2B) view 2.

    Each anchor's positive is its other view; the denominator is all 2B - 1 non-self rows.
    """
    _check_unit_rows(z, "simclr_loss")
    n = z.shape[0]
    positives = _view_partner_mask(n)
    sims = dc.scale(dc.matmul(z, z, transpose_b=True), 1.0 / temperature)
    return _mean_log_ratio(sims, positives, ~np.eye(n, dtype=bool))


def supcon_loss(z: Tensor, targets, temperature: float) -> Tensor:
    """
    Supervised contrastive loss (positives averaged outside the log).

    Args:
        z: 2B x d block-ordered unit-norm embeddings
        targets: labels for the 2B rows, or for the B samples (repeated for both views)
        temperature: tau > 0
    """
    _check_unit_rows(z, "supcon_loss")
    n = z.shape[0]
    if n % 2:
        raise ContractViolation(f"two-view batch needs an even row count, got {n}")
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if targets.size == n // 2:
        targets = np.concatenate([targets, targets])
    if targets.size != n:
        raise ContractViolation(f"{targets.size} targets for {n} rows")
    not_self = ~np.eye(n, dtype=bool)
    positives = (targets[:, None] == targets[None, :]) & not_self
    sims = dc.scale(dc.matmul(z, z, transpose_b=True), 1.0 / temperature)
    return _mean_log_ratio(sims, positives, not_self)


def base_loss(kind: str, z: Tensor, temperature: float, targets=None) -> Tensor:
    if kind == "simclr":
        return simclr_loss(z, temperature)
    if kind == "supcon":
        if targets is None:
            raise ContractViolation("supcon needs target labels")
        return supcon_loss(z, targets, temperature)
    raise ContractViolation(f"unknown base loss {kind!r}")


def total_loss(base: Tensor, cf: Tensor, lambda_fair: float) -> Tensor:
    """
    L = L_base + lambda * L_CF.

    With lambda == 0 the base tensor itself is returned, so the fairness branch
    contributes nothing to the backward graph.
    """
    if lambda_fair < 0:
        raise ContractViolation(f"lambda_fair must be >= 0, got {lambda_fair}")
    if lambda_fair == 0:
        return base
    return dc.add(base, dc.scale(cf, lambda_fair))
