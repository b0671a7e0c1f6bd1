"""
Momentum-updated cluster prototypes.

Lifecycle: spherical K-Means over the detached cluster embeddings of the whole
training set (after warmup), hard nearest-prototype assignment every iteration,
EMA tracking of the assigned means, and wholesale K-Means re-initialization every
R epochs.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import structlog

from .exceptions import ConfigurationError, ContractViolation, PrototypeLifecycleError

logger = structlog.get_logger()

UNIT_NORM_TOL = 1e-10
DEFAULT_MAX_ITERS = 100
_EPS = 1e-12


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    tol = 1e-5 if x.dtype == np.float32 else 1e-8
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ContractViolation(f"{what}: row {int(bad[0])} has norm {norms[bad[0]]:.12f}, expected unit norm")


@dataclass
class KMeansResult:
    """Outcome of one spherical K-Means run."""
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: List[float]
    iterations: int
    converged: bool
    reseeded: int = 0


def kmeanspp_seed(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    k-means++ seeding under cosine distance 1 - x.c.

    Points already coinciding with a chosen centroid have zero weight; when every
    remaining weight is zero the next seed is drawn uniformly from unchosen points.
    """
    n = features.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.maximum(1.0 - features @ features[chosen[0]], 0.0)
    for _ in range(1, k):
        weights = closest ** 2
        weights[chosen] = 0.0
        total = weights.sum()
        if total > _EPS:
            idx = int(rng.choice(n, p=weights / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, np.maximum(1.0 - features @ features[idx], 0.0))
    return features[chosen].copy()


def spherical_kmeans(
    features: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> KMeansResult:
    """
    Spherical K-Means: maximize sum_i max_k x_i.c_k with unit-norm centroids.

    Alternates assignment (max cosine, ties to the lowest index) and centroid update
    (normalized mean) until assignments stop changing or max_iters is reached. A
    cluster left empty is reseeded at the point with the lowest max-cosine to the
    other centroids.

    Args:
        features: n x d unit-norm rows
        k: number of clusters
        rng: seeding stream
        max_iters: iteration budget

    Returns:
        KMeansResult with the objective recorded after seeding and after every update
    """
    n = features.shape[0]
    if n < k:
        raise ConfigurationError(f"K-Means needs at least K={k} points, got {n}")
    if k < 1:
        raise ConfigurationError(f"K must be positive, got {k}")
    _check_unit_rows(features, "kmeans features")
    features = np.asarray(features, dtype=np.float64)

    centroids = kmeanspp_seed(features, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history = [float((features @ centroids.T).max(axis=1).sum())]
    converged = False
    reseeded = 0
    iterations = 0

    for iterations in range(1, max_iters + 1):
        sims = features @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            iterations -= 1
            break
        labels = new_labels

        empty = []
        for c in range(k):
            members = features[labels == c]
            mean_vec = members.sum(axis=0) if len(members) else None
            if mean_vec is None or np.linalg.norm(mean_vec) < _EPS:
                empty.append(c)
                continue
            centroids[c] = mean_vec / np.linalg.norm(mean_vec)

        for c in empty:
            others = np.delete(np.arange(k), c)
            best = (features @ centroids[others].T).max(axis=1) if len(others) else np.zeros(n)
            centroids[c] = features[int(np.argmin(best))]
            reseeded += 1

        history.append(float((features @ centroids.T).max(axis=1).sum()))

    return KMeansResult(
        centroids=centroids,
        labels=np.argmax(features @ centroids.T, axis=1),
        objective_history=history,
        iterations=iterations,
        converged=converged,
        reseeded=reseeded,
    )


class PrototypeBank:
    """
    K unit-norm prototypes with EMA momentum and a re-initialization schedule.

    Prototypes are never learned by backprop; they are set by K-Means and tracked
    by EMA. Reads (assign) are only valid after initialize().
    """

    def __init__(
        self,
        num_clusters: int,
        momentum: float = 0.99,
        reinit_period: int = 5,
        max_iters: int = DEFAULT_MAX_ITERS,
    ):
        if num_clusters < 2:
            raise ConfigurationError(f"need K >= 2 prototypes, got {num_clusters}")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigurationError(f"prototype momentum must lie in [0, 1], got {momentum}")
        if reinit_period < 1:
            raise ConfigurationError(f"reinit_period must be >= 1 epoch, got {reinit_period}")
        self.num_clusters = num_clusters
        self.momentum = float(momentum)
        self.reinit_period = int(reinit_period)
        self.max_iters = int(max_iters)
        self.protos: Optional[np.ndarray] = None
        self.last_init_epoch: int = -1
        self.initialized = False
        self.total_inits = 0
        self.logger = logger.bind(component="prototype_bank")

    @property
    def dim(self) -> Optional[int]:
        return None if self.protos is None else self.protos.shape[1]

    def _require_initialized(self) -> None:
        if not self.initialized:
            raise PrototypeLifecycleError("prototype bank used before K-Means initialization")

    def _assert_unit_norm(self) -> None:
        norms = np.linalg.norm(self.protos, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise PrototypeLifecycleError(
                f"prototype unit-norm invariant broken: max deviation {np.abs(norms - 1.0).max():.3e}"
            )

    def initialize(self, features: np.ndarray, seed: int, epoch: int = 0) -> KMeansResult:
        """
        (Re)place all prototypes by spherical K-Means centroids. No matching to old ids.

        Args:
            features: n x d unit-norm detached cluster embeddings
            seed: K-Means seeding seed
            epoch: epoch index recorded as last_init_epoch
        """
        result = spherical_kmeans(features, self.num_clusters, np.random.default_rng(seed), self.max_iters)
        self.protos = _normalize_rows(result.centroids)
        self.last_init_epoch = int(epoch)
        self.initialized = True
        self.total_inits += 1
        self._assert_unit_norm()
        self.logger.info(
            "prototypes_initialized",
            epoch=epoch,
            k=self.num_clusters,
            n=features.shape[0],
            iterations=result.iterations,
            converged=result.converged,
            reseeded=result.reseeded,
            objective=round(result.objective_history[-1], 6),
        )
        return result

    def assign(self, h_bar: np.ndarray) -> np.ndarray:
        """
        Nearest prototype by cosine: argmax_k h_bar_i . c_k, ties to the lowest index.

        Returns:
            int64 cluster ids, plain data (no graph linkage)
        """
        self._require_initialized()
        h_bar = np.asarray(h_bar)
        if h_bar.ndim != 2 or h_bar.shape[1] != self.protos.shape[1]:
            raise ContractViolation(f"embeddings of shape {h_bar.shape} do not match prototypes {self.protos.shape}")
        return np.argmax(h_bar @ self.protos.T, axis=1).astype(np.int64)

    def ema_update(self, h_bar: np.ndarray, assignments: np.ndarray) -> np.ndarray:
        """
        c_k <- normalize(m c_k + (1 - m) mean(h_bar assigned to k)); empty clusters untouched.

        Returns:
            per-cluster assigned counts for this batch
        """
        self._require_initialized()
        h_bar = np.asarray(h_bar)
        assignments = np.asarray(assignments, dtype=np.int64)
        if assignments.shape != (h_bar.shape[0],):
            raise ContractViolation(f"{assignments.shape[0]} assignments for {h_bar.shape[0]} embeddings")
        if assignments.size and (assignments.min() < 0 or assignments.max() >= self.num_clusters):
            raise ContractViolation(f"cluster ids must lie in [0, {self.num_clusters})")

        counts = np.bincount(assignments, minlength=self.num_clusters)
        m = self.momentum
        for k in np.flatnonzero(counts):
            batch_mean = h_bar[assignments == k].mean(axis=0)
            updated = m * self.protos[k] + (1.0 - m) * batch_mean
            norm = np.linalg.norm(updated)
            if norm < _EPS:
                # mean exactly cancels the prototype; keep the previous direction
                continue
            self.protos[k] = updated / norm
        self._assert_unit_norm()
        return counts

    def reinit_due(self, current_epoch: int) -> bool:
        self._require_initialized()
        return current_epoch - self.last_init_epoch >= self.reinit_period

    def snapshot(self) -> np.ndarray:
        self._require_initialized()
        return self.protos.copy()


def kmeans_init(
    features: np.ndarray,
    num_clusters: int,
    seed: int,
    momentum: float = 0.99,
    reinit_period: int = 5,
    epoch: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> PrototypeBank:
    """Build an initialized PrototypeBank from spherical K-Means over `features`."""
    bank = PrototypeBank(num_clusters, momentum=momentum, reinit_period=reinit_period, max_iters=max_iters)
    bank.initialize(features, seed=seed, epoch=epoch)
    return bank


@dataclass
class ClusterDiagnostics:
    """Group composition of the current clustering."""
    sizes: List[int]
    group1_fraction: List[float]
    mixed_clusters: int
    empty_clusters: int = 0


def cluster_diagnostics(assignments: np.ndarray, sensitive: np.ndarray, num_clusters: int) -> ClusterDiagnostics:
    """
    Per-cluster size and sensitive-group share.

    Only clusters containing both groups can yield pseudo-counterfactual pairs,
    which is what mixed_clusters counts.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    sensitive = np.asarray(sensitive, dtype=np.int64)
    sizes = np.bincount(assignments, minlength=num_clusters)
    ones = np.bincount(assignments, weights=sensitive, minlength=num_clusters)
    frac = np.divide(ones, sizes, out=np.zeros(num_clusters), where=sizes > 0)
    mixed = int(np.sum((ones > 0) & (ones < sizes)))
    return ClusterDiagnostics(
        sizes=[int(s) for s in sizes],
        group1_fraction=[round(float(f), 6) for f in frac],
        mixed_clusters=mixed,
        empty_clusters=int(np.sum(sizes == 0)),
    )
