"""
Feature Queue for Cross-Batch Pair Discovery

Holds detached (embedding, cluster id, sensitive attribute) tuples from the most
recent batches so the fairness loss can find cross-group partners beyond the
current mini-batch.
"""

from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, NamedTuple, Optional

import numpy as np
import structlog

from .diffcore import Tensor
from .exceptions import ContractViolation

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class QueueEntry:
    """One queued sample. Values only; nothing here links back to a graph."""
    z: np.ndarray
    cluster_id: int
    sensitive: int


class QueueSnapshot(NamedTuple):
    """Read-only view of the queue in insertion order."""
    z: np.ndarray
    cluster_ids: np.ndarray
    sensitive: np.ndarray

    def __len__(self) -> int:
        return self.z.shape[0]


class FeatureQueue:
    """
    FIFO store capped at `capacity` elements (batches retained x rows per batch).

    Oldest entries are evicted first as new batches arrive. Capacity is an element
    cap, so a short final batch is stored as-is.
    """

    def __init__(self, batches: int, rows_per_batch: int, dim: Optional[int] = None):
        if batches < 1 or rows_per_batch < 1:
            raise ContractViolation(
                f"queue needs batches >= 1 and rows_per_batch >= 1, got {batches}, {rows_per_batch}"
            )
        self.batches = batches
        self.rows_per_batch = rows_per_batch
        self.capacity = batches * rows_per_batch
        self.dim = dim
        self.logger = structlog.get_logger().bind(component="feature_queue")

        self.entries: Deque[QueueEntry] = deque(maxlen=self.capacity)

        # Queue statistics
        self.total_enqueued = 0
        self.total_evicted = 0
        self.total_batches = 0

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return len(self.entries) == 0

    def enqueue_batch(self, z, cluster_ids, sensitive) -> int:
        """
        Append a batch, evicting the oldest entries beyond capacity.

        Args:
            z: B x d unit-norm embeddings (Tensor or array); values are copied, never linked
            cluster_ids: B cluster assignments
            sensitive: B binary sensitive attributes

        Returns:
            Number of entries evicted by this insertion
        """
        values = z.values if isinstance(z, Tensor) else np.asarray(z)
        values = np.array(values, dtype=values.dtype, copy=True)
        cluster_ids = np.asarray(cluster_ids, dtype=np.int64).ravel()
        sensitive = np.asarray(sensitive, dtype=np.int64).ravel()

        if values.ndim != 2:
            raise ContractViolation(f"queued embeddings must be B x d, got shape {values.shape}")
        if not (values.shape[0] == cluster_ids.shape[0] == sensitive.shape[0]):
            raise ContractViolation(
                f"length mismatch: {values.shape[0]} embeddings, {cluster_ids.shape[0]} cluster ids, "
                f"{sensitive.shape[0]} sensitive labels"
            )
        if self.dim is None:
            self.dim = values.shape[1]
        elif values.shape[1] != self.dim:
            raise ContractViolation(f"queued embeddings must have width {self.dim}, got {values.shape[1]}")
        if values.shape[0]:
            norms = np.linalg.norm(values, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ContractViolation("queued embeddings must be unit-norm rows")

        overflow = max(0, len(self.entries) + values.shape[0] - self.capacity)
        for row, cid, s in zip(values, cluster_ids, sensitive):
            self.entries.append(QueueEntry(z=row, cluster_id=int(cid), sensitive=int(s)))

        self.total_enqueued += values.shape[0]
        self.total_evicted += overflow
        self.total_batches += 1

        self.logger.debug(
            "queue_batch_enqueued",
            rows=values.shape[0],
            evicted=overflow,
            queue_depth=len(self.entries),
        )
        return overflow

    def snapshot(self) -> QueueSnapshot:
        """Copy of the queue contents in insertion order. Empty queue gives empty arrays."""
        if not self.entries:
            width = self.dim or 0
            return QueueSnapshot(
                z=np.zeros((0, width)),
                cluster_ids=np.zeros(0, dtype=np.int64),
                sensitive=np.zeros(0, dtype=np.int64),
            )
        return QueueSnapshot(
            z=np.stack([entry.z for entry in self.entries]),
            cluster_ids=np.fromiter((entry.cluster_id for entry in self.entries), dtype=np.int64, count=len(self.entries)),
            sensitive=np.fromiter((entry.sensitive for entry in self.entries), dtype=np.int64, count=len(self.entries)),
        )

    def get_stats(self) -> Dict:
        """Get queue statistics"""
        return {
            "queue_depth": len(self.entries),
            "capacity": self.capacity,
            "total_enqueued": self.total_enqueued,
            "total_evicted": self.total_evicted,
            "total_batches": self.total_batches,
        }
