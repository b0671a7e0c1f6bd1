"""
Prometheus metrics for training runs.

Series live on a dedicated registry and are exported as a node-exporter textfile
into the run output directory. Nothing here feeds back into training.
"""

from pathlib import Path

import structlog
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info, write_to_textfile

logger = structlog.get_logger()

registry = CollectorRegistry(auto_describe=True)


# =============================================================================
# Counters - Cumulative metrics that only increase
# =============================================================================

batches_processed = Counter(
    'protofair_batches_total',
    'Training batches processed by variant and phase',
    ['variant', 'phase'],  # phase: warmup, fair
    registry=registry,
)

kmeans_inits = Counter(
    'protofair_kmeans_inits_total',
    'Prototype (re)initializations by spherical K-Means',
    ['variant'],
    registry=registry,
)

ema_updates = Counter(
    'protofair_prototype_ema_updates_total',
    'Momentum updates applied to the prototype bank',
    ['variant'],
    registry=registry,
)

run_outcomes = Counter(
    'protofair_runs_total',
    'Training runs by variant and outcome',
    ['variant', 'status'],  # status: success, failure
    registry=registry,
)


# =============================================================================
# Histograms - Distribution of values
# =============================================================================

epoch_duration = Histogram(
    'protofair_epoch_duration_seconds',
    'Wall time per training epoch',
    ['variant'],
    buckets=[0.05, 0.1, 0.5, 1, 2, 5, 10, 30, 60],
    registry=registry,
)


# =============================================================================
# Gauges - Values that can go up or down
# =============================================================================

queue_depth = Gauge(
    'protofair_feature_queue_depth',
    'Entries currently held by the feature queue',
    ['variant'],
    registry=registry,
)

learning_rate = Gauge(
    'protofair_learning_rate',
    'Cosine-annealed learning rate of the current epoch',
    ['variant'],
    registry=registry,
)

epoch_loss = Gauge(
    'protofair_epoch_loss',
    'Mean loss of the last completed epoch by component',
    ['variant', 'component'],  # component: base, fair, within, cross, total
    registry=registry,
)

mixed_clusters = Gauge(
    'protofair_mixed_clusters',
    'Clusters holding both sensitive groups after the last K-Means run',
    ['variant'],
    registry=registry,
)

probe_accuracy = Gauge(
    'protofair_probe_accuracy_percent',
    'Linear-probe test accuracy',
    ['variant', 'seed'],
    registry=registry,
)

probe_eo = Gauge(
    'protofair_probe_equalized_odds_percent',
    'Linear-probe equalized-odds gap',
    ['variant', 'seed'],
    registry=registry,
)


# =============================================================================
# Info - Static labels for version/config info
# =============================================================================

build_info = Info(
    'protofair_build',
    'ProtoFair harness build information',
    registry=registry,
)


# =============================================================================
# Helper functions for recording metrics
# =============================================================================

def record_batch(variant: str, phase: str):
    batches_processed.labels(variant=variant, phase=phase).inc()


def record_kmeans_init(variant: str, mixed: int):
    """Record a prototype (re)initialization and how many clusters mix both groups."""
    kmeans_inits.labels(variant=variant).inc()
    mixed_clusters.labels(variant=variant).set(mixed)


def record_ema_update(variant: str):
    ema_updates.labels(variant=variant).inc()


def record_epoch(variant: str, lr: float, losses: dict, duration_seconds: float = None):
    """
    Record per-epoch values.

    Args:
        variant: baseline or protofair
        lr: learning rate used during the epoch
        losses: component name -> mean loss
        duration_seconds: epoch wall time
    """
    learning_rate.labels(variant=variant).set(lr)
    for component, value in losses.items():
        epoch_loss.labels(variant=variant, component=component).set(value)

    if duration_seconds is not None:
        epoch_duration.labels(variant=variant).observe(duration_seconds)


def set_queue_depth(variant: str, depth: int):
    queue_depth.labels(variant=variant).set(depth)


def record_run(variant: str, success: bool):
    run_outcomes.labels(variant=variant, status='success' if success else 'failure').inc()


def record_probe(variant: str, seed: int, accuracy: float, eo: float):
    probe_accuracy.labels(variant=variant, seed=str(seed)).set(accuracy)
    probe_eo.labels(variant=variant, seed=str(seed)).set(eo)


def set_build_info(version: str):
    build_info.info({
        'version': version,
        'app_name': 'ProtoFair Harness',
    })


def write_textfile(path: Path) -> Path:
    """Write the registry in node-exporter textfile format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), registry)
    logger.debug("prometheus_textfile_written", path=str(path))
    return path


def init_metrics(version: str):
    set_build_info(version)
    logger.debug("prometheus_metrics_initialized", version=version)
