"""
Two-phase training loop.

Warmup epochs optimize the base contrastive loss alone. At the end of warmup the
prototype bank is seeded by spherical K-Means over the whole training set; from then
on every batch adds lambda * L_CF, prototypes follow the batch means by EMA and are
re-seeded every R epochs. After the last epoch the encoder is frozen and scored with
a linear probe.

Per batch, in order: augment -> encode -> z and h_bar -> (fair phase) assign, EMA
update, L_CF against the queue snapshot, enqueue -> total loss -> backward -> SGD.
"""

import math
import time
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import diffcore as dc
from . import metrics
from .diffcore import Tensor
from .evaluation import ProbeResult, linear_probe_protocol
from .exceptions import ContractViolation
from .feature_queue import FeatureQueue
from .losses import BatchAnnotations, base_loss, protofair_terms, total_loss
from .models import (
    ProtoFairNetwork,
    cluster_embeddings_frozen,
    embed_frozen,
    encode,
    init_network,
    project_cluster,
    project_contrastive,
)
from .prototypes import PrototypeBank, cluster_diagnostics
from .synth_data import AugmentSpec, Split, SplitDataset, augment
from .utils import RunStreams, seed_streams

if TYPE_CHECKING:
    from .config import ExperimentConfig

logger = structlog.get_logger()

PHASE_WARMUP = "warmup"
PHASE_FAIR = "fair"


class TrainSchedule(BaseModel):
    """Everything one training run needs beyond the data and the network shape."""
    model_config = ConfigDict(frozen=True)

    warmup_epochs: int = Field(10, ge=0)
    total_epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=2)
    reinit_period: int = Field(5, ge=1)
    base_loss: Literal["simclr", "supcon"] = "simclr"
    lambda_fair: float = Field(0.3, ge=0)
    temperature: float = Field(0.1, gt=0)
    seed: int = Field(0, ge=0)
    num_clusters: int = Field(10, ge=2)
    prototype_momentum: float = Field(0.99, ge=0, lt=1)
    kmeans_max_iters: int = Field(100, ge=1)
    queue_batches: int = Field(8, ge=1)
    use_queue: bool = True
    base_lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)

    @model_validator(mode="after")
    def check_warmup(self) -> "TrainSchedule":
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})")
        return self


# ─────────────────────────────────────────────────────────────────────────────
# Optimizer
# ─────────────────────────────────────────────────────────────────────────────

def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs))."""
    if total_epochs < 1:
        raise ContractViolation(f"total_epochs must be >= 1, got {total_epochs}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    """SGD with heavy-ball momentum and L2 weight decay folded into the velocity."""
    velocity: List[np.ndarray]
    total_epochs: int
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 0

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor], total_epochs: int, **hyper) -> "OptimizerState":
        return cls(velocity=[np.zeros_like(p.values) for p in params], total_epochs=total_epochs, **hyper)

    def lr(self, epoch: int) -> float:
        return cosine_lr(self.base_lr, epoch, self.total_epochs)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState, epoch: int) -> float:
    """
    v <- momentum * v + grad + wd * param;  param <- param - lr(epoch) * v.

    Parameters whose grad is None are left alone, weight decay included.

    Returns:
        learning rate used
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ContractViolation(
            f"{len(params)} parameters, {len(grads)} grads, {len(state.velocity)} velocity buffers"
        )
    lr = state.lr(epoch)
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.shape or state.velocity[i].shape != param.shape:
            raise ContractViolation(f"parameter {i}: grad {grad.shape} / velocity {state.velocity[i].shape} vs {param.shape}")
        v = state.momentum * state.velocity[i] + grad + state.weight_decay * param.values
        state.velocity[i] = v.astype(param.dtype, copy=False)
        param.values = (param.values - lr * state.velocity[i]).astype(param.dtype, copy=False)
    state.steps += 1
    return lr


# ─────────────────────────────────────────────────────────────────────────────
# Run records
# ─────────────────────────────────────────────────────────────────────────────

@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    lr: float
    batches: int
    base_loss: float
    fair_loss: float
    within_loss: float
    cross_loss: float
    total_loss: float
    within_anchors: float = 0.0
    cross_anchors: float = 0.0
    queue_depth: int = 0
    reinitialized: bool = False
    clusters: Optional[Dict] = None

    def losses(self) -> Dict[str, float]:
        return {
            "base": self.base_loss,
            "fair": self.fair_loss,
            "within": self.within_loss,
            "cross": self.cross_loss,
            "total": self.total_loss,
        }

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RunResult:
    seed: int
    variant: str
    schedule: TrainSchedule
    network: ProtoFairNetwork
    bank: PrototypeBank
    epochs: List[EpochMetrics]
    probe: ProbeResult
    test_embeddings: np.ndarray
    metadata: Dict = field(default_factory=dict)


# ─────────────────────────────────────────────────────────────────────────────
# Trainer
# ─────────────────────────────────────────────────────────────────────────────

class Trainer:
    """
    Mutable training state for one (seed, variant) run.

    Args:
        schedule: epochs, batch size, loss and optimizer settings
        network: initialized encoder and heads
        train: training split
        streams: per-purpose generators for this run
        augment_spec: view augmentation
        variant: label used for logs and metrics
        regularize: run the prototype / queue / L_CF branch after warmup. With
            lambda = 0 the branch runs but never reaches the parameters.
    """

    def __init__(
        self,
        schedule: TrainSchedule,
        network: ProtoFairNetwork,
        train: Split,
        streams: RunStreams,
        augment_spec: Optional[AugmentSpec] = None,
        variant: str = "protofair",
        regularize: bool = True,
    ):
        if len(train) < 2:
            raise ContractViolation(f"training split needs at least 2 samples, got {len(train)}")
        self.schedule = schedule
        self.network = network
        self.train = train
        self.streams = streams
        self.augment_spec = augment_spec or AugmentSpec()
        self.variant = variant
        self.regularize = regularize
        self.dtype = network.encoder.layers[0].weight.dtype
        self.logger = logger.bind(component="trainer", variant=variant, seed=schedule.seed)

        self.bank = PrototypeBank(
            schedule.num_clusters,
            momentum=schedule.prototype_momentum,
            reinit_period=schedule.reinit_period,
            max_iters=schedule.kmeans_max_iters,
        )
        self.queue: Optional[FeatureQueue] = None
        if schedule.use_queue:
            # two views per sample, so a batch occupies 2B queue rows
            self.queue = FeatureQueue(schedule.queue_batches, rows_per_batch=2 * schedule.batch_size)
        self.optimizer = OptimizerState.for_parameters(
            network.parameters(),
            total_epochs=schedule.total_epochs,
            base_lr=schedule.base_lr,
            momentum=schedule.momentum,
            weight_decay=schedule.weight_decay,
        )
        self.history: List[EpochMetrics] = []

    # Prototype lifecycle

    def fairness_active(self, epoch: int) -> bool:
        return self.regularize and epoch >= self.schedule.warmup_epochs and self.bank.initialized

    def needs_kmeans(self, epoch: int) -> bool:
        if not self.regularize or epoch < self.schedule.warmup_epochs:
            return False
        if not self.bank.initialized:
            return True
        return self.bank.reinit_due(epoch)

    def reinitialize_prototypes(self, epoch: int) -> Dict:
        """K-Means over the detached h_bar of the full (unaugmented) training set."""
        features = cluster_embeddings_frozen(self.network, self.train.x)
        result = self.bank.initialize(features, seed=self.streams.kmeans_seed(epoch), epoch=epoch)
        diagnostics = cluster_diagnostics(result.labels, self.train.s, self.bank.num_clusters)
        metrics.record_kmeans_init(self.variant, diagnostics.mixed_clusters)
        self.logger.info(
            "clusters_diagnosed",
            epoch=epoch,
            sizes=diagnostics.sizes,
            group1_fraction=diagnostics.group1_fraction,
            mixed_clusters=diagnostics.mixed_clusters,
        )
        return asdict(diagnostics)

    # Training

    def batches(self) -> List[np.ndarray]:
        """Seeded permutation split into batches; a final batch of one sample is dropped."""
        order = self.streams.data_order.permutation(len(self.train))
        size = self.schedule.batch_size
        chunks = [order[i:i + size] for i in range(0, len(order), size)]
        return [chunk for chunk in chunks if len(chunk) >= 2]

    def train_step(self, index: np.ndarray, epoch: int, active: bool) -> Dict[str, float]:
        xb, yb, sb = self.train.x[index], self.train.y[index], self.train.s[index]
        view1, view2 = augment(xb, self.streams.augment, self.augment_spec)
        x = Tensor(np.vstack([view1, view2]), dtype=self.dtype)

        h = encode(self.network.encoder, x)
        z = project_contrastive(self.network.contrastive_head, h)
        base = base_loss(self.schedule.base_loss, z, self.schedule.temperature, targets=yb)
        step = {"base": base.item(), "fair": 0.0, "within": 0.0, "cross": 0.0, "within_anchors": 0, "cross_anchors": 0}

        if active:
            # h_bar only ever leaves this block as plain values
            h_bar = project_cluster(self.network.cluster_head, dc.detach(h)).values
            assignments = self.bank.assign(h_bar)
            self.bank.ema_update(h_bar, assignments)
            metrics.record_ema_update(self.variant)

            sensitive = np.concatenate([sb, sb])
            annotations = BatchAnnotations(sensitive=sensitive, cluster=assignments)
            snapshot = self.queue.snapshot() if self.queue is not None else None
            terms = protofair_terms(z, annotations, snapshot, self.schedule.temperature)
            loss = total_loss(base, terms.total, self.schedule.lambda_fair)
            if self.queue is not None:
                self.queue.enqueue_batch(z.values, assignments, sensitive)
            step.update(
                fair=terms.total.item(),
                within=terms.within.item(),
                cross=terms.cross.item(),
                within_anchors=terms.within_anchors,
                cross_anchors=terms.cross_anchors,
            )
        else:
            loss = base

        self.network.zero_grad()
        dc.backward(loss)
        params = self.network.parameters()
        sgd_step(params, [p.grad for p in params], self.optimizer, epoch)
        step["total"] = loss.item()
        return step

    def train_epoch(self, epoch: int) -> EpochMetrics:
        started = time.perf_counter()
        reinitialized = False
        clusters = None
        if self.needs_kmeans(epoch):
            clusters = self.reinitialize_prototypes(epoch)
            reinitialized = True

        active = self.fairness_active(epoch)
        phase = PHASE_FAIR if active else PHASE_WARMUP
        totals: Dict[str, float] = {}
        batches = self.batches()
        for index in batches:
            step = self.train_step(index, epoch, active)
            for key, value in step.items():
                totals[key] = totals.get(key, 0.0) + value
            metrics.record_batch(self.variant, phase)

        n = max(len(batches), 1)
        record = EpochMetrics(
            epoch=epoch,
            phase=phase,
            lr=self.optimizer.lr(epoch),
            batches=len(batches),
            base_loss=totals.get("base", 0.0) / n,
            fair_loss=totals.get("fair", 0.0) / n,
            within_loss=totals.get("within", 0.0) / n,
            cross_loss=totals.get("cross", 0.0) / n,
            total_loss=totals.get("total", 0.0) / n,
            within_anchors=totals.get("within_anchors", 0.0) / n,
            cross_anchors=totals.get("cross_anchors", 0.0) / n,
            queue_depth=len(self.queue) if self.queue is not None else 0,
            reinitialized=reinitialized,
            clusters=clusters,
        )
        self.history.append(record)

        duration = time.perf_counter() - started
        metrics.record_epoch(self.variant, record.lr, record.losses(), duration)
        metrics.set_queue_depth(self.variant, record.queue_depth)
        self.logger.info(
            "epoch_completed",
            epoch=epoch,
            phase=phase,
            lr=round(record.lr, 6),
            base_loss=round(record.base_loss, 6),
            fair_loss=round(record.fair_loss, 6),
            within_anchors=round(record.within_anchors, 2),
            cross_anchors=round(record.cross_anchors, 2),
            queue_depth=record.queue_depth,
            duration_s=round(duration, 3),
        )
        return record

    def fit(self) -> List[EpochMetrics]:
        for epoch in range(self.schedule.total_epochs):
            self.train_epoch(epoch)
        return self.history


# ─────────────────────────────────────────────────────────────────────────────
# Full run
# ─────────────────────────────────────────────────────────────────────────────

def run(
    config: "ExperimentConfig",
    seed: int,
    variant: str,
    dataset: SplitDataset,
) -> RunResult:
    """
    Train one variant for one seed, then freeze the encoder and evaluate.

    Both variants draw data order, augmentation, init and probe from the same
    seeded streams; only lambda differs.
    """
    schedule = config.for_variant(variant, seed)
    streams = seed_streams(seed)
    dtype = np.dtype(config.dtype)
    network = init_network(config.encoder_config(input_dim=dataset.train.input_dim), streams.init, dtype=dtype)

    trainer = Trainer(
        schedule,
        network,
        dataset.train,
        streams,
        augment_spec=config.augment_spec(),
        variant=variant,
    )
    trainer.logger.info(
        "run_started",
        epochs=schedule.total_epochs,
        warmup=schedule.warmup_epochs,
        lambda_fair=schedule.lambda_fair,
        base_loss=schedule.base_loss,
    )
    epochs = trainer.fit()

    train_embeddings = embed_frozen(network, dataset.train.x)
    test_embeddings = embed_frozen(network, dataset.test.x)
    probe_seed = int(streams.probe.integers(2**31 - 1))
    probe = linear_probe_protocol(
        train_embeddings,
        dataset.train.y,
        test_embeddings,
        dataset.test.y,
        dataset.test.s,
        epochs=config.probe_epochs,
        lr=config.probe_lr,
        seed=probe_seed,
        log=trainer.logger,
    )
    metrics.record_probe(variant, seed, probe.accuracy, probe.eo)

    return RunResult(
        seed=seed,
        variant=variant,
        schedule=schedule,
        network=network,
        bank=trainer.bank,
        epochs=epochs,
        probe=probe,
        test_embeddings=test_embeddings,
        metadata={
            "seed": seed,
            "variant": variant,
            "schedule": schedule.model_dump(),
            "probe": probe.summary(),
        },
    )
