"""
Encoder and projection heads as small MLPs, plus the parameter checkpoint format.

Layout: encoder f (input_dim -> hidden... -> encoder_out_dim), contrastive head g and
cluster head h (both encoder_out_dim -> head_hidden -> embed_dim). Both heads read the
same encoder output. Hidden layers use relu, output layers are linear.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field, PositiveInt

from . import diffcore as dc
from .diffcore import Tensor
from .exceptions import ContractViolation, DataValidationError

logger = structlog.get_logger()

CHECKPOINT_FORMAT = "protofair-checkpoint"
CHECKPOINT_VERSION = 1

# hidden layer widths, shared by the encoder and the experiment config
LayerWidths = List[PositiveInt]


class EncoderConfig(BaseModel):
    """Widths of the encoder and both heads."""
    input_dim: int = Field(16, ge=1)
    encoder_hidden: LayerWidths = Field(default_factory=lambda: [64])
    encoder_out_dim: int = Field(32, ge=1)
    head_hidden: int = Field(32, ge=1)
    embed_dim: int = Field(16, ge=1)


@dataclass
class Layer:
    """Affine map x @ weight + bias."""
    weight: Tensor
    bias: Tensor


@dataclass
class MlpParams:
    """Per-layer weights and bias rows. relu on hidden layers, identity on the last."""
    layers: List[Layer]

    @property
    def widths(self) -> List[int]:
        if not self.layers:
            return []
        return [self.layers[0].weight.shape[0]] + [layer.weight.shape[1] for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    def parameters(self) -> Iterator[Tensor]:
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def validate(self) -> None:
        for i, layer in enumerate(self.layers):
            if layer.bias.shape != (1, layer.weight.shape[1]):
                raise ContractViolation(f"layer {i}: bias {layer.bias.shape} does not match weight {layer.weight.shape}")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ContractViolation(f"layer {i}: input width {layer.weight.shape[0]} does not chain")
            if not (np.all(np.isfinite(layer.weight.values)) and np.all(np.isfinite(layer.bias.values))):
                raise ContractViolation(f"layer {i}: non-finite parameters")


@dataclass
class ProtoFairNetwork:
    """Encoder theta, contrastive head phi, cluster head psi."""
    encoder: MlpParams
    contrastive_head: MlpParams
    cluster_head: MlpParams
    config: EncoderConfig = field(default_factory=EncoderConfig)

    def modules(self) -> Dict[str, MlpParams]:
        return {
            "encoder": self.encoder,
            "contrastive_head": self.contrastive_head,
            "cluster_head": self.cluster_head,
        }

    def parameters(self) -> List[Tensor]:
        return [p for module in self.modules().values() for p in module.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# ─────────────────────────────────────────────────────────────────────────────
# Initialization
# ─────────────────────────────────────────────────────────────────────────────

def init_mlp(widths: List[int], rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """
    Glorot-uniform weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases.

    Args:
        widths: layer widths including input and output
        rng: generator for the weight draws
        dtype: parameter precision
    """
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ContractViolation(f"invalid MLP widths {widths}")
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)
        layers.append(Layer(
            weight=Tensor(weight, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros((1, fan_out)), requires_grad=True, dtype=dtype),
        ))
    return MlpParams(layers=layers)


def init_network(config: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> ProtoFairNetwork:
    """Build encoder and both heads from one init stream, in a fixed order."""
    encoder_widths = [config.input_dim, *config.encoder_hidden, config.encoder_out_dim]
    head_widths = [config.encoder_out_dim, config.head_hidden, config.embed_dim]
    network = ProtoFairNetwork(
        encoder=init_mlp(encoder_widths, rng, dtype),
        contrastive_head=init_mlp(head_widths, rng, dtype),
        cluster_head=init_mlp(head_widths, rng, dtype),
        config=config,
    )
    logger.debug(
        "network_initialized",
        encoder=encoder_widths,
        heads=head_widths,
        parameters=sum(p.values.size for p in network.parameters()),
    )
    return network


# ─────────────────────────────────────────────────────────────────────────────
# Forward passes
# ─────────────────────────────────────────────────────────────────────────────

def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    if x.shape[1] != params.input_dim:
        raise ContractViolation(f"input width {x.shape[1]} != expected {params.input_dim}")
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = dc.add_row(dc.matmul(h, layer.weight), layer.bias)
        if i < last:
            h = dc.relu(h)
    return h


def encode(params: MlpParams, x: Tensor) -> Tensor:
    """Encoder representation f(x), shape n x encoder_out_dim."""
    if not np.all(np.isfinite(x.values)):
        raise ContractViolation("encoder input contains non-finite values")
    return mlp_forward(params, x)


def project_contrastive(params: MlpParams, h: Tensor) -> Tensor:
    """Unit-norm contrastive embedding z = g(h) / |g(h)|."""
    return dc.l2_normalize_rows(mlp_forward(params, h))


def project_cluster(params: MlpParams, h: Tensor) -> Tensor:
    """
    Unit-norm cluster embedding h_bar = h_psi(h) / |h_psi(h)|.

    Callers detach this before deriving cluster assignments, so the fairness
    loss never sends gradient into psi.
    """
    return dc.l2_normalize_rows(mlp_forward(params, h))


def embed_frozen(network: ProtoFairNetwork, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Encoder output for evaluation; the returned array has no graph linkage."""
    dtype = network.encoder.layers[0].weight.dtype
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        xb = Tensor(x[start:start + batch_size], dtype=dtype)
        chunks.append(np.array(encode(network.encoder, xb).values, copy=True))
    if not chunks:
        return np.zeros((0, network.config.encoder_out_dim), dtype=dtype)
    return np.vstack(chunks)


def cluster_embeddings_frozen(network: ProtoFairNetwork, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Detached h_bar for the whole input, used for K-Means (re)initialization."""
    dtype = network.encoder.layers[0].weight.dtype
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        xb = Tensor(x[start:start + batch_size], dtype=dtype)
        h = dc.detach(encode(network.encoder, xb))
        chunks.append(np.array(project_cluster(network.cluster_head, h).values, copy=True))
    return np.vstack(chunks)


# ─────────────────────────────────────────────────────────────────────────────
# Checkpoint format
# ─────────────────────────────────────────────────────────────────────────────
#
# JSON object:
#   {"format": "protofair-checkpoint", "version": 1, "dtype": "float64",
#    "encoder_config": {...EncoderConfig...},
#    "modules": {"encoder": [{"weight": {"shape": [r, c], "values": [...]},
#                             "bias":   {"shape": [1, c], "values": [...]}}, ...],
#                "contrastive_head": [...], "cluster_head": [...]},
#    "prototypes": null | {"shape": [K, d], "values": [...], "momentum": m,
#                          "reinit_period": R, "last_init_epoch": e},
#    "metadata": {...free-form run info...}}
# Matrices are row-major flat lists; floats are written with shortest round-trip repr.

class MatrixBlob(BaseModel):
    shape: Tuple[int, int]
    values: List[float]

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MatrixBlob":
        return cls(shape=(int(arr.shape[0]), int(arr.shape[1])), values=[float(v) for v in arr.ravel()])

    def to_array(self, dtype=np.float64) -> np.ndarray:
        rows, cols = self.shape
        if len(self.values) != rows * cols:
            raise DataValidationError(f"matrix blob has {len(self.values)} values for shape {self.shape}")
        return np.asarray(self.values, dtype=dtype).reshape(rows, cols)


class LayerBlob(BaseModel):
    weight: MatrixBlob
    bias: MatrixBlob


class PrototypeBlob(MatrixBlob):
    momentum: float
    reinit_period: int
    last_init_epoch: int


class Checkpoint(BaseModel):
    format: str = CHECKPOINT_FORMAT
    version: int = CHECKPOINT_VERSION
    dtype: str = "float64"
    encoder_config: EncoderConfig
    modules: Dict[str, List[LayerBlob]]
    prototypes: Optional[PrototypeBlob] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)


def to_checkpoint(network: ProtoFairNetwork, prototypes=None, metadata: Optional[dict] = None) -> Checkpoint:
    """Snapshot parameters (and optionally a PrototypeBank) into a Checkpoint."""
    modules = {
        name: [
            LayerBlob(weight=MatrixBlob.from_array(layer.weight.values), bias=MatrixBlob.from_array(layer.bias.values))
            for layer in params.layers
        ]
        for name, params in network.modules().items()
    }
    proto_blob = None
    if prototypes is not None and prototypes.initialized:
        base = MatrixBlob.from_array(prototypes.protos)
        proto_blob = PrototypeBlob(
            shape=base.shape,
            values=base.values,
            momentum=prototypes.momentum,
            reinit_period=prototypes.reinit_period,
            last_init_epoch=prototypes.last_init_epoch,
        )
    return Checkpoint(
        dtype=str(network.encoder.layers[0].weight.dtype),
        encoder_config=network.config,
        modules=modules,
        prototypes=proto_blob,
        metadata=metadata or {},
    )


def save_checkpoint(path: Path, network: ProtoFairNetwork, prototypes=None, metadata: Optional[dict] = None) -> None:
    checkpoint = to_checkpoint(network, prototypes, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.model_dump_json(), encoding="utf-8")
    logger.info("checkpoint_saved", path=str(path))


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and validate a checkpoint file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        checkpoint = Checkpoint.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValueError) as e:
        raise DataValidationError(f"unreadable checkpoint {path}: {e}") from e
    if checkpoint.format != CHECKPOINT_FORMAT or checkpoint.version != CHECKPOINT_VERSION:
        raise DataValidationError(
            f"unsupported checkpoint {checkpoint.format!r} v{checkpoint.version}"
        )
    return checkpoint


def network_from_checkpoint(checkpoint: Checkpoint) -> ProtoFairNetwork:
    dtype = np.dtype(checkpoint.dtype)
    built: Dict[str, MlpParams] = {}
    for name in ("encoder", "contrastive_head", "cluster_head"):
        if name not in checkpoint.modules:
            raise DataValidationError(f"checkpoint is missing module {name!r}")
        layers = [
            Layer(
                weight=Tensor(blob.weight.to_array(dtype), requires_grad=True, dtype=dtype),
                bias=Tensor(blob.bias.to_array(dtype), requires_grad=True, dtype=dtype),
            )
            for blob in checkpoint.modules[name]
        ]
        params = MlpParams(layers=layers)
        params.validate()
        built[name] = params
    return ProtoFairNetwork(config=checkpoint.encoder_config, **built)
