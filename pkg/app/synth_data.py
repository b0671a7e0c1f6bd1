"""
Synthetic biased vector dataset, two-view augmentation and CSV ingestion.

Samples follow x = mu_y + beta * nu_s + eps with eps ~ N(0, sigma^2 I):
    mu_0 = (sep / sqrt 2) e_0, mu_1 = (sep / sqrt 2) e_1   (|mu_0 - mu_1| = sep)
    nu_1 = e_2, nu_0 = -e_2
Training pairs s with y at rate group_corr; validation and test splits are
balanced across all four (y, s) cells.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field

from .exceptions import ConfigurationError, CsvFormatError, DataValidationError

logger = structlog.get_logger()

TRAIN_FRACTION = 0.70
VAL_FRACTION = 0.15
SPLIT_NAMES = ("train", "val", "test")


class DatasetSpec(BaseModel):
    """Knobs of the synthetic benchmark."""
    n_samples: int = Field(4000, ge=8)
    input_dim: int = Field(16, ge=1)
    n_content_classes: Literal[2] = 2
    content_sep: float = Field(3.0, gt=0)
    bias_strength: float = Field(1.5, ge=0)
    group_corr: float = Field(0.8, ge=0.5, le=1.0)
    noise_sigma: float = Field(1.0, ge=0)
    seed: int = 0


class AugmentSpec(BaseModel):
    aug_sigma: float = Field(0.3, ge=0)
    drop_prob: float = Field(0.1, ge=0, le=1)


@dataclass
class Split:
    """Rows of one split: inputs x (n x D), target y and sensitive s, both in {0, 1}."""
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if not (self.x.shape[0] == self.y.shape[0] == self.s.shape[0]):
            raise DataValidationError(
                f"split lengths differ: {self.x.shape[0]} x, {self.y.shape[0]} y, {self.s.shape[0]} s"
            )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def cell_counts(self) -> Dict[str, int]:
        """Sample count per (y, s) cell, keyed 'y{y}_s{s}'."""
        return {
            f"y{y}_s{s}": int(np.sum((self.y == y) & (self.s == s)))
            for y in (0, 1) for s in (0, 1)
        }


@dataclass
class SplitDataset:
    train: Split
    val: Split
    test: Split

    def splits(self) -> Dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ─────────────────────────────────────────────────────────────────────────────
# Generation
# ─────────────────────────────────────────────────────────────────────────────

def split_sizes(n_samples: int) -> Tuple[int, int, int]:
    n_train = int(round(n_samples * TRAIN_FRACTION))
    n_val = int(round(n_samples * VAL_FRACTION))
    return n_train, n_val, n_samples - n_train - n_val


def _directions(spec: DatasetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Class means (2 x D) and sensitive offsets (2 x D, rows nu_0 and nu_1)."""
    d = spec.input_dim
    means = np.zeros((2, d))
    means[0, 0] = means[1, 1] = spec.content_sep / np.sqrt(2.0)
    offsets = np.zeros((2, d))
    offsets[0, 2] = -1.0
    offsets[1, 2] = 1.0
    return means, offsets


def _sample_correlated(rng: np.random.Generator, n: int, group_corr: float) -> Tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, 2, size=n)
    agree = rng.random(n) < group_corr
    s = np.where(agree, y, 1 - y)
    return y.astype(np.int64), s.astype(np.int64)


def _sample_balanced(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    cells = rng.permutation(np.arange(n) % 4)
    return (cells // 2).astype(np.int64), (cells % 2).astype(np.int64)


def _draw_inputs(rng: np.random.Generator, spec: DatasetSpec, y: np.ndarray, s: np.ndarray) -> np.ndarray:
    means, offsets = _directions(spec)
    noise = rng.normal(0.0, spec.noise_sigma, size=(y.shape[0], spec.input_dim))
    return means[y] + spec.bias_strength * offsets[s] + noise


def generate(spec: DatasetSpec) -> SplitDataset:
    """
    Draw the train/val/test splits (70/15/15) from one seeded stream.

    Raises:
        ConfigurationError: input_dim < 3 (two content directions plus one sensitive direction)
    """
    if spec.input_dim < 3:
        raise ConfigurationError(f"input_dim must be >= 3 to hold content and sensitive directions, got {spec.input_dim}")
    rng = np.random.default_rng(spec.seed)
    n_train, n_val, n_test = split_sizes(spec.n_samples)

    y, s = _sample_correlated(rng, n_train, spec.group_corr)
    train = Split(x=_draw_inputs(rng, spec, y, s), y=y, s=s)
    held_out = []
    for n in (n_val, n_test):
        y, s = _sample_balanced(rng, n)
        held_out.append(Split(x=_draw_inputs(rng, spec, y, s), y=y, s=s))

    dataset = SplitDataset(train=train, val=held_out[0], test=held_out[1])
    logger.info(
        "dataset_generated",
        seed=spec.seed,
        group_corr=spec.group_corr,
        bias_strength=spec.bias_strength,
        sizes={name: len(split) for name, split in dataset.splits().items()},
        train_cells=train.cell_counts(),
    )
    return dataset


# ─────────────────────────────────────────────────────────────────────────────
# Augmentation
# ─────────────────────────────────────────────────────────────────────────────

def augment(
    x: np.ndarray,
    rng: Union[np.random.Generator, int],
    spec: Optional[AugmentSpec] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two views of x: Gaussian jitter then independent coordinate dropout.

    Draw order per view is noise, then dropout mask; view 1 is drawn before view 2.
    """
    spec = spec or AugmentSpec()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = np.asarray(x)
    views = []
    for _ in range(2):
        view = x + rng.normal(0.0, spec.aug_sigma, size=x.shape)
        keep = rng.random(x.shape) >= spec.drop_prob
        views.append((view * keep).astype(x.dtype, copy=False))
    return views[0], views[1]


# ─────────────────────────────────────────────────────────────────────────────
# CSV format: header x0,...,x{D-1},y,s then one sample per line
# ─────────────────────────────────────────────────────────────────────────────

def _parse_header(header) -> int:
    if header is None:
        raise CsvFormatError("empty file, expected header x0,...,x{D-1},y,s", line=1)
    header = [h.strip() for h in header]
    d = len(header) - 2
    expected = [f"x{i}" for i in range(d)] + ["y", "s"]
    if d < 1 or header != expected:
        raise CsvFormatError(f"bad header {','.join(header)!r}, expected x0,...,x{{D-1}},y,s", line=1)
    return d


def _parse_binary(raw: str, name: str, line: int) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise CsvFormatError(f"{name}={raw!r} is not a number", line=line)
    if value not in (0.0, 1.0):
        raise DataValidationError(f"{name} must be 0 or 1, got {raw.strip()}", line=line)
    return int(value)


def load_csv(path: Path) -> Split:
    """
    Parse a dataset CSV, preserving row order.

    Raises:
        CsvFormatError: missing/bad header, wrong field count or unparsable number (with line number)
        DataValidationError: non-binary y or s, non-finite x (with line number)
    """
    path = Path(path)
    xs, ys, ss = [], [], []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        d = _parse_header(next(reader, None))
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 2:
                raise CsvFormatError(f"expected {d + 2} fields, got {len(row)}", line=line)
            try:
                x = [float(v) for v in row[:d]]
            except ValueError as e:
                raise CsvFormatError(f"unparsable feature value: {e}", line=line)
            if not all(np.isfinite(x)):
                raise DataValidationError("non-finite feature value", line=line)
            ys.append(_parse_binary(row[d], "y", line))
            ss.append(_parse_binary(row[d + 1], "s", line))
            xs.append(x)

    split = Split(
        x=np.asarray(xs, dtype=np.float64).reshape(len(xs), d),
        y=np.asarray(ys, dtype=np.int64),
        s=np.asarray(ss, dtype=np.int64),
    )
    logger.debug("csv_loaded", path=str(path), rows=len(split), input_dim=d)
    return split


def write_csv(path: Path, split: Split) -> None:
    """Write a split with shortest round-trip float formatting and LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(split.input_dim)] + ["y", "s"])
        for x, y, s in zip(split.x, split.y, split.s):
            writer.writerow([repr(float(v)) for v in x] + [int(y), int(s)])


def write_splits(dataset: SplitDataset, directory: Path) -> Dict[str, Path]:
    """Write train.csv, val.csv and test.csv into `directory`."""
    directory = Path(directory)
    paths = {}
    for name, split in dataset.splits().items():
        paths[name] = directory / f"{name}.csv"
        write_csv(paths[name], split)
    return paths


def load_splits(directory: Path) -> SplitDataset:
    directory = Path(directory)
    loaded = {}
    for name in SPLIT_NAMES:
        path = directory / f"{name}.csv"
        if not path.exists():
            raise DataValidationError(f"dataset directory {directory} has no {name}.csv")
        loaded[name] = load_csv(path)
    dims = {split.input_dim for split in loaded.values()}
    if len(dims) != 1:
        raise DataValidationError(f"splits disagree on input width: {sorted(dims)}")
    return SplitDataset(**loaded)
