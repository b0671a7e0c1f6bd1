"""
Utility functions and helpers.
"""

import logging
import sys
from dataclasses import dataclass

import numpy as np
import structlog

logger = structlog.get_logger()

# spawn-key slots of the per-run SeedSequence; fixed so adding a stream never shifts another
_STREAM_SLOTS = {"data_order": 0, "augment": 1, "init": 2, "kmeans": 3, "probe": 4}


def configure_logging(level: str = "INFO", log_format: str = "console") -> None:
    """
    Route structlog through stdlib logging to stderr.

    stdout stays free for the CLI summary table.
    """
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.INFO),
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer() if log_format == "json" else structlog.dev.ConsoleRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


@dataclass
class RunStreams:
    """Independent generators for each source of randomness in one training run."""
    seed: int
    data_order: np.random.Generator
    augment: np.random.Generator
    init: np.random.Generator
    probe: np.random.Generator

    def kmeans_seed(self, epoch: int) -> int:
        return kmeans_seed(self.seed, epoch)


def _stream(seed: int, slot: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(slot, *extra))


def seed_streams(seed: int) -> RunStreams:
    """
    Per-purpose streams derived from one run seed.

    Consuming one stream never changes the draws of another, so switching the
    fairness branch on or off leaves data order, augmentation and init untouched.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return RunStreams(
        seed=seed,
        data_order=np.random.default_rng(_stream(seed, _STREAM_SLOTS["data_order"])),
        augment=np.random.default_rng(_stream(seed, _STREAM_SLOTS["augment"])),
        init=np.random.default_rng(_stream(seed, _STREAM_SLOTS["init"])),
        probe=np.random.default_rng(_stream(seed, _STREAM_SLOTS["probe"])),
    )


def kmeans_seed(seed: int, epoch: int) -> int:
    """K-Means seeding seed for the (re)initialization at `epoch` of run `seed`."""
    state = _stream(seed, _STREAM_SLOTS["kmeans"], epoch).generate_state(1, dtype=np.uint32)
    return int(state[0])


def format_float(value: float, decimals: int = 6) -> str:
    """Fixed-point rendering used for every float in result files."""
    text = f"{value:.{decimals}f}"
    # avoid "-0.000000"
    if text.lstrip("-").strip("0.") == "":
        text = text.lstrip("-")
    return text
