"""
Command-line entry point.

    python -m app.cli run      --config configs/default.json [--out DIR] [--seeds 0,1,2] [--variant both]
    python -m app.cli sweep    --config configs/default.json [--out DIR] [--seeds ...] [--variant ...]
    python -m app.cli gen-data --config configs/default.json [--out DIR]
    python -m app.cli eval     --checkpoint out/runs/seed-0/protofair/checkpoint.json [--config ...] [--out DIR]

Exit codes: 0 success, 1 run failure, 2 config error.

Outputs of `run` under the output directory:
    metrics.csv                                   one row per (seed, variant)
    runs/seed-<seed>/<variant>/checkpoint.json    parameters + prototypes + run metadata
    runs/seed-<seed>/<variant>/embeddings.csv     frozen test-split embeddings e0..,y,s
    runs/seed-<seed>/<variant>/epochs.json        per-epoch training log
    training.prom                                 Prometheus textfile (when enabled)
"""

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import List, Optional, Sequence

import numpy as np
import structlog

from . import metrics, trainer
from .config import ExperimentConfig, get_settings, parse_config, validate_config
from .evaluation import linear_probe_protocol
from .exceptions import ConfigError, ConfigRangeError, ProtoFairError
from .models import embed_frozen, load_checkpoint, network_from_checkpoint, save_checkpoint
from .synth_data import SplitDataset, generate, load_splits, write_splits
from .utils import configure_logging, format_float, seed_streams

logger = structlog.get_logger()

METRICS_HEADER = ("seed", "variant", "epochs", "warmup", "K", "lambda", "tau", "acc", "eo", "tpr_gap", "fpr_gap")
SWEEP_HEADER = ("group_corr",) + METRICS_HEADER

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


@dataclass
class MetricsRow:
    seed: int
    variant: str
    epochs: int
    warmup: int
    K: int
    lambda_fair: float
    tau: float
    acc: float
    eo: float
    tpr_gap: float
    fpr_gap: float

    def cells(self) -> List[str]:
        return [
            str(self.seed),
            self.variant,
            str(self.epochs),
            str(self.warmup),
            str(self.K),
            format_float(self.lambda_fair),
            format_float(self.tau),
            format_float(self.acc),
            format_float(self.eo),
            format_float(self.tpr_gap),
            format_float(self.fpr_gap),
        ]

    @classmethod
    def from_cells(cls, cells: Sequence[str]) -> "MetricsRow":
        if len(cells) != len(METRICS_HEADER):
            raise ValueError(f"metrics row needs {len(METRICS_HEADER)} fields, got {len(cells)}")
        seed, variant, epochs, warmup, k, lam, tau, acc, eo, tpr, fpr = cells
        return cls(
            seed=int(seed), variant=variant, epochs=int(epochs), warmup=int(warmup), K=int(k),
            lambda_fair=float(lam), tau=float(tau), acc=float(acc), eo=float(eo),
            tpr_gap=float(tpr), fpr_gap=float(fpr),
        )

    @classmethod
    def from_result(cls, result: "trainer.RunResult") -> "MetricsRow":
        schedule = result.schedule
        return cls(
            seed=result.seed,
            variant=result.variant,
            epochs=schedule.total_epochs,
            warmup=schedule.warmup_epochs,
            K=schedule.num_clusters,
            lambda_fair=schedule.lambda_fair,
            tau=schedule.temperature,
            acc=result.probe.accuracy,
            eo=result.probe.eo,
            tpr_gap=result.probe.tpr_gap,
            fpr_gap=result.probe.fpr_gap,
        )


# ─────────────────────────────────────────────────────────────────────────────
# Result files
# ─────────────────────────────────────────────────────────────────────────────

def emit_metrics(rows: Sequence[MetricsRow], path: Path) -> Path:
    """Write metrics.csv: fixed header, 6-decimal floats, LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.cells())
    return path


def read_metrics(path: Path) -> List[MetricsRow]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow.from_cells(cells) for cells in reader if cells]


def emit_sweep(rows: Sequence[tuple], path: Path) -> Path:
    """sweep.csv: metrics.csv columns with a leading group_corr column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for group_corr, row in rows:
            writer.writerow([format_float(group_corr)] + row.cells())
    return path


def write_embeddings(path: Path, embeddings: np.ndarray, targets: np.ndarray, sensitive: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"e{i}" for i in range(embeddings.shape[1])] + ["y", "s"])
        for e, y, s in zip(embeddings, targets, sensitive):
            writer.writerow([repr(float(v)) for v in e] + [int(y), int(s)])
    return path


def write_run_artifacts(result: "trainer.RunResult", dataset: SplitDataset, run_dir: Path) -> None:
    run_dir = Path(run_dir)
    save_checkpoint(run_dir / "checkpoint.json", result.network, result.bank, metadata=result.metadata)
    write_embeddings(run_dir / "embeddings.csv", result.test_embeddings, dataset.test.y, dataset.test.s)
    epoch_log = [record.to_dict() for record in result.epochs]
    (run_dir / "epochs.json").write_text(json.dumps(epoch_log, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_summary(rows: Sequence[MetricsRow]) -> str:
    """Fixed-width table of ACC/EO per run plus per-variant medians."""
    lines = [f"{'seed':>6}  {'variant':<10}  {'ACC':>8}  {'EO':>8}"]
    for row in rows:
        lines.append(f"{row.seed:>6}  {row.variant:<10}  {row.acc:>8.2f}  {row.eo:>8.2f}")
    for variant in sorted({row.variant for row in rows}):
        picked = [row for row in rows if row.variant == variant]
        lines.append(
            f"{'median':>6}  {variant:<10}  {median(r.acc for r in picked):>8.2f}  {median(r.eo for r in picked):>8.2f}"
        )
    return "\n".join(lines)


# ─────────────────────────────────────────────────────────────────────────────
# Orchestration
# ─────────────────────────────────────────────────────────────────────────────

def load_dataset(config: ExperimentConfig, group_corr: Optional[float] = None) -> SplitDataset:
    if config.data_dir is not None:
        return load_splits(Path(config.data_dir))
    return generate(config.dataset_spec(group_corr=group_corr))


def execute_runs(config: ExperimentConfig, out_dir: Path, dataset: SplitDataset) -> tuple:
    """
    Run every (seed, variant) pair sequentially, writing per-run artifacts.

    Returns:
        (successful metrics rows, number of failed runs)
    """
    rows: List[MetricsRow] = []
    failures = 0
    for seed in config.seeds:
        for variant in config.variants:
            log = logger.bind(component="cli", seed=seed, variant=variant)
            try:
                result = trainer.run(config, seed, variant, dataset)
                write_run_artifacts(result, dataset, out_dir / "runs" / f"seed-{seed}" / variant)
            except Exception as e:
                failures += 1
                metrics.record_run(variant, success=False)
                log.error("run_failed", error=str(e), error_type=type(e).__name__, exc_info=True)
                continue
            metrics.record_run(variant, success=True)
            rows.append(MetricsRow.from_result(result))
    return rows, failures


def _export_telemetry(out_dir: Path) -> None:
    settings = get_settings()
    if settings.export_prometheus:
        metrics.write_textfile(out_dir / settings.prometheus_textfile)


def run_experiment(config: ExperimentConfig) -> int:
    """Baseline vs ProtoFair for every seed; writes metrics.csv and per-run artifacts."""
    out_dir = Path(config.output_dir)
    log = logger.bind(component="cli")
    try:
        dataset = load_dataset(config)
    except ProtoFairError as e:
        log.error("dataset_unavailable", error=str(e))
        return EXIT_RUN_FAILURE

    rows, failures = execute_runs(config, out_dir, dataset)
    emit_metrics(rows, out_dir / "metrics.csv")
    _export_telemetry(out_dir)
    if rows:
        print(format_summary(rows))
    log.info("experiment_finished", runs=len(rows), failures=failures, output_dir=str(out_dir))
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def run_sweep(config: ExperimentConfig) -> int:
    """Repeat the experiment at every group_corr in the sweep, one subdirectory each."""
    if config.data_dir is not None:
        raise ConfigRangeError([("data_dir", "the group_corr sweep generates its own data; unset data_dir")])
    out_dir = Path(config.output_dir)
    sweep_rows = []
    failures = 0
    for group_corr in config.group_corr_sweep:
        sub_dir = out_dir / f"rho-{format_float(group_corr, 2)}"
        dataset = generate(config.dataset_spec(group_corr=group_corr))
        rows, failed = execute_runs(config, sub_dir, dataset)
        failures += failed
        emit_metrics(rows, sub_dir / "metrics.csv")
        sweep_rows.extend((group_corr, row) for row in rows)
        if rows:
            print(f"group_corr = {group_corr}")
            print(format_summary(rows))
    emit_sweep(sweep_rows, out_dir / "sweep.csv")
    _export_telemetry(out_dir)
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def generate_data(config: ExperimentConfig) -> int:
    dataset = generate(config.dataset_spec())
    paths = write_splits(dataset, Path(config.output_dir))
    logger.info("dataset_written", paths={name: str(p) for name, p in paths.items()})
    return EXIT_OK


def evaluate_checkpoint(config: ExperimentConfig, checkpoint_path: Path) -> int:
    """Probe a saved encoder on the configured dataset."""
    checkpoint = load_checkpoint(checkpoint_path)
    network = network_from_checkpoint(checkpoint)
    dataset = load_dataset(config)
    seed = int(checkpoint.metadata.get("seed", config.seeds[0]))
    variant = str(checkpoint.metadata.get("variant", "protofair"))

    streams = seed_streams(seed)
    probe = linear_probe_protocol(
        embed_frozen(network, dataset.train.x),
        dataset.train.y,
        embed_frozen(network, dataset.test.x),
        dataset.test.y,
        dataset.test.s,
        epochs=config.probe_epochs,
        lr=config.probe_lr,
        seed=int(streams.probe.integers(2**31 - 1)),
    )
    schedule = config.for_variant(variant, seed)
    row = MetricsRow(
        seed=seed, variant=variant, epochs=schedule.total_epochs, warmup=schedule.warmup_epochs,
        K=schedule.num_clusters, lambda_fair=schedule.lambda_fair, tau=schedule.temperature,
        acc=probe.accuracy, eo=probe.eo, tpr_gap=probe.tpr_gap, fpr_gap=probe.fpr_gap,
    )
    emit_metrics([row], Path(config.output_dir) / "eval_metrics.csv")
    print(format_summary([row]))
    return EXIT_OK


# ─────────────────────────────────────────────────────────────────────────────
# Argument handling
# ─────────────────────────────────────────────────────────────────────────────

def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigRangeError([("seeds", f"--seeds must be a comma-separated list of integers, got {text!r}")])
    if not seeds:
        raise ConfigRangeError([("seeds", "--seeds is empty")])
    return seeds


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Re-validate the config with command-line overrides folded in."""
    updates = {}
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "seeds", None):
        updates["seeds"] = parse_seeds(args.seeds)
    variant = getattr(args, "variant", None)
    if variant:
        updates["variants"] = ["baseline", "protofair"] if variant == "both" else [variant]
    if not updates:
        return config
    return validate_config({**config.model_dump(), **updates})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofair", description="ProtoFair fairness regularizer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", type=Path, required=config_required, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    for name, help_text in (("run", "baseline vs ProtoFair experiment"), ("sweep", "experiment at every group_corr_sweep value")):
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        p.add_argument("--seeds", help="comma-separated seeds (overrides seeds)")
        p.add_argument("--variant", choices=("baseline", "protofair", "both"), help="variants to run")

    p = sub.add_parser("gen-data", help="write the synthetic dataset as CSV")
    add_common(p)

    p = sub.add_parser("eval", help="linear-probe an existing checkpoint")
    add_common(p, config_required=False)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint.json of a finished run")
    return parser


COMMANDS = {
    "run": run_experiment,
    "sweep": run_sweep,
    "gen-data": generate_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_format)
    metrics.init_metrics(settings.app_version)

    try:
        config = parse_config(args.config) if args.config is not None else ExperimentConfig()
        config = apply_overrides(config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    try:
        if args.command == "eval":
            return evaluate_checkpoint(config, args.checkpoint)
        return COMMANDS[args.command](config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        logger.error("command_failed", command=args.command, error=str(e), exc_info=True)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
