"""Command-line experiment runner.

Configuration is a flat text file of ``key = value`` lines (``#`` starts a
comment) plus ``--key value`` flags, which win over the file. ``variant`` and
``seed`` accept comma-separated lists; every (variant, seed) pair gets its own
output directory holding the resolved config and the result files.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from .continual import RunAborted, TrainConfig, Variant, run_experiment
from .errors import ConfigError, OngLabError
from .metrics import emit_results, percent, summarize
from .tasks import load_mnist_idx, make_permuted, make_rotated, make_synthetic, rotation_schedule

logger = logging.getLogger("onglab")

BENCHMARKS = ("permuted", "rotated", "synthetic")
EXIT_OK, EXIT_ERROR, EXIT_ABORTED = 0, 2, 3


def _positive_int(v):
    v = int(v)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(v):
    v = int(v)
    if v < 0:
        raise ValueError("must be a non-negative integer")
    return v


def _optional(conv):
    def parse(v):
        if v is None or str(v).strip().lower() in ("", "none", "null"):
            return None
        return conv(v)
    return parse


def _positive_float(v):
    v = float(v)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _nonneg_float(v):
    v = float(v)
    if not v >= 0:
        raise ValueError("must be non-negative")
    return v


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _choice(options):
    def parse(v):
        v = str(v).strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _variants(v):
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    out = [Variant.parse(x) for x in items if str(x).strip()]
    if not out:
        raise ValueError("at least one variant is required")
    return out


def _seeds(v):
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    out = [int(x) for x in items if str(x).strip()]
    if not out:
        raise ValueError("at least one seed is required")
    return out


def _ints(v):
    items = v if isinstance(v, (list, tuple)) else str(v).split(",")
    return tuple(_positive_int(x) for x in items if str(x).strip())


def _decay(v):
    v = float(v)
    if not 0 <= v < 1:
        raise ValueError("must lie in [0, 1)")
    return v


@dataclass
class ExperimentConfig:
    benchmark: str = "permuted"
    tasks: int = 5
    variant: list = field(default_factory=lambda: [Variant.OGD])
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    memory_per_task: int = 100
    replay_sample_size: int | None = None
    seed: list = field(default_factory=lambda: [0])
    mnist_images: str | None = None
    mnist_labels: str | None = None
    out: str = "runs"
    ekfac_damping: float = 1e-3
    ekfac_decay: float = 0.95
    ekfac_refresh: int = 100
    fisher: str = "true"
    rotation_step_degrees: float = 10.0
    train_subset: int | None = None
    identity_first: bool = False
    store_all_logits: bool = False
    hidden: tuple = (100, 100)
    synthetic_inputs: int = 10
    synthetic_classes: int = 3
    parallel: bool = False

    def train_config(self, variant: Variant, seed: int) -> TrainConfig:
        return TrainConfig(
            variant=variant,
            learning_rate=self.lr,
            epochs_per_task=self.epochs,
            batch_size=self.batch_size,
            memory_per_task=self.memory_per_task,
            replay_sample_size=self.replay_sample_size,
            seed=seed,
            hidden=self.hidden,
            ekfac_decay=self.ekfac_decay,
            ekfac_damping=self.ekfac_damping,
            ekfac_refresh=self.ekfac_refresh,
            fisher_mode=self.fisher,
            store_all_logits=self.store_all_logits,
        )

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "variant":
                v = ",".join(x.value for x in v)
            elif isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


PARSERS = {
    "benchmark": _choice(BENCHMARKS),
    "tasks": _positive_int,
    "variant": _variants,
    "epochs": _positive_int,
    "lr": _positive_float,
    "batch_size": _positive_int,
    "memory_per_task": _nonneg_int,
    "replay_sample_size": _optional(_nonneg_int),
    "seed": _seeds,
    "mnist_images": _optional(str),
    "mnist_labels": _optional(str),
    "out": str,
    "ekfac_damping": _nonneg_float,
    "ekfac_decay": _decay,
    "ekfac_refresh": _positive_int,
    "fisher": _choice(("true", "empirical")),
    "rotation_step_degrees": float,
    "train_subset": _optional(_positive_int),
    "identity_first": _bool,
    "store_all_logits": _bool,
    "hidden": _ints,
    "synthetic_inputs": _positive_int,
    "synthetic_classes": _positive_int,
    "parallel": _bool,
}


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="onglab",
        description="Run continual-learning experiments (SGD, OGD, OGD+, ONG, ONG+).",
    )
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    for key in PARSERS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def resolve_config(values: dict) -> ExperimentConfig:
    """Apply parsed ``key -> raw value`` pairs over the defaults and validate."""
    cfg = ExperimentConfig()
    if "out" not in values and os.environ.get("ONGLAB_OUT"):
        values = {**values, "out": os.environ["ONGLAB_OUT"]}
    for key, raw in values.items():
        if key not in PARSERS:
            raise ConfigError(key, "unknown configuration key")
        try:
            setattr(cfg, key, PARSERS[key](raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"invalid value {raw!r}: {exc}") from exc
    if cfg.benchmark in ("permuted", "rotated"):
        for key in ("mnist_images", "mnist_labels"):
            path = getattr(cfg, key)
            if path is None:
                raise ConfigError(key, f"required for the {cfg.benchmark} benchmark")
            if not Path(path).is_file():
                raise ConfigError(key, f"file not found: {path}")
    try:
        for v in cfg.variant:
            cfg.train_config(v, cfg.seed[0])
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from exc
    return cfg


def parse_config(argv=None) -> ExperimentConfig:
    return config_from_args(build_arg_parser().parse_args(argv))


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in PARSERS:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    return resolve_config(values)


def build_tasks(cfg: ExperimentConfig, seed: int, base=None):
    if cfg.benchmark == "synthetic":
        return make_synthetic(cfg.tasks, (cfg.synthetic_inputs, cfg.synthetic_classes), seed=seed,
                              train_subset=cfg.train_subset)
    if base is None:
        base = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
    if cfg.benchmark == "permuted":
        return make_permuted(base, cfg.tasks, master_seed=seed, identity_first=cfg.identity_first,
                             train_subset=cfg.train_subset)
    return make_rotated(base, rotation_schedule(cfg.tasks, cfg.rotation_step_degrees),
                        split_seed=seed, train_subset=cfg.train_subset)


def run_dir_name(variant: Variant, seed: int) -> str:
    return f"{variant.value.replace('+', 'plus')}_seed{seed}"


def run_one(cfg: ExperimentConfig, variant: Variant, seed: int, base=None) -> tuple[int, dict]:
    out_dir = Path(cfg.out) / run_dir_name(variant, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.render())
    marker = out_dir / "ABORTED"
    if marker.exists():
        marker.unlink()
    tasks = build_tasks(cfg, seed, base)
    meta = {"benchmark": cfg.benchmark, "variant": variant.value, "seed": seed}
    try:
        matrix, log = run_experiment(tasks, cfg.train_config(variant, seed))
    except RunAborted as exc:
        emit_results(exc.matrix, exc.log, out_dir, status="aborted", reason=str(exc), **meta)
        marker.write_text(str(exc) + "\n")
        return EXIT_ABORTED, summarize(exc.matrix, status="aborted", **meta)
    emit_results(matrix, log, out_dir, status="complete", **meta)
    return EXIT_OK, summarize(matrix, status="complete", **meta)


def _module_of(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        parts = Path(frame.filename).parts
        if "onglab" in parts:
            return Path(frame.filename).stem
    return getattr(exc, "module", "onglab")


def run(cfg: ExperimentConfig) -> int:
    out_root = Path(cfg.out)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "config.txt").write_text(cfg.render())
    base = None
    if cfg.benchmark != "synthetic":
        base = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels)
    jobs = [(v, s) for v in cfg.variant for s in cfg.seed]
    if cfg.parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(run_one, [cfg] * len(jobs), *zip(*jobs), [base] * len(jobs)))
    else:
        results = [run_one(cfg, v, s, base) for v, s in jobs]
    status = EXIT_OK
    for (variant, seed), (code, summary) in zip(jobs, results):
        line = f"{variant.value:5s} seed={seed} A={percent(summary.get('average_accuracy', 0.0))}"
        if "average_forgetting" in summary:
            line += f" F={percent(summary['average_forgetting'])}"
        if code != EXIT_OK:
            line += " [ABORTED]"
            status = code
        print(line)
    return status


def main(argv=None) -> int:
    try:
        args = build_arg_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return run(config_from_args(args))
    except ConfigError as exc:
        print(f"error [cli]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OngLabError, OSError, ValueError) as exc:
        print(f"error [{_module_of(exc)}]: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
