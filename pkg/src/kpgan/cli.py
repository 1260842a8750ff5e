"""Command-line entry point: config-driven pretraining, transfer, fine-tuning,
evaluation, sweeps and reports.

Usage::

    kpgan <subcommand> --config exp.ini [--out DIR] [--seed N] [--jobs N]

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 missing checkpoint, 4 training aborted.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from statistics import median
from typing import Any, Callable

from kpgan.checkpoint import Checkpoint, CheckpointError
from kpgan.condnet import DiscriminatorSpec, GeneratorSpec
from kpgan.metrics import REPORT_COLUMNS
from kpgan.report import emit_report
from kpgan.synthdata import Task, TaskConfig, build_datasets, make_task, subsample_dataset
from kpgan.train import (
    MODES,
    IncompatibleCheckpoint,
    GANState,
    TrainConfig,
    TrainingAborted,
    evaluate,
    finetune,
    iterations_to_threshold,
    load_task,
    pretrain,
    transfer_train,
)
from kpgan.transfer import ABLATION_VARIANTS, TransferBlock, export_scores

log = logging.getLogger("kpgan")

OUT_ENV = "KPGAN_OUT"
DEFAULT_OUT = "kpgan-out"
SUBCOMMANDS = ("pretrain", "transfer", "finetune", "eval", "ablate", "compare", "report")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_ABORT = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


# -- configuration schema ---------------------------------------------------

_TRAIN_KEYS = ("iterations", "batch_size", "lr_g", "lr_d", "beta1", "beta2", "seed", "eval_every",
               "eval_samples", "d_steps_per_g_step", "batch_mode")
_ABLATION_KEYS = ("prior_tunable", "residuals_enabled", "shared_scores", "use_l1", "use_l2",
                  "lambda_r", "lambda_s")
_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
_TASK_DEFAULTS = {f.name: f.default for f in fields(TaskConfig)}

SCHEMA: dict[str, dict[str, Any]] = {
    "run": {"seeds": [1, 2, 3, 4, 5], "jobs": 1, "out": ""},
    "task": dict(_TASK_DEFAULTS),
    "model": {"latent_dim": 8, "g_widths": [64, 64, 64], "d_widths": [64, 64], "output_scale": 3.0},
    "pretrain": {k: _TRAIN_DEFAULTS[k] for k in _TRAIN_KEYS},
    "transfer": {"mode": "propagate", "pretrained": "", **{k: _TRAIN_DEFAULTS[k] for k in _TRAIN_KEYS},
                 **{k: _TRAIN_DEFAULTS[k] for k in _ABLATION_KEYS}, "iterations": 2000, "eval_every": 25},
    "finetune": {"source": "", **{k: _TRAIN_DEFAULTS[k] for k in _TRAIN_KEYS}, "iterations": 500,
                 "eval_every": 25},
    "eval": {"checkpoint": "", "n_samples": 500, "tau": 0.15},
    "compare": {"modes": list(MODES), "budgets": [200, 50]},
    "ablate": {"variants": list(ABLATION_VARIANTS)},
}


def _parse_value(section: str, key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "yes", "true", "on"):
                return True
            if lowered in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return [kind(s) for s in items]
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        values = {s: dict(d) for s, d in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[section][key] = _parse_value(section, key, raw, SCHEMA[section][key])
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> ExperimentConfig:
        if path is None:
            return cls.from_text("")
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def validate(self) -> None:
        """Build every derived object once so bad values fail before any work."""
        try:
            self.task_config()
            self.generator_spec()
            self.train_config("pretrain")
            self.train_config("transfer")
            self.train_config("finetune")
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        v = self.values
        if not v["run"]["seeds"]:
            raise ConfigError("[run] seeds must list at least one seed")
        if v["run"]["jobs"] < 1:
            raise ConfigError("[run] jobs must be positive")
        bad = [m for m in v["compare"]["modes"] if m not in MODES]
        if bad:
            raise ConfigError(f"[compare] unknown mode {bad[0]!r}")
        bad = [a for a in v["ablate"]["variants"] if a not in ABLATION_VARIANTS]
        if bad:
            raise ConfigError(f"[ablate] unknown variant {bad[0]!r}")
        if not v["compare"]["budgets"] or min(v["compare"]["budgets"]) < 2:
            raise ConfigError("[compare] budgets must be at least 2 samples per class")
        if v["eval"]["n_samples"] < 100:
            raise ConfigError("[eval] n_samples must be at least 100")

    def with_seed(self, seed: int) -> ExperimentConfig:
        values = {s: dict(d) for s, d in self.values.items()}
        values["run"]["seeds"] = [seed]
        for phase in ("pretrain", "transfer", "finetune"):
            values[phase]["seed"] = seed
        return ExperimentConfig(values)

    def task_config(self) -> TaskConfig:
        return TaskConfig(**self.values["task"])

    def generator_spec(self) -> GeneratorSpec:
        m = self.values["model"]
        return GeneratorSpec(latent_dim=m["latent_dim"], widths=tuple(m["g_widths"]), output_scale=m["output_scale"])

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(widths=tuple(self.values["model"]["d_widths"]))

    def train_config(self, phase: str, seed: int | None = None, **overrides) -> TrainConfig:
        section = self.values[phase]
        kw = {k: section[k] for k in _TRAIN_KEYS}
        if phase == "transfer":
            kw.update({k: section[k] for k in _ABLATION_KEYS}, mode=section["mode"])
        if seed is not None:
            kw["seed"] = seed
        kw.update(overrides)
        return TrainConfig(phase=phase, **kw)

    def to_text(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_format_value(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


# -- helpers ----------------------------------------------------------------

def resolve_out(args_out: str | None, cfg: ExperimentConfig) -> Path:
    """--out, then [run] out, then the environment override, then ./kpgan-out."""
    return Path(args_out or cfg.values["run"]["out"] or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _load_checkpoint(path: Path) -> Checkpoint:
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    try:
        return Checkpoint.load(path)
    except CheckpointError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _write_cell(cell_dir: Path, result, meta: dict, cfg_text: str) -> None:
    cell_dir.mkdir(parents=True, exist_ok=True)
    result.final.save(cell_dir / "final.ckpt")
    result.best.save(cell_dir / "best.ckpt")
    result.record.to_csv(cell_dir / "record.csv")
    (cell_dir / "cell.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    (cell_dir / "config.ini").write_text(cfg_text)
    block = GANState.from_checkpoint(result.best).block
    if isinstance(block, TransferBlock):
        k = min(3, block.config.num_old)
        with open(cell_dir / "scores_topk.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "param_type", "new_class", "rank", "source_class", "score"])
            for row in export_scores(block, k):
                w.writerow([*row[:5], repr(row[5])])


@dataclass(frozen=True)
class TransferCell:
    """One (label, mode, seed) transfer run; picklable for worker processes."""
    label: str
    pretrained: bytes
    task: Task
    train_config: TrainConfig
    budget: int | None
    cell_dir: str
    cfg_text: str
    tau: float


def _run_transfer_cell(cell: TransferCell) -> tuple[str, int | None, float | None, int | None]:
    ckpt = Checkpoint.from_bytes(cell.pretrained)
    _, target = build_datasets(cell.task)
    if cell.budget is not None:
        target = subsample_dataset(target, cell.budget, cell.task.config.seed)
    tcfg = cell.train_config
    result = transfer_train(ckpt, cell.task, tcfg, target, run_id=f"{cell.label}-s{tcfg.seed}")
    _write_cell(Path(cell.cell_dir), result,
                {"label": cell.label, "mode": tcfg.mode, "seed": tcfg.seed, "budget": cell.budget},
                cell.cfg_text)
    best = result.record.best("frechet")
    return (cell.cell_dir, best[0] if best else None, best[1] if best else None,
            iterations_to_threshold(result.record, "frechet", cell.tau) if result.record.points else None)


def _run_cells(cells: list[TransferCell], jobs: int) -> list[tuple]:
    """Run cells (already in deterministic order), returning results in that order."""
    if jobs <= 1 or len(cells) <= 1:
        return [_run_transfer_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_transfer_cell, cells))


def _pretrained_for(cfg: ExperimentConfig, out: Path) -> tuple[Checkpoint, Path]:
    path = Path(cfg.values["transfer"]["pretrained"] or out / "pretrain" / "final.ckpt")
    return _load_checkpoint(path), path


def _median(values):
    vals = [v for v in values if v is not None]
    return median(vals) if vals else None


# -- subcommands ------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    task = make_task(cfg.task_config())
    tcfg = cfg.train_config("pretrain")
    result = pretrain(task, tcfg, cfg.generator_spec(), cfg.discriminator_spec())
    _write_cell(out / "pretrain", result, {"label": "pretrain", "mode": "pretrain", "seed": tcfg.seed},
                cfg.to_text())
    log.info("pretrain done: %s", out / "pretrain")


def _transfer_cells(cfg, out, sub, label_fn, modes_flags, budgets=(None,)) -> list[TransferCell]:
    ckpt, _ = _pretrained_for(cfg, out)
    blob = ckpt.to_bytes()
    task_cfg = cfg.task_config()
    if budgets[0] is not None:
        # draw the largest budget once; smaller budgets are subsets of it
        task_cfg = replace(task_cfg, target_budget=max(budgets))
    task = make_task(task_cfg)
    tau = cfg.values["eval"]["tau"]
    cells = []
    for budget in budgets:
        for name, overrides in sorted(modes_flags.items()):
            for seed in sorted(cfg.values["run"]["seeds"]):
                tcfg = cfg.train_config("transfer", seed, **overrides)
                cell_dir = out / sub / label_fn(name, budget) / f"s{seed}"
                cells.append(TransferCell(label_fn(name, budget), blob, task, tcfg, budget, str(cell_dir),
                                          cfg.with_seed(seed).to_text(), tau))
    return cells


def cmd_transfer(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    mode = cfg.values["transfer"]["mode"]
    cells = _transfer_cells(cfg, out, "transfer", lambda name, b: name, {mode: {}})
    _run_cells(cells, jobs)


def cmd_finetune(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    task = make_task(cfg.task_config())
    for seed in sorted(cfg.values["run"]["seeds"]):
        src = Path(cfg.values["finetune"]["source"] or out / "transfer" / "propagate" / f"s{seed}" / "final.ckpt")
        ckpt = _load_checkpoint(src)
        result = finetune(ckpt, task, cfg.train_config("finetune", seed))
        _write_cell(out / "finetune" / f"s{seed}", result, {"label": "finetune", "mode": "finetune", "seed": seed},
                    cfg.with_seed(seed).to_text())


def cmd_eval(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    path = Path(cfg.values["eval"]["checkpoint"] or out / "pretrain" / "final.ckpt")
    ckpt = _load_checkpoint(path)
    task = load_task(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in sorted(cfg.values["run"]["seeds"]):
        rows += evaluate(ckpt, task, cfg.values["eval"]["n_samples"], seed, run_id=f"{path.stem}-e{seed}")
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(r.as_list() for r in rows)
    (out / "eval_config.ini").write_text(cfg.to_text())


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    variants = {name: ABLATION_VARIANTS[name] for name in cfg.values["ablate"]["variants"]}
    cells = _transfer_cells(cfg, out, "ablate", lambda name, b: name,
                            {name: dict(flags, mode="propagate") for name, flags in variants.items()})
    results = _run_cells(cells, jobs)
    per_variant: dict[str, list] = {}
    for cell, (_, best_it, best_val, _) in zip(cells, results):
        per_variant.setdefault(cell.label, []).append((best_it, best_val))
    rows = []
    for name, runs in per_variant.items():
        rows.append((_median(v for _, v in runs), _median(i for i, _ in runs), name, len(runs)))
    rows.sort(key=lambda r: (float("inf") if r[0] is None else r[0], r[2]))
    (out / "ablate").mkdir(parents=True, exist_ok=True)
    with open(out / "ablate" / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "variant", "median_best_frechet", "median_iterations_to_best", "runs"])
        for rank, (val, it, name, n) in enumerate(rows, 1):
            w.writerow([rank, name, "" if val is None else repr(val), "" if it is None else it, n])
    (out / "ablate" / "config.ini").write_text(cfg.to_text())


def cmd_compare(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    modes = {m: {"mode": m} for m in cfg.values["compare"]["modes"]}
    budgets = sorted(cfg.values["compare"]["budgets"], reverse=True)
    cells = _transfer_cells(cfg, out, "compare", lambda name, b: f"{name}-b{b}", modes, budgets)
    results = _run_cells(cells, jobs)
    grouped: dict[tuple, list] = {}
    for cell, (_, best_it, best_val, its) in zip(cells, results):
        grouped.setdefault((cell.budget, cell.train_config.mode), []).append((best_it, best_val, its))
    (out / "compare").mkdir(parents=True, exist_ok=True)
    with open(out / "compare" / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["budget", "mode", "median_best_frechet", "median_iterations_to_best",
                    "median_iterations_to_threshold", "runs"])
        for (budget, mode) in sorted(grouped, key=lambda k: (-k[0], k[1])):
            runs = grouped[(budget, mode)]
            val, it, its = _median(r[1] for r in runs), _median(r[0] for r in runs), _median(r[2] for r in runs)
            w.writerow([budget, mode, "" if val is None else repr(val), "" if it is None else it,
                        "" if its is None else its, len(runs)])
    (out / "compare" / "config.ini").write_text(cfg.to_text())


def cmd_report(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    if not out.is_dir():
        raise MissingCheckpoint(f"nothing to report: {out} does not exist")
    emit_report(out, out / "report", tau=cfg.values["eval"]["tau"])


COMMANDS: dict[str, Callable[[ExperimentConfig, Path, int], None]] = {
    "pretrain": cmd_pretrain, "transfer": cmd_transfer, "finetune": cmd_finetune, "eval": cmd_eval,
    "ablate": cmd_ablate, "compare": cmd_compare, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpgan", description=__doc__.split("\n\n")[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    parser.add_argument("--out", help=f"output directory (else [run] out, ${OUT_ENV}, ./{DEFAULT_OUT})")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--jobs", type=int, help="parallel worker processes for sweeps")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        jobs = args.jobs if args.jobs is not None else cfg.values["run"]["jobs"]
        if jobs < 1:
            raise ConfigError("--jobs must be positive")
        out = resolve_out(args.out, cfg)
        COMMANDS[args.subcommand](cfg, out, jobs)
    except ConfigError as exc:
        print(f"kpgan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingCheckpoint, IncompatibleCheckpoint) as exc:
        print(f"kpgan: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingAborted as exc:
        print(f"kpgan: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except OSError as exc:
        print(f"kpgan: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
