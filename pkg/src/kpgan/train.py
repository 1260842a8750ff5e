"""Pretraining, class-extension transfer (four modes), post fine-tuning and
evaluation for the conditional GAN."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from kpgan import gradcore as gc
from kpgan.checkpoint import Checkpoint
from kpgan.condnet import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    hinge_d_loss,
    hinge_g_loss,
)
from kpgan.gradcore import AdamState, Tensor
from kpgan.metrics import REPORT_COLUMNS, fit_gaussian, frechet_distance, kmmd, mode_metrics
from kpgan.synthdata import Task, TaskConfig, build_datasets, heldout_samples, make_task
from kpgan.transfer import (
    DirectBlock,
    TransferBlock,
    TransferConfig,
    regularization_loss,
    trainable_parameters,
)

log = logging.getLogger(__name__)

PHASES = ("pretrain", "transfer", "finetune")
MODES = ("scratch", "transfergan", "bsa", "propagate")
BATCH_MODES = ("mixed", "homogeneous")
METRICS = ("frechet", "kmmd", "coverage", "quality")
EVAL_SEED = 20240
K_SIGMA = 3.0


class TrainingAborted(RuntimeError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    mode: str = "propagate"
    prior_tunable: bool = True
    residuals_enabled: bool = True
    shared_scores: bool = False
    use_l1: bool = True
    use_l2: bool = True
    iterations: int = 5000
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999
    lambda_r: float = 1e-3
    lambda_s: float = 1e-3
    seed: int = 0
    eval_every: int = 250
    eval_samples: int = 500
    d_steps_per_g_step: int = 2
    batch_mode: str = "mixed"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"batch_mode must be one of {BATCH_MODES}, got {self.batch_mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("batch_size", "eval_every", "d_steps_per_g_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.eval_samples < 100:
            raise ValueError("eval_samples must be at least 100")
        if self.lambda_r < 0 or self.lambda_s < 0:
            raise ValueError("regularization weights must be non-negative")
        ablation = (self.prior_tunable, self.residuals_enabled, self.shared_scores, self.use_l1, self.use_l2)
        if self.phase == "transfer" and self.mode != "propagate" and ablation != (True, True, False, True, True):
            raise ValueError("ablation flags only apply to mode=propagate")

    def transfer_config(self, num_old: int, num_new: int) -> TransferConfig:
        return TransferConfig(num_old, num_new, self.lambda_r, self.lambda_s, self.prior_tunable,
                              self.residuals_enabled, self.shared_scores, self.use_l1, self.use_l2)


# -- run records ------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    run_id: str
    iteration: int
    class_id: int
    frechet: float
    kmmd: float
    coverage: float
    quality: float

    def as_list(self) -> list:
        return [self.run_id, self.iteration, self.class_id,
                repr(self.frechet), repr(self.kmmd), repr(self.coverage), repr(self.quality)]


@dataclass
class EvalPoint:
    iteration: int
    rows: list[MetricRow]
    d_loss: float
    g_loss: float
    wall_clock: float = 0.0

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows]))


@dataclass
class RunRecord:
    run_id: str
    points: list[EvalPoint] = field(default_factory=list)

    def append(self, point: EvalPoint) -> None:
        if self.points and point.iteration <= self.points[-1].iteration:
            raise ValueError(f"iteration {point.iteration} not after {self.points[-1].iteration}")
        self.points.append(point)

    def curve(self, metric: str) -> list[tuple[int, float]]:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        return [(p.iteration, p.mean(metric)) for p in self.points]

    def best(self, metric: str = "frechet") -> tuple[int, float] | None:
        curve = self.curve(metric)
        if not curve:
            return None
        return min(curve, key=lambda c: (c[1], c[0]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*REPORT_COLUMNS, "d_loss", "g_loss"])
            for p in self.points:
                for r in p.rows:
                    w.writerow([*r.as_list(), repr(p.d_loss), repr(p.g_loss)])

    @classmethod
    def from_csv(cls, path: str | Path) -> RunRecord:
        points: dict[int, EvalPoint] = {}
        run_id = ""
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                run_id = rec["run_id"]
                it = int(rec["iteration"])
                row = MetricRow(run_id, it, int(rec["class_id"]), float(rec["frechet"]), float(rec["kmmd"]),
                                float(rec["coverage"]), float(rec["quality"]))
                if it not in points:
                    points[it] = EvalPoint(it, [], float(rec["d_loss"]), float(rec["g_loss"]))
                points[it].rows.append(row)
        return cls(run_id, [points[k] for k in sorted(points)])


def iterations_to_threshold(record: RunRecord, metric: str, tau: float) -> int | None:
    """First evaluated iteration whose class-mean ``metric`` is at most ``tau``."""
    if not record.points:
        raise ValueError("empty run record")
    for it, value in record.curve(metric):
        if value <= tau:
            return it
    return None


# -- model state ------------------------------------------------------------

class GANState:
    """Everything a run owns: networks, transfer block, optimizers, rng."""

    def __init__(self, task_config: TaskConfig, generator: Generator, discriminator: Discriminator,
                 kind: str, phase: str, seed: int, num_old: int,
                 block: TransferBlock | DirectBlock | None = None,
                 opt_g: AdamState | None = None, opt_d: AdamState | None = None,
                 rng: np.random.Generator | None = None, iteration: int = 0,
                 batch_mode: str = "mixed", train_config: TrainConfig | None = None):
        self.task_config = task_config
        self.generator = generator
        self.discriminator = discriminator
        self.kind = kind
        self.phase = phase
        self.seed = seed
        self.num_old = num_old
        self.block = block
        self.opt_g = opt_g or AdamState()
        self.opt_d = opt_d or AdamState()
        self.rng = rng or np.random.default_rng(seed)
        self.iteration = iteration
        self.batch_mode = batch_mode
        self.train_config = train_config

    @property
    def num_classes(self) -> int:
        return self.block.num_classes if self.block is not None else self.generator.num_classes

    @property
    def trained_classes(self) -> list[int]:
        total = self.num_classes
        if self.kind == "pretrain":
            return list(range(total))
        if self.kind == "scratch":
            return list(range(self.num_old, total))
        return list(range(total))

    @property
    def active_classes(self) -> list[int]:
        """Classes whose data drives this phase."""
        if self.kind == "pretrain":
            return list(range(self.num_old))
        return list(range(self.num_old, self.num_classes))

    def resolver(self, layer: int, class_ids: np.ndarray):
        if self.block is not None:
            return self.block.resolver(layer, class_ids)
        return self.generator.own_resolver(layer, class_ids)

    def g_params(self) -> dict[str, Tensor]:
        gen_all = {f"G/{k}": v for k, v in self.generator.parameters().items()}
        if self.kind in ("pretrain", "scratch", "transfergan"):
            return gen_all
        if self.kind == "bsa":
            return {f"T/{k}": v for k, v in self.block.named_tensors().items()}
        if self.phase == "finetune":
            params = {f"G/{k}": v for k, v in self.generator.weights.items()}
            if self.block.residuals.enabled:
                for t in (*self.block.residuals.r_gamma, *self.block.residuals.r_beta):
                    params[f"T/{t.name}"] = t
            return params
        return {f"T/{k}": v for k, v in trainable_parameters(self.block)[0].items()}

    def generator_tensors(self) -> list[Tensor]:
        tensors = list(self.generator.parameters().values())
        if self.block is not None:
            tensors += list(self.block.named_tensors().values())
        return tensors

    def d_params(self) -> dict[str, Tensor]:
        return {f"D/{k}": v for k, v in self.discriminator.parameters().items()}

    def generator_forward(self, z, class_ids) -> Tensor:
        return self.generator.forward(z, class_ids, self.resolver)

    def generate(self, class_ids: Iterable[int], n: int, seed: int) -> dict[int, np.ndarray]:
        """``n`` samples per class with a seeded latent stream.

        Old and new classes are generated in separate batches; in mixed mode each
        batch holds all requested classes of its group, matching the training
        batches whose statistics the normalization layers see.
        """
        class_ids = sorted(set(int(c) for c in class_ids))
        bad = [c for c in class_ids if not 0 <= c < self.num_classes]
        if bad:
            raise ValueError(f"class {bad[0]} is absent from this checkpoint ({self.num_classes} classes)")
        rng = np.random.default_rng(seed)
        latent = self.generator.spec.latent_dim
        groups = [[c for c in class_ids if c < self.num_old], [c for c in class_ids if c >= self.num_old]]
        out: dict[int, np.ndarray] = {}
        with gc.no_grad():
            for group in groups:
                if not group:
                    continue
                batches = [group] if self.batch_mode == "mixed" else [[c] for c in group]
                for classes in batches:
                    ids = np.repeat(np.array(classes, dtype=np.int64), n)
                    z = rng.standard_normal((ids.size, latent))
                    x = self.generator_forward(z, ids).data
                    for c in classes:
                        out[c] = x[ids == c]
        return out

    # -- persistence --

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for k, v in self.generator.parameters().items():
            tensors[f"G/{k}"] = v.data.copy()
        for k, v in self.discriminator.parameters().items():
            tensors[f"D/{k}"] = v.data.copy()
        if self.block is not None:
            for k, v in self.block.named_tensors().items():
                tensors[f"T/{k}"] = v.data.copy()
        for tag, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for k in opt.m:
                tensors[f"opt/{tag}/m/{k}"] = opt.m[k].copy()
                tensors[f"opt/{tag}/v/{k}"] = opt.v[k].copy()
        block_kind = None
        tcfg = None
        if isinstance(self.block, TransferBlock):
            block_kind, tcfg = "propagate", asdict(self.block.config)
        elif isinstance(self.block, DirectBlock):
            block_kind = "direct"
        meta = {
            "mode": self.kind,
            "phase": self.phase,
            "iteration": self.iteration,
            "seed": self.seed,
            "num_old": self.num_old,
            "num_classes": self.num_classes,
            "batch_mode": self.batch_mode,
            "task_config": asdict(self.task_config),
            "task_fingerprint": self.task_config.fingerprint(),
            "source_fingerprint": source_fingerprint(self.task_config),
            "generator_spec": asdict(self.generator.spec),
            "discriminator_spec": asdict(self.discriminator.spec),
            "block_kind": block_kind,
            "transfer_config": tcfg,
            "train_config": asdict(self.train_config) if self.train_config else None,
            "opt_g": _opt_meta(self.opt_g),
            "opt_d": _opt_meta(self.opt_d),
            "rng_state": self.rng.bit_generator.state,
        }
        return Checkpoint(meta, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> GANState:
        meta, tensors = ckpt.meta, ckpt.tensors
        gspec = meta["generator_spec"]
        gspec = GeneratorSpec(**{**gspec, "widths": tuple(gspec["widths"])})
        dspec = meta["discriminator_spec"]
        dspec = DiscriminatorSpec(**{**dspec, "widths": tuple(dspec["widths"])})
        dummy = np.random.default_rng(0)
        gen = Generator(gspec, tensors["G/cbn0.gamma"].shape[0], dummy)
        for k, t in gen.parameters().items():
            t.data = tensors[f"G/{k}"].copy()
        disc = Discriminator(dspec, tensors["D/embed"].shape[0], dummy)
        for k, t in disc.parameters().items():
            t.data = tensors[f"D/{k}"].copy()
        block = None
        if meta["block_kind"] == "propagate":
            tcfg = TransferConfig(**meta["transfer_config"])
            block = TransferBlock.initialize(gen, tcfg)
            for k, t in block.named_tensors().items():
                t.data = tensors[f"T/{k}"].copy()
        elif meta["block_kind"] == "direct":
            block = DirectBlock(gen.cbn, meta["num_classes"] - meta["num_old"])
            for k, t in block.named_tensors().items():
                t.data = tensors[f"T/{k}"].copy()
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        tcfg = TrainConfig(**meta["train_config"]) if meta["train_config"] else None
        return cls(TaskConfig(**meta["task_config"]), gen, disc, meta["mode"], meta["phase"], meta["seed"],
                   meta["num_old"], block, _opt_from(meta["opt_g"], tensors, "g"),
                   _opt_from(meta["opt_d"], tensors, "d"), rng, meta["iteration"], meta["batch_mode"], tcfg)


def _opt_meta(opt: AdamState) -> dict:
    return {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}


def _opt_from(meta: dict, tensors: dict[str, np.ndarray], tag: str) -> AdamState:
    opt = AdamState(meta["beta1"], meta["beta2"], meta["eps"], meta["t"])
    prefix = f"opt/{tag}/m/"
    for name in tensors:
        if name.startswith(prefix):
            key = name[len(prefix):]
            opt.m[key] = tensors[name].copy()
            opt.v[key] = tensors[f"opt/{tag}/v/{key}"].copy()
    return opt


def source_fingerprint(cfg: TaskConfig) -> str:
    """Fingerprint of the parts of a task that determine the source classes."""
    return replace(cfg, num_target=0, target_budget=2).fingerprint()


# -- evaluation -------------------------------------------------------------

def metric_rows(samples: dict[int, np.ndarray], task: Task, n: int, seed: int,
                run_id: str = "", iteration: int = 0) -> list[MetricRow]:
    """Compare generated points per class with fresh held-out real samples."""
    rows = []
    for c in sorted(samples):
        real = heldout_samples(task, c, n, seed)
        fake = samples[c]
        fd = frechet_distance(fit_gaussian(fake), fit_gaussian(real))
        cov, qual = mode_metrics(fake, [task.distributions[c]], K_SIGMA)
        rows.append(MetricRow(run_id, iteration, c, fd, kmmd(fake, real, 1.0), cov, qual))
    return rows


def oracle_samples(task: Task, classes: Iterable[int], n: int, seed: int) -> dict[int, np.ndarray]:
    """True-distribution samples, independent of the held-out stream."""
    return {c: heldout_samples(task, c, n, seed + 7919) for c in classes}


def evaluate(checkpoint: Checkpoint | GANState, task: Task, n_samples: int = 500, seed: int = EVAL_SEED,
             classes: Iterable[int] | None = None, run_id: str = "") -> list[MetricRow]:
    if n_samples < 100:
        raise ValueError("evaluate needs at least 100 samples per class")
    state = checkpoint if isinstance(checkpoint, GANState) else GANState.from_checkpoint(checkpoint)
    classes = state.trained_classes if classes is None else list(classes)
    bad = [c for c in classes if not 0 <= c < min(state.num_classes, task.num_classes)]
    if bad:
        raise ValueError(f"class {bad[0]} is absent from the checkpoint or task")
    samples = state.generate(classes, n_samples, seed)
    return metric_rows(samples, task, n_samples, seed, run_id, state.iteration)


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    record: RunRecord


def _dataset_arrays(data: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    classes = sorted(data)
    x = np.concatenate([data[c] for c in classes])
    y = np.concatenate([np.full(len(data[c]), c, dtype=np.int64) for c in classes])
    return x, y


def _set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def _train_loop(state: GANState, data: dict[int, np.ndarray], cfg: TrainConfig, task: Task,
                run_id: str) -> TrainResult:
    initial = state.to_checkpoint()
    record = RunRecord(run_id)
    best, best_score = initial, np.inf
    if cfg.iterations == 0:
        return TrainResult(initial, best, record)

    x_all, y_all = _dataset_arrays(data)
    by_class = {c: data[c] for c in sorted(data)}
    classes = np.array(sorted(data), dtype=np.int64)
    g_params, d_params = state.g_params(), state.d_params()
    trainable = {id(t) for t in g_params.values()}
    for t in state.generator_tensors():
        t.requires_grad = id(t) in trainable
    rng, bsz = state.rng, cfg.batch_size
    latent = state.generator.spec.latent_dim
    reg_block = state.block if isinstance(state.block, TransferBlock) and state.phase == "transfer" else None
    t0 = time.perf_counter()

    def draw():
        if cfg.batch_mode == "mixed":
            idx = rng.integers(0, len(x_all), size=bsz)
            return x_all[idx], y_all[idx], rng.choice(classes, size=bsz)
        c = int(rng.choice(classes))
        pts = by_class[c]
        return pts[rng.integers(0, len(pts), size=bsz)], np.full(bsz, c), np.full(bsz, c)

    for step in range(cfg.iterations):
        it = state.iteration + 1
        where = "discriminator"
        try:
            _set_requires_grad(g_params, False)
            for _ in range(cfg.d_steps_per_g_step):
                xr, yr, yf = draw()
                z = rng.standard_normal((bsz, latent))
                with gc.no_grad():
                    fake = state.generator_forward(z, yf).data
                d = state.discriminator
                d_loss = hinge_d_loss(d.forward(xr, yr), d.forward(fake, yf))
                gc.adam_step(d_params, gc.backward(d_loss, d_params), state.opt_d, cfg.lr_d)
            where = "generator"
            _set_requires_grad(g_params, True)
            _set_requires_grad(d_params, False)
            _, _, yf = draw()
            z = rng.standard_normal((bsz, latent))
            g_loss = hinge_g_loss(state.discriminator.forward(state.generator_forward(z, yf), yf))
            total = g_loss if reg_block is None else g_loss + regularization_loss(reg_block)
            gc.adam_step(g_params, gc.backward(total, g_params), state.opt_g, cfg.lr_g)
            _set_requires_grad(d_params, True)
        except gc.GradError as exc:
            raise TrainingAborted(f"step {it}: {where} update failed: {exc}") from exc
        state.iteration = it
        if it % cfg.eval_every == 0 or step == cfg.iterations - 1:
            samples = state.generate(state.active_classes, cfg.eval_samples, EVAL_SEED)
            rows = metric_rows(samples, task, cfg.eval_samples, EVAL_SEED, run_id, it)
            point = EvalPoint(it, rows, d_loss.item(), g_loss.item(), time.perf_counter() - t0)
            record.append(point)
            score = point.mean("frechet")
            log.debug("%s it=%d frechet=%.4f d=%.3f g=%.3f", run_id, it, score, point.d_loss, point.g_loss)
            if score < best_score:
                best_score, best = score, state.to_checkpoint()
    _set_requires_grad(g_params, True)
    return TrainResult(state.to_checkpoint(), best, record)


def init_pretrain_state(task: Task, cfg: TrainConfig, gen_spec: GeneratorSpec | None = None,
                        disc_spec: DiscriminatorSpec | None = None) -> GANState:
    rng = np.random.default_rng(cfg.seed)
    n = len(task.sources)
    gen = Generator(gen_spec or GeneratorSpec(), n, rng)
    disc = Discriminator(disc_spec or DiscriminatorSpec(), n, rng)
    return GANState(task.config, gen, disc, "pretrain", "pretrain", cfg.seed, n,
                    opt_g=AdamState(cfg.beta1, cfg.beta2), opt_d=AdamState(cfg.beta1, cfg.beta2),
                    rng=rng, batch_mode=cfg.batch_mode, train_config=cfg)


def pretrain(task: Task, cfg: TrainConfig, gen_spec: GeneratorSpec | None = None,
             disc_spec: DiscriminatorSpec | None = None, run_id: str = "pretrain") -> TrainResult:
    if cfg.phase != "pretrain":
        raise ValueError(f"pretrain needs phase=pretrain, got {cfg.phase!r}")
    state = init_pretrain_state(task, cfg, gen_spec, disc_spec)
    source, _ = build_datasets(task)
    return _train_loop(state, source, cfg, task, run_id)


def init_transfer_state(pretrained: Checkpoint, task: Task, cfg: TrainConfig) -> GANState:
    meta = pretrained.meta
    if meta["mode"] != "pretrain":
        raise IncompatibleCheckpoint(f"transfer needs a pretrain checkpoint, got mode={meta['mode']!r}")
    if meta["source_fingerprint"] != source_fingerprint(task.config):
        raise IncompatibleCheckpoint("task fingerprint mismatch: pretrained on different source classes")
    base = GANState.from_checkpoint(pretrained)
    n, m = base.num_old, len(task.targets)
    rng = np.random.default_rng(cfg.seed)
    gen, disc = base.generator, base.discriminator
    block = None
    if cfg.mode == "scratch":
        gen = Generator(gen.spec, n + m, rng)
        disc = Discriminator(disc.spec, n + m, rng)
    else:
        disc.extend_classes(m, rng)
        if cfg.mode == "transfergan":
            gen.extend_classes(m)
        elif cfg.mode == "bsa":
            block = DirectBlock(gen.cbn, m)
        else:
            block = TransferBlock.initialize(gen, cfg.transfer_config(n, m))
    return GANState(task.config, gen, disc, cfg.mode, "transfer", cfg.seed, n, block,
                    AdamState(cfg.beta1, cfg.beta2), AdamState(cfg.beta1, cfg.beta2), rng,
                    batch_mode=base.batch_mode, train_config=cfg)


def transfer_train(pretrained: Checkpoint, task: Task, cfg: TrainConfig,
                   target_data: dict[int, np.ndarray] | None = None, run_id: str | None = None) -> TrainResult:
    """Extend a pretrained generator by the task's target classes."""
    if cfg.phase != "transfer":
        raise ValueError(f"transfer_train needs phase=transfer, got {cfg.phase!r}")
    state = init_transfer_state(pretrained, task, cfg)
    if target_data is None:
        _, target_data = build_datasets(task)
    return _train_loop(state, target_data, cfg, task, run_id or f"{cfg.mode}-s{cfg.seed}")


def finetune(transferred: Checkpoint, task: Task, cfg: TrainConfig,
             target_data: dict[int, np.ndarray] | None = None, run_id: str | None = None) -> TrainResult:
    """Freeze scores and prior; tune residuals, generator weights and discriminator."""
    if cfg.phase != "finetune":
        raise ValueError(f"finetune needs phase=finetune, got {cfg.phase!r}")
    if transferred.meta["mode"] != "propagate":
        raise IncompatibleCheckpoint(f"finetune needs a propagate checkpoint, got mode={transferred.meta['mode']!r}")
    state = GANState.from_checkpoint(transferred)
    state.phase = "finetune"
    state.train_config = cfg
    state.rng = np.random.default_rng(cfg.seed)
    state.opt_g = AdamState(cfg.beta1, cfg.beta2)
    state.opt_d = AdamState(cfg.beta1, cfg.beta2)
    if cfg.iterations == 0:
        return TrainResult(transferred, transferred, RunRecord(run_id or "finetune"))
    if target_data is None:
        _, target_data = build_datasets(task)
    return _train_loop(state, target_data, cfg, task, run_id or f"finetune-s{cfg.seed}")


def load_task(ckpt: Checkpoint) -> Task:
    return make_task(TaskConfig(**ckpt.meta["task_config"]))
