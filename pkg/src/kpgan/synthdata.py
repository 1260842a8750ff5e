"""Synthetic 2D class distributions: isotropic Gaussians on a ring (or grid),
with target classes placed between source classes."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ClassDistribution:
    center: tuple[float, float]
    covariance: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, rtol=0, atol=0):
            raise ValueError("covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")

    @property
    def sigma(self) -> float:
        """Isotropic scale (sqrt of the largest eigenvalue)."""
        return float(np.sqrt(np.linalg.eigvalsh(np.asarray(self.covariance)).max()))


@dataclass(frozen=True)
class TaskConfig:
    num_source: int = 8
    num_target: int = 2
    radius: float = 2.0
    sigma: float = 0.15
    source_budget: int = 2000
    target_budget: int = 50
    geometry: str = "ring"
    seed: int = 0

    def __post_init__(self):
        if self.num_source < 1 or self.num_target < 0:
            raise ValueError(f"invalid class counts N={self.num_source}, M={self.num_target}")
        if self.source_budget < 2 or self.target_budget < 2:
            raise ValueError("per-class sample budgets must be at least 2")
        if self.radius <= 0 or self.sigma <= 0:
            raise ValueError("radius and sigma must be positive")
        if self.geometry not in ("ring", "grid"):
            raise ValueError(f"unknown geometry {self.geometry!r}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Task:
    config: TaskConfig
    sources: tuple[ClassDistribution, ...]
    targets: tuple[ClassDistribution, ...]
    target_slots: tuple[int, ...] = field(default=())  # ring gap index of each target

    @property
    def distributions(self) -> tuple[ClassDistribution, ...]:
        """All classes in global id order: sources 0..N-1, then targets."""
        return self.sources + self.targets

    @property
    def num_classes(self) -> int:
        return len(self.sources) + len(self.targets)


def _isotropic(center, sigma: float) -> ClassDistribution:
    s2 = float(sigma) ** 2
    return ClassDistribution((float(center[0]), float(center[1])), ((s2, 0.0), (0.0, s2)))


def make_ring_task(N: int = 8, M: int = 2, R: float = 2.0, sigma: float = 0.15, seed: int = 0,
                   source_budget: int = 2000, target_budget: int = 50) -> Task:
    """Sources evenly on a circle; each target sits at the angle midway
    between two adjacent sources, gaps chosen without replacement by seed."""
    if N < 2:
        raise ValueError("ring task needs N >= 2")
    if not 1 <= M <= N:
        raise ValueError(f"ring task needs 1 <= M <= N, got M={M}")
    cfg = TaskConfig(N, M, R, sigma, source_budget, target_budget, "ring", seed)
    angles = 2 * np.pi * np.arange(N) / N
    sources = tuple(_isotropic((R * np.cos(a), R * np.sin(a)), sigma) for a in angles)
    gaps = np.sort(np.random.default_rng(seed).choice(N, size=M, replace=False))
    targets = tuple(
        _isotropic((R * np.cos(2 * np.pi * (g + 0.5) / N), R * np.sin(2 * np.pi * (g + 0.5) / N)), sigma)
        for g in gaps
    )
    return Task(cfg, sources, targets, tuple(int(g) for g in gaps))


def make_grid_task(M: int = 2, spacing: float = 1.0, sigma: float = 0.1, seed: int = 0,
                   source_budget: int = 2000, target_budget: int = 50) -> Task:
    """5x5 grid of sources; targets at midpoints of randomly chosen cells."""
    side = 5
    if not 1 <= M <= (side - 1) ** 2:
        raise ValueError(f"grid task supports 1 <= M <= {(side - 1) ** 2}")
    cfg = TaskConfig(side * side, M, spacing, sigma, source_budget, target_budget, "grid", seed)
    offset = (side - 1) / 2
    sources = tuple(_isotropic(((i - offset) * spacing, (j - offset) * spacing), sigma)
                    for i in range(side) for j in range(side))
    cells = np.sort(np.random.default_rng(seed).choice((side - 1) ** 2, size=M, replace=False))
    targets = tuple(
        _isotropic(((c // (side - 1) + 0.5 - offset) * spacing, (c % (side - 1) + 0.5 - offset) * spacing), sigma)
        for c in cells
    )
    return Task(cfg, sources, targets, tuple(int(c) for c in cells))


def make_task(config: TaskConfig) -> Task:
    if config.geometry == "grid":
        return make_grid_task(config.num_target, config.radius, config.sigma, config.seed,
                              config.source_budget, config.target_budget)
    return make_ring_task(config.num_source, config.num_target, config.radius, config.sigma,
                          config.seed, config.source_budget, config.target_budget)


def sample_class(dist: ClassDistribution, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.asarray(dist.covariance))
    return np.asarray(dist.center) + rng.standard_normal((n, 2)) @ chol.T


def subsample_dataset(points: dict[int, np.ndarray], per_class_count: int, seed: int) -> dict[int, np.ndarray]:
    """Uniform subset without replacement per class; keeps original order."""
    rng = np.random.default_rng(seed)
    out = {}
    for cls in sorted(points):
        pts = points[cls]
        if per_class_count > len(pts):
            raise ValueError(f"class {cls}: requested {per_class_count} of {len(pts)} points")
        idx = np.sort(rng.choice(len(pts), size=per_class_count, replace=False))
        out[cls] = pts[idx]
    return out


def _class_seed(seed: int, class_id: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, class_id, stream]).generate_state(1)[0])


def build_datasets(task: Task, seed: int | None = None) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Training points for source and target classes, keyed by global id."""
    seed = task.config.seed if seed is None else seed
    n = len(task.sources)
    source = {i: sample_class(d, task.config.source_budget, _class_seed(seed, i, 0))
              for i, d in enumerate(task.sources)}
    target = {n + j: sample_class(d, task.config.target_budget, _class_seed(seed, n + j, 0))
              for j, d in enumerate(task.targets)}
    return source, target


def heldout_samples(task: Task, class_id: int, n: int, seed: int) -> np.ndarray:
    """Fresh samples from the true class distribution for evaluation."""
    return sample_class(task.distributions[class_id], n, _class_seed(seed, class_id, 1))


def dump_dataset(points: dict[int, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "x0", "x1"])
        for cls in sorted(points):
            for x0, x1 in points[cls]:
                w.writerow([cls, f"{x0:.17g}", f"{x1:.17g}"])


def load_dataset(path: str | Path) -> dict[int, np.ndarray]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["class_id"]), []).append((float(rec["x0"]), float(rec["x1"])))
    return {k: np.array(v, dtype=np.float64) for k, v in sorted(rows.items())}
