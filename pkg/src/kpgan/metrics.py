"""Distribution distances on raw 2D points: Frechet distance between Gaussian
fits, Gaussian-kernel MMD, and mode coverage."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kpgan.synthdata import ClassDistribution

CLAMP_TOL = 1e-9
REPORT_COLUMNS = ("run_id", "iteration", "class_id", "frechet", "kmmd", "coverage", "quality")


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray


def fit_gaussian(points) -> GaussianFit:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError(f"fit_gaussian needs at least 2 points, got shape {pts.shape}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / (pts.shape[0] - 1)
    return GaussianFit(mean, 0.5 * (cov + cov.T))


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() < -CLAMP_TOL:
        raise ValueError(f"{what} is not positive semidefinite (eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).

    The trace of the product root is taken from the symmetric form
    Sa^{1/2} Sb Sa^{1/2}, which has the same eigenvalues as Sa Sb.
    """
    root_a = _psd_sqrt(a.covariance, "first covariance")
    _psd_sqrt(b.covariance, "second covariance")
    middle = _psd_sqrt(root_a @ b.covariance @ root_a, "covariance product")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(middle))
    return max(value, 0.0)


def _kernel_mean(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    sq = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return float(np.exp(-np.clip(sq, 0.0, None) / (2.0 * sigma * sigma)).mean())


def mmd_squared(x, y, sigma: float = 1.0) -> float:
    """Biased MMD^2 estimate with k(x, y) = exp(-||x - y||^2 / (2 sigma^2))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("kmmd needs non-empty point sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    return _kernel_mean(x, x, sigma) + _kernel_mean(y, y, sigma) - 2.0 * _kernel_mean(x, y, sigma)


def kmmd(x, y, sigma: float = 1.0) -> float:
    """Square root of the biased MMD^2 (clamped at 0 against round-off)."""
    m2 = mmd_squared(x, y, sigma)
    if m2 < -1e-12:
        raise ArithmeticError(f"MMD^2 unexpectedly negative: {m2}")
    return float(np.sqrt(max(m2, 0.0)))


def mode_metrics(points, distributions: Sequence[ClassDistribution], k_sigma: float = 3.0) -> tuple[float, float]:
    """(coverage, quality): fraction of modes with a point within k_sigma*sigma of
    their center, and fraction of points within that radius of their nearest center."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0 or not distributions:
        raise ValueError("mode_metrics needs points and distributions")
    centers = np.array([d.center for d in distributions])
    radii = k_sigma * np.array([d.sigma for d in distributions])
    dist = np.sqrt(((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    within = dist <= radii[None, :]
    coverage = float(within.any(axis=0).mean())
    nearest = dist.argmin(axis=1)
    quality = float(within[np.arange(len(pts)), nearest].mean())
    return coverage, quality
