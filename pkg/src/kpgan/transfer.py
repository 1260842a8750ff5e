"""Knowledge propagation for new classes of a pretrained conditional generator.

New-class scale/shift rows are linear combinations of a tunable copy of the
old-class rows (the "pseudo-classes"), plus optional per-class residuals:

    gamma_new[j] = S_gamma[j] @ gamma_hat + r_gamma[j]

Old classes always resolve to the original pretrained rows, which the block
never touches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kpgan import gradcore as gc
from kpgan.condnet import CBNLayer, Generator, check_class_ids
from kpgan.gradcore import Tensor

PARAM_TYPES = ("gamma", "beta")


@dataclass(frozen=True)
class TransferConfig:
    num_old: int
    num_new: int
    lambda_r: float = 1e-3
    lambda_s: float = 1e-3
    prior_tunable: bool = True
    residuals_enabled: bool = True
    shared_scores: bool = False
    use_l1: bool = True
    use_l2: bool = True

    def __post_init__(self):
        if self.num_old < 1 or self.num_new < 0:
            raise ValueError(f"bad class counts N={self.num_old}, M={self.num_new}")
        if self.lambda_r < 0 or self.lambda_s < 0:
            raise ValueError("regularization weights must be non-negative")


# The eight ablation rows, from the weakest variant to the full method.
ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "frozen_prior_no_res": dict(prior_tunable=False, residuals_enabled=False, shared_scores=False, use_l1=True, use_l2=True),
    "frozen_prior_with_res": dict(prior_tunable=False, residuals_enabled=True, shared_scores=False, use_l1=True, use_l2=True),
    "tunable_prior_no_res": dict(prior_tunable=True, residuals_enabled=False, shared_scores=False, use_l1=True, use_l2=True),
    "shared_scores_tunable_prior_no_res": dict(prior_tunable=True, residuals_enabled=False, shared_scores=True, use_l1=True, use_l2=True),
    "full_no_reg": dict(prior_tunable=True, residuals_enabled=True, shared_scores=False, use_l1=False, use_l2=False),
    "full_no_l1": dict(prior_tunable=True, residuals_enabled=True, shared_scores=False, use_l1=False, use_l2=True),
    "full_no_l2": dict(prior_tunable=True, residuals_enabled=True, shared_scores=False, use_l1=True, use_l2=False),
    "full": dict(prior_tunable=True, residuals_enabled=True, shared_scores=False, use_l1=True, use_l2=True),
}


@dataclass
class PriorBank:
    gamma_hat: list[Tensor]  # per layer [N, C_l]
    beta_hat: list[Tensor]
    tunable: bool = True


@dataclass
class ScoreSet:
    s_gamma: list[Tensor]  # per layer [M, N]; one shared object when shared
    s_beta: list[Tensor]
    shared_across_layers: bool = False


@dataclass
class ResidualSet:
    r_gamma: list[Tensor]  # per layer [M, C_l]
    r_beta: list[Tensor]
    enabled: bool = True


class TransferBlock:
    """Scores, pseudo-class prior and residuals for M new classes."""

    def __init__(self, cbn: list[CBNLayer], config: TransferConfig,
                 prior: PriorBank, scores: ScoreSet, residuals: ResidualSet):
        self.cbn = cbn
        self.config = config
        self.prior = prior
        self.scores = scores
        self.residuals = residuals

    @classmethod
    def initialize(cls, generator: Generator, config: TransferConfig) -> TransferBlock:
        """Scores start uniform at 1/N, residuals at zero, prior as a copy."""
        n, m = config.num_old, config.num_new
        cbn = generator.cbn
        if cbn[0].num_classes != n:
            raise ValueError(f"generator has {cbn[0].num_classes} classes, config says N={n}")
        prior = PriorBank(
            [Tensor(layer.gamma.data.copy(), requires_grad=config.prior_tunable, name=f"prior.gamma.{l}")
             for l, layer in enumerate(cbn)],
            [Tensor(layer.beta.data.copy(), requires_grad=config.prior_tunable, name=f"prior.beta.{l}")
             for l, layer in enumerate(cbn)],
            tunable=config.prior_tunable,
        )
        uniform = np.full((m, n), 1.0 / n)
        if config.shared_scores:
            sg = Tensor(uniform.copy(), requires_grad=True, name="scores.gamma")
            sb = Tensor(uniform.copy(), requires_grad=True, name="scores.beta")
            scores = ScoreSet([sg] * len(cbn), [sb] * len(cbn), shared_across_layers=True)
        else:
            scores = ScoreSet(
                [Tensor(uniform.copy(), requires_grad=True, name=f"scores.gamma.{l}") for l in range(len(cbn))],
                [Tensor(uniform.copy(), requires_grad=True, name=f"scores.beta.{l}") for l in range(len(cbn))],
            )
        enabled = config.residuals_enabled
        residuals = ResidualSet(
            [Tensor(np.zeros((m, layer.width)), requires_grad=enabled, name=f"resid.gamma.{l}")
             for l, layer in enumerate(cbn)],
            [Tensor(np.zeros((m, layer.width)), requires_grad=enabled, name=f"resid.beta.{l}")
             for l, layer in enumerate(cbn)],
            enabled=enabled,
        )
        return cls(cbn, config, prior, scores, residuals)

    @property
    def num_layers(self) -> int:
        return len(self.cbn)

    @property
    def num_classes(self) -> int:
        return self.config.num_old + self.config.num_new

    def new_rows(self, layer: int) -> tuple[Tensor, Tensor]:
        """Propagated (gamma, beta) for all new classes of one layer, [M, C]."""
        gamma = self.scores.s_gamma[layer] @ self.prior.gamma_hat[layer]
        beta = self.scores.s_beta[layer] @ self.prior.beta_hat[layer]
        if self.residuals.enabled:
            gamma = gamma + self.residuals.r_gamma[layer]
            beta = beta + self.residuals.r_beta[layer]
        return gamma, beta

    def propagate_params(self, layer: int, new_class_index: int) -> tuple[Tensor, Tensor]:
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.num_layers})")
        if not 0 <= new_class_index < self.config.num_new:
            raise IndexError(f"new class index {new_class_index} out of range [0, {self.config.num_new})")
        gamma, beta = self.new_rows(layer)
        return gc.take_rows(gamma, new_class_index), gc.take_rows(beta, new_class_index)

    def resolver(self, layer: int, class_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Per-sample rows: frozen originals for old ids, propagated for new ids."""
        class_ids = np.asarray(class_ids, dtype=np.int64)
        check_class_ids(class_ids, self.num_classes)
        base = self.cbn[layer]
        n = self.config.num_old
        if class_ids.size and class_ids.max() < n:
            return gc.take_rows(base.gamma.data, class_ids), gc.take_rows(base.beta.data, class_ids)
        gamma_new, beta_new = self.new_rows(layer)
        if class_ids.min() >= n:
            return gc.take_rows(gamma_new, class_ids - n), gc.take_rows(beta_new, class_ids - n)
        gamma = gc.concat_rows(Tensor(base.gamma.data), gamma_new)
        beta = gc.concat_rows(Tensor(base.beta.data), beta_new)
        return gc.take_rows(gamma, class_ids), gc.take_rows(beta, class_ids)

    def resolve_class(self, class_id: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (gamma, beta) arrays for a single class."""
        ids = np.array([class_id])
        with gc.no_grad():
            return [tuple(t.data[0].copy() for t in self.resolver(l, ids)) for l in range(self.num_layers)]

    def bake(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Final new-class rows per layer; scores and prior can be dropped after this."""
        with gc.no_grad():
            return [tuple(t.data.copy() for t in self.new_rows(l)) for l in range(self.num_layers)]

    def score_matrices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(sg.data, sb.data) for sg, sb in zip(self.scores.s_gamma, self.scores.s_beta)]

    def named_tensors(self) -> dict[str, Tensor]:
        """Every block tensor under a stable name (shared scores listed once)."""
        out: dict[str, Tensor] = {}
        for t in (*self.prior.gamma_hat, *self.prior.beta_hat,
                  *self.scores.s_gamma, *self.scores.s_beta,
                  *self.residuals.r_gamma, *self.residuals.r_beta):
            out[t.name] = t
        return out


def transfer_regularization(block: TransferBlock) -> tuple[Tensor, Tensor]:
    """(L_r, L_s): squared l2 norm of residuals, l1 norm of scores.

    Shared score matrices are counted once.
    """
    l_r = Tensor(0.0)
    if block.residuals.enabled:
        for r in (*block.residuals.r_gamma, *block.residuals.r_beta):
            l_r = l_r + gc.sum_(gc.square(r))
    l_s = Tensor(0.0)
    seen: set[int] = set()
    for s in (*block.scores.s_gamma, *block.scores.s_beta):
        if id(s) in seen:
            continue
        seen.add(id(s))
        l_s = l_s + gc.sum_(gc.absolute(s))
    return l_r, l_s


def regularization_loss(block: TransferBlock) -> Tensor:
    cfg = block.config
    l_r, l_s = transfer_regularization(block)
    total = Tensor(0.0)
    if cfg.use_l2 and block.residuals.enabled:
        total = total + cfg.lambda_r * l_r
    if cfg.use_l1:
        total = total + cfg.lambda_s * l_s
    return total


def trainable_parameters(block: TransferBlock) -> tuple[dict[str, Tensor], int]:
    """Trainable tensors of the block and the number of score + residual scalars.

    The count excludes the prior copy, which does not grow with M.
    """
    params: dict[str, Tensor] = {}
    for t in (*block.scores.s_gamma, *block.scores.s_beta):
        params[t.name] = t
    count = sum(t.data.size for t in params.values())
    if block.residuals.enabled:
        for t in (*block.residuals.r_gamma, *block.residuals.r_beta):
            params[t.name] = t
            count += t.data.size
    if block.prior.tunable:
        for t in (*block.prior.gamma_hat, *block.prior.beta_hat):
            params[t.name] = t
    return params, count


def prior_parameter_count(block: TransferBlock) -> int:
    if not block.prior.tunable:
        return 0
    return sum(t.data.size for t in (*block.prior.gamma_hat, *block.prior.beta_hat))


def export_scores(block: TransferBlock, k: int) -> list[tuple[int, str, int, int, int, float]]:
    """Top-k source classes per (layer, param type, new class) by |score|.

    Rows are (layer, param_type, new_class, rank, source_class, score); ties go
    to the lower source index. ``new_class`` is the global class id.
    """
    n = block.config.num_old
    if not 0 <= k <= n:
        raise ValueError(f"k={k} must lie in [0, {n}]")
    rows = []
    for layer, mats in enumerate(block.score_matrices()):
        for ptype, mat in zip(PARAM_TYPES, mats):
            for j, row in enumerate(mat):
                order = np.lexsort((np.arange(n), -np.abs(row)))[:k]
                for rank, src in enumerate(order):
                    rows.append((layer, ptype, n + j, rank, int(src), float(row[src])))
    return rows


class DirectBlock:
    """Fresh per-new-class rows learned directly (batch-statistics adaptation)."""

    def __init__(self, cbn: list[CBNLayer], num_new: int,
                 gamma: list[Tensor] | None = None, beta: list[Tensor] | None = None):
        self.cbn = cbn
        self.num_old = cbn[0].num_classes
        self.num_new = num_new
        self.gamma = gamma or [Tensor(np.ones((num_new, layer.width)), requires_grad=True, name=f"direct.gamma.{l}")
                               for l, layer in enumerate(cbn)]
        self.beta = beta or [Tensor(np.zeros((num_new, layer.width)), requires_grad=True, name=f"direct.beta.{l}")
                             for l, layer in enumerate(cbn)]

    @property
    def num_classes(self) -> int:
        return self.num_old + self.num_new

    def resolver(self, layer: int, class_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        class_ids = np.asarray(class_ids, dtype=np.int64)
        check_class_ids(class_ids, self.num_classes)
        base = self.cbn[layer]
        n = self.num_old
        if class_ids.size and class_ids.max() < n:
            return gc.take_rows(base.gamma.data, class_ids), gc.take_rows(base.beta.data, class_ids)
        if class_ids.min() >= n:
            return gc.take_rows(self.gamma[layer], class_ids - n), gc.take_rows(self.beta[layer], class_ids - n)
        gamma = gc.concat_rows(Tensor(base.gamma.data), self.gamma[layer])
        beta = gc.concat_rows(Tensor(base.beta.data), self.beta[layer])
        return gc.take_rows(gamma, class_ids), gc.take_rows(beta, class_ids)

    def named_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for t in (*self.gamma, *self.beta)}

    def bake(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(g.data.copy(), b.data.copy()) for g, b in zip(self.gamma, self.beta)]
