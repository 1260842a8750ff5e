"""Conditional generator with class-conditional batch norm and a projection
discriminator, both as small MLPs on top of :mod:`kpgan.gradcore`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kpgan import gradcore as gc
from kpgan.gradcore import Tensor

# resolver(layer, class_ids) -> per-sample (gamma, beta), each [batch, width]
Resolver = Callable[[int, np.ndarray], tuple[Tensor, Tensor]]


class UnknownClassError(IndexError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 8
    widths: tuple[int, ...] = (64, 64, 64)
    output_dim: int = 2
    eps: float = 1e-5
    activation: str = "leaky_relu"
    output_activation: str = "tanh"
    # tanh saturates at 1; targets live on a ring of radius ~2
    output_scale: float = 3.0

    def __post_init__(self):
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError(f"generator needs at least one positive width, got {self.widths}")
        if self.latent_dim < 1 or self.output_dim < 1:
            raise ValueError("latent_dim and output_dim must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int = 2
    widths: tuple[int, ...] = (64, 64)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass
class CBNLayer:
    """Per-class scale/shift rows for one normalization layer."""

    gamma: Tensor  # [num_classes, width]
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 2:
            raise ValueError(f"gamma/beta shapes differ: {self.gamma.shape} vs {self.beta.shape}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def num_classes(self) -> int:
        return self.gamma.shape[0]

    @property
    def width(self) -> int:
        return self.gamma.shape[1]

    def rows(self, class_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        check_class_ids(class_ids, self.num_classes)
        return gc.take_rows(self.gamma, class_ids), gc.take_rows(self.beta, class_ids)


def check_class_ids(class_ids: np.ndarray, num_classes: int) -> None:
    ids = np.asarray(class_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        bad = ids[(ids < 0) | (ids >= num_classes)][0]
        raise UnknownClassError(f"class id {int(bad)} outside [0, {num_classes})")


def cbn_forward(features: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize with whole-batch moments, then modulate per sample.

    ``gamma`` and ``beta`` hold one row per sample (already selected by class).
    """
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"cbn_forward needs a batch of at least 2 rows, got shape {features.shape}")
    centered = features - gc.mean0(features)
    std = gc.sqrt(gc.var0(features) + eps)
    return gamma * (centered / std) + beta


def _activation(name: str, x: Tensor) -> Tensor:
    if name == "leaky_relu":
        return gc.leaky_relu(x)
    if name == "relu":
        return gc.relu(x)
    if name == "tanh":
        return gc.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


class Generator:
    """MLP generator: (linear -> CBN -> activation) x L, then linear + tanh.

    Hidden linear layers carry no bias; the normalization would cancel it.
    """

    def __init__(self, spec: GeneratorSpec, num_classes: int, rng: np.random.Generator):
        self.spec = spec
        self.weights: dict[str, Tensor] = {}
        fan_in = spec.latent_dim
        for l, width in enumerate(spec.widths):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
            self.weights[f"fc{l}.w"] = Tensor(w, requires_grad=True, name=f"fc{l}.w")
            fan_in = width
        w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, spec.output_dim))
        self.weights["out.w"] = Tensor(w, requires_grad=True, name="out.w")
        self.weights["out.b"] = Tensor(np.zeros(spec.output_dim), requires_grad=True, name="out.b")
        self.cbn = [
            CBNLayer(Tensor(np.ones((num_classes, w)), requires_grad=True, name=f"cbn{l}.gamma"),
                     Tensor(np.zeros((num_classes, w)), requires_grad=True, name=f"cbn{l}.beta"),
                     spec.eps)
            for l, w in enumerate(spec.widths)
        ]

    @property
    def num_classes(self) -> int:
        return self.cbn[0].num_classes

    def parameters(self, include_cbn: bool = True) -> dict[str, Tensor]:
        params = dict(self.weights)
        if include_cbn:
            for l, layer in enumerate(self.cbn):
                params[f"cbn{l}.gamma"] = layer.gamma
                params[f"cbn{l}.beta"] = layer.beta
        return params

    def own_resolver(self, layer: int, class_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.cbn[layer].rows(class_ids)

    def extend_classes(self, count: int, gamma: float = 1.0, beta: float = 0.0) -> None:
        """Append ``count`` fresh class rows to every CBN table."""
        for l, layer in enumerate(self.cbn):
            g = np.vstack([layer.gamma.data, np.full((count, layer.width), gamma)])
            b = np.vstack([layer.beta.data, np.full((count, layer.width), beta)])
            layer.gamma = Tensor(g, requires_grad=True, name=f"cbn{l}.gamma")
            layer.beta = Tensor(b, requires_grad=True, name=f"cbn{l}.beta")

    def forward(self, z, class_ids, resolver: Resolver | None = None) -> Tensor:
        z = gc.as_tensor(z)
        class_ids = np.asarray(class_ids, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise gc.ShapeError(f"generator: z must be [batch, {self.spec.latent_dim}], got {z.shape}")
        if class_ids.shape != (z.shape[0],):
            raise gc.ShapeError(f"generator: {class_ids.shape[0] if class_ids.ndim else 0} class ids for batch {z.shape[0]}")
        resolve = resolver or self.own_resolver
        h = z
        for l in range(len(self.spec.widths)):
            h = h @ self.weights[f"fc{l}.w"]
            gamma, beta = resolve(l, class_ids)
            h = cbn_forward(h, gamma, beta, self.spec.eps)
            h = _activation(self.spec.activation, h)
        out = h @ self.weights["out.w"] + self.weights["out.b"]
        out = _activation(self.spec.output_activation, out)
        return gc.scale(out, self.spec.output_scale)


class Discriminator:
    """MLP feature extractor phi with an unconditional head psi and a class
    projection: score = psi(phi(x)) + <embed[y], phi(x)>."""

    def __init__(self, spec: DiscriminatorSpec, num_classes: int, rng: np.random.Generator):
        self.spec = spec
        self.weights: dict[str, Tensor] = {}
        fan_in = spec.input_dim
        for i, width in enumerate(spec.widths):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
            self.weights[f"fc{i}.w"] = Tensor(w, requires_grad=True, name=f"fc{i}.w")
            self.weights[f"fc{i}.b"] = Tensor(np.zeros(width), requires_grad=True, name=f"fc{i}.b")
            fan_in = width
        feat = spec.feature_dim
        self.weights["psi.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / feat), size=feat),
                                       requires_grad=True, name="psi.w")
        self.weights["psi.b"] = Tensor(0.0, requires_grad=True, name="psi.b")
        self.weights["embed"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / feat), size=(num_classes, feat)),
                                       requires_grad=True, name="embed")

    @property
    def num_classes(self) -> int:
        return self.weights["embed"].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.weights)

    def extend_classes(self, count: int, rng: np.random.Generator) -> None:
        """Append ``count`` embedding rows drawn from N(0, s^2), s = mean row-wise std."""
        emb = self.weights["embed"].data
        std = float(emb.std(axis=1).mean()) if emb.shape[0] else np.sqrt(1.0 / emb.shape[1])
        rows = rng.normal(0.0, std, size=(count, emb.shape[1]))
        self.weights["embed"] = Tensor(np.vstack([emb, rows]), requires_grad=True, name="embed")

    def features(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.spec.widths)):
            h = gc.leaky_relu(h @ self.weights[f"fc{i}.w"] + self.weights[f"fc{i}.b"])
        return h

    def forward(self, x, class_ids) -> Tensor:
        x = gc.as_tensor(x)
        class_ids = np.asarray(class_ids, dtype=np.int64)
        check_class_ids(class_ids, self.num_classes)
        phi = self.features(x)
        uncond = gc.sum_(phi * self.weights["psi.w"], axis=1) + self.weights["psi.b"]
        proj = gc.sum_(gc.take_rows(self.weights["embed"], class_ids) * phi, axis=1)
        return uncond + proj


def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    real_scores, fake_scores = gc.as_tensor(real_scores), gc.as_tensor(fake_scores)
    if real_scores.data.size == 0 or fake_scores.data.size == 0:
        raise ValueError("hinge_d_loss: empty score list")
    return gc.mean0(gc.relu(1.0 - real_scores)) + gc.mean0(gc.relu(1.0 + fake_scores))


def hinge_g_loss(fake_scores: Tensor) -> Tensor:
    fake_scores = gc.as_tensor(fake_scores)
    if fake_scores.data.size == 0:
        raise ValueError("hinge_g_loss: empty score list")
    return -gc.mean0(fake_scores)
