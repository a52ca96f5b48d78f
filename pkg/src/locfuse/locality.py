"""Spatial locality priors over the patch grid.

Grid coordinates in the public helpers are 1-based, as in the usual matrix
notation ``Psi[x, y]`` for ``x in 1..G_h`` and ``y in 1..G_w``.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


class PriorKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class LocalityConfig:
    kind: PriorKind = PriorKind.GAUSSIAN
    sigma: float = 0.65
    adaptive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind(self.kind))
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class LocalityMatrix:
    center: tuple[int, int]
    weights: np.ndarray


def psi(h: int, w: int, x: int, y: int, cfg: LocalityConfig) -> float:
    if not cfg.sigma > 0:
        raise ConfigError(f"sigma must be positive, got {cfg.sigma}")
    d2 = (x - h) ** 2 + (y - w) ** 2
    if cfg.kind is PriorKind.GAUSSIAN:
        return math.exp(-d2 / (2.0 * cfg.sigma**2))
    return math.exp(-math.sqrt(d2) / cfg.sigma)


def build_locality_matrix(h: int, w: int, gh: int, gw: int, cfg: LocalityConfig) -> LocalityMatrix:
    if not (1 <= h <= gh and 1 <= w <= gw):
        raise IndexError(f"center ({h}, {w}) outside a {gh}x{gw} grid")
    weights = np.empty((gh, gw), dtype=np.float64)
    for x in range(1, gh + 1):
        for y in range(1, gw + 1):
            weights[x - 1, y - 1] = psi(h, w, x, y, cfg)
    return LocalityMatrix((h, w), weights)


def grid_distances(gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    """Squared and plain Euclidean distances between all cell pairs, row-major, shape (G, G)."""
    xs, ys = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    d2 = (xs[:, None] - xs[None, :]) ** 2 + (ys[:, None] - ys[None, :]) ** 2
    d2 = d2.astype(np.float64)
    return d2, np.sqrt(d2)


@functools.lru_cache(maxsize=64)
def _cached_all_centers(gh: int, gw: int, kind: PriorKind, sigma: float) -> np.ndarray:
    # scalar psi per entry so the table matches per-cell calls bit for bit; built once per key
    cfg = LocalityConfig(kind, sigma)
    cells = [(x, y) for x in range(1, gh + 1) for y in range(1, gw + 1)]
    out = np.array([[psi(h, w, x, y, cfg) for x, y in cells] for h, w in cells], dtype=np.float64)
    out.setflags(write=False)
    return out


def all_centers(gh: int, gw: int, cfg: LocalityConfig) -> np.ndarray:
    """Every locality matrix at once: row ``q`` is Psi for query cell ``q`` (row-major), flattened."""
    return _cached_all_centers(gh, gw, cfg.kind, float(cfg.sigma))


def prior_from_sigma(sigma: T.Tensor, gh: int, gw: int, kind: PriorKind) -> T.Tensor:
    """Differentiable prior for a per-example sigma tensor of shape (B,); returns (B, G, G)."""
    d2, d = grid_distances(gh, gw)
    b = sigma.shape[0]
    inv = T.reshape(T.reciprocal(sigma), (b, 1, 1))
    if kind is PriorKind.GAUSSIAN:
        arg = T.mul(T.mul(inv, inv), T.Tensor(-0.5 * d2, dtype=sigma.dtype))
    else:
        arg = T.mul(inv, T.Tensor(-d, dtype=sigma.dtype))
    return T.exp(arg)


class AdaptiveSigmaHead:
    """sigma(query) = sigmoid(<mean_over_grid(features), projection> + bias), in (0, 1)."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        if rng is None:
            proj = np.zeros((dim, 1))
        else:
            s = math.sqrt(6.0 / (dim + 1))
            proj = rng.uniform(-s, s, size=(dim, 1))
        self.projection = T.Tensor(proj, requires_grad=True, name="sigma_head.projection")
        self.bias = T.Tensor(np.zeros((1,)), requires_grad=True, name="sigma_head.bias")

    def parameters(self) -> dict[str, T.Tensor]:
        return {"sigma_head.projection": self.projection, "sigma_head.bias": self.bias}

    def __call__(self, query_features: T.Tensor) -> T.Tensor:
        return adaptive_sigma(query_features, self)


def adaptive_sigma(query_features: T.Tensor, head: AdaptiveSigmaHead) -> T.Tensor:
    """Accepts (G_h, G_w, D) or batched (B, G_h, G_w, D); returns shape () or (B,)."""
    batched = query_features.ndim == 4
    x = query_features if batched else T.reshape(query_features, (1,) + query_features.shape)
    b, gh, gw, dim = x.shape
    pooled = T.mean(T.reshape(x, (b, gh * gw, dim)), axis=1)
    z = T.add(T.matmul(pooled, head.projection), head.bias)
    sigma = T.sigmoid(T.reshape(z, (b,)))
    return sigma if batched else T.reshape(sigma, ())
