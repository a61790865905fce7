"""1-D landscapes made of products of per-minimum quadratics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnsupportedMetricError
from .params import LayerLayout, ParamVector

TOY_GRID = 1001


@dataclass(frozen=True)
class ToyLandscape:
    """f(t) = prod_i c_i (t - m_i)^2 over sorted minima m_i.

    ``scales`` (the c_i) is an extension; leave it None for unit curvature.
    """

    minima: tuple
    scales: tuple | None = None

    def __post_init__(self):
        m = tuple(float(x) for x in self.minima)
        if not m:
            raise ConfigError("a toy landscape needs at least one minimum")
        order = sorted(range(len(m)), key=lambda i: m[i])
        if len(set(m)) != len(m):
            raise ConfigError("toy minima must be distinct")
        object.__setattr__(self, "minima", tuple(m[i] for i in order))
        if self.scales is not None:
            if len(self.scales) != len(m) or any(c <= 0 for c in self.scales):
                raise ConfigError("scales must be positive, one per minimum")
            object.__setattr__(self, "scales", tuple(float(self.scales[i]) for i in order))

    def _c(self, i):
        return 1.0 if self.scales is None else self.scales[i]

    def _terms(self, theta):
        # value, first and second derivative of each quadratic factor
        return [(self._c(i) * (theta - m) ** 2, 2.0 * self._c(i) * (theta - m), 2.0 * self._c(i))
                for i, m in enumerate(self.minima)]

    def value(self, theta):
        f = 1.0
        for i, m in enumerate(self.minima):
            f = f * (self._c(i) * (theta - m) ** 2)
        return f

    def derivative(self, theta: float) -> float:
        t = self._terms(theta)
        total = 0.0
        for i in range(len(t)):
            p = t[i][1]
            for j in range(len(t)):
                if j != i:
                    p *= t[j][0]
            total += p
        return total

    def second_derivative(self, theta: float) -> float:
        t = self._terms(theta)
        n = len(t)
        total = 0.0
        for i in range(n):
            p = t[i][2]
            for k in range(n):
                if k != i:
                    p *= t[k][0]
            total += p
            for j in range(n):
                if j == i:
                    continue
                p = t[i][1] * t[j][1]
                for k in range(n):
                    if k != i and k != j:
                        p *= t[k][0]
                total += p
        return total

    def as_network(self) -> "ToyNetwork":
        return ToyNetwork(self)


def toy_loss(land: ToyLandscape, theta: float) -> float:
    return land.value(theta)


def _pair(land, i, j):
    n = len(land.minima)
    if not (0 <= i < n and 0 <= j < n):
        raise ConfigError(f"minimum index out of range 0..{n - 1}")
    if i == j:
        raise ConfigError("toy barrier needs two distinct minima")
    return land.minima[i], land.minima[j]


def toy_segment(land: ToyLandscape, i: int, j: int, grid_size: int = TOY_GRID):
    a, b = _pair(land, i, j)
    alphas = np.arange(grid_size, dtype=np.float64) / (grid_size - 1)
    thetas = (1.0 - alphas) * a + alphas * b
    return alphas, land.value(thetas)


def toy_barrier(land: ToyLandscape, i: int, j: int, grid_size: int = TOY_GRID) -> tuple[float, float]:
    """Grid max of f on the segment between minima i and j (endpoints are zeros of f)."""
    alphas, f = toy_segment(land, i, j, grid_size)
    k = int(np.argmax(f))
    return float(alphas[k]), float(f[k])


def toy_predicted_barrier(land: ToyLandscape, i: int, j: int) -> float:
    """Second-order model at a = 1/2 with exact curvatures at both minima."""
    a, b = _pair(land, i, j)
    d = b - a
    return d * (0.5 * land.second_derivative(a) + 0.5 * land.second_derivative(b)) * d / 8.0


def toy_trace(land: ToyLandscape, lo: float, hi: float, points: int = TOY_GRID):
    thetas = lo + (hi - lo) * np.arange(points, dtype=np.float64) / (points - 1)
    return thetas, land.value(thetas)


class ToyNetwork:
    """One-parameter model exposing the network evaluator interface; data is ignored."""

    loss_kind = "toy"

    def __init__(self, land: ToyLandscape):
        self.land = land
        self.layout = LayerLayout.from_sizes([("theta", 1)])

    def _t(self, theta: ParamVector) -> float:
        return float(theta.values[0])

    def param(self, t: float) -> ParamVector:
        return ParamVector(np.array([t]), self.layout)

    def loss(self, theta, data=None):
        return float(self.land.value(self._t(theta)))

    def error_rate(self, theta, data=None):
        raise UnsupportedMetricError("toy landscapes have no error rate")

    def gradient(self, theta, data=None):
        return theta.like([self.land.derivative(self._t(theta))])

    def loss_and_gradient(self, theta, data=None):
        return self.loss(theta), self.gradient(theta)

    def hvp(self, theta, v, data=None):
        return theta.like(self.land.second_derivative(self._t(theta)) * v.values)
