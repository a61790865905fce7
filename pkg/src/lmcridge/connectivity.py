"""Barrier curves along linear paths, their second-order prediction, and
layerwise / sibling-geometry diagnostics."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LayoutError, NumericError
from .params import LayerMask, ParamVector, interpolate, mask_apply
from .trainer import ForkedRun, thread_count

DEFAULT_GRID = 25
STATIONARITY_THRESHOLD = 1e-2
METRICS = ("loss", "error_rate")


class NonStationaryWarning(UserWarning):
    """An endpoint gradient is too large for the second-order model to hold."""


def alpha_grid(grid) -> np.ndarray:
    """Even grid on [0, 1] from a point count, or validate an explicit grid."""
    if np.isscalar(grid):
        n = int(grid)
        if n < 3:
            raise ConfigError(f"grid needs at least 3 points, got {n}")
        a = np.arange(n, dtype=np.float64) / (n - 1)
    else:
        a = np.asarray(grid, dtype=np.float64)
        if a.ndim != 1 or a.shape[0] < 2:
            raise ConfigError("explicit grid must be a 1-D array")
    if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
        raise ConfigError("grid must be strictly increasing from 0 to 1")
    return a


def _metric_fn(net, metric_kind):
    if metric_kind == "loss":
        return net.loss
    if metric_kind == "error_rate":
        return net.error_rate
    raise ConfigError(f"metric_kind must be one of {METRICS}, got {metric_kind!r}")


def _ordered_map(fn, items):
    items = list(items)
    workers = thread_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _same_layout(*thetas):
    lay = thetas[0].layout
    if any(t.layout != lay for t in thetas[1:]):
        raise LayoutError("parameter vectors have different layouts")


# ------------------------------------------------------------- barrier curves

@dataclass
class BarrierCurve:
    alphas: np.ndarray
    segment_values: np.ndarray
    barrier: np.ndarray
    metric_kind: str = "loss"
    endpoints: tuple = ("theta1", "theta2")
    data_id: str = ""

    @property
    def endpoint_values(self) -> tuple[float, float]:
        return float(self.segment_values[0]), float(self.segment_values[-1])


def barrier_curve(net, theta1: ParamVector, theta2: ParamVector, data, grid_size=DEFAULT_GRID,
                  metric_kind="loss", endpoints=("theta1", "theta2")) -> BarrierCurve:
    """metric((1-a) t1 + a t2) minus the chord between the endpoint metrics."""
    _same_layout(theta1, theta2)
    alphas = alpha_grid(grid_size)
    metric = _metric_fn(net, metric_kind)

    def at(a):
        try:
            return metric(interpolate(theta1, theta2, float(a)), data)
        except NumericError as exc:
            raise NumericError(f"non-finite {metric_kind} at alpha={a:g}: {exc}",
                               index=exc.index, alpha=float(a)) from exc

    values = np.array(_ordered_map(at, alphas))
    v0, v1 = values[0], values[-1]
    # chord written as v0 + a (v1 - v0) so equal endpoint values give an exact zero barrier
    barrier = values - (v0 + alphas * (v1 - v0))
    barrier[0] = barrier[-1] = 0.0
    return BarrierCurve(alphas, values, barrier, metric_kind, tuple(endpoints),
                        getattr(data, "id", ""))


def max_barrier(curve: BarrierCurve) -> tuple[float, float]:
    """Grid maximum; np.argmax keeps the first (smallest-alpha) tie."""
    i = int(np.argmax(curve.barrier))
    return float(curve.alphas[i]), float(curve.barrier[i])


# --------------------------------------------------------- predicted barriers

def second_order_curve(alphas, q1, q2):
    """a(1-a)/2 * (a q1 + (1-a) q2): the second-order barrier model."""
    a = np.asarray(alphas, dtype=np.float64)
    return a * (1.0 - a) / 2.0 * (a * q1 + (1.0 - a) * q2)


@dataclass
class PredictedBarrier:
    alphas: np.ndarray
    predicted: np.ndarray
    q1: float
    q2: float
    distance: float
    grad_norms: tuple = (float("nan"), float("nan"))
    warning_flags: list = field(default_factory=list)

    @property
    def at_half(self) -> float:
        return float(second_order_curve(0.5, self.q1, self.q2))

    @property
    def components(self) -> tuple[float, float, float]:
        return self.q1, self.q2, self.distance


def stationarity_flags(net, theta1, theta2, data, threshold=STATIONARITY_THRESHOLD):
    norms = (net.gradient(theta1, data).norm(), net.gradient(theta2, data).norm())
    flags = [f"theta{i + 1}: gradient norm {g:.3g} > {threshold:g}"
             for i, g in enumerate(norms) if g > threshold]
    for f in flags:
        warnings.warn(f"endpoint not stationary ({f}); second-order prediction is outside its "
                      "assumptions", NonStationaryWarning, stacklevel=3)
    return norms, flags


def predicted_barrier(net, theta1: ParamVector, theta2: ParamVector, data, grid=DEFAULT_GRID,
                      threshold=STATIONARITY_THRESHOLD, check_stationarity=True) -> PredictedBarrier:
    _same_layout(theta1, theta2)
    alphas = alpha_grid(grid)
    delta = theta2 - theta1
    q1 = delta.dot(net.hvp(theta1, delta, data))
    q2 = delta.dot(net.hvp(theta2, delta, data))
    pred = second_order_curve(alphas, q1, q2)
    pred[0] = pred[-1] = 0.0
    norms, flags = (stationarity_flags(net, theta1, theta2, data, threshold)
                    if check_stationarity else ((float("nan"),) * 2, []))
    return PredictedBarrier(alphas, pred, q1, q2, delta.norm(), norms, flags)


def predicted_barrier_simplified(net, theta1: ParamVector, theta2: ParamVector, data) -> float:
    """Aligned-curvature form at its maximiser a = 1/2: q1 / 8."""
    _same_layout(theta1, theta2)
    delta = theta2 - theta1
    return delta.dot(net.hvp(theta1, delta, data)) / 8.0


# ------------------------------------------------------------------ layerwise

@dataclass
class LayerwiseCurve:
    layer: str
    alphas: np.ndarray
    loss_2to1: np.ndarray
    loss_1to2: np.ndarray
    barrier: np.ndarray
    metric_kind: str = "loss"


def _as_mask(layer_set, layout) -> LayerMask:
    if isinstance(layer_set, LayerMask):
        return layer_set
    if isinstance(layer_set, str):
        layer_set = [layer_set]
    return LayerMask(frozenset(layer_set), layout)


def layerwise_barrier_curve(net, theta1, theta2, data, layer, grid=DEFAULT_GRID,
                            metric_kind="loss") -> LayerwiseCurve:
    """Interpolate only ``layer`` into each endpoint network.

    theta_2to1 = t1 + a P D and theta_1to2 = t2 - (1-a) P D with D = t2 - t1;
    the barrier is their (1-a, a) mix minus the endpoint chord.
    """
    _same_layout(theta1, theta2)
    mask = _as_mask(layer, theta1.layout)
    if isinstance(layer, str):
        name = layer
    else:
        name = "+".join(sorted(mask.layer_set))
    alphas = alpha_grid(grid)
    metric = _metric_fn(net, metric_kind)
    pd = mask_apply(mask, theta2 - theta1)
    m1, m2 = metric(theta1, data), metric(theta2, data)

    def at(a):
        try:
            return (metric(theta1 + a * pd, data), metric(theta2 - (1.0 - a) * pd, data))
        except NumericError as exc:
            raise NumericError(f"non-finite {metric_kind} at alpha={a:g}: {exc}",
                               index=exc.index, alpha=float(a)) from exc

    pairs = np.array(_ordered_map(at, alphas))
    l21, l12 = pairs[:, 0], pairs[:, 1]
    barrier = (l21 + alphas * (l12 - l21)) - (m1 + alphas * (m2 - m1))
    barrier[0] = barrier[-1] = 0.0
    return LayerwiseCurve(name, alphas, l21, l12, barrier, metric_kind)


def layer_quadratic_forms(net, theta1, theta2, data, layer_set) -> tuple[float, float]:
    """(m^T H(t1) m, m^T H(t2) m) for m the difference restricted to ``layer_set``."""
    _same_layout(theta1, theta2)
    mask = _as_mask(layer_set, theta1.layout)
    if not mask.layer_set:
        raise ConfigError("layer_set must be nonempty")
    m = mask_apply(mask, theta2 - theta1)
    return m.dot(net.hvp(theta1, m, data)), m.dot(net.hvp(theta2, m, data))


def layerwise_predicted(net, theta1, theta2, data, layer_set, alpha=0.5) -> float:
    q1, q2 = layer_quadratic_forms(net, theta1, theta2, data, layer_set)
    return float(second_order_curve(alpha, q1, q2))


@dataclass
class LayerBlockReport:
    layers: list
    block_matrix: np.ndarray  # B*[l, l'] at a = 1/2
    layer_predicted: dict
    delta_norms: dict
    actual_curves: dict = field(default_factory=dict)
    endpoint: str = "average"

    @property
    def total(self) -> float:
        return float(self.block_matrix.sum())

    def subset_total(self, names) -> float:
        idx = [self.layers.index(n) for n in names]
        return float(self.block_matrix[np.ix_(idx, idx)].sum())


def cross_block_matrix(net, theta1, theta2, data, endpoint="average", with_actual=False,
                       grid=DEFAULT_GRID) -> LayerBlockReport:
    """Per-layer-pair contributions to the a = 1/2 predicted barrier.

    ``endpoint`` picks the Hessian: ``average`` of both endpoints (matches
    the full prediction), or ``theta1`` / ``theta2`` alone.
    """
    if endpoint not in ("average", "theta1", "theta2"):
        raise ConfigError(f"endpoint must be average, theta1 or theta2, got {endpoint!r}")
    _same_layout(theta1, theta2)
    layout = theta1.layout
    names = layout.names
    delta = theta2 - theta1
    projected = {n: mask_apply(LayerMask(frozenset([n]), layout), delta) for n in names}

    def column(n):
        m = projected[n]
        if endpoint == "theta1":
            return net.hvp(theta1, m, data).values
        if endpoint == "theta2":
            return net.hvp(theta2, m, data).values
        return 0.5 * (net.hvp(theta1, m, data).values + net.hvp(theta2, m, data).values)

    cols = _ordered_map(column, names)
    B = np.zeros((len(names), len(names)))
    for j, h in enumerate(cols):
        for i, n in enumerate(names):
            s = layout[n]
            B[i, j] = float(np.dot(delta.values[s.start : s.stop], h[s.start : s.stop])) / 8.0
    norms = {n: float(np.linalg.norm(delta.segment(n))) for n in names}
    per_layer = {n: float(B[i, i]) for i, n in enumerate(names)}
    actual = {}
    if with_actual:
        actual = {n: layerwise_barrier_curve(net, theta1, theta2, data, n, grid) for n in names}
    return LayerBlockReport(list(names), B, per_layer, norms, actual, endpoint)


# ------------------------------------------------------------------- geometry

def _cosine(u: np.ndarray, v: np.ndarray):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return None
    if u.tobytes() == v.tobytes():
        return 1.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def sibling_angle(theta1: ParamVector, theta2: ParamVector, base: ParamVector | None = None):
    """Angle in degrees between the siblings seen from ``base`` (origin if None)."""
    u, v = theta1.values, theta2.values
    if base is not None:
        u, v = u - base.values, v - base.values
    c = _cosine(u, v)
    return None if c is None else math.degrees(math.acos(c))


@dataclass
class GeometryReport:
    angle_origin: float | None
    angle_fork: float | None
    epochs: list
    plane_cosine_trace: list  # None where the sibling difference vanishes
    distance_trace: list
    base: str = "origin"

    @property
    def angle(self):
        return self.angle_origin if self.base == "origin" else self.angle_fork

    def epochs_to_cosine(self, level: float):
        """First child epoch whose plane cosine reaches ``level``."""
        for t, c in zip(self.epochs, self.plane_cosine_trace):
            if c is not None and c >= level:
                return t
        return None


def sibling_geometry(run: ForkedRun, base="origin") -> GeometryReport:
    if base not in ("origin", "fork_point", "fork"):
        raise ConfigError(f"base must be origin or fork_point, got {base!r}")
    epochs = run.child_epochs()
    if not epochs:
        raise ConfigError("run has no shared child checkpoints")
    f1, f2 = run.finals
    final_diff = f1.values - f2.values
    cos, dist = [], []
    for t in epochs:
        d = run.child1_checkpoints[t].values - run.child2_checkpoints[t].values
        cos.append(_cosine(d, final_diff))
        dist.append(float(np.linalg.norm(d)))
    return GeometryReport(
        sibling_angle(f1, f2),
        sibling_angle(f1, f2, run.fork_point),
        epochs, cos, dist,
        "origin" if base == "origin" else "fork_point",
    )
