import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmcridge import DatasetSlice, LayerMask, Network, ParamVector, mask_apply
from lmcridge.connectivity import (
    NonStationaryWarning, alpha_grid, barrier_curve, cross_block_matrix, layer_quadratic_forms,
    layerwise_barrier_curve, layerwise_predicted, max_barrier, predicted_barrier,
    predicted_barrier_simplified, second_order_curve, sibling_angle, sibling_geometry,
)
from lmcridge.errors import ConfigError, LayoutError, NumericError
from lmcridge.toyscape import ToyLandscape
from lmcridge.trainer import ForkSpec, TrainConfig, fork_and_train

from conftest import random_classification, tiny_nets
from oracles import fd_hessian, rel_err

QUARTIC = ToyLandscape((-1.0, 1.0)).as_network()   # (t^2 - 1)^2


def half_square():
    """Single linear neuron, x=1, y=0: loss = w^2 / 2."""
    net = Network((1,), [{"type": "dense", "units": 1, "bias": False}], loss="mse")
    return net, DatasetSlice([[1.0]], [[0.0]])


def three_layer():
    net = Network.mlp(3, [4, 3], 2, activation="tanh")
    data = random_classification(10, 3, 2, seed=21)
    return net, data, net.init_params(1), net.init_params(2)


# -------------------------------------------------------------- barrier curve

def test_grid_contains_half_and_endpoints():
    a = alpha_grid(25)
    assert a[0] == 0.0 and a[-1] == 1.0 and a[12] == 0.5
    with pytest.raises(ConfigError):
        alpha_grid(2)


def test_identical_endpoints_zero_curve(tiny_mlp):
    net, data = tiny_mlp
    t = net.init_params(4)
    for grid in (3, 11, 25, 101):
        c = barrier_curve(net, t, t, data, grid)
        assert np.all(c.barrier == 0.0)
    assert max_barrier(c) == (0.0, 0.0)


def test_quartic_barrier_one():
    c = barrier_curve(QUARTIC, QUARTIC.param(-1.0), QUARTIC.param(1.0), None, 25)
    assert c.barrier[12] == 1.0
    assert max_barrier(c) == (0.5, 1.0)


def test_convex_quadratic_negative_half():
    net, data = half_square()
    c = barrier_curve(net, ParamVector([-1.0], net.layout), ParamVector([1.0], net.layout), data, 25)
    assert c.barrier[12] == -0.5
    assert np.all(c.barrier[1:-1] < 0)


def test_error_rate_curve_provenance(tiny_mlp):
    net, data = tiny_mlp
    c = barrier_curve(net, net.init_params(0), net.init_params(1), data, 5, "error_rate",
                      endpoints=("a", "b"))
    assert c.metric_kind == "error_rate" and c.endpoints == ("a", "b") and c.data_id == data.id
    with pytest.raises(ConfigError):
        barrier_curve(net, net.init_params(0), net.init_params(1), data, 5, "accuracy")


def test_layout_mismatch_rejected(tiny_mlp):
    net, data = tiny_mlp
    other = Network.mlp(3, [2], 3).init_params(0)
    with pytest.raises(LayoutError):
        barrier_curve(net, net.init_params(0), other, data)


def test_nonfinite_interpolate_names_alpha():
    net = Network((1,), [{"type": "dense", "units": 1, "bias": False}, {"type": "softplus"}],
                  loss="mse")
    data = DatasetSlice([[1.0]], [[0.0]])
    t1, t2 = ParamVector([1.0], net.layout), ParamVector([1e200], net.layout)
    with pytest.raises(NumericError) as exc:
        barrier_curve(net, t1, t2, data, 5)
    assert exc.value.alpha == 0.25


def test_max_barrier_tie_smallest_alpha():
    from lmcridge.connectivity import BarrierCurve
    c = BarrierCurve(np.array([0, .25, .5, .75, 1]), np.zeros(5), np.array([0, 2, 1, 2, 0.0]))
    assert max_barrier(c) == (0.25, 2.0)


def test_max_barrier_within_fine_scan(tiny_mlp):
    net, data = tiny_mlp
    t1, t2 = net.init_params(0), net.init_params(1)
    coarse = max_barrier(barrier_curve(net, t1, t2, data, 25))[1]
    fine = max_barrier(barrier_curve(net, t1, t2, data, 241))[1]
    assert coarse <= fine + 1e-15


@settings(max_examples=25, deadline=None)
@given(st.integers(0, len(tiny_nets()) - 1), st.integers(0, 10_000), st.sampled_from([3, 5, 9, 25]))
def test_endpoint_zero_and_swap_symmetry(case, seed, grid):
    net, data = tiny_nets()[case]
    t1, t2 = net.init_params(seed), net.init_params(seed + 1)
    fwd = barrier_curve(net, t1, t2, data, grid)
    rev = barrier_curve(net, t2, t1, data, grid)
    assert fwd.barrier[0] == 0.0 and fwd.barrier[-1] == 0.0
    scale = max(1.0, np.max(np.abs(fwd.segment_values)))
    assert np.max(np.abs(fwd.barrier - rev.barrier[::-1])) <= 1e-12 * scale


def test_threads_do_not_change_results(tiny_mlp, monkeypatch):
    net, data = tiny_mlp
    t1, t2 = net.init_params(0), net.init_params(1)
    one = barrier_curve(net, t1, t2, data, 25)
    monkeypatch.setenv("LMCRIDGE_THREADS", "4")
    four = barrier_curve(net, t1, t2, data, 25)
    assert one.barrier.tobytes() == four.barrier.tobytes()


# ----------------------------------------------------------- predicted barrier

def test_quartic_prediction_four():
    p = predicted_barrier(QUARTIC, QUARTIC.param(-1.0), QUARTIC.param(1.0), None, 25)
    assert (p.q1, p.q2, p.distance) == (32.0, 32.0, 2.0)
    assert p.predicted[12] == 4.0 and p.at_half == 4.0
    assert predicted_barrier_simplified(QUARTIC, QUARTIC.param(-1.0), QUARTIC.param(1.0), None) == 4.0


def test_identical_endpoints_zero_prediction(tiny_mlp):
    net, data = tiny_mlp
    t = net.init_params(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonStationaryWarning)
        p = predicted_barrier(net, t, t, data)
    assert np.all(p.predicted == 0.0)
    assert predicted_barrier_simplified(net, t, t, data) == 0.0


def test_prediction_swap_reflects(tiny_mlp):
    net, data = tiny_mlp
    t1, t2 = net.init_params(0), net.init_params(1)
    a = predicted_barrier(net, t1, t2, data, check_stationarity=False)
    b = predicted_barrier(net, t2, t1, data, check_stationarity=False)
    scale = np.max(np.abs(a.predicted))
    assert np.max(np.abs(a.predicted - b.predicted[::-1])) <= 1e-12 * scale


def test_nonstationary_warning(tiny_mlp):
    net, data = tiny_mlp
    with pytest.warns(NonStationaryWarning):
        p = predicted_barrier(net, net.init_params(0), net.init_params(1), data)
    assert len(p.warning_flags) == 2
    q = predicted_barrier(QUARTIC, QUARTIC.param(-1.0), QUARTIC.param(1.0), None)
    assert q.warning_flags == [] and q.grad_norms == (0.0, 0.0)


def test_simplified_equals_full_when_curvatures_match():
    for q in (0.0, 1.0, 3.7, 1e5, -2.5):
        assert second_order_curve(0.5, q, q) == q / 8


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6, allow_subnormal=False), st.sampled_from([3, 5, 7, 25, 101]))
def test_equal_curvature_reduces_and_peaks_at_half(q, grid):
    a = alpha_grid(grid)
    p = second_order_curve(a, q, q)
    np.testing.assert_allclose(p, a * (1 - a) * q / 2, rtol=1e-14, atol=0)
    if q > 0:
        assert a[int(np.argmax(p))] == 0.5


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.integers(3, 60))
def test_psd_prediction_nonnegative(q1, q2, grid):
    a = alpha_grid(grid)
    p = second_order_curve(a, q1, q2)
    assert p[0] == 0.0 and p[-1] == 0.0 and np.all(p >= 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(3, 41))
def test_prop1_swap_symmetry(q1, q2, grid):
    a = alpha_grid(grid)
    fwd, rev = second_order_curve(a, q1, q2), second_order_curve(1 - a, q2, q1)
    assert np.max(np.abs(fwd - rev)) <= 1e-12 * max(1.0, abs(q1), abs(q2))


# ---------------------------------------------------------------- layerwise

def test_layerwise_zero_cases():
    net, data, t1, t2 = three_layer()
    assert np.all(layerwise_barrier_curve(net, t1, t1, data, "fc2", 25).barrier == 0.0)
    # siblings equal in fc2 only
    t2b = t2.like(np.where(LayerMask({"fc2"}, net.layout).indicator(), t1.values, t2.values))
    lc = layerwise_barrier_curve(net, t1, t2b, data, "fc2", 25)
    assert np.all(lc.barrier == 0.0)


def test_layerwise_on_single_layer_net():
    net = Network((3,), [{"type": "dense", "units": 2}])
    data = random_classification(7, 3, 2, seed=1)
    t1, t2 = net.init_params(0), net.init_params(1)
    full = barrier_curve(net, t1, t2, data, 13)
    lw = layerwise_barrier_curve(net, t1, t2, data, "fc1", 13)
    np.testing.assert_allclose(lw.barrier, full.barrier, rtol=0, atol=1e-14)
    p = predicted_barrier(net, t1, t2, data, 13, check_stationarity=False)
    for k, a in enumerate(p.alphas):
        assert layerwise_predicted(net, t1, t2, data, {"fc1"}, a) == p.predicted[k] or k in (0, 12)


def test_layerwise_all_layers_equals_full():
    net, data, t1, t2 = three_layer()
    p = predicted_barrier(net, t1, t2, data, 25, check_stationarity=False)
    full_set = LayerMask.all_layers(net.layout)
    for k in range(1, 24):
        assert layerwise_predicted(net, t1, t2, data, full_set, p.alphas[k]) == p.predicted[k]


def test_layerwise_empty_or_unknown_rejected():
    net, data, t1, t2 = three_layer()
    with pytest.raises(ConfigError):
        layerwise_predicted(net, t1, t2, data, set())
    with pytest.raises(ConfigError):
        layerwise_predicted(net, t1, t2, data, {"fc9"})
    with pytest.raises(ConfigError):
        layerwise_barrier_curve(net, t1, t2, data, "fc9")


def test_layerwise_endpoint_forms():
    net, data, t1, t2 = three_layer()
    lc = layerwise_barrier_curve(net, t1, t2, data, "fc1", 5)
    # alpha = 0 gives theta1 on the first trace, alpha = 1 gives theta2 on the second
    assert lc.loss_2to1[0] == net.loss(t1, data)
    assert lc.loss_1to2[-1] == net.loss(t2, data)


def dense_blocks(net, data, t1, t2):
    grad = lambda t: net.gradient(t, data)
    Hbar = 0.5 * (fd_hessian(grad, t1) + fd_hessian(grad, t2))
    d = (t2 - t1).values
    B = np.zeros((3, 3))
    for i, li in enumerate(net.layout.names):
        si = net.layout[li]
        for j, lj in enumerate(net.layout.names):
            sj = net.layout[lj]
            B[i, j] = d[si.start:si.stop] @ Hbar[si.start:si.stop, sj.start:sj.stop] @ d[sj.start:sj.stop] / 8
    return B


def test_block_matrix_matches_dense_hessian():
    net, data, t1, t2 = three_layer()
    report = cross_block_matrix(net, t1, t2, data)
    ref = dense_blocks(net, data, t1, t2)
    assert rel_err(report.block_matrix, ref) <= 1e-8


def test_block_sum_identity():
    net, data, t1, t2 = three_layer()
    report = cross_block_matrix(net, t1, t2, data)
    full = predicted_barrier(net, t1, t2, data, check_stationarity=False).at_half
    assert abs(report.total - full) <= 1e-8 * abs(full)


def test_composition_law():
    net, data, t1, t2 = three_layer()
    report = cross_block_matrix(net, t1, t2, data)
    ref = dense_blocks(net, data, t1, t2)
    pair = layerwise_predicted(net, t1, t2, data, {"fc1", "fc3"})
    single = [layerwise_predicted(net, t1, t2, data, {n}) for n in ("fc1", "fc3")]
    cross = report.block_matrix[0, 2]
    assert abs(pair - (single[0] + single[1] + 2 * cross)) <= 1e-8 * abs(pair)
    ref_pair = ref[0, 0] + ref[2, 2] + ref[0, 2] + ref[2, 0]
    assert abs(pair - ref_pair) <= 1e-8 * abs(ref_pair)
    assert abs(report.subset_total(["fc1", "fc3"]) - pair) <= 1e-8 * abs(pair)


def test_block_matrix_single_layer_support():
    net, data, t1, _ = three_layer()
    bump = np.where(LayerMask({"fc2"}, net.layout).indicator(), 0.3, 0.0)
    t2 = t1 + t1.like(bump)
    B = cross_block_matrix(net, t1, t2, data).block_matrix
    assert B[1, 1] != 0.0
    off = B.copy()
    off[1, 1] = 0.0
    assert np.all(off == 0.0)


def test_block_endpoint_options():
    net, data, t1, t2 = three_layer()
    avg = cross_block_matrix(net, t1, t2, data).block_matrix
    b1 = cross_block_matrix(net, t1, t2, data, "theta1").block_matrix
    b2 = cross_block_matrix(net, t1, t2, data, "theta2").block_matrix
    np.testing.assert_allclose(avg, 0.5 * (b1 + b2), rtol=1e-12, atol=1e-15)
    q1, _ = layer_quadratic_forms(net, t1, t2, data, set(net.layout.names))
    assert abs(b1.sum() - q1 / 8) <= 1e-10 * abs(q1)
    with pytest.raises(ConfigError):
        cross_block_matrix(net, t1, t2, data, "median")


def test_block_report_with_actual_curves():
    net, data, t1, t2 = three_layer()
    r = cross_block_matrix(net, t1, t2, data, with_actual=True, grid=5)
    assert set(r.actual_curves) == {"fc1", "fc2", "fc3"}
    assert r.delta_norms["fc2"] == pytest.approx(np.linalg.norm((t2 - t1).segment("fc2")))


# ------------------------------------------------------------------ geometry

def test_right_angle():
    from lmcridge import LayerLayout
    lay = LayerLayout.from_sizes([("w", 2)])
    base = ParamVector([0.5, -1.0], lay)
    a, b = base + ParamVector([1.0, 0.0], lay), base + ParamVector([0.0, 1.0], lay)
    assert sibling_angle(a, b, base) == 90.0
    assert sibling_angle(a, a, base) == 0.0
    assert sibling_angle(base, a, base) is None


def small_fork(seeds, **kw):
    net = Network.mlp(2, [5], 2, activation="tanh")
    data = random_classification(30, 2, 2, seed=2)
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.1, momentum=0.5, weight_decay=0.0, **kw)
    return fork_and_train(net, data, cfg, ForkSpec(1, seeds, child_epochs=4), force=True)


def test_geometry_traces():
    run = small_fork((1, 2))
    g = sibling_geometry(run)
    assert g.epochs == [0, 1, 2, 3, 4]
    assert g.plane_cosine_trace[0] is None and g.distance_trace[0] == 0.0
    assert g.plane_cosine_trace[-1] == 1.0
    assert all(-1 <= c <= 1 for c in g.plane_cosine_trace[1:])
    assert 0 <= g.angle_origin <= 180 and 0 <= g.angle_fork <= 180
    assert g.epochs_to_cosine(1.0) == 4
    assert sibling_geometry(run, "fork_point").angle == g.angle_fork


def test_geometry_identical_children():
    g = sibling_geometry(small_fork((3, 3)))
    assert all(d == 0.0 for d in g.distance_trace)
    assert all(c is None for c in g.plane_cosine_trace)
    assert g.angle_origin == 0.0 and g.angle_fork == 0.0
    assert g.epochs_to_cosine(0.9) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, len(tiny_nets()) - 1), st.integers(0, 10_000), st.integers(3, 120))
def test_identical_endpoints_exact_zero_any_grid(case, seed, grid):
    net, data = tiny_nets()[case]
    t = net.init_params(seed)
    assert np.all(barrier_curve(net, t, t, data, grid).barrier == 0.0)
