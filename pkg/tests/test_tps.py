import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpsalign.errors import DegenerateGridError, InvalidArgumentError
from tpsalign.jsonio import dumps
from tpsalign.tps import (
    ControlPointGrid,
    TpsParameters,
    TpsWarpOperator,
    assemble_tps_system,
    bending_energy,
    evaluate_tps,
    invert_tps,
    make_control_grid,
    normalized_pixel_coords,
    rbf_kernel,
    solve_tps,
    warp_field,
    warp_image,
)


def sinusoid_targets(grid, amp=0.05):
    return grid.points + amp * np.sin(np.pi * grid.points)


def affine_targets(grid, A):
    return np.column_stack([np.ones(grid.n), grid.points]) @ A


# -- grid / kernel ---------------------------------------------------------


def test_corner_grid():
    g = make_control_grid(2, 2)
    np.testing.assert_array_equal(g.points, [[-1, -1], [1, -1], [-1, 1], [1, 1]])


def test_3x3_grid_has_center():
    g = make_control_grid(3, 3)
    assert g.n == 9
    np.testing.assert_array_equal(g.points[4], [0.0, 0.0])


def test_4x4_spacing():
    g = make_control_grid(4, 4)
    assert g.n == 16
    np.testing.assert_allclose(np.diff(g.points[:4, 0]), 2 / 3)
    np.testing.assert_allclose(np.diff(g.points[::4, 1]), 2 / 3)


@pytest.mark.parametrize("rows,cols", [(1, 4), (4, 1), (0, 0)])
def test_grid_too_small(rows, cols):
    with pytest.raises(InvalidArgumentError):
        make_control_grid(rows, cols)


def test_grid_rejects_duplicates_and_out_of_range():
    with pytest.raises(DegenerateGridError):
        ControlPointGrid([[0, 0], [0, 0], [1, 1], [-1, 1]], 2, 2)
    with pytest.raises(InvalidArgumentError):
        ControlPointGrid([[0, 0], [1.5, 0], [1, 1], [-1, 1]], 2, 2)


def test_kernel_values():
    assert rbf_kernel(1.0) == 0.0
    assert rbf_kernel(0.0) == 0.0
    assert rbf_kernel(math.e) == pytest.approx(math.e, abs=1e-12)
    assert rbf_kernel(5e-13) == 0.0
    with pytest.raises(InvalidArgumentError):
        rbf_kernel(-1.0)


# -- system assembly ---------------------------------------------------------


def test_assemble_corner_grid():
    g = make_control_grid(2, 2)
    sys_ = assemble_tps_system(g, g.points)
    np.testing.assert_array_equal(np.diag(sys_.K), 0.0)
    assert sys_.K[0, 1] == pytest.approx(4 * math.log(4), abs=1e-14)
    np.testing.assert_array_equal(sys_.Y[:4], g.points)


def test_assemble_3x3_shapes():
    g = make_control_grid(3, 3)
    sys_ = assemble_tps_system(g, sinusoid_targets(g))
    assert sys_.L.shape == (12, 12)
    np.testing.assert_array_equal(sys_.L, sys_.L.T)
    np.testing.assert_array_equal(sys_.L[9:, 9:], 0.0)
    np.testing.assert_array_equal(sys_.Y[9:], 0.0)
    np.testing.assert_array_equal(sys_.K, sys_.K.T)


def test_assemble_wrong_target_count():
    g = make_control_grid(2, 2)
    with pytest.raises(InvalidArgumentError):
        assemble_tps_system(g, np.zeros((5, 2)))


# -- solve / evaluate --------------------------------------------------------


def test_solve_identity():
    g = make_control_grid(4, 4)
    p = solve_tps(g, g.points)
    assert np.max(np.abs(p.rbf_weights)) <= 1e-10
    np.testing.assert_allclose(p.affine, [[0, 0], [1, 0], [0, 1]], atol=1e-10)
    np.testing.assert_allclose(evaluate_tps(p, [0.3, -0.7]), [0.3, -0.7], atol=1e-12)


def test_solve_translation():
    g = make_control_grid(4, 4)
    p = solve_tps(g, g.points + [0.1, 0.0])
    assert np.max(np.abs(p.rbf_weights)) <= 1e-10
    np.testing.assert_allclose(p.affine[0], [0.1, 0.0], atol=1e-10)
    np.testing.assert_allclose(evaluate_tps(p, [0.0, 0.0]), [0.1, 0.0], atol=1e-12)


@pytest.mark.parametrize("rows", [3, 4])
def test_sinusoid_fit_substitution(rows):
    g = make_control_grid(rows, rows)
    Q = sinusoid_targets(g)
    p = solve_tps(g, Q)
    # substitute back, one control point at a time, through the explicit sum
    for pi, qi in zip(g.points, Q):
        r = p.affine[0] + pi[0] * p.affine[1] + pi[1] * p.affine[2]
        for pj, wj in zip(g.points, p.rbf_weights):
            d2 = float(np.sum((pi - pj) ** 2))
            r = r + wj * (0.0 if d2 == 0 else d2 * math.log(d2))
        assert np.max(np.abs(r - qi)) < 1e-8
        assert np.max(np.abs(evaluate_tps(p, pi) - qi)) < 1e-8


def test_solve_rejects_nonfinite():
    g = make_control_grid(2, 2)
    with pytest.raises(InvalidArgumentError):
        solve_tps(g, [[0, 0], [1, 0], [0, np.nan], [1, 1]])


def test_near_degenerate_grid_returns_min_norm_solution():
    # all points on one line: L is singular, the pseudoinverse still answers
    pts = np.column_stack([np.linspace(-1, 1, 4), np.zeros(4)])
    g = ControlPointGrid(pts, 1, 4)
    p = solve_tps(g, pts + [0.1, 0.0])
    assert np.all(np.isfinite(p.rbf_weights))
    np.testing.assert_allclose(evaluate_tps(p, pts), pts + [0.1, 0.0], atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(2, 4),
    cols=st.integers(2, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_interpolation_exactness_and_side_conditions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    g = make_control_grid(rows, cols)
    Q = g.points + rng.uniform(-0.3, 0.3, size=(g.n, 2))
    p = solve_tps(g, Q)
    assert np.max(np.abs(evaluate_tps(p, g.points) - Q)) < 1e-8
    W = p.rbf_weights
    np.testing.assert_allclose(W.sum(axis=0), 0.0, atol=1e-8)
    np.testing.assert_allclose(W.T @ g.points, 0.0, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(2, 5))
def test_affine_targets_have_no_rbf_part(seed, rows):
    rng = np.random.default_rng(seed)
    g = make_control_grid(rows, rows)
    A = rng.uniform(-1, 1, size=(3, 2))
    p = solve_tps(g, affine_targets(g, A))
    assert np.max(np.abs(p.rbf_weights)) < 1e-8
    assert bending_energy(p) < 1e-10
    np.testing.assert_allclose(p.affine, A, atol=1e-9)


def test_kernel_scale_absorption():
    g = make_control_grid(4, 4)
    Q = sinusoid_targets(g, 0.1)
    p1 = solve_tps(g, Q)
    p2 = solve_tps(g, Q, kernel="r2logr")
    np.testing.assert_allclose(p2.rbf_weights, 2 * p1.rbf_weights, rtol=1e-9, atol=1e-12)
    X = np.random.default_rng(3).uniform(-1.2, 1.2, size=(100, 2))
    assert np.max(np.abs(evaluate_tps(p1, X) - evaluate_tps(p2, X))) < 1e-8


# -- bending energy ----------------------------------------------------------


def test_bending_energy_identity_is_zero():
    g = make_control_grid(4, 4)
    assert bending_energy(TpsParameters.identity(g)) == 0.0
    assert abs(bending_energy(solve_tps(g, g.points))) < 1e-10


def _integrated_curvature(params, half_width=2.0, n=64):
    # midpoint rule over [-R, R]^2 with second differences at the cell size
    h = 2 * half_width / n
    c = -half_width + h * (np.arange(n) + 0.5)
    gx, gy = np.meshgrid(c, c)
    X = np.column_stack([gx.ravel(), gy.ravel()])

    def f(dx, dy):
        return evaluate_tps(params, X + [dx, dy])

    f0 = f(0, 0)
    fxx = (f(h, 0) - 2 * f0 + f(-h, 0)) / h**2
    fyy = (f(0, h) - 2 * f0 + f(0, -h)) / h**2
    fxy = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)
    return float(np.sum(fxx**2 + 2 * fxy**2 + fyy**2) * h * h)


def test_bending_energy_matches_curvature_integral():
    # d2*ln(d2) = 2 r^2 ln r and the r^2 ln r Green's constant is 8*pi,
    # so the plane integral equals 16*pi * w^T K w
    g = make_control_grid(4, 4)
    p = solve_tps(g, sinusoid_targets(g))
    be = bending_energy(p)
    assert be > 0
    integral = _integrated_curvature(p)
    assert abs(integral - 16 * math.pi * be) / (16 * math.pi * be) < 0.10


# -- warping -----------------------------------------------------------------


def test_warp_identity_is_exact():
    img = np.random.default_rng(0).random((64, 64))
    g = make_control_grid(4, 4)
    np.testing.assert_array_equal(warp_image(img, TpsParameters.identity(g)), img)
    np.testing.assert_array_equal(warp_image(img, solve_tps(g, g.points)), img)


def test_warp_identity_multichannel():
    img = np.random.default_rng(1).random((10, 12, 3))
    g = make_control_grid(3, 3)
    np.testing.assert_array_equal(warp_image(img, solve_tps(g, g.points)), img)


def test_warp_one_pixel_translation():
    img = np.zeros((8, 8))
    img[3, 4] = 1.0
    g = make_control_grid(4, 4)
    p = solve_tps(g, g.points + [2.0 / 7.0, 0.0])
    out = warp_image(img, p)
    # direct oracle: output pixel (r, c) samples input (r, c + 1)
    expected = np.zeros((8, 8))
    for r in range(8):
        for c in range(8):
            if c + 1 < 8:
                expected[r, c] = img[r, c + 1]
    np.testing.assert_array_equal(out, expected)


def test_warp_zero_padding():
    img = np.ones((8, 8))
    g = make_control_grid(2, 2)
    out = warp_image(img, solve_tps(g, g.points + [2.0 / 7.0, 0.0]))
    np.testing.assert_array_equal(out[:, -1], 0.0)
    np.testing.assert_array_equal(out[:, :-1], 1.0)


def test_warp_round_trip_with_inverse():
    h = w = 64
    X = normalized_pixel_coords(h, w)
    img = (0.5 + 0.3 * X[:, 0] + 0.2 * np.sin(1.5 * X[:, 1])).reshape(h, w)
    g = make_control_grid(4, 4)
    fwd = solve_tps(g, sinusoid_targets(g, 0.06))
    back = invert_tps(fwd)
    out = warp_image(warp_image(img, fwd), back)
    m = h // 8  # interior 75% per axis
    err = np.abs(out - img)[m:-m, m:-m]
    assert err.max() < 0.02


def test_warp_rejects_bad_images():
    g = make_control_grid(2, 2)
    p = TpsParameters.identity(g)
    with pytest.raises(InvalidArgumentError):
        warp_image(np.zeros((0, 0)), p)
    with pytest.raises(InvalidArgumentError):
        warp_image(np.full((4, 4), np.nan), p)


def test_warp_field_dimensions():
    g = make_control_grid(3, 3)
    f = warp_field(solve_tps(g, sinusoid_targets(g)), 5, 7)
    assert f.map.shape == (5, 7, 2)
    np.testing.assert_allclose(f.map[0, 0], [-1, -1], atol=1e-12)


def test_warp_operator_matches_direct_path():
    g = make_control_grid(4, 4)
    Q = sinusoid_targets(g, 0.08)
    op = TpsWarpOperator(g, 20, 24)
    p = solve_tps(g, Q)
    np.testing.assert_allclose(op.field(Q), warp_field(p, 20, 24).map, atol=1e-12)
    assert op.bending_energy(Q) == pytest.approx(bending_energy(p), rel=1e-9)


# -- serialization -----------------------------------------------------------


def test_params_json_round_trip():
    g = make_control_grid(4, 4)
    p = solve_tps(g, sinusoid_targets(g))
    text = dumps(p.to_dict())
    doc = json.loads(text)
    assert set(doc) == {"rows", "cols", "points", "rbf_weights", "affine"}
    q = TpsParameters.from_dict(doc)
    np.testing.assert_array_equal(q.rbf_weights, p.rbf_weights)
    np.testing.assert_array_equal(q.affine, p.affine)
    np.testing.assert_array_equal(q.source.points, g.points)


def test_json_uses_17_significant_digits():
    assert dumps({"x": [0.1]}) == '{"x": [0.10000000000000001]}'
