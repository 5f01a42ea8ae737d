import math

import numpy as np
import pytest

from tpsalign.alignment import AlignConfig, Displacements, optimize_displacements
from tpsalign.errors import InvalidArgumentError
from tpsalign.synth import (
    PerturbationSpec,
    analytic_map,
    apply_perturbation,
    endpoint_error,
    inverse_displacements,
    make_texture,
    perturbation_params,
    sample_perturbation,
)
from tpsalign.tps import evaluate_tps, make_control_grid

GRID = make_control_grid(4, 4)


def test_sampling_is_deterministic():
    a = sample_perturbation(11, "strong", GRID)
    b = sample_perturbation(11, "strong", GRID)
    assert a.to_dict() == b.to_dict()


def test_weak_bounds_over_many_seeds():
    for seed in range(1000):
        s = sample_perturbation(seed, "weak", GRID)
        assert abs(math.degrees(s.theta)) <= 10.0
        assert 0.9 <= s.scale <= 1.1
        assert abs(s.tx) <= 0.1 and abs(s.ty) <= 0.1
        assert s.tps_deltas is None


def test_strong_bounds_and_residuals():
    for seed in range(200):
        s = sample_perturbation(seed, "strong", GRID)
        assert abs(math.degrees(s.theta)) <= 25.0
        assert 0.7 <= s.scale <= 1.3
        assert max(abs(s.tx), abs(s.ty)) <= 0.25
        assert s.tps_deltas.deltas.shape == (16, 2)
        assert np.max(np.abs(s.tps_deltas.deltas)) <= 0.2


def test_weak_residuals_when_requested():
    s = sample_perturbation(0, "weak", GRID, with_tps=True)
    assert np.max(np.abs(s.tps_deltas.deltas)) <= 0.1


def test_unknown_class():
    with pytest.raises(InvalidArgumentError):
        sample_perturbation(0, "medium", GRID)


def test_spec_roundtrip():
    s = sample_perturbation(4, "strong", GRID)
    back = PerturbationSpec.from_dict(s.to_dict())
    assert back.to_dict() == s.to_dict()


def test_identity_spec_leaves_inputs():
    img = make_texture(0, 24, 24)
    gt = (img > 0.5).astype(float)
    out, mask, _ = apply_perturbation(img, gt, PerturbationSpec.identity())
    assert np.array_equal(out, img)
    assert np.array_equal(mask, gt)


@pytest.mark.parametrize("dx,dy", [(1, 0), (0, 2), (-3, 1)])
def test_translation_moves_hot_pixel(dx, dy):
    n = 16
    gt = np.zeros((n, n))
    gt[7, 8] = 1.0
    # output(x) samples input at x + t, so the hot pixel moves by -t
    spec = PerturbationSpec(0.0, 1.0, 2.0 * dx / (n - 1), 2.0 * dy / (n - 1))
    _, mask, _ = apply_perturbation(gt, gt, spec)
    expected = np.zeros_like(gt)
    expected[7 - dy, 8 - dx] = 1.0
    assert np.array_equal(mask, expected)


def test_params_reproduce_analytic_transform():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(25, 2))
    for seed in range(10):
        spec = sample_perturbation(seed, "strong", GRID, with_tps=False)
        params = perturbation_params(spec, GRID)
        assert np.max(np.abs(evaluate_tps(params, X) - analytic_map(spec, X))) < 1e-6


def test_mask_is_binary():
    img = make_texture(1, 32, 32)
    gt = (img > 0.6).astype(float)
    _, mask, _ = apply_perturbation(img, gt, sample_perturbation(2, "strong", GRID))
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        apply_perturbation(np.zeros((16, 16)), np.zeros((16, 8)), PerturbationSpec.identity())


def test_texture_range_and_determinism():
    a = make_texture(5, 32, 48)
    assert a.shape == (32, 48)
    assert a.min() == 0.0 and a.max() == 1.0
    assert np.array_equal(a, make_texture(5, 32, 48))
    assert make_texture(5, 16, 16, channels=3).shape == (16, 16, 3)


def test_endpoint_error_zero_on_self():
    d = Displacements(np.ones((GRID.n, 2)) * 0.1, GRID)
    assert endpoint_error(d, d) == 0.0


@pytest.mark.parametrize("seed", [0, 1])
def test_alignment_undoes_weak_perturbation(seed):
    ref = make_texture(1000 + seed, 64, 64)
    spec = sample_perturbation(seed, "weak", GRID)
    mov, _, params = apply_perturbation(ref, ref, spec)
    truth = inverse_displacements(params, GRID)
    rec = optimize_displacements(ref, mov, GRID, AlignConfig(seed=0))
    assert endpoint_error(rec, truth) < endpoint_error(Displacements.zeros(GRID), truth)
