"""Synthetic misalignment of aligned image pairs with known ground truth.

A perturbation is a similarity transform (rotation, isotropic scale,
translation) plus optional per-control-point residuals. Both are folded into
a single thin-plate spline, so an image is resampled exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import Displacements
from .errors import InvalidArgumentError
from .tps import DEFAULT_GRID, invert_points, make_control_grid, solve_tps, warp_image

# (max |theta| in degrees, scale range, max |t| per axis, max |tps residual| per axis)
CLASS_BOUNDS = {
    "weak": (10.0, (0.9, 1.1), 0.1, 0.1),
    "strong": (25.0, (0.7, 1.3), 0.25, 0.2),
}


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    theta: float
    scale: float
    tx: float
    ty: float
    tps_deltas: Displacements | None = None
    seed: int | None = None
    magnitude: str = "weak"

    @property
    def affine(self):
        """2x3 matrix mapping output coordinates to input sampling coordinates."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        k = self.scale
        return np.array([[k * c, -k * s, self.tx], [k * s, k * c, self.ty]])

    @classmethod
    def identity(cls):
        return cls(0.0, 1.0, 0.0, 0.0)

    def to_dict(self):
        return {
            "class": self.magnitude,
            "seed": self.seed,
            "theta": self.theta,
            "scale": self.scale,
            "tx": self.tx,
            "ty": self.ty,
            "affine": self.affine.tolist(),
            "tps_deltas": None if self.tps_deltas is None else self.tps_deltas.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        d = doc.get("tps_deltas")
        return cls(
            float(doc["theta"]),
            float(doc["scale"]),
            float(doc["tx"]),
            float(doc["ty"]),
            None if d is None else Displacements.from_dict(d),
            doc.get("seed"),
            doc.get("class", "weak"),
        )


def sample_perturbation(seed, magnitude="weak", grid=None, with_tps=None):
    """Draw a perturbation uniformly within the bounds of ``magnitude``.

    Weak perturbations are affine only unless ``with_tps`` is set; strong ones
    add per-control-point residuals by default.
    """
    if magnitude not in CLASS_BOUNDS:
        raise InvalidArgumentError(f"unknown perturbation class {magnitude!r}")
    grid = grid or make_control_grid(*DEFAULT_GRID)
    max_deg, (s_lo, s_hi), t_max, d_max = CLASS_BOUNDS[magnitude]
    rng = np.random.default_rng(seed)
    theta = math.radians(rng.uniform(-max_deg, max_deg))
    scale = rng.uniform(s_lo, s_hi)
    tx, ty = rng.uniform(-t_max, t_max, size=2)
    if with_tps is None:
        with_tps = magnitude == "strong"
    deltas = None
    if with_tps:
        deltas = Displacements(rng.uniform(-d_max, d_max, size=(grid.n, 2)), grid)
    return PerturbationSpec(theta, float(scale), float(tx), float(ty), deltas, seed, magnitude)


def perturbation_params(spec, grid=None):
    """The single spline realizing ``spec``: affine image of the grid plus residuals."""
    if spec.tps_deltas is not None:
        grid = spec.tps_deltas.grid
    grid = grid or make_control_grid(*DEFAULT_GRID)
    A = spec.affine
    targets = grid.points @ A[:, :2].T + A[:, 2]
    if spec.tps_deltas is not None:
        targets = targets + spec.tps_deltas.deltas
    return solve_tps(grid, targets)


def apply_perturbation(img, gt, spec):
    """Warp an image and its ground-truth mask; return both plus the spline used."""
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if img.shape[:2] != gt.shape[:2]:
        raise InvalidArgumentError(f"image {img.shape[:2]} and mask {gt.shape[:2]} sizes differ")
    params = perturbation_params(spec)
    warped = warp_image(img, params)
    mask = (warp_image(gt, params) >= 0.5).astype(float)
    return warped, mask, params


def inverse_displacements(params, grid=None):
    """Displacements an aligner must find to undo ``params`` at the grid points.

    If ``mov = warp(ref, T)`` then warping ``mov`` by ``S`` gives ``ref`` when
    ``T(S(x)) = x``, so the target for grid point p is ``T^-1(p) - p``.
    """
    grid = grid or params.source
    return Displacements(invert_points(params, grid.points) - grid.points, grid)


def endpoint_error(recovered, truth):
    """Mean Euclidean distance between two displacement sets on one grid."""
    return float(np.mean(np.linalg.norm(recovered.deltas - truth.deltas, axis=1)))


def make_texture(seed, height=64, width=64, slope=1.5, channels=None):
    """Random texture in [0, 1] with a power-law amplitude spectrum ``1/f**slope``.

    Natural images sit near slope 1; larger slopes give smoother textures with
    structure at every pyramid level.
    """
    rng = np.random.default_rng(seed)
    shape = (height, width) if channels is None else (height, width, channels)
    noise = rng.standard_normal(shape)
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    gain = f**-slope
    gain[0, 0] = 0.0
    if channels is not None:
        gain = gain[..., None]
    tex = np.real(np.fft.ifft2(np.fft.fft2(noise, axes=(0, 1)) * gain, axes=(0, 1)))
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo)


def analytic_map(spec, X):
    """Closed-form affine map of ``spec`` (ignores TPS residuals)."""
    A = spec.affine
    return np.asarray(X) @ A[:, :2].T + A[:, 2]

