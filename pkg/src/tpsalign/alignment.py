"""Control-point displacement recovery by direct objective minimization.

The objective is ``1 - NCC(ref, warp(mov)) + lambda * bending_energy``, with
NCC taken over pixels whose sample landed inside the moving image. It is
minimized by derivative-free coordinate descent over the 2N displacement
coordinates, coarse to fine over a 3-level image pyramid.

Inside the optimizer the one-pixel outer ring is left out of the NCC: after
blurring for the pyramid it mixes in zero padding and biases coarse levels.
``basis="modes"`` searches along bending-energy eigenvectors instead of single
points, affine modes first, with ``mode_schedule`` capping how many are free
per level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import InvalidArgumentError
from .tps import (
    ControlPointGrid,
    TpsWarpOperator,
    assemble_tps_system,
    bending_energy,
    normalized_pixel_coords,
    sample_bilinear,
    solve_tps,
    warp_field,
)

log = logging.getLogger(__name__)

MIN_OVERLAP = 0.10
MIN_SIZE = 16


@dataclass(frozen=True, eq=False)
class Displacements:
    """Per-control-point offsets in normalized units; targets are ``grid + deltas``."""

    deltas: np.ndarray
    grid: ControlPointGrid

    def __post_init__(self):
        d = np.array(self.deltas, dtype=float)
        if d.shape != (self.grid.n, 2):
            raise InvalidArgumentError(f"deltas must be ({self.grid.n}, 2), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise InvalidArgumentError("deltas must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "deltas", d)

    @classmethod
    def zeros(cls, grid):
        return cls(np.zeros((grid.n, 2)), grid)

    @property
    def targets(self):
        return self.grid.points + self.deltas

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "deltas": self.deltas.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["deltas"], dtype=float), ControlPointGrid.from_dict(doc["grid"]))


@dataclass(frozen=True)
class AlignConfig:
    max_disp: float = 0.5
    lambda_bend: float = 0.0
    step0: float = 0.05
    max_iters: int = 60
    tol: float = 1e-6
    seed: int = 0
    levels: int = 3
    step_floor: float = 1e-3
    step_growth: float = 1.0
    basis: str = "points"
    # modes searched per pyramid level (coarse first) when basis == "modes"
    mode_schedule: tuple = (3, 6, 16)

    def __post_init__(self):
        if not self.max_disp > 0:
            raise InvalidArgumentError("max_disp must be positive")
        if not self.lambda_bend >= 0:
            raise InvalidArgumentError("lambda_bend must be >= 0")
        if not self.step0 > 0 or not self.step_floor > 0:
            raise InvalidArgumentError("step sizes must be positive")
        if self.max_iters < 1 or self.levels < 1:
            raise InvalidArgumentError("max_iters and levels must be >= 1")
        if not 0 < self.tol < 1:
            raise InvalidArgumentError("tol must lie in (0, 1)")
        if self.basis not in ("points", "modes"):
            raise InvalidArgumentError(f"basis must be 'points' or 'modes', got {self.basis!r}")
        if self.step_growth < 1:
            raise InvalidArgumentError("step_growth must be >= 1")
        object.__setattr__(self, "mode_schedule", tuple(int(m) for m in self.mode_schedule))

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown align config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class AlignResult:
    displacements: Displacements
    initial_objective: float
    final_objective: float
    # accepted objective values, one list per pyramid level (coarse first)
    history: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def params(self):
        return solve_tps(self.displacements.grid, self.displacements.targets)


def ncc(a, b, mask=None):
    """Zero-mean normalized cross-correlation; 0 when either side has no variance."""
    if mask is not None:
        if a.ndim == 3:
            mask = np.broadcast_to(mask[..., None], a.shape)
        a = a[mask]
        b = b[mask]
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den < 1e-12:
        return 0.0
    return float(np.sum(a * b) / den)


def _similarity_cost(ref, warped, inside, ring=None):
    if inside.mean() < MIN_OVERLAP:
        return 2.0
    if ring is not None:
        inside = inside & ring
    return 1.0 - ncc(ref, warped, inside)


def _interior(h, w, margin=1):
    m = np.zeros((h, w), dtype=bool)
    m[margin : h - margin, margin : w - margin] = True
    return m


def _check_pair(ref, mov):
    ref = np.asarray(ref, dtype=float)
    mov = np.asarray(mov, dtype=float)
    if ref.shape != mov.shape:
        raise InvalidArgumentError(f"image shapes differ: {ref.shape} vs {mov.shape}")
    if ref.ndim not in (2, 3):
        raise InvalidArgumentError(f"expected HxW or HxWxC images, got {ref.shape}")
    if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(mov))):
        raise InvalidArgumentError("images contain non-finite values")
    return ref, mov


def alignment_objective(ref_img, mov_img, d, lambda_bend=0.0):
    """Cost of warping ``mov_img`` by displacements ``d`` onto ``ref_img``."""
    ref, mov = _check_pair(ref_img, mov_img)
    params = solve_tps(d.grid, d.targets)
    h, w = ref.shape[:2]
    warped, inside = sample_bilinear(mov, warp_field(params, h, w).map)
    penalty = lambda_bend * bending_energy(params) if lambda_bend else 0.0
    return _similarity_cost(ref, warped, inside) + penalty


def _blur(img):
    # separable [1, 2, 1] / 4 with edge replication
    out = img
    for axis in (0, 1):
        p = np.pad(out, [(1, 1) if a == axis else (0, 0) for a in range(img.ndim)], mode="edge")
        sl = [slice(None)] * img.ndim
        parts = []
        for k in range(3):
            sl[axis] = slice(k, k + out.shape[axis])
            parts.append(p[tuple(sl)])
        out = 0.25 * parts[0] + 0.5 * parts[1] + 0.25 * parts[2]
    return out


def _downsample(img):
    h, w = img.shape[:2]
    nh, nw = max(h // 2, 2), max(w // 2, 2)
    coords = normalized_pixel_coords(nh, nw).reshape(nh, nw, 2)
    out, _ = sample_bilinear(_blur(img), coords)
    return out


def build_pyramid(img, levels):
    """Images from finest to coarsest, each half the size of the previous."""
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape[:2]) < 2 * 8:
            break
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _directions(grid, kind="modes"):
    if kind == "points":
        dirs = []
        for i in range(grid.n):
            for axis in range(2):
                d = np.zeros((grid.n, 2))
                d[i, axis] = 1.0
                dirs.append(d)
        return dirs
    n = grid.n
    L = assemble_tps_system(grid, grid.points).L
    energy = np.linalg.pinv(L, rcond=1e-13)[:n, :n]
    energy = 0.5 * (energy + energy.T)
    vals, vecs = np.linalg.eigh(energy)
    dirs = []
    for k in np.argsort(vals, kind="stable"):
        v = vecs[:, k] * np.sqrt(n)
        for axis in range(2):
            d = np.zeros((n, 2))
            d[:, axis] = v
            dirs.append(d)
    return dirs


def _descend(ref, mov, grid, targets, cfg, step, rng, history, n_modes=None):
    h, w = ref.shape[:2]
    op = TpsWarpOperator(grid, h, w)
    # the outer pixel ring mixes in zero padding once blurred; score the interior only
    ring = _interior(h, w)
    lam = cfg.lambda_bend
    n_eval = 0

    def cost(q):
        nonlocal n_eval
        n_eval += 1
        warped, inside = sample_bilinear(mov, op.field(q))
        c = _similarity_cost(ref, warped, inside, ring)
        return c + lam * op.bending_energy(q) if lam else c

    lo = grid.points - cfg.max_disp
    hi = grid.points + cfg.max_disp
    dirs = _directions(grid, cfg.basis)
    if n_modes is not None:
        dirs = dirs[: 2 * n_modes]
    q = targets.copy()
    cur = cost(q)
    accepted = [cur]
    steps = np.full(len(dirs), step)
    for _ in range(cfg.max_iters):
        if np.all(steps < cfg.step_floor):
            break
        start = cur
        moved = False
        for k in rng.permutation(len(dirs)):
            if steps[k] < cfg.step_floor:
                continue
            improved = False
            for sign in (1.0, -1.0):
                trial = np.clip(q + sign * steps[k] * dirs[k], lo, hi)
                if np.array_equal(trial, q):
                    continue
                c = cost(trial)
                if c < cur:
                    q, cur = trial, c
                    accepted.append(cur)
                    improved = moved = True
                    steps[k] = min(steps[k] * cfg.step_growth, cfg.max_disp)
                    break
            if not improved:
                steps[k] *= 0.5
        if moved and (start - cur) <= cfg.tol * max(abs(start), 1e-12):
            break
    history.append(accepted)
    return q, n_eval


def align_images(ref, mov, grid, cfg=None):
    """Run the full coarse-to-fine optimization and report objectives."""
    cfg = cfg or AlignConfig()
    ref, mov = _check_pair(ref, mov)
    if min(ref.shape[:2]) < MIN_SIZE:
        raise InvalidArgumentError(f"images must be at least {MIN_SIZE}x{MIN_SIZE}")
    rng = np.random.default_rng(cfg.seed)
    ref_pyr = build_pyramid(ref, cfg.levels)
    mov_pyr = build_pyramid(mov, cfg.levels)

    zero = Displacements.zeros(grid)
    initial = alignment_objective(ref, mov, zero, cfg.lambda_bend)

    q = grid.points.copy()
    history = []
    n_eval = 0
    n_levels = len(ref_pyr)
    for depth, (r, m) in enumerate(zip(reversed(ref_pyr), reversed(mov_pyr))):
        step = cfg.step0 * 0.5**depth
        sched = None
        if cfg.basis == "modes":
            sched = cfg.mode_schedule[min(depth, len(cfg.mode_schedule) - 1)]
        q, k = _descend(r, m, grid, q, cfg, step, rng, history, sched)
        n_eval += k
        log.debug("level %d/%d: %d evals, objective %.6f", depth + 1, n_levels, k, history[-1][-1])

    d = Displacements(np.clip(q - grid.points, -cfg.max_disp, cfg.max_disp), grid)
    final = alignment_objective(ref, mov, d, cfg.lambda_bend)
    if final > initial:
        # coarse levels can mislead; never return something worse than doing nothing
        d, final = zero, initial
    return AlignResult(d, initial, final, history, n_eval)


def optimize_displacements(ref, mov, grid, cfg=None):
    """Displacements that best warp ``mov`` onto ``ref`` under ``cfg``."""
    return align_images(ref, mov, grid, cfg).displacements
