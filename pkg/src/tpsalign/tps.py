"""Thin-plate spline fitting, evaluation and dense image warping.

Coordinates are normalized to [-1, 1] on both axes with the align-corners
convention: pixel column 0 maps to x = -1 and column W-1 maps to x = 1.
Every warp is a backward map: for each output pixel we evaluate the spline
to find where to sample in the input image.

    >>> grid = make_control_grid(4, 4)
    >>> params = solve_tps(grid, grid.points + [0.05, 0.0])
    >>> warped = warp_image(image, params)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGridError, InvalidArgumentError, NumericalError

KERNEL_FLOOR = 1e-12
SNAP_TOL = 1e-8  # pixel distance below which a sample snaps onto the lattice
DEFAULT_GRID = (4, 4)


@dataclass(frozen=True, eq=False)
class ControlPointGrid:
    """Source control points, ``rows * cols`` of them, in row-major order."""

    points: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidArgumentError(f"points must have shape (N, 2), got {pts.shape}")
        n = pts.shape[0]
        if n < 4:
            raise InvalidArgumentError(f"need at least 4 control points, got {n}")
        if self.rows * self.cols != n:
            raise InvalidArgumentError(f"rows*cols = {self.rows * self.cols} but {n} points given")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("control points must be finite")
        if np.any(np.abs(pts) > 1.0):
            raise InvalidArgumentError("control points must lie in [-1, 1]")
        d2 = _pairwise_sq_dist(pts, pts)
        np.fill_diagonal(d2, np.inf)
        if np.any(d2 < KERNEL_FLOOR):
            i, j = np.unravel_index(np.argmin(d2), d2.shape)
            raise DegenerateGridError(f"control points {i} and {j} coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    def to_dict(self):
        return {"rows": self.rows, "cols": self.cols, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["points"], dtype=float), int(doc["rows"]), int(doc["cols"]))


def make_control_grid(rows=DEFAULT_GRID[0], cols=DEFAULT_GRID[1]):
    """Uniform ``rows x cols`` lattice over [-1, 1]^2; x varies fastest."""
    if rows < 2 or cols < 2:
        raise InvalidArgumentError(f"grid dimensions must be >= 2, got {rows}x{cols}")
    xs = np.linspace(-1.0, 1.0, cols)
    ys = np.linspace(-1.0, 1.0, rows)
    gx, gy = np.meshgrid(xs, ys)
    return ControlPointGrid(np.column_stack([gx.ravel(), gy.ravel()]), rows, cols)


def rbf_kernel(d2):
    """Thin-plate radial basis ``d2 * ln(d2)`` of a squared distance.

    Accepts a scalar or an array. Values below 1e-12 return 0, the analytic
    limit at the origin.
    """
    arr = np.asarray(d2, dtype=float)
    if np.any(arr < 0):
        raise InvalidArgumentError("squared distance must be non-negative")
    safe = np.where(arr < KERNEL_FLOOR, 1.0, arr)
    out = np.where(arr < KERNEL_FLOOR, 0.0, arr * np.log(safe))
    return float(out) if out.ndim == 0 else out


def rbf_kernel_r2logr(d2):
    """The ``r^2 log r`` form of the kernel, exactly half of :func:`rbf_kernel`."""
    return 0.5 * rbf_kernel(d2)


def _rbf_kernel_grad_factor(d2, kernel):
    # dU/dX = factor * (X - p); for d2*ln(d2) the factor is 2*(ln(d2) + 1)
    safe = np.where(d2 < KERNEL_FLOOR, 1.0, d2)
    f = np.where(d2 < KERNEL_FLOOR, 0.0, 2.0 * (np.log(safe) + 1.0))
    return 0.5 * f if kernel == "r2logr" else f


KERNELS = {"d2logd2": rbf_kernel, "r2logr": rbf_kernel_r2logr}


def _pairwise_sq_dist(a, b):
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return dx * dx + dy * dy


def _augment(points):
    return np.column_stack([np.ones(len(points)), points])


@dataclass(frozen=True, eq=False)
class TpsSystem:
    K: np.ndarray
    L: np.ndarray
    Y: np.ndarray


@dataclass(frozen=True, eq=False)
class TpsParameters:
    """Fitted spline: RBF weights (N x 2) and affine block (3 x 2).

    Affine rows are the constant term, the x coefficient and the y coefficient.
    """

    rbf_weights: np.ndarray
    affine: np.ndarray
    source: ControlPointGrid
    kernel: str = "d2logd2"

    def __post_init__(self):
        w = np.array(self.rbf_weights, dtype=float)
        a = np.array(self.affine, dtype=float)
        if w.shape != (self.source.n, 2):
            raise InvalidArgumentError(f"rbf_weights must be ({self.source.n}, 2), got {w.shape}")
        if a.shape != (3, 2):
            raise InvalidArgumentError(f"affine must be (3, 2), got {a.shape}")
        if self.kernel not in KERNELS:
            raise InvalidArgumentError(f"unknown kernel {self.kernel!r}")
        w.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "rbf_weights", w)
        object.__setattr__(self, "affine", a)

    @classmethod
    def identity(cls, grid):
        return cls(np.zeros((grid.n, 2)), np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), grid)

    def to_dict(self):
        doc = {
            "rows": self.source.rows,
            "cols": self.source.cols,
            "points": self.source.points.tolist(),
            "rbf_weights": self.rbf_weights.tolist(),
            "affine": self.affine.tolist(),
        }
        if self.kernel != "d2logd2":
            doc["kernel"] = self.kernel
        return doc

    @classmethod
    def from_dict(cls, doc):
        grid = ControlPointGrid.from_dict(doc)
        return cls(
            np.asarray(doc["rbf_weights"], dtype=float),
            np.asarray(doc["affine"], dtype=float),
            grid,
            doc.get("kernel", "d2logd2"),
        )


def _as_targets(grid, targets):
    q = np.asarray(targets, dtype=float)
    if q.shape != (grid.n, 2):
        raise InvalidArgumentError(f"expected {grid.n} target points of shape (N, 2), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("target points must be finite")
    return q


def assemble_tps_system(grid, targets, kernel="d2logd2"):
    """Build the kernel matrix K, the bordered matrix L and right-hand side Y."""
    q = _as_targets(grid, targets)
    n = grid.n
    K = KERNELS[kernel](_pairwise_sq_dist(grid.points, grid.points))
    P_aug = _augment(grid.points)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = P_aug
    L[n:, :n] = P_aug.T
    Y = np.zeros((n + 3, 2))
    Y[:n] = q
    return TpsSystem(K, L, Y)


def solve_tps(grid, targets, kernel="d2logd2"):
    """Fit the spline mapping each source control point onto its target.

    Uses the SVD pseudoinverse of L, so nearly degenerate layouts return the
    minimum-norm solution instead of raising.
    """
    system = assemble_tps_system(grid, targets, kernel)
    sol = np.linalg.pinv(system.L, rcond=1e-13) @ system.Y
    if not np.all(np.isfinite(sol)):
        raise NumericalError("TPS solve produced non-finite parameters")
    n = grid.n
    return TpsParameters(sol[:n], sol[n:], grid, kernel)


def evaluate_tps(params, X):
    """Map one point (shape (2,)) or many (shape (M, 2)) through the spline."""
    pts = np.asarray(X, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise InvalidArgumentError(f"query points must have 2 coordinates, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgumentError("query points must be finite")
    U = KERNELS[params.kernel](_pairwise_sq_dist(pts, params.source.points))
    out = U @ params.rbf_weights + _augment(pts) @ params.affine
    return out[0] if single else out


def tps_jacobian(params, X):
    """Jacobian d(output)/d(input) at each query point, shape (M, 2, 2)."""
    pts = np.atleast_2d(np.asarray(X, dtype=float))
    diff = pts[:, None, :] - params.source.points[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    f = _rbf_kernel_grad_factor(d2, params.kernel)
    # J[m, out, in] = sum_i w[i, out] * f[m, i] * diff[m, i, in] + affine[1 + in, out]
    J = np.einsum("io,mi,mij->moj", params.rbf_weights, f, diff)
    J += params.affine[1:].T[None]
    return J


def bending_energy(params):
    """Sum over output axes of ``w^T K w``; zero for purely affine maps."""
    K = KERNELS[params.kernel](_pairwise_sq_dist(params.source.points, params.source.points))
    W = params.rbf_weights
    return float(np.sum(W * (K @ W)))


def invert_points(params, Y, tol=1e-12, max_iter=50):
    """Solve ``evaluate_tps(params, X) == Y`` for X by Newton iteration."""
    y = np.atleast_2d(np.asarray(Y, dtype=float))
    x = y - (evaluate_tps(params, y) - y)
    for _ in range(max_iter):
        r = evaluate_tps(params, x) - y
        if np.max(np.abs(r)) < tol:
            break
        J = tps_jacobian(params, x)
        x = x - np.linalg.solve(J, r[..., None])[..., 0]
    else:
        r = evaluate_tps(params, x) - y
        if np.max(np.abs(r)) > 1e-8:
            raise NumericalError("spline inversion did not converge; is the map folding?")
    return x


def invert_tps(params, grid=None):
    """Spline on ``grid`` that undoes ``params`` exactly at its control points."""
    grid = grid or params.source
    return solve_tps(grid, invert_points(params, grid.points), params.kernel)


def normalized_pixel_coords(height, width):
    """(H*W, 2) array of normalized (x, y) for every pixel, row-major."""
    gx, gy = np.meshgrid(np.linspace(-1.0, 1.0, width), np.linspace(-1.0, 1.0, height))
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True, eq=False)
class WarpField:
    """Backward map: source sampling coordinate (normalized) per target pixel."""

    width: int
    height: int
    map: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.map.shape != (self.height, self.width, 2):
            raise InvalidArgumentError("warp map shape does not match its dimensions")
        if not np.all(np.isfinite(self.map)):
            raise NumericalError("warp map contains non-finite coordinates")


def warp_field(params, height, width):
    coords = evaluate_tps(params, normalized_pixel_coords(height, width))
    return WarpField(width, height, coords.reshape(height, width, 2))


def _check_image(img):
    arr = np.asarray(img, dtype=float)
    if arr.ndim not in (2, 3) or arr.size == 0:
        raise InvalidArgumentError(f"image must be a non-empty HxW or HxWxC array, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise InvalidArgumentError(f"image must be at least 2x2, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("image contains non-finite values")
    return arr


def sample_bilinear(img, coords):
    """Bilinearly sample ``img`` at normalized ``coords`` (..., 2) with zero padding.

    Returns ``(values, in_bounds)``. A sample is in bounds when its pixel
    coordinate lies inside ``[0, W-1] x [0, H-1]``.
    """
    h, w = img.shape[:2]
    u = (coords[..., 0] + 1.0) * (0.5 * (w - 1))
    v = (coords[..., 1] + 1.0) * (0.5 * (h - 1))
    ru, rv = np.rint(u), np.rint(v)
    u = np.where(np.abs(u - ru) < SNAP_TOL, ru, u)
    v = np.where(np.abs(v - rv) < SNAP_TOL, rv, v)
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    out = np.zeros(u.shape + img.shape[2:])
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if img.ndim == 3:
                valid = valid[..., None]
            out = out + np.where(valid, wx * wy * vals, 0.0)
    return out, inside


def warp_image(img, params):
    """Resample ``img`` through the spline; output has the input's shape."""
    arr = _check_image(img)
    h, w = arr.shape[:2]
    out, _ = sample_bilinear(arr, warp_field(params, h, w).map)
    return out


class TpsWarpOperator:
    """Precomputed linear map from target points to a dense warp field.

    For a fixed source grid and image size the sampling coordinates are linear
    in the targets Q, so ``field(Q)`` equals ``warp_field(solve_tps(grid, Q))``
    up to roundoff at a fraction of the cost. Used by the optimizer's inner loop.
    """

    def __init__(self, grid, height, width, kernel="d2logd2"):
        self.grid = grid
        self.height = height
        self.width = width
        self.kernel = kernel
        n = grid.n
        L = assemble_tps_system(grid, grid.points, kernel).L
        self._Linv = np.linalg.pinv(L, rcond=1e-13)[:, :n]
        X = normalized_pixel_coords(height, width)
        basis = np.hstack([KERNELS[kernel](_pairwise_sq_dist(X, grid.points)), _augment(X)])
        self._M = basis @ self._Linv  # (H*W, N)
        self._K = L[:n, :n]

    def field(self, targets):
        return (self._M @ targets).reshape(self.height, self.width, 2)

    def column(self, i):
        """Field contribution of a unit move of target ``i`` (same for x and y)."""
        return self._M[:, i].reshape(self.height, self.width)

    def bending_energy(self, targets):
        W = self._Linv[: self.grid.n] @ targets
        return float(np.sum(W * (self._K @ W)))

    def params(self, targets):
        return solve_tps(self.grid, targets, self.kernel)
