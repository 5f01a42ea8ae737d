"""Toy configuration, seeded weights, the full forward chain and gradient checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import InvalidArgumentError
from ..synth import perturbation_params, sample_perturbation
from ..tps import make_control_grid, warp_image
from . import blocks as B
from .layers import linear

LEVELS = (2, 3, 4)
FD_STEP = 1e-4
MAX_CHECKED = 200
GRAD_BLOCKS = ("linear", "sccm", "tpsam-fc", "cmcm", "decode", "loss")


@dataclass(frozen=True)
class ToyConfig:
    channels: tuple = (16, 24, 32)  # levels 2, 3, 4
    input_size: int = 64
    grid: tuple = (4, 4)
    state_dim: int = 4
    groups: int = 4
    win: int = 4
    decoder_width: int = 16
    max_disp: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise InvalidArgumentError("channels must list three positive widths for levels 2, 3, 4")
        if any(c % self.groups for c in self.channels):
            raise InvalidArgumentError(f"every channel width must be divisible by groups={self.groups}")
        # the coarsest level is input/16 and must be even and divisible by the window
        top = self.input_size // 16
        if self.input_size % 16 or top % 2 or top % self.win:
            raise InvalidArgumentError(f"input_size {self.input_size} incompatible with window {self.win}")
        if len(self.grid) != 2 or self.state_dim < 1 or self.decoder_width < 1 or not self.max_disp > 0:
            raise InvalidArgumentError("invalid grid, state_dim, decoder_width or max_disp")

    def size(self, i):
        return self.input_size // 2**i

    def width(self, i):
        return self.channels[LEVELS.index(i)]

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown toy config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["grid"] = list(self.grid)
        return d


# -- initialization ----------------------------------------------------------


class _Init:
    """Fills a weight dict in a fixed order from one seeded generator."""

    def __init__(self, seed, state_dim, groups):
        self.rng = np.random.default_rng(seed)
        self.w = {}
        self.state_dim = state_dim
        self.groups = groups

    def _u(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def linear(self, name, cin, cout):
        self.w[f"{name}.W"] = self._u((cin, cout), cin)
        self.w[f"{name}.b"] = np.zeros(cout)

    def ln(self, name, c):
        self.w[f"{name}.g"] = np.ones(c)
        self.w[f"{name}.b"] = np.zeros(c)

    def dwc(self, name, c, bias=True):
        self.w[f"{name}.k"] = self._u((3, 3, c), 9)
        if bias:
            self.w[f"{name}.b"] = np.zeros(c)

    def conv(self, name, cin, cout):
        self.w[f"{name}.W"] = self._u((3, 3, cin, cout), 9 * cin)
        self.w[f"{name}.b"] = np.zeros(cout)

    def scan(self, name, c):
        d = self.state_dim
        self.w[f"{name}.A"] = self.rng.uniform(0.5, 0.99, size=(c, d))
        self.w[f"{name}.B"] = self._u((c, d), d)
        self.w[f"{name}.C"] = self._u((c, d), d)

    def sge(self, name):
        self.w[f"{name}.scale"] = np.ones(self.groups)
        self.w[f"{name}.shift"] = np.zeros(self.groups)

    def sccm(self, c, c_out, p="sccm"):
        for m in ("rgb", "t"):
            self.dwc(f"{p}.dem_{m}", c, bias=False)
            self.ln(f"{p}.ln_{m}", c)
            self.linear(f"{p}.lp_{m}", c, c)
            self.dwc(f"{p}.dwc_{m}", c)
            self.ln(f"{p}.gln_{m}", c)
            self.linear(f"{p}.glp_{m}", c, c)
        self.scan(f"{p}.scan", c)
        self.linear(f"{p}.lp_out", c, c_out)
        self.sge(f"{p}.sge")

    def tpsam(self, p, c, n_points):
        for m in ("rgb", "t"):
            self.ln(f"{p}.ln_{m}", c)
            self.scan(f"{p}.scan_{m}", c)
            self.sge(f"{p}.sge_{m}")
        self.linear(f"{p}.fc", 2 * c, 2 * n_points)

    def cmcm(self, p, c):
        for m in ("rgb", "t"):
            self.dwc(f"{p}.dem_{m}", c, bias=False)
            self.ln(f"{p}.ln_{m}", c)
            self.linear(f"{p}.lp_{m}", c, c)
            self.dwc(f"{p}.dwc_{m}", c)
            self.ln(f"{p}.gln_{m}", c)
            self.linear(f"{p}.glp_{m}", c, c)
        self.scan(f"{p}.scan", c)
        for m in ("rgb", "t"):
            self.linear(f"{p}.lpo_{m}", c, c)
            self.sge(f"{p}.sge_{m}")

    def decode(self, widths, cd, p="decode"):
        for i, c in zip(LEVELS, widths):
            self.conv(f"{p}.fuse{i}", 2 * c, cd)
        for i in (3, 2):
            self.conv(f"{p}.td{i}", cd, cd)
        self.linear(f"{p}.head", cd, 1)


def freeze(w):
    for v in w.values():
        v.setflags(write=False)
    return w


def init_weights(cfg):
    """All toy weights, deterministic in ``cfg.seed``."""
    init = _Init(cfg.seed, cfg.state_dim, cfg.groups)
    top = cfg.width(4)
    n_points = cfg.grid[0] * cfg.grid[1]
    init.sccm(top, top)
    for i in LEVELS:
        init.conv(f"guide{i}.conv", top, cfg.width(i))
    for i in LEVELS:
        init.tpsam(f"tpsam{i}", cfg.width(i), n_points)
        init.cmcm(f"cmcm{i}", cfg.width(i))
    init.decode(cfg.channels, cfg.decoder_width)
    return freeze(init.w)


def synthetic_pyramids(cfg):
    """Random RGB features per level; thermal features are a weakly warped copy plus noise."""
    rng = np.random.default_rng(cfg.seed + 1)
    grid = make_control_grid(*cfg.grid)
    warp = perturbation_params(sample_perturbation(cfg.seed, "weak", grid), grid)
    rgb, thermal = {}, {}
    for i in LEVELS:
        s, c = cfg.size(i), cfg.width(i)
        rgb[i] = rng.standard_normal((s, s, c))
        thermal[i] = warp_image(rgb[i], warp) + 0.1 * rng.standard_normal((s, s, c))
    return rgb, thermal


def checksum(x):
    x = np.asarray(x, dtype=float)
    return {"shape": list(x.shape), "sum": float(x.sum()), "sum_sq": float((x * x).sum())}


def toy_forward(cfg, weights=None):
    """Run SCCM, guidance, TPSAM, CMCM and the decoder on synthetic pyramids.

    Returns the prediction map and a dict of per-block output checksums.
    """
    w = weights if weights is not None else init_weights(cfg)
    grid = make_control_grid(*cfg.grid)
    rgb, thermal = synthetic_pyramids(cfg)
    sums = {}
    sgf = B.sccm_forward(rgb[4], thermal[4], w)
    sums["sccm"] = checksum(sgf)
    fused = []
    for i in LEVELS:
        fr = B.guide_features(sgf, rgb[i], i, w)
        ft = B.guide_features(sgf, thermal[i], i, w)
        sums[f"guide{i}"] = checksum(fr)
        d, A_t = B.tpsam_forward(fr, ft, w, grid, p=f"tpsam{i}", max_disp=cfg.max_disp, win=cfg.win)
        sums[f"tpsam{i}.deltas"] = checksum(d.deltas)
        sums[f"tpsam{i}.aligned"] = checksum(A_t)
        pair = B.cmcm_forward(fr, A_t, w, prefix=f"cmcm{i}")
        sums[f"cmcm{i}"] = checksum(np.stack(pair))
        fused.append(pair)
    pred = B.decode(fused, w, out_factor=2 ** LEVELS[0])
    sums["decode"] = checksum(pred)
    return pred, sums


# -- gradient checking -------------------------------------------------------


def _small_cfg():
    return ToyConfig(channels=(4, 6, 8), state_dim=3, groups=2, decoder_width=4)


def _probe(rng, shapes):
    return [rng.standard_normal(s) for s in shapes]


def _setup(block, seed):
    """Return (params, forward(params) -> scalar, analytic grads)."""
    rng = np.random.default_rng(seed)
    cfg = _small_cfg()
    if block == "linear":
        x = rng.standard_normal((5, 5, 6))
        params = {"lp.W": rng.uniform(-1, 1, (6, 4)), "lp.b": rng.uniform(-1, 1, 4)}
        R = rng.standard_normal((5, 5, 4))

        def f(p):
            y, back = linear(x, p["lp.W"], p["lp.b"])
            return float((R * y).sum()), back

        return params, f, lambda back: back(R)[1]
    if block == "loss":
        gt = (rng.uniform(size=(8, 8)) < 0.4).astype(float)
        params = {"pred": rng.uniform(0.05, 0.95, (8, 8))}

        def f(p):
            terms, grad = B.loss_terms(p["pred"], gt)
            return sum(terms.values()), grad

        return params, f, lambda grad: {"pred": grad}

    init = _Init(seed, cfg.state_dim, cfg.groups)
    c = 8
    if block == "sccm":
        init.sccm(c, c)
        x1, x2 = rng.standard_normal((2, 8, 8, c))
        R = rng.standard_normal((8, 8, c))

        def f(p):
            y, back = B.sccm_fwd(x1, x2, p)
            return float((R * y).sum()), back

        return init.w, f, lambda back: back(R)[1]
    if block == "tpsam-fc":
        grid = make_control_grid(*cfg.grid)
        init.tpsam("tpsam", c, grid.n)
        x1, x2 = rng.standard_normal((2, 8, 8, c))
        R = rng.standard_normal((grid.n, 2))

        def f(p):
            d, back = B.tpsam_fc_fwd(x1, x2, p, "tpsam", grid, cfg.max_disp, cfg.win)
            return float((R * d).sum()), back

        return init.w, f, lambda back: back(R)[1]
    if block == "cmcm":
        init.cmcm("cmcm", c)
        x1, x2 = rng.standard_normal((2, 8, 8, c))
        R1, R2 = rng.standard_normal((2, 8, 8, c))

        def f(p):
            (y1, y2), back = B.cmcm_fwd(x1, x2, p)
            return float((R1 * y1).sum() + (R2 * y2).sum()), back

        return init.w, f, lambda back: back(R1, R2)[1]
    if block == "decode":
        init.decode(cfg.channels, cfg.decoder_width)
        levels = [tuple(rng.standard_normal((2, 8 // 2**k, 8 // 2**k, ch))) for k, ch in enumerate(cfg.channels)]
        R = rng.standard_normal((32, 32))

        def f(p):
            y, back = B.decode_fwd(levels, p)
            return float((R * y).sum()), back

        return init.w, f, lambda back: back(R)[1]
    raise InvalidArgumentError(f"unknown block {block!r}; choose from {GRAD_BLOCKS}")


def grad_check(block, seed=0, step=FD_STEP, max_params=MAX_CHECKED):
    """Max relative error between analytic and central-difference parameter gradients.

    The probe is a fixed random weighting of the block outputs (``loss_total``
    itself for ``"loss"``, differentiated with respect to the prediction).
    """
    params, f, analytic = _setup(block, seed)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    _, ctx = f(params)
    grads = analytic(ctx)
    index = [(k, j) for k in sorted(params) for j in range(params[k].size)]
    rng = np.random.default_rng(seed + 7919)
    if len(index) > max_params:
        index = [index[i] for i in sorted(rng.choice(len(index), max_params, replace=False))]
    worst = 0.0
    for k, j in index:
        flat = params[k].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up, _ = f(params)
        flat[j] = orig - step
        down, _ = f(params)
        flat[j] = orig
        num = (up - down) / (2 * step)
        ana = float(grads[k].reshape(-1)[j]) if k in grads else 0.0
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, err)
    return worst


