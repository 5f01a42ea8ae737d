"""Fusion blocks: DEM, SGE, SCCM, guidance, TPSAM, CMCM, decoder and loss.

Each ``*_fwd`` function returns outputs plus a ``back`` closure giving
gradients for every weight it read. Weights live in one flat dict keyed
``"<block>.<layer>.<param>"``; blocks receive it whole and read their own
prefix.
"""

from __future__ import annotations

import numpy as np

from ..alignment import Displacements
from ..errors import InvalidArgumentError
from ..tps import solve_tps, warp_image
from . import layers as L
from .layers import chain, merge
from .scan import es2d_fwd, lssm_fwd

SGE_EPS = 1e-5
BCE_EPS = 1e-7


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise InvalidArgumentError(f"{what}: shapes differ, {np.shape(a)} vs {np.shape(b)}")


def _scan_of(w, name):
    return w[f"{name}.A"], w[f"{name}.B"], w[f"{name}.C"]


# -- DEM / SGE ---------------------------------------------------------------


def dem_fwd(f, k, name="dem"):
    """Center-surround residual ``f + DWC(f - avgpool(f))`` with a bias-free DWC."""
    pooled, back_pool = L.avgpool3(f)
    diff, back_dwc = L.depthwise3(f - pooled, k, None, name)
    y = f + diff

    def back(dy):
        dd, grads = back_dwc(dy)
        return dy + dd - back_pool(dd)[0], grads

    return y, back


def dem(f, w, name="dem"):
    return dem_fwd(np.asarray(f, dtype=float), w[f"{name}.k"], name)[0]


def sge_fwd(x, groups, scale, shift, name="sge"):
    """Spatial group-wise enhancement: gate each group by its normalized similarity map."""
    h, wd, c = x.shape
    if groups < 1 or c % groups:
        raise InvalidArgumentError(f"sge: {c} channels not divisible into {groups} groups")
    xg = x.reshape(h, wd, groups, c // groups)
    m = xg.mean(axis=(0, 1))
    sim = (xg * m).sum(axis=-1)
    sc = sim - sim.mean(axis=(0, 1))
    inv = 1.0 / np.sqrt((sc * sc).mean(axis=(0, 1)) + SGE_EPS)
    n = sc * inv
    gate, _ = L.sigmoid(scale * n + shift)
    y = (xg * gate[..., None]).reshape(h, wd, c)

    def back(dy):
        dyg = dy.reshape(xg.shape)
        dxg = dyg * gate[..., None]
        dz = (dyg * xg).sum(axis=-1) * gate * (1.0 - gate)
        grads = {f"{name}.scale": (dz * n).sum(axis=(0, 1)), f"{name}.shift": dz.sum(axis=(0, 1))}
        dn = dz * scale
        dsim = inv * (dn - dn.mean(axis=(0, 1)) - n * (dn * n).mean(axis=(0, 1)))
        dxg = dxg + dsim[..., None] * m
        dm = (dsim[..., None] * xg).sum(axis=(0, 1))
        dxg = dxg + dm / (h * wd)
        return dxg.reshape(h, wd, c), grads

    return y, back


def sge(f, w, name="sge"):
    f = np.asarray(f, dtype=float)
    groups = w[f"{name}.scale"].shape[0]
    return sge_fwd(f, groups, w[f"{name}.scale"], w[f"{name}.shift"], name)[0]


def _sge_step(w, name):
    scale, shift = w[f"{name}.scale"], w[f"{name}.shift"]
    return lambda x: sge_fwd(x, scale.shape[0], scale, shift, name)


def _es2d_step(w, name):
    return lambda x: es2d_fwd(x, *_scan_of(w, name), name=name)


def _lssm_step(w, name, win):
    return lambda x: lssm_fwd(x, *_scan_of(w, name), win=win, name=name)


# -- SCCM --------------------------------------------------------------------


def _sccm_parts(F_rgb4, F_t4, w, p="sccm"):
    _same_shape(F_rgb4, F_t4, "sccm")
    branch = {}
    for m, F in (("rgb", F_rgb4), ("t", F_t4)):
        E, back_E = dem_fwd(F, w[f"{p}.dem_{m}.k"], f"{p}.dem_{m}")
        Hm, back_H = chain(E, [L.ln(w, f"{p}.ln_{m}"), L.lp(w, f"{p}.lp_{m}"), L.dwc(w, f"{p}.dwc_{m}"), L.silu])
        G, back_G = chain(E, [L.ln(w, f"{p}.gln_{m}"), L.lp(w, f"{p}.glp_{m}"), L.silu])
        branch[m] = (back_E, Hm, back_H, G, back_G)
    Hr, Ht = branch["rgb"][1], branch["t"][1]
    H = Hr + Ht + Hr * Ht
    S, back_S = es2d_fwd(H, *_scan_of(w, f"{p}.scan"), name=f"{p}.scan")
    Gr, Gt = branch["rgb"][3], branch["t"][3]
    H12 = S * Gr + S * Gt
    P, back_P = L.lp(w, f"{p}.lp_out")(H12)
    Q, back_Q = _sge_step(w, f"{p}.sge")(P)
    sgf = Q + P

    def back(dsgf):
        dP, grads = back_Q(dsgf)
        dP = dP + dsgf
        dH12, g = back_P(dP)
        merge(grads, g)
        dS = dH12 * (Gr + Gt)
        dG = {"rgb": dH12 * S, "t": dH12 * S}
        dH, g = back_S(dS)
        merge(grads, g)
        dHm = {"rgb": dH * (1.0 + Ht), "t": dH * (1.0 + Hr)}
        dF = {}
        for m in ("rgb", "t"):
            back_E, _, back_H, _, back_G = branch[m]
            dE1, g1 = back_H(dHm[m])
            dE2, g2 = back_G(dG[m])
            dF[m], g3 = back_E(dE1 + dE2)
            for g in (g1, g2, g3):
                merge(grads, g)
        return (dF["rgb"], dF["t"]), grads

    return H, sgf, back


def sccm_fwd(F_rgb4, F_t4, w):
    _, sgf, back = _sccm_parts(F_rgb4, F_t4, w)
    return sgf, back


def sccm_forward(F_rgb4, F_t4, w):
    """Saliency-guided map from the two top-level feature maps."""
    return _sccm_parts(np.asarray(F_rgb4, float), np.asarray(F_t4, float), w)[1]


def sccm_shared(F_rgb4, F_t4, w):
    """The shared representation ``H`` (exposed for the symmetry check)."""
    return _sccm_parts(np.asarray(F_rgb4, float), np.asarray(F_t4, float), w)[0]


def guide_features(sgf, F_i, i, w, name=None):
    """Gate level-``i`` features by the conv-adapted, upsampled guidance map."""
    if i not in (2, 3, 4):
        raise InvalidArgumentError(f"level must be 2, 3 or 4, got {i}")
    name = name or f"guide{i}.conv"
    factor = 2 ** (4 - i)
    sgf = np.asarray(sgf, dtype=float)
    F_i = np.asarray(F_i, dtype=float)
    if sgf.ndim != 3 or F_i.ndim != 3 or (sgf.shape[0] * factor, sgf.shape[1] * factor) != F_i.shape[:2]:
        raise InvalidArgumentError(
            f"guidance {sgf.shape[:2]} x {factor} does not match level-{i} features {F_i.shape[:2]}"
        )
    g, _ = L.conv(w, name)(sgf)
    if g.shape[2] != F_i.shape[2]:
        raise InvalidArgumentError(f"guide conv gives {g.shape[2]} channels, features have {F_i.shape[2]}")
    g, _ = L.upsample(g, factor)
    return g * F_i


# -- TPSAM -------------------------------------------------------------------


def tpsam_fc_fwd(Fh_rgb, Fh_t, w, p, grid, max_disp, win=4):
    """Displacements from the two enhanced maps: tanh-bounded FC over pooled features."""
    _same_shape(Fh_rgb, Fh_t, "tpsam")
    Wfc = w[f"{p}.fc.W"]
    if Wfc.shape[1] != 2 * grid.n:
        raise InvalidArgumentError(f"FC width {Wfc.shape[1]} does not match 2N = {2 * grid.n}")
    pooled, backs = [], []
    for m, F in (("rgb", Fh_rgb), ("t", Fh_t)):
        E, back_E = chain(F, [L.ln(w, f"{p}.ln_{m}"), _lssm_step(w, f"{p}.scan_{m}", win), _sge_step(w, f"{p}.sge_{m}")])
        g, back_g = L.gap(E)
        pooled.append(g)
        backs.append((back_E, back_g))
    v = np.concatenate(pooled)
    z, back_fc = L.linear(v, Wfc, w[f"{p}.fc.b"], f"{p}.fc")
    t, back_t = L.tanh(z)
    deltas = max_disp * t.reshape(grid.n, 2)

    def back(dd):
        dz, _ = back_t(max_disp * dd.reshape(-1))
        dv, grads = back_fc(dz)
        c = Fh_rgb.shape[2]
        douts = []
        for (back_E, back_g), dpart in zip(backs, (dv[:c], dv[c:])):
            dE, _ = back_g(dpart)
            dF, g = back_E(dE)
            merge(grads, g)
            douts.append(dF)
        return tuple(douts), grads

    return deltas, back


def tpsam_forward(Fh_rgb, Fh_t, w, grid, p="tpsam", max_disp=0.5, win=4):
    """Predict displacements and warp the thermal map into RGB coordinates."""
    Fh_rgb = np.asarray(Fh_rgb, dtype=float)
    Fh_t = np.asarray(Fh_t, dtype=float)
    deltas, _ = tpsam_fc_fwd(Fh_rgb, Fh_t, w, p, grid, max_disp, win)
    d = Displacements(deltas, grid)
    A_t = warp_image(Fh_t, solve_tps(grid, d.targets))
    return d, A_t


# -- CMCM --------------------------------------------------------------------


def cmcm_fwd(Fh_rgb, A_t, w, p="cmcm"):
    _same_shape(Fh_rgb, A_t, "cmcm")
    y, Z, bk = {}, {}, {}
    for m, F in (("rgb", Fh_rgb), ("t", A_t)):
        D, back_D = dem_fwd(F, w[f"{p}.dem_{m}.k"], f"{p}.dem_{m}")
        y[m], back_y = chain(
            D,
            [L.ln(w, f"{p}.ln_{m}"), L.lp(w, f"{p}.lp_{m}"), L.dwc(w, f"{p}.dwc_{m}"), L.silu, _es2d_step(w, f"{p}.scan")],
        )
        Z[m], back_Z = chain(D, [L.ln(w, f"{p}.gln_{m}"), L.lp(w, f"{p}.glp_{m}"), L.silu])
        bk[m] = (back_D, back_y, back_Z)
    s = y["rgb"] + y["t"]
    outs, out_backs = {}, {}
    for m, res in (("rgb", Fh_rgb), ("t", A_t)):
        o, b = chain(s * Z[m], [L.lp(w, f"{p}.lpo_{m}"), _sge_step(w, f"{p}.sge_{m}")])
        outs[m] = o + res
        out_backs[m] = b

    def back(d_rgb, d_t):
        grads = {}
        dres = {"rgb": d_rgb, "t": d_t}
        ds = 0.0
        dZ = {}
        for m in ("rgb", "t"):
            dprod, g = out_backs[m](dres[m])
            merge(grads, g)
            ds = ds + dprod * Z[m]
            dZ[m] = dprod * s
        dF = {}
        for m in ("rgb", "t"):
            back_D, back_y, back_Z = bk[m]
            dD1, g1 = back_y(ds)
            dD2, g2 = back_Z(dZ[m])
            dF[m], g3 = back_D(dD1 + dD2)
            for g in (g1, g2, g3):
                merge(grads, g)
            dF[m] = dF[m] + dres[m]
        return (dF["rgb"], dF["t"]), grads

    return (outs["rgb"], outs["t"]), back


def cmcm_forward(Fh_rgb, A_t, w, p=None, prefix="cmcm"):
    """Gated hidden-state fusion; ``p`` overrides the block's scan parameters."""
    if p is not None:
        w = dict(w)
        w.update({f"{prefix}.scan.A": p.A, f"{prefix}.scan.B": p.B, f"{prefix}.scan.C": p.C})
    return cmcm_fwd(np.asarray(Fh_rgb, float), np.asarray(A_t, float), w, prefix)[0]


# -- decoder -----------------------------------------------------------------


def decode_fwd(levels, w, p="decode", out_factor=4):
    """Fuse (rgb, t) pairs for levels 2..4 and decode top-down to a saliency map."""
    if len(levels) != 3:
        raise InvalidArgumentError(f"decode expects features for levels 2, 3, 4, got {len(levels)}")
    for (a, b), i in zip(levels, (2, 3, 4)):
        _same_shape(a, b, f"decode level {i}")
    sizes = [a.shape[:2] for a, _ in levels]
    for (h, wd), (h2, w2) in zip(sizes, sizes[1:]):
        if (h, wd) != (2 * h2, 2 * w2):
            raise InvalidArgumentError(f"decode pyramid sizes must halve per level, got {sizes}")
    S, fuse_backs = {}, {}
    for (a, b), i in zip(levels, (2, 3, 4)):
        S[i], fuse_backs[i] = L.conv(w, f"{p}.fuse{i}")(np.concatenate([a, b], axis=-1))
    x = S[4]
    td_backs = []
    for i in (3, 2):
        up, back_up = L.upsample(x, 2)
        x, back_c = L.conv(w, f"{p}.td{i}")(up + S[i])
        td_backs.append((i, back_up, back_c))
    logit, back_head = L.lp(w, f"{p}.head")(x)
    prob, back_sig = L.sigmoid(logit)
    out, back_out = L.upsample(prob, out_factor)
    pred = out[..., 0]

    def back(dpred):
        grads = {}
        d, _ = back_out(dpred[..., None])
        d, _ = back_sig(d)
        d, g = back_head(d)
        merge(grads, g)
        dS = {}
        for i, back_up, back_c in reversed(td_backs):
            dsum, g = back_c(d)
            merge(grads, g)
            dS[i] = dsum
            d, _ = back_up(dsum)
        dS[4] = d
        dlev = []
        for (a, _), i in zip(levels, (2, 3, 4)):
            dcat, g = fuse_backs[i](dS[i])
            merge(grads, g)
            c = a.shape[2]
            dlev.append((dcat[..., :c], dcat[..., c:]))
        return dlev, grads

    return pred, back


def decode(levels, w, p="decode", out_factor=4):
    levels = [(np.asarray(a, float), np.asarray(b, float)) for a, b in levels]
    return decode_fwd(levels, w, p, out_factor)[0]


# -- loss --------------------------------------------------------------------


def loss_terms(pred, gt):
    """BCE, Dice and edge-aware smoothness terms plus the gradient of their sum."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    _same_shape(pred, gt, "loss")
    if not np.all((gt == 0) | (gt == 1)):
        raise InvalidArgumentError("loss ground truth must be binary")
    n = pred.size
    p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
    inside = (pred > BCE_EPS) & (pred < 1 - BCE_EPS)
    bce = float(-np.mean(gt * np.log(p) + (1 - gt) * np.log(1 - p)))
    d_bce = np.where(inside, (p - gt) / (p * (1 - p)) / n, 0.0)

    num = 2 * np.sum(pred * gt) + 1
    den = np.sum(pred) + np.sum(gt) + 1
    dice = float(1 - num / den)
    d_dice = -(2 * gt * den - num) / den**2

    smooth = 0.0
    d_smooth = np.zeros_like(pred)
    for axis in (0, 1):
        if pred.shape[axis] < 2:
            continue
        dp = np.diff(pred, axis=axis)
        wgt = np.exp(-np.abs(np.diff(gt, axis=axis)))
        smooth += float(np.mean(np.abs(dp) * wgt))
        g = np.sign(dp) * wgt / dp.size
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        d_smooth[tuple(hi)] += g
        d_smooth[tuple(lo)] -= g
    return {"bce": bce, "dice": dice, "smooth": smooth}, d_bce + d_dice + d_smooth


def loss_total(pred, gt):
    terms, _ = loss_terms(pred, gt)
    return terms["bce"] + terms["dice"] + terms["smooth"]

