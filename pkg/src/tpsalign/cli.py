"""Command-line front end.

Exit codes: 0 success, 1 usage or invalid input, 2 file I/O, 3 numerical failure.
All randomness comes from ``--seed``; repeated runs write identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import jsonio
from .alignment import AlignConfig, align_images
from .errors import DegenerateGridError, ImageIOError, InvalidArgumentError, NumericalError
from .fusion.model import GRAD_BLOCKS, ToyConfig, grad_check, toy_forward
from .imageio import load_image, save_image
from .metrics import MetricReport
from .synth import apply_perturbation, inverse_displacements, sample_perturbation
from .tps import ControlPointGrid, TpsParameters, make_control_grid, solve_tps, warp_image

log = logging.getLogger("tpsalign")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------


def _read_json(path):
    try:
        return jsonio.load(path)
    except OSError as exc:
        raise ImageIOError(path, exc.strerror or str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from exc


def _read_grid(doc):
    if isinstance(doc, dict):
        return ControlPointGrid.from_dict(doc)
    pts = np.asarray(doc, dtype=float)
    if pts.ndim != 2:
        raise InvalidArgumentError("points must be a list of [x, y] pairs")
    return ControlPointGrid(pts, 1, pts.shape[0])


def _read_targets(doc):
    if isinstance(doc, dict):
        if "targets" not in doc:
            raise InvalidArgumentError("targets file must be a list of [x, y] pairs or hold a 'targets' key")
        doc = doc["targets"]
    return np.asarray(doc, dtype=float)


def _parse_grid(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InvalidArgumentError(f"--grid must look like 4x4, got {text!r}") from None
    return make_control_grid(rows, cols)


def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(path, exc.strerror or str(exc)) from exc
    return path


def _image_ext(path):
    ext = os.path.splitext(path)[1].lower()
    return ext if ext in (".pgm", ".png") else ".png"


def _config_doc(path):
    if path is None:
        return {}
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise InvalidArgumentError(f"{path}: config must be a JSON object")
    return doc


def _seeded(doc, seed):
    # an explicit --seed wins over the config file; otherwise default 0
    if seed is not None:
        doc["seed"] = seed
    doc.setdefault("seed", 0)
    return doc


# -- subcommands -------------------------------------------------------------


def cmd_solve(args):
    grid = _read_grid(_read_json(args.points))
    params = solve_tps(grid, _read_targets(_read_json(args.targets)))
    jsonio.dump(params.to_dict(), args.out)


def cmd_warp(args):
    params = TpsParameters.from_dict(_read_json(args.params))
    save_image(warp_image(load_image(args.image), params), args.out)


def cmd_align(args):
    doc = _seeded(_config_doc(args.config), args.seed)
    if args.lambda_bend is not None:
        doc["lambda_bend"] = args.lambda_bend
    if args.iters is not None:
        doc["max_iters"] = args.iters
    cfg = AlignConfig.from_dict(doc)
    grid = _parse_grid(args.grid)
    ref = load_image(args.ref)
    mov = load_image(args.mov)
    res = align_images(ref, mov, grid, cfg)
    out = _out_dir(args.out_dir)
    params = res.params
    jsonio.dump(res.displacements.to_dict(), os.path.join(out, "displacements.json"))
    jsonio.dump(params.to_dict(), os.path.join(out, "params.json"))
    jsonio.dump(
        {
            "initial_objective": res.initial_objective,
            "final_objective": res.final_objective,
            "evaluations": res.evaluations,
            "config": dataclasses.asdict(cfg),
        },
        os.path.join(out, "report.json"),
    )
    save_image(warp_image(mov, params), os.path.join(out, "warped" + _image_ext(args.mov)))


def cmd_synth(args):
    rgb = load_image(args.rgb)
    thermal = load_image(args.thermal)
    gt = (load_image(args.gt) >= 0.5).astype(float)
    if gt.ndim == 3:
        raise InvalidArgumentError(f"{args.gt}: ground truth must be single-channel")
    if rgb.shape[:2] != thermal.shape[:2]:
        raise InvalidArgumentError(f"rgb {rgb.shape[:2]} and thermal {thermal.shape[:2]} sizes differ")
    grid = _parse_grid(args.grid)
    spec = sample_perturbation(args.seed, args.magnitude, grid)
    warped, gt_warped, params = apply_perturbation(thermal, gt, spec)
    out = _out_dir(args.out_dir)
    ext = _image_ext(args.thermal)
    save_image(rgb, os.path.join(out, "rgb" + _image_ext(args.rgb)))
    save_image(warped, os.path.join(out, "thermal" + ext))
    save_image(gt, os.path.join(out, "gt.pgm"))
    save_image(gt_warped, os.path.join(out, "gt_thermal.pgm"))
    doc = {
        "spec": spec.to_dict(),
        "params": params.to_dict(),
        "alignment_target": inverse_displacements(params, grid).to_dict(),
    }
    jsonio.dump(doc, os.path.join(out, "spec.json"))


def _manifest_rows(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ImageIOError(path, exc.strerror or str(exc)) from exc
    if rows and [c.strip() for c in rows[0][:2]] == ["pred_path", "gt_path"]:
        rows = rows[1:]
    for n, r in enumerate(rows, 1):
        if len(r) < 2:
            raise InvalidArgumentError(f"{path}: row {n} needs pred_path,gt_path")
        pred, gt = (os.path.join(base, c.strip()) for c in r[:2])
        yield pred, gt


def _gray(img, path):
    if img.ndim == 3:
        raise InvalidArgumentError(f"{path}: expected a single-channel map")
    return img


def cmd_eval(args):
    report = MetricReport()
    for pred_path, gt_path in _manifest_rows(args.manifest):
        pred = _gray(load_image(pred_path), pred_path)
        gt = (_gray(load_image(gt_path), gt_path) >= 0.5).astype(float)
        name = os.path.splitext(os.path.basename(pred_path))[0]
        report.add(name, pred, gt)
    if not report.rows:
        raise InvalidArgumentError(f"{args.manifest}: manifest lists no images")
    try:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_csv())
    except OSError as exc:
        raise ImageIOError(args.out, exc.strerror or str(exc)) from exc


def cmd_toy_forward(args):
    doc = _seeded(_config_doc(args.config), args.seed)
    cfg = ToyConfig.from_dict(doc)
    pred, sums = toy_forward(cfg)
    checks = {b: grad_check(b, cfg.seed) for b in GRAD_BLOCKS}
    out = _out_dir(args.out_dir)
    save_image(pred, os.path.join(out, "prediction.pgm"))
    jsonio.dump({"config": cfg.to_dict(), "checksums": sums, "grad_check": checks}, os.path.join(out, "report.json"))


# -- parser ------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="tpsalign", description="TPS alignment, synthetic misalignment and saliency metrics.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    s = sub.add_parser("solve", help="fit a spline from control points to targets")
    s.add_argument("--points", required=True, help="grid JSON ({rows, cols, points}) or list of [x, y]")
    s.add_argument("--targets", required=True, help="list of [x, y] target points")
    s.add_argument("--out", required=True, help="output parameters JSON")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("warp", help="resample an image through saved spline parameters")
    s.add_argument("--image", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True, help=".pgm or .png")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("align", help="recover displacements warping --mov onto --ref")
    s.add_argument("--ref", required=True)
    s.add_argument("--mov", required=True)
    s.add_argument("--grid", default="4x4", help="control grid as RxC (default 4x4)")
    s.add_argument("--lambda", dest="lambda_bend", type=float, help="bending-energy weight")
    s.add_argument("--iters", type=int, help="coordinate sweeps per pyramid level")
    s.add_argument("--seed", type=int, help="overrides the config seed (default 0)")
    s.add_argument("--config", help="JSON object of optimizer settings")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("synth", help="misalign a thermal image and its mask with a random warp")
    s.add_argument("--rgb", required=True)
    s.add_argument("--thermal", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--class", dest="magnitude", choices=("weak", "strong"), default="weak")
    s.add_argument("--grid", default="4x4")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="F/S/E-measure over a pred_path,gt_path manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("toy-forward", help="run the toy fusion chain and gradient checks")
    s.add_argument("--config", help="JSON object of toy settings")
    s.add_argument("--seed", type=int, help="overrides the config seed (default 0)")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_toy_forward)
    return p


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ImageIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateGridError, NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
