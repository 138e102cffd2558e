"""Command-line interface: ``embryoreg <command> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__
from .affine import AffineTransform
from .atlas import AtlasSet, build_atlas, build_omega_mask, canonical_landmarks, load_atlas_set, save_atlas_set
from .errors import EmbryoRegError, InputError
from .fields import save_field
from .fusion import save_result
from .losses import LossWeights
from .optim import OptimConfig, register_pipeline, write_trace
from .phantom import GA_MAX, GA_MIN, PhantomSpec, _stream, apply_known_deformation, gen_phantom, random_similarity, smooth_velocity
from .suite import DEGRADED_CLUTTER, DEGRADED_NOISE
from .volume import Landmarks, load_mask, load_volume, preprocess, save_mask, save_volume

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("embryoreg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("input_error", "cli", message)
        sys.exit(EXIT_INPUT)


def _emit_error(code, stage, detail):
    sys.stderr.write(json.dumps({"error_code": code, "stage": stage, "detail": str(detail)}) + "\n")


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths):
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in sorted(os.walk(p)):
                for f in sorted(files):
                    full = os.path.join(root, f)
                    out[os.path.relpath(full, os.path.dirname(os.path.abspath(p)))] = _sha256(full)
        elif os.path.isfile(p):
            out[os.path.basename(p)] = _sha256(p)
    return out


def write_manifest(out_dir, command, config: dict, seed, inputs):
    import numba
    import scipy

    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": {"embryoreg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__, "python": platform.python_version()},
        "inputs": _digests(inputs),
    }
    _dump(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _jobs(args):
    env = os.environ.get("EMBRYOREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"EMBRYOREG_THREADS must be an integer, got {env!r}", stage="cli")
    return max(1, int(getattr(args, "jobs", 1) or 1))


# --------------------------------------------------------------------------
# phantom


def _phantom_gen(args):
    os.makedirs(args.out, exist_ok=True)
    dims = (args.dims,) * 3
    for k in range(args.count):
        rng = _stream(args.seed, k)
        ga = args.ga if args.ga is not None else int(rng.integers(GA_MIN, GA_MAX + 1))
        v, m, lms = gen_phantom(PhantomSpec(seed=args.seed + k, ga_days=ga, dims=dims,
                                            noise=args.noise, clutter=args.clutter))
        t = random_similarity(rng, dims) if args.pose else AffineTransform.identity()
        nu = smooth_velocity(rng, dims, args.deform) if args.deform > 0 else None
        v, m, lms, truth = apply_known_deformation(v, m, lms, t, nu)
        case = os.path.join(args.out, f"case{k:02d}")
        os.makedirs(case, exist_ok=True)
        save_volume(os.path.join(case, "image.mvol"), v)
        save_mask(os.path.join(case, "seg.mmask"), m, v.ga_days, lms)
        _dump(os.path.join(case, "landmarks.json"), lms.to_json())
        record = {"seed": args.seed + k, "ga_days": ga, "noise": args.noise, "clutter": args.clutter,
                  "affine": truth["affine"].to_json()["matrix"],
                  "affine_inverse": truth["affine_inverse"].to_json()["matrix"],
                  "velocity": None}
        if nu is not None:
            save_field(os.path.join(case, "truth_velocity.mfld"), nu)
            record["velocity"] = "truth_velocity.mfld"
        _dump(os.path.join(case, "truth.json"), record)
    return EXIT_OK


def _phantom_atlases(args):
    """Raw atlas scans (native pose) for ``atlas build``."""
    from .suite import ATLAS_GAS, ATLAS_SEED

    os.makedirs(args.out, exist_ok=True)
    dims = (args.dims,) * 3
    for i, pair in enumerate(ATLAS_GAS, start=1):
        bad = args.degraded == i
        for ga in pair:
            v, m, lms = gen_phantom(PhantomSpec(seed=ATLAS_SEED + i, ga_days=ga, dims=dims,
                                                noise=args.degraded_noise if bad else 0.0,
                                                clutter=args.degraded_clutter if bad else 0))
            sub = os.path.join(args.out, f"p{i}_ga{ga}")
            os.makedirs(sub, exist_ok=True)
            save_volume(os.path.join(sub, "image.mvol"), v)
            save_mask(os.path.join(sub, "seg.mmask"), m, ga, lms)
            _dump(os.path.join(sub, "meta.json"), {"pregnancy_id": str(i), "ga_days": ga})
    _dump(os.path.join(args.out, "canonical.json"), canonical_landmarks(args.dims).to_json())
    return EXIT_OK


# --------------------------------------------------------------------------
# atlas


def _atlas_build(args):
    if args.canonical:
        with open(args.canonical) as fh:
            canonical = Landmarks.from_json(json.load(fh))
    else:
        canonical = canonical_landmarks(args.dims)
    if not os.path.isdir(args.images):
        raise InputError(f"{args.images!r} is not a directory", stage="atlas")
    atlases = []
    for name in sorted(os.listdir(args.images)):
        sub = os.path.join(args.images, name)
        if not os.path.isfile(os.path.join(sub, "meta.json")):
            continue
        with open(os.path.join(sub, "meta.json")) as fh:
            meta = json.load(fh)
        v = load_volume(os.path.join(sub, "image.mvol"))
        m = load_mask(os.path.join(sub, "seg.mmask"))
        if v.ga_days is None and "ga_days" in meta:
            v = v.with_data(v.data, ga_days=int(meta["ga_days"]))
        if v.dims != (args.dims,) * 3:
            from .volume import preprocess_mask
            v, m = preprocess(v, args.dims), preprocess_mask(m, args.dims)
        atlases.append(build_atlas(name, meta["pregnancy_id"], v, m, canonical,
                                   meta.get("roll_reference")))
    if not atlases:
        raise InputError(f"no atlas images found under {args.images!r}", stage="atlas")
    omega = build_omega_mask(atlases, args.radius)
    save_atlas_set(args.out, AtlasSet(tuple(atlases), canonical, omega))
    write_manifest(args.out, "atlas build", {"radius": args.radius, "dims": args.dims}, None,
                   [p for p in (args.images, args.canonical) if p])
    return EXIT_OK


# --------------------------------------------------------------------------
# register


def _image_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "image.mvol")
    if not os.path.isfile(path):
        raise InputError(f"image {path!r} not found", stage="input")
    return path


def _register(args):
    image_file = _image_path(args.image)
    image = load_volume(image_file)
    atlas_set = load_atlas_set(args.atlas_dir)
    target = atlas_set.omega.dims
    if image.dims != target:
        if len(set(target)) != 1:
            raise InputError("atlas lattice must be cubic", stage="input")
        image = preprocess(image, target[0])
    weights = LossWeights(args.lambda_l, args.lambda_s, args.lambda_d, args.window)
    config = OptimConfig(lr_stage1=args.lr_stage1, lr_stage2=args.lr_stage2,
                         lr_nonrigid=args.lr_nonrigid, iters=args.iters,
                         iters_nonrigid=args.iters_nonrigid, control_grid=args.control_grid,
                         integration_grid=None if args.integration_grid == 0 else args.integration_grid,
                         svf_steps=args.svf_steps, seed=args.seed,
                         multi_start=args.multi_start, multi_start_iters=args.multi_start_iters)
    # the optimizers are deterministic; the seed is recorded for completeness
    np.random.seed(args.seed % (2 ** 32))
    res = register_pipeline(image, atlas_set, args.strategy, args.M, weights, config,
                            subject=args.subject, jobs=_jobs(args))
    os.makedirs(args.out, exist_ok=True)
    save_result(args.out, res)
    if args.trace:
        for stage, trace in res.info.get("traces", {}).items():
            write_trace(os.path.join(args.out, f"trace_{stage}.csv"), trace)
        for p in res.per_atlas:
            write_trace(os.path.join(args.out, "per_atlas", p.atlas_id, "trace_nonrigid.csv"), p.trace)
    run_config = {"strategy": args.strategy, "M": args.M, "subject": args.subject,
                  "weights": {"lambda_l": weights.lambda_l, "lambda_s": weights.lambda_s,
                              "lambda_d": weights.lambda_d, "window": weights.window},
                  "optim": config.to_json()}
    write_manifest(args.out, "register", run_config, args.seed, [image_file, args.atlas_dir])
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate / gradcheck


def _evaluate(args):
    from .metrics import evaluate

    preds = {}
    for item in args.pred:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.basename(os.path.normpath(item)), item
        if name in preds:
            raise InputError(f"duplicate run name {name!r}", stage="evaluate")
        preds[name] = path
    report = evaluate(preds, args.gt, args.out, plots=not args.no_plots)
    for run, r in sorted(report["runs"].items()):
        s = r["summary"]
        print(f"{run}\tmedian_dice={s['median_dice']:.4f}\tmedian_ev_error={s['median_ev_error']:.4f}")
    return EXIT_OK


def _gradcheck(args):
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.size, args.h, args.tol, args.seed)
    if args.out:
        _dump(args.out, report)
    for name, r in report["losses"].items():
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{name}\t{status}\tmax_rel_error={r['max_rel_error']:.3e}\tparams={r['n_params']}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="embryoreg", description="Multi-atlas registration and segmentation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic phantoms")
    phs = ph.add_subparsers(dest="phantom_command", required=True, parser_class=_Parser)
    g = phs.add_parser("gen", help="phantom images with ground truth")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ga", type=int, default=None, help="gestational age in days (random if omitted)")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--dims", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--clutter", type=int, default=0)
    g.add_argument("--pose", action="store_true", help="apply a random similarity pose")
    g.add_argument("--deform", type=float, default=0.0, help="max velocity of a smooth deformation")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_phantom_gen)
    a = phs.add_parser("atlases", help="raw atlas scans for 'atlas build'")
    a.add_argument("--dims", type=int, default=64)
    a.add_argument("--degraded", type=int, default=None, help="pregnancy to corrupt")
    a.add_argument("--degraded-noise", type=float, default=DEGRADED_NOISE)
    a.add_argument("--degraded-clutter", type=int, default=DEGRADED_CLUTTER)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_phantom_atlases)

    at = sub.add_parser("atlas", help="atlas sets")
    ats = at.add_subparsers(dest="atlas_command", required=True, parser_class=_Parser)
    b = ats.add_parser("build", help="align scans to the standard pose and write an atlas set")
    b.add_argument("--images", required=True)
    b.add_argument("--canonical", default=None)
    b.add_argument("--dims", type=int, default=64)
    b.add_argument("--radius", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_atlas_build)

    d = LossWeights()
    c = OptimConfig()
    r = sub.add_parser("register", help="register an image to an atlas set")
    r.add_argument("--image", required=True)
    r.add_argument("--atlas-dir", required=True)
    r.add_argument("--strategy", choices=("single", "multi", "ensemble"), default="multi")
    r.add_argument("--subject", default=None)
    r.add_argument("--M", type=int, default=4)
    r.add_argument("--lambda-l", type=float, default=d.lambda_l)
    r.add_argument("--lambda-s", type=float, default=d.lambda_s)
    r.add_argument("--lambda-d", type=float, default=d.lambda_d)
    r.add_argument("--window", type=int, default=d.window)
    r.add_argument("--iters", type=int, default=c.iters)
    r.add_argument("--iters-nonrigid", type=int, default=None)
    r.add_argument("--lr-stage1", type=float, default=c.lr_stage1)
    r.add_argument("--lr-stage2", type=float, default=c.lr_stage2)
    r.add_argument("--lr-nonrigid", type=float, default=c.lr_nonrigid)
    r.add_argument("--control-grid", type=int, default=c.control_grid)
    r.add_argument("--integration-grid", type=int, default=c.integration_grid,
                   help="lattice side for integration; 0 integrates at full resolution")
    r.add_argument("--svf-steps", type=int, default=c.svf_steps)
    r.add_argument("--multi-start", action="store_true",
                   help="try the 24 axis-aligned rotations first; allows images without landmarks")
    r.add_argument("--multi-start-iters", type=int, default=c.multi_start_iters)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--trace", action="store_true", help="write loss traces as CSV")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_register)

    e = sub.add_parser("evaluate", help="Dice, EV error and Wilcoxon tests against ground truth")
    e.add_argument("--pred", action="append", required=True, metavar="[NAME=]DIR",
                   help="directory of per-case results; repeat to compare runs")
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    gc.add_argument("--size", type=int, default=16)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", default=None)
    gc.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmbryoRegError as exc:
        _emit_error(exc.error_code, exc.stage or args.command, exc.detail)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _emit_error("input_error", args.command, exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
