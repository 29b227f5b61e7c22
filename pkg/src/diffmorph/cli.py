"""Command-line surface: dataset synthesis, training, registration,
eta-interpolation, generation, and evaluation.

Exit codes are a stable contract for scripting:
  0 success, 2 usage/config error, 3 I/O error, 4 numerical failure,
  5 model/shape mismatch.
"""

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import nets as nets_mod
from . import schedule as sched_mod
from . import tensor as T
from . import train as train_mod
from . import warp as warp_mod
from .tensor import Tensor

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MODEL = 5


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_checkpoint(path):
    if not os.path.isfile(path):
        raise CommandError(EXIT_IO, "%s: no such checkpoint" % path)
    try:
        return train_mod.load_checkpoint(path)
    except OSError as e:
        raise CommandError(EXIT_IO, str(e))
    except ValueError as e:
        raise CommandError(EXIT_MODEL, str(e))


def _load_image(path):
    """A DMT image as [1,1,H,W]; accepts bare [H,W] files."""
    if not os.path.isfile(path):
        raise CommandError(EXIT_IO, "%s: no such file" % path)
    try:
        arr = data_mod.load_tensor(path)
    except (OSError, ValueError) as e:
        raise CommandError(EXIT_IO, str(e))
    if arr.ndim == 2:
        arr = arr.reshape((1, 1) + arr.shape)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 1:
        raise CommandError(EXIT_MODEL, "%s: expected a single 2-D image, "
                           "got shape %s" % (path, tuple(arr.shape)))
    return Tensor(arr)


def _check_pair_shapes(m, f):
    if m.shape != f.shape:
        raise CommandError(EXIT_MODEL, "moving %s and fixed %s differ"
                           % (tuple(m.shape), tuple(f.shape)))
    h, w = m.shape[2], m.shape[3]
    # three stride-2 stages in the networks
    if h % 8 or w % 8:
        raise CommandError(EXIT_MODEL, "image extents must be multiples "
                           "of 8, got %dx%d" % (h, w))


def _save(fn, path, *payload):
    try:
        fn(path, *payload)
    except OSError as e:
        raise CommandError(EXIT_IO, str(e))


# ----------------------------------------------------------------- commands

def _cmd_synth_data(args):
    if args.count < 0:
        raise CommandError(EXIT_USAGE, "--count must be >= 0")
    try:
        data_mod.write_dataset(args.out, n_pairs=args.count, size=args.size,
                               smoothness=args.blur, magnitude=args.max_mag,
                               seed=args.seed)
    except ValueError as e:
        raise CommandError(EXIT_USAGE, str(e))
    except OSError as e:
        raise CommandError(EXIT_IO, str(e))
    return 0


def _cmd_train(args):
    try:
        config = train_mod.load_config(args.config)
    except FileNotFoundError:
        raise CommandError(EXIT_IO, "%s: no such config file" % args.config)
    except OSError as e:
        raise CommandError(EXIT_IO, str(e))
    except ValueError as e:
        raise CommandError(EXIT_USAGE, str(e))
    if args.resume is not None and not os.path.isfile(args.resume):
        raise CommandError(EXIT_IO, "%s: no such checkpoint" % args.resume)
    try:
        final = train_mod.train(config, resume=args.resume)
    except train_mod.NonFiniteLoss as e:
        raise CommandError(EXIT_NUMERIC, str(e))
    except FileNotFoundError as e:
        raise CommandError(EXIT_IO, str(e))
    except ValueError as e:
        # checkpoint errors carry their path; everything else is config
        code = (EXIT_MODEL if args.resume is not None
                and str(e).startswith(args.resume) else EXIT_USAGE)
        raise CommandError(code, str(e))
    print(final)
    return 0


def _cmd_register(args):
    model, _ = _load_checkpoint(args.checkpoint)
    m = _load_image(args.moving)
    f = _load_image(args.fixed)
    _check_pair_shapes(m, f)
    try:
        field, warped = nets_mod.register(model.G, model.M, m, f)
    except ValueError as e:
        raise CommandError(EXIT_MODEL, str(e))
    _save(data_mod.save_field, args.out_field, field.data[0])
    _save(data_mod.save_tensor, args.out_warped, warped.data[0, 0])
    if args.report is not None:
        sample = data_mod.PairSample(m=m, f=f)
        try:
            rep = metrics_mod.evaluate_pair(
                sample, field, pair=os.path.basename(args.moving))
        except ValueError as e:
            raise CommandError(EXIT_NUMERIC, str(e))
        _save(metrics_mod.write_report, args.report, [rep])
    return 0


def _default_etas():
    return ",".join("%g" % (i / 10.0) for i in range(11))


def _parse_etas(text):
    parts = [p for p in text.split(",") if p.strip() != ""]
    if not parts:
        raise CommandError(EXIT_USAGE, "--etas: empty list")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise CommandError(EXIT_USAGE, "--etas: could not parse %r" % text)
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise CommandError(EXIT_USAGE,
                               "--etas: %g outside [0, 1]" % v)
    return vals


def _cmd_interpolate(args):
    model, _ = _load_checkpoint(args.checkpoint)
    etas = _parse_etas(args.etas)
    m = _load_image(args.moving)
    f = _load_image(args.fixed)
    _check_pair_shapes(m, f)
    try:
        os.makedirs(args.out_dir, exist_ok=True)
    except OSError as e:
        raise CommandError(EXIT_IO, str(e))
    # one score evaluation; each eta only rescales the latent, so the
    # eta=1 entry reproduces the register command bit for bit
    with T.no_grad():
        eps0 = model.G((m, f), f, 0)
        for eta in etas:
            latent = eps0 * float(eta)
            field = model.M(m, latent)
            warped = warp_mod.warp(m, field)
            base = os.path.join(args.out_dir, "eta_%g" % eta)
            _save(data_mod.save_field, base + ".field.dmt", field.data[0])
            _save(data_mod.save_tensor, base + ".warped.dmt",
                  warped.data[0, 0])
            _save(data_mod.save_image, base + ".warped.pgm",
                  warped.data[0, 0])
    return 0


def _cmd_generate(args):
    model, meta = _load_checkpoint(args.checkpoint)
    sched = meta["schedule"]
    if not 1 <= args.t_forward <= sched.T:
        raise CommandError(EXIT_USAGE, "--t-forward must be in [1, %d], "
                           "got %d" % (sched.T, args.t_forward))
    if not 1 <= args.steps <= args.t_forward:
        raise CommandError(EXIT_USAGE, "--steps must be in [1, %d], got %d"
                           % (args.t_forward, args.steps))
    m = _load_image(args.moving)
    f = _load_image(args.fixed)
    _check_pair_shapes(m, f)

    def score(md, fd, xd, t):
        with T.no_grad():
            return model.G((Tensor(md), Tensor(fd)), Tensor(xd), t).data

    traj = [] if args.save_trajectory else None
    out = sched_mod.generate(m.data, f.data, score, sched, T=args.t_forward,
                             steps=args.steps, seed=args.seed,
                             trajectory=traj)
    _save(data_mod.save_tensor, args.out, out[0, 0])
    if traj is not None:
        base = args.out[:-4] if args.out.endswith(".dmt") else args.out
        for k, x in enumerate(traj):
            _save(data_mod.save_tensor, "%s.traj%03d.dmt" % (base, k),
                  x[0, 0])
    return 0


def _cmd_evaluate(args):
    model, meta = _load_checkpoint(args.checkpoint)
    try:
        samples = data_mod.load_dataset(args.data)
    except (FileNotFoundError, OSError, ValueError) as e:
        raise CommandError(EXIT_IO, str(e))
    cfg = meta["config"]
    w = losses_mod.LossWeights(lam=cfg.lam, lambda_phi=cfg.lambda_phi,
                               ncc_window=cfg.ncc_window)
    reports = []
    baseline = [] if args.baseline is not None else None
    for i, s in enumerate(samples):
        name = "%04d" % i
        try:
            field, _ = nets_mod.register(model.G, model.M, s.m, s.f)
        except ValueError as e:
            raise CommandError(EXIT_MODEL, "pair %s: %s" % (name, e))
        try:
            reports.append(metrics_mod.evaluate_pair(s, field, pair=name))
            if baseline is not None:
                bf = train_mod.classical_register(s.m, s.f, w,
                                                  iters=args.iters)
                baseline.append(metrics_mod.evaluate_pair(s, bf, pair=name))
        except ValueError as e:
            raise CommandError(EXIT_NUMERIC, "pair %s: %s" % (name, e))
    _save(metrics_mod.write_report, args.out, reports, baseline)
    print(args.out)
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="diffmorph",
        description="diffusion-conditioned deformable image registration")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data",
                        help="generate a synthetic pair dataset")
    sd.add_argument("--out", required=True, help="dataset directory")
    sd.add_argument("--count", type=int, default=200)
    sd.add_argument("--size", type=int, default=32)
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--blur", type=float, default=4.0,
                    help="deformation smoothness sigma")
    sd.add_argument("--max-mag", type=float, default=3.0,
                    help="peak displacement magnitude in voxels")
    sd.set_defaults(func=_cmd_synth_data)

    tr = sub.add_parser("train", help="train the joint model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", default=None,
                    help="continue from a checkpoint")
    tr.set_defaults(func=_cmd_train)

    rg = sub.add_parser("register", help="one-shot registration")
    rg.add_argument("--checkpoint", required=True)
    rg.add_argument("--moving", required=True)
    rg.add_argument("--fixed", required=True)
    rg.add_argument("--out-field", required=True)
    rg.add_argument("--out-warped", required=True)
    rg.add_argument("--report", default=None,
                    help="optional one-row metric CSV")
    rg.set_defaults(func=_cmd_register)

    it = sub.add_parser("interpolate",
                        help="continuous registration over an eta grid")
    it.add_argument("--checkpoint", required=True)
    it.add_argument("--moving", required=True)
    it.add_argument("--fixed", required=True)
    it.add_argument("--etas", default=_default_etas(),
                    help="comma-separated eta values in [0, 1]")
    it.add_argument("--out-dir", required=True)
    it.set_defaults(func=_cmd_interpolate)

    gn = sub.add_parser("generate",
                        help="synthesize a deformed image by truncated "
                             "reverse diffusion")
    gn.add_argument("--checkpoint", required=True)
    gn.add_argument("--moving", required=True)
    gn.add_argument("--fixed", required=True)
    gn.add_argument("--t-forward", type=int, default=200)
    gn.add_argument("--steps", type=int, default=80)
    gn.add_argument("--seed", type=int, default=0)
    gn.add_argument("--out", required=True)
    gn.add_argument("--save-trajectory", action="store_true",
                    help="dump every intermediate state next to --out")
    gn.set_defaults(func=_cmd_generate)

    ev = sub.add_parser("evaluate", help="metric report over a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="report CSV path")
    ev.add_argument("--baseline", choices=("classical",), default=None)
    ev.add_argument("--iters", type=int, default=300,
                    help="baseline optimization iterations")
    ev.set_defaults(func=_cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    try:
        return args.func(args)
    except CommandError as e:
        print("diffmorph: %s" % e, file=sys.stderr)
        return e.code
    except train_mod.NonFiniteLoss as e:
        print("diffmorph: %s" % e, file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print("diffmorph: %s" % e, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
