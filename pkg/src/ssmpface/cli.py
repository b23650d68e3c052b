"""Command-line front end: ``ssmpface {synth,preprocess,learn,evaluate}``."""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import FaceError

log = logging.getLogger("ssmpface")


def _common(parser, top=True):
    # on subcommands SUPPRESS keeps a flag given before the subcommand intact
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", metavar="PATH", default=d(None), help="INI config file")
    parser.add_argument("--seed", type=int, default=d(None), help="global RNG seed")
    parser.add_argument("--jobs", type=int, default=d(None), help="worker processes")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser():
    p = argparse.ArgumentParser(prog="ssmpface", description=__doc__)
    _common(p)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scan dataset")
    s.add_argument("out_dir")
    s.add_argument("--subjects", type=int, default=20)
    s.add_argument("--scans", type=int, default=4, help="scans per subject")
    s.add_argument("--size", type=int, default=None, help="grid size of each scan")
    s.add_argument("--noise", type=float, default=None)

    s = sub.add_parser("preprocess", help="extract, register and project scans")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s.add_argument("--dump-extraction-report", metavar="CSV")
    s.add_argument("--icp-max-iter", type=int)
    s.add_argument("--icp-tol", type=float)
    s.add_argument("--afm-grid", type=int, nargs=2, metavar=("R", "C"))
    s.add_argument("--crop-coverage", type=float)

    for name, helptext in (("learn", "learn the subspace off-line"),
                           ("evaluate", "run the recognition and verification protocol")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("signals_dir")
        s.add_argument("out_dir")
        s.add_argument("--dict-preset", choices=("paper", "desk"))
        s.add_argument("--num-atoms", type=int)
        s.add_argument("--encode-mode", choices=("mp", "ls"))
        if name == "learn":
            s.add_argument("--method", default="ssmp", choices=("ssmp", "ssmp+lda", "pca", "pca+lda"))
        else:
            s.add_argument("--methods", help="comma-separated, e.g. pca,ssmp,ssmp+lda")
            s.add_argument("--model", metavar="DIR", help="reuse a learned support")
            s.add_argument("--train-per-subject", type=int)
            s.add_argument("--repeats", type=int)
    # global flags are also accepted after the subcommand
    for action in sub.choices.values():
        _common(action, top=False)
    return p


def config_from_args(args):
    cfg = pipeline.load_config(args.config)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.jobs is not None:
        top["jobs"] = args.jobs
    get = lambda name: getattr(args, name, None)  # noqa: E731
    icp = {}
    if get("icp_max_iter") is not None:
        icp["max_iterations"] = args.icp_max_iter
    if get("icp_tol") is not None:
        icp["tolerance"] = args.icp_tol
    if icp:
        top["icp"] = dataclasses.replace(cfg.icp, **icp)
    reg = {}
    if get("afm_grid"):
        reg["afm_rows"], reg["afm_cols"] = args.afm_grid
    if get("crop_coverage") is not None:
        reg["crop_coverage"] = args.crop_coverage
    if reg:
        top["registration"] = dataclasses.replace(cfg.registration, **reg)
    if get("dict_preset"):
        top["dictionary"] = dataclasses.replace(cfg.dictionary, preset=args.dict_preset)
    ssmp = {}
    if get("num_atoms") is not None:
        ssmp["n_atoms"] = args.num_atoms
    if get("encode_mode"):
        ssmp["encode_mode"] = args.encode_mode
    if ssmp:
        top["ssmp"] = dataclasses.replace(cfg.ssmp, **ssmp)
    if get("methods"):
        top["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    ev = {}
    if get("train_per_subject") is not None:
        ev["train_per_subject"] = args.train_per_subject
    if get("repeats") is not None:
        ev["n_repeats"] = args.repeats
    if ev:
        top["eval"] = dataclasses.replace(cfg.eval, **ev)
    synth = {}
    if get("size") is not None:
        synth["size"] = args.size
    if get("noise") is not None:
        synth["noise"] = args.noise
    if synth:
        top["synth"] = dataclasses.replace(cfg.synth, **synth)
    return dataclasses.replace(cfg, **top) if top else cfg


def run(args):
    cfg = config_from_args(args)
    if args.command == "synth":
        manifest = pipeline.cmd_synth(args.subjects, args.scans, args.out_dir, cfg.synth, cfg.seed)
        print(f"wrote {args.subjects * args.scans} scans and {manifest}")
        return 0
    if args.command == "preprocess":
        res = pipeline.cmd_preprocess(args.manifest, args.out_dir, cfg, args.dump_extraction_report)
        print(f"processed {res.n_ok} scans, {len(res.errors)} errors")
        for sid, msg in sorted(res.errors.items()):
            print(f"  {sid}: {msg}", file=sys.stderr)
        return res.exit_code
    if args.command == "learn":
        model = pipeline.cmd_learn(args.signals_dir, args.out_dir, cfg, args.method)
        if model.energies is not None:
            print("residual energy trace:")
            for k, e in enumerate(model.energies, start=1):
                print(f"{k:4d} {e:.6g}")
        return 0
    if args.command == "evaluate":
        report = pipeline.cmd_evaluate(args.signals_dir, args.out_dir, cfg, args.model)
        print((Path(args.out_dir) / "summary.csv").read_text(), end="")
        return 0 if report.methods else 1
    raise AssertionError(args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (FaceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
