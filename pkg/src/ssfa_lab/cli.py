"""``ssfa-lab`` command line.

Training flags are generated from TrainConfig fields (``--lr-main``,
``--shared-count``, ...); ``--ssfa/--no-ssfa`` toggles ssfa_enabled.  On
failure the last stderr line reads ``error: <ExceptionType>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness, theory
from .aux_tasks import AuxTask
from .data import MixtureSpec, make_bundle, read_bundle, write_bundle
from .engine import TrainConfig, read_config_file, train, write_history
from .model import load_checkpoint, save_checkpoint

ALIASES = {"ssfa_enabled": "ssfa"}


def _add_bundle_flags(p):
    p.add_argument("--n-labeled", type=int, default=400)
    p.add_argument("--n-unlabeled", type=int, default=None)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--ratio", type=float, default=1.0)


def _add_config_flags(p):
    p.add_argument("--config", help="file of key = value TrainConfig settings; flags override it")
    for f in dataclasses.fields(TrainConfig):
        flags = ["--" + f.name.replace("_", "-")]
        if f.name in ALIASES:
            flags.append("--" + ALIASES[f.name])
        default = getattr(TrainConfig(), f.name)
        if isinstance(default, bool):
            p.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(*flags, dest=f.name, default=None, help=f"default {default}")


def _config_from(args) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v if isinstance(v, bool) else str(v)
    return TrainConfig.from_mapping(values)


def _bundle_from(args):
    if getattr(args, "bundle", None):
        return read_bundle(args.bundle)
    return make_bundle(args.n_labeled, args.n_unlabeled, n_classes=args.n_classes,
                       mixture=MixtureSpec.from_ratio(args.ratio), seed=args.bundle_seed,
                       n_test=args.n_test)


def cmd_gen_bundle(args):
    bundle = make_bundle(args.n_labeled, args.n_unlabeled, n_classes=args.n_classes,
                         mixture=MixtureSpec.from_ratio(args.ratio), seed=args.seed, n_test=args.n_test)
    write_bundle(bundle, args.out)
    print(f"bundle={args.out} hash={bundle.digest()} labeled={len(bundle.labeled)} "
          f"unlabeled={len(bundle.unlabeled)}")


def cmd_train(args):
    config = _config_from(args)
    bundle = _bundle_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, history = train(config, bundle)
    write_history(history, out / "history.csv")
    save_checkpoint(params, out / "model.ckpt")
    metrics = {p: harness.evaluate(params, bundle, p, config) for p in harness.PROTOCOLS}
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "accuracy"])
        for k, v in metrics.items():
            w.writerow([k, repr(v)])
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()) + f" out={out}")


def cmd_eval(args):
    params = load_checkpoint(args.ckpt)
    bundle = read_bundle(args.bundle)
    config = _config_from(args)
    for protocol in args.protocol or harness.PROTOCOLS:
        v = harness.evaluate(params, bundle, protocol, config)
        print(f"{protocol}={'undefined' if v != v else f'{v:.4f}'}")


def cmd_grid(args):
    base = _config_from(args)
    known = {"fixmatch": harness.FIXMATCH, "ssfa_rot": harness.SSFA_ROT,
             "ssfa_simclr": harness.Method("ssfa_simclr", aux_task="simclr"),
             "ssfa_em": harness.Method("ssfa_em", aux_task="em"),
             "fixmatch_rot": harness.Method("fixmatch_rot", ssfa=False),
             "flexmatch": harness.Method("flexmatch", "adaptive_threshold", False, overrides=(("lambda_a", 0.0),)),
             "flexmatch_ssfa": harness.Method("flexmatch_ssfa", "adaptive_threshold", True)}
    methods = []
    for name in args.methods.split(","):
        if name not in known:
            raise ValueError(f"unknown method {name!r}; choose from {sorted(known)}")
        methods.append(known[name])
    seeds = tuple(int(s) for s in args.seeds.split(","))
    spec = harness.ExperimentSpec(n_labeled=args.n_labeled, ratio=args.ratio, seeds=seeds,
                                  methods=tuple(methods), base=base, out=args.out,
                                  n_classes=args.n_classes, n_unlabeled=args.n_unlabeled,
                                  n_test=args.n_test, features=args.features)
    harness.run_experiment(spec)
    with open(Path(args.out) / "summary.csv") as fh:
        sys.stdout.write(fh.read())


def cmd_diag(args):
    if args.which == "lemma1":
        rows = theory.lemma1_trials(args.trials, args.seed)
        held = sum(v.decrease_held for _, _, v in rows)
        if args.out:
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["trial", "d"] + list(rows[0][2].as_row()) if rows else ["trial"])
                for i, (pair, _, v) in enumerate(rows):
                    w.writerow([i, len(pair.a)] + [repr(x) if isinstance(x, float) else x
                                                   for x in v.as_row().values()])
        print(f"lemma1 trials={len(rows)} decrease_held={held} violations={len(rows) - held}")
        return 0 if held == len(rows) else 1
    params = load_checkpoint(args.ckpt)
    bundle = read_bundle(args.bundle)
    if args.which == "ipp":
        config = _config_from(args)
        samples = theory.ipp_scatter(params, theory.group_test_samples(bundle),
                                     AuxTask(params.arch.aux_task), config.lr_adapt, args.seed)
        dst = open(args.out, "w", newline="") if args.out else sys.stdout
        w = csv.writer(dst)
        w.writerow(["group_id", "ipp", "improvement"])
        for s in samples:
            w.writerow([s.group_id, repr(s.ipp), repr(s.improvement)])
        if args.out:
            dst.close()
        print(f"spearman={theory.spearman(samples):.4f} groups={len(samples)}", file=sys.stderr)
    else:
        print(f"{theory.feature_a_distance(params, bundle, seed=args.seed):.6f}")
    return 0


def cmd_dump_features(args):
    n = harness.dump_features(load_checkpoint(args.ckpt), read_bundle(args.bundle), args.out)
    print(f"rows={n} out={args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssfa-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bundle", help="generate a glyph bundle file")
    _add_bundle_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_bundle)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--bundle", help="bundle file; generated from the bundle flags if omitted")
    _add_bundle_flags(p)
    p.add_argument("--bundle-seed", type=int, default=0)
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--protocol", action="append", choices=harness.PROTOCOLS)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", help="run a method x seed grid")
    _add_bundle_flags(p)
    _add_config_flags(p)
    p.add_argument("--methods", default="fixmatch,ssfa_rot")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--features", action="store_true", help="also dump test features per run")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("diag", help="theory diagnostics")
    p.add_argument("which", choices=("lemma1", "ipp", "adist"))
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--ckpt")
    p.add_argument("--bundle")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_diag)

    p = sub.add_parser("dump-features", help="write test-set features to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "diag" and args.which != "lemma1" and not (args.ckpt and args.bundle):
        print("error: UsageError: diag ipp/adist need --ckpt and --bundle", file=sys.stderr)
        return 2
    if args.command == "diag" and args.seed is None:
        args.seed = 0
    try:
        if args.command == "diag":
            args.seed = int(args.seed)
        code = args.fn(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
