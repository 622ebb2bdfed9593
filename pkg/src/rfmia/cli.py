"""Command line entry point: ``rfmia <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from rfmia import experiments as ex

STAGE_COMMANDS = ("synth", "train-target", "train-surrogate", "attack", "defend")


def _config(args) -> ex.ExperimentConfig:
    if args.config:
        cfg = ex.ExperimentConfig.from_file(args.config, seed=args.seed, output_dir=args.out)
        if args.experiment:
            cfg = ex.ExperimentConfig(args.experiment, cfg.seed, cfg.overrides, cfg.output_dir)
        return cfg
    if not args.experiment:
        raise SystemExit("error: give an experiment name or --config FILE")
    return ex.ExperimentConfig(args.experiment, args.seed if args.seed is not None else 0,
                               {}, args.out)


def _print_matrix(title: str, cm: dict) -> None:
    print(f"  {title}: accuracy {cm['accuracy']:.4f}")
    cols = cm["col_labels"]
    if len(cols) > 4:
        return
    print("    true\\pred " + " ".join(f"{c!s:>8}" for c in cols))
    for lbl, row in zip(cm["row_labels"], cm["matrix"]):
        print(f"    {lbl!s:>9} " + " ".join(f"{v:8.4f}" for v in row))


def print_report(report: dict) -> None:
    print(f"{report['experiment']}  seed {report['seed']}  config {report['config_digest'][:12]}")
    st = report["stages"]
    _print_matrix("target classifier", st["target"]["confusion"])
    if "surrogate" in st:
        _print_matrix("surrogate classifier", st["surrogate"]["confusion"])
        print(f"  paired agreement: {st['surrogate']['paired_agreement']:.4f}")
    att = st.get("attack", {})
    if "confusion" in att:
        _print_matrix("MIA", att["confusion"])
    for key in ("mia", "shadow"):
        if key in att:
            _print_matrix(f"{key} (no defense)", att[key]["confusion"])
    if "noisy" in att:
        for agg, rows in att["noisy"].items():
            print(f"  noisy variations, {agg} score:")
            print("    level  non-member  member")
            for r in rows:
                print(f"    {r['level']:.1f}    {r['nonmember_acc']:.4f}     {r['member_acc']:.4f}")
    if "defend" in st:
        d = st["defend"]
        _print_matrix("shadow MIA under defense", d["shadow_after"]["confusion"])
        _print_matrix("adversary MIA under defense", d["mia_after"]["confusion"])
        print(f"  convergence rate {d['convergence_rate']:.4f}, argmax violations "
              f"{d['argmax_violations']}")
        print("  accuracy deltas: shadow "
              f"{d['shadow_after']['accuracy'] - d['shadow_before']['accuracy']:+.4f}, MIA "
              f"{d['mia_after']['accuracy'] - d['mia_before']['accuracy']:+.4f}")


def cmd_stage(args) -> int:
    cfg = _config(args)
    out = ex.run_stage(cfg, args.command)
    print(json.dumps(_stage_summary(out), sort_keys=True))
    print(f"artifacts in {cfg.run_dir()}")
    return 0


def _stage_summary(out: dict) -> dict:
    return {k: v for k, v in out.items() if isinstance(v, (int, float, str))}


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.seeds and args.seeds > 1:
        summary = ex.run_seeds(cfg, args.seeds)
        for k, v in summary["summary"].items():
            print(f"{k}: {v['mean']:.4f} +/- {v['std']:.4f}  ({len(v['values'])} seeds)")
        return 0
    report = ex.run_experiment(cfg)
    print_report(report)
    print(f"artifacts in {cfg.run_dir()}")
    return 0


def cmd_report(args) -> int:
    report = ex.load_report(args.run_dir)
    print_report(report)
    checks = ex.check_run(report)
    for name, ok, detail in checks:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return 0 if all(ok for _, ok, _ in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfmia", description=(
        "Membership inference against RF-fingerprint authentication, and a "
        "score-perturbation defense."))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("experiment", nargs="?", choices=ex.EXPERIMENTS)
        sp.add_argument("--config", help="JSON experiment config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None,
                        help=f"run directory (default ${ex.OUT_ENV}/<experiment>-seed<N>)")

    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} stage of an experiment")
        common(sp)
        sp.set_defaults(func=cmd_stage)
    sp = sub.add_parser("run", help="run a whole experiment")
    common(sp)
    sp.add_argument("--seeds", type=int, default=None,
                    help="repeat over N consecutive seeds and report mean +/- std")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("report", help="summarise a finished run; exit 1 if a threshold fails")
    sp.add_argument("run_dir", type=Path)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ex.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
