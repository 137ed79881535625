"""Command-line entry point: ``fpbandit run|sweep|report|prepare``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .errors import BanditError

CONFIG_HELP = """\
Config files are INI with one [experiment], one [environment] and any number
of [agent:<label>] sections. Unknown sections or keys are errors.

  [experiment]   rounds, trials, seed, out, name
  [environment]  kind = synthetic-nonlinear | synthetic-linear | tabular | constant
                 synthetic: context_dim, action_dim, actions, seed, n_contexts,
                            near_duplicate_pairs (nonlinear also: width)
                 tabular:   path (a directory written by `prepare`), seed
                 constant:  rewards = 0.2, 0.5, 0.9
  [agent:NAME]   type = uniform | oracle | neural-greedy | bbb | dropout |
                        bootstrapped | parameter-noise | functional-posterior
                 plus that type's hyperparameters; a comma list is a grid
                 (only `sweep` accepts grids). `hidden = 64 64` sets widths.
                 functional-posterior with `drug_context = false` is the
                 per-action variant that sees one-hot action codes.
"""


def _apply_overrides(cfg, args):
    changes = {k: getattr(args, k) for k in ("seed", "trials", "rounds", "out")
               if getattr(args, k) is not None}
    return replace(cfg, **changes) if changes else cfg


def _print_summary(outcome):
    for s in outcome.summaries:
        print(f"{s.label:<24} mean={s.mean:.3f} sem={s.sem:.3f} trials={len(s.finals)} {s.status}")
    print(f"results in {outcome.out}")


def _cmd_run(args) -> int:
    cfg = _apply_overrides(experiment.load_config(args.config), args)
    outcome = experiment.run_experiment(cfg, force=args.force, jobs=args.jobs)
    _print_summary(outcome)
    return 0 if outcome.ok else 1


def _cmd_sweep(args) -> int:
    cfg = _apply_overrides(experiment.load_config(args.config), args)
    outcome = experiment.grid_sweep(cfg, force=args.force, jobs=args.jobs,
                                    use_defaults=not args.no_default_grids)
    _print_summary(outcome)
    return 0 if outcome.ok else 1


def _cmd_report(args) -> int:
    print(experiment.report(args.directory, force=args.force))
    return 0


def _cmd_prepare(args) -> int:
    from .data import load_screen, prepare, save_prepared
    raw = load_screen(args.data_dir)
    name = args.name or Path(args.data_dir).resolve().name
    prepared = prepare(raw, d1=args.d1, negate_response=args.negate_response, name=name)
    out = Path(args.out or f"{args.data_dir.rstrip('/')}_prepared")
    if (out / "meta.json").exists() and not args.force:
        raise BanditError(f"{out}: already prepared; pass --force to overwrite")
    save_prepared(prepared, out)
    m = prepared.meta
    print(f"{len(prepared.cell_ids)} cells x {len(prepared.actions)} drugs, d1={m['d1']}; "
          f"dropped {len(m['dropped_cells'])} cells, {len(m['dropped_drugs'])} drugs -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpbandit", description="Contextual-bandit drug screening experiments.",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, help="base seed (overrides config)")
        p.add_argument("--trials", type=int, help="trials per agent (overrides config)")
        p.add_argument("--rounds", type=int, help="rounds per trial (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--force", action="store_true", help="overwrite differing results")
        p.add_argument("--jobs", type=int, default=experiment.default_jobs(),
                       help="parallel trial workers (default: all cores)")

    p = sub.add_parser("run", help="run every agent for all trials", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="grid-search hyperparameters per agent", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--no-default-grids", action="store_true",
                   help="do not fall back to the built-in grids for agents without one")
    common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="aggregate traces into a per-round CSV")
    p.add_argument("directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("prepare", help="filter, project and scale a raw screen")
    p.add_argument("data_dir", help="directory with expression.csv, response.csv, fingerprints.csv")
    p.add_argument("--out", help="output directory (default: <data_dir>_prepared)")
    p.add_argument("--d1", type=int, default=500, help="number of principal components")
    p.add_argument("--negate-response", action="store_true",
                   help="flip responses so that larger means more sensitive")
    p.add_argument("--name", help="dataset name recorded in meta.json")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_prepare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("fpbandit: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except BanditError as exc:
        print(f"fpbandit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
