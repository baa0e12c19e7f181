"""Command line for the counterfactual contrastive toolkit.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure.

``--seed`` overrides the seed of the stage being run: the world's master
seed for ``generate-world``, the generator's training seed for ``train-cf``
and the pretraining seed list (a single seed) for the encoder stages.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("cfcontrast")


def _load_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if args.workspace:
        cfg.workspace = args.workspace
    if args.seed is not None:
        if args.command == "generate-world":
            cfg.world = replace(cfg.world, master_seed=args.seed)
        elif args.command == "train-cf":
            cfg.cf_model.train = replace(cfg.cf_model.train, seed=args.seed)
        else:
            cfg.pretrain.seeds = [args.seed]
    return cfg.validate()


def _runner(args):
    from .runner import Runner

    cfg = _load_config(args)
    return Runner(cfg, force=args.force)


def cmd_generate_world(args) -> int:
    r = _runner(args)
    wrote = r.generate_world()
    print(f"world {r.world_hash()} {'written to' if wrote else 'up to date in'} {r.ws.world}")
    return EXIT_OK


def cmd_train_cf(args) -> int:
    r = _runner(args)
    r.generate_world()
    meta = r.train_cf()
    s = meta.get("soundness") or {}
    print(f"counterfactual model ({meta['tier']}) in {r.ws.cf}; "
          f"effectiveness {s.get('effectiveness_overall', float('nan')):.3f}")
    return EXIT_OK


def cmd_build_bank(args) -> int:
    r = _runner(args)
    meta = r.build_bank()
    print(f"bank of {meta['size']} counterfactuals in {r.ws.bank} (per value {meta['value_counts']})")
    return EXIT_OK


def _cells(r, args):
    from .runner import select_cells

    cells = select_cells(r.config, args.cells)
    if not cells:
        raise ValueError(f"--cells {args.cells!r} matches no cell")
    return cells


def cmd_pretrain(args) -> int:
    r = _runner(args)
    for cell in _cells(r, args):
        meta = r.pretrain_cell(cell)
        print(f"{cell}: best epoch {meta['best_epoch']}, encoder {meta['encoder_sha256'][:12]}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    r = _runner(args)
    for cell in _cells(r, args):
        rep = r.evaluate_cell(cell)
        low = min(rep.budgets)
        probe = next(p for p in rep.probes if p.budget_fraction == low and p.mode == "linear")
        sep = "n/a" if rep.separability is None else f"{rep.separability:.3f}"
        doms = " ".join(f"d{k}={v:.3f}" for k, v in probe.per_domain.items())
        print(f"{cell}: separability {sep}; ROC-AUC at {low:.0%} labels {doms}")
    return EXIT_OK


def cmd_run_matrix(args) -> int:
    r = _runner(args)
    status = r.run_matrix(args.cells)
    failed = {c: s for c, s in status.items() if s != "ok"}
    for c, s in status.items():
        print(f"{c}: {s}")
    print(f"reports in {r.ws.reports}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _report_paths(args, r=None) -> list[Path]:
    if args.reports:
        paths = []
        for p in map(Path, args.reports):
            paths += sorted(p.glob("*.json")) if p.is_dir() else [p]
    else:
        paths = sorted(r.ws.reports.glob("*.json"))
    paths = [p for p in paths if p.name not in ("diff_vs_standard.json", "matrix_status.json")
             and not p.name.startswith("diff")]
    if not paths:
        raise ValueError("no reports found")
    return paths


def cmd_report_diff(args) -> int:
    from .reporting import difference_report, load_reports

    r = _runner(args)
    diff = difference_report(load_reports(_report_paths(args, r)), baseline=args.baseline)
    out = Path(args.output) if args.output else r.ws.reports / f"diff_vs_{args.baseline}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(diff, indent=2, sort_keys=True) + "\n")
    print(f"{len(diff['rows'])} difference rows written to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evaluation import read_projection
    from .plotting import plot_budget_curves, plot_differences, plot_embedding
    from .reporting import difference_report, load_reports

    r = _runner(args)
    reports = load_reports(_report_paths(args, r))
    out = Path(args.output) if args.output else r.ws.figures
    files = plot_budget_curves(reports, out)
    if any(rep.strategy == "standard" for rep in reports):
        files += plot_differences(difference_report(reports), out)
    for rep in reports:
        proj = r.ws.eval(rep.run_id) / "embeddings_2d.csv"
        if proj.exists():
            files.append(plot_embedding(read_projection(proj), out / f"embedding_{rep.run_id}.png", rep.run_id))
    print(f"{len(files)} figures written to {out}")
    return EXIT_OK


COMMANDS = {
    "generate-world": (cmd_generate_world, "render the synthetic dataset"),
    "train-cf": (cmd_train_cf, "train the counterfactual image model"),
    "build-bank": (cmd_build_bank, "generate every domain counterfactual"),
    "pretrain": (cmd_pretrain, "pretrain encoders for the selected cells"),
    "evaluate": (cmd_evaluate, "probe and score pretrained encoders"),
    "run-matrix": (cmd_run_matrix, "run all stages over strategy x objective x seed"),
    "plot": (cmd_plot, "render figures from reports"),
    "report-diff": (cmd_report_diff, "differences to a baseline strategy"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfcontrast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
        sp.add_argument("--workspace", help="override the workspace directory")
        sp.add_argument("--seed", type=int, help="stage seed override")
        sp.add_argument("--force", action="store_true", help="overwrite outputs built from another config")
        sp.add_argument("--cells", help="comma-separated glob(s) over <strategy>_<objective>_<seed>")
        if name in ("plot", "report-diff"):
            sp.add_argument("--reports", nargs="*", help="report files or directories")
            sp.add_argument("--output", help="output directory (plot) or file (report-diff)")
        if name == "report-diff":
            sp.add_argument("--baseline", default="standard")
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .runner import MissingInput, StageConflict
    from .worlds import WorldSpecError

    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        return fn(args)
    except (ConfigError, WorldSpecError, StageConflict, MissingInput, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - mapped to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
