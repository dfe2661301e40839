"""Command-line entry point: ``cdsampling {run,t0-sweep,figures,validate}``.

Exit codes: 0 success, 1 configuration error, 2 run failure, 3 empty input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, load_document, output_root, parse_t0_sweep, thread_count
from .figures import EmptyInputError, emit_figures
from .io import read_manifests

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_EMPTY = 0, 1, 2, 3

log = logging.getLogger("cdsampling")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $CDSAMPLING_OUT or ./results)")
    common.add_argument("-v", "--verbose", action="store_true")
    runlike = argparse.ArgumentParser(add_help=False)
    runlike.add_argument("--config", required=True, help="TOML experiment file")
    runlike.add_argument("--seed", type=int, help="override every experiment seed")
    runlike.add_argument("--task", help="only experiments on this task")
    runlike.add_argument("--plots", action="store_true", help="also render PNG figures")

    ap = argparse.ArgumentParser(prog="cdsampling", description="Conditional diffusion sampling benchmarks.")
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("run", parents=[common, runlike], help="execute an experiment config")
    p.add_argument("--method", help="only experiments with this method")
    p.add_argument("--threads", type=int, help="worker threads (default: $CDSAMPLING_THREADS or 1)")
    sub.add_parser("t0-sweep", parents=[common, runlike], help="round trips and GCB against t0")
    p = sub.add_parser("figures", parents=[common], help="emit CSV series and PNG figures from stored manifests")
    p.add_argument("--no-plots", dest="plots", action="store_false", help="CSV series only")
    p = sub.add_parser("validate", help="run the fast invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _emit(out: Path, plots: bool) -> list[Path]:
    mans = read_manifests(out / "manifests.jsonl")
    t0_path = out / "t0_sweep.jsonl"
    t0_rows = read_manifests(t0_path) if t0_path.exists() else None
    return emit_figures(mans, out / "figures", t0_rows=t0_rows, sample_root=out, plots=plots)


def cmd_run(args) -> int:
    from .runner import run_experiment

    configs = load_config(args.config, seed=args.seed, task=args.task, method=args.method)
    if not configs:
        print("no experiments match the filters", file=sys.stderr)
        return EXIT_EMPTY
    out = output_root(args.out)
    mans = run_experiment(configs, out, threads=thread_count(args.threads))
    failed = [m for m in mans if m.get("status") == "failed"]
    for m in mans:
        w2 = m.get("metrics", {}).get("w2")
        print(f"{m['label']:40s} budget={m['budget']:>8d} rep={m['replicate']} "
              f"evals={m.get('evaluations', '-')!s:>8s} w2={'-' if w2 is None else f'{w2:.4f}'} {m['status']}")
    try:
        for p in _emit(out, args.plots):
            print(f"wrote {p}")
    except EmptyInputError:
        pass
    if failed:
        print(f"{len(failed)} job(s) failed", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_t0_sweep(args) -> int:
    from .runner import setup_task, sweep_t0

    sc = parse_t0_sweep(load_document(args.config), seed=args.seed, task=args.task)
    out = output_root(args.out)
    setup = setup_task(sc.task, n_truth=max(sc.n_chains, 1000))
    rows = []
    for s in sc.seeds:
        rows += sweep_t0(sc.task, sc.t0, n_chains=sc.n_chains, n_sweeps=sc.sweeps, seed=s,
                         pilot_replicas=sc.pilot_replicas, tau=sc.tau, setup=setup, **sc.params)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "t0_sweep.jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    for r in rows:
        print(f"seed={r['seed']} t0={r['t0']:<6g} R={r['n_replicas']:<3d} RT={r['round_trips']:<7d} "
              f"GCB={r['gcb']:.3f} W2={r['w2']:.4f}")
    for p in _emit(out, args.plots):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_figures(args) -> int:
    out = output_root(args.out)
    for p in _emit(out, args.plots):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import run_checks

    ok = True
    for name, passed, detail in run_checks(args.seed):
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_RUN


COMMANDS = {"run": cmd_run, "t0-sweep": cmd_t0_sweep, "figures": cmd_figures, "validate": cmd_validate}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyInputError as err:
        print(f"nothing to do: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except Exception as err:  # noqa: BLE001 - surface as a run failure
        log.exception("run failed")
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
