"""Command-line entry point: ``dynattack <subcommand> ...``.

Stage subcommands share a run directory and a master seed, so the pipeline
can be driven one stage at a time::

    dynattack ingest --run-dir R --set dataset.name=synthetic
    dynattack train-model --run-dir R
    dynattack train-attack --run-dir R
    dynattack evaluate --run-dir R
    dynattack baseline --run-dir R --kind both
    dynattack report --run-dir R

``run`` and ``sweep`` do all of it in one go.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import dygcn, graphs, gradsuite, harness, sac

EXIT_CODES = {
    "config": 2,
    "ingest": 3,
    "train-model": 4,
    "train-attack": 5,
    "evaluate": 6,
    "baseline": 7,
    "sweep": 8,
    "report": 9,
    "gradcheck": 10,
}


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--run-dir", type=Path, help=f"run directory (default: new dir under ${harness.RUNS_ENV} or ./runs)")
    p.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (default: first configured seed)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynattack", description="Black-box evasion attacks on dynamic link prediction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a dataset into a snapshot bundle")
    _add_common(p)

    p = sub.add_parser("train-model", help="train the victim link predictor")
    _add_common(p)

    p = sub.add_parser("train-attack", help="train the attacker against the saved victim")
    _add_common(p)

    p = sub.add_parser("evaluate", help="no-attack and trained-attack rows on the test split")
    _add_common(p)

    p = sub.add_parser("baseline", help="random attack rows on the test split")
    _add_common(p)
    p.add_argument("--kind", choices=("whole", "partial", "both"), default="both")

    p = sub.add_parser("run", help="full pipeline for every configured seed, then report")
    _add_common(p, seed=False)

    p = sub.add_parser("sweep", help="vary one attack parameter, others at their configured values")
    _add_common(p, seed=False)
    p.add_argument("--param", choices=harness.SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0.01,0.02,0.05")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("report", help="gather rows in a run directory into results.csv and series files")
    p.add_argument("--run-dir", type=Path, required=True)
    return ap


# ------------------------------------------------------------------ helpers
def _run_dir(args, label: str) -> Path:
    if args.run_dir is not None:
        args.run_dir.mkdir(parents=True, exist_ok=True)
        return args.run_dir
    return harness.new_run_dir(label)


def _config(args, run_dir: Path) -> harness.ExperimentConfig:
    """Explicit --config, else the run directory's resolved config, then overrides."""
    path = args.config
    if path is None and (run_dir / "config.txt").exists():
        path = run_dir / "config.txt"
    try:
        return harness.load_config(path, args.overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise harness.StageError("config", str(exc)) from exc


def _seed(args, config) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _prepared(config, run_dir: Path, seed: int) -> harness.Prepared:
    sd = run_dir / f"seed-{seed}"
    with harness._stage("ingest"):
        seq, _ = graphs.load_bundle(sd / "bundle.npz")
        split = harness.make_split(config, seq)
    with harness._stage("train-model"):
        params = dygcn.load_model(sd / "model.ckpt")
    return harness.Prepared(seed, split, params, 0.0)


def _attack_dir(config, run_dir: Path, seed: int) -> Path:
    d = run_dir / f"seed-{seed}" / harness.attack_tag(config)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(config.to_text())
    return d


def _merge_rows(path: Path, new) -> None:
    rows = {r.key(): r for r in (harness.read_rows(path) if path.exists() else [])}
    for r in new:
        rows[r.key()] = r
    harness.write_rows(path, list(rows.values()))


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r.dataset:>10} {r.method:>15} seed={r.seed} mu={r.mu:g} rho={r.rho:g} delta={r.delta:g} "
              f"f1={r.f1_mean:.4f}±{r.f1_std:.4f} t={r.wall_clock_seconds:.1f}s queries={r.oracle_queries}")


# --------------------------------------------------------------- commands
def cmd_ingest(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    (run_dir / "config.txt").write_text(config.to_text())
    seed = _seed(args, config)
    sd = run_dir / f"seed-{seed}"
    sd.mkdir(parents=True, exist_ok=True)
    with harness._stage("ingest"):
        seq, labels = harness.ingest(config, seed)
        split = harness.make_split(config, seq)
        graphs.save_bundle(sd / "bundle.npz", seq, labels)
    edges = [s.edge_count for s in seq]
    print(f"{run_dir}: {len(seq)} snapshots over {seq.num_nodes} nodes, "
          f"edges/snapshot {min(edges)}..{max(edges)}, split {split.sizes()}")


def cmd_train_model(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    seed = _seed(args, config)
    sd = run_dir / f"seed-{seed}"
    with harness._stage("ingest"):
        seq, _ = graphs.load_bundle(sd / "bundle.npz")
        split = harness.make_split(config, seq)
    with harness._stage("train-model"):
        curve: list = []
        t0 = time.perf_counter()
        params = dygcn.train_dygcn(split.train, config.model_config(seed), curve)
        elapsed = time.perf_counter() - t0
        dygcn.save_model(sd / "model.ckpt", params, n=config.window.n)
        harness.write_curve(sd / "loss_curve.csv", curve)
    print(f"victim trained in {elapsed:.1f}s, final loss {curve[-1][1]:.4f} -> {sd / 'model.ckpt'}")


def cmd_train_attack(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    seed = _seed(args, config)
    prep = _prepared(config, run_dir, seed)
    out = _attack_dir(config, run_dir, seed)
    agent, secs, queries = harness.train_attack_stage(config, prep, out)
    (out / "train_attack.json").write_text(json.dumps({"seconds": secs, "oracle_queries": queries}))
    print(f"attacker trained in {secs:.1f}s with {queries} oracle queries -> {out / 'agent.ckpt'}")


def cmd_evaluate(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    seed = _seed(args, config)
    prep = _prepared(config, run_dir, seed)
    out = _attack_dir(config, run_dir, seed)
    rows = [harness.no_attack_row(config, prep)]
    with harness._stage("evaluate"):
        agent = sac.load_agent(out / "agent.ckpt")
        meta = json.loads((out / "train_attack.json").read_text()) if (out / "train_attack.json").exists() else {}
    rows.append(harness.ours_row(config, prep, agent, float(meta.get("seconds", 0.0)),
                                 int(meta.get("oracle_queries", 0)), out))
    _merge_rows(out / "rows.csv", rows)
    _print_rows(rows)


def cmd_baseline(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    seed = _seed(args, config)
    prep = _prepared(config, run_dir, seed)
    out = _attack_dir(config, run_dir, seed)
    kinds = ("whole", "partial") if args.kind == "both" else (args.kind,)
    rows = [harness.baseline_row(config, prep, k, out) for k in kinds]
    _merge_rows(out / "rows.csv", rows)
    _print_rows(rows)


def cmd_run(args) -> None:
    run_dir = _run_dir(args, "run")
    config = _config(args, run_dir)
    rows = harness.run_experiment(config, run_dir)
    _report(rows, run_dir)


def cmd_sweep(args) -> None:
    run_dir = _run_dir(args, f"sweep-{args.param}")
    config = _config(args, run_dir)
    try:
        values = [float(v) for v in args.values.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise harness.StageError("config", f"bad --values: {exc}") from exc
    try:
        rows = harness.sweep(config, args.param, values, run_dir)
    except ValueError as exc:
        raise harness.StageError("config", str(exc)) from exc
    if rows:
        _report(rows, run_dir)
    else:
        print("no sweep values given; nothing to do")


def cmd_report(args) -> None:
    with harness._stage("report"):
        rows = harness.collect_rows(args.run_dir)
        if not rows and (args.run_dir / "results.csv").exists():
            rows = harness.read_rows(args.run_dir / "results.csv")
        if not rows:
            raise FileNotFoundError(f"no result rows under {args.run_dir}")
    _report(rows, args.run_dir)


def _report(rows, run_dir: Path) -> None:
    with harness._stage("report"):
        files = harness.emit_report(rows, run_dir)
    _print_rows(rows)
    for f in files:
        print(f"wrote {f}")


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, rep in gradsuite.run_suite(args.seed, tol=args.tol).items():
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status} {name:12s} max_rel_error={rep.max_rel_error:.2e} entries={rep.checked} "
              f"unresolved={rep.unresolved} worst={rep.worst}")
    if failed:
        raise harness.StageError("gradcheck", f"{failed} check(s) failed")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train-model": cmd_train_model,
    "train-attack": cmd_train_attack,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except harness.StageError as exc:
        print(f"error: stage={exc.stage}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
