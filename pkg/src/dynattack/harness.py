"""Experiment driver: config, the four-method pipeline, sweeps, and report files.

Run directory layout (one per experiment)::

    config.txt                 resolved flat config
    seed-<s>/bundle.npz        snapshot sequence
    seed-<s>/model.ckpt(.json) victim checkpoint
    seed-<s>/loss_curve.csv
    seed-<s>/<tag>/agent.ckpt  attacker checkpoint, per attack setting
    seed-<s>/<tag>/train_log.csv, perturb_<method>.csv, rows.csv
    results.csv, summary.md, sweep_<param>.csv, timing.csv
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import baselines, dygcn, graphs, sac
from .metrics import f1_score
from .oracle import OracleHandle

log = logging.getLogger(__name__)

RUNS_ENV = "DYNATTACK_RUNS"
DATA_ENV = "DYNATTACK_DATA"
METHODS = ("none", "random-whole", "random-partial", "ours")
SWEEP_PARAMS = ("delta", "rho", "mu")

# stage seed offsets from the master seed
SEED_OFFSETS = {"ingest": 0, "model": 1000, "attack": 2000, "baseline": 3000, "evaluate": 4000}

# filenames looked up under $DYNATTACK_DATA when dataset.path is empty
PRESETS = {
    "haggle": ("out.contact", "konect"),
    "hypertext": ("ht09_contact_list.dat", "sociopatterns"),
    "trapping": ("mammalia-voles-rob-trapping.edges", "auto"),
}


class StageError(RuntimeError):
    """Failure inside one pipeline stage; ``stage`` names it for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------- config
@dataclass
class DatasetSection:
    name: str = "synthetic"
    path: str = ""
    format: str = "auto"
    snapshots: int = 30
    binning: str = "equal-count"
    # synthetic fixture only
    nodes: int = 60
    density: float = 0.12
    churn: float = 0.02


@dataclass
class WindowSection:
    n: int = 10
    m_tr: int = 10
    m_val: int = 5
    m_te: int = 5


@dataclass
class ModelSection:
    layers: int = 3
    hidden: int = 64
    lstm_layers: int = 2
    beta: float = 10.0
    lr: float = 1e-3
    epochs: int = 200


@dataclass
class AttackSection:
    mu: float = 1.0
    rho: float = 0.30
    delta: float = 0.02
    gamma: float = 0.2
    episodes: int = 50
    discount: float = 0.99
    target_entropy: float = -2.0
    capacity: int = 100_000
    batch_size: int = 64
    lr_policy: float = 3e-4
    lr_q: float = 3e-4
    lr_alpha: float = 3e-4
    hidden: int = 64
    init_alpha: float = 1.0
    target_tau: float = 0.0
    eval_mode: str = "mean"


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    window: WindowSection = field(default_factory=WindowSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    # flat `section.key = value` form --------------------------------------
    def set(self, key: str, value: str) -> None:
        key = key.strip()
        if key == "seeds":
            self.seeds = [int(s) for s in str(value).replace(",", " ").split()]
            return
        section, _, name = key.partition(".")
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec) or name not in {f.name for f in dataclasses.fields(sec)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(sec, name)
        setattr(sec, name, _coerce(value, type(current)))

    def items(self) -> list[tuple[str, str]]:
        out = []
        for section in ("dataset", "window", "model", "attack"):
            for f in dataclasses.fields(getattr(self, section)):
                out.append((f"{section}.{f.name}", _fmt(getattr(getattr(self, section), f.name))))
        out.append(("seeds", ", ".join(str(s) for s in self.seeds)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def copy(self) -> "ExperimentConfig":
        return parse_config(self.to_text())

    def validate(self) -> None:
        a = self.attack
        if not 0.0 < a.mu <= 1.0:
            raise ValueError(f"attack.mu must lie in (0, 1], got {a.mu}")
        if not 0.0 < a.rho < 0.5:
            raise ValueError(f"attack.rho must lie in (0, 0.5), got {a.rho}")
        if not 0.0 < a.delta < 1.0:
            raise ValueError(f"attack.delta must lie in (0, 1), got {a.delta}")
        if a.eval_mode not in ("mean", "sample"):
            raise ValueError(f"attack.eval_mode must be mean or sample, got {a.eval_mode!r}")
        if self.dataset.binning not in ("equal-count", "equal-time"):
            raise ValueError(f"unknown binning {self.dataset.binning!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def model_config(self, seed: int) -> dygcn.ModelConfig:
        m = self.model
        return dygcn.ModelConfig(m.layers, m.hidden, m.lstm_layers, m.beta, m.lr, m.epochs,
                                 seed=stage_seed(seed, "model"))

    def attack_config(self) -> sac.AttackConfig:
        a = self.attack
        return sac.AttackConfig(mu=a.mu, rho=a.rho, delta=a.delta, gamma=a.gamma)

    def sac_config(self, seed: int) -> sac.SACConfig:
        a = self.attack
        return sac.SACConfig(
            episodes=a.episodes, discount=a.discount, target_entropy=a.target_entropy,
            capacity=a.capacity, batch_size=a.batch_size, lr_policy=a.lr_policy, lr_q=a.lr_q,
            lr_alpha=a.lr_alpha, hidden=a.hidden, init_alpha=a.init_alpha, target_tau=a.target_tau,
            eval_mode=a.eval_mode, seed=stage_seed(seed, "attack"),
        )

    def baseline_config(self, kind: str, seed: int) -> baselines.BaselineConfig:
        a = self.attack
        return baselines.BaselineConfig(kind, a.delta, a.mu, a.rho, stage_seed(seed, "baseline"))


def _coerce(value, kind):
    if kind is bool:
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(float(value)) if "e" in str(value).lower() else int(value)
    if kind is float:
        return float(value)
    return str(value).strip()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Parse flat ``section.key = value`` lines, then apply ``key=value`` overrides."""
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        cfg.set(k, v.strip())
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        cfg.set(k, v.strip())
    cfg.validate()
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def stage_seed(master: int, stage: str) -> int:
    return int(master) + SEED_OFFSETS[stage]


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def new_run_dir(label: str = "run") -> Path:
    root = runs_root()
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / f"{label}-{stamp}"
    i = 1
    while d.exists():
        d = root / f"{label}-{stamp}-{i}"
        i += 1
    d.mkdir(parents=True)
    return d


# ---------------------------------------------------------------------- rows
@dataclass(frozen=True)
class ResultRow:
    dataset: str
    method: str
    mu: float
    rho: float
    delta: float
    seed: int
    f1_mean: float
    f1_std: float
    wall_clock_seconds: float
    oracle_queries: int

    def key(self):
        return (self.dataset, self.method, self.mu, self.rho, self.delta, self.seed)


ROW_FIELDS = tuple(f.name for f in dataclasses.fields(ResultRow))
_ROW_TYPES = {f.name: f.type for f in dataclasses.fields(ResultRow)}


def write_rows(path, rows: Sequence[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in ROW_FIELDS])


def read_rows(path) -> list[ResultRow]:
    conv = {"str": str, "float": float, "int": int}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [ResultRow(**{k: conv[_ROW_TYPES[k]](v) for k, v in rec.items()}) for rec in reader]


# ------------------------------------------------------------------- stages
def dataset_file(config: ExperimentConfig) -> tuple[Path, str]:
    ds = config.dataset
    if ds.path:
        return Path(ds.path), ds.format
    preset = PRESETS.get(ds.name.lower())
    if preset is None:
        raise FileNotFoundError(f"dataset {ds.name!r} has no path and no preset")
    root = Path(os.environ.get(DATA_ENV, "data"))
    fname, fmt = preset
    hits = sorted(root.rglob(fname)) if root.is_dir() else []
    if not hits:
        raise FileNotFoundError(f"{fname} not found under {root} (set {DATA_ENV} or dataset.path)")
    return hits[0], fmt if ds.format == "auto" else ds.format


def ingest(config: ExperimentConfig, seed: int) -> tuple[graphs.SnapshotSequence, list[str]]:
    ds = config.dataset
    if ds.name == "synthetic" and not ds.path:
        seq = graphs.synthetic_sequence(stage_seed(seed, "ingest"), ds.nodes, ds.snapshots, ds.density, ds.churn)
        return seq, [str(i) for i in range(ds.nodes)]
    path, fmt = dataset_file(config)
    edges = graphs.parse_edge_list(path, fmt)
    return graphs.build_snapshots(edges, ds.snapshots, ds.binning), list(edges.node_labels)


def make_split(config: ExperimentConfig, seq: graphs.SnapshotSequence) -> graphs.DatasetSplit:
    w = config.window
    return graphs.split_examples(graphs.window_examples(seq, w.n), w.m_tr, w.m_val, w.m_te)


@contextmanager
def _stage(name: str):
    """Re-raise any failure inside the block as a StageError tagged ``name``."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


@dataclass
class Prepared:
    """Victim and data for one master seed, shared by every attack setting."""

    seed: int
    split: graphs.DatasetSplit
    params: dygcn.DyGCNParams
    model_seconds: float


def prepare(config: ExperimentConfig, seed: int, seed_dir: Path | None = None) -> Prepared:
    with _stage("ingest"):
        seq, labels = ingest(config, seed)
        split = make_split(config, seq)
        if seed_dir is not None:
            graphs.save_bundle(seed_dir / "bundle.npz", seq, labels)
    with _stage("train-model"):
        curve: list = []
        t0 = time.perf_counter()
        params = dygcn.train_dygcn(split.train, config.model_config(seed), curve)
        elapsed = time.perf_counter() - t0
        if seed_dir is not None:
            dygcn.save_model(seed_dir / "model.ckpt", params, n=config.window.n)
            write_curve(seed_dir / "loss_curve.csv", curve)
    return Prepared(seed, split, params, elapsed)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "loss"))
        for epoch, loss in curve:
            w.writerow((epoch, repr(float(loss))))


def _row(config, method, seed, scores, seconds, queries) -> ResultRow:
    a = config.attack
    scores = np.asarray(scores, dtype=np.float64)
    return ResultRow(config.dataset.name, method, float(a.mu), float(a.rho), float(a.delta), int(seed),
                     float(scores.mean()), float(scores.std()), float(seconds), int(queries))


def no_attack_row(config, prep: Prepared) -> ResultRow:
    with _stage("evaluate"):
        oracle = dygcn.make_oracle(prep.params)
        t0 = time.perf_counter()
        scores = [_clean_f1(oracle, ex) for ex in prep.split.test]
        return _row(config, "none", prep.seed, scores, time.perf_counter() - t0, oracle.queries)


def _clean_f1(oracle: OracleHandle, ex: graphs.Example) -> float:
    return f1_score(oracle.predict_links([g.adjacency for g in ex.history]), ex.target.adjacency)


def baseline_row(config, prep: Prepared, kind: str, out_dir: Path | None = None) -> ResultRow:
    with _stage("baseline"):
        oracle = dygcn.make_oracle(prep.params)
        bcfg = config.baseline_config(kind, prep.seed)
        t0 = time.perf_counter()
        _, scores, plog = baselines.random_attack(prep.split.test, oracle, bcfg)
        elapsed = time.perf_counter() - t0
        if out_dir is not None:
            plog.write(out_dir / f"perturb_{bcfg.method}.csv")
        return _row(config, bcfg.method, prep.seed, scores, elapsed, oracle.queries)


def train_attack_stage(config, prep: Prepared, out_dir: Path | None = None):
    with _stage("train-attack"):
        oracle = dygcn.make_oracle(prep.params)
        t0 = time.perf_counter()
        res = sac.train_attack(prep.split.validation, oracle, config.attack_config(), config.sac_config(prep.seed))
        elapsed = time.perf_counter() - t0
        if out_dir is not None:
            sac.save_agent(out_dir / "agent.ckpt", res.agent)
            sac.write_training_log(out_dir / "train_log.csv", res.updates)
            res.log.write(out_dir / "perturb_ours-train.csv")
        return res.agent, elapsed, oracle.queries


def ours_row(config, prep: Prepared, agent: sac.Agent, train_seconds: float, train_queries: int,
             out_dir: Path | None = None) -> ResultRow:
    with _stage("evaluate"):
        oracle = dygcn.make_oracle(prep.params)
        ev = sac.evaluate_attack(prep.split.test, oracle, agent, config.attack_config(),
                                 mode=config.attack.eval_mode, seed=stage_seed(prep.seed, "evaluate"))
        if out_dir is not None:
            ev.log.write(out_dir / "perturb_ours.csv")
        # wall clock is the attack-training time; queries cover training and evaluation
        return _row(config, "ours", prep.seed, ev.f1, train_seconds, train_queries + oracle.queries)


def attack_tag(config: ExperimentConfig) -> str:
    a = config.attack
    return f"mu{a.mu:g}-rho{a.rho:g}-delta{a.delta:g}"


def attack_rows(config: ExperimentConfig, prep: Prepared, seed_dir: Path | None = None) -> list[ResultRow]:
    """All four methods for one seed and one attack setting."""
    out_dir = None
    if seed_dir is not None:
        out_dir = seed_dir / attack_tag(config)
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = [no_attack_row(config, prep)]
    rows.append(baseline_row(config, prep, "whole", out_dir))
    rows.append(baseline_row(config, prep, "partial", out_dir))
    agent, secs, queries = train_attack_stage(config, prep, out_dir)
    rows.append(ours_row(config, prep, agent, secs, queries, out_dir))
    if out_dir is not None:
        write_rows(out_dir / "rows.csv", rows)
    return rows


def _seed_dir(run_dir: Path | None, seed: int) -> Path | None:
    if run_dir is None:
        return None
    d = Path(run_dir) / f"seed-{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_experiment(config: ExperimentConfig, run_dir: Path | None = None) -> list[ResultRow]:
    """Full pipeline once per seed; four rows per seed.

    On failure the rows gathered so far are flushed to ``results.csv`` before
    the stage-tagged error propagates.
    """
    return _run_points(config, [config], run_dir)


def sweep(config: ExperimentConfig, parameter: str, values: Sequence[float],
          run_dir: Path | None = None) -> list[ResultRow]:
    """One experiment per value of ``parameter``, others held at ``config``; the victim is trained once per seed."""
    if parameter not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {parameter!r}")
    points = []
    for v in values:
        c = config.copy()
        c.set(f"attack.{parameter}", repr(float(v)))
        c.validate()
        points.append(c)
    if not points:
        return []
    return _run_points(config, points, run_dir)


def _run_points(config: ExperimentConfig, points: Sequence[ExperimentConfig], run_dir) -> list[ResultRow]:
    config.validate()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text())
    rows: list[ResultRow] = []
    try:
        for seed in config.seeds:
            sd = _seed_dir(run_dir, seed)
            prep = prepare(config, seed, sd)
            for point in points:
                rows.extend(attack_rows(point, prep, sd))
                log.info("seed %d %s done", seed, attack_tag(point))
    finally:
        if run_dir is not None and rows:
            write_rows(run_dir / "results.csv", rows)
    return rows


# ------------------------------------------------------------------- report
def _group_mean(rows, keyfn):
    groups: dict = {}
    for r in rows:
        groups.setdefault(keyfn(r), []).append(r)
    return groups


def sweep_series(rows: Sequence[ResultRow], parameter: str) -> list[dict]:
    """Seed-averaged ``f1_mean`` per method against ``parameter``, for each setting of the others.

    Only groups where ``parameter`` takes at least two values are returned.
    """
    others = [p for p in SWEEP_PARAMS if p != parameter]
    out = []
    by_ctx = _group_mean(rows, lambda r: (r.dataset,) + tuple(getattr(r, p) for p in others))
    for ctx, members in sorted(by_ctx.items()):
        xs = sorted({getattr(r, parameter) for r in members})
        if len(xs) < 2:
            continue
        for x in xs:
            rec = {"dataset": ctx[0], **dict(zip(others, ctx[1:])), parameter: x}
            for m in METHODS:
                vals = [r.f1_mean for r in members if r.method == m and getattr(r, parameter) == x]
                rec[m] = float(np.mean(vals)) if vals else float("nan")
            out.append(rec)
    return out


def linear_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line through ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return float("nan")
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float(np.sum(resid**2)) / ss_tot


def emit_report(rows: Sequence[ResultRow], out_dir) -> list[Path]:
    if not rows:
        raise ValueError("emit_report needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    p = out_dir / "results.csv"
    write_rows(p, rows)
    written.append(p)

    lines = []
    by_ds = _group_mean(rows, lambda r: r.dataset)
    for ds, members in by_ds.items():
        for (mu, rho, delta), pts in sorted(_group_mean(members, lambda r: (r.mu, r.rho, r.delta)).items()):
            lines += [f"## {ds} (mu={mu:g}, rho={rho:g}, delta={delta:g})", "",
                      "| method | F1 mean | F1 std over seeds | seeds | relative drop |",
                      "|---|---|---|---|---|"]
            base = [r.f1_mean for r in pts if r.method == "none"]
            base_mean = float(np.mean(base)) if base else float("nan")
            for m in METHODS:
                vals = [r.f1_mean for r in pts if r.method == m]
                if not vals:
                    continue
                mean = float(np.mean(vals))
                drop = (base_mean - mean) / base_mean if base_mean else float("nan")
                lines.append(f"| {m} | {mean:.4f} | {float(np.std(vals)):.4f} | {len(vals)} | {drop:.2%} |")
            lines.append("")
    p = out_dir / "summary.md"
    p.write_text("# Results\n\n" + "\n".join(lines))
    written.append(p)

    for param in SWEEP_PARAMS:
        series = sweep_series(rows, param)
        if not series:
            continue
        p = out_dir / f"sweep_{param}.csv"
        cols = ["dataset"] + [q for q in SWEEP_PARAMS if q != param] + [param, *METHODS]
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for rec in series:
                w.writerow({k: _fmt(v) for k, v in rec.items()})
        written.append(p)

    ours = [r for r in rows if r.method == "ours"]
    if ours:
        p = out_dir / "timing.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("dataset", "mu", "rho", "delta", "seed", "attack_train_seconds", "oracle_queries"))
            for r in ours:
                w.writerow((r.dataset, _fmt(r.mu), _fmt(r.rho), _fmt(r.delta), r.seed,
                            _fmt(r.wall_clock_seconds), r.oracle_queries))
        written.append(p)
    return written


def collect_rows(run_dir) -> list[ResultRow]:
    """Rows from every ``rows.csv`` under ``run_dir`` (last write wins per key)."""
    found: dict = {}
    for path in sorted(Path(run_dir).rglob("rows.csv")):
        for r in read_rows(path):
            found[r.key()] = r
    return list(found.values())
