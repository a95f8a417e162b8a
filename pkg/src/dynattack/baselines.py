"""Random-whole and Random-partial attacks under the same budget rules as the learned attack."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import AttackBudget, PerturbationLog, attacked_indices, select_node_sets
from .graphs import Example
from .metrics import f1_score
from .oracle import OracleHandle

KINDS = ("whole", "partial")


@dataclass
class BaselineConfig:
    kind: str = "partial"
    delta: float = 0.02
    mu: float = 1.0
    rho: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")

    @property
    def method(self) -> str:
        return f"random-{self.kind}"


def _whole_step(adj: np.ndarray, rng: np.random.Generator):
    iu, ju = np.triu_indices(adj.shape[0], k=1)
    present = adj[iu, ju].astype(bool)
    edges = np.flatnonzero(present)
    holes = np.flatnonzero(~present)
    if edges.size == 0 or holes.size == 0:
        return None
    e = edges[rng.integers(edges.size)]
    h = holes[rng.integers(holes.size)]
    return int(iu[e]), int(ju[e]), int(iu[h]), int(ju[h])


def _partial_step(adj: np.ndarray, popular: Sequence[int], neglected: Sequence[int], rng: np.random.Generator):
    du, dv = (int(popular[i]) for i in rng.choice(len(popular), size=2, replace=False))
    au, av = (int(neglected[i]) for i in rng.choice(len(neglected), size=2, replace=False))
    return du, dv, au, av


def _attack_one(example: Example, config: BaselineConfig, ex_id: int, plog: PerturbationLog) -> Example:
    rng = np.random.default_rng([config.seed, ex_id])
    history = [np.array(g.adjacency, copy=True) for g in example.history]
    sets = select_node_sets(example, config.mu, config.rho) if config.kind == "partial" else None
    if sets is not None and sets.size < 2:
        raise ValueError("Random-partial needs at least two nodes per set")
    for j in attacked_indices(example.n, config.mu):
        adj = history[j]
        budget = AttackBudget.for_graph(config.delta, int(np.triu(adj, 1).sum()))
        flips = 0
        for k in range(1, budget.steps + 1):
            if config.kind == "whole":
                nodes = _whole_step(adj, rng)
            else:
                nodes = _partial_step(adj, sets.popular, sets.neglected, rng)
            applied = False
            if nodes is not None:
                du, dv, au, av = nodes
                valid = adj[du, dv] == 1 and adj[au, av] == 0 and du != dv and au != av
                if valid and flips + 2 <= budget.max_flips:
                    adj[du, dv] = adj[dv, du] = 0
                    adj[au, av] = adj[av, au] = 1
                    flips += 2
                    applied = True
            plog.record(config.method, ex_id, j, 0, k, nodes or (-1, -1, -1, -1), applied)
    return example.with_history(history)


def random_attack(examples: Sequence[Example], oracle: OracleHandle, config: BaselineConfig):
    """Attack every example; returns ``(perturbed examples, per-example F1, log)``."""
    plog = PerturbationLog()
    perturbed, scores = [], []
    for ex_id, ex in enumerate(examples):
        pex, f1, one = _single(ex, oracle, config, ex_id)
        plog.extend(one)
        perturbed.append(pex)
        scores.append(f1)
    return perturbed, scores, plog


def _single(example: Example, oracle: OracleHandle, config: BaselineConfig, ex_id: int):
    plog = PerturbationLog()
    pex = _attack_one(example, config, ex_id, plog)
    pred = oracle.predict_links([g.adjacency for g in pex.history])
    return pex, f1_score(pred, example.target.adjacency), plog


def random_whole(example: Example, oracle: OracleHandle, config: BaselineConfig, ex_id: int = 0):
    """Returns ``(perturbed example, F1, log)``; ``config.kind`` is ignored."""
    cfg = BaselineConfig("whole", config.delta, config.mu, config.rho, config.seed)
    return _single(example, oracle, cfg, ex_id)


def random_partial(example: Example, oracle: OracleHandle, config: BaselineConfig, ex_id: int = 0):
    """Returns ``(perturbed example, F1, log)``; ``config.kind`` is ignored."""
    cfg = BaselineConfig("partial", config.delta, config.mu, config.rho, config.seed)
    return _single(example, oracle, cfg, ex_id)
