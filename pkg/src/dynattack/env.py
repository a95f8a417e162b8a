"""Attack environment over one example: node selection, states, actions, rewards.

The environment only talks to the victim through :class:`OracleHandle`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graphs import Example, averaged_degrees
from .metrics import f1_score, mismatch_count
from .oracle import OracleHandle

LOG_FIELDS = (
    "method", "example", "graph", "episode", "step",
    "del_u", "del_v", "add_u", "add_v", "applied",
    "err_before", "err_after", "f_before", "f_after", "reward",
)


@dataclass(frozen=True)
class NodeSets:
    """Popular / neglected node ids; position ``i`` (1-based) maps to ``popular[i-1]``."""

    popular: tuple[int, ...]
    neglected: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.popular)

    def index_map(self) -> dict[str, dict[int, int]]:
        return {
            "popular": {i + 1: v for i, v in enumerate(self.popular)},
            "neglected": {i + 1: v for i, v in enumerate(self.neglected)},
        }


@dataclass(frozen=True)
class Action:
    """Two positions into the popular set (delete) and two into the neglected set (add)."""

    delete_pair: tuple[int, int]
    add_pair: tuple[int, int]


@dataclass(frozen=True)
class AttackBudget:
    max_flips: int
    steps: int

    @classmethod
    def for_graph(cls, delta: float, edge_count: int) -> "AttackBudget":
        return cls(max_flips=_floor(delta * edge_count), steps=episode_steps(delta, edge_count))


def _floor(x: float) -> int:
    # guards products like 0.02 * 1000 landing a hair under an integer
    return int(math.floor(x + 1e-9))


def attacked_indices(n: int, mu: float) -> list[int]:
    """The most recent ``floor(mu * n)`` history positions (at least one)."""
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    k = min(n, max(1, _floor(mu * n)))
    return list(range(n - k, n))


def select_node_sets(example: Example, mu: float, rho: float) -> NodeSets:
    """Rank nodes by mean degree over the clean, unattacked history graphs.

    With ``mu = 1`` no graph is left unattacked, so all clean history graphs
    are used instead.
    """
    if not 0.0 < rho < 0.5:
        raise ValueError(f"rho must lie in (0, 0.5), got {rho}")
    n = example.n
    attacked = set(attacked_indices(n, mu))
    observed = [example.history[i] for i in range(n) if i not in attacked]
    if not observed:
        observed = list(example.history)
    return node_sets_from_degrees(averaged_degrees(observed), rho)


def node_sets_from_degrees(degrees: np.ndarray, rho: float) -> NodeSets:
    nv = degrees.shape[0]
    k = _floor(rho * nv)
    if k == 0:
        raise ValueError(f"rho={rho} selects no nodes out of {nv}")
    ids = np.arange(nv)
    desc = np.lexsort((ids, -degrees))
    popular = [int(v) for v in desc[:k]]
    taken = set(popular)
    asc = np.lexsort((ids, degrees))
    neglected = [int(v) for v in asc if int(v) not in taken][:k]
    return NodeSets(tuple(popular), tuple(neglected))


def embed_state(perturbed: np.ndarray, sets: NodeSets, gamma: float = 0.2) -> np.ndarray:
    """ReLU of the adjacency applied to smoothed set indicators, restricted to each set."""
    a = np.asarray(perturbed, dtype=np.float64)
    nv = a.shape[0]
    if a.shape != (nv, nv):
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    parts = []
    for members in (sets.popular, sets.neglected):
        idx = np.asarray(members, dtype=int)
        if idx.size and idx.max() >= nv:
            raise ValueError("node set refers to nodes outside the graph")
        w = np.full(nv, gamma / nv)
        w[idx] += 1.0 - gamma
        parts.append(np.maximum((a @ w)[idx], 0.0))
    return np.concatenate(parts)


def action_nodes(action: Action, sets: NodeSets) -> tuple[int, int, int, int]:
    k = sets.size
    for pos in action.delete_pair + action.add_pair:
        if not 1 <= int(pos) <= k:
            raise ValueError(f"position {pos} outside 1..{k}")
    (p1, p2), (q1, q2) = action.delete_pair, action.add_pair
    return (sets.popular[p1 - 1], sets.popular[p2 - 1], sets.neglected[q1 - 1], sets.neglected[q2 - 1])


def apply_action(perturbed: np.ndarray, action: Action, sets: NodeSets) -> tuple[np.ndarray, bool]:
    """Delete one popular-pair edge and add one neglected-pair edge, atomically.

    Returns the input unchanged with ``applied=False`` if either half is
    invalid (missing edge to delete, existing edge to add, or a self-pair).
    """
    du, dv, au, av = action_nodes(action, sets)
    if du == dv or au == av or not perturbed[du, dv] or perturbed[au, av]:
        return perturbed, False
    out = np.array(perturbed, copy=True)
    out[du, dv] = out[dv, du] = 0
    out[au, av] = out[av, au] = 1
    return out, True


def compute_reward(f_before: float, f_after: float, err_before: int, err_after: int, mu: float, n: int) -> float:
    if err_after > err_before:
        return f_before - f_after
    return -mu * n


def episode_steps(delta: float, edge_count: int) -> int:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return max(1, _floor(delta * edge_count / 2.0))


def flipped_pairs(a: np.ndarray, b: np.ndarray) -> int:
    return mismatch_count(a, b)


@dataclass
class StepResult:
    state: np.ndarray
    reward: float | None
    done: bool
    applied: bool
    nodes: tuple[int, int, int, int]
    err_before: int | None
    err_after: int | None
    f_before: float | None
    f_after: float | None


class AttackEnv:
    """Sequential attack on the history graphs of one example.

    Usage per attacked graph ``j``: ``begin_graph(j)``, then any number of
    episodes, each ``reset()`` followed by ``step(action)`` until ``done``.
    ``commit(adj)`` fixes the perturbation of graph ``j`` before moving on.
    Earlier graphs keep their committed perturbations while later ones are
    attacked.
    """

    def __init__(self, example: Example, oracle: OracleHandle, mu: float, rho: float,
                 delta: float, gamma: float = 0.2, example_id: int = 0):
        self.example = example
        self.oracle = oracle
        self.mu, self.rho, self.delta, self.gamma = mu, rho, delta, gamma
        self.example_id = example_id
        self.n = example.n
        self.targets = attacked_indices(self.n, mu)
        self.sets = select_node_sets(example, mu, rho)
        self.history = [np.array(g.adjacency, copy=True) for g in example.history]
        self.truth = example.target.adjacency
        self.graph = None
        self.clean = None
        self.budget = None
        self.k = 0
        self.flips = 0
        self._score = None
        self._clean_score = None

    # oracle access ---------------------------------------------------------
    def score(self) -> tuple[int, float]:
        pred = self.oracle.predict_links(self.history)
        return mismatch_count(pred, self.truth), f1_score(pred, self.truth)

    @property
    def current(self) -> np.ndarray:
        return self.history[self.graph]

    # episode control -------------------------------------------------------
    def begin_graph(self, j: int) -> None:
        if j not in self.targets:
            raise ValueError(f"graph {j} is not among the attacked graphs {self.targets}")
        self.graph = j
        self.clean = np.array(self.example.history[j].adjacency, copy=True)
        self.history[j] = self.clean.copy()
        edges = int(np.triu(self.clean, 1).sum())
        self.budget = AttackBudget.for_graph(self.delta, edges)
        self._clean_score = None

    def reset(self, score: bool = True) -> np.ndarray:
        """Restore the clean graph; ``score=False`` skips the baseline oracle query."""
        self.history[self.graph] = self.clean.copy()
        self.k = 0
        self.flips = 0
        if score and self._clean_score is None:
            self._clean_score = self.score()
        self._score = self._clean_score if score else None
        return self.state()

    def state(self) -> np.ndarray:
        return embed_state(self.current, self.sets, self.gamma)

    def step(self, action: Action, compute_reward_: bool = True) -> StepResult:
        if self.graph is None or self.k >= self.budget.steps:
            raise RuntimeError("step() called outside an open episode")
        nodes = action_nodes(action, self.sets)
        new, applied = apply_action(self.current, action, self.sets)
        if applied and self.flips + 2 > self.budget.max_flips:
            new, applied = self.current, False
        if compute_reward_ and self._score is None:
            raise RuntimeError("rewards need an episode opened with reset(score=True)")
        err_b, f_b = self._score if compute_reward_ else (None, None)
        if applied:
            self.history[self.graph] = new
            self.flips += 2
            if compute_reward_:
                self._score = self.score()
        err_a, f_a = self._score if compute_reward_ else (None, None)
        reward = compute_reward(f_b, f_a, err_b, err_a, self.mu, self.n) if compute_reward_ else None
        self.k += 1
        return StepResult(self.state(), reward, self.k >= self.budget.steps, applied, nodes, err_b, err_a, f_b, f_a)

    def commit(self, adjacency: np.ndarray) -> None:
        self.history[self.graph] = np.array(adjacency, copy=True)

    def perturbed_example(self) -> Example:
        return self.example.with_history(self.history)


class PerturbationLog:
    """Append-only per-step audit trail, written as CSV."""

    def __init__(self):
        self.rows: list[dict] = []

    def record(self, method: str, example: int, graph: int, episode: int, step: int,
               nodes: Sequence[int], applied: bool, err_before=None, err_after=None,
               f_before=None, f_after=None, reward=None) -> None:
        du, dv, au, av = (int(x) for x in nodes)
        self.rows.append({
            "method": method, "example": example, "graph": graph, "episode": episode, "step": step,
            "del_u": du, "del_v": dv, "add_u": au, "add_v": av, "applied": int(bool(applied)),
            "err_before": "" if err_before is None else int(err_before),
            "err_after": "" if err_after is None else int(err_after),
            "f_before": "" if f_before is None else repr(float(f_before)),
            "f_after": "" if f_after is None else repr(float(f_after)),
            "reward": "" if reward is None else repr(float(reward)),
        })

    def extend(self, other: "PerturbationLog") -> None:
        self.rows.extend(other.rows)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            w.writerows(self.rows)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
