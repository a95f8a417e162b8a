"""Temporal edge lists, graph snapshots and sliding-window examples."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BUNDLE_VERSION = 1

FORMATS = ("auto", "konect", "sociopatterns", "uvt")


class ParseError(ValueError):
    """Raised for malformed edge-list files."""


@dataclass(frozen=True)
class GraphSnapshot:
    """One undirected, unweighted graph over a fixed node set.

    The adjacency is stored dense as ``uint8`` and frozen (read-only) so that
    snapshots can be shared between examples without defensive copies.
    """

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.uint8, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diagonal(a)):
            raise ValueError("adjacency must have a zero diagonal")
        if a.size and a.max() > 1:
            raise ValueError("adjacency must be binary")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edge_count(self) -> int:
        return int(np.triu(self.adjacency, k=1).sum())

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.float64)

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[tuple[int, int]]) -> "GraphSnapshot":
        a = np.zeros((num_nodes, num_nodes), dtype=np.uint8)
        for u, v in edges:
            if u != v:
                a[u, v] = a[v, u] = 1
        return cls(a)

    @classmethod
    def empty(cls, num_nodes: int) -> "GraphSnapshot":
        return cls(np.zeros((num_nodes, num_nodes), dtype=np.uint8))


@dataclass(frozen=True)
class SnapshotSequence:
    snapshots: tuple[GraphSnapshot, ...]

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if snaps:
            n = snaps[0].num_nodes
            if any(s.num_nodes != n for s in snaps):
                raise ValueError("all snapshots must share one node set")
        object.__setattr__(self, "snapshots", snaps)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i):
        return self.snapshots[i]

    def __iter__(self):
        return iter(self.snapshots)

    @property
    def num_nodes(self) -> int:
        return self.snapshots[0].num_nodes if self.snapshots else 0

    def equals(self, other: "SnapshotSequence") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(a.adjacency, b.adjacency) for a, b in zip(self, other)
        )


@dataclass(frozen=True)
class Example:
    """``n`` historical snapshots and the snapshot that immediately follows them."""

    history: tuple[GraphSnapshot, ...]
    target: GraphSnapshot
    origin_time: int

    @property
    def n(self) -> int:
        return len(self.history)

    @property
    def num_nodes(self) -> int:
        return self.target.num_nodes

    def with_history(self, adjacencies: Sequence[np.ndarray]) -> "Example":
        return Example(tuple(GraphSnapshot(a) for a in adjacencies), self.target, self.origin_time)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Example, ...]
    validation: tuple[Example, ...]
    test: tuple[Example, ...]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


@dataclass
class EdgeList:
    """Parsed temporal edge events with node ids re-indexed to ``0..|V|-1``."""

    events: list[tuple[int, int, int]]
    node_labels: list[str] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.node_labels)


def _parse_timestamp(tok: str) -> int:
    try:
        return int(tok)
    except ValueError:
        return int(float(tok))


def parse_edge_list(path, fmt: str = "auto") -> EdgeList:
    """Read a whitespace (or comma) separated temporal edge list.

    ``konect`` lines are ``u v [weight] t`` (timestamp last), ``sociopatterns``
    lines are ``t u v ...`` and ``uvt`` lines are ``u v t``. With ``auto`` the
    format is chosen from the first data line: three columns mean
    SocioPatterns, four or more mean KONECT. Weights are ignored.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not os.path.exists(path):
        raise FileNotFoundError(path)

    index: dict[str, int] = {}
    labels: list[str] = []
    events: list[tuple[int, int, int]] = []
    ncols = None
    saw_data = False

    def node(tok):
        if tok not in index:
            index[tok] = len(labels)
            labels.append(tok)
        return index[tok]

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line[0] in "%#":
                continue
            toks = line.replace(",", " ").split()
            if ncols is None:
                ncols = len(toks)
                if fmt == "auto":
                    if ncols == 3:
                        fmt = "sociopatterns"
                    elif ncols >= 4:
                        fmt = "konect"
                    else:
                        raise ParseError(f"line {lineno}: cannot detect format from {ncols} columns")
            if len(toks) != ncols:
                raise ParseError(f"line {lineno}: expected {ncols} columns, got {len(toks)}")
            try:
                if fmt == "konect":
                    if ncols < 3:
                        raise ParseError(f"line {lineno}: KONECT lines need a timestamp column")
                    u, v, t = toks[0], toks[1], _parse_timestamp(toks[-1])
                elif fmt == "sociopatterns":
                    if ncols < 3:
                        raise ParseError(f"line {lineno}: SocioPatterns lines need 't u v'")
                    t, u, v = _parse_timestamp(toks[0]), toks[1], toks[2]
                else:
                    if ncols < 3:
                        raise ParseError(f"line {lineno}: 'uvt' lines need three columns")
                    u, v, t = toks[0], toks[1], _parse_timestamp(toks[2])
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(f"line {lineno}: bad timestamp in {line!r}") from exc
            saw_data = True
            iu, iv = node(u), node(v)
            if iu != iv:
                events.append((iu, iv, t))

    if not saw_data:
        raise ParseError(f"{path}: no edge events")
    return EdgeList(events, labels)


def build_snapshots(
    edges: EdgeList, num_snapshots: int, binning: str = "equal-count"
) -> SnapshotSequence:
    """Bin time-ordered edge events into ``num_snapshots`` consecutive graphs."""
    if num_snapshots < 1:
        raise ValueError("num_snapshots must be >= 1")
    events = sorted(edges.events, key=lambda e: e[2])
    if num_snapshots > len(events):
        raise ValueError(f"cannot build {num_snapshots} snapshots from {len(events)} events")
    nv = edges.num_nodes
    times = np.array([e[2] for e in events], dtype=np.float64)

    if binning == "equal-count":
        bins = np.array_split(np.arange(len(events)), num_snapshots)
    elif binning == "equal-time":
        t0, t1 = times[0], times[-1]
        if t1 == t0:
            which = np.zeros(len(events), dtype=int)
        else:
            which = np.floor((times - t0) / (t1 - t0) * num_snapshots).astype(int)
            which = np.minimum(which, num_snapshots - 1)
        bins = [np.flatnonzero(which == b) for b in range(num_snapshots)]
    else:
        raise ValueError(f"unknown binning {binning!r}")

    snaps = []
    for idx in bins:
        a = np.zeros((nv, nv), dtype=np.uint8)
        for i in idx:
            u, v, _ = events[i]
            a[u, v] = a[v, u] = 1
        snaps.append(GraphSnapshot(a))
    return SnapshotSequence(tuple(snaps))


def window_examples(seq: SnapshotSequence, n: int) -> list[Example]:
    """Stride-1 sliding windows: ``len(seq) - n`` examples of ``n`` graphs plus a target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(seq) < n + 1:
        raise ValueError(f"sequence of length {len(seq)} too short for windows of n={n}")
    return [
        Example(tuple(seq.snapshots[t - n:t]), seq.snapshots[t], t)
        for t in range(n, len(seq))
    ]


def split_examples(examples: Sequence[Example], m_tr: int, m_val: int, m_te: int) -> DatasetSplit:
    if min(m_tr, m_val, m_te) < 0:
        raise ValueError("split sizes must be non-negative")
    if m_tr + m_val + m_te > len(examples):
        raise ValueError(
            f"split ({m_tr}, {m_val}, {m_te}) needs {m_tr + m_val + m_te} examples, have {len(examples)}"
        )
    ex = list(examples)
    return DatasetSplit(
        tuple(ex[:m_tr]),
        tuple(ex[m_tr:m_tr + m_val]),
        tuple(ex[m_tr + m_val:m_tr + m_val + m_te]),
    )


def averaged_degrees(snapshots: Sequence) -> np.ndarray:
    """Per-node degree averaged over ``snapshots`` (GraphSnapshot or raw adjacency)."""
    if len(snapshots) == 0:
        raise ValueError("averaged_degrees needs at least one snapshot")
    mats = [s.adjacency if isinstance(s, GraphSnapshot) else np.asarray(s) for s in snapshots]
    nv = mats[0].shape[0]
    if any(m.shape != (nv, nv) for m in mats):
        raise ValueError("snapshots differ in node count")
    total = np.zeros(nv, dtype=np.float64)
    for m in mats:
        total += m.sum(axis=1)
    return total / len(mats)


def synthetic_sequence(
    seed: int,
    num_nodes: int,
    num_snapshots: int,
    base_density: float,
    churn_rate: float,
) -> SnapshotSequence:
    """Slowly evolving random graph for tests and the desk-scale fixture.

    Snapshot 0 is G(n, p) with ``p = base_density``. Every following snapshot
    re-draws a ``churn_rate`` fraction of the node pairs (chosen uniformly)
    from Bernoulli(``base_density``), so the expected density stays put.
    """
    for name, val in (("base_density", base_density), ("churn_rate", churn_rate)):
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {val}")
    if num_nodes < 1 or num_snapshots < 1:
        raise ValueError("num_nodes and num_snapshots must be >= 1")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(num_nodes, k=1)
    npairs = iu[0].size
    state = rng.random(npairs) < base_density
    nchurn = int(round(churn_rate * npairs))
    snaps = []
    for t in range(num_snapshots):
        if t > 0 and nchurn:
            pick = rng.choice(npairs, size=nchurn, replace=False)
            state = state.copy()
            state[pick] = rng.random(nchurn) < base_density
        a = np.zeros((num_nodes, num_nodes), dtype=np.uint8)
        a[iu] = state
        a = a | a.T
        snaps.append(GraphSnapshot(a))
    return SnapshotSequence(tuple(snaps))


def save_bundle(path, seq: SnapshotSequence, node_labels: Sequence[str] = ()) -> None:
    """Write snapshots to a versioned ``.npz`` bundle (bit-exact round trip)."""
    stack = np.stack([s.adjacency for s in seq]) if len(seq) else np.zeros((0, 0, 0), np.uint8)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.array(BUNDLE_VERSION),
            adjacency=stack,
            node_labels=np.array(list(node_labels), dtype=str),
        )


def load_bundle(path) -> tuple[SnapshotSequence, list[str]]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != BUNDLE_VERSION:
            raise ValueError(f"unsupported snapshot bundle version {version}")
        stack = z["adjacency"]
        labels = [str(x) for x in z["node_labels"]]
    return SnapshotSequence(tuple(GraphSnapshot(a) for a in stack)), labels
