"""DyGCN victim: per-snapshot GCN stacks feeding a two-layer LSTM and a pair-scoring head.

Routing: at every time step the GCN stack maps the normalised adjacency (with
identity node features) to a ``|V| x hidden`` embedding. Each node's row is fed
to the LSTM chain as one batch element, with weights shared across nodes and
state carried across time. The final hidden state of the last layer goes
through a dense head ``hidden -> |V|`` with a logistic output, giving one row
of scores per node. Scores are symmetrised and the diagonal zeroed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .graphs import Example
from .metrics import f1_score
from .oracle import OracleHandle

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class ModelConfig:
    layers: int = 3
    hidden: int = 64
    lstm_layers: int = 2
    beta: float = 10.0
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0


@dataclass
class DyGCNParams:
    gcn: list[nn.Parameter]
    lstm: list[nn.LSTMWeights]
    head_w: nn.Parameter
    head_b: nn.Parameter
    num_nodes: int
    config: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def init(cls, num_nodes: int, config: ModelConfig) -> "DyGCNParams":
        rng = np.random.default_rng(config.seed)
        h = config.hidden
        dims = [num_nodes] + [h] * config.layers
        gcn = [nn.Parameter(f"gcn.w{l}", nn.glorot(rng, dims[l], dims[l + 1])) for l in range(config.layers)]
        lstm = [nn.LSTMWeights.init(rng, h, h, prefix=f"lstm{k}") for k in range(config.lstm_layers)]
        head_w = nn.Parameter("head.w", nn.glorot(rng, h, num_nodes))
        head_b = nn.Parameter("head.b", np.zeros((1, num_nodes)))
        return cls(gcn, lstm, head_w, head_b, num_nodes, config)

    def parameters(self) -> list[nn.Parameter]:
        out = list(self.gcn)
        for cell in self.lstm:
            out += cell.parameters()
        return out + [self.head_w, self.head_b]

    def copy(self) -> "DyGCNParams":
        clone = DyGCNParams.init(self.num_nodes, self.config)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.value[...] = src.value
        return clone


@dataclass
class PredictionScores:
    z: np.ndarray
    a_hat: np.ndarray


def threshold(z: np.ndarray) -> np.ndarray:
    a = (z > THRESHOLD).astype(np.uint8)
    np.fill_diagonal(a, 0)
    return a


def _forward(params: DyGCNParams, a_norms: Sequence[np.ndarray]):
    nv = params.num_nodes
    hid = params.config.hidden
    if any(a.shape != (nv, nv) for a in a_norms):
        raise ValueError(f"history graphs must all have {nv} nodes")
    if not a_norms:
        raise ValueError("history must hold at least one graph")
    hs = [np.zeros((nv, hid)) for _ in params.lstm]
    cs = [np.zeros((nv, hid)) for _ in params.lstm]
    steps = []
    for a in a_norms:
        gcn_caches = []
        x = None
        for w in params.gcn:
            x, cache = nn.gcn_forward(a, x, w, "relu")
            gcn_caches.append(cache)
        lstm_caches = []
        for k, cell in enumerate(params.lstm):
            (hs[k], cs[k]), cache = nn.lstm_step_forward(x, hs[k], cs[k], cell)
            lstm_caches.append(cache)
            x = hs[k]
        steps.append((gcn_caches, lstm_caches))
    raw, head_cache = nn.dense_forward(x, params.head_w, params.head_b, "sigmoid")
    z = 0.5 * (raw + raw.T)
    np.fill_diagonal(z, 0.0)
    return z, (steps, head_cache)


def _backward(params: DyGCNParams, dz: np.ndarray, caches) -> None:
    steps, head_cache = caches
    draw = 0.5 * (dz + dz.T)
    np.fill_diagonal(draw, 0.0)
    dy = nn.dense_backward(draw, head_cache, params.head_w, params.head_b)
    nl = len(params.lstm)
    dh = [np.zeros_like(dy) for _ in range(nl)]
    dc = [np.zeros_like(dy) for _ in range(nl)]
    dh[-1] = dh[-1] + dy
    for gcn_caches, lstm_caches in reversed(steps):
        dx = None
        for k in reversed(range(nl)):
            if dx is not None:
                dh[k] = dh[k] + dx
            dx, dh[k], dc[k] = nn.lstm_step_backward(dh[k], dc[k], lstm_caches[k], params.lstm[k])
        for l in reversed(range(len(params.gcn))):
            dx = nn.gcn_backward(dx, gcn_caches[l], params.gcn[l])


def forward_sequence(params: DyGCNParams, history: Sequence[np.ndarray]) -> PredictionScores:
    z, _ = _forward(params, [nn.normalize_adjacency(a) for a in history])
    return PredictionScores(z, threshold(z))


def weighted_loss(z: np.ndarray, target: np.ndarray, beta: float = 10.0):
    """Weighted squared reconstruction error and its gradient w.r.t. ``z``.

    Entries where the target has an edge are weighted by ``beta``.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(target, dtype=np.float64)
    if z.shape != a.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {a.shape}")
    b = np.where(a > 0, beta, 1.0)
    diff = z - a
    return float(np.sum(diff * diff * b)), 2.0 * diff * b


def example_loss(params: DyGCNParams, a_norms, target, beta, backward=True) -> float:
    z, caches = _forward(params, a_norms)
    loss, dz = weighted_loss(z, target, beta)
    if backward:
        _backward(params, dz, caches)
    return loss


class TrainingDiverged(FloatingPointError):
    pass


def train_dygcn(
    examples: Sequence[Example], config: ModelConfig | None = None, curve: list | None = None
) -> DyGCNParams:
    """Full-batch Adam on the summed weighted loss over ``examples``.

    ``curve`` (if given) receives one ``(epoch, loss)`` pair per epoch, where the
    loss is measured before that epoch's update.
    """
    config = config or ModelConfig()
    if not examples:
        raise ValueError("train_dygcn needs at least one example")
    nv = examples[0].num_nodes
    params = DyGCNParams.init(nv, config)
    prepared = [
        ([nn.normalize_adjacency(g.adjacency) for g in ex.history], ex.target.adjacency.astype(np.float64))
        for ex in examples
    ]
    plist = params.parameters()
    opt = nn.Adam(plist, lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        nn.zero_grads(plist)
        total = 0.0
        for a_norms, target in prepared:
            total += example_loss(params, a_norms, target, config.beta)
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        if curve is not None:
            curve.append((epoch, total))
        if epoch == 1 or epoch % 25 == 0 or epoch == config.epochs:
            log.info("dygcn epoch %d loss %.4f", epoch, total)
        opt.step()
    return params


def make_oracle(params: DyGCNParams) -> OracleHandle:
    frozen = params.copy()

    def predict(history):
        return forward_sequence(frozen, history).a_hat

    return OracleHandle(predict)


def evaluate_f1(params: DyGCNParams, examples: Sequence[Example]) -> list[float]:
    return [
        f1_score(forward_sequence(params, [g.adjacency for g in ex.history]).a_hat, ex.target.adjacency)
        for ex in examples
    ]


def save_model(path, params: DyGCNParams, n: int | None = None) -> None:
    manifest = {"model": asdict(params.config), "num_nodes": params.num_nodes}
    if n is not None:
        manifest["n"] = n
    nn.save_checkpoint(path, params.parameters(), manifest)


def load_model(path) -> DyGCNParams:
    tensors, manifest = nn.load_checkpoint(path)
    config = ModelConfig(**manifest["model"])
    params = DyGCNParams.init(int(manifest["num_nodes"]), config)
    nn.assign(params.parameters(), tensors)
    return params
