"""Finite-difference checks for every hand-written backward pass, on 6-node fixtures."""

from __future__ import annotations

import numpy as np

from . import dygcn, nn, sac
from .graphs import synthetic_sequence

NODES = 6


def _fixture_graph(rng: np.random.Generator, nv: int = NODES) -> np.ndarray:
    a = np.triu((rng.random((nv, nv)) < 0.5).astype(np.float64), 1)
    return a + a.T


def check_dense(seed: int = 0, **kw) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((NODES, 5))
    w = nn.Parameter("w", rng.standard_normal((5, 3)))
    b = nn.Parameter("b", rng.standard_normal((1, 3)))
    proj = rng.standard_normal((NODES, 3))
    reports = []
    for act in ("identity", "relu", "sigmoid", "tanh"):
        def closure(act=act):
            nn.zero_grads([w, b])
            out, cache = nn.dense_forward(x, w, b, act)
            nn.dense_backward(proj, cache, w, b)
            return float(np.sum(out * proj))
        reports.append(nn.gradient_check(closure, [w, b], **kw))
    return _worst(reports)


def check_gcn(seed: int = 0, **kw) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    a = nn.normalize_adjacency(_fixture_graph(rng))
    w0 = nn.Parameter("w0", rng.standard_normal((NODES, 4)))
    w1 = nn.Parameter("w1", rng.standard_normal((4, 3)))
    proj = rng.standard_normal((NODES, 3))

    def closure():
        nn.zero_grads([w0, w1])
        h, c0 = nn.gcn_forward(a, None, w0, "tanh")
        out, c1 = nn.gcn_forward(a, h, w1, "relu")
        dh = nn.gcn_backward(proj, c1, w1)
        nn.gcn_backward(dh, c0, w0)
        return float(np.sum(out * proj))

    return nn.gradient_check(closure, [w0, w1], **kw)


def check_lstm(seed: int = 0, **kw) -> nn.GradCheckReport:
    """Two chained steps so the recurrent paths through ``h`` and ``c`` are exercised."""
    rng = np.random.default_rng(seed)
    cell = nn.LSTMWeights.init(rng, 4, 3)
    cell.b.value += 0.1 * rng.standard_normal(cell.b.value.shape)
    xs = [rng.standard_normal((NODES, 4)) for _ in range(2)]
    h0 = rng.standard_normal((NODES, 3))
    c0 = rng.standard_normal((NODES, 3))
    ph, pc = rng.standard_normal((NODES, 3)), rng.standard_normal((NODES, 3))

    def closure():
        nn.zero_grads(cell.parameters())
        h, c, caches = h0, c0, []
        for x in xs:
            (h, c), cache = nn.lstm_step_forward(x, h, c, cell)
            caches.append(cache)
        dh, dc = ph, pc
        for cache in reversed(caches):
            _, dh, dc = nn.lstm_step_backward(dh, dc, cache, cell)
        return float(np.sum(h * ph) + np.sum(c * pc))

    return nn.gradient_check(closure, cell.parameters(), **kw)


def check_dygcn(seed: int = 0, **kw) -> nn.GradCheckReport:
    seq = synthetic_sequence(seed, NODES, 4, 0.5, 0.3)
    cfg = dygcn.ModelConfig(layers=2, hidden=5, lstm_layers=2, seed=seed)
    params = dygcn.DyGCNParams.init(NODES, cfg)
    rng = np.random.default_rng(seed)
    for p in params.parameters():
        p.value += 0.5 * rng.standard_normal(p.value.shape)
    a_norms = [nn.normalize_adjacency(seq[t].adjacency) for t in range(3)]
    target = seq[3].adjacency.astype(np.float64)
    plist = params.parameters()

    def closure():
        nn.zero_grads(plist)
        return dygcn.example_loss(params, a_norms, target, cfg.beta)

    return nn.gradient_check(closure, plist, **kw)


def _sac_fixture(seed: int, batch: int = 5):
    k = int(0.45 * NODES)  # rho = 0.45 -> two positions per set
    rng = np.random.default_rng(seed)
    policy = sac.Policy(k, 8, rng)
    q = sac.QNetwork(k, 8, rng)
    states = np.abs(rng.standard_normal((batch, 2 * k)))
    # small noise keeps draws inside [1, k] so the clip is inactive
    eps = 0.3 * rng.standard_normal((batch, 4))
    return k, rng, policy, q, states, eps


def check_policy_loss(seed: int = 0, **kw) -> nn.GradCheckReport:
    _, _, policy, q, states, eps = _sac_fixture(seed)
    alpha = 0.7
    plist = policy.parameters()

    def closure():
        nn.zero_grads(plist + q.parameters())
        return sac.policy_loss(policy, q, alpha, states, eps)

    return nn.gradient_check(closure, plist, **kw)


def check_q_loss(seed: int = 0, **kw) -> nn.GradCheckReport:
    k, rng, policy, q, states, eps = _sac_fixture(seed)
    mean, std, _ = policy.forward(states)
    raw = np.clip(mean + std * eps, 1.0, k)
    batch = sac.Batch(states, raw, rng.standard_normal(len(states)),
                      np.abs(rng.standard_normal(states.shape)), np.array([False, True, False, False, True]))
    target = sac.soft_q_target(q, policy, 0.7, batch, 0.99, 0.3 * rng.standard_normal((len(states), 4)))
    plist = q.parameters()

    def closure():
        nn.zero_grads(plist)
        return sac.q_regression_loss(q, batch.states, batch.raw, target)

    return nn.gradient_check(closure, plist, **kw)


def check_alpha_loss(seed: int = 0, **kw) -> nn.GradCheckReport:
    rng = np.random.default_rng(seed)
    log_alpha = nn.Parameter("log_alpha", np.array([[rng.normal()]]))
    logp = rng.standard_normal(7)

    def closure():
        log_alpha.zero_grad()
        return sac.alpha_loss(log_alpha, logp, -2.0)

    return nn.gradient_check(closure, [log_alpha], **kw)


def _worst(reports) -> nn.GradCheckReport:
    return max(reports, key=lambda r: (not r.passed, r.max_rel_error))


CHECKS = {
    "dense": check_dense,
    "gcn": check_gcn,
    "lstm": check_lstm,
    "dygcn-loss": check_dygcn,
    "policy-loss": check_policy_loss,
    "q-loss": check_q_loss,
    "alpha-loss": check_alpha_loss,
}


def run_suite(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> dict[str, nn.GradCheckReport]:
    return {name: fn(seed, h=h, tol=tol, max_entries=None, rng=np.random.default_rng(seed))
            for name, fn in CHECKS.items()}
