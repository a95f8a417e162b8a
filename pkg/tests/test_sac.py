import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from dynattack import dygcn, gradsuite, nn, sac
from dynattack.sac import AttackConfig, SACConfig


def _zero(params):
    for p in params:
        p.value[...] = 0.0


# truncated normal --------------------------------------------------------------

@pytest.mark.parametrize("mean,std,x", [(3.0, 2.0, 4.2), (-5.0, 0.5, 1.3), (40.0, 3.0, 9.9), (5.5, 0.01, 5.49)])
def test_logpdf_matches_quadrature(mean, std, x):
    low, high = 1.0, 10.0
    pdf = lambda t: math.exp(-0.5 * ((t - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))
    mass, _ = integrate.quad(pdf, low, high, points=[min(max(mean, low), high)], epsabs=0, epsrel=1e-13, limit=200)
    expect = math.log(pdf(x) / mass) if pdf(x) > 0 else None
    got = float(sac.trunc_normal_logpdf(x, mean, std, low, high))
    if expect is None:
        assert np.isfinite(got)
    else:
        assert got == pytest.approx(expect, rel=1e-8, abs=1e-8)


def test_logpdf_far_tail_finite():
    assert np.isfinite(sac.trunc_normal_logpdf(10.0, -300.0, math.exp(-5), 1.0, 10.0))
    assert np.isfinite(sac.trunc_normal_logpdf(1.0, 500.0, math.exp(-5), 1.0, 10.0))


def test_logpdf_grads_finite_difference(rng):
    h = 1e-6
    for _ in range(20):
        x, m, s = rng.uniform(1, 8), rng.uniform(-3, 12), rng.uniform(0.3, 6)
        gx, gm, gs = sac.trunc_normal_logpdf_grads(x, m, s, 1.0, 8.0)
        f = lambda x_, m_, s_: float(sac.trunc_normal_logpdf(x_, m_, s_, 1.0, 8.0))
        assert gx == pytest.approx((f(x + h, m, s) - f(x - h, m, s)) / (2 * h), rel=1e-5, abs=1e-7)
        assert gm == pytest.approx((f(x, m + h, s) - f(x, m - h, s)) / (2 * h), rel=1e-5, abs=1e-7)
        assert gs == pytest.approx((f(x, m, s + h) - f(x, m, s - h)) / (2 * h), rel=1e-5, abs=1e-7)


# policy ---------------------------------------------------------------------------

def test_zero_policy_samples_in_bounds(rng):
    k = 6
    pol = sac.Policy(k, 8, rng)
    _zero(pol.parameters())
    mean, std, _ = pol.forward(np.ones((1, 2 * k)))
    assert np.all(mean == 0) and np.allclose(std, k)
    for _ in range(50):
        action, raw, logp = sac.policy_sample(pol, rng.random(2 * k), rng)
        assert np.all((raw >= 1) & (raw <= k)) and np.isfinite(logp)
        assert all(1 <= p <= k for p in action.delete_pair + action.add_pair)


def test_policy_sample_deterministic():
    k = 5
    pol = sac.Policy(k, 8, np.random.default_rng(1))
    state = np.linspace(0, 1, 2 * k)
    a1 = sac.policy_sample(pol, state, np.random.default_rng(9))
    a2 = sac.policy_sample(pol, state, np.random.default_rng(9))
    assert a1[0] == a2[0] and np.array_equal(a1[1], a2[1]) and a1[2] == a2[2]


def test_policy_logprob_matches_quadrature():
    k = 7
    pol = sac.Policy(k, 8, np.random.default_rng(2))
    state = np.abs(np.random.default_rng(3).standard_normal(2 * k))
    _, raw, logp = sac.policy_sample(pol, state, np.random.default_rng(4))
    mean, std, _ = pol.forward(state)
    total = 0.0
    for d in range(4):
        m, s = float(mean[0, d]), float(std[0, d])
        pdf = lambda t: math.exp(-0.5 * ((t - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        mass, _ = integrate.quad(pdf, 1.0, k, epsabs=0, epsrel=1e-12)
        total += math.log(pdf(raw[d]) / mass)
    assert logp == pytest.approx(total, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_sample_invariants(seed, k):
    rng = np.random.default_rng(seed)
    pol = sac.Policy(k, 8, rng)
    for p in pol.parameters():
        p.value += rng.standard_normal(p.value.shape)
    states = np.abs(rng.standard_normal((16, 2 * k))) * 5
    raw, logp, _ = pol.sample(states, rng.standard_normal((16, 4)))
    assert np.all((raw >= 1) & (raw <= k))
    assert np.all(np.isfinite(logp))
    pos = sac.round_positions(raw, k)
    assert pos.min() >= 1 and pos.max() <= k


def test_agent_requires_pairs():
    with pytest.raises(ValueError):
        sac.Agent(1)


# Q network ---------------------------------------------------------------------------

def test_q_zero_weights():
    q = sac.QNetwork(4, 8, np.random.default_rng(0))
    _zero(q.parameters())
    assert sac.q_value(q, np.ones(8), np.array([1.0, 2, 3, 4])) == 0.0


def test_q_matches_straight_line(rng):
    k = 4
    q = sac.QNetwork(k, 6, rng)
    for p in q.parameters():
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    s, a = rng.random(2 * k), rng.uniform(1, k, 4)
    x = np.concatenate([s, a / k])
    w = [p.value for p in q.parameters()]
    h1 = np.maximum(x @ w[0] + w[1][0], 0)
    h2 = np.maximum(h1 @ w[2] + w[3][0], 0)
    expect = float((h2 @ w[4] + w[5][0])[0])
    assert sac.q_value(q, s, a) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        q.forward(np.ones((1, 3)), np.ones((1, 4)))


# losses ------------------------------------------------------------------------------

def _batch(k, rewards, terminal, rng):
    B = len(rewards)
    return sac.Batch(np.abs(rng.standard_normal((B, 2 * k))), rng.uniform(1, k, (B, 4)), np.asarray(rewards, float),
                     np.abs(rng.standard_normal((B, 2 * k))), np.asarray(terminal, bool))


def test_q_loss_substitution(rng):
    k = 4
    pol, q = sac.Policy(k, 8, rng), sac.QNetwork(k, 8, rng)
    _zero(q.parameters())
    loss = sac.q_loss(q, pol, 0.0, _batch(k, [1.0], [False], rng), 0.99, rng.standard_normal((1, 4)))
    assert loss == pytest.approx(0.5)
    loss = sac.q_loss(q, pol, 0.7, _batch(k, [0.0], [True], rng), 0.99, rng.standard_normal((1, 4)))
    assert loss == 0.0


def test_q_target_uses_soft_value(rng):
    k = 4
    pol, q = sac.Policy(k, 8, rng), sac.QNetwork(k, 8, rng)
    b = _batch(k, [0.3, -1.0], [False, True], rng)
    eps = rng.standard_normal((2, 4))
    nxt_raw, nxt_logp, _ = pol.sample(b.next_states, eps)
    qn, _ = q.forward(b.next_states, nxt_raw)
    t = sac.soft_q_target(q, pol, 0.5, b, 0.99, eps)
    assert t[0] == pytest.approx(0.3 + 0.99 * (qn[0] - 0.5 * nxt_logp[0]))
    assert t[1] == -1.0


def test_q_loss_gradient_only_to_critic(rng):
    k = 3
    pol, q = sac.Policy(k, 8, rng), sac.QNetwork(k, 8, rng)
    nn.zero_grads(pol.parameters() + q.parameters())
    sac.q_loss(q, pol, 0.5, _batch(k, [1.0, 0.2], [False, False], rng), 0.99, rng.standard_normal((2, 4)))
    assert not any(p.grad.any() for p in pol.parameters())
    assert any(p.grad.any() for p in q.parameters())


def test_policy_loss_zero_cases(rng):
    k = 4
    pol, q = sac.Policy(k, 8, rng), sac.QNetwork(k, 8, rng)
    _zero(q.parameters())
    states = rng.random((5, 2 * k))
    eps = rng.standard_normal((5, 4))
    nn.zero_grads(pol.parameters())
    assert sac.policy_loss(pol, q, 0.0, states, eps) == 0.0
    assert not any(p.grad.any() for p in pol.parameters())
    # constant critic: loss is mean(alpha * logp) - c and the critic never gets gradients
    q.mlp.biases[-1].value[...] = 2.5
    _, logp, _ = pol.sample(states, eps)
    nn.zero_grads(pol.parameters() + q.parameters())
    assert sac.policy_loss(pol, q, 0.3, states, eps) == pytest.approx(float(np.mean(0.3 * logp)) - 2.5)
    assert not any(p.grad.any() for p in q.parameters())


def test_alpha_loss_examples():
    la = nn.Parameter("log_alpha", np.array([[math.log(0.8)]]))
    assert sac.alpha_loss(la, np.full(4, 2.0), -2.0) == 0.0
    la.zero_grad()
    sac.alpha_loss(la, np.full(4, 0.5), -2.0)
    assert la.grad[0, 0] > 0  # descent lowers alpha when entropy exceeds the target
    # derivative w.r.t. alpha is -(logp + H0) exactly
    logp = np.array([0.1, -0.4, 1.7])
    f = lambda a: sac.alpha_loss(nn.Parameter("x", np.array([[math.log(a)]])), logp, -2.0, backward=False)
    num = (f(0.5 + 1e-6) - f(0.5 - 1e-6)) / 2e-6
    assert num == pytest.approx(-float(np.mean(logp - 2.0)), rel=1e-8)


@pytest.mark.parametrize("name", ["policy-loss", "q-loss", "alpha-loss"])
def test_sac_loss_gradients(name):
    for seed in range(3):
        rep = gradsuite.CHECKS[name](seed, max_entries=None)
        assert rep.passed, (name, seed, rep)


# replay buffer -------------------------------------------------------------------------

def _tr(i, dim=4):
    return sac.Transition(np.full(dim, float(i)), np.ones(4), np.ones(4, int), float(i), np.zeros(dim), False)


def test_buffer_fifo_and_capacity(rng):
    buf = sac.ReplayBuffer(3, 4)
    with pytest.raises(ValueError):
        buf.sample(1, rng)
    for i in range(5):
        buf.push(_tr(i))
        assert len(buf) == min(i + 1, 3)
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    assert buf.rewards[buf.oldest()] == 2.0
    b = buf.sample(3, rng)
    assert set(b.rewards.tolist()) <= {2.0, 3.0, 4.0}
    with pytest.raises(ValueError):
        buf.sample(4, rng)
    with pytest.raises(ValueError):
        sac.ReplayBuffer(0, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60))
def test_buffer_never_exceeds_capacity(cap, pushes):
    buf = sac.ReplayBuffer(cap, 4)
    for i in range(pushes):
        buf.push(_tr(i))
    assert len(buf) == min(cap, pushes)
    if pushes:
        kept = sorted(buf.rewards[:len(buf)].tolist())
        assert kept == [float(i) for i in range(max(0, pushes - cap), pushes)]


# training / evaluation -------------------------------------------------------------------

ATTACK = AttackConfig(mu=0.5, rho=0.3, delta=0.1)
FAST = dict(episodes=3, batch_size=8, hidden=16)


def test_train_attack_accounting(small_victim, small_split):
    oracle = dygcn.make_oracle(small_victim)
    attack = AttackConfig(mu=0.25, rho=0.3, delta=0.1)
    res = sac.train_attack(small_split.validation[:1], oracle, attack, SACConfig(episodes=1, batch_size=64, hidden=8))
    steps = len(res.log.rows)
    assert steps > 0 and len(res.buffer) == steps
    assert len(res.episode_rewards) == 1 and res.updates == []
    assert oracle.queries > 0


def test_train_attack_deterministic(small_victim, small_split):
    def run():
        oracle = dygcn.make_oracle(small_victim)
        return sac.train_attack(small_split.validation[:1], oracle, ATTACK, SACConfig(seed=5, **FAST))
    a, b = run(), run()
    for p, q in zip(a.agent.parameters(), b.agent.parameters()):
        assert p.value.tobytes() == q.value.tobytes()
    assert a.log.rows == b.log.rows and a.updates == b.updates


def test_zero_learning_rates_freeze_parameters(small_victim, small_split):
    cfg = SACConfig(lr_policy=0.0, lr_q=0.0, lr_alpha=0.0, seed=2, **FAST)
    k = int(0.3 * small_split.validation[0].num_nodes)
    agent = sac.Agent(k, cfg)
    before = [p.value.copy() for p in agent.parameters()]
    res = sac.train_attack(small_split.validation[:2], dygcn.make_oracle(small_victim), ATTACK, cfg, agent=agent)
    assert res.updates  # updates ran
    for p, b in zip(agent.parameters(), before):
        assert p.value.tobytes() == b.tobytes()
    _check_budget(res.perturbed, small_split.validation[:2], ATTACK)


def test_alpha_stays_positive(small_victim, small_split):
    cfg = SACConfig(lr_alpha=0.5, seed=3, **FAST)
    res = sac.train_attack(small_split.validation[:1], dygcn.make_oracle(small_victim), ATTACK, cfg)
    assert res.updates and all(u["alpha"] > 0 for u in res.updates)
    assert res.agent.alpha > 0


def test_target_critic_option(small_victim, small_split):
    cfg = SACConfig(target_tau=0.005, seed=1, **FAST)
    res = sac.train_attack(small_split.validation[:1], dygcn.make_oracle(small_victim), ATTACK, cfg)
    tq = res.agent.target_q.parameters()
    assert any(not np.array_equal(t.value, q.value) for t, q in zip(tq, res.agent.q.parameters()))


def _check_budget(perturbed, clean, attack):
    from dynattack.env import attacked_indices, select_node_sets
    for pex, ex in zip(perturbed, clean):
        sets = select_node_sets(ex, attack.mu, attack.rho)
        targets = set(attacked_indices(ex.n, attack.mu))
        for j, (g, c) in enumerate(zip(pex.history, ex.history)):
            a, b = g.adjacency, c.adjacency
            if j not in targets:
                assert np.array_equal(a, b)
                continue
            e = int(np.triu(b, 1).sum())
            assert int(np.triu(a, 1).sum()) == e
            assert int(np.triu(a != b, 1).sum()) <= int(math.floor(attack.delta * e + 1e-9))
            for u, v in np.argwhere(np.triu(a != b, 1)):
                group = sets.popular if b[u, v] else sets.neglected
                assert u in group and v in group


def test_evaluate_zero_policy(small_victim, small_split):
    k = int(0.3 * small_split.test[0].num_nodes)
    agent = sac.Agent(k, SACConfig(hidden=8))
    _zero(agent.policy.parameters())
    oracle = dygcn.make_oracle(small_victim)
    ev = sac.evaluate_attack(small_split.test, oracle, agent, ATTACK)
    assert all(r["del_u"] == r["del_v"] for r in ev.log.rows)  # position 1 twice: self-pair no-op
    assert all(0.0 <= f <= 1.0 for f in ev.f1) and len(ev.f1) == len(small_split.test)
    assert ev.mean_f1 == pytest.approx(np.mean(dygcn.evaluate_f1(small_victim, small_split.test)))
    assert oracle.queries == len(small_split.test)


def test_evaluate_minimal_budget(small_victim, small_split):
    attack = AttackConfig(mu=1.0, rho=0.3, delta=0.001)
    k = int(0.3 * small_split.test[0].num_nodes)
    agent = sac.Agent(k, SACConfig(hidden=8, seed=4))
    for mode in ("mean", "sample"):
        ev = sac.evaluate_attack(small_split.test, dygcn.make_oracle(small_victim), agent, attack, mode=mode)
        for pex, ex in zip(ev.perturbed, small_split.test):
            for g, c in zip(pex.history, ex.history):
                assert int(np.triu(g.adjacency != c.adjacency, 1).sum()) <= 2
    with pytest.raises(ValueError):
        sac.evaluate_attack(small_split.test, dygcn.make_oracle(small_victim), agent, attack, mode="greedy")


def test_trained_agent_budget(small_victim, small_split):
    oracle = dygcn.make_oracle(small_victim)
    res = sac.train_attack(small_split.validation[:1], oracle, ATTACK, SACConfig(seed=7, **FAST))
    _check_budget(res.perturbed, small_split.validation[:1], ATTACK)
    ev = sac.evaluate_attack(small_split.test, oracle, res.agent, ATTACK)
    _check_budget(ev.perturbed, small_split.test, ATTACK)


def test_learning_progress_majority(small_victim, small_split):
    """Later episodes earn at least as much reward as early ones for most seeds."""
    wins = 0
    for seed in range(5):
        res = sac.train_attack(small_split.validation[:1], dygcn.make_oracle(small_victim),
                               AttackConfig(mu=0.25, rho=0.3, delta=0.1), SACConfig(seed=seed, episodes=40, batch_size=16, hidden=32))
        r = np.asarray(res.episode_rewards)
        q = max(1, len(r) // 4)
        wins += r[-q:].mean() >= r[:q].mean()
    assert wins >= 3


def test_agent_round_trip(tmp_path, small_victim, small_split):
    res = sac.train_attack(small_split.validation[:1], dygcn.make_oracle(small_victim), ATTACK, SACConfig(seed=1, **FAST))
    path = tmp_path / "agent.ckpt"
    sac.save_agent(path, res.agent)
    back = sac.load_agent(path)
    for p, q in zip(back.parameters(), res.agent.parameters()):
        assert p.value.tobytes() == q.value.tobytes()
    _, manifest = nn.load_checkpoint(path)
    assert manifest["k"] == res.agent.k
    assert {"hidden", "target_entropy", "discount", "seed"} <= set(manifest["sac"])
    log_path = tmp_path / "train.csv"
    sac.write_training_log(log_path, res.updates)
    header = log_path.read_text().splitlines()[0].split(",")
    assert header == list(sac.TRAIN_LOG_FIELDS)
