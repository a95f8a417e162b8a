"""Soft actor-critic attacker: truncated-normal policy over node-pair positions.

A policy half maps one half of the state (``k = rho*|V|`` entries) to the mean
and log-std of a 2-d Gaussian over positions ``[1, k]``. Outputs are in units
of ``k``: ``mean = k*u`` and ``std = k*exp(l)``, with ``l`` clamped to
``[-5, 2]``. Samples are drawn as ``clip(mean + std*eps, 1, k)`` and scored
under the truncated-normal density on ``[1, k]``; rounding to integer
positions happens after scoring.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr

from . import nn
from .env import Action, AttackEnv, PerturbationLog
from .graphs import Example
from .oracle import OracleHandle

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

TRAIN_LOG_FIELDS = ("episode", "step", "reward", "q_loss", "policy_loss", "alpha", "buffer_size")


@dataclass
class AttackConfig:
    mu: float = 1.0
    rho: float = 0.30
    delta: float = 0.02
    gamma: float = 0.2


@dataclass
class SACConfig:
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
    target_tau: float = 0.0  # 0 disables the polyak-averaged target critic
    eval_mode: str = "mean"
    seed: int = 0


# truncated normal ------------------------------------------------------------

def _log_phi(z):
    return -0.5 * z * z - _LOG_SQRT_2PI


def log_mass(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a < b``, stable in both tails."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # mirror the right tail so the subtraction happens between small numbers
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    return lhi + np.log1p(-np.exp(llo - lhi))


def trunc_normal_logpdf(x, mean, std, low, high):
    x, mean, std = (np.asarray(v, dtype=np.float64) for v in (x, mean, std))
    z = (x - mean) / std
    return _log_phi(z) - np.log(std) - log_mass((low - mean) / std, (high - mean) / std)


def trunc_normal_logpdf_grads(x, mean, std, low, high):
    """Partial derivatives of the log-density w.r.t. ``x``, ``mean`` and ``std``."""
    z = (x - mean) / std
    a = (low - mean) / std
    b = (high - mean) / std
    lz = log_mass(a, b)
    ra = np.exp(_log_phi(a) - lz)
    rb = np.exp(_log_phi(b) - lz)
    d_x = -z / std
    d_mean = z / std - (ra - rb) / std
    d_std = (z * z - 1.0) / std - (a * ra - b * rb) / std
    return d_x, d_mean, d_std


def round_positions(raw, k: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(raw) + 0.5), 1, k).astype(int)


# networks --------------------------------------------------------------------

class Policy:
    """Two MLPs, one per state half, each emitting (mean, log-std) for two positions."""

    def __init__(self, k: int, hidden: int, rng: np.random.Generator):
        self.k = k
        self.halves = [nn.MLP([k, hidden, hidden, 4], rng, name=f"policy{h}") for h in (1, 2)]
        for mlp in self.halves:
            # start centred in [1, k] with std k/4 so early samples are rarely clipped
            mlp.biases[-1].value[0] = [0.5, 0.5, math.log(0.25), math.log(0.25)]

    def parameters(self) -> list[nn.Parameter]:
        return self.halves[0].parameters() + self.halves[1].parameters()

    def forward(self, states: np.ndarray):
        """Returns mean (B,4), std (B,4) in position units plus caches for backward."""
        states = np.atleast_2d(states)
        k = self.k
        if states.shape[1] != 2 * k:
            raise ValueError(f"state length {states.shape[1]} != {2 * k}")
        outs, caches = [], []
        for h, mlp in enumerate(self.halves):
            o, c = mlp.forward(states[:, h * k:(h + 1) * k])
            outs.append(o)
            caches.append(c)
        u = np.concatenate([outs[0][:, :2], outs[1][:, :2]], axis=1)
        l = np.concatenate([outs[0][:, 2:], outs[1][:, 2:]], axis=1)
        lc = np.clip(l, LOG_STD_MIN, LOG_STD_MAX)
        mean = k * u
        std = k * np.exp(lc)
        return mean, std, (caches, l)

    def backward(self, d_mean, d_std, std, cache) -> None:
        caches, l = cache
        k = self.k
        du = k * d_mean
        dl = d_std * std * ((l >= LOG_STD_MIN) & (l <= LOG_STD_MAX))
        for h, mlp in enumerate(self.halves):
            cols = slice(2 * h, 2 * h + 2)
            dout = np.concatenate([du[:, cols], dl[:, cols]], axis=1)
            mlp.backward(dout, caches[h])

    def sample(self, states, eps):
        """Reparameterised draw: returns raw (B,4), log-prob (B,) and everything for backward."""
        mean, std, cache = self.forward(states)
        pre = mean + std * eps
        raw = np.clip(pre, 1.0, float(self.k))
        logp = trunc_normal_logpdf(raw, mean, std, 1.0, float(self.k)).sum(axis=1)
        inside = (pre > 1.0) & (pre < self.k)
        return raw, logp, (mean, std, eps, inside, cache)

    def sample_backward(self, d_raw, d_logp, ctx) -> None:
        """Backprop ``d_raw`` (B,4) and ``d_logp`` (B,) through :meth:`sample` into the MLPs."""
        mean, std, eps, inside, cache = ctx
        raw = np.clip(mean + std * eps, 1.0, float(self.k))
        gx, gm, gs = trunc_normal_logpdf_grads(raw, mean, std, 1.0, float(self.k))
        d_x = d_raw + d_logp[:, None] * gx
        d_mean = d_logp[:, None] * gm + d_x * inside
        d_std = d_logp[:, None] * gs + d_x * inside * eps
        self.backward(d_mean, d_std, std, cache)


class QNetwork:
    def __init__(self, k: int, hidden: int, rng: np.random.Generator, name: str = "q"):
        self.k = k
        self.mlp = nn.MLP([2 * k + 4, hidden, hidden, 1], rng, name=name)

    def parameters(self) -> list[nn.Parameter]:
        return self.mlp.parameters()

    def forward(self, states, raw):
        states = np.atleast_2d(states)
        raw = np.atleast_2d(raw)
        if states.shape[1] != 2 * self.k or raw.shape[1] != 4:
            raise ValueError(f"Q input shapes {states.shape}, {raw.shape} do not match k={self.k}")
        x = np.concatenate([states, raw / self.k], axis=1)
        out, caches = self.mlp.forward(x)
        return out[:, 0], caches

    def backward(self, d_q, caches, accumulate: bool = True) -> np.ndarray:
        """Returns the gradient w.r.t. the raw action (B,4)."""
        dx = self.mlp.backward(d_q[:, None], caches, accumulate=accumulate)
        return dx[:, 2 * self.k:] / self.k


def q_value(q: QNetwork, state, raw_action) -> float:
    return float(q.forward(state, raw_action)[0][0])


# replay buffer ----------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    raw: np.ndarray
    positions: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    raw: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return self.states.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO ring over flat arrays with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.raw = np.zeros((capacity, 4))
        self.positions = np.zeros((capacity, 4), dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, t: Transition) -> None:
        i = self._next
        self.states[i] = t.state
        self.raw[i] = t.raw
        self.positions[i] = t.positions
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminal[i] = t.terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest(self) -> int:
        """Ring slot holding the oldest stored transition."""
        return self._next if self._size == self.capacity else 0

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} transitions")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(self.states[idx], self.raw[idx], self.rewards[idx], self.next_states[idx], self.terminal[idx])


# agent and losses --------------------------------------------------------------

class Agent:
    def __init__(self, k: int, config: SACConfig | None = None):
        if k < 2:
            raise ValueError(f"need at least two positions per node set to form a pair, got k={k}")
        self.config = config = config or SACConfig()
        rng = np.random.default_rng(config.seed)
        self.k = k
        self.policy = Policy(k, config.hidden, rng)
        self.q = QNetwork(k, config.hidden, rng)
        self.target_q = None
        if config.target_tau > 0:
            self.target_q = QNetwork(k, config.hidden, rng, name="q_target")
            for dst, src in zip(self.target_q.parameters(), self.q.parameters()):
                dst.value[...] = src.value
        self.log_alpha = nn.Parameter("log_alpha", np.array([[math.log(config.init_alpha)]]))
        self.opt_policy = nn.Adam(self.policy.parameters(), lr=config.lr_policy)
        self.opt_q = nn.Adam(self.q.parameters(), lr=config.lr_q)
        self.opt_alpha = nn.Adam([self.log_alpha], lr=config.lr_alpha)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value[0, 0]))

    def parameters(self) -> list[nn.Parameter]:
        out = self.policy.parameters() + self.q.parameters() + [self.log_alpha]
        if self.target_q is not None:
            out += self.target_q.parameters()
        return out

    def act(self, state, rng: np.random.Generator | None = None, deterministic: bool = False):
        """Returns ``(Action, raw, log_prob)`` for a single state."""
        if deterministic:
            mean, std, _ = self.policy.forward(state)
            raw = np.clip(mean, 1.0, float(self.k))[0]
            logp = float(trunc_normal_logpdf(raw, mean[0], std[0], 1.0, float(self.k)).sum())
        else:
            eps = rng.standard_normal((1, 4))
            r, lp, _ = self.policy.sample(state, eps)
            raw, logp = r[0], float(lp[0])
        pos = round_positions(raw, self.k)
        return Action((int(pos[0]), int(pos[1])), (int(pos[2]), int(pos[3]))), raw, logp

    def update(self, batch: Batch, rng: np.random.Generator) -> dict:
        """One SAC iteration in the order policy, temperature, critic."""
        B = len(batch)
        p_loss = policy_loss(self.policy, self.q, self.alpha, batch.states, rng.standard_normal((B, 4)))
        self.opt_policy.step()

        _, logp, _ = self.policy.sample(batch.states, rng.standard_normal((B, 4)))
        a_loss = alpha_loss(self.log_alpha, logp, self.config.target_entropy)
        self.opt_alpha.step()

        ql = q_loss(self.q, self.policy, self.alpha, batch, self.config.discount,
                    rng.standard_normal((B, 4)), target_q=self.target_q)
        self.opt_q.step()
        if self.target_q is not None:
            tau = self.config.target_tau
            for dst, src in zip(self.target_q.parameters(), self.q.parameters()):
                dst.value *= 1.0 - tau
                dst.value += tau * src.value
        return {"policy_loss": p_loss, "alpha_loss": a_loss, "q_loss": ql, "alpha": self.alpha}


def policy_sample(policy: Policy, state, rng: np.random.Generator):
    """Single stochastic draw: ``(Action, raw, log_prob)``."""
    eps = rng.standard_normal((1, 4))
    raw, logp, _ = policy.sample(state, eps)
    pos = round_positions(raw[0], policy.k)
    return Action((int(pos[0]), int(pos[1])), (int(pos[2]), int(pos[3]))), raw[0], float(logp[0])


def soft_q_target(q: QNetwork, policy: Policy, alpha: float, batch: Batch, discount: float,
                  eps_next: np.ndarray) -> np.ndarray:
    """``r + discount * (Q(s', a') - alpha * log pi(a'|s'))``, or ``r`` at terminal steps."""
    next_raw, next_logp, _ = policy.sample(batch.next_states, eps_next)
    q_next, _ = q.forward(batch.next_states, next_raw)
    return batch.rewards + discount * (~batch.terminal) * (q_next - alpha * next_logp)


def q_regression_loss(q: QNetwork, states, raw, target, backward: bool = True) -> float:
    pred, caches = q.forward(states, raw)
    diff = pred - target
    if backward:
        q.backward(diff / diff.shape[0], caches)
    return float(0.5 * np.mean(diff * diff))


def q_loss(q: QNetwork, policy: Policy, alpha: float, batch: Batch, discount: float,
           eps_next: np.ndarray, target_q: QNetwork | None = None, backward: bool = True) -> float:
    """Soft Bellman residual; the target is held constant and gradients go to the critic only.

    The bootstrap value subtracts ``alpha * log pi`` (soft state value).
    """
    target = soft_q_target(target_q or q, policy, alpha, batch, discount, eps_next)
    return q_regression_loss(q, batch.states, batch.raw, target, backward)


def policy_loss(policy: Policy, q: QNetwork, alpha: float, states: np.ndarray,
                eps: np.ndarray, backward: bool = True) -> float:
    """``mean(alpha * log pi(a|s) - Q(s, a))`` with reparameterised ``a``; gradients go to the policy."""
    B = states.shape[0]
    raw, logp, ctx = policy.sample(states, eps)
    qv, caches = q.forward(states, raw)
    if backward:
        dq_draw = q.backward(np.ones(B), caches, accumulate=False)
        policy.sample_backward(-dq_draw / B, np.full(B, alpha / B), ctx)
    return float(np.mean(alpha * logp - qv))


def alpha_loss(log_alpha: nn.Parameter, logp: np.ndarray, target_entropy: float, backward: bool = True) -> float:
    """``mean(-alpha * (log pi + H0))``, differentiated w.r.t. ``log alpha``."""
    alpha = float(np.exp(log_alpha.value[0, 0]))
    g = -(np.asarray(logp) + target_entropy)
    if backward:
        log_alpha.grad[0, 0] += alpha * float(np.mean(g))
    return float(alpha * np.mean(g))


# Algorithm-level drivers ----------------------------------------------------------

@dataclass
class AttackTrainingResult:
    agent: Agent
    episode_rewards: list[float] = field(default_factory=list)
    updates: list[dict] = field(default_factory=list)
    log: PerturbationLog = field(default_factory=PerturbationLog)
    perturbed: list[Example] = field(default_factory=list)
    buffer: ReplayBuffer | None = None


def _state_dim(examples, rho):
    return 2 * int(math.floor(rho * examples[0].num_nodes + 1e-9))


def train_attack(examples: Sequence[Example], oracle: OracleHandle, attack: AttackConfig,
                 config: SACConfig | None = None, agent: Agent | None = None) -> AttackTrainingResult:
    """Train the attacker on validation examples, querying the victim only through ``oracle``.

    Each attacked graph (most recent first in time order) gets ``episodes``
    episodes restarting from its clean version; the episode that ends with
    the largest error is committed before moving on to the next graph.
    """
    config = config or SACConfig()
    if not examples:
        raise ValueError("train_attack needs at least one example")
    k = _state_dim(examples, attack.rho) // 2
    agent = agent or Agent(k, config)
    rng = np.random.default_rng(config.seed + 1)
    buffer = ReplayBuffer(config.capacity, 2 * k)
    result = AttackTrainingResult(agent, buffer=buffer)
    episode_no = 0
    for ex_id, ex in enumerate(examples):
        env = AttackEnv(ex, oracle, attack.mu, attack.rho, attack.delta, attack.gamma, example_id=ex_id)
        for j in env.targets:
            env.begin_graph(j)
            best_err, best_adj = None, None
            for _ in range(config.episodes):
                episode_no += 1
                state = env.reset()
                total = 0.0
                done = False
                while not done:
                    action, raw, _ = agent.act(state, rng)
                    res = env.step(action)
                    buffer.push(Transition(state, raw, np.array(action.delete_pair + action.add_pair),
                                           res.reward, res.state, res.done))
                    result.log.record("ours-train", ex_id, j, episode_no, env.k, res.nodes, res.applied,
                                      res.err_before, res.err_after, res.f_before, res.f_after, res.reward)
                    total += res.reward
                    if len(buffer) >= config.batch_size:
                        stats = agent.update(buffer.sample(config.batch_size, rng), rng)
                        if not all(np.isfinite(v) for v in stats.values()):
                            raise nn.NonFiniteError(f"non-finite SAC loss at episode {episode_no}: {stats}")
                        stats.update(episode=episode_no, step=env.k, reward=res.reward, buffer_size=len(buffer))
                        result.updates.append(stats)
                    state = res.state
                    done = res.done
                result.episode_rewards.append(total)
                final_err = env._score[0]
                if best_err is None or final_err > best_err:
                    best_err, best_adj = final_err, env.current.copy()
            env.commit(best_adj)
        result.perturbed.append(env.perturbed_example())
        log.info("attack training: example %d done, %d episodes so far", ex_id, episode_no)
    return result


@dataclass
class EvaluationResult:
    perturbed: list[Example]
    f1: list[float]
    log: PerturbationLog

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1)) if self.f1 else float("nan")


def evaluate_attack(examples: Sequence[Example], oracle: OracleHandle, agent: Agent,
                    attack: AttackConfig, mode: str | None = None, seed: int = 0) -> EvaluationResult:
    """Run the trained policy once per attacked graph, without learning or rewards.

    ``mode='mean'`` acts on the rounded policy mean; ``mode='sample'`` draws
    from the policy with a seeded generator.
    """
    mode = mode or agent.config.eval_mode
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rng = np.random.default_rng(seed)
    out, scores, plog = [], [], PerturbationLog()
    for ex_id, ex in enumerate(examples):
        env = AttackEnv(ex, oracle, attack.mu, attack.rho, attack.delta, attack.gamma, example_id=ex_id)
        for j in env.targets:
            env.begin_graph(j)
            state = env.reset(score=False)
            done = False
            while not done:
                action, _, _ = agent.act(state, rng, deterministic=(mode == "mean"))
                res = env.step(action, compute_reward_=False)
                plog.record("ours", ex_id, j, 0, env.k, res.nodes, res.applied)
                state, done = res.state, res.done
        _, f1 = env.score()
        out.append(env.perturbed_example())
        scores.append(f1)
    return EvaluationResult(out, scores, plog)


# persistence -----------------------------------------------------------------------

def save_agent(path, agent: Agent) -> None:
    manifest = {"k": agent.k, "sac": asdict(agent.config)}
    nn.save_checkpoint(path, agent.parameters(), manifest)


def load_agent(path) -> Agent:
    tensors, manifest = nn.load_checkpoint(path)
    agent = Agent(int(manifest["k"]), SACConfig(**manifest["sac"]))
    nn.assign(agent.parameters(), tensors)
    return agent


def write_training_log(path, updates: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in updates:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
