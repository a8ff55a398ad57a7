"""Entropy-regularized MDPs and their soft-optimal control solutions.

Two environment families live here: finite TabularMdp instances solved
exactly by fixed-point iteration, and the continuous SyntheticMdp benchmark
(box states, five actions, drift-or-reset transitions) solved approximately
by fitted soft Q iteration with a two-layer ReLU net.

Throughout, the soft state value of an action-value table q is
    v(s) = alpha * log sum_a exp(q(s, a) / alpha)
and the induced stochastic policy is pi(a|s) = exp((q(s,a) - v(s)) / alpha).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approx import TrainerConfig, TwoLayerReluNet, train_regressor

N_SYNTHETIC_ACTIONS = 5


def log_sum_exp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Overflow-safe log of the summed exponentials along an axis."""
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def soft_value(q: np.ndarray, alpha: float) -> np.ndarray:
    """Soft state values induced by an action-value table."""
    return alpha * log_sum_exp(np.asarray(q, dtype=float) / alpha, axis=-1)


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with a designated anchor action of known reward.

    transition has shape (n_states, n_actions, n_states) with rows summing
    to one; reward has shape (n_states, n_actions).  The anchor reward
    g(s) = reward[s, anchor_action] is exposed separately because the
    identification pipeline treats it as known.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    alpha: float
    anchor_action: int = 0

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if r.ndim != 2:
            raise ValueError("reward must be a (n_states, n_actions) table")
        s, a = r.shape
        if t.shape != (s, a, s):
            raise ValueError(f"transition shape {t.shape} does not match reward shape {r.shape}")
        if np.any(t < 0):
            raise ValueError("transition probabilities must be non-negative")
        row_err = np.abs(t.sum(axis=2) - 1.0)
        if row_err.max() > 1e-9:
            si, ai = np.unravel_index(np.argmax(row_err), row_err.shape)
            raise ValueError(
                f"transition row (s={si}, a={ai}) sums to {t[si, ai].sum():.12g}, expected 1"
            )
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 <= self.anchor_action < a:
            raise ValueError(f"anchor action {self.anchor_action} out of range for {a} actions")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def anchor_reward(self) -> np.ndarray:
        """g(s) = reward at the anchor action."""
        return self.reward[:, self.anchor_action]

    def with_params(self, **kw) -> "TabularMdp":
        """Copy with gamma/alpha (or any field) replaced."""
        return dataclasses.replace(self, **kw)

    def initial_state(self, rng) -> int:
        return 0

    def step(self, state, action: int, rng) -> int:
        return int(rng.choice(self.n_states, p=self.transition[int(state), action]))

    def descriptor(self) -> dict:
        d = self.to_dict()
        d["kind"] = "tabular"
        return d

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "anchor_action": self.anchor_action,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(
            transition=np.asarray(d["transition"], dtype=float),
            reward=np.asarray(d["reward"], dtype=float),
            gamma=float(d["gamma"]),
            alpha=float(d["alpha"]),
            anchor_action=int(d["anchor_action"]),
        )
        if mdp.n_states != d["n_states"] or mdp.n_actions != d["n_actions"]:
            raise ValueError("declared n_states/n_actions disagree with table shapes")
        return mdp


@dataclass(frozen=True)
class SoftSolution:
    """Exact solution of an entropy-regularized tabular MDP."""

    q: np.ndarray
    v: np.ndarray
    policy: np.ndarray
    alpha: float
    residual: float
    iterations: int
    converged: bool

    @property
    def log_policy(self) -> np.ndarray:
        """Exact log pi(a|s) = (q - v) / alpha, computed without exponentiation."""
        return (self.q - self.v[:, None]) / self.alpha


def soft_bellman_backup(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """One application of the soft Bellman operator to an action-value table."""
    q = np.asarray(q, dtype=float)
    if q.shape != mdp.reward.shape:
        raise ValueError(f"q shape {q.shape} does not match ({mdp.n_states}, {mdp.n_actions})")
    if not np.isfinite(q).all():
        si, ai = np.unravel_index(int(np.argmin(np.isfinite(q))), q.shape)
        raise ValueError(f"non-finite q value at state {si}, action {ai}")
    v = soft_value(q, mdp.alpha)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def solve_soft(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000) -> SoftSolution:
    """Iterate the soft Bellman operator from q = 0 until the sup-norm step
    falls below tol.  Non-convergence is returned, not raised: check the
    converged flag and residual.
    """
    q = np.zeros_like(mdp.reward)
    residual = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        q_next = soft_bellman_backup(mdp, q)
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        if residual < tol:
            break
    v = soft_value(q, mdp.alpha)
    policy = np.exp((q - v[:, None]) / mdp.alpha)
    q.setflags(write=False)
    v.setflags(write=False)
    policy.setflags(write=False)
    return SoftSolution(
        q=q,
        v=v,
        policy=policy,
        alpha=mdp.alpha,
        residual=residual,
        iterations=iterations,
        converged=residual < tol,
    )


def random_tabular_mdp(
    n_states: int,
    n_actions: int,
    seed: int,
    gamma: float = 0.9,
    alpha: float = 1.0,
    anchor_action: int = 0,
    anchor_reward: str = "zero",
) -> TabularMdp:
    """Random dense MDP: Dirichlet transition rows, uniform rewards.

    anchor_reward "zero" pins g to 0; "random" draws a known nonzero g.
    """
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    if anchor_reward == "zero":
        reward[:, anchor_action] = 0.0
    elif anchor_reward == "random":
        reward[:, anchor_action] = rng.uniform(-0.5, 0.5, size=n_states)
    else:
        raise ValueError(f"anchor_reward must be 'zero' or 'random', got {anchor_reward!r}")
    return TabularMdp(
        transition=transition,
        reward=reward,
        gamma=gamma,
        alpha=alpha,
        anchor_action=anchor_action,
    )


@dataclass(frozen=True)
class SyntheticMdp:
    """Continuous benchmark: states in [-p, p]^p, actions {0..4}, anchor 0.

    The anchored reward is a * tanh(z) / (4 * sum(omega)) with
    z = s . omega[:p] / p + (a / 4) * omega[p], so action 0 earns exactly
    zero everywhere.  reward_kind "state-only" drops the leading action
    factor, which breaks the zero-anchor property on purpose (the
    misspecification study).  Transitions drift every coordinate by
    a/5 - 1/2 and reset uniformly when the drifted state leaves the box.
    """

    p: int
    omega: np.ndarray
    gamma: float = 0.9
    alpha: float = 1.0
    seed: int = 0
    reward_kind: str = "anchored"

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if w.shape != (self.p + 1,):
            raise ValueError(f"omega must have shape ({self.p + 1},), got {w.shape}")
        if self.reward_kind not in ("anchored", "state-only"):
            raise ValueError(f"unknown reward_kind {self.reward_kind!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        w.setflags(write=False)
        object.__setattr__(self, "omega", w)

    @classmethod
    def from_seed(
        cls,
        p: int,
        seed: int,
        gamma: float = 0.9,
        alpha: float = 1.0,
        reward_kind: str = "anchored",
    ) -> "SyntheticMdp":
        omega = np.random.default_rng(seed).uniform(0.0, 1.0, size=p + 1)
        return cls(p=p, omega=omega, gamma=gamma, alpha=alpha, seed=seed, reward_kind=reward_kind)

    @property
    def n_actions(self) -> int:
        return N_SYNTHETIC_ACTIONS

    @property
    def anchor_action(self) -> int:
        return 0

    def with_params(self, **kw) -> "SyntheticMdp":
        return dataclasses.replace(self, **kw)

    def contains(self, states) -> np.ndarray:
        """Whether each state lies in the closed box [-p, p]^p."""
        s = np.asarray(states, dtype=float)
        return np.all(np.abs(s) <= self.p, axis=-1)

    def reward(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.asarray(actions, dtype=float)
        z = s @ self.omega[: self.p] / self.p + (a / 4.0) * self.omega[self.p]
        if self.reward_kind == "anchored":
            out = a * np.tanh(z) / (4.0 * self.omega.sum())
        else:
            out = np.tanh(z)
        return out

    def initial_state(self, rng) -> np.ndarray:
        return rng.uniform(-self.p, self.p, size=self.p)

    def step(self, state, action: int, rng) -> np.ndarray:
        s = np.asarray(state, dtype=float)
        if s.shape != (self.p,):
            raise ValueError(f"state must have shape ({self.p},), got {s.shape}")
        if not bool(self.contains(s)):
            raise ValueError(f"state {s!r} lies outside the box [-{self.p}, {self.p}]^{self.p}")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range for {self.n_actions} actions")
        drift = s + (action / 5.0 - 0.5)
        if bool(self.contains(drift)):
            return drift
        return rng.uniform(-self.p, self.p, size=self.p)

    def descriptor(self) -> dict:
        d = self.to_dict()
        d["kind"] = "synthetic"
        d["n_actions"] = self.n_actions
        d["anchor_action"] = self.anchor_action
        return d

    def to_dict(self) -> dict:
        d = {
            "p": self.p,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "omega": self.omega.tolist(),
            "seed": self.seed,
        }
        if self.reward_kind != "anchored":
            d["reward_kind"] = self.reward_kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticMdp":
        return cls(
            p=int(d["p"]),
            omega=np.asarray(d["omega"], dtype=float),
            gamma=float(d["gamma"]),
            alpha=float(d["alpha"]),
            seed=int(d["seed"]),
            reward_kind=d.get("reward_kind", "anchored"),
        )


def synthetic_reward(env: SyntheticMdp, states, actions) -> np.ndarray:
    """Closed-form benchmark reward; zero at the anchor action when anchored."""
    return env.reward(states, actions)


def synthetic_step(env: SyntheticMdp, state, action: int, rng) -> np.ndarray:
    """Drift the state by a/5 - 1/2 per coordinate, or reset uniformly on exit."""
    return env.step(state, action, rng)


def load_env(path):
    """Load a TabularMdp or SyntheticMdp from a JSON spec file (sniffed by keys)."""
    with Path(path).open("r", encoding="utf-8") as fh:
        d = json.load(fh)
    if "n_states" in d:
        return TabularMdp.from_dict(d)
    if "p" in d:
        return SyntheticMdp.from_dict(d)
    raise ValueError(f"{path}: unrecognized environment spec (expected tabular or synthetic keys)")


def env_from_dict(d: dict):
    """Rebuild an environment from a dataset meta descriptor."""
    kind = d.get("kind")
    if kind == "tabular" or "n_states" in d:
        return TabularMdp.from_dict(d)
    if kind == "synthetic" or "p" in d:
        return SyntheticMdp.from_dict(d)
    raise ValueError("unrecognized environment descriptor")


@dataclass
class FittedSoftQConfig:
    """Fitted soft Q iteration settings for the continuous benchmark."""

    hidden_width: int = 64
    learning_rate: float = 0.1
    gd_iterations: int = 150
    backup_iterations: int = 60
    rollout_length: int = 4096
    reset_samples: int = 4096
    holdout_states: int = 512
    residual_threshold: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FittedSoftQConfig":
        defaults = cls()
        return cls(**{k: d.get(k, getattr(defaults, k)) for k in dataclasses.asdict(defaults)})


@dataclass
class FittedSoftQ:
    """Approximate soft-optimal solution of a SyntheticMdp.

    One net represents q over (s / p, a / 4) features; values, the softmax
    policy, and log-policies all derive from it.
    """

    env: SyntheticMdp
    net: TwoLayerReluNet
    config: FittedSoftQConfig
    residual: float
    loss_history: list

    def _features(self, states: np.ndarray, action: int) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a_col = np.full((s.shape[0], 1), action / 4.0)
        return np.hstack([s / self.env.p, a_col])

    def q_matrix(self, states) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        cols = [self.net.predict(self._features(s, a)) for a in range(self.env.n_actions)]
        return np.stack(cols, axis=1)

    def q_value(self, states, actions) -> np.ndarray:
        qm = self.q_matrix(states)
        a = np.asarray(actions, dtype=np.int64)
        return qm[np.arange(qm.shape[0]), a]

    def v(self, states) -> np.ndarray:
        return soft_value(self.q_matrix(states), self.env.alpha)

    def log_policy_matrix(self, states) -> np.ndarray:
        qm = self.q_matrix(states)
        return (qm - soft_value(qm, self.env.alpha)[:, None]) / self.env.alpha

    def policy_matrix(self, states) -> np.ndarray:
        return np.exp(self.log_policy_matrix(states))

    def action_probs(self, state) -> np.ndarray:
        return self.policy_matrix(np.asarray(state, dtype=float).reshape(1, -1))[0]

    def descriptor(self) -> dict:
        return {"kind": "fitted-soft-q", "residual": self.residual, "config": self.config.to_dict()}


def _expected_next_value(env: SyntheticMdp, fitted_v, states: np.ndarray, action: int, v_reset: float):
    """E[v(s') | s, a] under drift-or-reset dynamics, given a value function."""
    drift = states + (action / 5.0 - 0.5)
    inside = env.contains(drift)
    out = np.full(states.shape[0], v_reset)
    if np.any(inside):
        out[inside] = fitted_v(drift[inside])
    return out


def fitted_soft_q(env: SyntheticMdp, config: FittedSoftQConfig | None = None) -> FittedSoftQ:
    """Approximately solve a SyntheticMdp by fitted soft Q iteration.

    Each backup draws fresh states uniformly from the box, forms targets
    r(s, a) + gamma * E[v(s') | s, a] with the expectation taken over the
    known drift-or-reset transition (a fixed uniform cloud estimates the
    reset average), and refits the net by warm-started gradient descent.
    Fully deterministic per (env, config).
    """
    cfg = config if config is not None else FittedSoftQConfig()
    rng = np.random.default_rng(cfg.seed)
    p = env.p
    cloud = rng.uniform(-p, p, size=(cfg.reset_samples, p))
    holdout = rng.uniform(-p, p, size=(cfg.holdout_states, p))

    actions = np.arange(env.n_actions)
    net: TwoLayerReluNet | None = None
    losses: list[float] = []

    def v_of(states: np.ndarray) -> np.ndarray:
        if net is None:
            return np.full(states.shape[0], env.alpha * math.log(env.n_actions))
        qm = np.stack(
            [net.predict(np.hstack([states / p, np.full((states.shape[0], 1), a / 4.0)])) for a in actions],
            axis=1,
        )
        return soft_value(qm, env.alpha)

    def build_targets(states: np.ndarray):
        v_reset = float(v_of(cloud).mean()) if env.gamma > 0.0 else 0.0
        xs, ys = [], []
        for a in actions:
            feats = np.hstack([states / p, np.full((states.shape[0], 1), a / 4.0)])
            r = env.reward(states, np.full(states.shape[0], a))
            if env.gamma > 0.0:
                ev = _expected_next_value(env, v_of, states, int(a), v_reset)
                y = r + env.gamma * ev
            else:
                y = r
            xs.append(feats)
            ys.append(y)
        return np.vstack(xs), np.concatenate(ys)

    for k in range(cfg.backup_iterations):
        states = rng.uniform(-p, p, size=(cfg.rollout_length, p))
        x, y = build_targets(states)
        tc = TrainerConfig(
            hidden_width=cfg.hidden_width,
            learning_rate=cfg.learning_rate,
            iterations=cfg.gd_iterations,
            seed=cfg.seed + 1000 + k,
        )
        net = train_regressor(x, y, tc, init_net=net)
        losses.append(net.loss_history[-1])

    x_h, y_h = build_targets(holdout)
    residual = float(np.max(np.abs(net.predict(x_h) - y_h)))
    if residual > cfg.residual_threshold:
        raise ValueError(
            f"fitted solver residual {residual:.4f} exceeds threshold "
            f"{cfg.residual_threshold}; raise backup_iterations/gd_iterations "
            "or widen the net"
        )
    return FittedSoftQ(env=env, net=net, config=cfg, residual=residual, loss_history=losses)
