"""Reward identification from demonstrations under an anchor-action assumption.

The pipeline has three stages.  A policy estimate turns demonstrations into
log-probabilities.  The anchor stage recovers the action-value of the known
anchor action, either exactly (known transitions) or by fitted iteration on
the anchor transitions in the data.  The reward stage subtracts the
discounted continuation term from the assembled action-values:

    r(s, a) = q(s, a) - gamma * E[ -alpha * log pi(s', a_A) + q(s', a_A) | s, a ]

All estimators work for both tabular (integer states, exact averaging
regressors) and continuous (vector states, ReLU-net regressors) data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .approx import PolicyEstimate, TrainerConfig, TrainingDivergedError, train_regressor
from .demos import TrajectoryDataset
from .soft_mdp import TabularMdp


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class FqiDivergedError(RuntimeError):
    """The per-round regressor in fitted identification diverged."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"identification regressor diverged in round {round_index}: {cause}")
        self.round_index = round_index


def _log_policy_matrix(policy, states) -> np.ndarray:
    """Log-probability rows from a PolicyEstimate, a raw (S, A) table, or any
    object exposing log_prob_matrix.  Raw tables are used verbatim (exact
    passthrough); estimate objects apply their own clip floor."""
    if isinstance(policy, np.ndarray):
        return policy[np.asarray(states, dtype=np.int64)]
    if hasattr(policy, "log_prob_matrix"):
        return policy.log_prob_matrix(states)
    raise TypeError("policy must be a log-probability table or expose log_prob_matrix()")


def _as_state_fn(values) -> Callable:
    """Normalize a per-state quantity (vector, net, callable) to a callable."""
    if isinstance(values, AnchorSolve):
        table = values.values
        return lambda s, t=table: t[np.asarray(s, dtype=np.int64)]
    if isinstance(values, np.ndarray):
        if values.ndim != 1:
            raise ValueError("per-state values must be a 1-D array")
        return lambda s, t=values: t[np.asarray(s, dtype=np.int64)]
    if callable(values):
        return values
    raise TypeError("anchor values must be an array, an AnchorSolve, or a callable")


@dataclass(frozen=True)
class AnchorSolve:
    """Fixed point of the anchor-action value recursion."""

    values: np.ndarray
    residual: float
    iterations: int
    converged: bool


def solve_qa_exact(
    mdp: TabularMdp,
    log_policy,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    gamma: float | None = None,
    alpha: float | None = None,
) -> AnchorSolve:
    """Anchor action-values as the fixed point of a known-transition recursion.

    Iterates f <- g + gamma * P_A (-alpha * log pi(., a_A) + f) from f = 0,
    where P_A is the anchor row of the transition tensor.  The map contracts
    at rate gamma in the sup norm, so the fixed point is unique.  gamma and
    alpha default to the environment's but can be overridden to study
    mismatched-hyperparameter behavior.
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    alpha = mdp.alpha if alpha is None else float(alpha)
    a_anchor = mdp.anchor_action
    n = mdp.n_states
    lp = _log_policy_matrix(log_policy, np.arange(n))[:, a_anchor]
    if not np.isfinite(lp).all():
        raise ValueError("log policy at the anchor action contains non-finite entries")
    p_anchor = mdp.transition[:, a_anchor, :]
    g = mdp.anchor_reward
    drive = -alpha * lp

    f = np.zeros(n)
    residual = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        f_next = g + gamma * (p_anchor @ (drive + f))
        residual = float(np.max(np.abs(f_next - f)))
        f = f_next
        if residual < tol:
            break
    return AnchorSolve(values=f, residual=residual, iterations=iterations, converged=residual < tol)


@dataclass
class QEstimate:
    """Assembled action-value estimate.

    q_value(s, a) = alpha * log pi(s, a) - alpha * log pi(s, a_A) + h(s)
    where h is the anchor component.  At the anchor action the log terms
    cancel exactly, so q_value(s, a_A) equals anchor_component(s) bit for
    bit.  The estimate is invariant to any per-state shift of the supplied
    log-policy.
    """

    alpha: float
    anchor_action: int
    q_fn: Callable
    anchor_fn: Callable
    policy: object | None = None
    fit_info: dict = field(default_factory=dict)

    def q_value(self, states, actions) -> np.ndarray:
        return self.q_fn(states, actions)

    def anchor_component(self, states) -> np.ndarray:
        return self.anchor_fn(states)

    def table(self, n_states: int, n_actions: int) -> np.ndarray:
        """Evaluate on the full grid of a finite environment."""
        s = np.repeat(np.arange(n_states), n_actions)
        a = np.tile(np.arange(n_actions), n_states)
        return self.q_value(s, a).reshape(n_states, n_actions)


def q_estimator(policy, anchor_values, alpha: float, anchor_action: int) -> QEstimate:
    """Assemble a QEstimate from a policy estimate and anchor values."""
    anchor_fn = _as_state_fn(anchor_values)

    def q_fn(states, actions):
        mat = _log_policy_matrix(policy, states)
        a = np.asarray(actions, dtype=np.int64)
        lp_a = mat[np.arange(mat.shape[0]), a]
        lp_anchor = mat[:, anchor_action]
        return alpha * lp_a - alpha * lp_anchor + anchor_fn(states)

    return QEstimate(
        alpha=alpha,
        anchor_action=anchor_action,
        q_fn=q_fn,
        anchor_fn=anchor_fn,
        policy=policy,
    )


def q_estimate_from_table(q_table: np.ndarray, anchor_action: int, alpha: float) -> QEstimate:
    """Wrap an explicit action-value table (diagnostics and probes)."""
    q_table = np.asarray(q_table, dtype=float)

    def q_fn(states, actions):
        return q_table[np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64)]

    def anchor_fn(states):
        return q_table[np.asarray(states, dtype=np.int64), anchor_action]

    return QEstimate(alpha=alpha, anchor_action=anchor_action, q_fn=q_fn, anchor_fn=anchor_fn)


def default_fqi_rounds(gamma: float, max_abs_target: float, floor: float = 1e-3) -> int:
    """Smallest round count whose geometric contraction bound drops below floor."""
    if gamma <= 0.0 or max_abs_target <= 0.0:
        return 1
    bound = 2.0 * max_abs_target / (1.0 - gamma)
    if bound <= floor:
        return 1
    return max(1, math.ceil(math.log(floor / bound) / math.log(gamma)))


def _dataset_env(ds: TrajectoryDataset) -> dict:
    env = ds.meta.get("env")
    if not isinstance(env, dict):
        raise ValueError("dataset metadata lacks an environment descriptor")
    return env


def _resolve_regressor(ds: TrajectoryDataset, regressor: str) -> str:
    if regressor == "auto":
        return "tabular" if ds.is_tabular else "net"
    if regressor not in ("tabular", "net"):
        raise ValueError(f"unknown regressor mode {regressor!r}")
    return regressor


def fqi_identify(
    ds: TrajectoryDataset,
    policy,
    *,
    gamma: float,
    alpha: float,
    anchor_action: int,
    n_rounds: int | None = None,
    g=None,
    trainer: TrainerConfig | None = None,
    regressor: str = "auto",
) -> QEstimate:
    """Estimate anchor values from data alone, then assemble the QEstimate.

    Restricted to transitions that took the anchor action, iterate
        y_t <- g(s_t) - gamma * alpha * log pi(s_{t+1}, a_A) + gamma * h(s_{t+1})
    and refit h : S -> R each round (exact per-state averaging for tabular
    data, a fresh seeded ReLU net otherwise).  Each round contracts the
    distance to the empirical fixed point by gamma.  The default round count
    is the smallest N whose geometric bound gamma^N * 2 R / (1 - gamma)
    falls below 1e-3, with R the largest first-round target magnitude.
    """
    if len(ds) == 0:
        raise ValueError("cannot identify from an empty dataset")
    mask = ds.actions == anchor_action
    n_anchor = int(mask.sum())
    if n_anchor == 0:
        raise ValueError(
            f"dataset contains no anchor-action transitions: 0 of {len(ds)} records "
            f"use action {anchor_action}, so the anchor recursion has nothing to fit"
        )
    mode = _resolve_regressor(ds, regressor)
    cfg = trainer if trainer is not None else TrainerConfig()
    s_fit = ds.states[mask]
    s_next = ds.next_states[mask]

    lp_next = _log_policy_matrix(policy, s_next)[:, anchor_action]
    if g is None:
        g_vals = np.zeros(n_anchor)
    else:
        g_fn = _as_state_fn(g)
        g_vals = np.asarray(g_fn(s_fit), dtype=float)
    base = g_vals - gamma * alpha * lp_next

    if n_rounds is None:
        n_rounds = default_fqi_rounds(gamma, float(np.max(np.abs(base))) if n_anchor else 0.0)
    if n_rounds < 1:
        raise ValueError("n_rounds must be at least 1")

    env = _dataset_env(ds)
    if mode == "tabular":
        n_states = int(env["n_states"])
        scale = None
    else:
        scale = float(env["p"])

    h_fn: Callable = lambda s: np.zeros(len(s))
    rounds_log = []
    for k in range(1, n_rounds + 1):
        y = base + gamma * np.asarray(h_fn(s_next), dtype=float)
        if mode == "tabular":
            sums = np.zeros(n_states)
            counts = np.zeros(n_states)
            np.add.at(sums, s_fit, y)
            np.add.at(counts, s_fit, 1.0)
            h_table = sums / np.maximum(counts, 1.0)
            h_fn = lambda s, t=h_table: t[np.asarray(s, dtype=np.int64)]
            loss = float(np.mean((h_fn(s_fit) - y) ** 2))
        else:
            try:
                net = train_regressor(s_fit / scale, y, cfg.replace(seed=cfg.seed + k))
            except TrainingDivergedError as exc:
                raise FqiDivergedError(k, exc) from exc
            h_fn = lambda s, n_=net, sc=scale: n_.predict(np.atleast_2d(np.asarray(s, dtype=float)) / sc)
            loss = net.loss_history[-1]
        if not np.isfinite(loss):
            raise FqiDivergedError(k, RuntimeError(f"non-finite round loss {loss!r}"))
        rounds_log.append({"round": k, "train_loss": float(loss)})

    est = q_estimator(policy, h_fn, alpha, anchor_action)
    est.fit_info = {
        "rounds": rounds_log,
        "n_rounds": n_rounds,
        "n_anchor_transitions": n_anchor,
        "regressor": mode,
    }
    return est


@dataclass
class RewardEstimate:
    """Identified reward: reward(s, a) = q(s, a) - gamma * expectation_model(s, a).

    The identity holds exactly by construction; expectation_model carries the
    fitted (or exact) continuation term.  provenance records which modes
    produced the estimate.
    """

    q: QEstimate
    expectation_model: Callable
    gamma: float
    alpha: float
    anchor_action: int
    provenance: dict = field(default_factory=dict)

    def reward(self, states, actions) -> np.ndarray:
        q_vals = self.q.q_value(states, actions)
        if self.gamma == 0.0:
            return q_vals
        return q_vals - self.gamma * np.asarray(self.expectation_model(states, actions), dtype=float)

    def table(self, n_states: int, n_actions: int) -> np.ndarray:
        s = np.repeat(np.arange(n_states), n_actions)
        a = np.tile(np.arange(n_actions), n_states)
        return self.reward(s, a).reshape(n_states, n_actions)


def reward_estimation(
    ds: TrajectoryDataset | None,
    q: QEstimate,
    policy,
    *,
    gamma: float,
    alpha: float,
    anchor_action: int,
    trainer: TrainerConfig | None = None,
    regressor: str = "auto",
    mdp: TabularMdp | None = None,
) -> RewardEstimate:
    """Subtract the discounted continuation term from an action-value estimate.

    The continuation h(s, a) = E[-alpha * log pi(s', a_A) + q(s', a_A) | s, a]
    comes from one of three places: exact transition sums when mdp is given,
    per-pair averaging of empirical targets for tabular data, or a ReLU net
    on (state, action) features otherwise.  With gamma = 0 the reward IS the
    action-value and no regressor is consulted.
    """
    if gamma == 0.0:
        zero = lambda states, actions: np.zeros(np.asarray(actions).shape)
        return RewardEstimate(
            q=q, expectation_model=zero, gamma=0.0, alpha=alpha,
            anchor_action=anchor_action, provenance={"mode": "degenerate-gamma-zero"},
        )

    if mdp is not None:
        n = mdp.n_states
        all_states = np.arange(n)
        lp_anchor = _log_policy_matrix(policy, all_states)[:, anchor_action]
        w = -alpha * lp_anchor + np.asarray(q.anchor_component(all_states), dtype=float)
        e_table = mdp.transition @ w

        def exact_expectation(states, actions, t=e_table):
            return t[np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64)]

        return RewardEstimate(
            q=q, expectation_model=exact_expectation, gamma=gamma, alpha=alpha,
            anchor_action=anchor_action, provenance={"mode": "exact-expectation"},
        )

    if ds is None or len(ds) == 0:
        raise ValueError("reward estimation needs a dataset (or an exact environment)")
    mode = _resolve_regressor(ds, regressor)
    cfg = trainer if trainer is not None else TrainerConfig()

    lp_next = _log_policy_matrix(policy, ds.next_states)[:, anchor_action]
    y = -alpha * lp_next + np.asarray(q.anchor_component(ds.next_states), dtype=float)

    env = _dataset_env(ds)
    if mode == "tabular":
        n_states = int(env["n_states"])
        n_actions = int(env["n_actions"])
        sums = np.zeros((n_states, n_actions))
        counts = np.zeros((n_states, n_actions))
        np.add.at(sums, (ds.states, ds.actions), y)
        np.add.at(counts, (ds.states, ds.actions), 1.0)
        h_table = sums / np.maximum(counts, 1.0)

        def expectation(states, actions, t=h_table):
            return t[np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64)]

        loss = float(np.mean((expectation(ds.states, ds.actions) - y) ** 2))
        prov = {"mode": "tabular-average", "train_loss": loss}
    else:
        scale = float(env["p"])
        n_actions = int(env.get("n_actions", 5))
        feats = np.hstack([ds.states / scale, (ds.actions / (n_actions - 1)).reshape(-1, 1)])
        net = train_regressor(feats, y, cfg)

        def expectation(states, actions, n_=net, sc=scale, na=n_actions):
            s = np.atleast_2d(np.asarray(states, dtype=float))
            a = (np.asarray(actions, dtype=float) / (na - 1)).reshape(-1, 1)
            return n_.predict(np.hstack([s / sc, a]))

        prov = {"mode": "net", "train_loss": net.loss_history[-1]}

    return RewardEstimate(
        q=q, expectation_model=expectation, gamma=gamma, alpha=alpha,
        anchor_action=anchor_action, provenance=prov,
    )


def shaping_probe(mdp: TabularMdp, phi) -> np.ndarray:
    """Reward implied by a per-state shaping confound of the action-values.

    Feeding q' = q + phi(s) into reward estimation shifts the recovered
    reward by Phi(s, a) = phi(s) - gamma * E[phi(s') | s, a]; this returns
    the full transformed table r + Phi for comparison.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (mdp.n_states,):
        raise ValueError(f"phi must have shape ({mdp.n_states},), got {phi.shape}")
    return mdp.reward + phi[:, None] - mdp.gamma * (mdp.transition @ phi)


@dataclass
class PqrConfig:
    """Settings for the full policy -> anchor values -> reward pipeline."""

    gamma: float
    alpha: float = 1.0
    anchor_action: int = 0
    n_rounds: int | None = None
    clip_floor: float = 1e-6
    seed: int = 0
    fp_tol: float = 1e-10
    policy_mode: str = "mle"          # "mle" | "exact"
    expectation_mode: str = "empirical"  # "empirical" | "exact"
    policy_trainer: TrainerConfig | None = None
    fqi_trainer: TrainerConfig | None = None
    re_trainer: TrainerConfig | None = None

    def stage_trainers(self) -> dict:
        """Per-stage trainer configs with seeds derived from the run seed."""
        out = {}
        for name, tc, off in (
            ("policy", self.policy_trainer, 11),
            ("fqi", self.fqi_trainer, 23),
            ("re", self.re_trainer, 37),
        ):
            cfg = tc if tc is not None else TrainerConfig(seed=self.seed + off)
            if tc is None:
                cfg = cfg.replace(clip_floor=self.clip_floor)
            out[name] = cfg
        return out

    def to_dict(self) -> dict:
        d = {
            "gamma": self.gamma,
            "alpha": self.alpha,
            "anchor_action": self.anchor_action,
            "n_rounds": self.n_rounds,
            "clip_floor": self.clip_floor,
            "seed": self.seed,
            "fp_tol": self.fp_tol,
            "policy_mode": self.policy_mode,
            "expectation_mode": self.expectation_mode,
        }
        for name, tc in (
            ("policy_trainer", self.policy_trainer),
            ("fqi_trainer", self.fqi_trainer),
            ("re_trainer", self.re_trainer),
        ):
            d[name] = tc.to_dict() if tc is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PqrConfig":
        kw = dict(d)
        for name in ("policy_trainer", "fqi_trainer", "re_trainer"):
            if kw.get(name) is not None:
                kw[name] = TrainerConfig.from_dict(kw[name])
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in kw.items() if k in known})


@dataclass
class PqrRun:
    """Everything a full pipeline run produced."""

    reward_estimate: RewardEstimate
    q_estimate: QEstimate
    policy: object
    manifest: dict


def pqr_full(
    ds: TrajectoryDataset,
    config: PqrConfig,
    mdp: TabularMdp | None = None,
    solution=None,
    policy=None,
) -> PqrRun:
    """Run policy estimation, anchor identification, and reward estimation.

    policy_mode "exact" substitutes the supplied solver solution's log-policy
    for estimation; expectation_mode "exact" replaces both fitted stages with
    known-transition computations on mdp; passing policy reuses an already
    fitted estimate and skips the first stage.  Stage failures surface as
    StageError tagged with the stage name.  The manifest records derived
    seeds, per-round losses, and a config echo.
    """
    from .approx import fit_policy_mle  # local import keeps module load light

    trainers = config.stage_trainers()
    exact = config.expectation_mode == "exact"
    if exact and mdp is None:
        raise ValueError("expectation_mode 'exact' requires the environment")
    if config.policy_mode == "exact" and solution is None:
        raise ValueError("policy_mode 'exact' requires a solver solution")

    try:
        if policy is None:
            if config.policy_mode == "exact":
                policy = fit_policy_mle(solution, trainers["policy"])
            else:
                policy = fit_policy_mle(ds, trainers["policy"])
    except Exception as exc:
        raise StageError("policy-estimation", exc) from exc

    g = mdp.anchor_reward if mdp is not None else None
    try:
        if exact:
            anchor = solve_qa_exact(
                mdp, policy, tol=config.fp_tol,
                gamma=config.gamma, alpha=config.alpha,
            )
            q_est = q_estimator(policy, anchor, config.alpha, config.anchor_action)
            q_est.fit_info = {
                "mode": "exact-fixed-point",
                "residual": anchor.residual,
                "iterations": anchor.iterations,
                "converged": anchor.converged,
            }
            fqi_rounds: list = []
        else:
            q_est = fqi_identify(
                ds, policy,
                gamma=config.gamma, alpha=config.alpha,
                anchor_action=config.anchor_action,
                n_rounds=config.n_rounds, g=g,
                trainer=trainers["fqi"],
            )
            fqi_rounds = q_est.fit_info["rounds"]
    except StageError:
        raise
    except Exception as exc:
        raise StageError("anchor-identification", exc) from exc

    try:
        reward = reward_estimation(
            ds, q_est, policy,
            gamma=config.gamma, alpha=config.alpha,
            anchor_action=config.anchor_action,
            trainer=trainers["re"],
            mdp=mdp if exact else None,
        )
    except Exception as exc:
        raise StageError("reward-estimation", exc) from exc

    manifest = {
        "stage_seeds": {name: tc.seed for name, tc in trainers.items()},
        "policy": {
            "representation": getattr(policy, "representation", "exact"),
            "final_loss": (policy.loss_history[-1] if getattr(policy, "loss_history", None) else None),
            "degenerate": getattr(policy, "degenerate", False),
        },
        "fqi_rounds": fqi_rounds,
        "fqi_info": {k: v for k, v in q_est.fit_info.items() if k != "rounds"},
        "re_train_loss": reward.provenance.get("train_loss"),
        "re_mode": reward.provenance.get("mode"),
        "config_echo": config.to_dict(),
    }
    return PqrRun(reward_estimate=reward, q_estimate=q_est, policy=policy, manifest=manifest)
