"""Baseline reward estimators and the temperature-selection routine.

Grounded maximum-entropy estimation treats the scaled log-policy itself as
the quantity of interest (it equals q up to a per-state shift) and pins it
at a single reference point with known ground truth.  The oracle-aided
linear estimator regresses one-step targets built from true value functions
onto (state, action, intercept) features.  Temperature selection exploits
the fact that, with a zero anchor reward, the identified reward scales
linearly in the assumed temperature.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .demos import TrajectoryDataset
from .estimators import PqrConfig, pqr_full


def normalize_by_anchor(estimate_fn: Callable, anchor_action: int) -> Callable:
    """Subtract each state's anchor-action value: f(s, a) - f(s, a_A).

    Applied to every non-pipeline estimate before reward comparison, so all
    methods agree (by construction) that the anchor earns zero.
    """

    def normalized(states, actions):
        vals = np.asarray(estimate_fn(states, actions), dtype=float)
        anchor = np.full(vals.shape, anchor_action, dtype=np.int64)
        return vals - np.asarray(estimate_fn(states, anchor), dtype=float)

    return normalized


@dataclass
class GroundedEstimate:
    """A raw scalar estimate pinned to a known value at one reference point.

    value(s, a) = (raw(s, a) - raw(ref)) + q_ref, so the estimate equals
    q_ref at the reference exactly.  Re-grounding an already grounded
    estimate at the same reference is the identity (offset 0 short-circuits).
    """

    raw: Callable
    reference_state: object
    reference_action: int
    grounded_value: float
    offset: float = field(init=False)
    _raw_ref: float = field(init=False)

    def __post_init__(self):
        try:
            ref_val = self.raw(
                _as_state_batch(self.reference_state),
                np.asarray([self.reference_action], dtype=np.int64),
            )
        except Exception as exc:
            raise ValueError(
                f"grounding reference (state={self.reference_state!r}, "
                f"action={self.reference_action}) is not evaluable: {exc}"
            ) from exc
        self._raw_ref = float(np.asarray(ref_val).ravel()[0])
        if not np.isfinite(self._raw_ref):
            raise ValueError("raw estimate is not finite at the grounding reference")
        self.offset = self.grounded_value - self._raw_ref

    def value(self, states, actions) -> np.ndarray:
        raw = np.asarray(self.raw(states, actions), dtype=float)
        if self.offset == 0.0:
            return raw
        return (raw - self._raw_ref) + self.grounded_value


def _as_state_batch(state):
    arr = np.asarray(state)
    if arr.ndim == 0:
        return arr.reshape(1)
    return arr.reshape(1, -1)


def maxent_irl_grounded(
    ds: TrajectoryDataset | None,
    policy,
    alpha: float,
    q_ref: float,
    reference_state=None,
    reference_action: int = 0,
) -> GroundedEstimate:
    """Maximum-entropy action-value estimate, grounded at a reference point.

    The raw estimate is alpha * log pi(s, a) with the per-state term left at
    zero; grounding shifts it so the reference (state 0 / the origin, action
    0 by default) matches the supplied true value q_ref.
    """
    if reference_state is None:
        if ds is not None and not ds.is_tabular:
            p = int(ds.meta["env"]["p"])
            reference_state = np.zeros(p)
        else:
            reference_state = 0

    def raw(states, actions):
        return alpha * np.asarray(policy.log_prob(states, actions), dtype=float)

    return GroundedEstimate(
        raw=raw,
        reference_state=reference_state,
        reference_action=reference_action,
        grounded_value=float(q_ref),
    )


class RankDeficientFeaturesError(ValueError):
    """The linear design matrix is rank deficient; names a dependent column."""

    def __init__(self, column: str, rank: int, n_columns: int):
        super().__init__(
            f"design matrix is rank deficient (rank {rank} < {n_columns} columns); "
            f"column '{column}' is linearly dependent on the others"
        )
        self.column = column


@dataclass
class SplGdEstimate:
    """Linear reward fit: coefficients over (state coords, action, intercept)."""

    coefficients: np.ndarray
    columns: list
    residual_mse: float

    def reward(self, states, actions) -> np.ndarray:
        x = _spl_design(states, actions)
        return x @ self.coefficients


def _spl_design(states, actions) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    if s.ndim == 1:
        s = s.reshape(-1, 1)
    a = np.asarray(actions, dtype=float).reshape(-1, 1)
    return np.hstack([s, a, np.ones((s.shape[0], 1))])


def spl_gd(ds: TrajectoryDataset, q_oracle: Callable, v_oracle: Callable, gamma: float) -> SplGdEstimate:
    """Least-squares reward fit from oracle one-step targets.

    Targets y_t = Q(s_t, a_t) - gamma * V(s_{t+1}) equal the reward in
    expectation over the next state, so ordinary least squares on
    (s_1..s_p, a, 1) recovers the best linear reward approximation.
    """
    if len(ds) == 0:
        raise ValueError("cannot fit on an empty dataset")
    x = _spl_design(ds.states, ds.actions)
    names = [f"s{i + 1}" for i in range(x.shape[1] - 2)] + ["a", "intercept"]
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        # name the first column that the others already span
        for j in range(x.shape[1]):
            reduced = np.delete(x, j, axis=1)
            if np.linalg.matrix_rank(reduced) == rank:
                raise RankDeficientFeaturesError(names[j], int(rank), x.shape[1])
        raise RankDeficientFeaturesError(names[-1], int(rank), x.shape[1])

    y = np.asarray(q_oracle(ds.states, ds.actions), dtype=float) - gamma * np.asarray(
        v_oracle(ds.next_states), dtype=float
    )
    coef, _, _, _ = np.linalg.lstsq(x, y, rcond=None)
    resid = float(np.mean((x @ coef - y) ** 2))
    return SplGdEstimate(coefficients=coef, columns=names, residual_mse=resid)


def select_alpha(
    ds: TrajectoryDataset,
    r_avg: float,
    *,
    gamma: float,
    n_rounds: int | None = None,
    config: PqrConfig | None = None,
    mdp=None,
    solution=None,
) -> float:
    """Estimate the demonstrator's temperature from the reward scale.

    Runs the identification pipeline with temperature fixed at 1; with a
    zero anchor reward the identified reward is the true one divided by the
    true temperature, so
        alpha_hat = r_avg * n / sum_t rhat(s_t, a_t)
    where r_avg is the known average reward achieved on the dataset.
    """
    if len(ds) == 0:
        raise ValueError("temperature selection needs a non-empty dataset")
    if config is None:
        config = PqrConfig(gamma=gamma)
    overrides: dict = {"alpha": 1.0}
    if n_rounds is not None:
        overrides["n_rounds"] = n_rounds
    cfg = PqrConfig.from_dict({**config.to_dict(), **overrides})
    run = pqr_full(ds, cfg, mdp=mdp, solution=solution)
    r_hat = run.reward_estimate.reward(ds.states, ds.actions)
    total = float(r_hat.sum())
    if abs(total) < 1e-12:
        raise ValueError(
            f"estimated total reward {total!r} is within 1e-12 of zero; "
            "the temperature ratio is ill-conditioned"
        )
    return float(r_avg) * len(ds) / total
