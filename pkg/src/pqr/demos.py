"""Demonstration data: policy rollouts and JSON-lines persistence.

A dataset is an ordered list of (s, a, s_next) transition records plus a
metadata header describing the environment, the generating policy, and the
seed.  One long trajectory is the common case, but every record carries a
trajectory id so multi-trajectory corpora use the same format.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """A dataset file violates the JSON-lines contract."""


class PolicyNormalizationError(ValueError):
    """A policy row is not a probability distribution."""


_RECORD_KEYS = ("t", "traj", "s", "a", "s_next")


@dataclass(frozen=True)
class TrajectoryDataset:
    """Transition records with generation metadata.

    ``states`` is an int vector for tabular environments or an (n, p) float
    array for continuous ones; ``next_states`` has the same layout.
    """

    steps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    traj_ids: np.ndarray
    meta: dict

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n(self) -> int:
        return len(self)

    @property
    def is_tabular(self) -> bool:
        return self.states.ndim == 1 and np.issubdtype(self.states.dtype, np.integer)

    def head(self, n: int) -> "TrajectoryDataset":
        """Prefix of the first ``n`` records, metadata adjusted to match."""
        if not 0 <= n <= len(self):
            raise ValueError(f"prefix length {n} out of range for dataset of {len(self)}")
        meta = dict(self.meta)
        meta["steps"] = n
        return TrajectoryDataset(
            steps=self.steps[:n],
            states=self.states[:n],
            actions=self.actions[:n],
            next_states=self.next_states[:n],
            traj_ids=self.traj_ids[:n],
            meta=meta,
        )

    def validate(self) -> None:
        """Check contiguity and action/state ranges; raise on violation."""
        n = len(self)
        for arr in (self.steps, self.actions, self.traj_ids):
            if arr.shape[0] != n:
                raise DatasetFormatError("record arrays disagree on length")
        if self.next_states.shape != self.states.shape:
            raise DatasetFormatError("states and next_states disagree on shape")
        env = self.meta.get("env", {})
        n_actions = env.get("n_actions")
        if n_actions is not None and n > 0:
            if self.actions.min() < 0 or self.actions.max() >= n_actions:
                raise DatasetFormatError("action index out of range")
        if self.is_tabular and n > 0:
            n_states = env.get("n_states")
            if n_states is not None and (
                self.states.min() < 0
                or self.states.max() >= n_states
                or self.next_states.min() < 0
                or self.next_states.max() >= n_states
            ):
                raise DatasetFormatError("state index out of range")
        # within a trajectory, each next state must be the following record's state
        for i in range(n - 1):
            if self.traj_ids[i] != self.traj_ids[i + 1]:
                continue
            if self.steps[i + 1] != self.steps[i] + 1:
                raise DatasetFormatError(f"non-consecutive step index at record {i + 1}")
            if not np.array_equal(self.next_states[i], self.states[i + 1]):
                raise DatasetFormatError(f"broken transition contiguity at record {i}")


def _resolve_policy(policy, n_actions: int):
    """Turn a policy table / object / callable into a row-probability function."""
    if isinstance(policy, np.ndarray):
        if policy.ndim != 2 or policy.shape[1] != n_actions:
            raise PolicyNormalizationError(
                f"policy table shape {policy.shape} incompatible with {n_actions} actions"
            )
        if np.any(policy < 0):
            raise PolicyNormalizationError("policy table has negative entries")
        row_err = np.abs(policy.sum(axis=1) - 1.0)
        bad = int(np.argmax(row_err))
        if row_err[bad] > 1e-6:
            raise PolicyNormalizationError(
                f"policy row {bad} sums to {policy[bad].sum():.12g}, expected 1 within 1e-6"
            )
        return lambda s: policy[int(s)]
    if hasattr(policy, "action_probs"):
        return policy.action_probs
    if callable(policy):
        return policy
    raise TypeError("policy must be a table, a callable, or expose action_probs()")


def rollout(env, policy, steps: int, seed: int, policy_desc: dict | None = None) -> TrajectoryDataset:
    """Roll ``policy`` in ``env`` for ``steps`` transitions from a fresh seed.

    The dataset records (s_t, a_t, s_{t+1}) for t = 0..steps-1; the final
    visited state survives only as the last record's next state.  Identical
    inputs give bit-identical datasets.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    n_actions = env.n_actions
    probs_of = _resolve_policy(policy, n_actions)
    rng = np.random.default_rng(seed)

    s = env.initial_state(rng)
    tabular = np.isscalar(s) or np.ndim(s) == 0
    states, actions, next_states = [], [], []
    for _ in range(steps):
        pvec = np.asarray(probs_of(s), dtype=float)
        if pvec.shape != (n_actions,) or np.any(pvec < 0) or abs(pvec.sum() - 1.0) > 1e-6:
            raise PolicyNormalizationError(
                f"policy output {pvec!r} is not a distribution over {n_actions} actions"
            )
        cdf = np.cumsum(pvec)
        a = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), n_actions - 1))
        s_next = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        next_states.append(s_next)
        s = s_next

    if tabular:
        st = np.asarray(states, dtype=np.int64)
        nx = np.asarray(next_states, dtype=np.int64)
    else:
        p = len(s)
        st = np.asarray(states, dtype=float).reshape(steps, p)
        nx = np.asarray(next_states, dtype=float).reshape(steps, p)
    meta = {
        "env": env.descriptor(),
        "gamma": float(env.gamma),
        "alpha": float(env.alpha),
        "policy": policy_desc if policy_desc is not None else {"kind": type(policy).__name__},
        "seed": int(seed),
        "steps": int(steps),
    }
    return TrajectoryDataset(
        steps=np.arange(steps, dtype=np.int64),
        states=st,
        actions=np.asarray(actions, dtype=np.int64),
        next_states=nx,
        traj_ids=np.zeros(steps, dtype=np.int64),
        meta=meta,
    )


def _jsonify_state(s):
    if np.isscalar(s) or np.ndim(s) == 0:
        return int(s)
    return [float(x) for x in np.asarray(s)]


def save_dataset(ds: TrajectoryDataset, path) -> None:
    """Write a dataset as JSON lines: one metadata header, one line per record.

    Floats go through Python's round-trip decimal repr, so loading recovers
    every value bit for bit.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(ds.meta) + "\n")
        for i in range(len(ds)):
            rec = {
                "t": int(ds.steps[i]),
                "traj": int(ds.traj_ids[i]),
                "s": _jsonify_state(ds.states[i]),
                "a": int(ds.actions[i]),
                "s_next": _jsonify_state(ds.next_states[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    """Read a JSON-lines dataset; reject malformed or truncated files."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, metadata header missing")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: malformed metadata header: {exc}") from exc
    if not isinstance(meta, dict):
        raise DatasetFormatError(f"{path}: metadata header is not an object")

    steps, trajs, states, actions, next_states = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        idx = len(actions)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            last = idx - 1
            raise DatasetFormatError(
                f"{path}: line {lineno} is not valid JSON (truncated write?); "
                f"last complete record index {last}"
            ) from exc
        missing = [k for k in _RECORD_KEYS if k not in rec]
        if missing:
            raise DatasetFormatError(
                f"{path}: line {lineno} missing keys {missing}; last complete record index {idx - 1}"
            )
        steps.append(int(rec["t"]))
        trajs.append(int(rec["traj"]))
        states.append(rec["s"])
        actions.append(int(rec["a"]))
        next_states.append(rec["s_next"])

    n = len(actions)
    declared = meta.get("steps")
    if declared is not None and declared != n:
        raise DatasetFormatError(
            f"{path}: metadata declares {declared} records but file holds {n}"
        )
    tabular = n == 0 or np.isscalar(states[0]) or not isinstance(states[0], list)
    if n == 0:
        env = meta.get("env", {})
        if env.get("kind") == "synthetic":
            p = int(env["p"])
            st = np.zeros((0, p), dtype=float)
            nx = np.zeros((0, p), dtype=float)
        else:
            st = np.zeros(0, dtype=np.int64)
            nx = np.zeros(0, dtype=np.int64)
    elif tabular:
        st = np.asarray(states, dtype=np.int64)
        nx = np.asarray(next_states, dtype=np.int64)
    else:
        st = np.asarray(states, dtype=float)
        nx = np.asarray(next_states, dtype=float)
    ds = TrajectoryDataset(
        steps=np.asarray(steps, dtype=np.int64),
        states=st,
        actions=np.asarray(actions, dtype=np.int64),
        next_states=nx,
        traj_ids=np.asarray(trajs, dtype=np.int64),
        meta=meta,
    )
    ds.validate()
    return ds
