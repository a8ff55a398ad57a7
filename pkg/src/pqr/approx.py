"""Function approximation: two-layer ReLU regression and policy estimation.

Both trainers run deterministic full-batch gradient descent from a seeded
random initialization, so a (data, config) pair always reproduces the same
weights.  Targets are standardized internally; predictions are returned in
the original units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .demos import TrajectoryDataset

DEFAULT_CLIP_FLOOR = 1e-6


class TrainingDivergedError(RuntimeError):
    """Gradient descent produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration


@dataclass
class TrainerConfig:
    """Knobs for full-batch gradient descent training.

    lr_final, when set, anneals the step size geometrically from
    learning_rate down to lr_final across the run; constant-step descent
    on noisy targets stalls in an orbit around the minimum whose radius
    scales with the step, so the anneal is what lets long runs settle.
    """

    hidden_width: int = 64
    learning_rate: float = 0.1
    iterations: int = 1500
    seed: int = 0
    clip_floor: float = DEFAULT_CLIP_FLOOR
    lr_final: float | None = None

    def to_dict(self) -> dict:
        return {
            "hidden_width": self.hidden_width,
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "seed": self.seed,
            "clip_floor": self.clip_floor,
            "lr_final": self.lr_final,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})

    def replace(self, **kw) -> "TrainerConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainerConfig.from_dict(d)

    def step_sizes(self):
        """Per-iteration learning rates under the configured anneal."""
        lr0 = self.learning_rate
        if self.lr_final is None:
            return (lr0 for _ in range(self.iterations))
        if self.lr_final <= 0.0:
            raise ValueError(f"lr_final must be positive, got {self.lr_final}")
        decay = (self.lr_final / lr0) ** (1.0 / max(self.iterations - 1, 1))
        return (lr0 * decay ** i for i in range(self.iterations))


class TwoLayerReluNet:
    """Scalar-output net f(x) = w2 . relu(W1 x + b1) + b2."""

    def __init__(self, input_dim: int, hidden_width: int, seed: int):
        if input_dim < 1 or hidden_width < 1:
            raise ValueError("input_dim and hidden_width must be positive")
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.hidden_width = hidden_width
        self.seed = seed
        self.w1 = rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(hidden_width, input_dim))
        self.b1 = np.zeros(hidden_width)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden_width), size=hidden_width)
        self.b2 = 0.0
        # target standardization applied by the trainer
        self.y_shift = 0.0
        self.y_scale = 1.0
        self.loss_history: list[float] = []

    def raw_forward(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.raw_forward(x) * self.y_scale + self.y_shift

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_width": self.hidden_width,
            "seed": self.seed,
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": float(self.b2),
            "y_shift": float(self.y_shift),
            "y_scale": float(self.y_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoLayerReluNet":
        net = cls(d["input_dim"], d["hidden_width"], d["seed"])
        net.w1 = np.asarray(d["w1"], dtype=float)
        net.b1 = np.asarray(d["b1"], dtype=float)
        net.w2 = np.asarray(d["w2"], dtype=float)
        net.b2 = float(d["b2"])
        net.y_shift = float(d["y_shift"])
        net.y_scale = float(d["y_scale"])
        return net


def mse_loss_and_grads(net: TwoLayerReluNet, x: np.ndarray, y: np.ndarray):
    """Mean squared error of the raw net output and its exact gradients."""
    n = x.shape[0]
    z = x @ net.w1.T + net.b1
    h = np.maximum(z, 0.0)
    f = h @ net.w2 + net.b2
    resid = f - y
    loss = float(np.mean(resid * resid))
    e = (2.0 / n) * resid
    g_w2 = h.T @ e
    g_b2 = float(e.sum())
    dz = (e[:, None] * net.w2[None, :]) * (z > 0.0)
    g_w1 = dz.T @ x
    g_b1 = dz.sum(axis=0)
    return loss, {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def train_regressor(
    features: np.ndarray,
    targets: np.ndarray,
    config: TrainerConfig,
    init_net: TwoLayerReluNet | None = None,
) -> TwoLayerReluNet:
    """Fit a TwoLayerReluNet to (features, targets) by full-batch descent.

    Deterministic per (data, config).  Raises TrainingDivergedError with the
    offending iteration index if the loss leaves the finite range.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"features ({x.shape[0]}) and targets ({y.shape[0]}) disagree on length")
    if x.shape[0] == 0:
        raise ValueError("cannot train a regressor on an empty dataset")

    net = init_net if init_net is not None else TwoLayerReluNet(x.shape[1], config.hidden_width, config.seed)
    shift = float(y.mean())
    scale = float(y.std())
    if scale < 1e-12:
        scale = 1.0
    if init_net is not None:
        # re-express the inherited output layer under the new target
        # normalization so raw-space predictions carry over unchanged
        ratio = net.y_scale / scale
        net.w2 = net.w2 * ratio
        net.b2 = net.b2 * ratio + (net.y_shift - shift) / scale
    y_std = (y - shift) / scale
    net.y_shift = shift
    net.y_scale = scale

    history = []
    for i, lr in enumerate(config.step_sizes()):
        # a diverging iterate may overflow inside the grad computation;
        # the finiteness check below is the real guard
        with np.errstate(over="ignore", invalid="ignore"):
            loss, g = mse_loss_and_grads(net, x, y_std)
        if not np.isfinite(loss):
            raise TrainingDivergedError(i, loss)
        history.append(loss * scale * scale)
        net.w1 -= lr * g["w1"]
        net.b1 -= lr * g["b1"]
        net.w2 -= lr * g["w2"]
        net.b2 -= lr * g["b2"]
    net.loss_history = history
    return net


class SoftmaxPolicyNet:
    """Multinomial softmax with one logit head per action.

    hidden_width > 0 gives two-layer ReLU logits; hidden_width == 0 gives a
    plain linear-softmax model.
    """

    def __init__(self, input_dim: int, n_actions: int, hidden_width: int, seed: int):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.n_actions = n_actions
        self.hidden_width = hidden_width
        self.seed = seed
        if hidden_width > 0:
            self.w1 = rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(hidden_width, input_dim))
            self.b1 = np.zeros(hidden_width)
            self.w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden_width), size=(hidden_width, n_actions))
        else:
            self.w1 = None
            self.b1 = None
            self.w2 = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(input_dim, n_actions))
        self.b2 = np.zeros(n_actions)
        self.loss_history: list[float] = []

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.hidden_width > 0:
            h = np.maximum(x @ self.w1.T + self.b1, 0.0)
            return h @ self.w2 + self.b2
        return x @ self.w2 + self.b2

    def log_probs(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        zmax = z.max(axis=1, keepdims=True)
        return z - (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_actions": self.n_actions,
            "hidden_width": self.hidden_width,
            "seed": self.seed,
            "w1": None if self.w1 is None else self.w1.tolist(),
            "b1": None if self.b1 is None else self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxPolicyNet":
        net = cls(d["input_dim"], d["n_actions"], d["hidden_width"], d["seed"])
        if d["w1"] is not None:
            net.w1 = np.asarray(d["w1"], dtype=float)
            net.b1 = np.asarray(d["b1"], dtype=float)
        net.w2 = np.asarray(d["w2"], dtype=float)
        net.b2 = np.asarray(d["b2"], dtype=float)
        return net


def softmax_loss_and_grads(net: SoftmaxPolicyNet, x: np.ndarray, actions: np.ndarray):
    """Mean negative log-likelihood and its exact gradients."""
    n = x.shape[0]
    if net.hidden_width > 0:
        z1 = x @ net.w1.T + net.b1
        h = np.maximum(z1, 0.0)
        logits = h @ net.w2 + net.b2
    else:
        h = x
        logits = x @ net.w2 + net.b2
    zmax = logits.max(axis=1, keepdims=True)
    logp = logits - (zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True)))
    loss = float(-logp[np.arange(n), actions].mean())
    g_logits = np.exp(logp)
    g_logits[np.arange(n), actions] -= 1.0
    g_logits /= n
    g_w2 = h.T @ g_logits
    g_b2 = g_logits.sum(axis=0)
    grads = {"w2": g_w2, "b2": g_b2}
    if net.hidden_width > 0:
        dz1 = (g_logits @ net.w2.T) * (z1 > 0.0)
        grads["w1"] = dz1.T @ x
        grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def _train_softmax(x, actions, n_actions, config: TrainerConfig) -> SoftmaxPolicyNet:
    net = SoftmaxPolicyNet(x.shape[1], n_actions, config.hidden_width, config.seed)
    history = []
    for i, lr in enumerate(config.step_sizes()):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, g = softmax_loss_and_grads(net, x, actions)
        if not np.isfinite(loss):
            raise TrainingDivergedError(i, loss)
        history.append(loss)
        if net.hidden_width > 0:
            net.w1 -= lr * g["w1"]
            net.b1 -= lr * g["b1"]
        net.w2 -= lr * g["w2"]
        net.b2 -= lr * g["b2"]
    net.loss_history = history
    return net


def clip_log_policy(log_probs, floor: float = DEFAULT_CLIP_FLOOR):
    """Floor log-probabilities at log(floor) so downstream targets stay finite."""
    if not 0.0 < floor < 1.0:
        raise ValueError(f"clip floor must be in (0, 1), got {floor}")
    return np.maximum(log_probs, math.log(floor))


@dataclass
class PolicyEstimate:
    """A stochastic policy estimate exposing clipped log-probabilities.

    representation is "tabular" (count-based or exact table),
    "softmax-linear", or "softmax-net".  log_prob never returns values below
    log(clip_floor); the unclipped accessors exist for diagnostics.
    """

    representation: str
    n_actions: int
    clip_floor: float = DEFAULT_CLIP_FLOOR
    log_table: np.ndarray | None = None
    net: SoftmaxPolicyNet | None = None
    input_scale: float = 1.0
    degenerate: bool = False
    loss_history: list = field(default_factory=list)

    def log_prob_matrix_unclipped(self, states) -> np.ndarray:
        if self.log_table is not None:
            idx = np.asarray(states, dtype=np.int64)
            return self.log_table[idx]
        x = np.atleast_2d(np.asarray(states, dtype=float)) / self.input_scale
        return self.net.log_probs(x)

    def log_prob_matrix(self, states) -> np.ndarray:
        return clip_log_policy(self.log_prob_matrix_unclipped(states), self.clip_floor)

    def log_prob(self, states, actions) -> np.ndarray:
        mat = self.log_prob_matrix(states)
        a = np.asarray(actions, dtype=np.int64)
        return mat[np.arange(mat.shape[0]), a]

    def action_probs(self, state) -> np.ndarray:
        """Unclipped probability row for a single state (rollout interface)."""
        if self.log_table is not None:
            return np.exp(self.log_table[int(state)])
        x = np.asarray(state, dtype=float).reshape(1, -1) / self.input_scale
        return np.exp(self.net.log_probs(x)[0])


def fit_policy_mle(source, config: TrainerConfig | None = None) -> PolicyEstimate:
    """Estimate the demonstrator's policy by maximum likelihood.

    From a TrajectoryDataset: Laplace-smoothed counts for tabular
    environments, a softmax net over scaled states for continuous ones.
    Passing an exact solver solution (anything with .q and .v) skips
    estimation and returns its log-policy table verbatim.
    """
    cfg = config if config is not None else TrainerConfig()

    if hasattr(source, "q") and hasattr(source, "v"):
        log_table = (np.asarray(source.q) - np.asarray(source.v)[:, None]) / float(source.alpha)
        return PolicyEstimate(
            representation="tabular",
            n_actions=log_table.shape[1],
            clip_floor=cfg.clip_floor,
            log_table=log_table,
        )

    if not isinstance(source, TrajectoryDataset):
        raise TypeError("source must be a TrajectoryDataset or an exact solver solution")
    ds = source
    if len(ds) == 0:
        raise ValueError("cannot estimate a policy from an empty dataset: need at least one transition")
    env = ds.meta.get("env", {})
    kind = env.get("kind", "tabular" if ds.is_tabular else "synthetic")
    degenerate = bool(np.unique(ds.actions).size == 1)

    if kind == "tabular":
        n_states = int(env["n_states"])
        n_actions = int(env["n_actions"])
        counts = np.zeros((n_states, n_actions))
        np.add.at(counts, (ds.states, ds.actions), 1.0)
        smoothed = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + n_actions)
        return PolicyEstimate(
            representation="tabular",
            n_actions=n_actions,
            clip_floor=cfg.clip_floor,
            log_table=np.log(smoothed),
            degenerate=degenerate,
        )

    p = int(env["p"])
    n_actions = int(env.get("n_actions", 5))
    x = ds.states / float(p)
    net = _train_softmax(x, ds.actions, n_actions, cfg)
    return PolicyEstimate(
        representation="softmax-net" if cfg.hidden_width > 0 else "softmax-linear",
        n_actions=n_actions,
        clip_floor=cfg.clip_floor,
        net=net,
        input_scale=float(p),
        degenerate=degenerate,
        loss_history=net.loss_history,
    )
