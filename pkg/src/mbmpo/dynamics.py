"""Ensemble of delta-state dynamics models.

Each member is a weight-normalized relu MLP mapping normalized (s, a) to
a normalized state delta. Training uses a per-member bootstrap of the
transition buffer, an 80/20 train/validation split, Adam on the one-step
squared-error loss, warm starts, and early stopping on a rolling
validation average (persistence 0.95, patience 5).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, ParameterVector
from .errors import ConfigurationError, NumericError, PreconditionError

Array = np.ndarray

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Normalizer:
    mean: Array
    std: Array

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(
            self, "std", np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        )

    @classmethod
    def fit(cls, data: Array) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        return cls(np.mean(data, axis=0), np.std(data, axis=0))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x: Array) -> Array:
        return (x - self.mean) / self.std

    def denormalize(self, x: Array) -> Array:
        return x * self.std + self.mean


@dataclass(frozen=True)
class DynamicsModel:
    spec: MlpSpec
    params: ParameterVector
    in_norm: Normalizer
    out_norm: Normalizer

    def predict(self, states: Array, actions: Array) -> Array:
        """Next-state prediction: s + denorm(net(norm([s, a])))."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        x = self.in_norm.normalize(np.concatenate([states, actions], axis=-1))
        delta = self.out_norm.denormalize(ad.mlp_forward(self.spec, self.params, x))
        return states + delta


@dataclass(frozen=True)
class PerturbationConfig:
    """Biased Gaussian noise N(b, noise_std^2) added to predictions;
    b ~ U(0, b_max) is redrawn per model each iteration."""

    b_max: float = 0.0
    noise_std: float = 0.1

    def __post_init__(self):
        if self.b_max < 0.0 or self.noise_std < 0.0:
            raise ConfigurationError("perturbation parameters must be non-negative")


class TransitionBuffer:
    """Append-only store of real (s, a, s') transitions."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._states: list[Array] = []
        self._actions: list[Array] = []
        self._next_states: list[Array] = []

    def __len__(self) -> int:
        return sum(len(s) for s in self._states)

    def add(self, states: Array, actions: Array, next_states: Array) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ConfigurationError("transition dimensions do not match the MDP spec")
        if not len(states) == len(actions) == len(next_states):
            raise ConfigurationError("mismatched transition array lengths")
        self._states.append(states)
        self._actions.append(actions)
        self._next_states.append(next_states)

    def arrays(self) -> tuple[Array, Array, Array]:
        if not self._states:
            raise PreconditionError("transition buffer is empty")
        return (
            np.concatenate(self._states),
            np.concatenate(self._actions),
            np.concatenate(self._next_states),
        )


@dataclass
class TrainConfig:
    batch_size: int = 500
    max_epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    rolling_persistence: float = 0.95
    patience: int = 5
    min_rel_improvement: float = 0.04


class EarlyStopMonitor:
    """Per-epoch stopping rule on the rolling validation average.

    A strict "decreases at all" test never fires: an exponentially tracking
    average keeps decreasing forever. Instead an epoch counts as improving
    if the rolling average or the raw validation loss dropped by a minimum
    relative amount; the rolling rate is capped at (1 - persistence) per
    epoch, so the 4% default is 80% of the fastest it can move, and the
    raw-loss clause covers slow ramps where the average has not caught up.
    """

    def __init__(self, persistence: float, patience: int, min_rel_improvement: float):
        self.persistence = persistence
        self.patience = patience
        self.min_rel_improvement = min_rel_improvement
        self.rolling: float | None = None
        self._prev_val: float | None = None
        self._bad_epochs = 0

    def update(self, val: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        prev_rolling = self.rolling
        prev_val = self._prev_val
        if self.rolling is None:
            self.rolling = val
        else:
            self.rolling = self.persistence * self.rolling + (1.0 - self.persistence) * val
        self._prev_val = val
        if prev_rolling is None:
            return False
        shrink = 1.0 - self.min_rel_improvement
        if self.rolling < prev_rolling * shrink or val < prev_val * shrink:
            self._bad_epochs = 0
            return False
        self._bad_epochs += 1
        return self._bad_epochs >= self.patience


@dataclass
class ModelTrainStats:
    val_loss: float
    epochs: int
    early_stopped: bool


@dataclass
class ModelEnsemble:
    models: list[DynamicsModel]
    perturbation: PerturbationConfig | None = None
    biases: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not self.models:
            raise ConfigurationError("ensemble needs at least one model")
        if self.biases.size == 0:
            self.biases = np.zeros(len(self.models))

    @classmethod
    def initial(
        cls,
        state_dim: int,
        action_dim: int,
        n_models: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
        perturbation: PerturbationConfig | None = None,
    ) -> "ModelEnsemble":
        spec = MlpSpec(
            state_dim + action_dim, hidden, state_dim, activation="relu", weight_normalized=True
        )
        models = [
            DynamicsModel(
                spec,
                spec.init_params(rng),
                Normalizer.identity(state_dim + action_dim),
                Normalizer.identity(state_dim),
            )
            for _ in range(n_models)
        ]
        return cls(models, perturbation=perturbation)

    def __len__(self) -> int:
        return len(self.models)

    def predict(
        self,
        k: int,
        states: Array,
        actions: Array,
        rng: np.random.Generator | None = None,
        perturb: bool = True,
    ) -> Array:
        out = self.models[k].predict(states, actions)
        if perturb and self.perturbation is not None:
            if rng is None:
                raise PreconditionError("perturbed prediction needs an rng")
            out = out + rng.normal(self.biases[k], self.perturbation.noise_std, size=out.shape)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"model {k} produced a non-finite prediction")
        return out

    def member_predictor(self, k: int):
        """Closure suited for model rollouts; applies perturbation if set."""

        def predict(states: Array, actions: Array, rng: np.random.Generator) -> Array:
            return self.predict(k, states, actions, rng=rng)

        return predict


def ensemble_std(ensemble: ModelEnsemble, states: Array, actions: Array) -> Array:
    """Per-coordinate population std of member predictions (no perturbation)."""
    if len(ensemble) < 2:
        raise PreconditionError("ensemble_std needs at least two models")
    preds = np.stack(
        [ensemble.predict(k, states, actions, perturb=False) for k in range(len(ensemble))]
    )
    return np.std(preds, axis=0)


def resample_perturbation(ensemble: ModelEnsemble, rng: np.random.Generator) -> ModelEnsemble:
    if ensemble.perturbation is None:
        raise PreconditionError("perturbation is not configured")
    ensemble.biases = rng.uniform(0.0, ensemble.perturbation.b_max, size=len(ensemble))
    return ensemble


def _loss_objective(spec: MlpSpec, x: Array, y: Array):
    def objective(leaves):
        err = ad.mlp_forward(spec, leaves, x) - y
        return ad.reduce_mean(ad.reduce_sum(ad.square(err), axis=1))

    return objective


def _val_loss(model_spec: MlpSpec, params: ParameterVector, x: Array, y: Array) -> float:
    err = ad.mlp_forward(model_spec, params, x) - y
    return float(np.mean(np.sum(np.square(err), axis=1)))


def _squared_error_grad(spec: MlpSpec, params: ParameterVector, x: Array, y: Array) -> Array:
    """Gradient of mean per-sample summed squared error, hand-rolled.

    Training takes thousands of minibatch gradients per call; bypassing the
    graph here is several times faster. Verified against ad.grad in tests.
    """
    views = params.as_dict()
    n_layers = len(spec.layer_dims())
    # forward, keeping inputs and relu masks per layer
    inputs: list[Array] = []
    masks: list[Array | None] = []
    weights: list[Array] = []
    wn_cache: list[tuple[Array, Array, Array] | None] = []
    h = x
    for i in range(n_layers):
        if spec.weight_normalized:
            v = views[f"l{i}.v"]
            gscale = views[f"l{i}.g"]
            row_norm = np.sqrt(np.sum(v * v, axis=1))
            w = v * (gscale / row_norm)[:, None]
            wn_cache.append((v, gscale, row_norm))
        else:
            w = views[f"l{i}.W"]
            wn_cache.append(None)
        weights.append(w)
        inputs.append(h)
        pre = h @ w.T + views[f"l{i}.b"]
        if i < n_layers - 1:
            if spec.activation == "tanh":
                h = np.tanh(pre)
                masks.append(h)  # tanh output doubles as the vjp cache
            else:
                mask = pre > 0.0
                h = np.where(mask, pre, 0.0)
                masks.append(mask)
        else:
            h = pre
            masks.append(None)
    # backward
    grad = np.empty(params.size)
    offsets = {name: (start, end) for name, _, start, end in ad._layout_offsets(params.layout)}
    d_pre = 2.0 * (h - y) / len(x)
    for i in range(n_layers - 1, -1, -1):
        d_w = d_pre.T @ inputs[i]
        s0, e0 = offsets[f"l{i}.b"]
        grad[s0:e0] = d_pre.sum(axis=0)
        if spec.weight_normalized:
            v, gscale, row_norm = wn_cache[i]
            scale = gscale / row_norm
            dw_dot_v = np.sum(d_w * v, axis=1)
            s0, e0 = offsets[f"l{i}.g"]
            grad[s0:e0] = dw_dot_v / row_norm
            s0, e0 = offsets[f"l{i}.v"]
            d_v = d_w * scale[:, None] - (scale * dw_dot_v / (row_norm * row_norm))[:, None] * v
            grad[s0:e0] = d_v.ravel()
        else:
            s0, e0 = offsets[f"l{i}.W"]
            grad[s0:e0] = d_w.ravel()
        if i > 0:
            d_h = d_pre @ weights[i]
            cache = masks[i - 1]
            if spec.activation == "tanh":
                d_pre = d_h * (1.0 - cache * cache)
            else:
                d_pre = d_h * cache
    return grad


def _train_one(
    model: DynamicsModel,
    states: Array,
    actions: Array,
    next_states: Array,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[DynamicsModel, ModelTrainStats]:
    n = len(states)
    boot = rng.integers(0, n, size=n)  # with-replacement bootstrap, |D_k| = |D|
    x_raw = np.concatenate([states[boot], actions[boot]], axis=1)
    y_raw = next_states[boot] - states[boot]
    in_norm = Normalizer.fit(x_raw)
    out_norm = Normalizer.fit(y_raw)
    x = in_norm.normalize(x_raw)
    y = out_norm.normalize(y_raw)

    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    x_tr, y_tr = x[train_idx], y[train_idx]
    x_val, y_val = (x[val_idx], y[val_idx]) if n_val else (x_tr, y_tr)

    params = model.params  # warm start
    flat = params.values.copy()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    t = 0
    monitor = EarlyStopMonitor(cfg.rolling_persistence, cfg.patience, cfg.min_rel_improvement)
    early_stopped = False
    val = _val_loss(model.spec, params.with_values(flat), x_val, y_val)
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            g = _squared_error_grad(model.spec, params.with_values(flat), x_tr[idx], y_tr[idx])
            t += 1
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            flat = flat - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        epochs_run = epoch + 1
        val = _val_loss(model.spec, params.with_values(flat), x_val, y_val)
        if monitor.update(val):
            early_stopped = True
            break
    new_model = replace(model, params=params.with_values(flat), in_norm=in_norm, out_norm=out_norm)
    return new_model, ModelTrainStats(val_loss=val, epochs=epochs_run, early_stopped=early_stopped)


def train_ensemble(
    ensemble: ModelEnsemble,
    buffer: TransitionBuffer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[ModelEnsemble, list[ModelTrainStats]]:
    if len(buffer) == 0:
        raise PreconditionError("cannot train on an empty buffer")
    states, actions, next_states = buffer.arrays()
    stats: list[ModelTrainStats] = []
    new_models: list[DynamicsModel] = []
    for model in ensemble.models:
        trained, st = _train_one(model, states, actions, next_states, cfg, rng)
        new_models.append(trained)
        stats.append(st)
    ensemble.models = new_models
    return ensemble, stats
