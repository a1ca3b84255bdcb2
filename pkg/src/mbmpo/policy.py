"""Diagonal-Gaussian policy: network mean, learned state-independent log-std."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, Node, ParameterVector
from .errors import ConfigurationError

Array = np.ndarray

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianPolicy:
    mlp: MlpSpec
    params: ParameterVector

    @classmethod
    def param_layout(cls, mlp: MlpSpec) -> ad.Layout:
        return mlp.param_layout() + (("log_std", (mlp.output_dim,)),)

    @classmethod
    def initial(
        cls,
        state_dim: int,
        action_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (32, 32),
    ) -> "GaussianPolicy":
        mlp = MlpSpec(state_dim, hidden, action_dim, activation="tanh")
        net = mlp.init_params(rng).as_dict()
        net["log_std"] = np.zeros(action_dim)
        return cls(mlp, ParameterVector.from_dict(cls.param_layout(mlp), net))

    @property
    def state_dim(self) -> int:
        return self.mlp.input_dim

    @property
    def action_dim(self) -> int:
        return self.mlp.output_dim

    def with_params(self, params: ParameterVector) -> "GaussianPolicy":
        return replace(self, params=params)

    def log_std(self) -> Array:
        return np.clip(self.params.as_dict()["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, states: Array) -> Array:
        return ad.mlp_forward(self.mlp, self.params, states)

    def sample_actions(self, states: Array, rng: np.random.Generator) -> tuple[Array, Array]:
        """Batched sampling; returns (actions, log_probs)."""
        states = np.asarray(states, dtype=np.float64)
        mu = self.mean(states)
        log_std = self.log_std()
        std = np.exp(log_std)
        noise = rng.standard_normal(mu.shape)
        actions = mu + std * noise
        logp = -np.sum(log_std + 0.5 * LOG_2PI + 0.5 * np.square(noise), axis=-1)
        return actions, logp

    def sample_action(self, state: Array, rng: np.random.Generator) -> tuple[Array, float]:
        actions, logp = self.sample_actions(np.asarray(state)[None, :], rng)
        return actions[0], float(logp[0])

    def log_prob(self, states: Array, actions: Array) -> Array:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        mu = self.mean(states)
        log_std = self.log_std()
        z = (actions - mu) * np.exp(-log_std)
        return -np.sum(log_std + 0.5 * LOG_2PI + 0.5 * np.square(z), axis=-1)

    def log_prob_nodes(self, leaves: Mapping[str, Node], states: Array, actions: Array) -> Node:
        """Per-row log-density as an autodiff Node, for gradient objectives.

        The numeric-safety clip on log_std is a projection applied at
        sampling/update time; inside objectives the raw parameter is used
        so gradients stay exact.
        """
        mu = ad.mlp_forward(self.mlp, leaves, states)
        log_std = leaves["log_std"]
        z = (actions - mu) * ad.exp(-log_std)
        row = ad.reduce_sum(ad.square(z), axis=1) * 0.5
        const = ad.reduce_sum(log_std) + 0.5 * LOG_2PI * self.action_dim
        return -(row + const)


def mean_kl(p: GaussianPolicy, q: GaussianPolicy, states: Array) -> float:
    """Closed-form diagonal-Gaussian KL(p || q) averaged over states."""
    if p.mlp != q.mlp:
        raise ConfigurationError("policies must share the same network spec")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ConfigurationError("states must be non-empty")
    mu_p, mu_q = p.mean(states), q.mean(states)
    ls_p, ls_q = p.log_std(), q.log_std()
    var_p, var_q = np.exp(2.0 * ls_p), np.exp(2.0 * ls_q)
    per_dim = ls_q - ls_p + (var_p + np.square(mu_p - mu_q)) / (2.0 * var_q) - 0.5
    return float(np.mean(np.sum(per_dim, axis=-1)))


def mean_kl_nodes(
    p_fixed: GaussianPolicy, q_template: GaussianPolicy, leaves: Mapping[str, Node], states: Array
) -> Node:
    """KL(p_fixed || q(leaves)) averaged over states, differentiable in q."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    mu_p = p_fixed.mean(states)
    ls_p = p_fixed.log_std()
    var_p = np.exp(2.0 * ls_p)
    mu_q = ad.mlp_forward(q_template.mlp, leaves, states)
    ls_q = leaves["log_std"]
    inv_var_q = ad.exp(-2.0 * ls_q)
    diff = mu_p - mu_q
    quad = ad.reduce_sum((ad.square(diff) + var_p) * inv_var_q, axis=1) * 0.5
    const = ad.reduce_sum(ls_q) - float(np.sum(ls_p)) - 0.5 * p_fixed.action_dim
    return ad.reduce_mean(quad) + const
