"""Analytic desk-scale environments with known reward functions.

Both environments are deterministic given (state, action); only reset
draws randomness. Actions outside the box are clipped, never rejected.
Each instance counts every real step it takes (`steps_taken`) so the
sample ledger stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, PreconditionError

Array = np.ndarray


@dataclass(frozen=True)
class MdpSpec:
    state_dim: int
    action_dim: int
    action_low: Array
    action_high: Array
    horizon: int
    discount: float

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float64)
        high = np.asarray(self.action_high, dtype=np.float64)
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)
        if not np.all(low < high):
            raise ConfigurationError("action_low must be < action_high elementwise")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigurationError("discount must lie in (0, 1]")

    def clip_action(self, action: Array) -> Array:
        return np.clip(action, self.action_low, self.action_high)


class Point2D:
    """Point agent on the plane: s' = s + clip(a), r = -||s||^2, H = 30."""

    spec = MdpSpec(
        state_dim=2,
        action_dim=2,
        action_low=np.array([-0.1, -0.1]),
        action_high=np.array([0.1, 0.1]),
        horizon=30,
        discount=0.99,
    )

    def __init__(self):
        self._state: Array | None = None
        self._t = 0
        self.steps_taken = 0

    @classmethod
    def initial_states(cls, rng: np.random.Generator, n: int) -> Array:
        return rng.uniform(-2.0, 2.0, size=(n, 2))

    @classmethod
    def dynamics(cls, states: Array, actions: Array) -> Array:
        return states + cls.spec.clip_action(actions)

    @classmethod
    def reward(cls, states: Array, actions: Array) -> Array:
        # reward depends on the pre-transition state only
        return -np.sum(np.square(states), axis=-1)

    def reset(self, rng: np.random.Generator) -> Array:
        self._state = self.initial_states(rng, 1)[0]
        self._t = 0
        return self._state.copy()

    def step(self, action: Array) -> tuple[Array, float, bool]:
        if self._state is None:
            raise PreconditionError("reset() must be called before step()")
        if not np.all(np.isfinite(self._state)) or not np.all(np.isfinite(action)):
            raise NumericError("non-finite state or action")
        reward = float(self.reward(self._state, action))
        self._state = self.dynamics(self._state, np.asarray(action, dtype=np.float64))
        self._t += 1
        self.steps_taken += 1
        return self._state.copy(), reward, self._t >= self.spec.horizon


class PointMass:
    """Damped double integrator: 4-D state (px, py, vx, vy), H = 50."""

    spec = MdpSpec(
        state_dim=4,
        action_dim=2,
        action_low=np.array([-0.5, -0.5]),
        action_high=np.array([0.5, 0.5]),
        horizon=50,
        discount=0.99,
    )

    def __init__(self):
        self._state: Array | None = None
        self._t = 0
        self.steps_taken = 0

    @classmethod
    def initial_states(cls, rng: np.random.Generator, n: int) -> Array:
        pos = rng.uniform(-2.0, 2.0, size=(n, 2))
        vel = np.zeros((n, 2))
        return np.concatenate([pos, vel], axis=1)

    @classmethod
    def dynamics(cls, states: Array, actions: Array) -> Array:
        a = cls.spec.clip_action(actions)
        pos, vel = states[..., :2], states[..., 2:]
        new_vel = 0.9 * vel + 0.1 * a
        new_pos = pos + 0.1 * new_vel
        return np.concatenate([new_pos, new_vel], axis=-1)

    @classmethod
    def reward(cls, states: Array, actions: Array) -> Array:
        a = cls.spec.clip_action(actions)
        pos = states[..., :2]
        return -np.sum(np.square(pos), axis=-1) - 0.05 * np.sum(np.square(a), axis=-1)

    def reset(self, rng: np.random.Generator) -> Array:
        self._state = self.initial_states(rng, 1)[0]
        self._t = 0
        return self._state.copy()

    def step(self, action: Array) -> tuple[Array, float, bool]:
        if self._state is None:
            raise PreconditionError("reset() must be called before step()")
        if not np.all(np.isfinite(self._state)) or not np.all(np.isfinite(action)):
            raise NumericError("non-finite state or action")
        reward = float(self.reward(self._state, action))
        self._state = self.dynamics(self._state, np.asarray(action, dtype=np.float64))
        self._t += 1
        self.steps_taken += 1
        return self._state.copy(), reward, self._t >= self.spec.horizon


ENV_REGISTRY = {"point2d": Point2D, "pointmass": PointMass}


def make_env(env_id: str):
    try:
        return ENV_REGISTRY[env_id]()
    except KeyError:
        raise ConfigurationError(f"unknown environment id {env_id!r}") from None


class UniformRandomController:
    """Uniform actions over the box; log-prob is the constant box density."""

    def __init__(self, spec: MdpSpec):
        self.spec = spec
        self._logp = -float(np.sum(np.log(spec.action_high - spec.action_low)))

    def sample_action(self, state: Array, rng: np.random.Generator):
        a = rng.uniform(self.spec.action_low, self.spec.action_high)
        return a, self._logp


def _scripted_action(env_id: str, state: Array) -> Array:
    if env_id == "point2d":
        return -state  # clipped to the box by the env
    if env_id == "pointmass":
        pos, vel = state[:2], state[2:]
        return -2.0 * pos - 1.5 * vel
    raise ConfigurationError(f"no scripted controller for {env_id!r}")


def scripted_oracle_return(env_id: str, n_episodes: int, rng: np.random.Generator) -> float:
    """Average return of the greedy hand-coded controller."""
    if n_episodes < 1:
        raise PreconditionError("n_episodes must be >= 1")
    env = make_env(env_id)
    total = 0.0
    for _ in range(n_episodes):
        s = env.reset(rng)
        done = False
        while not done:
            s, r, done = env.step(_scripted_action(env_id, s))
            total += r
    return total / n_episodes


def random_policy_return(env_id: str, n_episodes: int, rng: np.random.Generator) -> float:
    """Average return of the uniform-random controller (reference floor)."""
    if n_episodes < 1:
        raise PreconditionError("n_episodes must be >= 1")
    env = make_env(env_id)
    controller = UniformRandomController(env.spec)
    total = 0.0
    for _ in range(n_episodes):
        s = env.reset(rng)
        done = False
        while not done:
            a, _ = controller.sample_action(s, rng)
            s, r, done = env.step(a)
            total += r
    return total / n_episodes
