"""Trajectory collection (real and imaginary) and advantage estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PreconditionError

Array = np.ndarray

DIVERGENCE_LIMIT = 1e3


@dataclass
class Trajectory:
    states: Array  # (T+1, state_dim)
    actions: Array  # (T, action_dim), unclipped policy samples
    clipped_actions: Array  # (T, action_dim), what the dynamics saw
    rewards: Array  # (T,)
    log_probs: Array  # (T,)
    source: str  # "real" or "model"
    model_index: int | None = None
    truncated: bool = False

    def __post_init__(self):
        t = len(self.actions)
        if len(self.states) != t + 1 or len(self.rewards) != t or len(self.log_probs) != t:
            raise ConfigurationError("inconsistent trajectory lengths")
        if not np.all(np.isfinite(self.rewards)):
            raise ConfigurationError("trajectory rewards must be finite")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class TrajectoryBatch:
    trajectories: list[Trajectory]
    model_index: int | None = None

    def __post_init__(self):
        sources = {t.source for t in self.trajectories}
        if len(sources) > 1:
            raise ConfigurationError("all trajectories in a batch must share a source")

    def __len__(self) -> int:
        return len(self.trajectories)

    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def flat_states(self) -> Array:
        return np.concatenate([t.states[:-1] for t in self.trajectories])

    def flat_actions(self) -> Array:
        return np.concatenate([t.actions for t in self.trajectories])

    def flat_log_probs(self) -> Array:
        return np.concatenate([t.log_probs for t in self.trajectories])

    def mean_return(self) -> float:
        return float(np.mean([np.sum(t.rewards) for t in self.trajectories]))


def rollout_real(env, controllers, n_transitions: int, horizon: int, rng) -> TrajectoryBatch:
    """Collect real-environment trajectories, round-robin over controllers."""
    if not controllers:
        raise PreconditionError("at least one controller is required")
    if n_transitions % horizon != 0:
        raise PreconditionError("n_transitions must be divisible by the horizon")
    n_traj = n_transitions // horizon
    trajectories = []
    for i in range(n_traj):
        controller = controllers[i % len(controllers)]
        state = env.reset(rng)
        states = [state]
        actions, clipped, rewards, logps = [], [], [], []
        for _ in range(horizon):
            a, lp = controller.sample_action(state, rng)
            state, r, done = env.step(a)
            states.append(state)
            actions.append(a)
            clipped.append(env.spec.clip_action(a))
            rewards.append(r)
            logps.append(lp)
            if done:
                break
        trajectories.append(
            Trajectory(
                np.asarray(states),
                np.asarray(actions),
                np.asarray(clipped),
                np.asarray(rewards),
                np.asarray(logps),
                source="real",
            )
        )
    return TrajectoryBatch(trajectories)


def rollout_model(
    predict_fn,
    policy,
    env_cls,
    n_transitions: int,
    horizon: int,
    rng,
    model_index: int | None = None,
) -> TrajectoryBatch:
    """Imaginary rollouts: states stepped by the model, rewards from the
    known reward function; the real environment is never touched. All
    trajectories advance in lockstep (vectorized across the batch).
    """
    if n_transitions % horizon != 0:
        raise PreconditionError("n_transitions must be divisible by the horizon")
    n_traj = n_transitions // horizon
    spec = env_cls.spec
    states = env_cls.initial_states(rng, n_traj)  # true p0
    state_seq = [states]
    action_seq, clipped_seq, reward_seq, logp_seq = [], [], [], []
    cutoff = np.full(n_traj, horizon, dtype=int)
    for t in range(horizon):
        actions, logps = policy.sample_actions(states, rng)
        clipped = spec.clip_action(actions)
        rewards = env_cls.reward(states, clipped)
        next_states = predict_fn(states, clipped, rng)
        diverged = np.max(np.abs(next_states), axis=-1) > DIVERGENCE_LIMIT
        cutoff = np.where(diverged & (cutoff == horizon), t + 1, cutoff)
        # freeze rows already past their cutoff so later steps stay finite
        next_states = np.where(diverged[:, None], states, next_states)
        state_seq.append(next_states)
        action_seq.append(actions)
        clipped_seq.append(clipped)
        reward_seq.append(rewards)
        logp_seq.append(logps)
        states = next_states
    all_states = np.stack(state_seq, axis=1)  # (n_traj, horizon+1, ds)
    all_actions = np.stack(action_seq, axis=1)
    all_clipped = np.stack(clipped_seq, axis=1)
    all_rewards = np.stack(reward_seq, axis=1)
    all_logps = np.stack(logp_seq, axis=1)
    trajectories = []
    for i in range(n_traj):
        t_end = int(cutoff[i])
        trajectories.append(
            Trajectory(
                all_states[i, : t_end + 1],
                all_actions[i, :t_end],
                all_clipped[i, :t_end],
                all_rewards[i, :t_end],
                all_logps[i, :t_end],
                source="model",
                model_index=model_index,
                truncated=t_end < horizon,
            )
        )
    return TrajectoryBatch(trajectories, model_index=model_index)


# -- linear baseline and GAE ---------------------------------------------


@dataclass
class LinearBaseline:
    """Least-squares value predictor on [s, s*s, t/H, (t/H)^2, (t/H)^3, 1]."""

    weights: Array
    horizon: int

    @staticmethod
    def features(states: Array, horizon: int) -> Array:
        states = np.atleast_2d(states)
        n = len(states)
        t = np.arange(n, dtype=np.float64) / horizon
        return np.column_stack(
            [states, np.square(states), t, t**2, t**3, np.ones(n)]
        )

    def predict(self, states: Array) -> Array:
        return self.features(states, self.horizon) @ self.weights


def discounted_returns(rewards: Array, gamma: float) -> Array:
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def fit_baseline(batch: TrajectoryBatch, gamma: float, horizon: int, ridge: float = 1e-5) -> LinearBaseline:
    if not batch.trajectories:
        raise PreconditionError("cannot fit a baseline on an empty batch")
    feats = []
    targets = []
    for traj in batch.trajectories:
        feats.append(LinearBaseline.features(traj.states[:-1], horizon))
        targets.append(discounted_returns(traj.rewards, gamma))
    x = np.concatenate(feats)
    y = np.concatenate(targets)
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    return LinearBaseline(np.linalg.solve(gram, x.T @ y), horizon)


def gae(
    batch: TrajectoryBatch,
    baseline: LinearBaseline,
    gamma: float,
    lam: float,
    standardize: bool = True,
) -> Array:
    """Per-step advantages, flat in batch order; terminal value is 0."""
    if not 0.0 < gamma <= 1.0 or not 0.0 <= lam <= 1.0:
        raise PreconditionError("gamma must be in (0,1] and lambda in [0,1]")
    advantages = []
    for traj in batch.trajectories:
        values = baseline.predict(traj.states[:-1])
        values_next = np.append(values[1:], 0.0)
        deltas = traj.rewards + gamma * values_next - values
        adv = np.zeros_like(deltas)
        acc = 0.0
        for t in range(len(deltas) - 1, -1, -1):
            acc = deltas[t] + gamma * lam * acc
            adv[t] = acc
        advantages.append(adv)
    flat = np.concatenate(advantages)
    if standardize:
        flat = (flat - np.mean(flat)) / (np.std(flat) + 1e-8)
    return flat


def dump_batch_csv(batch: TrajectoryBatch, path) -> None:
    """One CSV row per step: traj_id, t, s..., a..., r, logp."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        ds = batch.trajectories[0].states.shape[1]
        da = batch.trajectories[0].actions.shape[1]
        writer.writerow(
            ["traj_id", "t"]
            + [f"s{i}" for i in range(ds)]
            + [f"a{i}" for i in range(da)]
            + ["r", "logp"]
        )
        for tid, traj in enumerate(batch.trajectories):
            for t in range(len(traj)):
                writer.writerow(
                    [tid, t]
                    + [repr(float(x)) for x in traj.states[t]]
                    + [repr(float(x)) for x in traj.actions[t]]
                    + [repr(float(traj.rewards[t])), repr(float(traj.log_probs[t]))]
                )
