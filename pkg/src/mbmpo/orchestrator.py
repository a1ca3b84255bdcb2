"""End-to-end training loop: real data collection with adapted policies,
ensemble retraining, inner adaptation, imaginary resampling, and the
TRPO meta-update, with exact sample-ledger bookkeeping."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import metaopt, policy as pol, sampling
from .checkpoint import save_checkpoint
from .dynamics import (
    ModelEnsemble,
    PerturbationConfig,
    TrainConfig,
    TransitionBuffer,
    resample_perturbation,
    train_ensemble,
)
from .envs import UniformRandomController, make_env
from .errors import PreconditionError
from .metaopt import AdaptedTask, TrpoConfig

Array = np.ndarray

PROGRESS_COLUMNS = (
    "iteration",
    "real_env_samples_total",
    "avg_return",
    "std_return",
    "mean_model_val_loss",
    "mean_inner_kl",
    "trpo_accepted",
)


@dataclass
class RunConfig:
    env_id: str = "point2d"
    n_models: int = 5
    alpha: float = 1e-3
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    model_train: TrainConfig = field(default_factory=TrainConfig)
    model_hidden: tuple[int, ...] = (64, 64)
    policy_hidden: tuple[int, ...] = (32, 32)
    meta_steps_per_iter: int = 30
    real_transitions_per_iter: int = 600
    imaginary_transitions: int = 6000  # total per meta-step, split over models
    n_iterations: int = 50
    seed: int = 0
    tailored_collection: bool = True
    perturbation: PerturbationConfig | None = None
    eval_episodes: int = 10
    standardize_advantages: bool = True
    resample_per_meta_step: bool = True
    fvp_state_stride: int = 8
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.n_models < 1 or self.n_iterations < 1 or self.meta_steps_per_iter < 1:
            raise PreconditionError("all counts must be positive")
        if self.real_transitions_per_iter < 1 or self.imaginary_transitions < 1:
            raise PreconditionError("transition budgets must be positive")
        if self.alpha < 0.0:
            raise PreconditionError("alpha must be non-negative")


@dataclass
class IterationRecord:
    iteration: int
    real_env_samples_total: int
    avg_return: float
    std_return: float
    model_val_losses: list[float]
    mean_inner_kl: float
    trpo_accepted: int
    buffer_size: int
    max_accepted_kl: float
    min_accepted_improvement: float

    def csv_row(self) -> list[str]:
        return [
            str(self.iteration),
            str(self.real_env_samples_total),
            repr(self.avg_return),
            repr(self.std_return),
            repr(float(np.mean(self.model_val_losses))),
            repr(self.mean_inner_kl),
            str(self.trpo_accepted),
        ]


def evaluate(policy: pol.GaussianPolicy, env, n_episodes: int, rng) -> tuple[float, float]:
    """Monte-Carlo average (and std) of real-environment returns; the
    evaluation transitions never enter any training buffer."""
    if n_episodes < 1:
        raise PreconditionError("n_episodes must be >= 1")
    returns = []
    for _ in range(n_episodes):
        state = env.reset(rng)
        done = False
        total = 0.0
        while not done:
            action, _ = policy.sample_action(state, rng)
            state, reward, done = env.step(action)
            total += reward
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def _sample_tasks(
    config: RunConfig,
    env_cls,
    ensemble: ModelEnsemble,
    policy: pol.GaussianPolicy,
    rng,
) -> tuple[list[AdaptedTask], list[pol.ParameterVector], float]:
    """Per model k: imaginary rollouts under the current policy, one inner
    adaptation step, then imaginary rollouts under the adapted policy."""
    horizon = env_cls.spec.horizon
    per_model = max(horizon, (config.imaginary_transitions // len(ensemble)) // horizon * horizon)
    gamma = env_cls.spec.discount
    tasks: list[AdaptedTask] = []
    adapted: list[pol.ParameterVector] = []
    kl_sum = 0.0
    for k in range(len(ensemble)):
        predict_fn = ensemble.member_predictor(k)
        inner = sampling.rollout_model(
            predict_fn, policy, env_cls, per_model, horizon, rng, model_index=k
        )
        inner_baseline = sampling.fit_baseline(inner, gamma, horizon)
        inner_adv = sampling.gae(
            inner, inner_baseline, gamma, 1.0, standardize=config.standardize_advantages
        )
        inner_states = inner.flat_states()
        inner_actions = inner.flat_actions()
        theta_k = metaopt.inner_adapt(
            policy, policy.params, inner_states, inner_actions, inner_adv, config.alpha
        )
        adapted.append(theta_k)
        adapted_policy = policy.with_params(theta_k)
        outer = sampling.rollout_model(
            predict_fn, adapted_policy, env_cls, per_model, horizon, rng, model_index=k
        )
        outer_baseline = sampling.fit_baseline(outer, gamma, horizon)
        outer_adv = sampling.gae(
            outer, outer_baseline, gamma, 1.0, standardize=config.standardize_advantages
        )
        tasks.append(
            AdaptedTask(
                model_index=k,
                inner_states=inner_states,
                inner_actions=inner_actions,
                inner_advantages=inner_adv,
                theta_adapted_old=theta_k,
                outer_states=outer.flat_states(),
                outer_actions=outer.flat_actions(),
                outer_advantages=outer_adv,
                outer_log_probs_old=outer.flat_log_probs(),
            )
        )
        kl_sum += pol.mean_kl(policy, adapted_policy, inner_states[:: config.fvp_state_stride])
    return tasks, adapted, kl_sum / len(ensemble)


def run(config: RunConfig, out_dir: str | None = None, quiet: bool = True):
    """Run the full training loop; returns (final policy, records,
    adapted parameter list, ensemble)."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    env = make_env(config.env_id)
    eval_env = make_env(config.env_id)
    env_cls = type(env)
    spec = env.spec
    if config.real_transitions_per_iter % spec.horizon != 0:
        raise PreconditionError("real_transitions_per_iter must be a multiple of the horizon")

    policy = pol.GaussianPolicy.initial(
        spec.state_dim, spec.action_dim, rng, hidden=config.policy_hidden
    )
    ensemble = ModelEnsemble.initial(
        spec.state_dim,
        spec.action_dim,
        config.n_models,
        rng,
        hidden=config.model_hidden,
        perturbation=config.perturbation,
    )
    buffer = TransitionBuffer(spec.state_dim, spec.action_dim)
    random_controller = UniformRandomController(spec)
    records: list[IterationRecord] = []
    adapted_thetas: list[pol.ParameterVector] = []
    progress_path = os.path.join(out_dir, "progress.csv") if out_dir else None
    if progress_path:
        os.makedirs(out_dir, exist_ok=True)
        with open(progress_path, "w") as fh:
            fh.write(",".join(PROGRESS_COLUMNS) + "\n")

    for iteration in range(config.n_iterations):
        # -- real-environment data collection --------------------------
        if iteration == 0 or not adapted_thetas:
            controllers = [random_controller]
        elif config.tailored_collection:
            controllers = [policy.with_params(t) for t in adapted_thetas]
        else:
            controllers = [policy]
        batch = sampling.rollout_real(
            env, controllers, config.real_transitions_per_iter, spec.horizon, rng
        )
        for traj in batch.trajectories:
            buffer.add(traj.states[:-1], traj.clipped_actions, traj.states[1:])

        # -- model ensemble update --------------------------------------
        if config.perturbation is not None:
            resample_perturbation(ensemble, rng)
        ensemble, train_stats = train_ensemble(ensemble, buffer, config.model_train, rng)

        # -- meta-optimization on imaginary data ------------------------
        accepted = 0
        max_kl = 0.0
        min_improvement = np.inf
        inner_kls = []
        tasks = None
        for _ in range(config.meta_steps_per_iter):
            if tasks is None or config.resample_per_meta_step:
                tasks, adapted_thetas, inner_kl = _sample_tasks(
                    config, env_cls, ensemble, policy, rng
                )
                inner_kls.append(inner_kl)
            theta = policy.params
            grad = metaopt.meta_gradient(policy, theta, tasks, config.alpha)
            eval_fn = lambda p: metaopt.meta_surrogate_and_kl(policy, p, tasks, config.alpha)
            kl_grad_fn = metaopt.frozen_adaptation_kl_gradient(
                policy, theta, tasks, config.alpha, state_stride=config.fvp_state_stride
            )
            theta_new, result = metaopt.trpo_step(
                theta, grad, eval_fn, kl_grad_fn, config.trpo
            )
            policy = policy.with_params(theta_new)
            if result.accepted:
                accepted += 1
                max_kl = max(max_kl, result.kl)
                min_improvement = min(min_improvement, result.surrogate_improvement)

        # -- evaluation and bookkeeping ----------------------------------
        avg_return, std_return = evaluate(policy, eval_env, config.eval_episodes, rng)
        record = IterationRecord(
            iteration=iteration,
            real_env_samples_total=env.steps_taken,
            avg_return=avg_return,
            std_return=std_return,
            model_val_losses=[s.val_loss for s in train_stats],
            mean_inner_kl=float(np.mean(inner_kls)) if inner_kls else 0.0,
            trpo_accepted=accepted,
            buffer_size=len(buffer),
            max_accepted_kl=max_kl,
            min_accepted_improvement=float(min_improvement) if accepted else np.nan,
        )
        records.append(record)
        if progress_path:
            with open(progress_path, "a") as fh:
                fh.write(",".join(record.csv_row()) + "\n")
        if out_dir and (
            (iteration + 1) % config.checkpoint_every == 0
            or iteration == config.n_iterations - 1
        ):
            # adapted_thetas were computed from the pre-update parameters;
            # re-adapt from the current policy so the stored pair is
            # consistent. A spawned rng keeps the training stream intact.
            _, adapted_ck, _ = _sample_tasks(
                config, env_cls, ensemble, policy, rng.spawn(1)[0]
            )
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint_{iteration:04d}.npz"),
                config.env_id,
                iteration,
                policy,
                adapted_ck,
                config.alpha,
                ensemble,
            )
        if not quiet:
            print(
                f"iter {iteration:3d} return {avg_return:9.3f} "
                f"buffer {len(buffer):6d} accepted {accepted}/{config.meta_steps_per_iter}"
            )
    return policy, records, adapted_thetas, ensemble
