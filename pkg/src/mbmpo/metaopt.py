"""Meta-optimization core: per-model inner adaptation, meta-objective and
meta-gradient over the adapted policies, and a TRPO outer step.

The second-order pathway through the inner step (d theta'_k / d theta =
I + alpha * H_k) is realized with finite-difference curvature-vector
products of the inner-objective gradient, never a double-backward graph.
Fisher-vector products for TRPO use the same trick on the KL gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .autodiff import ParameterVector
from .errors import NumericError, PreconditionError

Array = np.ndarray


@dataclass(frozen=True)
class TrpoConfig:
    kl_bound: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 1e-2
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15

    def __post_init__(self):
        if self.kl_bound <= 0.0 or self.cg_iters < 1 or self.max_backtracks < 1:
            raise PreconditionError("invalid TRPO configuration")


@dataclass
class MetaPolicyState:
    theta: ParameterVector
    adapted: list[ParameterVector]
    alpha: float

    def __post_init__(self):
        if self.alpha < 0.0:
            raise PreconditionError("alpha must be non-negative")


@dataclass
class AdaptedTask:
    """Everything the meta-objective needs about one ensemble member."""

    model_index: int
    inner_states: Array
    inner_actions: Array
    inner_advantages: Array
    theta_adapted_old: ParameterVector
    outer_states: Array
    outer_actions: Array
    outer_advantages: Array
    outer_log_probs_old: Array


@dataclass
class TrpoStepResult:
    accepted: bool
    kl: float
    surrogate_improvement: float
    backtracks: int


def policy_gradient(
    template: pol.GaussianPolicy,
    theta: ParameterVector,
    states: Array,
    actions: Array,
    advantages: Array,
) -> ParameterVector:
    """Likelihood-ratio gradient: grad of mean(log pi(a|s) * A)."""

    def objective(leaves):
        logp = template.log_prob_nodes(leaves, states, actions)
        return ad.reduce_mean(logp * advantages)

    return ad.grad(objective, theta)


def inner_adapt(
    template: pol.GaussianPolicy,
    theta: ParameterVector,
    states: Array,
    actions: Array,
    advantages: Array,
    alpha: float,
) -> ParameterVector:
    """One vanilla policy-gradient ascent step with step size alpha."""
    g = policy_gradient(template, theta, states, actions, advantages)
    if not np.all(np.isfinite(g.values)):
        raise NumericError("inner policy gradient is not finite")
    return theta.with_values(theta.values + alpha * g.values)


def _adapt_for_task(template, theta: ParameterVector, task: AdaptedTask, alpha: float):
    return inner_adapt(
        template, theta, task.inner_states, task.inner_actions, task.inner_advantages, alpha
    )


def _task_surrogate_value(template, theta_adapted: ParameterVector, task: AdaptedTask) -> float:
    logp = template.with_params(theta_adapted).log_prob(task.outer_states, task.outer_actions)
    ratio = np.exp(logp - task.outer_log_probs_old)
    return float(np.mean(ratio * task.outer_advantages))


def _task_surrogate_gradient(template, theta_adapted: ParameterVector, task: AdaptedTask):
    def objective(leaves):
        logp = template.log_prob_nodes(leaves, task.outer_states, task.outer_actions)
        ratio = ad.exp(logp - task.outer_log_probs_old)
        return ad.reduce_mean(ratio * task.outer_advantages)

    return ad.grad(objective, theta_adapted)


def meta_surrogate(
    template: pol.GaussianPolicy,
    theta: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
) -> float:
    """Importance-weighted meta-objective, averaged over ensemble members.
    The adapted parameters are recomputed from theta so its dependence on
    theta stays explicit."""
    if not tasks:
        raise PreconditionError("at least one adapted task is required")
    total = 0.0
    for task in tasks:
        theta_k = _adapt_for_task(template, theta, task, alpha)
        total += _task_surrogate_value(template, theta_k, task)
    return total / len(tasks)


def meta_gradient(
    template: pol.GaussianPolicy,
    theta: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
) -> ParameterVector:
    """Gradient of the meta-surrogate including the curvature pathway
    (I + alpha * H_k) applied via finite differences of the inner gradient."""
    if not tasks:
        raise PreconditionError("at least one adapted task is required")
    acc = np.zeros_like(theta.values)
    for task in tasks:
        theta_k = _adapt_for_task(template, theta, task, alpha)
        g_outer = _task_surrogate_gradient(template, theta_k, task)

        def inner_grad(p, task=task):
            return policy_gradient(
                template, p, task.inner_states, task.inner_actions, task.inner_advantages
            )

        curvature = ad.hvp_fd(inner_grad, theta, g_outer * alpha)
        acc += g_outer.values + curvature.values
    out = acc / len(tasks)
    if not np.all(np.isfinite(out)):
        raise NumericError("meta-gradient is not finite")
    return theta.with_values(out)


def mean_adapted_kl(
    template: pol.GaussianPolicy,
    theta_try: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
) -> float:
    """Mean KL between sampling-time adapted policies and the adapted
    policies induced by theta_try, over models and outer states."""
    total = 0.0
    for task in tasks:
        theta_k = _adapt_for_task(template, theta_try, task, alpha)
        total += pol.mean_kl(
            template.with_params(task.theta_adapted_old),
            template.with_params(theta_k),
            task.outer_states,
        )
    return total / len(tasks)


def adapted_kl_gradient(
    template: pol.GaussianPolicy,
    theta_try: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
    state_stride: int = 1,
) -> ParameterVector:
    """Gradient of mean_adapted_kl, with the same inner-step chain rule as
    the meta-gradient. `state_stride` subsamples both the KL states and the
    inner transitions; this only shapes the Fisher metric used for the
    search direction, the line-search KL check stays exact."""
    acc = np.zeros_like(theta_try.values)
    for task in tasks:
        inner_s = task.inner_states[::state_stride]
        inner_a = task.inner_actions[::state_stride]
        inner_adv = task.inner_advantages[::state_stride]
        g_inner = policy_gradient(template, theta_try, inner_s, inner_a, inner_adv)
        theta_k = theta_try.with_values(theta_try.values + alpha * g_inner.values)
        states = task.outer_states[::state_stride]
        p_old = template.with_params(task.theta_adapted_old)

        def kl_objective(leaves, states=states, p_old=p_old):
            return pol.mean_kl_nodes(p_old, template, leaves, states)

        g_kl = ad.grad(kl_objective, theta_k)

        def inner_grad(p, s=inner_s, a=inner_a, adv=inner_adv):
            return policy_gradient(template, p, s, a, adv)

        curvature = ad.hvp_fd(inner_grad, theta_try, g_kl * alpha)
        acc += g_kl.values + curvature.values
    return theta_try.with_values(acc / len(tasks))


def meta_surrogate_and_kl(
    template: pol.GaussianPolicy,
    theta_try: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
) -> tuple[float, float]:
    """Fused line-search evaluation: one re-adaptation per task serves both
    the surrogate value and the KL against the sampling-time policies."""
    if not tasks:
        raise PreconditionError("at least one adapted task is required")
    total_s = 0.0
    total_kl = 0.0
    for task in tasks:
        theta_k = _adapt_for_task(template, theta_try, task, alpha)
        total_s += _task_surrogate_value(template, theta_k, task)
        total_kl += pol.mean_kl(
            template.with_params(task.theta_adapted_old),
            template.with_params(theta_k),
            task.outer_states,
        )
    return total_s / len(tasks), total_kl / len(tasks)


def frozen_adaptation_kl_gradient(
    template: pol.GaussianPolicy,
    theta: ParameterVector,
    tasks: list[AdaptedTask],
    alpha: float,
    state_stride: int = 1,
):
    """Cheap KL-gradient closure for the Fisher metric: the inner-step
    offset alpha * g_k is computed once at the current theta and held fixed,
    so each evaluation costs one KL gradient per task instead of re-running
    the adaptation chain rule. This only shapes the CG search direction; the
    line search still measures the exact re-adapted KL."""
    frozen: list[tuple[Array, Array, pol.GaussianPolicy]] = []
    for task in tasks:
        g_inner = policy_gradient(
            template,
            theta,
            task.inner_states[::state_stride],
            task.inner_actions[::state_stride],
            task.inner_advantages[::state_stride],
        )
        frozen.append(
            (
                alpha * g_inner.values,
                task.outer_states[::state_stride],
                template.with_params(task.theta_adapted_old),
            )
        )

    def kl_grad(theta_try: ParameterVector) -> ParameterVector:
        acc = np.zeros_like(theta_try.values)
        for offset, states, p_old in frozen:
            theta_k = theta_try.with_values(theta_try.values + offset)

            def kl_objective(leaves, states=states, p_old=p_old):
                return pol.mean_kl_nodes(p_old, template, leaves, states)

            acc += ad.grad(kl_objective, theta_k).values
        return theta_try.with_values(acc / len(frozen))

    return kl_grad


def _conjugate_gradient(fvp, b: Array, iters: int) -> tuple[Array, Array]:
    """Solve fvp(x) = b; returns (x, fvp(x))."""
    x = np.zeros_like(b)
    ax = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr < 1e-12:
            break
        ap = fvp(p)
        if not np.all(np.isfinite(ap)):
            raise NumericError("conjugate gradient broke down (non-finite product)")
        alpha = rr / float(p @ ap)
        x = x + alpha * p
        ax = ax + alpha * ap
        r = r - alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, ax


def trpo_step(
    theta: ParameterVector,
    meta_grad: ParameterVector,
    eval_fn,
    kl_grad_fn,
    cfg: TrpoConfig,
) -> tuple[ParameterVector, TrpoStepResult]:
    """Constrained ascent step: CG on the damped Fisher system, step scaled
    to the KL bound, backtracking until the surrogate improves and the
    measured KL stays within the bound. `eval_fn(theta) -> (surrogate, kl)`
    is called once per candidate. Returns theta unchanged if no step is
    accepted."""
    g = meta_grad.values
    if float(np.linalg.norm(g)) == 0.0 or not np.all(np.isfinite(g)):
        return theta, TrpoStepResult(False, 0.0, 0.0, 0)

    def fvp(v: Array) -> Array:
        hv = ad.hvp_fd(kl_grad_fn, theta, theta.with_values(v)).values
        return hv + cfg.cg_damping * v

    try:
        direction, a_direction = _conjugate_gradient(fvp, g, cfg.cg_iters)
    except NumericError:
        # ill-conditioned metric (e.g. extreme log-std under badly biased
        # models) can overflow the FD curvature probe; decline the step
        return theta, TrpoStepResult(False, 0.0, 0.0, 0)
    if not (np.all(np.isfinite(direction)) and np.all(np.isfinite(a_direction))):
        return theta, TrpoStepResult(False, 0.0, 0.0, 0)
    # curvature of the undamped Fisher along the step direction
    dfd = float(direction @ a_direction) - cfg.cg_damping * float(direction @ direction)
    if dfd <= 0.0:
        dfd = float(direction @ a_direction)
    if dfd <= 0.0 or not np.isfinite(dfd):
        return theta, TrpoStepResult(False, 0.0, 0.0, 0)
    step_scale = np.sqrt(2.0 * cfg.kl_bound / dfd)
    full_step = step_scale * direction

    surrogate_before, _ = eval_fn(theta)
    scale = 1.0
    for backtracks in range(cfg.max_backtracks):
        candidate = theta.with_values(theta.values + scale * full_step)
        try:
            surrogate, kl = eval_fn(candidate)
        except NumericError:
            scale *= cfg.backtrack_ratio
            continue
        improvement = surrogate - surrogate_before
        # nan-safe: non-finite evaluations fail both conditions
        if improvement > 0.0 and kl <= cfg.kl_bound:
            return candidate, TrpoStepResult(True, kl, improvement, backtracks)
        scale *= cfg.backtrack_ratio
    return theta, TrpoStepResult(False, 0.0, 0.0, cfg.max_backtracks)
