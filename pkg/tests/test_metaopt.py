import numpy as np
import pytest

from mbmpo import metaopt
from mbmpo.autodiff import ParameterVector
from mbmpo.errors import PreconditionError
from mbmpo.policy import GaussianPolicy


def toy_policy(seed=0, hidden=(3,)):
    return GaussianPolicy.initial(1, 1, np.random.default_rng(seed), hidden=hidden)


def toy_task(template, theta, rng, n=12, alpha=1e-3, model_index=0):
    """Fixed-trajectory task: arrays drawn once, then everything is a
    deterministic function of theta."""
    inner_states = rng.normal(size=(n, template.state_dim))
    inner_actions = rng.normal(size=(n, template.action_dim))
    inner_adv = rng.normal(size=n)
    outer_states = rng.normal(size=(n, template.state_dim))
    outer_actions = rng.normal(size=(n, template.action_dim))
    outer_adv = rng.normal(size=n)
    theta_adapted = metaopt.inner_adapt(
        template, theta, inner_states, inner_actions, inner_adv, alpha
    )
    logp_old = template.with_params(theta_adapted).log_prob(outer_states, outer_actions)
    return metaopt.AdaptedTask(
        model_index=model_index,
        inner_states=inner_states,
        inner_actions=inner_actions,
        inner_advantages=inner_adv,
        theta_adapted_old=theta_adapted,
        outer_states=outer_states,
        outer_actions=outer_actions,
        outer_advantages=outer_adv,
        outer_log_probs_old=logp_old,
    )


# -- policy gradient and inner adaptation -----------------------------------


def test_policy_gradient_matches_fd():
    template = toy_policy()
    rng = np.random.default_rng(1)
    states = rng.normal(size=(8, 1))
    actions = rng.normal(size=(8, 1))
    adv = rng.normal(size=8)
    g = metaopt.policy_gradient(template, template.params, states, actions, adv).values

    def value(p):
        return float(np.mean(template.with_params(p).log_prob(states, actions) * adv))

    eps = 1e-6
    fd = np.zeros_like(g)
    base = template.params
    for i in range(base.size):
        up, down = base.values.copy(), base.values.copy()
        up[i] += eps
        down[i] -= eps
        fd[i] = (value(base.with_values(up)) - value(base.with_values(down))) / (2 * eps)
    assert np.max(np.abs(g - fd)) / (np.max(np.abs(fd)) + 1e-12) <= 1e-6


def test_inner_adapt_is_single_ascent_step():
    template = toy_policy()
    rng = np.random.default_rng(2)
    states = rng.normal(size=(6, 1))
    actions = rng.normal(size=(6, 1))
    adv = rng.normal(size=6)
    alpha = 1e-3
    g = metaopt.policy_gradient(template, template.params, states, actions, adv)
    adapted = metaopt.inner_adapt(template, template.params, states, actions, adv, alpha)
    assert np.array_equal(adapted.values, template.params.values + alpha * g.values)


def test_inner_adapt_alpha_zero_is_identity():
    template = toy_policy()
    rng = np.random.default_rng(3)
    adapted = metaopt.inner_adapt(
        template,
        template.params,
        rng.normal(size=(6, 1)),
        rng.normal(size=(6, 1)),
        rng.normal(size=6),
        0.0,
    )
    assert np.array_equal(adapted.values, template.params.values)


# -- surrogate --------------------------------------------------------------


def test_surrogate_at_sampling_theta_is_mean_advantage():
    template = toy_policy()
    rng = np.random.default_rng(4)
    task = toy_task(template, template.params, rng)
    value = metaopt.meta_surrogate(template, template.params, [task], 1e-3)
    # ratios are exactly 1 at the sampling parameters
    assert value == pytest.approx(float(np.mean(task.outer_advantages)), abs=1e-12)


def test_surrogate_matches_by_hand_ratio_sum():
    # K=2, 3 transitions each, evaluated away from the sampling parameters
    template = toy_policy(seed=5)
    rng = np.random.default_rng(6)
    tasks = [toy_task(template, template.params, rng, n=3, model_index=k) for k in range(2)]
    theta_try = template.params.with_values(
        template.params.values + 0.01 * rng.normal(size=template.params.size)
    )
    alpha = 1e-3
    by_hand = 0.0
    for task in tasks:
        theta_k = metaopt.inner_adapt(
            template, theta_try, task.inner_states, task.inner_actions,
            task.inner_advantages, alpha,
        )
        logp = template.with_params(theta_k).log_prob(task.outer_states, task.outer_actions)
        ratios = np.exp(logp - task.outer_log_probs_old)
        by_hand += sum(
            ratios[i] * task.outer_advantages[i] for i in range(3)
        ) / 3.0
    by_hand /= 2.0
    got = metaopt.meta_surrogate(template, theta_try, tasks, alpha)
    assert got == pytest.approx(by_hand, abs=1e-10)


def test_meta_surrogate_requires_tasks():
    template = toy_policy()
    with pytest.raises(PreconditionError):
        metaopt.meta_surrogate(template, template.params, [], 1e-3)


# -- meta-gradient ------------------------------------------------------------


def meta_fd(template, theta, tasks, alpha, eps=1e-6):
    fd = np.zeros(theta.size)
    for i in range(theta.size):
        up, down = theta.values.copy(), theta.values.copy()
        up[i] += eps
        down[i] -= eps
        fd[i] = (
            metaopt.meta_surrogate(template, theta.with_values(up), tasks, alpha)
            - metaopt.meta_surrogate(template, theta.with_values(down), tasks, alpha)
        ) / (2 * eps)
    return fd


def test_meta_gradient_matches_fd_through_inner_step():
    template = toy_policy(seed=7)
    rng = np.random.default_rng(8)
    tasks = [toy_task(template, template.params, rng, model_index=k) for k in range(2)]
    alpha = 1e-3
    g = metaopt.meta_gradient(template, template.params, tasks, alpha).values
    fd = meta_fd(template, template.params, tasks, alpha)
    assert np.max(np.abs(g - fd)) / (np.max(np.abs(fd)) + 1e-12) <= 1e-3


def test_meta_gradient_alpha_zero_bitwise_plain_gradient():
    template = toy_policy(seed=9)
    rng = np.random.default_rng(10)
    tasks = [toy_task(template, template.params, rng, alpha=0.0, model_index=k) for k in range(3)]
    g = metaopt.meta_gradient(template, template.params, tasks, 0.0).values
    plain = np.mean(
        [
            metaopt._task_surrogate_gradient(template, template.params, t).values
            for t in tasks
        ],
        axis=0,
    )
    assert np.array_equal(g, plain)


# -- KL machinery ---------------------------------------------------------------


def test_mean_adapted_kl_zero_at_sampling_theta():
    template = toy_policy(seed=11)
    rng = np.random.default_rng(12)
    tasks = [toy_task(template, template.params, rng)]
    kl = metaopt.mean_adapted_kl(template, template.params, tasks, 1e-3)
    assert kl == pytest.approx(0.0, abs=1e-12)


def test_fused_eval_matches_separate_paths():
    template = toy_policy(seed=13)
    rng = np.random.default_rng(14)
    tasks = [toy_task(template, template.params, rng, model_index=k) for k in range(2)]
    theta_try = template.params.with_values(
        template.params.values + 0.005 * rng.normal(size=template.params.size)
    )
    s, kl = metaopt.meta_surrogate_and_kl(template, theta_try, tasks, 1e-3)
    assert s == pytest.approx(metaopt.meta_surrogate(template, theta_try, tasks, 1e-3), abs=1e-12)
    assert kl == pytest.approx(metaopt.mean_adapted_kl(template, theta_try, tasks, 1e-3), abs=1e-12)


def test_frozen_metric_gradient_matches_exact_at_alpha_zero():
    template = toy_policy(seed=15)
    rng = np.random.default_rng(16)
    tasks = [toy_task(template, template.params, rng, alpha=0.0)]
    theta_try = template.params.with_values(
        template.params.values + 0.01 * rng.normal(size=template.params.size)
    )
    frozen = metaopt.frozen_adaptation_kl_gradient(template, template.params, tasks, 0.0)
    exact = metaopt.adapted_kl_gradient(template, theta_try, tasks, 0.0)
    assert np.allclose(frozen(theta_try).values, exact.values, atol=1e-12)


def test_adapted_kl_gradient_matches_fd():
    template = toy_policy(seed=17)
    rng = np.random.default_rng(18)
    tasks = [toy_task(template, template.params, rng)]
    alpha = 1e-3
    theta_try = template.params.with_values(
        template.params.values + 0.01 * rng.normal(size=template.params.size)
    )
    g = metaopt.adapted_kl_gradient(template, theta_try, tasks, alpha).values
    eps = 1e-6
    fd = np.zeros_like(g)
    for i in range(theta_try.size):
        up, down = theta_try.values.copy(), theta_try.values.copy()
        up[i] += eps
        down[i] -= eps
        fd[i] = (
            metaopt.mean_adapted_kl(template, theta_try.with_values(up), tasks, alpha)
            - metaopt.mean_adapted_kl(template, theta_try.with_values(down), tasks, alpha)
        ) / (2 * eps)
    assert np.max(np.abs(g - fd)) / (np.max(np.abs(fd)) + 1e-12) <= 1e-3


# -- conjugate gradient and TRPO step ----------------------------------------


def test_conjugate_gradient_solves_spd_system():
    rng = np.random.default_rng(19)
    m = rng.normal(size=(6, 6))
    a = m @ m.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    x, ax = metaopt._conjugate_gradient(lambda v: a @ v, b, iters=50)
    assert np.allclose(a @ x, b, atol=1e-8)
    assert np.allclose(ax, a @ x, atol=1e-10)


def quadratic_problem(dim=4, seed=20):
    """Analytic stand-in: linear surrogate, quadratic KL around theta0."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(dim, dim))
    fisher = m @ m.T + dim * np.eye(dim)
    g = rng.normal(size=dim)
    theta0 = ParameterVector(np.zeros(dim), (("x", (dim,)),))

    def eval_fn(p):
        d = p.values
        return float(g @ d), float(0.5 * d @ fisher @ d)

    def kl_grad_fn(p):
        return p.with_values(fisher @ p.values)

    return theta0, g, fisher, eval_fn, kl_grad_fn


def test_trpo_step_respects_kl_bound_on_quadratic():
    theta0, g, fisher, eval_fn, kl_grad_fn = quadratic_problem()
    cfg = metaopt.TrpoConfig(kl_bound=0.01)
    theta_new, result = metaopt.trpo_step(
        theta0, theta0.with_values(g), eval_fn, kl_grad_fn, cfg
    )
    assert result.accepted
    _, kl = eval_fn(theta_new)
    assert kl <= cfg.kl_bound + 1e-8
    assert kl >= 0.5 * cfg.kl_bound  # full step along natural gradient lands near the bound
    # direction is the natural gradient
    nat = np.linalg.solve(fisher + cfg.cg_damping * np.eye(4), g)
    cos = theta_new.values @ nat / (
        np.linalg.norm(theta_new.values) * np.linalg.norm(nat)
    )
    assert cos > 0.999


def test_trpo_step_zero_gradient_is_rejected():
    theta0, g, fisher, eval_fn, kl_grad_fn = quadratic_problem()
    theta_new, result = metaopt.trpo_step(
        theta0, theta0.with_values(np.zeros(4)), eval_fn, kl_grad_fn, metaopt.TrpoConfig()
    )
    assert not result.accepted
    assert theta_new is theta0


def test_trpo_step_rejection_leaves_theta_unchanged():
    theta0, g, fisher, _, kl_grad_fn = quadratic_problem()

    def hopeless_eval(p):
        # surrogate strictly decreases in every direction: no step acceptable
        return -float(p.values @ p.values), float(0.5 * p.values @ fisher @ p.values)

    cfg = metaopt.TrpoConfig(max_backtracks=5)
    theta_new, result = metaopt.trpo_step(
        theta0, theta0.with_values(g), hopeless_eval, kl_grad_fn, cfg
    )
    assert not result.accepted
    assert np.array_equal(theta_new.values, theta0.values)
    assert result.backtracks == 5


def test_trpo_backtracks_until_kl_satisfied():
    theta0, g, fisher, eval_fn, kl_grad_fn = quadratic_problem()
    cfg = metaopt.TrpoConfig(kl_bound=0.01)

    def overshooting_grad(p):
        # metric deliberately reported 100x too small: the initial scaled
        # step violates the bound, the line search must shrink it
        return p.with_values(0.01 * (fisher @ p.values))

    theta_new, result = metaopt.trpo_step(
        theta0, theta0.with_values(g), eval_fn, overshooting_grad, cfg
    )
    assert result.accepted
    assert result.backtracks > 0
    _, kl = eval_fn(theta_new)
    assert kl <= cfg.kl_bound
