"""Bi-level engine tests: closed forms, FD oracles, and descent behaviour."""

import math

import numpy as np
import pytest

from metaboot import ExprGraph, evaluate, finite_difference_check
from metaboot.augment import get_level
from metaboot.bilevel import (
    MetaUpdateReport,
    bootstrap_target,
    inner_adapt,
    kl_matching_loss,
    mean_query_loss,
    meta_gradient_standard,
    meta_step_bootstrapped,
    meta_step_standard,
    quadratic_task,
    theorem2_probe,
)
from metaboot.errors import ValidationError
from metaboot.model import EpisodeTensors, ParamSet, init_params
from metaboot.rng import generator
from metaboot.synthdata import generate
from metaboot.taskgen import construct_tasks
from metaboot.tensor import Tensor

DIM = 16 * 16


def scalar_theta(v):
    return ParamSet({"w": Tensor(np.asarray(float(v)))})


def quad(c):
    return quadratic_task(scalar_theta(c))


def tiny_episode(seed=0, way=2, m=4, m1=2, hid=6, proj=3):
    ds = generate(4, 4, seed=seed)
    batch = construct_tasks(list(ds.images), way, 1, m, m1, get_level("A3"), seed)
    ep = EpisodeTensors.from_episode(batch.episodes[0])
    theta = init_params(DIM, hid, proj, way, seed + 1)
    return theta, ep


# -- inner loop ---------------------------------------------------------


def test_zero_steps_returns_theta():
    theta = scalar_theta(3.0)
    traj = inner_adapt(theta, quad(1.0), L=0, alpha=0.1)
    assert traj.final["w"].data == theta["w"].data


def test_quadratic_single_step_closed_form():
    theta, c, alpha = 3.0, 1.25, 0.2
    traj = inner_adapt(scalar_theta(theta), quad(c), L=1, alpha=alpha)
    assert abs(traj.final["w"].item() - (theta - alpha * (theta - c))) < 1e-12


@pytest.mark.parametrize("L", [1, 3, 7])
def test_quadratic_multi_step_closed_form(L):
    theta, c, alpha = -1.7, 0.6, 0.15
    traj = inner_adapt(scalar_theta(theta), quad(c), L=L, alpha=alpha)
    expected = c + (1 - alpha) ** L * (theta - c)
    assert abs(traj.final["w"].item() - expected) < 1e-12
    assert len(traj.steps) == L + 1
    assert traj.steps[0]["w"].item() == theta


def test_trajectory_replay_identity():
    # Each recorded step equals previous - alpha * support gradient.
    theta, ep = tiny_episode(1)
    traj = inner_adapt(theta, ep, L=3, alpha=0.05)
    for k in range(3):
        replay = inner_adapt(traj.steps[k], ep, L=1, alpha=0.05)
        for name in theta:
            np.testing.assert_allclose(replay.final[name].data,
                                       traj.steps[k + 1][name].data,
                                       rtol=0, atol=1e-12)


def test_differentiable_unroll_matches_numeric_bitwise():
    theta, ep = tiny_episode(2)
    numeric = inner_adapt(theta, ep, L=2, alpha=0.08)
    g = ExprGraph()
    trail, _ = inner_adapt(theta, ep, L=2, alpha=0.08, graph=g, differentiable=True)
    values = evaluate(g, theta.arrays(), check_finite=False)
    for name in theta:
        assert np.array_equal(values.array(trail[-1][name]),
                              numeric.final[name].data)


# -- bootstrapped target -------------------------------------------------


def test_bootstrap_suffix_identity_bitwise():
    theta, ep = tiny_episode(3)
    target = bootstrap_target(theta, ep, L=2, delta=3, alpha=0.05)
    direct = inner_adapt(theta, ep, L=5, alpha=0.05).final
    for name in theta:
        assert np.array_equal(target[name].data, direct[name].data)
    # Continuing from w^L is the same computation as well.
    mid = inner_adapt(theta, ep, L=2, alpha=0.05).final
    cont = inner_adapt(mid, ep, L=3, alpha=0.05).final
    for name in theta:
        assert np.array_equal(target[name].data, cont[name].data)


def test_bootstrap_quadratic_closed_form():
    theta, c, alpha, L, delta = 2.5, -0.5, 0.1, 2, 4
    target = bootstrap_target(scalar_theta(theta), quad(c), L, delta, alpha)
    expected = c + (1 - alpha) ** (L + delta) * (theta - c)
    assert abs(target["w"].item() - expected) < 1e-12


def test_bootstrap_small_alpha_descends_support_loss():
    for seed in range(20):
        theta, ep = tiny_episode(seed + 10, hid=5, proj=3)
        alpha = 1e-3
        traj = inner_adapt(theta, ep, L=5, alpha=alpha)
        further = inner_adapt(theta, ep, L=10, alpha=alpha)
        assert further.support_losses[-1] <= traj.support_losses[-1]


def test_bootstrap_delta_validated():
    theta, ep = tiny_episode(4)
    with pytest.raises(ValidationError):
        bootstrap_target(theta, ep, L=1, delta=0, alpha=0.05)


# -- standard meta-gradient ----------------------------------------------


def test_meta_gradient_quadratic_closed_form():
    theta, c, alpha, L = 1.9, 0.3, 0.12, 3
    grads = meta_gradient_standard(scalar_theta(theta), [quad(c)], L, alpha)
    expected = (1 - alpha) ** (2 * L) * (theta - c)
    assert abs(grads["w"].item() - expected) < 1e-10


def test_meta_gradient_alpha_small_vs_plain_gradient():
    # With L = 0 the meta-gradient is the plain query gradient at theta.
    theta, ep = tiny_episode(5)
    grads = meta_gradient_standard(theta, [ep], L=0, alpha=0.05)
    g = ExprGraph()
    from metaboot.model import loss_total_nodes, register_param_leaves
    nodes = register_param_leaves(g, theta)
    loss = loss_total_nodes(g, nodes, g.const(ep.query_x), ep.query_y, 1.0, 0.5)
    from metaboot import backward
    plain = backward(g, loss, list(theta.names), leaf_values=theta.arrays())
    for name in theta:
        np.testing.assert_allclose(grads[name].data, plain[name].data,
                                   rtol=0, atol=1e-14)


def test_meta_gradient_matches_fd():
    # Central differences on theta through the whole two-step inner loop.
    theta, ep = tiny_episode(6, hid=4, proj=2)
    grads = meta_gradient_standard(theta, [ep], L=2, alpha=0.1)

    def f(flat):
        t = theta.unflatten(flat)
        return mean_query_loss(t, [ep], L=2, alpha=0.1)

    flat = theta.flatten()
    rng = generator(60)
    coords = rng.choice(flat.size, size=60, replace=False)
    analytic = np.concatenate([grads[n].data.reshape(-1) for n in theta])
    step = 1e-5
    for j in coords:
        base = flat[j]
        flat[j] = base + step
        hi = f(flat)
        flat[j] = base - step
        lo = f(flat)
        flat[j] = base
        numeric = (hi - lo) / (2 * step)
        denom = max(abs(analytic[j]), abs(numeric), 1e-12)
        assert abs(analytic[j] - numeric) / denom < 1e-5


def test_first_order_matches_exact_at_L0():
    theta, ep = tiny_episode(7)
    exact = meta_gradient_standard(theta, [ep], L=0, alpha=0.05)
    fo = meta_gradient_standard(theta, [ep], L=0, alpha=0.05, first_order=True)
    for name in theta:
        assert np.array_equal(exact[name].data, fo[name].data)


def test_meta_step_standard_quadratic_and_beta_zero():
    theta, c, alpha, beta, L = 1.1, -0.4, 0.1, 0.05, 2
    new, report = meta_step_standard(scalar_theta(theta), [quad(c)], L, alpha, beta)
    expected = theta - beta * (1 - alpha) ** (2 * L) * (theta - c)
    assert abs(new["w"].item() - expected) < 1e-10
    assert isinstance(report, MetaUpdateReport) and report.kl_value is None

    frozen, _ = meta_step_standard(scalar_theta(theta), [quad(c)], L, alpha, 0.0)
    assert frozen["w"].data == scalar_theta(theta)["w"].data


def test_meta_step_standard_descends_query_loss():
    # Descent of one exact meta step at small beta on 20 shipped toy
    # episodes. Random inits in this family can be sharp (the l2-normalized
    # projection head has large curvature where pre-projection norms are
    # small), so the verified step size sits well inside the regime.
    for seed in range(100, 120):
        theta, ep = tiny_episode(seed, hid=12, proj=6)
        before = mean_query_loss(theta, [ep], L=2, alpha=0.01)
        new, _ = meta_step_standard(theta, [ep], L=2, alpha=0.01, beta=5e-4)
        after = mean_query_loss(new, [ep], L=2, alpha=0.01)
        assert after <= before, f"seed {seed}"


# -- KL matching and the bootstrapped step --------------------------------


def test_kl_zero_for_equal_params():
    theta, ep = tiny_episode(8)
    g = ExprGraph()
    kl = kl_matching_loss(theta, theta, ep.query_x, g)
    value = evaluate(g, theta.arrays()).array(kl).item()
    assert abs(value) < 1e-12


def test_kl_nonnegative_randomized():
    for seed in range(10):
        theta, ep = tiny_episode(seed + 70)
        other = init_params(DIM, 6, 3, ep.way, seed + 200)
        g = ExprGraph()
        kl = kl_matching_loss(theta, other, ep.query_x, g)
        assert evaluate(g, other.arrays()).array(kl).item() >= 0.0


def test_kl_hand_computed_two_view_case():
    # pi_target = [0.9, 0.1], pi_student = [0.5, 0.5] on both views:
    # KL = 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5).
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert abs(expected - 0.3680642071684) < 1e-12

    from metaboot.bilevel import kl_matching_nodes
    g = ExprGraph()
    log_pt = np.log(np.array([[0.9, 0.1], [0.9, 0.1]]))
    # A student whose logits are identical across classes gives [0.5, 0.5].
    zero = ParamSet({k: Tensor(np.zeros(v.shape))
                     for k, v in init_params(DIM, 4, 2, 2, 0).items()})
    nodes = {k: g.const(v.data) for k, v in zero.items()}
    views = generator(0).uniform(size=(2, DIM))
    kl = kl_matching_nodes(g, nodes, g.const(views), log_pt)
    assert abs(evaluate(g, {}).array(kl).item() - expected) < 1e-12


def test_kl_theta_gradient_matches_fd():
    theta, ep = tiny_episode(9, hid=4, proj=2)
    L, delta, alpha = 2, 2, 0.1
    target = bootstrap_target(theta, ep, L, delta, alpha)

    def kl_at(flat):
        t = theta.unflatten(flat)
        adapted = inner_adapt(t, ep, L, alpha).final
        g = ExprGraph()
        kl = kl_matching_loss(target, adapted, ep.query_x, g)
        return evaluate(g, adapted.arrays()).array(kl).item()

    # Analytic gradient from the full bootstrapped construction at beta=0.
    _, report = meta_step_bootstrapped(theta, [ep], L, delta, alpha, beta=0.0)
    assert report.theta_after is theta

    from metaboot.autodiff import adjoint_nodes
    from metaboot.bilevel import episode_task, kl_matching_nodes, sgd_unroll
    from metaboot.bilevel import _log_predictive_values
    from metaboot.model import register_param_leaves
    g = ExprGraph()
    params = register_param_leaves(g, theta)
    trail, _ = sgd_unroll(g, params, episode_task(ep, 1.0, 0.5).support, L, alpha)
    kl = kl_matching_nodes(g, trail[-1], g.const(ep.query_x),
                           _log_predictive_values(target, ep.query_x))
    grads = adjoint_nodes(g, kl, [params[n] for n in theta])
    values = evaluate(g, theta.arrays(), check_finite=False)
    analytic = np.concatenate(
        [values.array(grads[params[n]]).reshape(-1) for n in theta])

    flat = theta.flatten()
    rng = generator(61)
    step = 1e-5
    for j in rng.choice(flat.size, size=50, replace=False):
        base = flat[j]
        flat[j] = base + step
        hi = kl_at(flat)
        flat[j] = base - step
        lo = kl_at(flat)
        flat[j] = base
        numeric = (hi - lo) / (2 * step)
        denom = max(abs(analytic[j]), abs(numeric), 1e-12)
        assert abs(analytic[j] - numeric) / denom < 1e-5


def test_bootstrapped_step_beta_zero_bitwise():
    theta, ep = tiny_episode(10)
    new, _ = meta_step_bootstrapped(theta, [ep], L=1, delta=1, alpha=0.05, beta=0.0)
    for name in theta:
        assert np.array_equal(new[name].data, theta[name].data)


def test_probe_rows_and_validation():
    theta, ep = tiny_episode(11, hid=4, proj=2)
    rows = theorem2_probe(theta, [ep], L=2, delta=2, alpha=0.05,
                          beta_grid=[1e-2, 1e-3])
    assert [r.beta for r in rows] == [1e-2, 1e-3]
    for row in rows:
        assert row.kl >= 0.0
        assert row.predicted_change == -(row.beta / 0.05) * row.kl
    with pytest.raises(ValidationError):
        theorem2_probe(theta, [ep], 2, 2, 0.05, [1e-3, 1e-2])
    with pytest.raises(ValidationError):
        theorem2_probe(theta, [ep], 2, 2, 0.05, [-1.0])


def test_probe_stationary_when_target_equals_student():
    # A krafted check of the stationarity claim: if the target equals the
    # student, the KL gradient vanishes and theta does not move.
    theta, ep = tiny_episode(12)
    adapted = inner_adapt(theta, ep, L=2, alpha=0.05).final
    g = ExprGraph()
    kl = kl_matching_loss(adapted, adapted, ep.query_x, g)
    from metaboot import backward
    grads = backward(g, kl, list(theta.names), leaf_values=adapted.arrays())
    total = sum(float(np.abs(grads[n].data).max()) for n in theta)
    # exp() of the stored log-probabilities and the student softmax can
    # differ in the last ulp, so "exactly zero" is zero to roundoff
    assert total < 1e-13
