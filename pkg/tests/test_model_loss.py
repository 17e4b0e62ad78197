"""Network and loss tests against hand oracles and finite differences."""

import math

import numpy as np
import pytest

from metaboot import ExprGraph, evaluate, finite_difference_check
from metaboot.errors import ValidationError
from metaboot.model import (
    PARAM_NAMES,
    ParamSet,
    forward_nodes,
    init_params,
    loss_ce,
    loss_cl,
    loss_total_nodes,
    predictive_nodes,
    register_param_leaves,
    zero_params_like,
)
from metaboot.rng import generator

DIM, HID, PROJ, WAY = 9, 5, 4, 3


def tiny_params(seed=0):
    return init_params(DIM, HID, PROJ, WAY, seed)


def const_params(graph, params):
    return {k: graph.const(v.data) for k, v in params.items()}


def test_param_flatten_roundtrip_bitwise():
    p = tiny_params(1)
    q = p.unflatten(p.flatten())
    assert p.names == PARAM_NAMES
    for name in p:
        assert np.array_equal(p[name].data, q[name].data)


def test_zero_weights_uniform_softmax():
    g = ExprGraph()
    params = const_params(g, zero_params_like(tiny_params()))
    x = g.const(generator(2).uniform(size=(6, DIM)))
    pi = predictive_nodes(g, params, x)
    out = evaluate(g, {}).array(pi)
    np.testing.assert_allclose(out, np.full((6, WAY), 1.0 / WAY), atol=1e-15)


def test_duplicated_view_identical_rows():
    g = ExprGraph()
    params = const_params(g, tiny_params(3))
    row = generator(4).uniform(size=DIM)
    x = g.const(np.stack([row, row]))
    out = forward_nodes(g, params, x)
    vals = evaluate(g, {})
    for node in (out.features, out.projections, out.logits):
        arr = vals.array(node)
        assert np.array_equal(arr[0], arr[1])


def test_projection_rows_unit_norm():
    g = ExprGraph()
    params = const_params(g, tiny_params(5))
    x = g.const(generator(6).uniform(size=(8, DIM)))
    out = forward_nodes(g, params, x)
    norms = np.linalg.norm(evaluate(g, {}).array(out.projections), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-10)


def test_ce_uniform_logits():
    g = ExprGraph()
    logits = g.const(np.zeros((5, 4)))
    ce = loss_ce(g, logits, np.array([0, 1, 2, 3, 0]))
    assert abs(evaluate(g, {}).array(ce).item() - math.log(4.0)) < 1e-12


def test_ce_saturates_with_margin():
    g = ExprGraph()
    logits = np.zeros((4, 4))
    labels = np.array([0, 1, 2, 3])
    logits[np.arange(4), labels] = 20.0
    ce = loss_ce(g, g.const(logits), labels)
    assert evaluate(g, {}).array(ce).item() < 1e-3


def test_ce_matches_scalar_reimplementation():
    rng = generator(7)
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    expected = 0.0  # independent scalar computation
    for row, lbl in zip(logits, labels):
        expected -= math.log(math.exp(row[lbl]) / sum(math.exp(v) for v in row))
    expected /= 6
    g = ExprGraph()
    ce = loss_ce(g, g.const(logits), labels)
    assert abs(evaluate(g, {}).array(ce).item() - expected) < 1e-12


def test_ce_label_out_of_range():
    g = ExprGraph()
    with pytest.raises(ValidationError):
        loss_ce(g, g.const(np.zeros((2, 3))), np.array([0, 3]))


def _cl_oracle(projections, labels, tau):
    """Independent scalar NT-Xent: -log(pos/(pos+neg)) per anchor, averaged."""
    m = len(labels)
    total = 0.0
    for i in range(m):
        pos = neg = 0.0
        for j in range(m):
            if j == i:
                continue
            s = float(np.dot(projections[i], projections[j])) / tau
            if labels[j] == labels[i]:
                pos += math.exp(s)
            else:
                neg += math.exp(s)
        total += -math.log(pos / (pos + neg))
    return total / m


def test_cl_two_source_two_view_hand_case():
    # Unit projections with same-source similarity +1 and cross-source -1:
    # per-anchor loss is -log(e^2 / (e^2 + 2 e^-2)) at tau = 0.5.
    proj = np.array([[1.0, 0], [1.0, 0], [-1.0, 0], [-1.0, 0]])
    labels = np.array([0, 0, 1, 1])
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 2 * math.exp(-2.0)))
    assert abs(expected - _cl_oracle(proj, labels, 0.5)) < 1e-15
    g = ExprGraph()
    cl = loss_cl(g, g.const(proj), labels, tau=0.5)
    got = evaluate(g, {}).array(cl).item()
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.0359762997) < 1e-9  # frozen from the oracle above


def test_cl_identical_projections_counting_form():
    # All similarities are 1, so the loss reduces to -log(P/(P+N)).
    proj = np.tile(np.array([[0.6, 0.8]]), (6, 1))
    labels = np.array([0, 0, 0, 1, 1, 1])
    g = ExprGraph()
    cl = loss_cl(g, g.const(proj), labels, tau=0.7)
    expected = -math.log(2.0 / (2.0 + 3.0))
    assert abs(evaluate(g, {}).array(cl).item() - expected) < 1e-12


def test_cl_matches_oracle_randomized():
    rng = generator(8)
    for trial in range(10):
        m = 8
        labels = np.repeat(np.arange(4), 2)
        raw = rng.normal(size=(m, PROJ))
        proj = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        tau = float(rng.uniform(0.2, 1.5))
        g = ExprGraph()
        cl = loss_cl(g, g.const(proj), labels, tau)
        got = evaluate(g, {}).array(cl).item()
        assert abs(got - _cl_oracle(proj, labels, tau)) < 1e-12
        assert got > 0.0  # negatives exist, so the log ratio is < 1


def test_cl_permutation_invariant():
    rng = generator(9)
    labels = np.array([0, 0, 1, 1, 2, 2])
    raw = rng.normal(size=(6, PROJ))
    proj = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    g1 = ExprGraph()
    n1 = loss_cl(g1, g1.const(proj), labels, 0.5)
    base = evaluate(g1, {}).array(n1).item()
    perm = rng.permutation(6)
    g2 = ExprGraph()
    n2 = loss_cl(g2, g2.const(proj[perm]), labels[perm], 0.5)
    shuffled = evaluate(g2, {}).array(n2).item()
    assert abs(base - shuffled) < 1e-12


def test_cl_single_view_label_rejected():
    g = ExprGraph()
    proj = np.eye(3)
    with pytest.raises(ValidationError):
        loss_cl(g, g.const(proj), np.array([0, 0, 1]), 0.5)
    with pytest.raises(ValidationError):
        loss_cl(g, g.const(proj), np.array([0, 0, 0]), -1.0)


def _episode_inputs(seed, m_per_class=2, way=WAY):
    rng = generator(seed)
    x = rng.uniform(size=(way * m_per_class, DIM))
    y = np.repeat(np.arange(way), m_per_class)
    return x, y


def test_total_lambda_zero_is_ce():
    params = tiny_params(10)
    x, y = _episode_inputs(11)
    g = ExprGraph()
    nodes = const_params(g, params)
    xn = g.const(x)
    total = loss_total_nodes(g, nodes, xn, y, lam=0.0, tau=0.5)
    out = forward_nodes(g, nodes, xn)
    ce = loss_ce(g, out.logits, y)
    vals = evaluate(g, {})
    assert vals.array(total).item() == vals.array(ce).item()


def test_total_lambda_one_is_sum():
    params = tiny_params(12)
    x, y = _episode_inputs(13)
    g = ExprGraph()
    nodes = const_params(g, params)
    xn = g.const(x)
    total = loss_total_nodes(g, nodes, xn, y, lam=1.0, tau=0.5)
    out = forward_nodes(g, nodes, xn)
    ce = loss_ce(g, out.logits, y)
    cl = loss_cl(g, out.projections, y, 0.5)
    vals = evaluate(g, {})
    assert abs(vals.array(total).item()
               - (vals.array(ce).item() + vals.array(cl).item())) < 1e-12


def test_total_gradient_matches_fd():
    params = tiny_params(14)
    x, y = _episode_inputs(15)
    g = ExprGraph()
    nodes = register_param_leaves(g, params)
    total = loss_total_nodes(g, nodes, g.const(x), y, lam=1.0, tau=0.5)
    err = finite_difference_check(g, total, list(params.names),
                                  params.arrays(), step=1e-5)
    assert err < 1e-6


def test_total_relabeling_invariance():
    # Permute class indices and the classifier columns consistently.
    params = tiny_params(16)
    x, y = _episode_inputs(17)
    perm = np.array([2, 0, 1])
    permuted = dict(params.arrays())
    permuted["Wc"] = params["Wc"].data[:, perm]
    permuted["bc"] = params["bc"].data[:, perm]
    relabeled = np.array([int(np.where(perm == lbl)[0][0]) for lbl in y])

    g1 = ExprGraph()
    n1 = loss_total_nodes(g1, const_params(g1, params), g1.const(x), y, 1.0, 0.5)
    base = evaluate(g1, {}).array(n1).item()
    g2 = ExprGraph()
    n2 = loss_total_nodes(g2, const_params(g2, ParamSet(permuted)), g2.const(x),
                          relabeled, 1.0, 0.5)
    moved = evaluate(g2, {}).array(n2).item()
    assert abs(base - moved) < 1e-12


def test_predictive_rows_sum_to_one_and_shift_invariant():
    params = tiny_params(18)
    x, _ = _episode_inputs(19)
    g = ExprGraph()
    nodes = const_params(g, params)
    pi = predictive_nodes(g, nodes, g.const(x))
    rows = evaluate(g, {}).array(pi)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)

    # Adding a per-row constant to logits leaves softmax unchanged.
    logits = generator(20).normal(size=(5, WAY))
    shift = generator(21).normal(size=(5, 1))
    g2 = ExprGraph()
    na = g2.softmax(g2.const(logits))
    a = evaluate(g2, {}).array(na)
    g3 = ExprGraph()
    nb = g3.softmax(g3.const(logits + shift))
    b = evaluate(g3, {}).array(nb)
    np.testing.assert_allclose(a, b, atol=1e-12)
