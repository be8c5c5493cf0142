import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from builders import oracle_log_evidence, oracle_posterior_weights, oracle_predict, query_points, random_model
from spngp.gp import GpLeaf, StateError
from spngp.kernels import KernelSpec
from spngp.spn import (
    CapacityError, DomainError, LeafNode, Region, SpnGp, SplitNode, SumNode, count_induced_trees,
    enumerate_induced_trees, log_evidence, map_leaves, node_flows, posterior_update, predict, route, validate,
)


def _leaf_node(nid, reg, X, y, sf=1.0, ls=0.5, noise=0.2, scope=0):
    spec = KernelSpec.create("se_ard", X.shape[1], sigma_f=sf, lengthscale=ls)
    return LeafNode(nid, frozenset([scope]), reg, gp=GpLeaf(spec, math.log(noise), X, y, data_idx=reg.data_idx))


def one_leaf_model(n=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 1))
    y = np.sin(5 * X[:, 0])
    reg = Region([0.0], [1.0], np.arange(n))
    return SpnGp({0: _leaf_node(0, reg, X, y)}, 0, 1, X_train=X, Y_train=y[:, None]).fit_leaves()


def two_leaf_sum(w=(0.5, 0.5), same=False, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (10, 1))
    y = np.cos(3 * X[:, 0])
    reg = Region([0.0], [1.0], np.arange(10))
    a = _leaf_node(0, reg, X, y, ls=0.5)
    b = _leaf_node(1, reg, X, y, ls=0.5 if same else 0.05, noise=0.2 if same else 0.9)
    s = SumNode(2, frozenset([0]), reg, [0, 1], np.log(np.asarray(w, dtype=float)))
    return SpnGp({0: a, 1: b, 2: s}, 2, 1, X_train=X, Y_train=y[:, None]).fit_leaves()


# -------------------------------------------------------------- validation


def test_single_leaf_is_valid():
    assert validate(one_leaf_model()) == []


def test_completeness_violation():
    m = two_leaf_sum()
    m.nodes[1].region = Region([0.0], [0.5])
    v = validate(m)
    assert [x.rule for x in v] == ["sum-completeness"]
    assert v[0].node_id == 2


def test_split_overlap_violation():
    X = np.array([[0.1], [0.7]])
    root = Region([0.0], [1.0], [0, 1])
    left, right = Region([0.0], [0.6], [0]), Region([0.4], [1.0], [1])
    nodes = {0: _leaf_node(0, left, X[:1], np.zeros(1)), 1: _leaf_node(1, right, X[1:], np.zeros(1)),
             2: SplitNode(2, frozenset([0]), root, axis=0, thresholds=np.array([0.5]), child_ids=[0, 1])}
    v = validate(SpnGp(nodes, 2, 1, X_train=X, Y_train=np.zeros((2, 1))))
    assert [x.rule for x in v] == ["split-disjointness"]


def test_other_violations_are_reported():
    m = two_leaf_sum()
    m.nodes[2].log_weights = np.log([0.5, 0.6])
    assert [x.rule for x in validate(m)] == ["sum-normalized"]
    m = two_leaf_sum()
    m.nodes[2].child_ids.append(99)
    assert validate(m)[0].rule == "missing-child"
    m = two_leaf_sum()
    m.nodes[5] = m.nodes[0]
    assert [x.rule for x in validate(m)] == ["unreachable"]


def test_cycle_detected():
    m = two_leaf_sum()
    m.nodes[3] = SumNode(3, frozenset([0]), m.nodes[2].region, [2], np.zeros(1))
    m.nodes[2].child_ids.append(3)
    m.nodes[2].log_weights = np.log([1 / 3] * 3)
    m.invalidate_order()
    assert validate(m)[0].rule == "cycle"


# -------------------------------------------------------------- evidence / posterior


def test_single_leaf_evidence_and_prediction():
    m = one_leaf_model()
    leaf = m.nodes[0].gp
    assert log_evidence(m) == leaf.log_evidence
    posterior_update(m)
    Xs = np.linspace(0, 1, 7)[:, None]
    pm, ref = predict(m, Xs)[0], leaf.predict(Xs)
    assert np.array_equal(pm.mean, ref.mean) and np.array_equal(pm.var_f, ref.var_f)
    assert np.array_equal(pm.var_y, ref.var_y)


def test_identical_leaves_half_half():
    m = two_leaf_sum(same=True)
    assert log_evidence(m) == pytest.approx(m.nodes[0].gp.log_evidence, abs=1e-12)


def test_two_component_bayes_rule():
    m = two_leaf_sum(w=(0.5, 0.5))
    a, b = m.nodes[0].gp.log_evidence, m.nodes[1].gp.log_evidence
    posterior_update(m)
    want = np.exp(np.array([a, b]) - logsumexp([a, b]))
    np.testing.assert_allclose(m.nodes[2].weights, want, rtol=1e-12)
    assert abs(logsumexp(m.nodes[2].log_weights)) < 1e-12


def test_empty_leaves_keep_weights():
    reg = Region([0.0], [1.0])
    X = np.zeros((0, 1))
    nodes = {0: _leaf_node(0, reg, X, np.zeros(0)), 1: _leaf_node(1, reg, X, np.zeros(0)),
             2: SumNode(2, frozenset([0]), reg, [0, 1], np.log([0.3, 0.7]))}
    m = SpnGp(nodes, 2, 1, X_train=X, Y_train=np.zeros((0, 1))).fit_leaves()
    posterior_update(m)
    np.testing.assert_allclose(m.nodes[2].weights, [0.3, 0.7], rtol=1e-15)


def test_degenerate_weights_give_first_leaf():
    m = two_leaf_sum()
    m.posterior_applied = True
    m.nodes[2].log_weights = np.array([0.0, -np.inf])
    Xs = np.linspace(0, 1, 5)[:, None]
    pm, ref = predict(m, Xs)[0], m.nodes[0].gp.predict(Xs)
    np.testing.assert_array_equal(pm.mean, ref.mean)
    np.testing.assert_array_equal(pm.var_f, ref.var_f)


def test_second_posterior_update_refused():
    m = two_leaf_sum()
    posterior_update(m)
    with pytest.raises(StateError):
        posterior_update(m)


def test_predict_before_posterior_refused():
    with pytest.raises(StateError):
        predict(two_leaf_sum(), np.zeros((1, 1)))


def test_unfitted_leaf_evidence_refused():
    m = two_leaf_sum()
    m.nodes[0].gp.invalidate()
    with pytest.raises(StateError):
        log_evidence(m)


def test_strict_mode_domain_error_and_clamping():
    m = random_model(3, D=1, DY=1)
    posterior_update(m)
    with pytest.raises(DomainError):
        predict(m, np.array([[1.5]]), strict=True)
    out = predict(m, np.array([[1.5], [-0.2]]))[0]
    assert np.all(np.isfinite(out.mean)) and np.all(out.var_f >= 0)
    with pytest.raises(DomainError):
        route(m, np.array([2.0]))


# -------------------------------------------------------------- enumeration


def test_enumeration_small_cases():
    t = enumerate_induced_trees(one_leaf_model())
    assert len(t) == 1 and t[0].log_prior == 0.0
    m = two_leaf_sum(w=(0.2, 0.8))
    t = enumerate_induced_trees(m)
    assert sorted(math.exp(x.log_prior) for x in t) == pytest.approx([0.2, 0.8])


def test_stacked_sums_give_six_trees():
    reg = Region([0.0], [1.0])
    X = np.zeros((0, 1))
    # a split whose halves sit under 2-way and 3-way sums: 2 x 3 trees
    nodes = {}
    left, right = Region([0.0], [0.5]), Region([0.5], [1.0])
    nodes[4] = _leaf_node(4, left, X, np.zeros(0))
    nodes[5] = _leaf_node(5, left, X, np.zeros(0))
    nodes[6] = SumNode(6, frozenset([0]), left, [4, 5], np.log([0.5, 0.5]))
    r = [_leaf_node(i, right, X, np.zeros(0)) for i in (7, 8, 9)]
    nodes.update({n.id: n for n in r})
    nodes[10] = SumNode(10, frozenset([0]), right, [7, 8, 9], np.log(np.full(3, 1 / 3)))
    nodes[11] = SplitNode(11, frozenset([0]), reg, axis=0, thresholds=np.array([0.5]), child_ids=[6, 10])
    nodes[12] = SumNode(12, frozenset([0]), reg, [11], np.zeros(1))
    m = SpnGp(nodes, 12, 1, X_train=X, Y_train=np.zeros((0, 1)))
    assert validate(m) == []
    assert count_induced_trees(m) == 6 == len(enumerate_induced_trees(m))


def test_capacity_error():
    m = random_model(7, max_depth=4)
    with pytest.raises(CapacityError):
        enumerate_induced_trees(m, cap=count_induced_trees(m) - 1)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6))
def test_prior_tree_weights_normalized(seed):
    m = random_model(seed, max_depth=3, tree_cap=5000, fit=False)
    lp = [t.log_prior for t in enumerate_induced_trees(m)]
    assert abs(math.exp(logsumexp(lp)) - 1.0) < 1e-10


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6))
def test_random_structures_match_enumeration(seed):
    m = random_model(seed, max_depth=3, tree_cap=2000)
    assert validate(m) == []
    trees = enumerate_induced_trees(m)
    assert abs(log_evidence(m) - oracle_log_evidence(m, trees)) < 1e-10
    want_w = oracle_posterior_weights(m, trees)
    Xs = query_points(m, np.random.default_rng(seed))
    want = oracle_predict(m, Xs, trees)
    posterior_update(m)
    for s in m.sums():
        np.testing.assert_allclose(np.exp(s.log_weights), want_w[s.id], rtol=0, atol=1e-10)
    post_lp = [t.log_prior for t in enumerate_induced_trees(m)]
    assert abs(math.exp(logsumexp(post_lp)) - 1.0) < 1e-10
    for pm, (mu, vf, vy) in zip(predict(m, Xs), want):
        np.testing.assert_allclose(pm.mean, mu, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(pm.var_f, vf, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(pm.var_y, vy, rtol=1e-8, atol=1e-12)
        assert np.all(pm.var_f >= 0) and np.all(pm.var_y >= pm.var_f)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6))
def test_routing_totality(seed):
    m = random_model(seed, tree_cap=500, fit=False)
    trees = enumerate_induced_trees(m)
    for x in query_points(m, np.random.default_rng(seed), 6):
        for hit in route(m, x, trees):
            assert len(hit) == m.output_dim
            assert sorted(m.nodes[l].output for l in hit) == list(range(m.output_dim))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 10**6))
def test_flows_are_edge_marginals(seed):
    m = random_model(seed, tree_cap=2000)
    trees = enumerate_induced_trees(m)
    from builders import tree_log_joint
    lj = tree_log_joint(m, trees)
    p = np.exp(lj - logsumexp(lj))
    flow = node_flows(m)
    for leaf in m.leaves():
        want = sum(pi for pi, t in zip(p, trees) if leaf.id in t.leaves)
        assert flow[leaf.id] == pytest.approx(want, abs=1e-10)


def test_map_leaves_follow_heaviest_tree():
    m = random_model(11, D=1, DY=1, tree_cap=500)
    posterior_update(m)
    trees = enumerate_induced_trees(m)
    best = max(trees, key=lambda t: t.log_prior)
    Xs = np.linspace(0, 1, 9)[:, None]
    got = map_leaves(m, Xs)[:, 0]
    for x, lid in zip(Xs, got):
        (hit,) = [h for h, t in zip(route(m, x, trees), trees) if t is best]
        assert hit == (lid,)


def test_split_route_half_open():
    s = SplitNode(0, frozenset([0]), Region([0.0], [1.0]), axis=0, thresholds=np.array([0.25, 0.5]))
    np.testing.assert_array_equal(s.route(np.array([[0.0], [0.25], [0.49], [0.5], [1.0]])), [0, 1, 1, 2, 2])
