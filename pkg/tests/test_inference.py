import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsbm.errors import CapacityError, ParameterError
from lsbm.inference import (
    Evidence,
    LabelMap,
    best_permutation_agreement,
    boundary_evidence,
    bp_posterior,
    brute_force_posterior,
    census_recover,
    census_vector,
    common_ancestor_candidates,
    common_ancestor_recover,
    ekps_bound,
    plurality_map,
    revealed_evidence,
    two_cluster_bound,
    two_cluster_bound_finite,
)
from lsbm.tree_core import BroadcastConfig, LabeledTree, Tree, broadcast, generate_regular_tree

HAND = np.array([-1, 0, 1, 0, 1, 1, 3])


def labeled(parent, tau, revealed=None, k=3):
    tree = Tree.from_parents(parent)
    rev = np.zeros(tree.n, dtype=bool)
    if revealed is not None:
        rev[revealed] = True
    return LabeledTree(tree=tree, k=k, tau=np.asarray(tau), revealed=rev)


def test_single_edge_and_path():
    ev = Evidence([1], [1], "clamped-boundary")
    np.testing.assert_allclose(bp_posterior(Tree.from_parents([-1, 0]), 0.1, 2, ev), [0.9, 0.1])
    ev = Evidence([2], [1], "clamped-boundary")
    path = Tree.from_parents([-1, 0, 1])
    np.testing.assert_allclose(bp_posterior(path, 0.1, 2, ev), [0.82, 0.18])
    np.testing.assert_allclose(brute_force_posterior(path, 0.1, 2, ev), [0.82, 0.18])


def test_noisy_leaf_oracle():
    # root -> child, child observed noisily as label 2; k = 3
    k, eta, delta = 3, 0.1, 0.05
    mu = 1 - k * delta
    channel = np.full((k, k), eta) + np.eye(k) * (1 - k * eta)
    emit = np.full(k, (1 - mu) / k)
    emit[1] += mu
    unnorm = channel @ emit
    ev = Evidence([1], [2], "noisy", delta)
    post = bp_posterior(Tree.from_parents([-1, 0]), eta, k, ev)
    np.testing.assert_allclose(post, unnorm / unnorm.sum(), atol=1e-14)


def test_no_evidence_is_uniform():
    post = bp_posterior(Tree.from_parents(HAND), 0.2, 3, Evidence.none())
    np.testing.assert_allclose(post, np.full(3, 1 / 3))


def test_clamped_root():
    post = bp_posterior(Tree.from_parents(HAND), 0.2, 3, Evidence([0], [3]))
    np.testing.assert_array_equal(post, [0.0, 0.0, 1.0])


def test_underflow_falls_back_to_logs():
    star = generate_regular_tree(4000, 1)
    leaves = star.level(1)
    labels = np.where(np.arange(len(leaves)) % 2 == 0, 1, 2)
    post = bp_posterior(star, 0.3, 2, Evidence(leaves, labels, "clamped-boundary"))
    np.testing.assert_allclose(post, [0.5, 0.5], atol=1e-12)
    labels[:10] = 1
    post = bp_posterior(star, 0.3, 2, Evidence(leaves, labels, "clamped-boundary"))
    ratio = (0.7 / 0.3) ** 10
    np.testing.assert_allclose(post[0], ratio / (1 + ratio), rtol=1e-10)


def test_zero_likelihood_and_conflicts():
    tree = Tree.from_parents([-1, 0, 0])
    with pytest.raises(ParameterError):
        bp_posterior(tree, 0.0, 2, Evidence([1, 2], [1, 2]))
    with pytest.raises(ParameterError):
        bp_posterior(tree, 0.1, 2, Evidence([1, 1], [1, 2]))
    # a duplicate consistent clamp is fine
    a = bp_posterior(tree, 0.1, 2, Evidence([1, 1], [1, 1]))
    b = bp_posterior(tree, 0.1, 2, Evidence([1], [1]))
    np.testing.assert_allclose(a, b)
    with pytest.raises(ParameterError):
        Evidence([1], [1], "noisy")
    with pytest.raises(ParameterError):
        bp_posterior(tree, 0.1, 2, Evidence([5], [1]))


def test_brute_force_capacity():
    tree = generate_regular_tree(2, 4)
    with pytest.raises(CapacityError):
        brute_force_posterior(tree, 0.1, 4, Evidence.none(), max_states=1000)


@st.composite
def small_instances(draw):
    n = draw(st.integers(1, 9))
    k = draw(st.integers(2, 4))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    parent = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, n)])
    perm = rng.permutation(n)
    shuffled = np.empty(n, dtype=np.int64)
    shuffled[perm] = np.where(parent < 0, -1, perm[np.maximum(parent, 0)])
    # subnormal eta underflows the enumeration oracle, so draw eta = 0 or >= 1e-6
    eta = draw(st.one_of(st.just(0.0), st.floats(1e-6, 0.999 / k)))
    delta = draw(st.floats(0.001, 0.999 / k))
    m = draw(st.integers(0, n))
    nodes = rng.choice(n, size=m, replace=False)
    labels = rng.integers(1, k + 1, size=m)
    roles = rng.choice(["revealed-interior", "clamped-boundary", "noisy"], size=m)
    return Tree.from_parents(shuffled), k, eta, Evidence(nodes, labels, roles.tolist(), delta)


@settings(max_examples=150, deadline=None)
@given(small_instances())
def test_bp_matches_brute_force(inst):
    tree, k, eta, ev = inst
    try:
        exact = brute_force_posterior(tree, eta, k, ev)
    except ParameterError:
        with pytest.raises(ParameterError):
            bp_posterior(tree, eta, k, ev)
        return
    np.testing.assert_allclose(bp_posterior(tree, eta, k, ev), exact, atol=1e-9)


def test_evidence_helpers():
    lt = broadcast(generate_regular_tree(2, 3), BroadcastConfig(k=2, eta=0.1, p=0.5), 1)
    rev = revealed_evidence(lt, exclude_root=True)
    assert 0 not in rev.nodes.tolist()
    assert np.all(lt.revealed[rev.nodes])
    bnd = boundary_evidence(lt)
    assert sorted(bnd.nodes.tolist()) == list(range(7, 15))
    both = rev.union(bnd)
    assert len(both) == len(rev) + len(bnd)
    assert both.role_names[-1] == "clamped-boundary"
    ev = Evidence.from_dict({1: 2}, noisy={2: 1}, delta=0.1)
    assert ev.noisy_mask.tolist() == [False, True]


def test_common_ancestor_hand_tree():
    # depth-2 nodes: 2, 4, 5 under branch 1 and 6 under branch 3
    lt = labeled(HAND, [1, 1, 2, 1, 3, 1, 2], revealed=[2, 4, 5, 6])
    cands, root_pruned = common_ancestor_candidates(lt, 2, 10)
    assert cands.tolist() == [2] and not root_pruned
    assert common_ancestor_recover(lt, 2, 10, 0) == 2
    # hiding node 6 removes the only cross-branch pair
    lt.revealed[6] = False
    assert len(common_ancestor_candidates(lt, 2, 10)[0]) == 0
    # pruning node 1 (degree 4) also removes it
    lt.revealed[6] = True
    assert len(common_ancestor_candidates(lt, 2, 3)[0]) == 0
    cands, root_pruned = common_ancestor_candidates(lt, 2, 1)
    assert root_pruned and len(cands) == 0


def test_common_ancestor_uniform_fallback():
    lt = labeled(HAND, [1, 1, 2, 1, 3, 1, 2], k=5)
    guesses = [common_ancestor_recover(lt, 2, 10, s) for s in range(2000)]
    freq = np.bincount(guesses, minlength=6)[1:] / 2000
    assert np.all(np.abs(freq - 0.2) < 0.05)


def test_census():
    lt = labeled(HAND, [1, 1, 2, 1, 3, 3, 2])
    label, cv = census_recover(lt, 2)
    np.testing.assert_allclose(cv.s, [-4 / 3, 2 - 4 / 3, 2 - 4 / 3])
    assert label == 2  # tie between 2 and 3 goes to the smaller label
    label, cv = census_recover(lt, 5, seed=1)
    assert 1 <= label <= 3 and not cv.s.any()
    with pytest.raises(ParameterError):
        census_recover(lt, 2, use_noisy=True)


@given(st.lists(st.integers(1, 5), max_size=50))
def test_census_vector_sums_to_zero(labels):
    s = census_vector(np.array(labels, dtype=np.int64), 5)
    assert abs(s.sum()) < 1e-9


def test_plurality_map_planted():
    rng = np.random.default_rng(0)
    k, n = 4, 4000
    truth = rng.integers(1, k + 1, size=n)
    perm = np.array([3, 1, 4, 2])
    clusters = perm[truth - 1]
    noise = rng.random(n) < 0.1
    clusters[noise] = rng.integers(1, k + 1, size=noise.sum())
    rev = np.flatnonzero(rng.random(n) < 0.05)
    m = plurality_map(clusters, rev, truth[rev], k)
    inverse = np.argsort(perm) + 1
    np.testing.assert_array_equal(m.g, inverse)
    assert not m.no_revealed.any()
    assert (m.apply(clusters, 0) == truth).mean() > 0.85


def test_plurality_map_small_clusters_and_no_reveals():
    clusters = np.array([1] * 50 + [2] * 48 + [3] * 2)
    m = plurality_map(clusters, [0, 1], [2, 2], 3, min_cluster_fraction=0.05, seed=3)
    assert m.g[0] == 2
    assert m.no_revealed.tolist() == [False, True, False]
    assert m.randomized.tolist() == [False, False, True]
    assert isinstance(m, LabelMap)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
def test_best_permutation_agreement_invariant(k, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(1, k + 1, size=40)
    truth = rng.integers(1, k + 1, size=40)
    perm = rng.permutation(k) + 1
    a = best_permutation_agreement(pred, truth, k)
    assert a == pytest.approx(best_permutation_agreement(perm[pred - 1], truth, k))
    assert a >= (pred == truth).mean() - 1e-12
    assert best_permutation_agreement(perm[truth - 1], truth, k) == 1.0


def test_bounds_oracle():
    # t = (3-1)^2 / (2 * 4) = 1/2
    assert two_cluster_bound_finite(3, 1, 0.04, 10) == pytest.approx(0.04 / 0.5 + 0.5 ** 10)
    assert two_cluster_bound(3, 1, 0.04) == pytest.approx(0.5 * np.sqrt(0.08))
    with pytest.raises(ParameterError):
        two_cluster_bound(10, 2, 0.1)
    tree = Tree.from_parents(HAND)
    assert ekps_bound(tree, [0, 1, 2], 0.25) == pytest.approx(2 * (1 + 0.25 + 0.0625))
