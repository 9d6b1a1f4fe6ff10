import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsbm.errors import CapacityError, ParameterError, StructureError
from lsbm.tree_core import (
    BroadcastConfig,
    LabeledTree,
    Tree,
    broadcast,
    generate_gw_tree,
    generate_max_degree_tree,
    generate_regular_tree,
    mutation_pair_event,
    noisy_from_revealed,
    percolate,
    percolation_level_census,
    prune_high_degree,
    prune_labeled,
)

# root 0 with children 3, 1; node 1 has children 2, 4, 5; node 3 has child 6
HAND = np.array([-1, 0, 1, 0, 1, 1, 3])


def random_parents(n, rng):
    """Random recursive tree on n nodes with shuffled ids."""
    parent = np.array([-1] + [rng.integers(0, i) for i in range(1, n)])
    perm = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[perm] = np.where(parent < 0, -1, perm[np.maximum(parent, 0)])
    return out


def test_from_parents_hand_tree():
    t = Tree.from_parents(HAND)
    assert t.root == 0 and t.n == 7 and t.max_depth == 2
    assert t.level_sizes().tolist() == [1, 2, 4]
    assert sorted(t.children(1).tolist()) == [2, 4, 5]
    assert t.degrees().tolist() == [2, 4, 1, 2, 1, 1, 1]
    assert t.depth.tolist() == [0, 1, 2, 1, 2, 2, 2]
    assert t.branch().tolist() == [0, 1, 1, 3, 1, 1, 3]


def test_from_parents_rejects_bad_input():
    with pytest.raises(StructureError):
        Tree.from_parents([-1, -1])
    with pytest.raises(StructureError):
        Tree.from_parents([-1, 2, 1])
    with pytest.raises(StructureError):
        Tree.from_parents([-1, 5])
    assert Tree.from_parents([]).is_empty


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2 ** 32 - 1))
def test_from_parents_bfs_invariants(n, seed):
    parent = random_parents(n, np.random.default_rng(seed))
    t = Tree.from_parents(parent)
    d = t.depth
    nonroot = np.flatnonzero(parent >= 0)
    assert np.array_equal(d[nonroot], d[parent[nonroot]] + 1)
    assert np.all(np.diff(d[t.order]) >= 0)
    for v in range(n):
        assert sorted(t.children(v).tolist()) == sorted(np.flatnonzero(parent == v).tolist())


def test_regular_and_max_degree_trees():
    assert generate_regular_tree(3, 2).n == 13
    assert generate_regular_tree(1, 4).n == 5
    t = generate_max_degree_tree(3, 4)
    assert t.level_sizes().tolist() == [1, 3, 6, 12, 24]
    deg = t.degrees()
    assert np.all(deg[t.depth < 4] == 3)
    with pytest.raises(CapacityError):
        generate_regular_tree(3, 20, node_cap=1000)


def test_gw_tree_level_means():
    sizes = np.zeros(5)
    for s in range(2000):
        ls = generate_gw_tree(2.0, 4, s).level_sizes()
        sizes[:len(ls)] += ls
    np.testing.assert_allclose(sizes / 2000, 2.0 ** np.arange(5), rtol=0.1)


def test_gw_capacity_error_carries_partial_size():
    with pytest.raises(CapacityError) as exc:
        generate_gw_tree(5.0, 30, 1, node_cap=1000)
    assert exc.value.partial_size > 1000


def test_broadcast_channel_frequencies():
    k, eta = 4, 0.05
    tree = generate_regular_tree(2000, 1)
    lt = broadcast(tree, BroadcastConfig(k=k, eta=eta), 3, root_label=2)
    kids = lt.tau[1:]
    freq = np.bincount(kids, minlength=k + 1)[1:] / len(kids)
    expected = np.full(k, eta)
    expected[1] = 1 - (k - 1) * eta
    assert np.all(np.abs(freq - expected) < 5 * np.sqrt(expected * (1 - expected) / len(kids)))


def test_broadcast_reveal_scopes_and_noise():
    tree = generate_regular_tree(3, 6)
    cfg = BroadcastConfig(k=3, eta=0.1, p=0.5, delta=0.2, reveal_scope="interior")
    lt = broadcast(tree, cfg, 5)
    leaves = tree.level(6)
    assert not lt.revealed[leaves].any()
    assert abs(lt.revealed[tree.depth < 6].mean() - 0.5) < 0.05
    agree = (lt.tau_noisy == lt.tau).mean()
    assert abs(agree - (cfg.mu + (1 - cfg.mu) / 3)) < 0.03
    with pytest.raises(ParameterError):
        BroadcastConfig(k=2, eta=0.5)
    with pytest.raises(ParameterError):
        broadcast(tree, cfg, 0, root_label=4)


def test_broadcast_is_deterministic_and_root_fixed():
    tree = generate_gw_tree(3.0, 5, 0)
    cfg = BroadcastConfig(k=5, eta=0.1, p=0.3)
    a, b = broadcast(tree, cfg, 9, root_label=3), broadcast(tree, cfg, 9, root_label=3)
    assert a.tau[tree.root] == 3
    assert np.array_equal(a.tau, b.tau) and np.array_equal(a.revealed, b.revealed)


def test_labeled_tree_json_round_trip():
    tree = Tree.from_parents(HAND)
    lt = broadcast(tree, BroadcastConfig(k=3, eta=0.2, p=0.5, delta=0.1), 4)
    back = LabeledTree.from_json(lt.to_json())
    assert np.array_equal(back.tau, lt.tau)
    assert np.array_equal(back.revealed, lt.revealed)
    assert np.array_equal(back.tau_noisy, lt.tau_noisy)
    assert back.config == lt.config
    assert np.array_equal(back.tree.parent, tree.parent)


def test_noisy_from_revealed():
    tree = generate_regular_tree(3, 5)
    lt = broadcast(tree, BroadcastConfig(k=3, eta=0.1, p=0.4), 2)
    nz = noisy_from_revealed(lt, 7)
    assert np.array_equal(nz.tau_noisy[lt.revealed], lt.tau[lt.revealed])
    assert nz.tau_noisy.min() >= 1 and nz.tau_noisy.max() <= 3


def test_no_change_set_couples_to_percolation():
    # the set of nodes joined to the root by label-keeping edges is a
    # percolation cluster with retention 1 - (k-1) eta
    k, eta, d, depth, trials = 3, 0.08, 2.5, 5, 3000
    keep = 1 - (k - 1) * eta
    counts = np.zeros(depth + 1)
    for s in range(trials):
        tree = generate_gw_tree(d, depth, s)
        rng = np.random.default_rng(10 ** 6 + s)
        change = rng.random(tree.n) < (k - 1) * eta
        comp = np.zeros(tree.n, dtype=bool)
        comp[tree.root] = True
        for ell in range(1, tree.max_depth + 1):
            nodes = tree.level(ell)
            comp[nodes] = comp[tree.parent[nodes]] & ~change[nodes]
        counts[:tree.max_depth + 1] += np.bincount(tree.depth[comp], minlength=tree.max_depth + 1)
    fused = np.zeros(depth + 1)
    for s in range(trials):
        fused += percolation_level_census(d, keep, 0.0, depth, s)[0]
    expected = (d * keep) ** np.arange(depth + 1)
    np.testing.assert_allclose(counts / trials, expected, rtol=0.08)
    np.testing.assert_allclose(fused / trials, expected, rtol=0.08)


def test_level_census_matches_full_percolation():
    d, lam, p, depth, trials = 2.0, 0.7, 0.3, 4, 3000
    full_surv, fast_surv = 0, 0
    full_rev, fast_rev = np.zeros(depth + 1), np.zeros(depth + 1)
    for s in range(trials):
        tree = generate_gw_tree(d, depth, s)
        lt = broadcast(tree, BroadcastConfig(k=2, eta=0.0, p=p), s)
        out = percolate(lt, lam, s + trials)
        full_surv += out.survives_to(depth)
        full_rev[:len(out.level_revealed)] += out.level_revealed
        count, rev = percolation_level_census(d, lam, p, depth, s)
        fast_surv += count[-1] > 0
        fast_rev += rev
    se = np.sqrt(0.25 / trials)
    assert abs(full_surv - fast_surv) / trials < 5 * se * np.sqrt(2)
    np.testing.assert_allclose(full_rev / trials, fast_rev / trials, rtol=0.12, atol=0.02)


def test_percolate_hand_tree():
    tree = Tree.from_parents(HAND)
    assert percolate(tree, 1.0, 0).level_count.tolist() == [1, 2, 4]
    out = percolate(tree, 0.0, 0)
    assert out.level_count.tolist() == [1, 0, 0] and not out.survives_to(1)
    with pytest.raises(ParameterError):
        percolate(tree, 1.5, 0)


def test_prune_hand_tree():
    tree = Tree.from_parents(HAND)
    pruned = prune_high_degree(tree, 3)
    # node 1 has degree 4 and is removed with its children
    assert sorted(pruned.orig_ids.tolist()) == [0, 3, 6]
    assert prune_high_degree(tree, 1).is_empty
    assert prune_high_degree(tree, 4).n == 7


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 80), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_prune_property(n, D, seed):
    parent = random_parents(n, np.random.default_rng(seed))
    tree = Tree.from_parents(parent)
    pruned = prune_high_degree(tree, D)
    deg = tree.degrees()
    kept = set() if pruned.is_empty else set(pruned.orig_ids.tolist())
    for v in range(n):
        path_ok = True
        u = v
        while u >= 0:
            path_ok &= deg[u] <= D
            u = parent[u]
        assert (v in kept) == path_ok
    if not pruned.is_empty:
        # structure is preserved under the id map
        ids = pruned.orig_ids
        np.testing.assert_array_equal(parent[ids[1:]], ids[pruned.parent[1:]])


def test_prune_labeled_carries_labels():
    tree = Tree.from_parents(HAND)
    lt = broadcast(tree, BroadcastConfig(k=3, eta=0.2, p=0.5), 1)
    pl = prune_labeled(lt, 3)
    assert np.array_equal(pl.tau, lt.tau[pl.tree.orig_ids])


def test_mutation_event():
    tree = generate_max_degree_tree(3, 4)
    lt = broadcast(tree, BroadcastConfig(k=10, eta=0.0), 0)
    assert not mutation_pair_event(lt, 3)
    # hand labels: two leaves in different branches share label 2, root 1
    t = Tree.from_parents(HAND)
    tau = np.array([1, 1, 2, 1, 1, 1, 2])
    lt = LabeledTree(tree=t, k=3, tau=tau, revealed=np.zeros(7, dtype=bool))
    assert mutation_pair_event(lt, 1)
    tau = np.array([1, 1, 2, 1, 2, 1, 3])
    lt = LabeledTree(tree=t, k=3, tau=tau, revealed=np.zeros(7, dtype=bool))
    assert not mutation_pair_event(lt, 1)
