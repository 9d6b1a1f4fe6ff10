"""Rooted trees, the k-label broadcast process, percolation and degree pruning.

A :class:`Tree` keeps its parent array in node-id space together with a BFS
ordering in which the children of every node are contiguous. All level-wise
passes (broadcast, percolation, belief propagation) run over that ordering
with numpy, one level at a time. Trees built by the generators here are
already in BFS order, so node ids and BFS positions coincide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, ParameterError, StructureError
from .rng import make_rng

DEFAULT_NODE_CAP = 5_000_000


class Tree:
    """Immutable rooted tree.

    Attributes
    ----------
    parent : int64 array, parent id per node (-1 for the root)
    depth : int64 array, distance from the root
    order : BFS order of node ids (root first, children of a node contiguous)
    level_ptr : ``order[level_ptr[l]:level_ptr[l+1]]`` are the nodes at depth l
    child_ptr : in BFS positions, children of position i occupy
        positions ``child_ptr[i]:child_ptr[i+1]``
    orig_ids : optional back-map to the ids of the structure this tree came from
    """

    def __init__(self, parent, order, level_ptr, orig_ids=None):
        self.parent = parent
        self.order = order
        self.level_ptr = level_ptr
        self.orig_ids = orig_ids
        self._groups = None
        n = len(parent)
        self.n = n
        if n == 0:
            self.pos = order
            self.parent_pos = order
            self.depth = order
            self.child_ptr = np.zeros(1, dtype=np.int64)
            self._branch = order
            return
        if np.array_equal(order, np.arange(n)):
            self.pos = order
            self.parent_pos = parent
        else:
            pos = np.empty(n, dtype=np.int64)
            pos[order] = np.arange(n)
            self.pos = pos
            pp = parent[order]
            self.parent_pos = np.where(pp >= 0, pos[np.maximum(pp, 0)], -1)
        depth_ord = np.repeat(np.arange(len(level_ptr) - 1), np.diff(level_ptr))
        self.depth = np.empty(n, dtype=np.int64)
        self.depth[order] = depth_ord
        counts = np.bincount(self.parent_pos[1:], minlength=n) if n > 1 else np.zeros(1, np.int64)
        self.child_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.child_ptr[1:])
        self.child_ptr += 1
        self.child_ptr[0] = 1
        self._branch = None

    # -- construction -----------------------------------------------------

    @classmethod
    def from_parents(cls, parent, orig_ids=None):
        """Build from an arbitrary parent array (exactly one entry -1)."""
        parent = np.asarray(parent, dtype=np.int64)
        n = len(parent)
        if n == 0:
            return cls.empty()
        roots = np.flatnonzero(parent < 0)
        if len(roots) != 1:
            raise StructureError(f"exactly one root required, found {len(roots)}")
        if np.any(parent >= n):
            raise StructureError("parent id out of range")
        child_of = np.where(parent < 0, n, parent)
        by_parent = np.argsort(child_of, kind="stable")
        ptr = np.zeros(n + 2, dtype=np.int64)
        np.cumsum(np.bincount(child_of, minlength=n + 1), out=ptr[1:])
        frontier = roots
        chunks, level_ptr = [roots], [0, 1]
        seen = 1
        while True:
            starts, stops = ptr[frontier], ptr[frontier + 1]
            cnt = stops - starts
            total = int(cnt.sum())
            if total == 0:
                break
            offs = np.repeat(starts - np.concatenate(([0], np.cumsum(cnt)[:-1])), cnt)
            nxt = by_parent[np.arange(total) + offs]
            seen += total
            if seen > n:
                raise StructureError("parent array contains a cycle")
            chunks.append(nxt)
            level_ptr.append(seen)
            frontier = nxt
        if seen != n:
            raise StructureError("parent array contains a cycle or unreachable nodes")
        order = np.concatenate(chunks)
        return cls(parent, order, np.asarray(level_ptr, dtype=np.int64),
                   None if orig_ids is None else np.asarray(orig_ids, dtype=np.int64))

    @classmethod
    def _from_bfs(cls, parent, level_sizes):
        n = len(parent)
        level_ptr = np.zeros(len(level_sizes) + 1, dtype=np.int64)
        np.cumsum(level_sizes, out=level_ptr[1:])
        return cls(parent, np.arange(n, dtype=np.int64), level_ptr)

    @classmethod
    def empty(cls):
        z = np.empty(0, dtype=np.int64)
        return cls(z, z, np.zeros(1, dtype=np.int64))

    # -- queries ----------------------------------------------------------

    @property
    def is_empty(self):
        return self.n == 0

    @property
    def root(self):
        return int(self.order[0])

    @property
    def max_depth(self):
        return len(self.level_ptr) - 2

    def level(self, ell):
        """Node ids at depth ``ell`` (empty if the tree is shallower)."""
        if ell < 0 or ell > self.max_depth:
            return np.empty(0, dtype=np.int64)
        return self.order[self.level_ptr[ell]:self.level_ptr[ell + 1]]

    def level_sizes(self):
        return np.diff(self.level_ptr)

    def children(self, v):
        i = self.pos[v]
        return self.order[self.child_ptr[i]:self.child_ptr[i + 1]]

    def num_children(self):
        """Children count per node id."""
        out = np.empty(self.n, dtype=np.int64)
        out[self.order] = np.diff(self.child_ptr)
        return out

    def degrees(self):
        """Graph degree per node id: children plus one for the parent edge."""
        return self.num_children() + (self.parent >= 0)

    def branch(self):
        """Per node id, the depth-1 ancestor (the root maps to itself)."""
        if self._branch is None:
            b = np.empty(self.n, dtype=np.int64)
            b_ord = np.arange(self.n, dtype=np.int64)
            for ell in range(2, self.max_depth + 1):
                s, e = self.level_ptr[ell], self.level_ptr[ell + 1]
                b_ord[s:e] = b_ord[self.parent_pos[s:e]]
            b[self.order] = self.order[b_ord]
            self._branch = b
        return self._branch

    def level_groups(self, ell):
        """For level ``ell`` >= 1: offsets (relative to the level start) where
        each sibling group begins, and the BFS positions of their parents."""
        if self._groups is None:
            self._groups = {}
        g = self._groups.get(ell)
        if g is None:
            s, e = self.level_ptr[ell], self.level_ptr[ell + 1]
            par = self.parent_pos[s:e]
            starts = np.flatnonzero(np.r_[True, par[1:] != par[:-1]])
            g = (starts, par[starts])
            self._groups[ell] = g
        return g

    def to_parents_bfs(self):
        """Parent array expressed in BFS positions."""
        return self.parent_pos.copy()


@lru_cache(maxsize=16)
def _regular_tree_cached(arity, depth, root_arity):
    sizes = np.array([1] + [root_arity * arity ** (i - 1) for i in range(1, depth + 1)],
                     dtype=np.int64)
    parent = np.empty(int(sizes.sum()), dtype=np.int64)
    parent[0] = -1
    start = 0
    for i in range(depth):
        idx = np.arange(start, start + sizes[i], dtype=np.int64)
        lo = start + sizes[i]
        parent[lo:lo + sizes[i + 1]] = np.repeat(idx, root_arity if i == 0 else arity)
        start = lo
    return Tree._from_bfs(parent, sizes)


def generate_regular_tree(arity, depth, node_cap=DEFAULT_NODE_CAP, root_arity=None) -> Tree:
    """Complete tree in which every node above ``depth`` has ``arity`` children
    (the root has ``root_arity`` children if given)."""
    root_arity = arity if root_arity is None else root_arity
    if arity < 1 or root_arity < 1 or depth < 0:
        raise ParameterError(f"arity >= 1 and depth >= 0 required, got {arity}, {depth}")
    size = 1 + sum(root_arity * arity ** (i - 1) for i in range(1, depth + 1))
    if size > node_cap:
        raise CapacityError(f"regular tree of {size} nodes exceeds node_cap={node_cap}", size)
    return _regular_tree_cached(int(arity), int(depth), int(root_arity))


def generate_max_degree_tree(D, depth, node_cap=DEFAULT_NODE_CAP) -> Tree:
    """Complete tree in which every non-leaf node has degree exactly ``D``."""
    if D < 2:
        raise ParameterError(f"D >= 2 required, got {D}")
    return generate_regular_tree(D - 1, depth, node_cap, root_arity=D)


def generate_gw_tree(d, max_depth, seed, node_cap=DEFAULT_NODE_CAP) -> Tree:
    """Galton-Watson tree with Poisson(d) offspring, truncated at ``max_depth``."""
    if not d > 0:
        raise ParameterError(f"d > 0 required, got {d}")
    if max_depth < 0 or node_cap <= 0:
        raise ParameterError("max_depth >= 0 and node_cap > 0 required")
    rng = make_rng(seed)
    parents = [np.array([-1], dtype=np.int64)]
    sizes = [1]
    start, total = 0, 1
    for _ in range(max_depth):
        m = sizes[-1]
        counts = rng.poisson(d, size=m)
        nxt = int(counts.sum())
        if nxt == 0:
            break
        if total + nxt > node_cap:
            raise CapacityError(f"Galton-Watson tree exceeded node_cap={node_cap}", total + nxt)
        parents.append(np.repeat(np.arange(start, start + m, dtype=np.int64), counts))
        start += m
        sizes.append(nxt)
        total += nxt
    return Tree._from_bfs(np.concatenate(parents), np.asarray(sizes, dtype=np.int64))


# ---------------------------------------------------------------------------
# broadcast


@dataclass(frozen=True)
class BroadcastConfig:
    """Symmetric k-label channel with reveals and optional label noise.

    ``reveal_scope`` is ``"all"`` (every node may be revealed) or
    ``"interior"`` (nodes at the deepest level of the tree are never revealed).
    """

    k: int
    eta: float
    p: float = 0.0
    delta: float = 0.0
    reveal_scope: str = "all"

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise ParameterError(f"k must be an integer >= 2, got {self.k}")
        if not 0.0 <= self.eta < 1.0 / self.k:
            raise ParameterError(f"0 <= eta < 1/k required, got eta={self.eta}, k={self.k}")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"0 <= p <= 1 required, got {self.p}")
        if not 0.0 <= self.delta < 1.0 / self.k:
            raise ParameterError(f"0 <= delta < 1/k required, got {self.delta}")
        if self.reveal_scope not in ("all", "interior"):
            raise ParameterError(f"reveal_scope must be 'all' or 'interior', got {self.reveal_scope!r}")

    @property
    def lam(self):
        return 1.0 - self.k * self.eta

    @property
    def mu(self):
        return 1.0 - self.k * self.delta


@dataclass
class LabeledTree:
    tree: Tree
    k: int
    tau: np.ndarray
    revealed: np.ndarray
    tau_noisy: np.ndarray | None = None
    config: BroadcastConfig | None = None

    @property
    def revealed_nodes(self):
        return np.flatnonzero(self.revealed)

    def restrict(self, keep_ids, tree):
        """Labels carried over to ``tree`` whose node i was ``keep_ids[i]`` here."""
        return LabeledTree(
            tree=tree, k=self.k, tau=self.tau[keep_ids], revealed=self.revealed[keep_ids],
            tau_noisy=None if self.tau_noisy is None else self.tau_noisy[keep_ids],
            config=self.config,
        )

    def to_json(self):
        out = {
            "parents": self.tree.parent.tolist(),
            "tau": self.tau.tolist(),
            "revealed": self.revealed_nodes.tolist(),
            "config": {"k": self.k},
        }
        if self.config is not None:
            c = self.config
            out["config"] = {"k": c.k, "eta": c.eta, "p": c.p, "delta": c.delta,
                             "reveal_scope": c.reveal_scope}
        if self.tau_noisy is not None:
            out["tau_noisy"] = self.tau_noisy.tolist()
        return out

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        tree = Tree.from_parents(obj["parents"])
        cfg = obj.get("config", {})
        k = int(cfg["k"])
        config = BroadcastConfig(**cfg) if "eta" in cfg else None
        revealed = np.zeros(tree.n, dtype=bool)
        revealed[np.asarray(obj.get("revealed", []), dtype=np.int64)] = True
        noisy = obj.get("tau_noisy")
        return cls(tree=tree, k=k, tau=np.asarray(obj["tau"], dtype=np.int64), revealed=revealed,
                   tau_noisy=None if noisy is None else np.asarray(noisy, dtype=np.int64),
                   config=config)


def broadcast(tree: Tree, cfg: BroadcastConfig, seed, root_label=None) -> LabeledTree:
    """Run the broadcast process down ``tree``.

    The root label is uniform on ``{1..k}`` unless ``root_label`` is given.
    Across each edge the label is kept with probability ``1 - (k-1) eta`` and
    otherwise replaced by a uniform choice among the other ``k - 1`` labels.
    """
    if not isinstance(cfg, BroadcastConfig):
        raise ParameterError("cfg must be a BroadcastConfig")
    rng = make_rng(seed)
    k, n = cfg.k, tree.n
    tau_ord = np.empty(n, dtype=np.int64)
    if n:
        if root_label is None:
            tau_ord[0] = rng.integers(1, k + 1)
        else:
            if not 1 <= root_label <= k:
                raise ParameterError(f"root_label must lie in 1..{k}")
            tau_ord[0] = root_label
        change = rng.random(n - 1) < (k - 1) * cfg.eta
        shift = rng.integers(1, k, size=n - 1)
        delta_lab = np.where(change, shift, 0)
        lp, pp = tree.level_ptr, tree.parent_pos
        for ell in range(1, tree.max_depth + 1):
            s, e = lp[ell], lp[ell + 1]
            tau_ord[s:e] = (tau_ord[pp[s:e]] - 1 + delta_lab[s - 1:e - 1]) % k + 1
    revealed_ord = rng.random(n) < cfg.p
    if cfg.reveal_scope == "interior" and n:
        revealed_ord[tree.level_ptr[-2]:] = False
    tau_noisy = None
    if cfg.delta > 0:
        keep = rng.random(n) < cfg.mu
        tau_noisy_ord = np.where(keep, tau_ord, rng.integers(1, k + 1, size=n))
        tau_noisy = _to_ids(tree, tau_noisy_ord)
    return LabeledTree(tree=tree, k=k, tau=_to_ids(tree, tau_ord),
                       revealed=_to_ids(tree, revealed_ord), tau_noisy=tau_noisy, config=cfg)


def _to_ids(tree, arr_ord):
    if tree.pos is tree.order or np.array_equal(tree.order, np.arange(tree.n)):
        return arr_ord
    out = np.empty_like(arr_ord)
    out[tree.order] = arr_ord
    return out


def noisy_from_revealed(ltree: LabeledTree, seed) -> LabeledTree:
    """Copy of ``ltree`` whose noisy labels are the true label on revealed
    nodes and a uniform label elsewhere (so the keep probability is ``p``)."""
    rng = make_rng(seed)
    rand = rng.integers(1, ltree.k + 1, size=ltree.tree.n)
    noisy = np.where(ltree.revealed, ltree.tau, rand)
    return LabeledTree(tree=ltree.tree, k=ltree.k, tau=ltree.tau, revealed=ltree.revealed,
                       tau_noisy=noisy, config=ltree.config)


# ---------------------------------------------------------------------------
# percolation


@dataclass(frozen=True)
class PercolationOutcome:
    retained: np.ndarray  # per node id: the edge to its parent survived (False at the root)
    component: np.ndarray  # boolean mask of C(root)
    level_count: np.ndarray  # |C ∩ level l|
    level_revealed: np.ndarray  # |C ∩ level l ∩ R|

    @property
    def component_nodes(self):
        return np.flatnonzero(self.component)

    def survives_to(self, ell):
        return ell < len(self.level_count) and self.level_count[ell] > 0


def percolate(ltree, lam, seed) -> PercolationOutcome:
    """Keep each edge independently with probability ``lam``; report the
    root's component and its per-level census.

    ``ltree`` may be a :class:`LabeledTree` (its revealed set feeds the
    census) or a bare :class:`Tree`.
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"0 <= lambda <= 1 required, got {lam}")
    if isinstance(ltree, LabeledTree):
        tree, revealed = ltree.tree, ltree.revealed
    else:
        tree, revealed = ltree, np.zeros(ltree.n, dtype=bool)
    rng = make_rng(seed)
    n = tree.n
    keep_ord = rng.random(n) < lam
    if n:
        keep_ord[0] = False
    comp_ord = np.zeros(n, dtype=bool)
    if n:
        comp_ord[0] = True
    lp, pp = tree.level_ptr, tree.parent_pos
    for ell in range(1, tree.max_depth + 1):
        s, e = lp[ell], lp[ell + 1]
        comp_ord[s:e] = comp_ord[pp[s:e]] & keep_ord[s:e]
    rev_ord = revealed[tree.order]
    depth_ord = np.repeat(np.arange(len(lp) - 1), np.diff(lp))
    nlev = len(lp) - 1
    level_count = np.bincount(depth_ord[comp_ord], minlength=nlev)
    level_rev = np.bincount(depth_ord[comp_ord & rev_ord], minlength=nlev)
    return PercolationOutcome(retained=_to_ids(tree, keep_ord), component=_to_ids(tree, comp_ord),
                              level_count=level_count, level_revealed=level_rev)


def percolation_level_census(d, lam, p, depth, seed):
    """Level census of the root's percolation cluster in a Poisson(d) tree.

    Samples only the cluster: the children of the ``Z_l`` cluster nodes at
    level l number Poisson(d Z_l) in total, each kept with probability
    ``lam``; cluster nodes are revealed with probability ``p``. Distributed
    exactly as ``percolate(broadcast(generate_gw_tree(d, depth)))``'s census,
    without materializing the rest of the tree.

    Returns ``(level_count, level_revealed)`` of length ``depth + 1``.
    """
    rng = make_rng(seed)
    count = np.zeros(depth + 1, dtype=np.int64)
    rev = np.zeros(depth + 1, dtype=np.int64)
    z = 1
    for ell in range(depth + 1):
        count[ell] = z
        rev[ell] = rng.binomial(z, p) if z else 0
        if ell == depth or z == 0:
            continue
        z = int(rng.binomial(rng.poisson(d * z), lam))
    return count, rev


# ---------------------------------------------------------------------------
# pruning and the double-mutation event


def prune_high_degree(tree: Tree, D) -> Tree:
    """Delete every node of degree > D together with its subtree.

    Degree counts the parent edge plus children. If the root itself exceeds
    the bound the result is the empty tree. The returned tree has dense ids
    in BFS order; ``orig_ids`` maps them back to ids of ``tree``.
    """
    if D < 1:
        raise ParameterError(f"D >= 1 required, got {D}")
    if tree.n == 0:
        return Tree.empty()
    deg_ord = np.diff(tree.child_ptr) + np.r_[0, np.ones(tree.n - 1, dtype=np.int64)]
    ok = deg_ord <= D
    keep = np.zeros(tree.n, dtype=bool)
    keep[0] = ok[0]
    lp, pp = tree.level_ptr, tree.parent_pos
    for ell in range(1, tree.max_depth + 1):
        s, e = lp[ell], lp[ell + 1]
        keep[s:e] = keep[pp[s:e]] & ok[s:e]
    if not keep[0]:
        return Tree.empty()
    kept_pos = np.flatnonzero(keep)
    new_index = np.full(tree.n, -1, dtype=np.int64)
    new_index[kept_pos] = np.arange(len(kept_pos))
    new_parent = np.where(pp[kept_pos] >= 0, new_index[np.maximum(pp[kept_pos], 0)], -1)
    depth_ord = np.repeat(np.arange(len(lp) - 1), np.diff(lp))
    sizes = np.bincount(depth_ord[kept_pos])
    out = Tree._from_bfs(new_parent, sizes)
    out.orig_ids = tree.order[kept_pos]
    return out


def prune_labeled(ltree: LabeledTree, D) -> LabeledTree:
    pruned = prune_high_degree(ltree.tree, D)
    if pruned.is_empty:
        return ltree.restrict(np.empty(0, dtype=np.int64), pruned)
    return ltree.restrict(pruned.orig_ids, pruned)


def mutation_pair_event(ltree: LabeledTree, ell) -> bool:
    """Two depth-(ell+1) nodes in different root subtrees share a label that
    differs from the root's label."""
    tree = ltree.tree
    if tree.max_depth < ell + 1:
        raise ParameterError(f"tree depth {tree.max_depth} < ell + 1 = {ell + 1}")
    nodes = tree.level(ell + 1)
    root_label = ltree.tau[tree.root]
    labels = ltree.tau[nodes]
    mask = labels != root_label
    return _shared_across_branches(tree.branch()[nodes[mask]], labels[mask]).size > 0


def _shared_across_branches(branches, labels):
    """Labels that occur under at least two distinct root children."""
    if len(labels) < 2:
        return np.empty(0, dtype=np.int64)
    pairs = np.unique(np.stack([labels, branches]), axis=1)
    lab, cnt = np.unique(pairs[0], return_counts=True)
    return lab[cnt >= 2]
