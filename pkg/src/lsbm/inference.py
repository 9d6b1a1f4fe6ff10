"""Root-label inference on labeled trees and the related analytic bounds.

Contents: exact belief propagation (with a brute-force enumeration oracle),
the common-ancestor rule for many clusters, census/plurality reconstruction,
the plurality label map for matching clusters to labels, and the two-cluster
bound calculators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ParameterError, StructureError
from .rng import make_rng
from .tree_core import LabeledTree, Tree, _shared_across_branches, prune_labeled

ROLES = ("revealed-interior", "clamped-boundary", "noisy")
_NOISY = ROLES.index("noisy")

# log-domain fallback threshold for belief propagation messages
_TINY = 1e-300


@dataclass(frozen=True)
class Evidence:
    """Observed labels at tree nodes.

    ``nodes`` and ``labels`` are aligned arrays (labels 1-based). ``roles``
    is one role name for every observation or a sequence of names from
    :data:`ROLES`. Observations with role ``"noisy"`` see the noisy label,
    equal to the true label with probability ``mu = 1 - k * delta`` and
    uniform otherwise; every other role clamps the node to the label.
    """

    nodes: np.ndarray
    labels: np.ndarray
    roles: object = "revealed-interior"
    delta: float = 0.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(nodes) != len(labels):
            raise ParameterError("nodes and labels must have the same length")
        roles = self.roles
        if isinstance(roles, str):
            if roles not in ROLES:
                raise ParameterError(f"unknown evidence role {roles!r}")
            codes = np.full(len(nodes), ROLES.index(roles), dtype=np.int8)
        elif isinstance(roles, np.ndarray) and roles.dtype == np.int8:
            codes = roles
        else:
            roles = list(roles)
            bad = set(roles) - set(ROLES)
            if bad:
                raise ParameterError(f"unknown evidence roles {sorted(bad)}")
            codes = np.array([ROLES.index(r) for r in roles], dtype=np.int8)
        if len(codes) != len(nodes):
            raise ParameterError("one role per observation required")
        if self.delta <= 0 and np.any(codes == _NOISY):
            raise ParameterError("noisy observations require delta > 0")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "roles", codes)

    @classmethod
    def none(cls):
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    @classmethod
    def from_dict(cls, observations, noisy=None, delta=0.0):
        """``observations`` maps node -> label (clamped); ``noisy`` likewise
        maps node -> noisy label."""
        nodes = list(observations)
        labels = [observations[v] for v in nodes]
        roles = ["revealed-interior"] * len(nodes)
        for v, lab in (noisy or {}).items():
            nodes.append(v)
            labels.append(lab)
            roles.append("noisy")
        return cls(np.array(nodes, dtype=np.int64), np.array(labels, dtype=np.int64),
                   roles, delta)

    @property
    def role_names(self):
        return [ROLES[c] for c in self.roles]

    @property
    def noisy_mask(self):
        return self.roles == _NOISY

    def __len__(self):
        return len(self.nodes)

    def union(self, other):
        if self.delta and other.delta and self.delta != other.delta:
            raise ParameterError("cannot merge evidence with different noise levels")
        return Evidence(np.concatenate([self.nodes, other.nodes]),
                        np.concatenate([self.labels, other.labels]),
                        np.concatenate([self.roles, other.roles]), self.delta or other.delta)

    def check(self, k, n):
        if len(self.nodes) and (self.nodes.min() < 0 or self.nodes.max() >= n):
            raise ParameterError("evidence node outside the tree")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > k):
            raise ParameterError(f"evidence label outside 1..{k}")
        if self.delta and not self.delta < 1.0 / k:
            raise ParameterError("delta < 1/k required")


def revealed_evidence(ltree: LabeledTree, max_depth=None, exclude_root=False):
    """Clamp every revealed node (optionally only up to ``max_depth``)."""
    tree = ltree.tree
    mask = ltree.revealed.copy()
    if max_depth is not None:
        mask &= tree.depth <= max_depth
    if exclude_root and tree.n:
        mask[tree.root] = False
    nodes = np.flatnonzero(mask)
    return Evidence(nodes, ltree.tau[nodes], "revealed-interior")


def boundary_evidence(ltree: LabeledTree, r=None):
    """Clamp every node at depth ``r`` (default: the deepest level)."""
    tree = ltree.tree
    r = tree.max_depth if r is None else r
    nodes = tree.level(r)
    return Evidence(nodes, ltree.tau[nodes], "clamped-boundary")


def _likelihoods(tree, k, evidence):
    """Per-BFS-position likelihood table of the evidence, shape (n, k)."""
    lik = np.ones((tree.n, k))
    if not len(evidence):
        return lik
    pos = tree.pos[evidence.nodes]
    lab = evidence.labels - 1
    noisy = evidence.noisy_mask
    clamp = ~noisy
    if clamp.any():
        cpos, clab = pos[clamp], lab[clamp]
        rows = np.zeros(tree.n, dtype=bool)
        rows[cpos] = True
        if rows.sum() == len(cpos):
            lik[cpos] = 0.0
            lik[cpos, clab] = 1.0
        else:
            hit = np.zeros((tree.n, k), dtype=bool)
            hit[cpos, clab] = True
            clamped = hit[rows]
            if np.any(clamped.sum(axis=1) > 1):
                raise ParameterError("evidence has zero likelihood: conflicting clamps on one node")
            lik[rows] = clamped
    if noisy.any():
        mu = 1.0 - k * evidence.delta
        rows = np.full((int(noisy.sum()), k), (1.0 - mu) / k)
        rows[np.arange(rows.shape[0]), lab[noisy]] += mu
        np.multiply.at(lik, pos[noisy], rows)
    return lik


def bp_posterior(ltree, eta, k, evidence: Evidence) -> np.ndarray:
    """Exact posterior of the root label given ``evidence``.

    Leaf-to-root sum-product on the tree under the symmetric k-label channel
    with a uniform root prior. Messages are normalized to sum to one; a
    level falls back to log-space products when a message product
    underflows.

    Returns a length-k probability vector (index i is label i + 1).
    """
    tree = ltree.tree if isinstance(ltree, LabeledTree) else ltree
    if not isinstance(tree, Tree):
        raise StructureError("bp_posterior needs a rooted tree")
    if tree.n == 0:
        raise StructureError("empty tree")
    if not 0.0 <= eta < 1.0 / k:
        raise ParameterError(f"0 <= eta < 1/k required, got {eta}")
    evidence.check(k, tree.n)
    lam = 1.0 - k * eta
    belief = _likelihoods(tree, k, evidence)
    lp = tree.level_ptr
    for ell in range(tree.max_depth, 0, -1):
        s, e = lp[ell], lp[ell + 1]
        b = belief[s:e]
        tot = b.sum(axis=1, keepdims=True)
        if np.any(tot <= 0):
            raise ParameterError("evidence has zero likelihood under the channel")
        msg = lam * (b / tot) + eta
        starts, rows = tree.level_groups(ell)
        prod = np.multiply.reduceat(msg, starts, axis=0)
        small = prod.max(axis=1) < _TINY
        if small.any():
            with np.errstate(divide="ignore"):
                logs = np.add.reduceat(np.log(msg), starts, axis=0)[small]
            top = logs.max(axis=1, keepdims=True)
            ok = np.isfinite(top)  # rows that are exactly zero stay zero
            prod[small] = np.where(ok, np.exp(logs - np.where(ok, top, 0.0)), 0.0)
        pb = belief[rows] * prod
        m = pb.max(axis=1, keepdims=True)
        belief[rows] = pb / np.where(m > 0, m, 1.0)
    root = belief[0]
    z = root.sum()
    if not z > 0:
        raise ParameterError("evidence has zero likelihood under the channel")
    return root / z


def brute_force_posterior(ltree, eta, k, evidence: Evidence, max_states=10 ** 7) -> np.ndarray:
    """Root posterior by summing the joint probability of every labeling.

    Test oracle for :func:`bp_posterior`; cost is ``k ** free`` where
    ``free`` counts nodes not clamped by the evidence.
    """
    tree = ltree.tree if isinstance(ltree, LabeledTree) else ltree
    n = tree.n
    evidence.check(k, n)
    clamp = {}
    noisy_obs = []
    for v, lab, noisy in zip(evidence.nodes.tolist(), evidence.labels.tolist(),
                             evidence.noisy_mask.tolist()):
        if noisy:
            noisy_obs.append((v, lab))
        elif clamp.get(v, lab) != lab:
            return _zero_likelihood()
        else:
            clamp[v] = lab
    free = [v for v in range(n) if v not in clamp]
    total = k ** len(free)
    if total > max_states:
        raise CapacityError(f"{total} labelings exceed the enumeration bound {max_states}", total)
    same = 1.0 - (k - 1) * eta
    mu = 1.0 - k * evidence.delta
    child = np.flatnonzero(tree.parent >= 0)
    par = tree.parent[child]
    root = tree.root
    acc = np.zeros(k)
    chunk = 1 << 16
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk), dtype=np.int64)
        labels = np.empty((len(idx), n), dtype=np.int64)
        for v, lab in clamp.items():
            labels[:, v] = lab
        rem = idx.copy()
        for v in free:
            labels[:, v] = rem % k + 1
            rem //= k
        weight = np.full(len(idx), 1.0 / k)
        if len(child):
            eq = labels[:, child] == labels[:, par]
            weight *= np.prod(np.where(eq, same, eta), axis=1)
        for v, lab in noisy_obs:
            weight *= np.where(labels[:, v] == lab, mu + (1 - mu) / k, (1 - mu) / k)
        acc += np.bincount(labels[:, root] - 1, weights=weight, minlength=k)
    z = acc.sum()
    if not z > 0:
        return _zero_likelihood()
    return acc / z


def _zero_likelihood():
    raise ParameterError("evidence has zero likelihood under the channel")


def posterior_record(node, method, probs, seed=None):
    probs = np.asarray(probs, dtype=float)
    return {"node": int(node), "method": method, "probs": probs.tolist(),
            "label": int(np.argmax(probs)) + 1, "seed": seed}


# ---------------------------------------------------------------------------
# many-clusters rule


def common_ancestor_candidates(ltree: LabeledTree, r, D):
    """Labels ``l`` seen on two revealed depth-r nodes whose first common
    ancestor is the root, after pruning nodes of degree > D.

    Returns ``(labels, root_pruned)``.
    """
    if r < 1 or D < 1:
        raise ParameterError("r >= 1 and D >= 1 required")
    pruned = prune_labeled(ltree, D)
    if pruned.tree.is_empty:
        return np.empty(0, dtype=np.int64), True
    tree = pruned.tree
    nodes = tree.level(r)
    nodes = nodes[pruned.revealed[nodes]]
    return _shared_across_branches(tree.branch()[nodes], pruned.tau[nodes]), False


def common_ancestor_recover(ltree: LabeledTree, r, D, seed) -> int:
    """Guess the root label: uniform among the candidate labels, or uniform
    over all k labels when there is no candidate."""
    rng = make_rng(seed)
    cands, _ = common_ancestor_candidates(ltree, r, D)
    if len(cands):
        return int(cands[rng.integers(len(cands))])
    return int(rng.integers(1, ltree.k + 1))


# ---------------------------------------------------------------------------
# census


@dataclass(frozen=True)
class CensusVector:
    s: np.ndarray
    level: int


def census_vector(labels, k):
    counts = np.bincount(np.asarray(labels, dtype=np.int64) - 1, minlength=k).astype(float)
    return counts - len(labels) / k


def census_recover(ltree: LabeledTree, ell, use_noisy=False, seed=None):
    """Plurality of the labels at depth ``ell``.

    With ``use_noisy`` the noisy labels ``tau_noisy`` are counted instead of
    the true ones. Returns ``(label, CensusVector)``; ties go to the smallest
    label, and an empty level yields a uniform guess with a zero vector.
    """
    if use_noisy and ltree.tau_noisy is None:
        raise ParameterError("use_noisy requires tau_noisy")
    nodes = ltree.tree.level(ell)
    k = ltree.k
    if len(nodes) == 0:
        rng = make_rng(0 if seed is None else seed)
        return int(rng.integers(1, k + 1)), CensusVector(np.zeros(k), ell)
    src = ltree.tau_noisy if use_noisy else ltree.tau
    s = census_vector(src[nodes], k)
    return int(np.argmax(s)) + 1, CensusVector(s, ell)


def census_record(node, label, cv: CensusVector, seed=None):
    return {"node": int(node), "method": "census", "s": cv.s.tolist(), "level": cv.level,
            "label": int(label), "seed": seed}


# ---------------------------------------------------------------------------
# plurality label map


@dataclass(frozen=True)
class LabelMap:
    """Cluster -> label map. Clusters flagged in ``randomized`` are too small
    (their members get independent uniform labels); ``no_revealed`` flags
    large clusters without any revealed node (their ``g`` is a random label).
    """

    g: np.ndarray
    randomized: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    no_revealed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def apply(self, cluster_assignment, seed):
        rng = make_rng(seed)
        c = np.asarray(cluster_assignment, dtype=np.int64)
        out = self.g[c - 1].copy()
        rand = self.randomized[c - 1]
        out[rand] = rng.integers(1, len(self.g) + 1, size=int(rand.sum()))
        return out


def plurality_map(cluster_assignment, revealed, revealed_labels, k,
                  min_cluster_fraction=0.0, seed=0) -> LabelMap:
    """Map each cluster to the plurality true label among its revealed nodes.

    ``cluster_assignment`` gives each node's cluster in ``1..k``;
    ``revealed`` lists revealed node ids with ``revealed_labels`` their true
    labels. Ties go to the smallest label.
    """
    rng = make_rng(seed)
    c = np.asarray(cluster_assignment, dtype=np.int64)
    n = len(c)
    rev = np.asarray(revealed, dtype=np.int64)
    lab = np.asarray(revealed_labels, dtype=np.int64)
    if len(c) and (c.min() < 1 or c.max() > k):
        raise ParameterError(f"cluster ids must lie in 1..{k}")
    if len(lab) and (lab.min() < 1 or lab.max() > k):
        raise ParameterError(f"labels must lie in 1..{k}")
    sizes = np.bincount(c - 1, minlength=k)
    hist = np.zeros((k, k), dtype=np.int64)
    np.add.at(hist, (c[rev] - 1, lab - 1), 1)
    randomized = sizes < min_cluster_fraction * n
    no_revealed = (~randomized) & (hist.sum(axis=1) == 0)
    g = np.argmax(hist, axis=1) + 1
    fallback = rng.integers(1, k + 1, size=k)
    g = np.where(no_revealed | randomized, fallback, g)
    return LabelMap(g=g, randomized=randomized, no_revealed=no_revealed)


def best_permutation_agreement(pred, truth, k):
    """max over label permutations pi of the fraction with pi(pred) == truth."""
    from scipy.optimize import linear_sum_assignment

    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (pred - 1, truth - 1), 1)
    rows, cols = linear_sum_assignment(-conf)
    return conf[rows, cols].sum() / max(len(pred), 1)


# ---------------------------------------------------------------------------
# bounds


def ekps_bound(tree: Tree, W, eta) -> float:
    """``2 * sum_{v in W} (1 - 2 eta)^(2 depth(v))``, using W as its own
    separating set (two-label channel)."""
    W = np.asarray(W, dtype=np.int64)
    if len(W) == 0:
        raise ParameterError("W must be nonempty")
    return float(2.0 * np.sum((1.0 - 2.0 * eta) ** (2 * tree.depth[W])))


def _two_cluster_signal(a, b):
    return (a - b) ** 2 / (2.0 * (a + b))


def two_cluster_bound(a, b, p) -> float:
    """Upper bound on E|P(sigma_v = 1 | G, R, sigma_R) - 1/2| below the
    two-cluster threshold: ``0.5 * sqrt(p / (1 - (a-b)^2 / (2(a+b))))``."""
    if not 0 < p <= 1:
        raise ParameterError(f"0 < p <= 1 required, got {p}")
    t = _two_cluster_signal(a, b)
    if not t < 1:
        raise ParameterError("bound undefined at or above (a-b)^2 = 2(a+b)")
    return 0.5 * float(np.sqrt(p / (1.0 - t)))


def two_cluster_bound_finite(a, b, p, r) -> float:
    """Finite-radius bound on ``(E|E[tau_root | tau_W]|)^2`` before the
    square root: ``p / (1 - t) + t^r`` with ``t = (a-b)^2 / (2(a+b))``."""
    if not 0 < p <= 1:
        raise ParameterError(f"0 < p <= 1 required, got {p}")
    t = _two_cluster_signal(a, b)
    if not t < 1:
        raise ParameterError("bound undefined at or above (a-b)^2 = 2(a+b)")
    return p / (1.0 - t) + t ** r


def to_json(record):
    return json.dumps(record, sort_keys=True)
