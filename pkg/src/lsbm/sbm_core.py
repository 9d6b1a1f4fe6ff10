"""Labeled stochastic block model: generation, neighborhoods, derived constants.

Node ids are dense 0-based integers. Cluster labels are 1-based
(``sigma[v]`` in ``{1..k}``) to match the usual notation for the model.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ParameterError
from .rng import make_rng


@dataclass(frozen=True)
class SbmParams:
    n: int
    k: int
    a: float
    b: float
    p: float = 0.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"n must be a positive integer, got {self.n}")
        if int(self.k) != self.k or self.k < 2:
            raise ParameterError(f"k must be an integer >= 2, got {self.k}")
        if not self.b >= 0:
            raise ParameterError(f"b must be >= 0, got {self.b}")
        if not self.a > self.b:
            raise ParameterError(f"a > b required (assortative model), got a={self.a}, b={self.b}")
        if self.a > self.n:
            raise ParameterError(f"a <= n required (a/n is a probability), got a={self.a}, n={self.n}")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"p must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class LabeledGraph:
    """Sparse undirected graph with hidden labels and a revealed set.

    Adjacency is stored in CSR form: the neighbors of ``v`` are
    ``indices[indptr[v]:indptr[v + 1]]``, sorted ascending.
    """

    n: int
    k: int
    indptr: np.ndarray
    indices: np.ndarray
    sigma: np.ndarray
    revealed: np.ndarray  # boolean mask of length n
    params: SbmParams | None = None
    seed: int | None = None

    def neighbors(self, v):
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @property
    def degrees(self):
        return np.diff(self.indptr)

    @property
    def num_edges(self):
        return len(self.indices) // 2

    @property
    def revealed_nodes(self):
        return np.flatnonzero(self.revealed)

    def edges(self):
        """Edge list as two arrays ``(u, v)`` with ``u < v``, sorted."""
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        keep = rows < self.indices
        return rows[keep], self.indices[keep].astype(np.int64)

    def check(self):
        """Assert the structural invariants; used by tests and after import."""
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        cols = self.indices
        if np.any(rows == cols):
            raise ValueError("self-loop present")
        same_row = rows[1:] == rows[:-1]
        if np.any(np.diff(cols)[same_row] <= 0):
            raise ValueError("duplicate or unsorted neighbors")
        flipped = np.lexsort((rows, cols))
        if not (np.array_equal(cols[flipped], rows) and np.array_equal(rows[flipped], cols)):
            raise ValueError("adjacency is not symmetric")
        if self.n and (self.sigma.min() < 1 or self.sigma.max() > self.k):
            raise ValueError("label out of range")
        return True


def _csr_from_edges(n, u, v):
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def _skip_sample(num_pairs, q, rng):
    """Sorted indices of successes among ``num_pairs`` Bernoulli(q) trials.

    Draws geometric gaps between successes instead of one coin per pair, so
    the cost is proportional to the number of successes.
    """
    if num_pairs <= 0 or q <= 0.0:
        return np.empty(0, dtype=np.int64)
    if q >= 1.0:
        return np.arange(num_pairs, dtype=np.int64)
    chunks = []
    pos = -1
    batch = int(num_pairs * q * 1.05) + 64
    while True:
        gaps = rng.geometric(q, size=batch).astype(np.int64)
        idx = pos + np.cumsum(gaps)
        if idx[-1] >= num_pairs:
            chunks.append(idx[idx < num_pairs])
            break
        chunks.append(idx)
        pos = int(idx[-1])
        batch = max(64, int((num_pairs - pos) * q * 1.05) + 64)
    return np.concatenate(chunks)


def _decode_triangular(t):
    """Map linear index t to the pair (u, v), u < v, with t = v(v-1)/2 + u."""
    v = np.floor((1.0 + np.sqrt(1.0 + 8.0 * t.astype(np.float64))) / 2.0).astype(np.int64)
    v -= (v * (v - 1) // 2 > t)
    v += ((v + 1) * v // 2 <= t)
    u = t - v * (v - 1) // 2
    return u, v


def generate_sbm(params: SbmParams, seed) -> LabeledGraph:
    """Sample ``(G, sigma, R)`` from the labeled block model.

    Labels are i.i.d. uniform over ``{1..k}``; each within-cluster pair is an
    edge with probability ``a/n``, each cross-cluster pair with ``b/n``; each
    node is revealed independently with probability ``p``.
    """
    if not isinstance(params, SbmParams):
        raise ParameterError("params must be an SbmParams")
    n, k = int(params.n), int(params.k)
    rng = make_rng(seed)
    sigma = rng.integers(1, k + 1, size=n).astype(np.int64)
    members = [np.flatnonzero(sigma == i + 1) for i in range(k)]
    q_in, q_out = params.a / n, params.b / n

    us, vs = [], []
    for i in range(k):
        m = len(members[i])
        t = _skip_sample(m * (m - 1) // 2, q_in, rng)
        lu, lv = _decode_triangular(t)
        us.append(members[i][lu])
        vs.append(members[i][lv])
    for i in range(k):
        for j in range(i + 1, k):
            mi, mj = len(members[i]), len(members[j])
            t = _skip_sample(mi * mj, q_out, rng)
            us.append(members[i][t // mj])
            vs.append(members[j][t % mj])
    u = np.concatenate(us) if us else np.empty(0, dtype=np.int64)
    v = np.concatenate(vs) if vs else np.empty(0, dtype=np.int64)
    revealed = rng.random(n) < params.p
    indptr, indices = _csr_from_edges(n, u, v)
    return LabeledGraph(n=n, k=k, indptr=indptr, indices=indices, sigma=sigma,
                        revealed=revealed, params=params,
                        seed=None if isinstance(seed, np.random.Generator) else int(seed))


# ---------------------------------------------------------------------------
# derived tree constants and thresholds


@dataclass(frozen=True)
class TreeParams:
    d: float
    eta: float
    lam: float

    @property
    def d_lambda(self):
        return self.d * self.lam

    @property
    def d_lambda_sq(self):
        return self.d * self.lam ** 2


def _check_abk(a, b, k):
    if int(k) != k or k < 2:
        raise ParameterError(f"k must be an integer >= 2, got {k}")
    if not b >= 0:
        raise ParameterError(f"b must be >= 0, got {b}")
    if not a > b:
        raise ParameterError(f"a > b required, got a={a}, b={b}")
    if not a + (k - 1) * b > 0:
        raise ParameterError("a + (k-1) b must be positive")


def derived_params(a, b, k) -> TreeParams:
    """Offspring mean, flip parameter and copy probability of the coupled tree."""
    _check_abk(a, b, k)
    total = a + (k - 1) * b
    return TreeParams(d=total / k, eta=b / total, lam=(a - b) / total)


@dataclass(frozen=True)
class ThresholdReport:
    ks_above: bool
    tree_above: bool
    d_lambda: float
    d_lambda_sq: float


def threshold_report(a, b, k) -> ThresholdReport:
    """Kesten-Stigum (d lam^2 > 1) and tree (d lam > 1) indicators.

    Comparisons are exact rational arithmetic on the float inputs; ties
    report ``False``.
    """
    _check_abk(a, b, k)
    fa, fb = Fraction(a), Fraction(b)
    dl = (fa - fb) / k
    dl2 = (fa - fb) ** 2 / (k * (fa + (k - 1) * fb))
    return ThresholdReport(ks_above=dl2 > 1, tree_above=dl > 1,
                           d_lambda=float(dl), d_lambda_sq=float(dl2))


def coupling_radius(n, a, b, k) -> float:
    """Radius below which neighborhoods couple to the branching-process tree."""
    if n < 2:
        raise ParameterError(f"n >= 2 required, got {n}")
    base = 2 * (a + (k - 1) * b)
    if not base > 1:
        raise ParameterError(f"2(a + (k-1)b) must exceed 1, got {base}")
    return math.log(n) / (10.0 * math.log(base))


def coupling_radius_floor(n, a, b, k) -> int:
    return int(math.floor(coupling_radius(n, a, b, k)))


# ---------------------------------------------------------------------------
# neighborhoods


@dataclass(frozen=True)
class Neighborhood:
    """Radius-r ball around ``center`` in BFS order.

    ``members[i]`` sits at BFS depth ``depth[i]``; ``parent[i]`` is the
    position (into ``members``) of the node that discovered it, -1 for the
    center.
    """

    center: int
    radius: int
    members: np.ndarray
    depth: np.ndarray
    parent: np.ndarray
    is_tree: bool
    revealed_members: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def boundary(self):
        return self.members[self.depth == self.radius]

    def to_labeled_tree(self, graph: LabeledGraph, noisy=None):
        """BFS tree of the ball as a :class:`~lsbm.tree_core.LabeledTree`.

        Tree node ``i`` corresponds to graph node ``members[i]``; the tree's
        ``orig_ids`` carries that back-map.
        """
        from .tree_core import LabeledTree, Tree

        tree = Tree.from_parents(self.parent, orig_ids=self.members)
        tau = graph.sigma[self.members]
        revealed = graph.revealed[self.members]
        return LabeledTree(tree=tree, k=graph.k, tau=tau, revealed=revealed, tau_noisy=noisy)


def neighborhood(graph: LabeledGraph, v, r) -> Neighborhood:
    """BFS ball ``G_r(v)`` with depths, boundary and an acyclicity flag."""
    if not (0 <= int(v) < graph.n) or int(v) != v:
        raise KeyError(f"unknown node {v}")
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    v = int(v)
    pos = {v: 0}
    members, depth, parent = [v], [0], [-1]
    queue = deque([v])
    while queue:
        u = queue.popleft()
        du = depth[pos[u]]
        if du == r:
            continue
        for w in graph.neighbors(u).tolist():
            if w not in pos:
                pos[w] = len(members)
                members.append(w)
                depth.append(du + 1)
                parent.append(pos[u])
                queue.append(w)
    # count edges of the induced subgraph
    twice_edges = 0
    for u in members:
        for w in graph.neighbors(u).tolist():
            if w in pos:
                twice_edges += 1
    is_tree = twice_edges // 2 == len(members) - 1
    members = np.asarray(members, dtype=np.int64)
    return Neighborhood(
        center=v, radius=int(r), members=members,
        depth=np.asarray(depth, dtype=np.int64),
        parent=np.asarray(parent, dtype=np.int64),
        is_tree=bool(is_tree),
        revealed_members=members[graph.revealed[members]],
    )


# ---------------------------------------------------------------------------
# edge-list + sidecar I/O


def write_graph(graph: LabeledGraph, edge_path, sidecar_path, include_sigma=True):
    u, v = graph.edges()
    with open(edge_path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in zip(u.tolist(), v.tolist()):
            fh.write(f"{a} {b}\n")
    params = graph.params
    meta = {
        "n": graph.n,
        "k": graph.k,
        "a": params.a if params else None,
        "b": params.b if params else None,
        "p": params.p if params else None,
        "seed": graph.seed,
        "revealed": graph.revealed_nodes.tolist(),
    }
    if include_sigma:
        meta["sigma"] = graph.sigma.tolist()
    with open(sidecar_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_graph(edge_path, sidecar_path) -> LabeledGraph:
    """Inverse of :func:`write_graph`. Missing ``sigma`` is stored as zeros."""
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    n, k = int(meta["n"]), int(meta["k"])
    data = np.loadtxt(edge_path, dtype=np.int64, ndmin=2)
    if data.size == 0:
        u = v = np.empty(0, dtype=np.int64)
    else:
        u, v = data[:, 0], data[:, 1]
    indptr, indices = _csr_from_edges(n, u, v)
    sigma = np.asarray(meta["sigma"], dtype=np.int64) if meta.get("sigma") is not None \
        else np.zeros(n, dtype=np.int64)
    revealed = np.zeros(n, dtype=bool)
    revealed[np.asarray(meta.get("revealed", []), dtype=np.int64)] = True
    params = None
    if meta.get("a") is not None:
        params = SbmParams(n=n, k=k, a=meta["a"], b=meta["b"], p=meta["p"])
    return LabeledGraph(n=n, k=k, indptr=indptr, indices=indices, sigma=sigma,
                        revealed=revealed, params=params, seed=meta.get("seed"))
