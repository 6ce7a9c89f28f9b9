"""Undirected weighted communication graphs and their spectral data."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import Disconnected, InvalidSpec, NotConnected
from .seeding import rng_for

GRAPH_KINDS = ("ring", "path", "complete", "star", "erdos_renyi")
WEIGHT_RULES = ("unit", "uniform")


@dataclass(frozen=True)
class GraphSpec:
    kind: str = "ring"
    n: int = 4
    p: float = 0.5
    weight_rule: str = "unit"
    seed: int = 0
    max_retries: int = 200


@dataclass(frozen=True)
class WeightedGraph:
    """Connected undirected graph on agents ``0..n-1``.

    ``edges`` holds ``(i, j, a_ij)`` with ``i < j`` and ``a_ij > 0``.
    """

    n: int
    edges: tuple

    def __post_init__(self):
        if self.n < 2:
            raise InvalidSpec(f"graph needs n >= 2 agents, got {self.n}")
        seen = set()
        for i, j, w in self.edges:
            if i == j:
                raise InvalidSpec(f"self-loop at agent {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise InvalidSpec(f"edge ({i}, {j}) out of range for n={self.n}")
            if not w > 0:
                raise InvalidSpec(f"edge ({i}, {j}) has non-positive weight {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise InvalidSpec(f"duplicate edge {key}")
            seen.add(key)
        if not _is_connected(self.n, self.edges):
            raise Disconnected(f"graph with {self.n} agents and {len(self.edges)} edges is not connected")

    @cached_property
    def neighbors(self):
        nbrs = [[] for _ in range(self.n)]
        for i, j, _ in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return tuple(tuple(sorted(x)) for x in nbrs)

    @cached_property
    def directed(self):
        """Directed edge list ``(dst, src, weight)`` as arrays, sorted by (dst, src).

        Entry ``e`` means agent ``dst[e]`` receives from ``src[e]``.
        """
        arcs = []
        for i, j, w in self.edges:
            arcs.append((i, j, w))
            arcs.append((j, i, w))
        arcs.sort()
        dst = np.array([a[0] for a in arcs], dtype=np.intp)
        src = np.array([a[1] for a in arcs], dtype=np.intp)
        wts = np.array([a[2] for a in arcs], dtype=float)
        return dst, src, wts

    def weight(self, i, j):
        for a, b, w in self.edges:
            if (a, b) == (i, j) or (a, b) == (j, i):
                return w
        return 0.0


def _is_connected(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, w in edges:
        if w > 0:
            parent[find(i)] = find(j)
    return len({find(a) for a in range(n)}) == 1


def build_graph(spec: GraphSpec) -> WeightedGraph:
    if spec.kind not in GRAPH_KINDS:
        raise InvalidSpec(f"unknown graph kind {spec.kind!r}; expected one of {GRAPH_KINDS}")
    if spec.weight_rule not in WEIGHT_RULES:
        raise InvalidSpec(f"unknown weight_rule {spec.weight_rule!r}")
    n = int(spec.n)
    if n < 2:
        raise InvalidSpec(f"graph needs n >= 2 agents, got {n}")
    rng = rng_for(spec.seed, f"graph/{spec.kind}/weights")

    if spec.kind == "erdos_renyi":
        if not 0.0 <= spec.p <= 1.0:
            raise InvalidSpec(f"erdos_renyi p must lie in [0, 1], got {spec.p}")
        sampler = rng_for(spec.seed, "graph/erdos_renyi/edges")
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        for _ in range(max(1, spec.max_retries)):
            keep = sampler.random(len(pairs)) < spec.p
            chosen = [pq for pq, k in zip(pairs, keep) if k]
            if _is_connected(n, [(i, j, 1.0) for i, j in chosen]):
                break
        else:
            raise Disconnected(
                f"erdos_renyi(n={n}, p={spec.p}) not connected after {spec.max_retries} draws"
            )
    elif spec.kind == "ring":
        chosen = [(i, i + 1) for i in range(n - 1)]
        if n > 2:
            chosen.append((0, n - 1))
    elif spec.kind == "path":
        chosen = [(i, i + 1) for i in range(n - 1)]
    elif spec.kind == "complete":
        chosen = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:  # star centred at agent 0
        chosen = [(0, j) for j in range(1, n)]

    if spec.weight_rule == "unit":
        weights = np.ones(len(chosen))
    else:
        weights = rng.uniform(0.5, 1.5, size=len(chosen))
    return WeightedGraph(n=n, edges=tuple((i, j, float(w)) for (i, j), w in zip(chosen, weights)))


def laplacian(g: WeightedGraph) -> np.ndarray:
    L = np.zeros((g.n, g.n))
    for i, j, w in g.edges:
        L[i, j] -= w
        L[j, i] -= w
        L[i, i] += w
        L[j, j] += w
    return L


@dataclass(frozen=True)
class SpectralData:
    laplacian: np.ndarray
    eigenvalues: np.ndarray
    basis_S: np.ndarray = field(repr=False)

    @property
    def lambda2(self):
        return float(self.eigenvalues[1])

    @property
    def lambda_max(self):
        return float(self.eigenvalues[-1])


def spectral(g: WeightedGraph, tol=1e-10) -> SpectralData:
    """Ascending Laplacian spectrum and the orthonormal complement basis ``S``.

    Columns of ``S`` are the eigenvectors of the nonzero eigenvalues, each
    signed so that its first entry with magnitude above ``1e-12`` is positive.
    """
    L = laplacian(g)
    vals, vecs = np.linalg.eigh(L)
    order = np.argsort(vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    if vals[1] <= tol:
        raise NotConnected(f"lambda_2 = {vals[1]:.3e} <= {tol}")
    vals = vals.copy()
    vals[0] = 0.0 if abs(vals[0]) <= tol else vals[0]
    S = vecs[:, 1:].copy()
    for c in range(S.shape[1]):
        nz = np.flatnonzero(np.abs(S[:, c]) > 1e-12)
        if nz.size and S[nz[0], c] < 0:
            S[:, c] = -S[:, c]
    return SpectralData(laplacian=L, eigenvalues=vals, basis_S=S)
