"""Communication graphs, multi-hop neighborhoods, and coupling matrices.

An undirected connected graph fixes, for every agent ``i``, the ordered set
of agents at shortest-path distance 2..k (the ones ``i`` must estimate),
and from that set the coupling matrix ``M = L + H`` whose spectrum drives
every gain inequality:

* ``L`` is the Laplacian of the subgraph induced by the neighborhood,
* ``H`` is diagonal and counts common 1-hop neighbors with agent ``i``.

Agents are numbered 1..n throughout, matching the usual convention for
hand-worked examples.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import dense_linalg
from .errors import (
    DimensionError,
    EmptyNeighborhood,
    GraphNotConnected,
    IndexOutOfRange,
)


@dataclass(frozen=True)
class Graph:
    """Undirected connected graph over agents 1..n.

    Construction rejects self-loops, out-of-range endpoints, and
    disconnected graphs (the observer results all assume connectivity).
    """

    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 agents, got n={self.n}")
        norm = set()
        for e in self.edges:
            i, j = e
            if i == j:
                raise ValueError(f"self-loop on agent {i}")
            if not (1 <= i <= self.n) or not (1 <= j <= self.n):
                raise IndexOutOfRange(f"edge {{{i},{j}}} outside 1..{self.n}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        adj = {i: [] for i in range(1, self.n + 1)}
        for i, j in norm:
            adj[i].append(j)
            adj[j].append(i)
        adj = {i: tuple(sorted(v)) for i, v in adj.items()}
        object.__setattr__(self, "_adj", adj)
        # Connectivity is mandatory: every convergence result downstream assumes it.
        if len(self._bfs(1)) != self.n:
            raise GraphNotConnected(f"graph on {self.n} agents is not connected")

    @classmethod
    def from_edge_list_text(cls, text: str) -> "Graph":
        """Parse the edge-list format: first line ``n``, then ``i j`` lines."""
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines:
            raise ValueError("empty edge list")
        n = int(lines[0])
        edges = set()
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"malformed edge line: {ln!r}")
            edges.add((int(parts[0]), int(parts[1])))
        return cls(n, frozenset(edges))

    @classmethod
    def from_file(cls, path) -> "Graph":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_edge_list_text(fh.read())

    def neighbors(self, i: int) -> tuple:
        self._check_index(i)
        return self._adj[i]

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def distances_from(self, i: int) -> dict:
        """BFS shortest-path distances from agent ``i`` (unit edge weights)."""
        self._check_index(i)
        return self._bfs(i)

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.n, self.n))
        for i, j in self.edges:
            lap[i - 1, i - 1] += 1.0
            lap[j - 1, j - 1] += 1.0
            lap[i - 1, j - 1] -= 1.0
            lap[j - 1, i - 1] -= 1.0
        return lap

    def _check_index(self, i: int):
        if not (1 <= i <= self.n):
            raise IndexOutOfRange(f"agent index {i} outside 1..{self.n}")

    def _bfs(self, start: int) -> dict:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in self._adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


@dataclass(frozen=True)
class KHopNeighborhood:
    """Agents at shortest-path distance 2..k from ``agent``, sorted ascending.

    ``members`` excludes the agent itself and its 1-hop neighbors; it is the
    ordered index set behind every stacked estimate vector and coupling
    matrix of this agent. ``eta == 0`` is legal and means the agent runs no
    observer.
    """

    agent: int
    k: int
    members: tuple
    one_hop: tuple

    @property
    def eta(self) -> int:
        return len(self.members)

    def member_index(self, j: int) -> int:
        return self.members.index(j)


@dataclass(frozen=True)
class ObserverCoupling:
    """Coupling matrix ``M = L + H`` of one agent's neighborhood with spectrum."""

    L: np.ndarray
    H: np.ndarray
    M: np.ndarray
    lambda_min: float
    lambda_max: float


@dataclass(frozen=True)
class SelectionMap:
    """Row selections realizing the stacked-state gather operators.

    Stored as index lists; selecting rows of the global stacked state is a
    numpy gather, so the binary selection matrices are never materialized.
    """

    agent: int
    khop_rows: np.ndarray
    onehop_rows: np.ndarray
    state_dim: int

    def select_khop(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1)[self.khop_rows]

    def select_onehop(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1)[self.onehop_rows]


def khop_set(g: Graph, i: int, k: int) -> KHopNeighborhood:
    """Agents with a shortest path of length p, 2 <= p <= k, from agent ``i``."""
    if k < 2:
        raise ValueError(f"hop horizon must be >= 2, got k={k}")
    dist = g.distances_from(i)
    members = tuple(sorted(j for j, d in dist.items() if 2 <= d <= k))
    return KHopNeighborhood(agent=i, k=k, members=members, one_hop=g.neighbors(i))


def all_khop_sets(g: Graph, k: int) -> list:
    """Neighborhoods for every agent, indexed agent-1 first."""
    return [khop_set(g, i, k) for i in range(1, g.n + 1)]


def selection_map(nb: KHopNeighborhood, state_dim: int) -> SelectionMap:
    def rows(agents):
        return np.array(
            [state_dim * (a - 1) + c for a in agents for c in range(state_dim)],
            dtype=int,
        )

    return SelectionMap(
        agent=nb.agent,
        khop_rows=rows(nb.members),
        onehop_rows=rows(nb.one_hop),
        state_dim=state_dim,
    )


def coupling_matrices(g: Graph, nb: KHopNeighborhood) -> ObserverCoupling:
    """Build ``L``, ``H`` and ``M = L + H`` for one agent's neighborhood.

    ``L`` is the Laplacian of the subgraph induced by ``nb.members`` on the
    full edge set; ``H[j, j]`` counts the common 1-hop neighbors between
    member ``j`` and the owning agent. For a connected graph ``M`` is
    positive definite whenever the neighborhood is non-empty.
    """
    eta = nb.eta
    if eta == 0:
        raise EmptyNeighborhood(f"agent {nb.agent} has no multi-hop neighbors")
    idx = {m: p for p, m in enumerate(nb.members)}
    lap = np.zeros((eta, eta))
    for p, a in enumerate(nb.members):
        for b in g.neighbors(a):
            q = idx.get(b)
            if q is not None and q > p:
                lap[p, p] += 1.0
                lap[q, q] += 1.0
                lap[p, q] -= 1.0
                lap[q, p] -= 1.0
    own = set(g.neighbors(nb.agent))
    h = np.diag([float(len(own.intersection(g.neighbors(m)))) for m in nb.members])
    m_mat = lap + h
    w, _ = dense_linalg.sym_eig(m_mat)
    return ObserverCoupling(
        L=lap, H=h, M=m_mat, lambda_min=float(w[0]), lambda_max=float(w[-1])
    )


@dataclass(frozen=True)
class NeighborOverlapReport:
    """Neighbor-overlap facts for one agent's induced neighborhood subgraph."""

    agent: int
    eta: int
    pairwise_ok: bool
    components: int
    components_ok: bool

    @property
    def holds(self) -> bool:
        return self.pairwise_ok and self.components_ok


def _induced_components(g: Graph, members: tuple) -> list:
    member_set = set(members)
    seen = set()
    comps = []
    for start in members:
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in g.neighbors(u):
                if w in member_set and w not in comp:
                    comp.add(w)
                    queue.append(w)
        seen |= comp
        comps.append(sorted(comp))
    return comps


def check_neighbor_overlap(g: Graph, k: int) -> list:
    """Verify the neighbor-overlap facts behind positive definiteness of M.

    For each agent ``j`` and every member ``i`` of its neighborhood, member
    ``i`` must share an agent with either the neighborhood or the 1-hop set
    of ``j``. Per connected component of the induced subgraph, at least one
    member must have a common 1-hop neighbor with ``j`` (that member gives
    the H diagonal its support on the component; in components with two or
    more members it then also touches the neighborhood itself). A failure
    would indicate a bug, since both facts hold on connected graphs.
    """
    reports = []
    for j in range(1, g.n + 1):
        nb = khop_set(g, j, k)
        khop = set(nb.members)
        onehop = set(nb.one_hop)
        pairwise = True
        for i in nb.members:
            ni = set(g.neighbors(i))
            if not (ni & khop) and not (ni & onehop):
                pairwise = False
        comps = _induced_components(g, nb.members)
        comps_ok = True
        for comp in comps:
            supported = [i for i in comp if set(g.neighbors(i)) & onehop]
            if not supported:
                comps_ok = False
            elif len(comp) >= 2 and not any(
                set(g.neighbors(i)) & khop for i in supported
            ):
                comps_ok = False
        reports.append(
            NeighborOverlapReport(
                agent=j,
                eta=nb.eta,
                pairwise_ok=pairwise,
                components=len(comps),
                components_ok=comps_ok,
            )
        )
    return reports


def error_permutation(nbs) -> np.ndarray:
    """Block permutation mapping estimator-grouped stacks to target-grouped ones.

    The input ordering enumerates (estimator, target) pairs estimator-major;
    the output enumerates the same pairs target-major. Because multi-hop
    neighborhoods are symmetric, the two enumerations cover the same pairs.
    """
    pairs = [(nb.agent, tgt) for nb in nbs for tgt in nb.members]
    pos = {pair: p for p, pair in enumerate(pairs)}
    by_target = sorted(pairs, key=lambda pair: (pair[1], pair[0]))
    return np.array([pos[pair] for pair in by_target], dtype=int)


def reorder_errors(nbs, stacked_by_estimator: np.ndarray) -> np.ndarray:
    """Regroup a concatenation of per-estimator blocks by estimated agent."""
    vec = np.asarray(stacked_by_estimator, dtype=float).reshape(-1)
    pairs = sum(nb.eta for nb in nbs)
    if pairs == 0:
        if vec.size != 0:
            raise DimensionError(f"expected empty vector, got length {vec.size}")
        return vec.copy()
    if vec.size % pairs != 0:
        raise DimensionError(f"length {vec.size} not divisible by {pairs} blocks")
    n_dim = vec.size // pairs
    perm = error_permutation(nbs)
    blocks = vec.reshape(pairs, n_dim)
    return blocks[perm].reshape(-1)


def reorder_errors_inverse(nbs, stacked_by_target: np.ndarray) -> np.ndarray:
    """Inverse of :func:`reorder_errors`."""
    vec = np.asarray(stacked_by_target, dtype=float).reshape(-1)
    pairs = sum(nb.eta for nb in nbs)
    if pairs == 0:
        if vec.size != 0:
            raise DimensionError(f"expected empty vector, got length {vec.size}")
        return vec.copy()
    if vec.size % pairs != 0:
        raise DimensionError(f"length {vec.size} not divisible by {pairs} blocks")
    n_dim = vec.size // pairs
    perm = error_permutation(nbs)
    blocks = vec.reshape(pairs, n_dim)
    out = np.empty_like(blocks)
    out[perm] = blocks
    return out.reshape(-1)
