"""Shared fixtures and independent oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from khopsim import Graph, ObserverState, all_khop_sets, coupling_matrices
from khopsim.khop_observer import NeighborMessage


def random_connected_graph(rng, n_min=2, n_max=8, extra_edge_p=0.3) -> Graph:
    """Random spanning tree plus random extra edges; connected by construction."""
    n = int(rng.integers(n_min, n_max + 1))
    edges = set()
    for v in range(2, n + 1):
        u = int(rng.integers(1, v))
        edges.add((u, v))
    for u in range(1, n + 1):
        for v in range(u + 1, n + 1):
            if (u, v) not in edges and rng.random() < extra_edge_p:
                edges.add((u, v))
    return Graph(n, frozenset(edges))


def floyd_warshall(g: Graph) -> np.ndarray:
    """Brute-force all-pairs shortest paths, independent of the BFS code."""
    n = g.n
    inf = float("inf")
    dist = np.full((n, n), inf)
    np.fill_diagonal(dist, 0.0)
    for i, j in g.edges:
        dist[i - 1, j - 1] = 1.0
        dist[j - 1, i - 1] = 1.0
    for m in range(n):
        for a in range(n):
            for b in range(n):
                via = dist[a, m] + dist[m, b]
                if via < dist[a, b]:
                    dist[a, b] = via
    return dist


def component_count(g: Graph, vertices) -> int:
    """Connected components of the subgraph induced by ``vertices``."""
    vset = set(vertices)
    seen = set()
    count = 0
    for start in vertices:
        if start in seen:
            continue
        count += 1
        stack = [start]
        comp = {start}
        while stack:
            u = stack.pop()
            for w in g.neighbors(u):
                if w in vset and w not in comp:
                    comp.add(w)
                    stack.append(w)
        seen |= comp
    return count


def make_world(g: Graph, k: int, n_dim: int, rng) -> dict:
    """Random truth, random estimates, and the full message exchange."""
    nbs = all_khop_sets(g, k)
    x = rng.normal(size=(g.n, n_dim))
    u = rng.normal(size=(g.n, n_dim))
    obs = [
        ObserverState(
            agent=i + 1,
            x_hat=rng.normal(size=nb.eta * n_dim),
            u_hat=rng.normal(size=nb.eta * n_dim),
        )
        for i, nb in enumerate(nbs)
    ]
    msgs = build_messages(g, nbs, x, u, obs)
    return {"nbs": nbs, "x": x, "u": u, "obs": obs, "msgs": msgs}


def build_messages(g: Graph, nbs, x, u, obs) -> dict:
    msgs = {}
    for j in range(1, g.n + 1):
        nbj = nbs[j - 1]
        msgs[j] = NeighborMessage(
            sender=j,
            state=x[j - 1],
            input=u[j - 1],
            relayed_states={m: x[m - 1] for m in g.neighbors(j)},
            relayed_inputs={m: u[m - 1] for m in g.neighbors(j)},
            est_states=obs[j - 1].x_hat,
            est_inputs=obs[j - 1].u_hat,
            members=nbj.members,
        )
    return msgs


def inbox(msgs, nb) -> dict:
    return {j: msgs[j] for j in nb.one_hop}


@pytest.fixture
def path4() -> Graph:
    return Graph(4, {(1, 2), (2, 3), (3, 4)})


@pytest.fixture
def path4_couplings(path4):
    nbs = all_khop_sets(path4, 3)
    return nbs, [coupling_matrices(path4, nb) for nb in nbs]
