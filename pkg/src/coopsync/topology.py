"""Network topologies: the node/master/edge structure plus node positions."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTopology, TopologyGenerationFailed

MAX_TOPOLOGY_RETRIES = 1000


@dataclass(frozen=True)
class Topology:
    """Static network with node ids ``0..num_nodes-1``.

    ``edges`` holds each undirected link once as a sorted pair ``(i, j)`` with
    ``i < j``; the tuple order is the edge-id order used throughout the
    simulator.
    """

    num_nodes: int
    masters: frozenset
    edges: tuple
    positions: np.ndarray
    neighbors: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise InvalidTopology("topology needs at least one node")
        masters = frozenset(int(m) for m in self.masters)
        if any(m < 0 or m >= n for m in masters):
            raise InvalidTopology("master id out of range")
        edges = []
        seen = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise InvalidTopology(f"self-loop at node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidTopology(f"edge ({i}, {j}) out of range")
            if i in masters and j in masters:
                raise InvalidTopology(f"master-master edge ({i}, {j})")
            e = (min(i, j), max(i, j))
            if e in seen:
                continue
            seen.add(e)
            edges.append(e)
        edges.sort()
        positions = np.asarray(self.positions, dtype=float)
        if positions.shape != (n, 2):
            raise InvalidTopology("positions must have shape (num_nodes, 2)")
        nbrs = {k: [] for k in range(n)}
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(self, "masters", masters)
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "neighbors", {k: tuple(sorted(v)) for k, v in nbrs.items()})
        if n > 1 and not is_connected(n, self.edges):
            raise InvalidTopology("topology is not connected")

    @property
    def agents(self) -> tuple:
        return tuple(k for k in range(self.num_nodes) if k not in self.masters)

    def is_master(self, node: int) -> bool:
        return node in self.masters

    def degree(self, node: int) -> int:
        return len(self.neighbors[node])

    def distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.positions[i] - self.positions[j]))

    def hop_distances(self, sources=None) -> np.ndarray:
        """BFS hop count from the nearest source (masters by default)."""
        if sources is None:
            sources = self.masters
        return _bfs(self.num_nodes, self.neighbors, sources)


def _bfs(n, neighbors, sources):
    dist = np.full(n, -1, dtype=int)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def is_connected(n, edges) -> bool:
    nbrs = {k: [] for k in range(n)}
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    return bool(np.all(_bfs(n, nbrs, [0]) >= 0))


def gen_random_topology(n, area, radius, masters, rng, max_retries=MAX_TOPOLOGY_RETRIES) -> Topology:
    """Random geometric graph on ``[0, area]^2`` with connection radius ``radius``.

    Positions are resampled until the graph (without master-master links) is
    connected.
    """
    if n < 2:
        raise InvalidTopology("random topology needs n >= 2")
    masters = frozenset(int(m) for m in masters)
    for _ in range(max_retries):
        pos = rng.uniform(0.0, area, size=(n, 2))
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        edges = [
            (i, j)
            for i in range(n)
            for j in range(i + 1, n)
            if dist[i, j] <= radius and not (i in masters and j in masters)
        ]
        if is_connected(n, edges):
            return Topology(n, masters, tuple(edges), pos)
    raise TopologyGenerationFailed(
        f"no connected topology after {max_retries} draws (n={n}, area={area}, radius={radius})"
    )


def gen_grid_topology(rows, cols, spacing=100.0, master_corner=True) -> Topology:
    """4-neighbour lattice; node ``r * cols + c`` sits at ``(c, r) * spacing``.

    With ``master_corner`` node 0 (the corner at the origin) is the master.
    """
    if rows * cols < 2:
        raise InvalidTopology("grid needs at least two nodes")
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    pos = np.array([(c * spacing, r * spacing) for r in range(rows) for c in range(cols)], dtype=float)
    masters = frozenset({0}) if master_corner else frozenset()
    return Topology(rows * cols, masters, tuple(edges), pos)


def topology_from_edges(num_nodes, edges, masters=(), positions=None) -> Topology:
    if positions is None:
        # co-located nodes: zero flight time on every link
        positions = np.zeros((num_nodes, 2))
    return Topology(num_nodes, frozenset(masters), tuple(edges), positions)
