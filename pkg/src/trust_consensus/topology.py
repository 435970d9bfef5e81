"""Communication graph: random geometric generation, labels and degree queries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import networkx as nx
import numpy as np

from trust_consensus.errors import DomainError, PersistenceError, TopologyGenerationError

logger = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 100

_FORMAT_TAG = "# trust-consensus topology v1"


class Label(str, Enum):
    LEGITIMATE = "legitimate"
    MALICIOUS = "malicious"


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Fixed undirected graph; agents ``0..L-1`` are legitimate, ``L..N-1`` malicious.

    ``adjacency[i, j]`` means agent ``j`` can transmit to agent ``i``. The
    generator only produces symmetric graphs, but neighbor queries are
    directional (row ``i`` lists the in-neighbors of ``i``).
    """

    n_agents: int
    legit_count: int
    adjacency: np.ndarray
    positions: np.ndarray | None = None
    seed: int | None = None
    radius: float | None = None
    resample_count: int = 0
    _neighbors: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        adj = np.array(self.adjacency, dtype=bool)
        if adj.shape != (self.n_agents, self.n_agents):
            raise DomainError(f"adjacency must be {self.n_agents}x{self.n_agents}, got {adj.shape}")
        if not 1 <= self.legit_count <= self.n_agents:
            raise DomainError(f"legit_count must be in [1, {self.n_agents}], got {self.legit_count}")
        if not np.array_equal(adj, adj.T):
            raise DomainError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise DomainError("adjacency must not contain self-loops")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "_neighbors", tuple(np.flatnonzero(row) for row in adj))

    @classmethod
    def from_edges(
        cls,
        n_agents: int,
        legit_count: int,
        edges: list[tuple[int, int]],
        **kwargs,
    ) -> "NetworkTopology":
        adj = np.zeros((n_agents, n_agents), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(n_agents=n_agents, legit_count=legit_count, adjacency=adj, **kwargs)

    @property
    def malicious_count(self) -> int:
        return self.n_agents - self.legit_count

    @property
    def labels(self) -> list[Label]:
        return [self.label(i) for i in range(self.n_agents)]

    def label(self, agent: int) -> Label:
        return Label.LEGITIMATE if agent < self.legit_count else Label.MALICIOUS

    def is_legitimate(self, agent: int) -> bool:
        return agent < self.legit_count

    def neighbors(self, agent: int) -> np.ndarray:
        """In-neighbors of ``agent`` (agents that can transmit to it), sorted."""
        return self._neighbors[agent]

    def legit_neighbors(self, agent: int) -> np.ndarray:
        nbrs = self._neighbors[agent]
        return nbrs[nbrs < self.legit_count]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edge list with ``i < j``."""
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(rows.tolist(), cols.tolist()))

    def monitored_edges(self) -> np.ndarray:
        """Directed (observer, sender) pairs with a legitimate observer, shape ``(K, 2)``."""
        rows, cols = np.nonzero(self.adjacency[: self.legit_count])
        return np.column_stack([rows, cols]).astype(np.intp)

    def legit_subgraph_connected(self) -> bool:
        sub = nx.from_numpy_array(self.adjacency[: self.legit_count, : self.legit_count].astype(int))
        return nx.is_connected(sub)


def max_legit_in_degree(topo: NetworkTopology) -> int:
    """d_M: the largest neighborhood size among legitimate agents."""
    return int(topo.adjacency[: topo.legit_count].sum(axis=1).max())


def _geometric_adjacency(positions: np.ndarray, radius: float) -> np.ndarray:
    n = len(positions)
    graph = nx.random_geometric_graph(n, radius, pos={i: positions[i] for i in range(n)})
    return nx.to_numpy_array(graph, nodelist=list(range(n)), dtype=bool)


def generate_rgg(
    n: int,
    radius: float,
    rng_seed: int,
    malicious_count: int = 0,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> NetworkTopology:
    """Random geometric graph on the unit square with a connected legitimate subgraph.

    Positions are resampled until the subgraph induced by the legitimate
    agents is connected; the number of resamples is recorded on the result.
    """
    if n < 2:
        raise DomainError(f"n must be at least 2, got {n}")
    if radius < 0:
        raise DomainError(f"radius must be non-negative, got {radius}")
    if not 0 <= malicious_count < n:
        raise DomainError(f"malicious_count must be in [0, {n - 1}], got {malicious_count}")

    legit_count = n - malicious_count
    rng = np.random.default_rng(rng_seed)
    for attempt in range(max_retries + 1):
        positions = rng.uniform(0.0, 1.0, size=(n, 2))
        topo = NetworkTopology(
            n_agents=n,
            legit_count=legit_count,
            adjacency=_geometric_adjacency(positions, radius),
            positions=positions,
            seed=rng_seed,
            radius=radius,
            resample_count=attempt,
        )
        if topo.legit_subgraph_connected():
            if attempt:
                logger.debug("RGG seed=%d radius=%g connected after %d resamples", rng_seed, radius, attempt)
            return topo
    logger.warning("RGG generation failed: seed=%d radius=%g", rng_seed, radius)
    raise TopologyGenerationError(rng_seed, radius, max_retries)


# ─── edge-list persistence ───────────────────────────────────────────────────


def save_topology(topo: NetworkTopology, path: Path) -> None:
    """Write the line-based edge-list format (header, ``e i j`` and ``p i x y`` lines)."""
    lines = [
        _FORMAT_TAG,
        f"N={topo.n_agents} L={topo.legit_count} M={topo.malicious_count} "
        f"seed={'' if topo.seed is None else topo.seed} "
        f"radius={'' if topo.radius is None else repr(float(topo.radius))}",
    ]
    lines += [f"e {i} {j}" for i, j in topo.edges()]
    if topo.positions is not None:
        lines += [f"p {i} {x!r} {y!r}" for i, (x, y) in enumerate(topo.positions.tolist())]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write topology {path}: {exc}") from exc


def load_topology(path: Path) -> NetworkTopology:
    """Parse a file written by :func:`save_topology`."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot read topology {path}: {exc}") from exc

    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or lines[0] != _FORMAT_TAG:
        raise PersistenceError(f"{path}: not a trust-consensus topology file")
    try:
        header = dict(item.split("=", 1) for item in lines[1].split())
        n, legit, malicious = int(header["N"]), int(header["L"]), int(header["M"])
        if malicious != n - legit:
            raise ValueError(f"M={malicious} does not equal N - L = {n - legit}")
        seed = int(header["seed"]) if header.get("seed") else None
        radius = float(header["radius"]) if header.get("radius") else None
        edges: list[tuple[int, int]] = []
        positions = {}
        for ln in lines[2:]:
            kind, *rest = ln.split()
            if kind == "e":
                edges.append((int(rest[0]), int(rest[1])))
            elif kind == "p":
                positions[int(rest[0])] = (float(rest[1]), float(rest[2]))
            else:
                raise ValueError(f"unknown record {kind!r}")
    except (KeyError, ValueError, IndexError) as exc:
        raise PersistenceError(f"{path}: malformed topology file ({exc})") from exc

    pos = np.array([positions[i] for i in range(n)]) if len(positions) == n else None
    return NetworkTopology.from_edges(n, legit, edges, positions=pos, seed=seed, radius=radius)
