"""Static undirected interaction graphs and neighbor-level aggregation.

The graph is shared by the simulator (spillover terms), the latent dynamics
model (message passing) and the evaluation harness (degree breakdowns), so a
single immutable representation lives here: sorted adjacency lists plus a few
cached flat arrays for vectorised neighbor averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GraphConstructionError, ParameterError


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0 .. num_nodes - 1``.

    ``neighbors[i]`` is a sorted tuple of the distinct neighbors of node
    ``i``; self loops never appear.  Instances are built through
    :func:`build_graph` (or the generators below) and are immutable.
    """

    num_nodes: int
    neighbors: tuple[tuple[int, ...], ...]
    degrees: np.ndarray = field(repr=False)
    # flat COO-style arrays, one entry per directed edge; used for O(E)
    # neighbor sums without a python loop
    edge_src: np.ndarray = field(repr=False)
    edge_dst: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.size // 2)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.num_nodes == other.num_nodes and self.neighbors == other.neighbors

    def __hash__(self) -> int:
        return hash((self.num_nodes, self.neighbors))


def build_graph(num_nodes: int, edges) -> Graph:
    """Build a :class:`Graph` from an iterable of ``(i, j)`` pairs.

    Edges are interpreted as undirected: both orientations of a pair, and
    repeated pairs, collapse to a single edge.  Self loops are dropped.
    A pair mentioning a node outside ``0 .. num_nodes - 1`` raises
    :class:`GraphConstructionError` naming the pair.
    """
    if num_nodes < 1:
        raise ParameterError(f"num_nodes must be positive, got {num_nodes}")
    adjacency: list[set[int]] = [set() for _ in range(num_nodes)]
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphConstructionError(
                f"edge ({i}, {j}) is out of range for a graph on {num_nodes} nodes"
            )
        if i == j:
            continue
        adjacency[i].add(j)
        adjacency[j].add(i)
    neighbors = tuple(tuple(sorted(s)) for s in adjacency)
    return _finalize(num_nodes, neighbors)


def _finalize(num_nodes: int, neighbors: tuple[tuple[int, ...], ...]) -> Graph:
    degrees = np.array([len(n) for n in neighbors], dtype=np.int64)
    total = int(degrees.sum())
    edge_src = np.empty(total, dtype=np.int64)
    edge_dst = np.empty(total, dtype=np.int64)
    pos = 0
    for i, nbrs in enumerate(neighbors):
        k = len(nbrs)
        edge_src[pos : pos + k] = i
        edge_dst[pos : pos + k] = nbrs
        pos += k
    return Graph(num_nodes, neighbors, degrees, edge_src, edge_dst)


def neighbor_mean(graph: Graph, values: np.ndarray) -> np.ndarray:
    """Mean of ``values`` over each node's neighbors.

    ``values`` has one entry per node (extra trailing axes are carried
    through).  Nodes without neighbors get 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != graph.num_nodes:
        raise ParameterError(
            f"values has leading dimension {values.shape[0]}, "
            f"expected {graph.num_nodes}"
        )
    sums = np.zeros_like(values)
    np.add.at(sums, graph.edge_src, values[graph.edge_dst])
    denom = np.maximum(graph.degrees, 1).astype(np.float64)
    if values.ndim > 1:
        denom = denom.reshape((-1,) + (1,) * (values.ndim - 1))
    return sums / denom


def interference_summary(graph: Graph, treatments: np.ndarray) -> np.ndarray:
    """Fraction of each node's neighbors that are treated.

    ``treatments`` is a binary vector over nodes.  The result is in
    ``[0, 1]``; nodes without neighbors report 0.
    """
    treatments = np.asarray(treatments)
    if treatments.shape != (graph.num_nodes,):
        raise ParameterError(
            f"treatments has shape {treatments.shape}, "
            f"expected ({graph.num_nodes},)"
        )
    as_float = treatments.astype(np.float64)
    binary = (as_float == 0.0) | (as_float == 1.0)
    if not binary.all():
        offending = as_float[~binary][0]
        raise DomainError(f"treatments must be binary, found value {offending!r}")
    return neighbor_mean(graph, as_float)


def generate_synthetic_graph(
    num_nodes: int,
    mean_degree: float,
    degree_std: float,
    seed: int,
) -> Graph:
    """Random graph whose degrees follow a truncated normal profile.

    Per-node target degrees are drawn from a normal with the requested mean
    and standard deviation, truncated at zero, bias-corrected back to the
    requested mean, and realised by random stub matching.  Self loops and
    duplicate pairs from the matching are discarded, so realised degrees can
    fall slightly below their targets; for graphs of 500+ nodes the realised
    mean degree stays within 15% of the request.
    """
    if num_nodes < 2:
        raise ParameterError(f"need at least 2 nodes, got {num_nodes}")
    if mean_degree <= 0 or mean_degree >= num_nodes:
        raise ParameterError(
            f"mean_degree must lie in (0, num_nodes), got {mean_degree}"
        )
    if degree_std < 0:
        raise ParameterError(f"degree_std must be non-negative, got {degree_std}")

    for attempt in range(8):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(seed), 5, attempt]))
        )
        graph = _stub_matching(num_nodes, mean_degree, degree_std, rng)
        realised = float(graph.degrees.mean())
        if num_nodes < 500 or abs(realised - mean_degree) <= 0.15 * mean_degree:
            return graph
    raise ParameterError(
        f"could not realise mean degree {mean_degree} within 15% "
        f"(last attempt gave {realised:.3f})"
    )


def _stub_matching(
    num_nodes: int, mean_degree: float, degree_std: float, rng: np.random.Generator
) -> Graph:
    targets = rng.normal(mean_degree, degree_std, size=num_nodes)
    # resample negatives (truncation at zero), then rescale so the truncated
    # sample keeps the requested mean
    for _ in range(64):
        negative = targets < 0
        if not negative.any():
            break
        targets[negative] = rng.normal(mean_degree, degree_std, size=int(negative.sum()))
    targets = np.maximum(targets, 0.0)
    current = targets.mean()
    if current > 0:
        targets = targets * (mean_degree / current)
    targets = np.minimum(targets, num_nodes - 1)

    floors = np.floor(targets)
    bump = rng.random(num_nodes) < (targets - floors)
    degrees = (floors + bump).astype(np.int64)
    if degrees.sum() % 2 == 1:
        at = int(rng.integers(num_nodes))
        degrees[at] += 1 if degrees[at] < num_nodes - 1 else -1

    stubs = np.repeat(np.arange(num_nodes, dtype=np.int64), degrees)
    rng.shuffle(stubs)
    pairs = stubs.reshape(-1, 2)
    keep = pairs[:, 0] != pairs[:, 1]
    return build_graph(num_nodes, pairs[keep])


@dataclass(frozen=True)
class GraphPartition:
    """Disjoint train/validation/test split of a graph's node set.

    Node arrays hold original node ids (sorted).  The induced subgraphs are
    relabelled to local ids ``0 .. len(part) - 1`` following that order and
    keep only intra-part edges.
    """

    train_nodes: np.ndarray
    valid_nodes: np.ndarray
    test_nodes: np.ndarray
    train_graph: Graph
    valid_graph: Graph
    test_graph: Graph

    def node_sets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.train_nodes, self.valid_nodes, self.test_nodes)

    def subgraphs(self) -> tuple[Graph, Graph, Graph]:
        return (self.train_graph, self.valid_graph, self.test_graph)


def partition_graph(graph: Graph, fractions, seed: int) -> GraphPartition:
    """Split the node set into three parts with the given size fractions.

    Parts are grown by seeded multi-source breadth-first search so each part
    is internally connected where the topology allows it.  Realised sizes
    match ``round(fraction * num_nodes)`` up to the +-1 forced by rounding.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3:
        raise ParameterError(f"expected 3 fractions, got {len(fractions)}")
    if any(f <= 0 or f >= 1 for f in fractions):
        raise ParameterError(f"fractions must each lie in (0, 1), got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must sum to 1, got sum {sum(fractions)!r}")

    n = graph.num_nodes
    quotas = _largest_remainder(fractions, n)
    if min(quotas) < 1:
        raise ParameterError(
            f"fractions {fractions} leave an empty part for {n} nodes"
        )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7])))
    assignment = np.full(n, -1, dtype=np.int64)
    counts = [0, 0, 0]
    frontiers: list[list[int]] = [[], [], []]
    sources = rng.choice(n, size=3, replace=False)
    for part, src in enumerate(sources):
        frontiers[part].append(int(src))

    remaining = n
    while remaining > 0:
        for part in range(3):
            if counts[part] >= quotas[part]:
                continue
            node = _pop_unassigned(frontiers[part], assignment)
            if node is None:
                unassigned = np.flatnonzero(assignment < 0)
                node = int(unassigned[rng.integers(unassigned.size)])
            assignment[node] = part
            counts[part] += 1
            remaining -= 1
            for nbr in graph.neighbors[node]:
                if assignment[nbr] < 0:
                    frontiers[part].append(nbr)
            if remaining == 0:
                break

    parts = [np.flatnonzero(assignment == p) for p in range(3)]
    subgraphs = [induced_subgraph(graph, nodes) for nodes in parts]
    return GraphPartition(parts[0], parts[1], parts[2], *subgraphs)


def _pop_unassigned(frontier: list[int], assignment: np.ndarray):
    while frontier:
        node = frontier.pop(0)
        if assignment[node] < 0:
            return node
    return None


def _largest_remainder(fractions: list[float], total: int) -> list[int]:
    raw = [f * total for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    shortfall = total - sum(base)
    order = np.argsort([base[i] - raw[i] for i in range(3)])  # largest remainder first
    for k in range(shortfall):
        base[int(order[k])] += 1
    return base


def induced_subgraph(graph: Graph, nodes: np.ndarray) -> Graph:
    """Subgraph on ``nodes`` (original ids), relabelled to ``0 .. k - 1``."""
    nodes = np.asarray(sorted(int(v) for v in nodes), dtype=np.int64)
    local = {int(v): i for i, v in enumerate(nodes)}
    edges = []
    for v in nodes:
        for w in graph.neighbors[int(v)]:
            if w > v and w in local:
                edges.append((local[int(v)], local[w]))
    return build_graph(len(nodes), edges)


def write_edge_list(path, graph: Graph) -> None:
    """Write one ``i j`` line per undirected edge."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# nodes: {graph.num_nodes}\n")
        for i, nbrs in enumerate(graph.neighbors):
            for j in nbrs:
                if j > i:
                    fh.write(f"{i} {j}\n")


def read_edge_list(path, num_nodes: int) -> Graph:
    """Parse an edge list file written by :func:`write_edge_list`.

    Lines starting with ``#`` are comments.  Every other line holds two
    whitespace-separated node ids.
    """
    edges = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphConstructionError(
                    f"{path}:{lineno}: expected 'i j', got {line!r}"
                )
            edges.append((int(parts[0]), int(parts[1])))
    return build_graph(num_nodes, edges)
