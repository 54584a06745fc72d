"""Directed communication graphs for agent coupling and gossip routing.

Agent ids are 1-based in the public API (and in the edge-list file format);
array-valued accessors use row/column ``v - 1`` for agent ``v``.  Self-loops
may be stored but are excluded from predecessor/successor sets: the gossip
keep-half rule plays their role.
"""

from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .errors import ConstructionError, ParameterError
from .rng import stream

REPAIR_RETRIES = 1000


@dataclass(frozen=True)
class DirectedNetwork:
    """Directed graph over agents 1..V with optional self-loops."""

    num_agents: int
    edges: frozenset
    seed: int | None = None

    def __post_init__(self):
        if self.num_agents < 1:
            raise ParameterError(f"num_agents must be >= 1, got {self.num_agents}")
        for a, b in self.edges:
            if not (1 <= a <= self.num_agents and 1 <= b <= self.num_agents):
                raise ParameterError(f"edge ({a},{b}) out of range 1..{self.num_agents}")
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))

    @property
    def num_edges(self):
        return len(self.edges)

    def predecessor_lists(self):
        """0-based predecessor index arrays, one per agent (self-loops excluded)."""
        preds = [[] for _ in range(self.num_agents)]
        for a, b in self.edges:
            if a != b:
                preds[b - 1].append(a - 1)
        return [np.array(sorted(p), dtype=int) for p in preds]

    def successor_lists(self):
        """0-based successor index arrays, one per agent (self-loops excluded)."""
        succs = [[] for _ in range(self.num_agents)]
        for a, b in self.edges:
            if a != b:
                succs[a - 1].append(b - 1)
        return [np.array(sorted(s), dtype=int) for s in succs]

    def max_in_degree(self):
        """Largest predecessor count over all agents (the fan-in bound J_max)."""
        return max((len(p) for p in self.predecessor_lists()), default=0)

    def is_strongly_connected(self):
        g = nx.DiGraph()
        g.add_nodes_from(range(1, self.num_agents + 1))
        g.add_edges_from(self.edges)
        return nx.is_strongly_connected(g)

    def validate(self):
        """Check the invariants guaranteed for generated networks."""
        if not self.is_strongly_connected():
            raise ParameterError("network is not strongly connected")
        if self.num_agents > 1:
            preds = self.predecessor_lists()
            succs = self.successor_lists()
            for v in range(self.num_agents):
                if len(preds[v]) == 0 or len(succs[v]) == 0:
                    raise ParameterError(f"agent {v + 1} lacks an in- or out-neighbor")
        return self


@dataclass(frozen=True)
class NeighborSets:
    """In/out neighbor sets of one agent, with its fan-in degree."""

    predecessors: frozenset
    successors: frozenset
    degree: int = field(init=False)
    j_max: int = 0

    def __post_init__(self):
        object.__setattr__(self, "degree", len(self.predecessors))


def neighbor_sets(net, v):
    """Predecessor/successor sets of agent ``v`` (1-based), self-loops excluded."""
    if not (1 <= v <= net.num_agents):
        raise ParameterError(f"agent id {v} out of range 1..{net.num_agents}")
    preds = frozenset(a for a, b in net.edges if b == v and a != v)
    succs = frozenset(b for a, b in net.edges if a == v and b != v)
    return NeighborSets(predecessors=preds, successors=succs, j_max=net.max_in_degree())


def adjacency_matrix(net):
    """V x V binary matrix with entry (v, j) = 1 iff j is a successor of v."""
    mat = np.zeros((net.num_agents, net.num_agents), dtype=int)
    for a, b in net.edges:
        if a != b:
            mat[a - 1, b - 1] = 1
    return mat


def generate_ba_directed(num_agents, attach, deletion_fraction, seed):
    """Scale-free directed network: preferential attachment, bidirectional links,
    then random unidirectional deletion.

    Deletion is retried (fresh random subset each time, same base graph) until the
    result is strongly connected with at least one in- and out-neighbor per agent.

    Args:
        num_agents: number of agents V (> attach).
        attach: edges added per new node in the preferential-attachment growth.
        deletion_fraction: fraction of directed links removed, in [0, 1).
        seed: RNG seed; the same arguments always yield the same graph.

    Raises:
        ParameterError: on invalid sizes or fractions.
        ConstructionError: if no strongly connected graph is found within
            the retry budget of REPAIR_RETRIES attempts.
    """
    if attach < 1 or num_agents <= attach:
        raise ParameterError(
            f"need num_agents > attach >= 1, got num_agents={num_agents}, attach={attach}"
        )
    if not (0.0 <= deletion_fraction < 1.0):
        raise ParameterError(f"deletion_fraction must be in [0,1), got {deletion_fraction}")

    base = nx.barabasi_albert_graph(num_agents, attach, seed=int(seed))
    directed = []
    for a, b in sorted(base.edges()):
        directed.append((a + 1, b + 1))
        directed.append((b + 1, a + 1))
    directed = np.array(directed, dtype=int)
    n_delete = int(round(deletion_fraction * len(directed)))

    rng = stream(seed, "ba-delete")
    for attempt in range(REPAIR_RETRIES):
        # deletion pass in random order, skipping removals that would strand
        # an agent without an in- or out-neighbor
        keep = np.ones(len(directed), dtype=bool)
        if n_delete > 0:
            out_deg = np.zeros(num_agents + 1, dtype=int)
            in_deg = np.zeros(num_agents + 1, dtype=int)
            for a, b in directed:
                out_deg[a] += 1
                in_deg[b] += 1
            deleted = 0
            for idx in rng.permutation(len(directed)):
                if deleted == n_delete:
                    break
                a, b = directed[idx]
                if out_deg[a] > 1 and in_deg[b] > 1:
                    keep[idx] = False
                    out_deg[a] -= 1
                    in_deg[b] -= 1
                    deleted += 1
        net = DirectedNetwork(
            num_agents=num_agents,
            edges=frozenset(map(tuple, directed[keep])),
            seed=int(seed),
        )
        try:
            return net.validate()
        except ParameterError:
            continue
    raise ConstructionError(
        f"could not produce a strongly connected graph after {REPAIR_RETRIES} deletion retries",
        retries=REPAIR_RETRIES,
    )


def save_edge_list(net, path):
    """Write the graph as text: header ``V E seed`` then one ``from to`` per line."""
    lines = [f"{net.num_agents} {net.num_edges} {net.seed if net.seed is not None else -1}"]
    for a, b in sorted(net.edges):
        lines.append(f"{a} {b}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_edge_list(path):
    """Read a graph written by :func:`save_edge_list`."""
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 3:
        raise ParameterError(f"{path}: malformed edge-list header")
    v, e, seed = int(tokens[0]), int(tokens[1]), int(tokens[2])
    pairs = tokens[3:]
    if len(pairs) != 2 * e:
        raise ParameterError(f"{path}: expected {e} edges, found {len(pairs) // 2}")
    edges = frozenset(
        (int(pairs[2 * i]), int(pairs[2 * i + 1])) for i in range(e)
    )
    return DirectedNetwork(num_agents=v, edges=edges, seed=None if seed < 0 else seed)
