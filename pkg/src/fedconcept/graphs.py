"""Directed acyclic graphs and server-side aggregation of client structure votes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Structurally invalid graph input."""


@dataclass(frozen=True)
class Dag:
    """Node ids plus directed edges, guaranteed acyclic and antiparallel-free."""

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise GraphError("duplicate node ids")
        for i, j in self.edges:
            if i not in node_set or j not in node_set:
                raise GraphError(f"edge ({i}, {j}) references unknown node")
            if i == j:
                raise GraphError(f"self-loop on {i}")
            if (j, i) in self.edges:
                raise GraphError(f"antiparallel pair between {i} and {j}")
        if topological_order(self.nodes, self.edges) is None:
            raise GraphError("graph contains a directed cycle")

    @classmethod
    def from_edges(cls, nodes, edges) -> "Dag":
        return cls(tuple(nodes), frozenset((str(a), str(b)) for a, b in edges))

    def parents(self, node: str) -> tuple[str, ...]:
        return tuple(i for i in self.nodes if (i, node) in self.edges)

    def children(self, node: str) -> tuple[str, ...]:
        return tuple(j for j in self.nodes if (node, j) in self.edges)

    def roots(self) -> tuple[str, ...]:
        has_parent = {j for _, j in self.edges}
        return tuple(n for n in self.nodes if n not in has_parent)

    def topological(self) -> tuple[str, ...]:
        order = topological_order(self.nodes, self.edges)
        assert order is not None  # guaranteed acyclic by construction
        return order

    def ancestors(self, node: str) -> set[str]:
        result: set[str] = set()
        stack = list(self.parents(node))
        while stack:
            cur = stack.pop()
            if cur not in result:
                result.add(cur)
                stack.extend(self.parents(cur))
        return result

    def descendants(self, node: str) -> set[str]:
        result: set[str] = set()
        stack = list(self.children(node))
        while stack:
            cur = stack.pop()
            if cur not in result:
                result.add(cur)
                stack.extend(self.children(cur))
        return result

    def induced(self, keep) -> "Dag":
        """Subgraph on `keep` with every original edge between kept nodes."""
        keep = set(keep)
        return Dag.from_edges(
            tuple(n for n in self.nodes if n in keep),
            {(i, j) for i, j in self.edges if i in keep and j in keep},
        )


def topological_order(nodes, edges) -> tuple[str, ...] | None:
    """Kahn's algorithm; None when the edge set has a cycle."""
    nodes = tuple(nodes)
    indeg = {n: 0 for n in nodes}
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for i, j in edges:
        indeg[j] += 1
        children[i].append(j)
    ready = [n for n in nodes if indeg[n] == 0]
    order: list[str] = []
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for child in sorted(children[cur]):
            indeg[child] -= 1
            if indeg[child] == 0:
                ready.append(child)
    return tuple(order) if len(order) == len(nodes) else None


def has_cycle(nodes, edges) -> bool:
    return topological_order(nodes, edges) is None


def find_cycle(nodes, edges) -> list[tuple[str, str]] | None:
    """Some directed cycle as an edge list, or None. Iterative DFS."""
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for i, j in edges:
        children[i].append(j)
    color = {n: 0 for n in nodes}  # 0 unvisited, 1 on stack, 2 done
    parent_edge: dict[str, str] = {}
    for start in nodes:
        if color[start] != 0:
            continue
        stack: list[tuple[str, iter]] = [(start, iter(sorted(children[start])))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if color[child] == 1:
                    cycle = [(node, child)]
                    cur = node
                    while cur != child:
                        prev = parent_edge[cur]
                        cycle.append((prev, cur))
                        cur = prev
                    cycle.reverse()
                    return cycle
                if color[child] == 0:
                    color[child] = 1
                    parent_edge[child] = node
                    stack.append((child, iter(sorted(children[child]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()
    return None


@dataclass
class EdgeConfidence:
    """A client's directed-edge beliefs over the nodes it observes.

    S[i, j] is the probability of edge i -> j; the leftover
    1 - S[i, j] - S[j, i] is the no-edge probability for the pair.
    """

    nodes: tuple[str, ...]
    S: np.ndarray

    def __post_init__(self):
        n = len(self.nodes)
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.shape != (n, n):
            raise GraphError("confidence matrix shape mismatch")
        if np.any(np.diag(self.S) != 0):
            raise GraphError("diagonal must be zero")
        if np.any(self.S < 0) or np.any(self.S + self.S.T > 1 + 1e-12):
            raise GraphError("need S >= 0 and S_ij + S_ji <= 1")


def from_adjacency(g: Dag) -> EdgeConfidence:
    """Binary confidences from a plain adjacency structure."""
    n = len(g.nodes)
    index = {node: k for k, node in enumerate(g.nodes)}
    S = np.zeros((n, n))
    for i, j in g.edges:
        S[index[i], index[j]] = 1.0
    return EdgeConfidence(g.nodes, S)


@dataclass
class StrengthTable:
    """Weighted vote sums per ordered pair, plus symmetric no-edge sums."""

    nodes: tuple[str, ...]
    strength: np.ndarray  # [n, n], strength[i, j] backs edge i -> j
    no_edge: np.ndarray  # [n, n] symmetric
    observed: np.ndarray = field(default=None)  # type: ignore[assignment]  # [n, n] bool, pair seen by any client

    def __post_init__(self):
        if self.observed is None:
            self.observed = (self.strength + self.strength.T + self.no_edge) > 0


def accumulate(proposals: list[tuple[EdgeConfidence, float]], nodes: tuple[str, ...] | None = None) -> StrengthTable:
    """Sum weighted client votes over every pair both endpoints of which the
    client observes; pairs never co-observed keep zeros everywhere."""
    if nodes is None:
        seen: list[str] = []
        for conf, _ in proposals:
            for node in conf.nodes:
                if node not in seen:
                    seen.append(node)
        nodes = tuple(seen)
    index = {node: k for k, node in enumerate(nodes)}
    n = len(nodes)
    strength = np.zeros((n, n))
    no_edge = np.zeros((n, n))
    observed = np.zeros((n, n), dtype=bool)
    for conf, weight in proposals:
        if weight <= 0:
            raise GraphError("aggregation weights must be positive")
        idx = np.array([index[node] for node in conf.nodes])
        strength[np.ix_(idx, idx)] += weight * conf.S
        none_mass = weight * (1.0 - conf.S - conf.S.T)
        np.fill_diagonal(none_mass, 0.0)
        no_edge[np.ix_(idx, idx)] += none_mass
        block = np.ones((len(idx), len(idx)), dtype=bool)
        np.fill_diagonal(block, False)
        observed[np.ix_(idx, idx)] |= block
    return StrengthTable(nodes, strength, no_edge, observed)


def decide_edges(table: StrengthTable, rng: np.random.Generator) -> set[tuple[str, str]]:
    """Per-pair argmax over {i->j, j->i, no edge}; seeded tie-break.

    Pairs never observed by any client deterministically emit no edge. The
    result may contain cycles; see project_to_dag.
    """
    edges: set[tuple[str, str]] = set()
    nodes = table.nodes
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            if not table.observed[a, b]:
                continue
            votes = np.array([table.strength[a, b], table.strength[b, a], table.no_edge[a, b]])
            winners = np.flatnonzero(votes == votes.max())
            choice = winners[0] if len(winners) == 1 else int(rng.choice(winners))
            if choice == 0:
                edges.add((nodes[a], nodes[b]))
            elif choice == 1:
                edges.add((nodes[b], nodes[a]))
    return edges


def simple_cycles(nodes, edges, limit: int = 64) -> list[list[tuple[str, str]]] | None:
    """All simple cycles as edge lists, or None once `limit` is exceeded.

    Each cycle is enumerated once by anchoring it at its smallest node.
    """
    order = {n: i for i, n in enumerate(sorted(nodes))}
    children: dict[str, list[str]] = {n: [] for n in nodes}
    for i, j in edges:
        children[i].append(j)
    found: list[list[tuple[str, str]]] = []

    def dfs(start: str, node: str, path: list[str], on_path: set[str]) -> bool:
        for child in sorted(children[node]):
            if child == start:
                found.append(list(zip(path, path[1:] + [start])))
                if len(found) > limit:
                    return False
            elif order[child] > order[start] and child not in on_path:
                on_path.add(child)
                path.append(child)
                if not dfs(start, child, path, on_path):
                    return False
                path.pop()
                on_path.discard(child)
        return True

    for start in sorted(nodes):
        if not dfs(start, start, [start], {start}):
            return None
    return found


def _weakest(cycle: list[tuple[str, str]], table: StrengthTable, index: dict) -> tuple[str, str]:
    return min(cycle, key=lambda e: (table.strength[index[e[0]], index[e[1]]], e))


def project_to_dag(nodes: tuple[str, ...], edges: set[tuple[str, str]], table: StrengthTable) -> Dag:
    """Break every cycle by dropping weakest-supported edges.

    Candidate removals are the weakest edge of each current cycle; among them
    the one lying on the most cycles is dropped first (so a shared weak edge
    resolves overlapping cycles in one step). Graphs with too many cycles to
    enumerate fall back to one-cycle-at-a-time removal. Only edges on a
    detected cycle are ever removed; ties fall back to lower strength, then
    lexicographic pair order, so projection is deterministic.
    """
    index = {node: k for k, node in enumerate(table.nodes)}
    edges = set(edges)
    while True:
        cycles = simple_cycles(nodes, edges)
        if cycles is None:
            cycle = find_cycle(nodes, edges)
            if cycle is None:
                break
            edges.discard(_weakest(cycle, table, index))
            continue
        if not cycles:
            break
        candidates = {_weakest(c, table, index) for c in cycles}
        pick = min(
            candidates,
            key=lambda e: (
                -sum(e in c for c in cycles),
                table.strength[index[e[0]], index[e[1]]],
                e,
            ),
        )
        edges.discard(pick)
    return Dag.from_edges(nodes, edges)


def aggregate(
    proposals: list[EdgeConfidence],
    weights: list[float],
    rng: np.random.Generator,
    nodes: tuple[str, ...] | None = None,
) -> Dag:
    """Full structure aggregation: accumulate -> decide_edges -> project_to_dag."""
    if len(proposals) != len(weights):
        raise GraphError("one weight per proposal required")
    table = accumulate(list(zip(proposals, weights)), nodes=nodes)
    edges = decide_edges(table, rng)
    return project_to_dag(table.nodes, edges, table)


def diff_pairs(g: Dag, reference: Dag) -> int:
    """Number of unordered pairs whose relation (i->j / j->i / none) differs."""
    if set(g.nodes) != set(reference.nodes):
        raise GraphError("node sets differ")

    def relation(dag: Dag, a: str, b: str) -> int:
        if (a, b) in dag.edges:
            return 1
        if (b, a) in dag.edges:
            return 2
        return 0

    nodes = sorted(g.nodes)
    count = 0
    for x in range(len(nodes)):
        for y in range(x + 1, len(nodes)):
            if relation(g, nodes[x], nodes[y]) != relation(reference, nodes[x], nodes[y]):
                count += 1
    return count


def write_edge_list(g: Dag, path) -> None:
    """Dump a DAG as one 'src -> dst' line per edge (CLI export format)."""
    lines = [f"{i} -> {j}" for i, j in sorted(g.edges)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
