"""Independent reference implementations used only to check the library.

These deliberately avoid the code paths under test: marginals come from
brute-force joint enumeration, gradients from central finite differences, and
cycle-breaking minimality from exhaustive subset search.
"""

from __future__ import annotations

import itertools

import numpy as np

from fedconcept.graphs import has_cycle


def exact_marginals(net) -> dict[str, np.ndarray]:
    """Node marginals by enumerating the full joint (feasible for <= ~12 nodes)."""
    nodes = list(net.dag.nodes)
    cards = [net.cardinality[n] for n in nodes]
    grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
    configs = np.stack([g.ravel() for g in grids], axis=1)  # [n_cfg, n_nodes]
    prob = np.ones(configs.shape[0])
    for k, node in enumerate(nodes):
        row_idx = np.zeros(configs.shape[0], dtype=np.int64)
        for p in net.parents[node]:
            row_idx = row_idx * net.cardinality[p] + configs[:, nodes.index(p)]
        prob *= net.cpt[node][row_idx, configs[:, k]]
    marginals = {}
    for k, node in enumerate(nodes):
        marginals[node] = np.array([prob[configs[:, k] == v].sum() for v in range(cards[k])])
    return marginals


def finite_difference_grad(loss_fn, flat: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar loss over a flat parameter vector."""
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(flat)
        flat[i] = orig - step
        down = loss_fn(flat)
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    loss_fn(flat)  # restore any cached state
    return grad


def min_edges_to_acyclify(nodes, edges) -> int:
    """Smallest number of edge removals that makes the graph acyclic."""
    edges = sorted(edges)
    for k in range(len(edges) + 1):
        for removed in itertools.combinations(range(len(edges)), k):
            keep = [e for i, e in enumerate(edges) if i not in removed]
            if not has_cycle(nodes, keep):
                return k
    return len(edges)


def _all_cycles_brute(nodes, edges):
    """Every simple cycle (edge list), found by brute force over start nodes."""
    children = {n: [j for i, j in edges if i == n] for n in nodes}
    cycles = []

    def dfs(start, node, path):
        for child in children[node]:
            if child == start and min(path) == start:
                cycles.append(list(zip(path, path[1:] + [start])))
            elif child not in path and child > start:
                dfs(start, child, path + [child])

    for s in sorted(nodes):
        dfs(s, s, [s])
    return cycles


def min_removals_among_weakest_strategies(nodes, edges, strength_of) -> int:
    """Fewest removals reachable by any strategy that repeatedly picks some
    cycle and deletes that cycle's weakest edge (exhaustive over orders)."""
    cycles = _all_cycles_brute(nodes, set(edges))
    if not cycles:
        return 0
    best = len(edges)
    for cycle in cycles:
        weakest = min(cycle, key=lambda e: (strength_of(e), e))
        rest = set(edges) - {weakest}
        best = min(best, 1 + min_removals_among_weakest_strategies(nodes, rest, strength_of))
    return best


def weighted_mean_updates(vectors: list[np.ndarray], counts: list[int]) -> np.ndarray:
    """Per-coordinate dataset-size-weighted mean, computed the long way."""
    total = float(sum(counts))
    out = np.zeros_like(vectors[0])
    for i in range(out.size):
        out[i] = sum(v[i] * (c / total) for v, c in zip(vectors, counts))
    return out
