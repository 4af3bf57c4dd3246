"""Client subgraph construction, graph perturbation and dataset sharding.

Clients receive a partial view of the ground-truth DAG (unions of sampled
ancestor paths), an equal-size disjoint slice of the training rows, and labels
only for the variables inside their subgraph. A configurable fraction of
clients is held back as a late cohort whose subgraphs may contain concepts no
initial client supervises.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bayes import EncodedDataset
from .graphs import Dag, GraphError, has_cycle

MISSING = -1
MAX_RETRIES = 100


class PartitionError(RuntimeError):
    """Federation constraints unreachable after bounded retries."""


@dataclass
class ClientSpec:
    id: int
    subgraph: Dag
    supervised: tuple[str, ...]  # concept nodes of the subgraph
    has_task: bool
    cohort: str  # "initial" or "late"
    row_indices: np.ndarray

    def proposal_nodes(self) -> tuple[str, ...]:
        return self.subgraph.nodes


@dataclass
class ClientShard:
    """A client's local data: inputs plus masked concept/task labels."""

    inputs: np.ndarray
    concept_nodes: tuple[str, ...]  # global concept order
    concepts: np.ndarray  # int [n, m], MISSING outside the supervised set
    task: np.ndarray  # int [n], all MISSING when has_task is False
    spec: ClientSpec

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def concept_column(self, node: str) -> np.ndarray:
        return self.concepts[:, self.concept_nodes.index(node)]

    def restricted(self, allowed_concepts: set[str]) -> "ClientShard":
        """View with supervision narrowed to `allowed_concepts` (used when the
        shared architecture intentionally lags behind client annotations)."""
        keep = tuple(c for c in self.spec.supervised if c in allowed_concepts)
        concepts = self.concepts.copy()
        for k, node in enumerate(self.concept_nodes):
            if node not in keep:
                concepts[:, k] = MISSING
        spec = ClientSpec(
            self.spec.id, self.spec.subgraph, keep, self.spec.has_task,
            self.spec.cohort, self.spec.row_indices,
        )
        return ClientShard(self.inputs, self.concept_nodes, concepts, self.task, spec)


def _walk_up(dag: Dag, start: str, rng: np.random.Generator) -> list[tuple[str, str]]:
    """One random ancestor path from `start` to a root, as edges."""
    path = []
    node = start
    while True:
        parents = dag.parents(node)
        if not parents:
            return path
        parent = parents[int(rng.integers(len(parents)))]
        path.append((parent, node))
        node = parent


def build_subgraph(dag: Dag, task: str, extra_nodes: int, rng: np.random.Generator,
                   paths_per_anchor: int = 3) -> Dag:
    """Union of sampled root-ward paths from the task and a few random anchors.

    Up to `paths_per_anchor` distinct paths are collected per anchor; extra
    anchors are drawn among non-root nodes other than the task.
    """
    if task not in dag.nodes:
        raise GraphError(f"task {task!r} not in graph")
    roots = set(dag.roots())
    candidates = [n for n in dag.nodes if n not in roots and n != task]
    anchors = [task]
    if extra_nodes > 0 and candidates:
        picked = rng.choice(len(candidates), size=min(extra_nodes, len(candidates)), replace=False)
        anchors += [candidates[int(i)] for i in np.sort(picked)]
    edges: set[tuple[str, str]] = set()
    nodes: set[str] = set(anchors)
    for anchor in anchors:
        seen: set[frozenset] = set()
        for _ in range(paths_per_anchor * 4):
            if len(seen) >= paths_per_anchor:
                break
            path = frozenset(_walk_up(dag, anchor, rng))
            if path in seen:
                continue
            seen.add(path)
            edges |= set(path)
    for i, j in edges:
        nodes.add(i)
        nodes.add(j)
    return Dag.from_edges(tuple(n for n in dag.nodes if n in nodes), edges)


def _absent_pairs(g_nodes: tuple[str, ...], edges: set[tuple[str, str]]) -> list[tuple[str, str]]:
    out = []
    for a in range(len(g_nodes)):
        for b in range(len(g_nodes)):
            if a == b:
                continue
            pair = (g_nodes[a], g_nodes[b])
            if pair not in edges and (pair[1], pair[0]) not in edges:
                out.append(pair)
    return out


def perturb_graph(g: Dag, edge_fraction: float, rng: np.random.Generator) -> Dag:
    """Apply floor(p * |E|) random flip/remove/add modifications, keeping the
    graph acyclic; cycle-creating draws are retried and eventually skipped."""
    if not 0.0 <= edge_fraction <= 1.0:
        raise GraphError("edge_fraction must lie in [0, 1]")
    n_mods = int(np.floor(edge_fraction * len(g.edges)))
    edges = set(g.edges)
    for _ in range(n_mods):
        for _ in range(MAX_RETRIES):
            op = ("flip", "remove", "add")[int(rng.integers(3))]
            if op in ("flip", "remove") and not edges:
                continue
            if op == "add":
                pool = _absent_pairs(g.nodes, edges)
                if not pool:
                    continue
                new_edge = pool[int(rng.integers(len(pool)))]
                if not has_cycle(g.nodes, edges | {new_edge}):
                    edges.add(new_edge)
                    break
            else:
                pool_e = sorted(edges)
                i, j = pool_e[int(rng.integers(len(pool_e)))]
                if op == "remove":
                    edges.discard((i, j))
                    break
                flipped = (edges - {(i, j)}) | {(j, i)}
                if not has_cycle(g.nodes, flipped):
                    edges = flipped
                    break
    return Dag.from_edges(g.nodes, edges)


def _add_anchor_path(dag: Dag, sub: Dag, anchor: str, rng: np.random.Generator) -> Dag:
    """Extend a client subgraph with one sampled ancestor path through anchor."""
    edges = set(sub.edges) | set(_walk_up(dag, anchor, rng))
    nodes = set(sub.nodes) | {anchor}
    for i, j in edges:
        nodes |= {i, j}
    return Dag.from_edges(tuple(n for n in dag.nodes if n in nodes), edges)


def _pick_late_concepts(dag: Dag, task: str, frac: float, rng: np.random.Generator) -> set[str]:
    """Concepts reserved for the late cohort; the task must keep a full
    ancestor path inside the remaining node set."""
    if frac <= 0:
        return set()
    concepts = [n for n in dag.nodes if n != task]
    k = int(round(frac * len(concepts)))
    for _ in range(MAX_RETRIES):
        if k == 0:
            return set()
        hidden = {concepts[int(i)] for i in rng.choice(len(concepts), size=k, replace=False)}
        rest = dag.induced(set(dag.nodes) - hidden)
        if task in rest.nodes and (not dag.parents(task) or rest.parents(task)):
            return hidden
        k -= 1  # shrink until feasible
    return set()


def make_federation(
    dataset: EncodedDataset,
    dag: Dag,
    task: str,
    n_clients: int,
    task_drop_rate: float,
    perturb_clients: float,
    edge_fraction: float,
    rng: np.random.Generator,
    extra_nodes: int = 2,
    late_frac: float = 0.5,
    late_concept_frac: float = 0.35,
) -> list[ClientShard]:
    """Build client specs and shards with total concept/task coverage.

    Initial-cohort subgraphs are sampled on the DAG minus a reserved
    late-cohort concept set, so late arrivals introduce genuinely new
    supervision. Nodes still uncovered after sampling are repaired by giving
    an eligible client an extra ancestor-path anchor through them.
    """
    if n_clients < 1:
        raise PartitionError("need at least one client")
    n_late = int(round(late_frac * n_clients)) if n_clients >= 2 else 0
    late_ids = set(range(n_clients - n_late, n_clients))
    hidden = _pick_late_concepts(dag, task, late_concept_frac, rng) if n_late else set()
    initial_view = dag.induced(set(dag.nodes) - hidden) if hidden else dag

    subgraphs: list[Dag] = []
    for cid in range(n_clients):
        view = dag if cid in late_ids else initial_view
        subgraphs.append(build_subgraph(view, task, extra_nodes, rng))

    # coverage repair: every node must be supervised somewhere
    for _ in range(MAX_RETRIES):
        covered = set().union(*(set(g.nodes) for g in subgraphs))
        missing = [n for n in dag.nodes if n not in covered]
        if not missing:
            break
        for node in missing:
            eligible = sorted(late_ids) if (node in hidden and late_ids) else list(range(n_clients))
            cid = eligible[int(rng.integers(len(eligible)))]
            view = dag if cid in late_ids else initial_view
            subgraphs[cid] = _add_anchor_path(view, subgraphs[cid], node, rng)
    else:
        raise PartitionError("could not reach total concept coverage")

    # drop the task from a fraction of clients, keeping at least one holder
    has_task = [True] * n_clients
    n_drop = min(int(np.floor(task_drop_rate * n_clients)), n_clients - 1)
    if n_drop > 0:
        for cid in rng.choice(n_clients, size=n_drop, replace=False):
            cid = int(cid)
            if len(subgraphs[cid].nodes) <= 1:
                continue  # a task-only client must keep its task supervision
            has_task[cid] = False
            keep = tuple(n for n in subgraphs[cid].nodes if n != task)
            subgraphs[cid] = subgraphs[cid].induced(keep)

    # perturb the graphs of a fraction of clients
    n_pert = int(np.floor(perturb_clients * n_clients))
    if n_pert > 0 and edge_fraction > 0:
        for cid in rng.choice(n_clients, size=n_pert, replace=False):
            cid = int(cid)
            subgraphs[cid] = perturb_graph(subgraphs[cid], edge_fraction, rng)

    # equal disjoint slices of the training rows
    train_rows = dataset.rows("train")
    order = train_rows[rng.permutation(len(train_rows))]
    chunks = np.array_split(order, n_clients)

    shards = []
    for cid in range(n_clients):
        supervised = tuple(n for n in subgraphs[cid].nodes if n != task)
        if not supervised and not has_task[cid]:
            raise PartitionError(f"client {cid} ended with no supervision at all")
        spec = ClientSpec(
            id=cid,
            subgraph=subgraphs[cid],
            supervised=supervised,
            has_task=has_task[cid],
            cohort="late" if cid in late_ids else "initial",
            row_indices=np.sort(chunks[cid]),
        )
        shards.append(_materialize(dataset, spec))
    return shards


def _materialize(dataset: EncodedDataset, spec: ClientSpec) -> ClientShard:
    rows = spec.row_indices
    concepts = dataset.concepts.values[rows].copy()
    supervised = set(spec.supervised)
    for k, node in enumerate(dataset.concept_nodes):
        if node not in supervised:
            concepts[:, k] = MISSING
    task = dataset.task[rows].copy()
    if not spec.has_task:
        task = np.full_like(task, MISSING)
    return ClientShard(dataset.inputs[rows], dataset.concept_nodes, concepts, task, spec)


def save_manifest(shards: list[ClientShard], path: str | Path) -> None:
    """Persist the partition so a federation can be replayed exactly."""
    payload = {
        "clients": [
            {
                "id": s.spec.id,
                "nodes": list(s.spec.subgraph.nodes),
                "edges": sorted(s.spec.subgraph.edges),
                "supervised": list(s.spec.supervised),
                "has_task": s.spec.has_task,
                "cohort": s.spec.cohort,
                "row_indices": s.spec.row_indices.tolist(),
            }
            for s in shards
        ]
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_manifest(dataset: EncodedDataset, path: str | Path) -> list[ClientShard]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PartitionError(f"cannot load manifest {path}: {exc}") from exc
    shards = []
    for entry in payload["clients"]:
        spec = ClientSpec(
            id=int(entry["id"]),
            subgraph=Dag.from_edges(entry["nodes"], [tuple(e) for e in entry["edges"]]),
            supervised=tuple(entry["supervised"]),
            has_task=bool(entry["has_task"]),
            cohort=entry["cohort"],
            row_indices=np.asarray(entry["row_indices"], dtype=np.int64),
        )
        shards.append(_materialize(dataset, spec))
    return shards
