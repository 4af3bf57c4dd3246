"""Metrics and evaluation protocols: coverage, random-fill accuracy,
depth-level interventions, structure-robustness sweeps, report aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models
from .config import derive_rng
from .graphs import Dag, aggregate, diff_pairs, from_adjacency
from .partition import build_subgraph, perturb_graph

MISSING = -1


@dataclass
class CoverageReport:
    predicted: set[str]
    task_relevant: set[str]
    coverage: float


def coverage_report(predicted: set[str], dag: Dag, task: str) -> CoverageReport:
    """Coverage counts concepts with a directed path to the task that the
    model actually predicts."""
    relevant = {n for n in dag.nodes if n != task and task in dag.descendants(n)}
    if not relevant:
        return CoverageReport(set(predicted), relevant, 1.0)
    return CoverageReport(set(predicted), relevant, len(predicted & relevant) / len(relevant))


def accuracy_with_random_fill(
    probs: dict[str, np.ndarray | None],
    labels: dict[str, np.ndarray],
    cardinality: dict[str, int],
) -> dict[str, float]:
    """Per-variable accuracy; variables without predictions score the exact
    expectation of a uniform guess (1/cardinality), keeping evaluation
    deterministic."""
    out = {}
    for var, p in probs.items():
        y = labels[var]
        observed = y != MISSING
        if p is None:
            out[var] = 1.0 / cardinality[var]
        elif not observed.any():
            out[var] = float("nan")
        else:
            out[var] = float((p[observed].argmax(axis=1) == y[observed]).mean())
    return out


def depth_levels(dag: Dag) -> dict[str, int]:
    """Longest directed path from any root; roots (and isolated nodes) sit at
    level 0, so a node is never shallower than any of its ancestors."""
    levels: dict[str, int] = {}
    for node in dag.topological():
        parents = dag.parents(node)
        levels[node] = max((levels[p] + 1 for p in parents), default=0)
    return levels


@dataclass
class InterventionLevel:
    level: int
    intervened: tuple[str, ...]
    label_acc: float
    task_acc: float
    impossible: bool  # some concept at this depth has no prediction to replace


@dataclass
class InterventionCurve:
    levels: list[InterventionLevel]

    def label_accs(self) -> list[float]:
        return [lv.label_acc for lv in self.levels]


def intervention_curve(
    model: models.SharedModel,
    X: np.ndarray,
    concept_labels: dict[str, np.ndarray],
    task_labels: np.ndarray,
    dag: Dag,
    task: str,
) -> InterventionCurve:
    """Cumulative ground-truth interventions over progressively deeper levels
    of the reference hierarchy.

    Level -1 is the no-intervention baseline. At level l, every predictable
    concept of depth <= l is fixed to its ground truth. Label accuracy
    averages all variables plus the task: intervened concepts carry their
    ground-truth values (accuracy 1), other predicted concepts score their
    argmax match rate, unpredicted ones the uniform-guess expectation.
    """
    levels = depth_levels(dag)
    concepts = [n for n in dag.nodes if n != task]
    predicted = set(model.arch.concepts)
    cards = {j: model.arch.cardinality.get(j, 2) for j in concepts}
    max_level = max((levels[c] for c in concepts), default=0)
    curve = []
    for level in range(-1, max_level + 1):
        chosen = tuple(c for c in concepts if levels[c] <= level and c in predicted)
        impossible = any(levels[c] == level and c not in predicted for c in concepts)
        interventions = {c: concept_labels[c] for c in chosen}
        outputs, _ = models.forward_model(model, X, interventions)
        task_acc = float((outputs.task_probs.argmax(axis=1) == task_labels).mean())
        parts = [task_acc]
        for c in concepts:
            if c in chosen:
                parts.append(1.0)
            elif c not in predicted:
                parts.append(1.0 / cards.get(c, 2))
            else:
                p = outputs.concept_probs[c]
                parts.append(float((p.argmax(axis=1) == concept_labels[c]).mean()))
        curve.append(InterventionLevel(level, chosen, float(np.mean(parts)), task_acc, impossible))
    return InterventionCurve(curve)


def _covering_proposals(dag: Dag, task: str, n_clients: int, rng: np.random.Generator,
                        extra_nodes: int = 2) -> list[Dag]:
    """Client structure views for robustness sweeps: induced subgraphs over
    sampled ancestor-path node sets, repaired until every reference edge has
    both endpoints co-observed by some client (so unperturbed proposals
    jointly reconstruct the reference)."""
    views = []
    for _ in range(n_clients):
        sampled = build_subgraph(dag, task, extra_nodes, rng)
        views.append(set(sampled.nodes))
    for i, j in sorted(dag.edges):
        if not any(i in v and j in v for v in views):
            k = int(rng.integers(n_clients))
            views[k] |= {i, j}
    return [dag.induced(v) for v in views]


def robustness_sweep(
    dag: Dag,
    task: str,
    p_values: list[float],
    corrupt_rates: list[float],
    seeds: list[int],
    n_clients: int = 20,
) -> list[dict]:
    """Mean structure error of aggregation under per-client graph corruption.

    For each (edge-alteration p, corrupt-rate, seed): build covering client
    views, perturb a corrupt-rate fraction of them with perturb_graph(p),
    aggregate with equal weights, report DiffPairs against the reference.
    """
    rows = []
    for p in p_values:
        for rate in corrupt_rates:
            diffs = []
            for seed in seeds:
                rng = derive_rng(seed, "sweep", p, rate)
                views = _covering_proposals(dag, task, n_clients, rng)
                n_bad = int(round(rate * n_clients))
                for idx in rng.choice(n_clients, size=n_bad, replace=False):
                    views[int(idx)] = perturb_graph(views[int(idx)], p, rng)
                proposals = [from_adjacency(v) for v in views]
                agg = aggregate(proposals, [1.0] * n_clients, derive_rng(seed, "sweep-tie", p, rate),
                                nodes=dag.nodes)
                diffs.append(diff_pairs(agg, dag))
            rows.append({
                "p": p,
                "corrupt_rate": rate,
                "mean_diff_pairs": float(np.mean(diffs)),
                "std_diff_pairs": float(np.std(diffs)),
                "n_seeds": len(seeds),
            })
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    """Deterministic CSV dump: column order from the first row, repr floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(f)) for f in fields])


def _fmt(value):
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return value


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def aggregate_report(final_rows: list[dict]) -> list[dict]:
    """Group per-run final metrics by (regime, model kind, dataset) and report
    mean +- std strings for the headline numbers."""
    groups: dict[tuple, list[dict]] = {}
    for row in final_rows:
        key = (row["dataset"], row["regime"], row["model_kind"])
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        rows = groups[key]

        def stat(field: str) -> str:
            vals = np.array([float(r[field]) for r in rows])
            return f"{100 * vals.mean():.1f}+-{100 * vals.std():.1f}"

        out.append({
            "dataset": key[0],
            "regime": key[1],
            "model_kind": key[2],
            "n_runs": len(rows),
            "task_acc": stat("test_task_acc"),
            "concept_acc": stat("test_concept_acc"),
            "coverage": stat("coverage"),
        })
    return out
