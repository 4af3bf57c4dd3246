#!/usr/bin/env python3
"""Regenerate the bundled Bayesian-network fixture files.

Run from the repo root:  python scripts/make_network_fixtures.py

Five networks are written to src/fedconcept/networks/. The small diagnosis
network ships with its exact published tables. The protein-signalling and
patient-monitoring networks use their published structures and cardinalities;
their conditional tables (originally fit to data) are generated here with a
fixed seed. The two largest networks are stand-ins: deterministic random DAGs
matching the published node/edge counts, with the same designated task nodes.
All outputs are deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

OUT_DIR = Path(__file__).resolve().parents[1] / "src" / "fedconcept" / "networks"


def synth_cpt(rng: np.random.Generator, card: int, parent_cards: list[int], node_idx: int) -> list[list[float]]:
    """Parent-dependent rows: each parent configuration peaks on a different
    class, with Dirichlet jitter, so children genuinely depend on parents."""
    n_rows = int(np.prod(parent_cards)) if parent_cards else 1
    rows = []
    for r in range(n_rows):
        peak = (r * 2654435761 + node_idx * 97) % card
        noise = rng.dirichlet(np.ones(card))
        if parent_cards:
            row = 0.7 * np.eye(card)[peak] + 0.3 * noise
        else:
            row = rng.dirichlet(2.0 * np.ones(card))
        rows.append((row / row.sum()).tolist())
    return rows


def build(name: str, task: str, cards: dict[str, int], edges: list[tuple[str, str]],
          exact_cpts: dict[str, list[list[float]]] | None = None, seed: int = 0) -> dict:
    nodes = list(cards)
    parent_map = {n: [i for i, j in edges if j == n] for n in nodes}
    rng = np.random.default_rng(seed)
    out_nodes = []
    for idx, n in enumerate(nodes):
        if exact_cpts and n in exact_cpts:
            cpt_rows = exact_cpts[n]
        else:
            cpt_rows = synth_cpt(rng, cards[n], [cards[p] for p in parent_map[n]], idx)
        flat = [v for row in cpt_rows for v in row]
        out_nodes.append({"name": n, "cardinality": cards[n], "parents": parent_map[n], "cpt": flat})
    return {"name": name, "task": task, "nodes": out_nodes}


def make_asia() -> dict:
    cards = {n: 2 for n in ["asia", "tub", "smoke", "lung", "bronc", "either", "xray", "dysp"]}
    edges = [("asia", "tub"), ("smoke", "lung"), ("smoke", "bronc"), ("tub", "either"),
             ("lung", "either"), ("either", "xray"), ("either", "dysp"), ("bronc", "dysp")]
    # class 0 = "no", class 1 = "yes"; parent rows ordered with the first
    # listed parent as the most significant digit
    cpts = {
        "asia": [[0.99, 0.01]],
        "tub": [[0.99, 0.01], [0.95, 0.05]],
        "smoke": [[0.5, 0.5]],
        "lung": [[0.99, 0.01], [0.9, 0.1]],
        "bronc": [[0.7, 0.3], [0.4, 0.6]],
        # parents (tub, lung): rows 00, 01, 10, 11 -- logical OR
        "either": [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
        "xray": [[0.95, 0.05], [0.02, 0.98]],
        # parents (either, bronc): rows 00, 01, 10, 11
        "dysp": [[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.1, 0.9]],
    }
    return build("asia", "dysp", cards, edges, exact_cpts=cpts)


def make_sachs() -> dict:
    nodes = ["Plcg", "PIP3", "PIP2", "PKC", "PKA", "Raf", "Mek", "Erk", "Akt", "P38", "Jnk"]
    cards = {n: 3 for n in nodes}
    edges = [
        ("Plcg", "PIP3"), ("Plcg", "PIP2"), ("PIP3", "PIP2"),
        ("PKC", "PKA"), ("PKC", "Raf"), ("PKC", "Mek"), ("PKC", "P38"), ("PKC", "Jnk"),
        ("PKA", "Raf"), ("PKA", "Mek"), ("PKA", "Erk"), ("PKA", "Akt"), ("PKA", "P38"), ("PKA", "Jnk"),
        ("Raf", "Mek"), ("Mek", "Erk"), ("Erk", "Akt"),
    ]
    assert len(edges) == 17
    return build("sachs", "Akt", cards, edges, seed=11)


def make_alarm() -> dict:
    cards = {
        "MINVOLSET": 3, "VENTMACH": 4, "DISCONNECT": 2, "VENTTUBE": 4, "KINKEDTUBE": 2,
        "INTUBATION": 3, "VENTLUNG": 4, "VENTALV": 4, "FIO2": 2, "PVSAT": 3, "ARTCO2": 3,
        "SAO2": 3, "PULMEMBOLUS": 2, "SHUNT": 2, "PAP": 3, "PRESS": 4, "EXPCO2": 4,
        "MINVOL": 4, "INSUFFANESTH": 2, "ANAPHYLAXIS": 2, "TPR": 3, "CATECHOL": 2,
        "HR": 3, "ERRLOWOUTPUT": 2, "HRBP": 3, "ERRCAUTER": 2, "HREKG": 3, "HRSAT": 3,
        "CO": 3, "HYPOVOLEMIA": 2, "LVFAILURE": 2, "STROKEVOLUME": 3, "LVEDVOLUME": 3,
        "CVP": 3, "PCWP": 3, "HISTORY": 2, "BP": 3,
    }
    edges = [
        ("MINVOLSET", "VENTMACH"), ("VENTMACH", "VENTTUBE"), ("DISCONNECT", "VENTTUBE"),
        ("VENTTUBE", "VENTLUNG"), ("KINKEDTUBE", "VENTLUNG"), ("INTUBATION", "VENTLUNG"),
        ("VENTLUNG", "VENTALV"), ("INTUBATION", "VENTALV"), ("VENTALV", "ARTCO2"),
        ("VENTALV", "PVSAT"), ("FIO2", "PVSAT"), ("PVSAT", "SAO2"), ("SHUNT", "SAO2"),
        ("INTUBATION", "SHUNT"), ("PULMEMBOLUS", "SHUNT"), ("PULMEMBOLUS", "PAP"),
        ("INTUBATION", "PRESS"), ("KINKEDTUBE", "PRESS"), ("VENTTUBE", "PRESS"),
        ("VENTLUNG", "EXPCO2"), ("ARTCO2", "EXPCO2"), ("VENTLUNG", "MINVOL"),
        ("INTUBATION", "MINVOL"), ("ARTCO2", "CATECHOL"), ("SAO2", "CATECHOL"),
        ("TPR", "CATECHOL"), ("INSUFFANESTH", "CATECHOL"), ("CATECHOL", "HR"),
        ("HR", "HRBP"), ("ERRLOWOUTPUT", "HRBP"), ("HR", "HREKG"), ("ERRCAUTER", "HREKG"),
        ("HR", "HRSAT"), ("ERRCAUTER", "HRSAT"), ("HR", "CO"), ("STROKEVOLUME", "CO"),
        ("LVFAILURE", "STROKEVOLUME"), ("HYPOVOLEMIA", "STROKEVOLUME"),
        ("LVFAILURE", "LVEDVOLUME"), ("HYPOVOLEMIA", "LVEDVOLUME"), ("LVEDVOLUME", "CVP"),
        ("LVEDVOLUME", "PCWP"), ("LVFAILURE", "HISTORY"), ("CO", "BP"), ("TPR", "BP"),
        ("ANAPHYLAXIS", "TPR"),
    ]
    assert len(edges) == 46 and len(cards) == 37
    return build("alarm", "BP", cards, edges, seed=23)


def make_random_net(name: str, task: str, n_nodes: int, n_edges: int, seed: int) -> dict:
    """Stand-in network: deterministic random DAG with exact size, task placed
    as a sink with at least two parents."""
    rng = np.random.default_rng(seed)
    names = [f"{name[0].upper()}{i:02d}" for i in range(n_nodes - 1)] + [task]
    cards = {n: int(rng.integers(2, 4)) for n in names}
    cards[task] = 3 if name == "hailfinder" else 4
    edges: set[tuple[int, int]] = set()
    # give most non-root nodes one upstream parent to keep ancestry deep
    for j in range(1, n_nodes):
        if j == n_nodes - 1 or rng.random() > 0.2:
            i = int(rng.integers(0, j))
            edges.add((i, j))
    edges.add((int(rng.integers(0, n_nodes - 1)), n_nodes - 1))
    while len(edges) < n_edges:
        i, j = sorted(rng.integers(0, n_nodes, size=2))
        if i != j:
            edges.add((int(i), int(j)))
    while len(edges) > n_edges:  # trim non-essential extras deterministically
        for e in sorted(edges, reverse=True):
            second_parent = sum(1 for a, b in edges if b == e[1]) > 1
            if second_parent and e[1] != n_nodes - 1:
                edges.discard(e)
                break
        if len(edges) == n_edges:
            break
    assert len(edges) == n_edges
    named_edges = [(names[i], names[j]) for i, j in sorted(edges)]
    return build(name, task, cards, named_edges, seed=seed + 1)


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    nets = [
        make_asia(),
        make_sachs(),
        make_alarm(),
        make_random_net("insurance", "PropCost", 27, 52, seed=37),
        make_random_net("hailfinder", "R5Fcst", 56, 66, seed=41),
    ]
    for net in nets:
        path = OUT_DIR / f"{net['name']}.json"
        path.write_text(json.dumps(net, indent=1) + "\n")
        n_edges = sum(len(n["parents"]) for n in net["nodes"])
        print(f"wrote {path.name}: {len(net['nodes'])} nodes, {n_edges} edges, task {net['task']}")


if __name__ == "__main__":
    main()
