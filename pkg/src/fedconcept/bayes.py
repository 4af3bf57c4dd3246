"""Ground-truth Bayesian networks, ancestral sampling and input synthesis.

Annotation tables are sampled from bundled network definitions; continuous
inputs are produced by encoding one-hot annotations with a small autoencoder
and mixing the codes with Gaussian noise, so models must actually recover the
underlying variables from the inputs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .graphs import Dag
from .nn import AdamState, DenseNet, adam_step, flatten, loss_mse, unflatten

NETWORK_NAMES = ("asia", "sachs", "alarm", "insurance", "hailfinder")
DEFAULT_SAMPLES = {"asia": 15000, "sachs": 15000, "alarm": 10000, "insurance": 20000, "hailfinder": 20000}
DEFAULT_LATENT = {"asia": 32, "sachs": 32, "alarm": 64, "insurance": 64, "hailfinder": 64}


class DataError(ValueError):
    """Malformed network definition or dataset artefact (CLI exit code 2)."""


@dataclass
class BayesNet:
    """DAG plus per-node cardinalities and conditional probability tables.

    cpt[node] has one row per joint parent configuration, ordered row-major
    with the first listed parent as the most significant digit.
    """

    name: str
    dag: Dag
    cardinality: dict[str, int]
    parents: dict[str, tuple[str, ...]]
    cpt: dict[str, np.ndarray]
    task: str

    def __post_init__(self):
        for node in self.dag.nodes:
            card = self.cardinality.get(node, 0)
            if card < 2:
                raise DataError(f"{self.name}: node {node} needs cardinality >= 2")
            if set(self.parents[node]) != set(self.dag.parents(node)):
                raise DataError(f"{self.name}: parent list of {node} disagrees with edges")
            table = np.asarray(self.cpt[node], dtype=np.float64)
            n_rows = int(np.prod([self.cardinality[p] for p in self.parents[node]])) if self.parents[node] else 1
            if table.shape != (n_rows, card):
                raise DataError(f"{self.name}: CPT of {node} has shape {table.shape}, expected {(n_rows, card)}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
                raise DataError(f"{self.name}: CPT rows of {node} must be distributions")
            self.cpt[node] = table
        if self.task not in self.dag.nodes:
            raise DataError(f"{self.name}: task {self.task} not a node")

    @property
    def concept_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.dag.nodes if n != self.task)


@dataclass
class SampleTable:
    """Categorical draws, one column per network node."""

    nodes: tuple[str, ...]
    values: np.ndarray  # int [n, len(nodes)]

    def column(self, node: str) -> np.ndarray:
        return self.values[:, self.nodes.index(node)]

    def restrict(self, keep: tuple[str, ...]) -> "SampleTable":
        idx = [self.nodes.index(n) for n in keep]
        return SampleTable(tuple(keep), self.values[:, idx])


def load_network(path: str | Path) -> BayesNet:
    """Parse one network definition file; raises DataError naming the file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load network file {path}: {exc}") from exc
    try:
        names = [n["name"] for n in raw["nodes"]]
        cards = {n["name"]: int(n["cardinality"]) for n in raw["nodes"]}
        parents = {n["name"]: tuple(n["parents"]) for n in raw["nodes"]}
        edges = {(p, n["name"]) for n in raw["nodes"] for p in n["parents"]}
        dag = Dag.from_edges(names, edges)
        cpt = {}
        for n in raw["nodes"]:
            flat = np.asarray(n["cpt"], dtype=np.float64)
            cpt[n["name"]] = flat.reshape(-1, cards[n["name"]])
        return BayesNet(raw.get("name", path.stem), dag, cards, parents, cpt, raw["task"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed network file {path}: {exc}") from exc


def reference_networks() -> dict[str, BayesNet]:
    """The five bundled benchmark networks, keyed by name."""
    nets = {}
    base = resources.files("fedconcept").joinpath("networks")
    for name in NETWORK_NAMES:
        with resources.as_file(base.joinpath(f"{name}.json")) as path:
            nets[name] = load_network(path)
    return nets


def parent_config_index(net: BayesNet, node: str, table: SampleTable) -> np.ndarray:
    idx = np.zeros(table.values.shape[0], dtype=np.int64)
    for p in net.parents[node]:
        idx = idx * net.cardinality[p] + table.column(p)
    return idx


def ancestral_sample(net: BayesNet, n: int, rng: np.random.Generator) -> SampleTable:
    """Draw n joint configurations by sampling nodes in topological order."""
    if n < 1:
        raise DataError("need n >= 1")
    nodes = net.dag.nodes
    values = np.zeros((n, len(nodes)), dtype=np.int64)
    table = SampleTable(nodes, values)
    for node in net.dag.topological():
        rows = net.cpt[node][parent_config_index(net, node, table)]
        draws = rng.random((n, 1))
        values[:, nodes.index(node)] = (draws > np.cumsum(rows, axis=1)).sum(axis=1)
    return table


def one_hot_table(table: SampleTable, cardinality: dict[str, int]) -> np.ndarray:
    blocks = []
    for k, node in enumerate(table.nodes):
        card = cardinality[node]
        blocks.append(np.eye(card)[table.values[:, k]])
    return np.concatenate(blocks, axis=1)


@dataclass
class EncodedDataset:
    """Standardized continuous inputs plus annotations and fixed splits."""

    inputs: np.ndarray  # [n, latent]
    concepts: SampleTable  # non-task columns
    task_node: str
    task: np.ndarray  # int [n]
    cardinality: dict[str, int]
    splits: dict[str, np.ndarray]  # train / val / test row indices
    dag: Dag
    meta: dict

    @property
    def concept_nodes(self) -> tuple[str, ...]:
        return self.concepts.nodes

    def rows(self, split: str) -> np.ndarray:
        return self.splits[split]


def _train_autoencoder(onehot: np.ndarray, train_rows: np.ndarray, latent_dim: int,
                       rng: np.random.Generator, epochs: int = 50, lr: float = 1e-3,
                       batch: int = 256) -> DenseNet:
    """Two encoder + two decoder layers, MSE reconstruction, Adam."""
    d = onehot.shape[1]
    hidden = max(4, int(round(np.sqrt(d * latent_dim))))
    encoder = DenseNet.create([d, hidden, latent_dim], ["leaky_relu", "identity"], rng)
    decoder = DenseNet.create([latent_dim, hidden, d], ["leaky_relu", "identity"], rng)
    opt_enc = AdamState.create(flatten(encoder).values.size, lr)
    opt_dec = AdamState.create(flatten(decoder).values.size, lr)
    for _ in range(epochs):
        order = rng.permutation(train_rows)
        for start in range(0, len(order), batch):
            x = onehot[order[start : start + batch]]
            code = encoder.forward(x)
            recon = decoder.forward(code)
            _, drecon = loss_mse(recon, x)
            dec_grad, dcode = decoder.backward(code, drecon)
            enc_grad, _ = encoder.backward(x, dcode)
            decoder = unflatten(decoder, adam_step(opt_dec, flatten(decoder).values, dec_grad.values))
            encoder = unflatten(encoder, adam_step(opt_enc, flatten(encoder).values, enc_grad.values))
    return encoder


def synthesize_inputs(
    samples: SampleTable,
    cardinality: dict[str, int],
    task: str,
    dag: Dag,
    latent_dim: int,
    noise_mix: float = 0.5,
    rng: np.random.Generator | None = None,
    meta: dict | None = None,
) -> EncodedDataset:
    """Build continuous inputs from categorical annotations.

    One-hot values are compressed by an autoencoder fitted on the training
    split, mixed with standard Gaussian noise (noise_mix fraction), and
    standardized per column using training-split statistics only.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if latent_dim < 1:
        raise DataError("latent_dim must be >= 1")
    if not 0.0 <= noise_mix <= 1.0:
        raise DataError("noise_mix must lie in [0, 1]")
    n = samples.values.shape[0]
    perm = rng.permutation(n)
    n_train, n_val = int(0.7 * n), int(0.1 * n)
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    onehot = one_hot_table(samples, cardinality)
    encoder = _train_autoencoder(onehot, splits["train"], latent_dim, rng)
    codes = encoder.forward(onehot)
    inputs = (1.0 - noise_mix) * codes + noise_mix * rng.standard_normal(codes.shape)
    mu = inputs[splits["train"]].mean(axis=0)
    sd = inputs[splits["train"]].std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    inputs = (inputs - mu) / sd
    concept_nodes = tuple(n_ for n_ in samples.nodes if n_ != task)
    return EncodedDataset(
        inputs=inputs,
        concepts=samples.restrict(concept_nodes),
        task_node=task,
        task=samples.column(task).copy(),
        cardinality=dict(cardinality),
        splits=splits,
        dag=dag,
        meta=dict(meta or {}, latent_dim=latent_dim, noise_mix=noise_mix),
    )


def generate_dataset(name: str, n: int = 0, latent_dim: int = 0, noise_mix: float = 0.5,
                     seed: int = 0) -> EncodedDataset:
    """End-to-end: sample the named reference network and synthesize inputs."""
    from .config import derive_rng

    nets = reference_networks()
    if name not in nets:
        raise DataError(f"unknown network {name!r}, expected one of {NETWORK_NAMES}")
    net = nets[name]
    n = n or DEFAULT_SAMPLES[name]
    latent_dim = latent_dim or DEFAULT_LATENT[name]
    table = ancestral_sample(net, n, derive_rng(seed, "sample", name))
    return synthesize_inputs(
        table, net.cardinality, net.task, net.dag, latent_dim, noise_mix,
        derive_rng(seed, "encode", name),
        meta={"dataset": name, "seed": seed, "n_samples": n},
    )


def save_dataset(ds: EncodedDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "inputs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.inputs.shape[1])])
        writer.writerows([repr(float(v)) for v in row] for row in ds.inputs)
    with open(out / "concepts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ds.concept_nodes)
        writer.writerows(ds.concepts.values.tolist())
    with open(out / "task.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([ds.task_node])
        writer.writerows([[v] for v in ds.task.tolist()])
    (out / "split.json").write_text(
        json.dumps({k: v.tolist() for k, v in ds.splits.items()}) + "\n"
    )
    (out / "meta.json").write_text(
        json.dumps(
            {
                "task": ds.task_node,
                "cardinality": ds.cardinality,
                "nodes": list(ds.dag.nodes),
                "edges": sorted(ds.dag.edges),
                **ds.meta,
            },
            indent=1,
            sort_keys=True,
        )
        + "\n"
    )


def load_dataset(in_dir: str | Path) -> EncodedDataset:
    src = Path(in_dir)
    try:
        meta = json.loads((src / "meta.json").read_text())
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in json.loads((src / "split.json").read_text()).items()}
        inputs = np.loadtxt(src / "inputs.csv", delimiter=",", skiprows=1, ndmin=2)
        with open(src / "concepts.csv") as fh:
            concept_nodes = tuple(next(csv.reader(fh)))
        concepts = np.loadtxt(src / "concepts.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        task = np.loadtxt(src / "task.csv", delimiter=",", skiprows=1, dtype=np.int64)
    except OSError as exc:
        raise DataError(f"cannot load dataset from {in_dir}: {exc}") from exc
    dag = Dag.from_edges(meta["nodes"], [tuple(e) for e in meta["edges"]])
    reserved = {"task", "cardinality", "nodes", "edges"}
    return EncodedDataset(
        inputs=inputs,
        concepts=SampleTable(concept_nodes, concepts),
        task_node=meta["task"],
        task=task,
        cardinality={k: int(v) for k, v in meta["cardinality"].items()},
        splits=splits,
        dag=dag,
        meta={k: v for k, v in meta.items() if k not in reserved},
    )
