"""Shared concept-based model: bipartite and graph-based instantiations.

A model is a set of named parameter modules (encoder, one per concept, task).
Forward passes evaluate concepts in topological order of the connectivity
relation and support ground-truth interventions that propagate downstream;
backward passes are hand-derived and validated against finite differences.
Architecture adaptation adds concept modules and rewires module inputs while
preserving untouched parameters bitwise (zero-init warm start).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graphs import topological_order
from .nn import DenseNet, flatten, init_weight, loss_ce, softmax_rows_backward, unflatten

KINDS = ("opaq", "cbm", "cem", "cgm", "c2bm")
BIPARTITE_KINDS = ("opaq", "cbm", "cem")
GRAPH_KINDS = ("cgm", "c2bm")
RESERVED_IDS = ("encoder", "task")


class ModelError(ValueError):
    """Architecture invariant violation or invalid model operation."""


@dataclass(frozen=True)
class Architecture:
    """Connectivity and dimensions that module shapes are derived from.

    `parents[j]` and `task_parents` list the concept predictions wired into a
    module's input, ordered by the concept list so input layouts are stable
    as the concept set grows.
    """

    kind: str
    concepts: tuple[str, ...]
    cardinality: dict[str, int]  # concepts and task
    task: str
    parents: dict[str, tuple[str, ...]] = field(default_factory=dict)
    task_parents: tuple[str, ...] = ()
    input_dim: int = 32
    latent_dim: int = 32
    encoder_hidden: int = 64
    head_hidden: int = 32
    embedding_dim: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if len(set(self.concepts)) != len(self.concepts):
            raise ModelError("duplicate concept ids")
        for j in (*self.concepts, self.task):
            if j in RESERVED_IDS:
                raise ModelError(f"node id {j!r} is reserved")
            if self.cardinality.get(j, 0) < 2:
                raise ModelError(f"node {j} needs cardinality >= 2")
        if self.task in self.concepts:
            raise ModelError("task cannot also be a concept")
        if self.kind in BIPARTITE_KINDS:
            if any(self.parents.get(j) for j in self.concepts):
                raise ModelError(f"{self.kind} is bipartite; concept parents must be empty")
            expected = () if self.kind == "opaq" else self.concepts
            if tuple(self.task_parents) != tuple(expected):
                raise ModelError(f"{self.kind} requires task_parents == {expected!r}")
        else:
            for j in self.concepts:
                for p in self.parents.get(j, ()):
                    if p not in self.concepts:
                        raise ModelError(f"parent {p} of {j} is not a known concept")
            for p in self.task_parents:
                if p not in self.concepts:
                    raise ModelError(f"task parent {p} is not a known concept")
            if self.concept_order() is None:
                raise ModelError("concept connectivity contains a cycle")

    def concept_order(self) -> tuple[str, ...] | None:
        edges = {(p, j) for j in self.concepts for p in self.parents.get(j, ())}
        return topological_order(self.concepts, edges)

    def parents_of(self, j: str) -> tuple[str, ...]:
        return self.task_parents if j == "task" else self.parents.get(j, ())

    def card_of(self, j: str) -> int:
        return self.cardinality[self.task if j == "task" else j]


def architecture_from(kind: str, concepts, cardinality: dict[str, int], task: str,
                      dag=None, **dims) -> Architecture:
    """Derive connectivity for a kind: bipartite wiring, or parent sets read
    off `dag` restricted to the known concepts."""
    concepts = tuple(concepts)
    if kind in BIPARTITE_KINDS:
        parents = {j: () for j in concepts}
        task_parents = () if kind == "opaq" else concepts
    else:
        if dag is None:
            parents = {j: () for j in concepts}
            task_parents = ()
        else:
            present = set(dag.nodes)
            known = set(concepts)

            def wired(node):
                if node not in present:
                    return ()
                ps = set(dag.parents(node)) & known
                return tuple(p for p in concepts if p in ps)

            parents = {j: wired(j) for j in concepts}
            task_parents = wired(task)
    return Architecture(kind=kind, concepts=concepts, cardinality=dict(cardinality),
                        task=task, parents=parents, task_parents=task_parents, **dims)


class Module:
    """Named parameter parts: DenseNets plus raw arrays, flattened in sorted
    part order so parameter vectors are position-stable."""

    def __init__(self, parts: dict):
        self.parts = dict(parts)

    def part_names(self) -> list[str]:
        return sorted(self.parts)

    def param_count(self) -> int:
        return sum(
            p.param_count() if isinstance(p, DenseNet) else p.size for p in self.parts.values()
        )

    def flat(self) -> np.ndarray:
        chunks = []
        for name in self.part_names():
            part = self.parts[name]
            chunks.append(flatten(part).values if isinstance(part, DenseNet) else part.ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for name in self.part_names():
            part = self.parts[name]
            size = part.param_count() if isinstance(part, DenseNet) else part.size
            chunk = vec[pos : pos + size]
            if isinstance(part, DenseNet):
                self.parts[name] = unflatten(part, chunk)
            else:
                self.parts[name] = chunk.reshape(part.shape).copy()
            pos += size
        if pos != vec.size:
            raise ModelError("flat parameter length mismatch")

    def flat_grad(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        chunks = []
        for name in self.part_names():
            part = self.parts[name]
            size = part.param_count() if isinstance(part, DenseNet) else part.size
            chunks.append(grads.get(name, np.zeros(size)).ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def copy(self) -> "Module":
        return Module({
            name: part.copy() if isinstance(part, DenseNet) else part.copy()
            for name, part in self.parts.items()
        })


@dataclass
class SharedModel:
    arch: Architecture
    modules: dict[str, Module]

    def copy(self) -> "SharedModel":
        return SharedModel(self.arch, {mid: m.copy() for mid, m in self.modules.items()})

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.modules.values())

    def flat_params(self) -> dict[str, np.ndarray]:
        return {mid: m.flat() for mid, m in self.modules.items()}

    def set_flat_params(self, params: dict[str, np.ndarray]) -> None:
        for mid, vec in params.items():
            self.modules[mid].set_flat(vec)


def _n_embs(card: int) -> list[str]:
    return [f"emb{a:02d}" for a in range(card)]


def _parent_width(arch: Architecture, node: str) -> int:
    return sum(arch.cardinality[p] for p in arch.parents_of(node))


def _build_node_module(arch: Architecture, node: str, rng: np.random.Generator) -> Module:
    """node is a concept id or "task"."""
    k = arch.card_of(node)
    r, latent, hidden = arch.embedding_dim, arch.latent_dim, arch.head_hidden
    kind = arch.kind
    if kind in ("opaq", "cbm"):
        if node == "task" and kind == "cbm":
            width = sum(arch.cardinality[p] for p in arch.task_parents)
            return Module({"head": DenseNet.create([width, hidden, k], ["leaky_relu", "softmax"], rng)})
        return Module({"head": DenseNet.create([latent, hidden, k], ["leaky_relu", "softmax"], rng)})
    if kind == "cem":
        if node == "task":
            width = len(arch.task_parents) * r
            return Module({"head": DenseNet.create([width, hidden, k], ["leaky_relu", "softmax"], rng)})
        parts = {name: DenseNet.create([latent, r], ["leaky_relu"], rng) for name in _n_embs(k)}
        parts["score"] = DenseNet.create([k * r, k], ["softmax"], rng)
        return Module(parts)
    if kind == "cgm":
        width = len(arch.parents_of(node)) * r + latent
        pred = DenseNet.create([width, hidden, k], ["leaky_relu", "softmax"], rng)
        if node == "task":
            return Module({"pred": pred})
        parts = {name: DenseNet.create([latent, r], ["leaky_relu"], rng) for name in _n_embs(k)}
        parts["pred"] = pred
        return Module(parts)
    # c2bm: every node carries an exogenous embedding module; roots get a
    # lightweight head, non-roots a hypernetwork + bias for the parent map
    parts = {name: DenseNet.create([latent, r], ["leaky_relu"], rng) for name in _n_embs(k)}
    parts["score"] = DenseNet.create([k * r, k], ["softmax"], rng)
    p_width = _parent_width(arch, node)
    if p_width == 0:
        parts["head"] = DenseNet.create([r, k], ["softmax"], rng)
    else:
        parts["hyper"] = DenseNet.create([r, arch.head_hidden, k * p_width], ["leaky_relu", "identity"], rng)
        parts["bias"] = np.zeros(k)
    return Module(parts)


def build(arch: Architecture, rng: np.random.Generator) -> SharedModel:
    modules = {
        "encoder": Module({
            "net": DenseNet.create(
                [arch.input_dim, arch.encoder_hidden, arch.latent_dim], ["leaky_relu", "identity"], rng
            )
        })
    }
    for j in arch.concepts:
        modules[j] = _build_node_module(arch, j, rng)
    modules["task"] = _build_node_module(arch, "task", rng)
    return SharedModel(arch, modules)


@dataclass
class ModelOutputs:
    concept_probs: dict[str, np.ndarray]
    task_probs: np.ndarray


def _one_hot(labels: np.ndarray, card: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= card:
        raise ModelError("intervention class index out of range")
    return np.eye(card)[labels]


def _concat(chunks: list[np.ndarray], n: int) -> np.ndarray:
    return np.concatenate(chunks, axis=1) if chunks else np.zeros((n, 0))


def forward_model(
    model: SharedModel,
    X: np.ndarray,
    interventions: dict[str, np.ndarray] | None = None,
) -> tuple[ModelOutputs, dict]:
    """Evaluate all concept modules and the task module.

    `interventions` maps concept id -> per-sample ground-truth class; the
    intervened concept's outgoing representation is replaced by the one-hot
    truth (probability vectors hardened before any mixing), so corrections
    propagate to children, while its own prediction is still reported.
    """
    arch = model.arch
    interventions = interventions or {}
    for j in interventions:
        if j not in arch.concepts:
            raise ModelError(f"intervention on unknown concept {j!r}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    z = model.modules["encoder"].parts["net"].forward(X)
    order = arch.concept_order()
    cache: dict = {"X": X, "z": z, "order": order, "nodes": {}, "intervened": set(interventions)}
    reps: dict[str, np.ndarray] = {}
    probs_out: dict[str, np.ndarray] = {}

    for j in order:
        node_cache = _node_forward(model, j, z, reps, interventions.get(j), cache)
        cache["nodes"][j] = node_cache
        reps[j] = node_cache["rep"]
        probs_out[j] = node_cache["probs"]

    task_cache = _node_forward(model, "task", z, reps, None, cache)
    cache["nodes"]["task"] = task_cache
    return ModelOutputs(probs_out, task_cache["probs"]), cache


def _node_forward(model: SharedModel, node: str, z: np.ndarray, reps: dict,
                  intervention: np.ndarray | None, cache: dict) -> dict:
    arch = model.arch
    kind = arch.kind
    mod = model.modules[node if node != "task" else "task"]
    k = arch.card_of(node)
    n = z.shape[0]
    parents = arch.parents_of(node)
    out: dict = {}

    if kind in ("opaq", "cbm"):
        if node == "task" and kind == "cbm":
            head_in = _concat([reps[p] for p in parents], n)
        else:
            head_in = z
        probs = mod.parts["head"].forward(head_in)
        out.update(head_in=head_in, probs=probs)
    elif kind == "cem":
        if node == "task":
            head_in = _concat([reps[p] for p in parents], n)
            probs = mod.parts["head"].forward(head_in)
            out.update(head_in=head_in, probs=probs)
        else:
            embs = np.stack([mod.parts[name].forward(z) for name in _n_embs(k)], axis=1)  # [n, k, r]
            emb_cat = embs.reshape(n, -1)
            probs = mod.parts["score"].forward(emb_cat)
            out.update(embs=embs, emb_cat=emb_cat, probs=probs)
    elif kind == "cgm":
        pred_in = _concat([reps[p] for p in parents] + [z], n)
        probs = mod.parts["pred"].forward(pred_in)
        out.update(pred_in=pred_in, probs=probs)
        if node != "task":
            embs = np.stack([mod.parts[name].forward(z) for name in _n_embs(k)], axis=1)
            out["embs"] = embs
    else:  # c2bm
        embs = np.stack([mod.parts[name].forward(z) for name in _n_embs(k)], axis=1)
        emb_cat = embs.reshape(n, -1)
        exo_probs = mod.parts["score"].forward(emb_cat)
        u = (exo_probs[:, :, None] * embs).sum(axis=1)  # [n, r]
        out.update(embs=embs, emb_cat=emb_cat, exo_probs=exo_probs, u=u)
        if not parents:
            probs = mod.parts["head"].forward(u)
        else:
            parent_vec = _concat([reps[p] for p in parents], n)
            theta = mod.parts["hyper"].forward(u).reshape(n, k, -1)
            logits = np.einsum("nkw,nw->nk", theta, parent_vec) + mod.parts["bias"]
            probs = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = probs / probs.sum(axis=1, keepdims=True)
            out.update(parent_vec=parent_vec, theta=theta, logits=logits)
        out["probs"] = probs

    if node == "task":
        return out

    out_probs = _one_hot(intervention, k) if intervention is not None else out["probs"]
    out["out_probs"] = out_probs
    if kind in ("cem", "cgm"):
        out["mix"] = (out_probs[:, :, None] * out["embs"]).sum(axis=1)
        out["rep"] = out["mix"]
    else:
        out["rep"] = out_probs
    return out


def _split_columns(grad: np.ndarray, widths: list[int]) -> list[np.ndarray]:
    chunks, pos = [], 0
    for w in widths:
        chunks.append(grad[:, pos : pos + w])
        pos += w
    return chunks


def backward_model(
    model: SharedModel,
    cache: dict,
    d_concept_probs: dict[str, np.ndarray],
    d_task_probs: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Flat per-module gradients of a scalar loss, given upstream gradients on
    the predicted distributions. Requires the cache of the latest forward."""
    arch = model.arch
    kind = arch.kind
    nodes = cache["nodes"]
    n = cache["X"].shape[0]
    dz = np.zeros_like(cache["z"])
    d_rep: dict[str, np.ndarray] = {}  # gradient on each concept's outgoing representation
    grads: dict[str, np.ndarray] = {}

    def add_rep(j: str, g: np.ndarray) -> None:
        d_rep[j] = d_rep.get(j, 0.0) + g

    # task module first: it only consumes representations (and z)
    task_up = d_task_probs if d_task_probs is not None else np.zeros_like(nodes["task"]["probs"])
    tp = arch.task_parents
    tcache = nodes["task"]
    tmod = model.modules["task"]
    part_grads: dict[str, np.ndarray] = {}
    if kind == "opaq":
        g, dx = tmod.parts["head"].backward(tcache["head_in"], task_up)
        part_grads["head"] = g.values
        dz += dx
    elif kind in ("cbm", "cem"):
        g, dx = tmod.parts["head"].backward(tcache["head_in"], task_up)
        part_grads["head"] = g.values
        widths = [arch.cardinality[p] if kind == "cbm" else arch.embedding_dim for p in tp]
        for p, chunk in zip(tp, _split_columns(dx, widths)):
            add_rep(p, chunk)
    elif kind == "cgm":
        g, dx = tmod.parts["pred"].backward(tcache["pred_in"], task_up)
        part_grads["pred"] = g.values
        widths = [arch.embedding_dim] * len(tp) + [arch.latent_dim]
        chunks = _split_columns(dx, widths)
        for p, chunk in zip(tp, chunks[:-1]):
            add_rep(p, chunk)
        dz += chunks[-1]
    else:  # c2bm
        du, parent_chunks, mech_grads = _c2bm_mechanism_backward(arch, tmod, tcache, task_up, tp)
        part_grads.update(mech_grads)
        for p, chunk in parent_chunks:
            add_rep(p, chunk)
        dz += _c2bm_exo_backward(tmod, tcache, cache["z"], du, part_grads)
    grads["task"] = tmod.flat_grad(part_grads)

    # concepts in reverse topological order
    for j in reversed(cache["order"]):
        jc = nodes[j]
        jmod = model.modules[j]
        k = arch.card_of(j)
        part_grads = {}
        d_probs = np.zeros_like(jc["probs"])
        if j in d_concept_probs:
            d_probs = d_probs + d_concept_probs[j]
        intervened = j in cache["intervened"]
        d_out = d_rep.pop(j, None)

        if kind in ("cem", "cgm"):
            # children/task consumed the mixture; unpack into embeddings and
            # (if not intervened) the mixing weights
            d_embs = np.zeros_like(jc["embs"])
            if d_out is not None:
                d_embs += jc["out_probs"][:, :, None] * d_out[:, None, :]
                if not intervened:
                    d_probs = d_probs + np.einsum("nr,nkr->nk", d_out, jc["embs"])
        elif d_out is not None and not intervened:
            d_probs = d_probs + d_out  # probability-vector representation

        if kind in ("opaq", "cbm"):
            g, dx = jmod.parts["head"].backward(jc["head_in"], d_probs)
            part_grads["head"] = g.values
            dz += dx
        elif kind == "cem":
            g, d_emb_cat = jmod.parts["score"].backward(jc["emb_cat"], d_probs)
            part_grads["score"] = g.values
            d_embs += d_emb_cat.reshape(d_embs.shape)
            dz += _embs_backward(jmod, k, cache["z"], d_embs, part_grads)
        elif kind == "cgm":
            g, dx = jmod.parts["pred"].backward(jc["pred_in"], d_probs)
            part_grads["pred"] = g.values
            widths = [arch.embedding_dim] * len(arch.parents_of(j)) + [arch.latent_dim]
            chunks = _split_columns(dx, widths)
            for p, chunk in zip(arch.parents_of(j), chunks[:-1]):
                add_rep(p, chunk)
            dz += chunks[-1]
            dz += _embs_backward(jmod, k, cache["z"], d_embs, part_grads)
        else:  # c2bm
            du, parent_chunks, mech_grads = _c2bm_mechanism_backward(
                arch, jmod, jc, d_probs, arch.parents_of(j)
            )
            part_grads.update(mech_grads)
            for p, chunk in parent_chunks:
                add_rep(p, chunk)
            dz += _c2bm_exo_backward(jmod, jc, cache["z"], du, part_grads)
        grads[j] = jmod.flat_grad(part_grads)

    g, _ = model.modules["encoder"].parts["net"].backward(cache["X"], dz)
    grads["encoder"] = model.modules["encoder"].flat_grad({"net": g.values})
    return grads


def _embs_backward(mod: Module, card: int, z: np.ndarray, d_embs: np.ndarray,
                   part_grads: dict[str, np.ndarray]) -> np.ndarray:
    dz = np.zeros_like(z)
    for a, name in enumerate(_n_embs(card)):
        g, dx = mod.parts[name].backward(z, d_embs[:, a, :])
        part_grads[name] = g.values
        dz += dx
    return dz


def _c2bm_mechanism_backward(arch: Architecture, mod: Module, node_cache: dict,
                             d_probs: np.ndarray, parents: tuple[str, ...]):
    """Backward through head(u) or softmax(theta(u) . parent_vec + bias)."""
    mech_grads: dict[str, np.ndarray] = {}
    parent_chunks: list[tuple[str, np.ndarray]] = []
    if not parents:
        g, du = mod.parts["head"].backward(node_cache["u"], d_probs)
        mech_grads["head"] = g.values
        return du, parent_chunks, mech_grads
    probs = node_cache["probs"]
    d_logits = softmax_rows_backward(probs, d_probs)
    mech_grads["bias"] = d_logits.sum(axis=0)
    d_theta = np.einsum("nk,nw->nkw", d_logits, node_cache["parent_vec"])
    n = probs.shape[0]
    g, du = mod.parts["hyper"].backward(node_cache["u"], d_theta.reshape(n, -1))
    mech_grads["hyper"] = g.values
    d_parent_vec = np.einsum("nkw,nk->nw", node_cache["theta"], d_logits)
    widths = [arch.cardinality[p] for p in parents]
    for p, chunk in zip(parents, _split_columns(d_parent_vec, widths)):
        parent_chunks.append((p, chunk))
    return du, parent_chunks, mech_grads


def _c2bm_exo_backward(mod: Module, node_cache: dict, z: np.ndarray,
                       du: np.ndarray, part_grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backward through u = sum_a q_a emb_a with q = score(concat embs)."""
    embs, q = node_cache["embs"], node_cache["exo_probs"]
    d_embs = q[:, :, None] * du[:, None, :]
    dq = np.einsum("nr,nkr->nk", du, embs)
    g, d_emb_cat = mod.parts["score"].backward(node_cache["emb_cat"], dq)
    part_grads["score"] = g.values
    d_embs = d_embs + d_emb_cat.reshape(d_embs.shape)
    return _embs_backward(mod, embs.shape[1], z, d_embs, part_grads)


def model_loss(
    outputs: ModelOutputs,
    concept_labels: dict[str, np.ndarray],
    task_labels: np.ndarray | None,
    gamma: float,
    supervised: tuple[str, ...],
    task_supervised: bool,
) -> tuple[float, dict[str, np.ndarray], np.ndarray | None]:
    """Concept/task cross-entropy blend with upstream gradients.

    loss = gamma * sum_j CE(c_hat_j, c_j) over supervised concepts
         + (1 - gamma) * CE(y_hat, y) when the task is supervised.
    Rows whose label is the missing marker are skipped inside each CE term.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ModelError("gamma must lie in [0, 1]")
    total = 0.0
    d_probs: dict[str, np.ndarray] = {}
    for j in supervised:
        loss_j, grad_j = loss_ce(outputs.concept_probs[j], concept_labels[j])
        total += gamma * loss_j
        d_probs[j] = gamma * grad_j
    d_task = None
    if task_supervised:
        if task_labels is None:
            raise ModelError("task supervision requested without task labels")
        loss_t, grad_t = loss_ce(outputs.task_probs, task_labels)
        total += (1.0 - gamma) * loss_t
        d_task = (1.0 - gamma) * grad_t
    return total, d_probs, d_task


# ---------------------------------------------------------------------------
# architecture adaptation


def _input_segments(arch: Architecture, node: str) -> list[tuple[str, int]]:
    """Column layout of a module's concept-consuming input layer."""
    kind = arch.kind
    parents = arch.parents_of(node)
    if kind == "cbm" and node == "task":
        return [(p, arch.cardinality[p]) for p in parents]
    if kind == "cem" and node == "task":
        return [(p, arch.embedding_dim) for p in parents]
    if kind == "cgm":
        return [(p, arch.embedding_dim) for p in parents] + [("__z__", arch.latent_dim)]
    if kind == "c2bm":
        return [(p, arch.cardinality[p]) for p in parents]
    return []


def _widen_first_layer(net: DenseNet, old_segs: list[tuple[str, int]],
                       new_segs: list[tuple[str, int]]) -> DenseNet:
    """Rebuild the input layer for a new column layout: surviving segments
    keep their weights, new segments start at zero."""
    old_off: dict[str, tuple[int, int]] = {}
    pos = 0
    for name, width in old_segs:
        old_off[name] = (pos, width)
        pos += width
    new_width = sum(w for _, w in new_segs)
    w0 = np.zeros((net.weights[0].shape[0], new_width))
    pos = 0
    for name, width in new_segs:
        if name in old_off:
            start, old_w = old_off[name]
            assert old_w == width
            w0[:, pos : pos + width] = net.weights[0][:, start : start + width]
        pos += width
    out = net.copy()
    out.weights[0] = w0
    return out


def _remap_hyper(net: DenseNet, card: int,
                 old_segs: list[tuple[str, int]], new_segs: list[tuple[str, int]]) -> DenseNet:
    """Rebuild the hypernetwork output layer: it emits one coefficient per
    (class, parent column), laid out row-major class-by-parent-column."""
    old_width = sum(w for _, w in old_segs)
    new_width = sum(w for _, w in new_segs)
    old_off: dict[str, int] = {}
    pos = 0
    for name, width in old_segs:
        old_off[name] = pos
        pos += width
    w_last = np.zeros((card * new_width, net.weights[-1].shape[1]))
    b_last = np.zeros(card * new_width)
    pos = 0
    for name, width in new_segs:
        if name in old_off:
            for a in range(card):
                src = a * old_width + old_off[name]
                dst = a * new_width + pos
                w_last[dst : dst + width] = net.weights[-1][src : src + width]
                b_last[dst : dst + width] = net.biases[-1][src : src + width]
        pos += width
    out = net.copy()
    out.weights[-1] = w_last
    out.biases[-1] = b_last
    return out


def _rewire_node(arch_old: Architecture, arch_new: Architecture, node: str,
                 module: Module, rng: np.random.Generator) -> Module:
    """Adapt one module to a changed parent set, preserving what survives.

    Graph kinds only. A node switching between root and non-root under the
    structural kind changes mechanism: the old mechanism parts are dropped and
    the new ones initialized (parent weights zeroed), while the exogenous
    parts are preserved bitwise.
    """
    kind = arch_new.kind
    old_parents = arch_old.parents_of(node)
    new_parents = arch_new.parents_of(node)
    if old_parents == new_parents:
        return module.copy()
    out = module.copy()
    if kind == "cgm":
        out.parts["pred"] = _widen_first_layer(
            out.parts["pred"], _input_segments(arch_old, node), _input_segments(arch_new, node)
        )
        return out
    # c2bm
    card = arch_new.card_of(node)
    if new_parents and not old_parents:
        out.parts.pop("head", None)
        hyper = DenseNet.create(
            [arch_new.embedding_dim, arch_new.head_hidden, card * _parent_width(arch_new, node)],
            ["leaky_relu", "identity"], rng,
        )
        hyper.weights[-1][:] = 0.0
        hyper.biases[-1][:] = 0.0
        out.parts["hyper"] = hyper
        out.parts["bias"] = np.zeros(card)
    elif old_parents and not new_parents:
        out.parts.pop("hyper", None)
        out.parts.pop("bias", None)
        out.parts["head"] = DenseNet.create([arch_new.embedding_dim, card], ["softmax"], rng)
    else:
        out.parts["hyper"] = _remap_hyper(
            out.parts["hyper"], card,
            _input_segments(arch_old, node), _input_segments(arch_new, node),
        )
    return out


def adapt_add_concept(
    model: SharedModel,
    concept_id: str,
    card: int,
    parents: dict[str, tuple[str, ...]],
    task_parents: tuple[str, ...],
    rng: np.random.Generator,
) -> SharedModel:
    """Append a concept: build its module fresh and widen any module whose
    input set gained the newcomer; everything else is preserved bitwise.

    `parents` / `task_parents` give the full updated connectivity; existing
    modules may differ from the old wiring only by gaining `concept_id`.
    """
    arch = model.arch
    if concept_id in arch.concepts:
        raise ModelError(f"concept {concept_id!r} already present")
    new_concepts = arch.concepts + (concept_id,)
    new_cards = dict(arch.cardinality, **{concept_id: card})
    if arch.kind in BIPARTITE_KINDS:
        parents = {j: () for j in new_concepts}
        task_parents = () if arch.kind == "opaq" else new_concepts
    new_arch = replace(arch, concepts=new_concepts, cardinality=new_cards,
                       parents=dict(parents), task_parents=tuple(task_parents))
    for j in arch.concepts:
        old_b, new_b = set(arch.parents_of(j)), set(new_arch.parents_of(j))
        if not (old_b <= new_b and new_b <= old_b | {concept_id}):
            raise ModelError(f"module {j}: edge changes beyond the new concept; use adapt_update_edges")
    modules: dict[str, Module] = {}
    for mid, mod in model.modules.items():
        if mid == "encoder":
            modules[mid] = mod.copy()
        else:
            modules[mid] = _grow_node(arch, new_arch, mid, mod, rng)
    modules[concept_id] = _build_node_module(new_arch, concept_id, rng)
    return SharedModel(new_arch, modules)


def _grow_node(arch_old: Architecture, arch_new: Architecture, node: str,
               module: Module, rng: np.random.Generator) -> Module:
    old_parents = arch_old.parents_of(node)
    new_parents = arch_new.parents_of(node)
    if old_parents == new_parents:
        return module.copy()
    kind = arch_new.kind
    out = module.copy()
    if kind in ("cbm", "cem"):
        out.parts["head"] = _widen_first_layer(
            out.parts["head"], _input_segments(arch_old, node), _input_segments(arch_new, node)
        )
        return out
    return _rewire_node(arch_old, arch_new, node, module, rng)


def adapt_update_edges(
    model: SharedModel,
    parents: dict[str, tuple[str, ...]],
    task_parents: tuple[str, ...],
    rng: np.random.Generator,
) -> SharedModel:
    """Rewire module inputs to a new connectivity.

    Added inputs start with zero weights, removed inputs drop their columns;
    bipartite kinds return an unchanged copy (their wiring is fixed by kind).
    """
    arch = model.arch
    if arch.kind in BIPARTITE_KINDS:
        return model.copy()
    new_arch = replace(arch, parents=dict(parents), task_parents=tuple(task_parents))
    modules: dict[str, Module] = {"encoder": model.modules["encoder"].copy()}
    for j in arch.concepts:
        modules[j] = _rewire_node(arch, new_arch, j, model.modules[j], rng)
    modules["task"] = _rewire_node(arch, new_arch, "task", model.modules["task"], rng)
    return SharedModel(new_arch, modules)


def adapt(model: SharedModel, new_concepts: list[tuple[str, int]],
          parents: dict[str, tuple[str, ...]], task_parents: tuple[str, ...],
          rng: np.random.Generator) -> SharedModel:
    """Apply a round's structural update against a target connectivity:
    append new concepts one by one, then rewire any remaining edge changes."""
    current = model
    for concept_id, card in new_concepts:
        if current.arch.kind in GRAPH_KINDS:
            grown = {j: current.arch.parents_of(j) for j in current.arch.concepts}
            for j in current.arch.concepts:
                if concept_id in parents.get(j, ()) and concept_id not in grown[j]:
                    grown[j] = grown[j] + (concept_id,)
            grown[concept_id] = tuple(
                p for p in parents.get(concept_id, ()) if p in current.arch.concepts
            )
            task_grown = current.arch.task_parents
            if concept_id in task_parents and concept_id not in task_grown:
                task_grown = task_grown + (concept_id,)
            current = adapt_add_concept(current, concept_id, card, grown, task_grown, rng)
        else:
            current = adapt_add_concept(current, concept_id, card, {}, (), rng)
    if current.arch.kind in GRAPH_KINDS:
        full_parents = {j: tuple(parents.get(j, ())) for j in current.arch.concepts}
        if full_parents != dict(current.arch.parents) or tuple(task_parents) != current.arch.task_parents:
            current = adapt_update_edges(current, full_parents, tuple(task_parents), rng)
    return current


def fraction_params_changed(before: SharedModel, after: SharedModel) -> float:
    """Share of `after` parameters that are new or hold a different value.

    Comparison is per layer: layers whose shape changed count entirely as
    changed (column-level tracking through rewires is deliberately not
    attempted).
    """
    total = after.param_count()
    if total == 0:
        return 0.0
    changed = 0
    for mid, mod in after.modules.items():
        if mid not in before.modules:
            changed += mod.param_count()
            continue
        bmod = before.modules[mid]
        for name, part in mod.parts.items():
            if name not in bmod.parts:
                changed += part.param_count() if isinstance(part, DenseNet) else part.size
                continue
            bpart = bmod.parts[name]
            if isinstance(part, DenseNet):
                for arrays in (zip(part.weights, bpart.weights), zip(part.biases, bpart.biases)):
                    for a, b in arrays:
                        changed += int(np.sum(a != b)) if a.shape == b.shape else a.size
                extra = len(part.weights) - len(bpart.weights)
                if extra > 0:
                    for lw, lb in zip(part.weights[-extra:], part.biases[-extra:]):
                        changed += lw.size + lb.size
            else:
                changed += int(np.sum(part != bpart)) if part.shape == bpart.shape else part.size
    return changed / total


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: SharedModel, out_dir: str | Path) -> None:
    """arch.json plus one flat parameter file per module id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arch = model.arch
    (out / "arch.json").write_text(json.dumps({
        "kind": arch.kind,
        "concepts": list(arch.concepts),
        "cardinality": arch.cardinality,
        "task": arch.task,
        "parents": {j: list(v) for j, v in arch.parents.items()},
        "task_parents": list(arch.task_parents),
        "input_dim": arch.input_dim,
        "latent_dim": arch.latent_dim,
        "encoder_hidden": arch.encoder_hidden,
        "head_hidden": arch.head_hidden,
        "embedding_dim": arch.embedding_dim,
    }, indent=1) + "\n")
    for mid, mod in model.modules.items():
        np.save(out / f"{mid}.npy", mod.flat())


def load_model(in_dir: str | Path) -> SharedModel:
    src = Path(in_dir)
    raw = json.loads((src / "arch.json").read_text())
    arch = Architecture(
        kind=raw["kind"],
        concepts=tuple(raw["concepts"]),
        cardinality={k: int(v) for k, v in raw["cardinality"].items()},
        task=raw["task"],
        parents={j: tuple(v) for j, v in raw["parents"].items()},
        task_parents=tuple(raw["task_parents"]),
        input_dim=raw["input_dim"],
        latent_dim=raw["latent_dim"],
        encoder_hidden=raw["encoder_hidden"],
        head_hidden=raw["head_hidden"],
        embedding_dim=raw["embedding_dim"],
    )
    model = build(arch, np.random.default_rng(0))
    for mid in model.modules:
        model.modules[mid].set_flat(np.load(src / f"{mid}.npy"))
    return model
