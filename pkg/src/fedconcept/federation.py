"""Server round loop: sampling, structure aggregation, adaptation, module-wise
training and aggregation, under several training regimes.

Regimes:
  fcm               -- structure aggregation + architecture adaptation each round
  static_fed        -- identical to fcm in round 1, then the concept space and
                       architecture stay frozen
  static_fed_reinit -- fcm, but all parameters are reinitialized when the late
                       cohort enters the pool
  centralized       -- the same loop run with a single client holding all
                       training rows and full annotations
  localized         -- one independent single-client run per client
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import graphs, models
from .bayes import EncodedDataset
from .config import RunConfig, derive_rng
from .nn import MISSING, AdamState, adam_step, clip_and_noise
from .partition import ClientShard, ClientSpec, make_federation


class ProtocolError(RuntimeError):
    """Federation contract violation (CLI exit code 3)."""


@dataclass
class Schedule:
    rounds: int
    participants: int
    join_round: int  # late cohort enters the pool at this round; 0 disables
    local_epochs: int
    patience: int
    regime: str


@dataclass
class ModuleUpdate:
    client_id: int
    params: dict[str, np.ndarray]  # post-training values, trained modules only
    n: int
    trained: tuple[str, ...]


@dataclass
class FederationState:
    round: int
    model: models.SharedModel
    dag: graphs.Dag | None
    proposals: dict[int, tuple[graphs.EdgeConfidence, int]] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    prejoin: models.SharedModel | None = None
    postadapt: models.SharedModel | None = None
    best_loss: float = np.inf
    best_params: dict[str, np.ndarray] | None = None
    best_arch: models.Architecture | None = None
    best_round: int = 0
    stale_rounds: int = 0


def sample_clients(pool: list[ClientShard], k: int, rng: np.random.Generator) -> list[ClientShard]:
    """Uniform sample without replacement of min(k, |pool|) clients."""
    if not pool:
        raise ProtocolError("empty client pool")
    k = min(k, len(pool))
    picked = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in np.sort(picked)]


def trained_module_ids(arch: models.Architecture, supervised: tuple[str, ...], has_task: bool) -> tuple[str, ...]:
    mods = ["encoder"] + [j for j in arch.concepts if j in set(supervised)]
    if has_task:
        mods.append("task")
    return tuple(mods)


def local_update(
    shard: ClientShard,
    model: models.SharedModel,
    epochs: int,
    gamma: float,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> ModuleUpdate:
    """Train a broadcast copy on the client's shard and return the post-training
    parameters of exactly the modules the client supervises (plus encoder).

    Unsupervised concept modules and, when the client lacks task labels, the
    task module are frozen. Each supervised concept is intervened with its
    ground-truth labels with probability `cfg.train_intervention_p` per batch.
    With DP enabled, per-sample gradients over the trained modules are clipped
    and noised jointly before the optimizer step.
    """
    arch = model.arch
    missing_arch = [j for j in shard.spec.supervised if j not in arch.concepts]
    if missing_arch:
        raise ProtocolError(
            f"client {shard.spec.id} supervises {missing_arch} but the architecture lacks them"
        )
    model = model.copy()
    supervised = shard.spec.supervised
    has_task = shard.spec.has_task
    trained = trained_module_ids(arch, supervised, has_task)
    params = model.flat_params()
    opt = {mid: AdamState.create(params[mid].size, cfg.lr) for mid in trained}
    n = shard.n
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            bx = shard.inputs[idx]
            blabels = {j: shard.concept_column(j)[idx] for j in supervised}
            btask = shard.task[idx]
            intervened = {
                j: blabels[j] for j in supervised if rng.random() < cfg.train_intervention_p
            }
            if cfg.dp.enabled:
                per_sample = []
                for i in range(len(idx)):
                    out, cache = models.forward_model(
                        model, bx[i : i + 1], {j: v[i : i + 1] for j, v in intervened.items()}
                    )
                    _, d_probs, d_task = models.model_loss(
                        out, {j: v[i : i + 1] for j, v in blabels.items()},
                        btask[i : i + 1], gamma, supervised, has_task,
                    )
                    g = models.backward_model(model, cache, d_probs, d_task)
                    per_sample.append(np.concatenate([g[mid] for mid in trained]))
                noised = clip_and_noise(per_sample, cfg.dp.clip, cfg.dp.sigma, rng)
                grads, pos = {}, 0
                for mid in trained:
                    grads[mid] = noised[pos : pos + params[mid].size]
                    pos += params[mid].size
            else:
                out, cache = models.forward_model(model, bx, intervened)
                _, d_probs, d_task = models.model_loss(
                    out, blabels, btask, gamma, supervised, has_task
                )
                grads = models.backward_model(model, cache, d_probs, d_task)
            for mid in trained:
                params[mid] = adam_step(opt[mid], params[mid], grads[mid])
            model.set_flat_params({mid: params[mid] for mid in trained})
    return ModuleUpdate(shard.spec.id, {mid: params[mid] for mid in trained}, n, trained)


def module_wise_aggregate(
    updates: list[ModuleUpdate], broadcast: models.SharedModel
) -> models.SharedModel:
    """Per-module weighted average over exactly the clients that trained it,
    beta_k = n_k / sum n; untouched modules keep the broadcast values."""
    result = broadcast.copy()
    merged: dict[str, np.ndarray] = {}
    for mid, base in result.flat_params().items():
        contrib = [u for u in updates if mid in u.params]
        if not contrib:
            continue
        for u in contrib:
            if u.params[mid].shape != base.shape:
                raise ProtocolError(f"update for module {mid} has mismatched shape")
        ns = np.array([u.n for u in contrib], dtype=np.float64)
        betas = ns / ns.sum()
        merged[mid] = sum(b * u.params[mid] for b, u in zip(betas, contrib))
    result.set_flat_params(merged)
    return result


def _gt_order(dataset: EncodedDataset, nodes) -> list[str]:
    index = {n: i for i, n in enumerate(dataset.dag.nodes)}
    return sorted(nodes, key=lambda n: index[n])


def _target_connectivity(arch_kind: str, concepts: tuple[str, ...], dag: graphs.Dag | None, task: str):
    if arch_kind == "opaq":
        return {j: () for j in concepts}, ()
    if arch_kind in ("cbm", "cem"):
        return {j: () for j in concepts}, tuple(concepts)
    if dag is None:
        return {j: () for j in concepts}, ()
    known = set(concepts)
    present = set(dag.nodes)

    def wired(node):
        if node not in present:
            return ()
        ps = set(dag.parents(node)) & known
        return tuple(p for p in concepts if p in ps)

    return {j: wired(j) for j in concepts}, wired(task)


def run_round(
    state: FederationState,
    shards: list[ClientShard],
    schedule: Schedule,
    cfg: RunConfig,
    dataset: EncodedDataset,
) -> FederationState:
    """One communication round: sample, aggregate structure, adapt, train,
    aggregate modules, log metrics."""
    t = state.round + 1
    seed = cfg.seed
    regime = schedule.regime
    join_active = schedule.join_round > 0 and any(s.spec.cohort == "late" for s in shards)
    pool = [
        s for s in shards
        if s.spec.cohort == "initial" or (join_active and t >= schedule.join_round)
    ]
    participants = sample_clients(pool, schedule.participants, derive_rng(seed, "sample", t))

    if join_active and t == schedule.join_round:
        state.prejoin = state.model.copy()

    adapt_structure = regime in ("fcm", "static_fed_reinit") or t == 1
    arch = state.model.arch
    if adapt_structure:
        # collect supervised sets and structure proposals
        new_ids: list[str] = []
        known = set(arch.concepts)
        for s in participants:
            for node in s.spec.supervised:
                if node not in known:
                    known.add(node)
                    new_ids.append(node)
        new_ids = _gt_order(dataset, new_ids)
        if arch.kind in models.GRAPH_KINDS:
            for s in participants:
                state.proposals[s.spec.id] = (graphs.from_adjacency(s.spec.subgraph), s.n)
            if cfg.graph.memory == "round_only":
                cache = {s.spec.id: state.proposals[s.spec.id] for s in participants}
            else:
                cache = state.proposals
            confs = [c for c, _ in cache.values()]
            weights = [n for _, n in cache.values()]
            total = float(sum(weights))
            state.dag = graphs.aggregate(
                confs, [w / total for w in weights], derive_rng(seed, "graph", t)
            )
        concepts_after = arch.concepts + tuple(new_ids)
        parents, task_parents = _target_connectivity(arch.kind, concepts_after, state.dag, arch.task)
        new_list = [(j, dataset.cardinality[j]) for j in new_ids]
        adapted = models.adapt(state.model, new_list, parents, task_parents, derive_rng(seed, "adapt", t))
        if regime == "static_fed_reinit" and join_active and t == schedule.join_round:
            adapted = models.build(adapted.arch, derive_rng(seed, "reinit", t))
        state.model = adapted
    if join_active and t == schedule.join_round:
        state.postadapt = state.model.copy()

    arch = state.model.arch
    updates = []
    for s in participants:
        shard = s
        if regime == "static_fed" and t > 1:
            shard = s.restricted(set(arch.concepts))
        updates.append(
            local_update(shard, state.model, schedule.local_epochs, cfg.gamma, cfg,
                         derive_rng(seed, "train", t, s.spec.id))
        )
    state.model = module_wise_aggregate(updates, state.model)
    state.round = t
    return state


def evaluate_split(model: models.SharedModel, dataset: EncodedDataset, split: str) -> dict:
    """Validation/test metrics with random-guess filling for unpredicted
    concepts (see evaluate.accuracy_with_random_fill)."""
    from .evaluate import accuracy_with_random_fill, coverage_report
    from .nn import loss_ce

    rows = dataset.rows(split)
    X = dataset.inputs[rows]
    outputs, _ = models.forward_model(model, X)
    task_labels = dataset.task[rows]
    loss, _ = loss_ce(outputs.task_probs, task_labels)
    task_acc = float((outputs.task_probs.argmax(axis=1) == task_labels).mean())
    concept_labels = {j: dataset.concepts.column(j)[rows] for j in dataset.concept_nodes}
    per_var = accuracy_with_random_fill(
        {j: outputs.concept_probs.get(j) for j in dataset.concept_nodes},
        concept_labels,
        {j: dataset.cardinality[j] for j in dataset.concept_nodes},
    )
    cov = coverage_report(set(model.arch.concepts), dataset.dag, dataset.task_node)
    return {
        "task_loss": loss,
        "task_acc": task_acc,
        "concept_acc": float(np.mean(list(per_var.values()))),
        "coverage": cov.coverage,
    }


def _metrics_row(state: FederationState, cfg: RunConfig, val: dict) -> dict:
    frac = 0.0
    if state.prejoin is not None:
        frac = models.fraction_params_changed(state.prejoin, state.model)
    return {
        "round": state.round,
        "regime": cfg.regime,
        "model_kind": cfg.model_kind,
        "seed": cfg.seed,
        "val_task_loss": val["task_loss"],
        "val_task_acc": val["task_acc"],
        "mean_concept_acc": val["concept_acc"],
        "coverage": val["coverage"],
        "n_params": state.model.param_count(),
        "frac_params_changed": frac,
    }


@dataclass
class RunResult:
    metrics: list[dict]
    model: models.SharedModel
    state: FederationState | None
    final: dict
    wall_clock_s: float
    per_client: list[dict] = field(default_factory=list)


def _initial_model(cfg: RunConfig, dataset: EncodedDataset) -> models.SharedModel:
    arch = models.architecture_from(
        cfg.model_kind, (), dataset.cardinality, dataset.task_node, dag=None,
        input_dim=dataset.inputs.shape[1], latent_dim=32, encoder_hidden=64,
        head_hidden=cfg.hidden_dim, embedding_dim=cfg.embedding_dim,
    )
    return models.build(arch, derive_rng(cfg.seed, "init"))


def run_federated(
    cfg: RunConfig,
    dataset: EncodedDataset,
    shards: list[ClientShard],
    schedule: Schedule,
) -> RunResult:
    """Round loop with early stopping on validation task loss.

    Best-model tracking and stopping are armed only once the late cohort (if
    any) has joined, so a fast pre-join plateau can neither skip adaptation
    nor restore a pre-adaptation architecture; the best post-arming model by
    validation loss is restored at the end.
    """
    start = time.perf_counter()
    state = FederationState(round=0, model=_initial_model(cfg, dataset), dag=None)
    join_active = schedule.join_round > 0 and any(s.spec.cohort == "late" for s in shards)
    arming_round = schedule.join_round if join_active else 1
    for _ in range(schedule.rounds):
        state = run_round(state, shards, schedule, cfg, dataset)
        val = evaluate_split(state.model, dataset, "val")
        state.metrics.append(_metrics_row(state, cfg, val))
        if state.round < arming_round:
            continue
        if val["task_loss"] < state.best_loss - 1e-12:
            state.best_loss = val["task_loss"]
            state.best_params = state.model.flat_params()
            state.best_arch = state.model.arch
            state.best_round = state.round
            state.stale_rounds = 0
        else:
            state.stale_rounds += 1
        if state.round > arming_round and state.stale_rounds >= schedule.patience:
            break
    if state.best_params is not None and state.best_arch is state.model.arch:
        state.model.set_flat_params(state.best_params)
    elif state.best_params is not None:
        restored = models.build(state.best_arch, derive_rng(cfg.seed, "restore"))
        restored.set_flat_params(state.best_params)
        state.model = restored
    test = evaluate_split(state.model, dataset, "test")
    final = {
        "regime": cfg.regime,
        "model_kind": cfg.model_kind,
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "test_task_acc": test["task_acc"],
        "test_concept_acc": test["concept_acc"],
        "coverage": test["coverage"],
        "rounds_run": state.round,
        "best_round": state.best_round,
        "best_val_task_loss": state.best_loss,
        "frac_params_adapted": (
            models.fraction_params_changed(state.prejoin, state.postadapt)
            if state.prejoin is not None and state.postadapt is not None
            else 0.0
        ),
        "frac_params_changed": (
            models.fraction_params_changed(state.prejoin, state.model)
            if state.prejoin is not None
            else 0.0
        ),
    }
    return RunResult(state.metrics, state.model, state, final, time.perf_counter() - start)


def _full_shard(dataset: EncodedDataset) -> ClientShard:
    """Single client holding every training row with complete annotations."""
    rows = dataset.rows("train")
    spec = ClientSpec(
        id=0,
        subgraph=dataset.dag,
        supervised=dataset.concept_nodes,
        has_task=True,
        cohort="initial",
        row_indices=rows,
    )
    return ClientShard(
        dataset.inputs[rows], dataset.concept_nodes,
        dataset.concepts.values[rows].copy(), dataset.task[rows].copy(), spec,
    )


def run_regime(cfg: RunConfig, dataset: EncodedDataset, shards: list[ClientShard] | None) -> RunResult:
    """Dispatch a full training run for the configured regime."""
    if cfg.regime == "centralized":
        schedule = Schedule(cfg.rounds, 1, 0, cfg.local_epochs, cfg.patience, "fcm")
        sub = RunConfig(**{**cfg.to_dict(), "regime": "fcm", "dp": cfg.dp, "graph": cfg.graph})
        result = run_federated(sub, dataset, [_full_shard(dataset)], schedule)
        for row in result.metrics:
            row["regime"] = "centralized"
        result.final["regime"] = "centralized"
        return result
    if shards is None:
        raise ProtocolError(f"regime {cfg.regime} requires a client partition")
    if cfg.regime == "localized":
        return _run_localized(cfg, dataset, shards)
    if cfg.regime in ("fcm", "static_fed", "static_fed_reinit"):
        schedule = Schedule(
            cfg.rounds, cfg.participants_per_round, cfg.join_round,
            cfg.local_epochs, cfg.patience, cfg.regime,
        )
        return run_federated(cfg, dataset, shards, schedule)
    raise ProtocolError(f"unknown regime {cfg.regime!r}")


def _run_localized(cfg: RunConfig, dataset: EncodedDataset, shards: list[ClientShard]) -> RunResult:
    """Independent per-client training; metrics are averaged over clients."""
    start = time.perf_counter()
    rows, finals = [], []
    last_model = None
    for shard in shards:
        sub_cfg = RunConfig(**{**cfg.to_dict(), "regime": "fcm", "seed": cfg.seed,
                               "dp": cfg.dp, "graph": cfg.graph})
        schedule = Schedule(cfg.rounds, 1, 0, cfg.local_epochs, cfg.patience, "fcm")
        solo = ClientShard(shard.inputs, shard.concept_nodes, shard.concepts, shard.task,
                           ClientSpec(0, shard.spec.subgraph, shard.spec.supervised,
                                      shard.spec.has_task, "initial", shard.spec.row_indices))
        result = run_federated(sub_cfg, dataset, [solo], schedule)
        final = dict(result.final, regime="localized", client=shard.spec.id)
        finals.append(final)
        best_row = next(
            (r for r in result.metrics if r["round"] == result.final["best_round"]),
            result.metrics[-1],
        )
        rows.append({
            "round": shard.spec.id,
            "regime": "localized",
            "model_kind": cfg.model_kind,
            "seed": cfg.seed,
            "val_task_loss": result.final["best_val_task_loss"],
            "val_task_acc": best_row["val_task_acc"],
            "mean_concept_acc": best_row["mean_concept_acc"],
            "coverage": result.final["coverage"],
            "n_params": result.model.param_count(),
            "frac_params_changed": 0.0,
        })
        last_model = result.model
    agg = {
        "regime": "localized",
        "model_kind": cfg.model_kind,
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "test_task_acc": float(np.mean([f["test_task_acc"] for f in finals])),
        "test_concept_acc": float(np.mean([f["test_concept_acc"] for f in finals])),
        "coverage": float(np.mean([f["coverage"] for f in finals])),
        "rounds_run": int(np.sum([f["rounds_run"] for f in finals])),
        "best_round": 0,
        "best_val_task_loss": float(np.mean([f["best_val_task_loss"] for f in finals])),
        "frac_params_adapted": 0.0,
        "frac_params_changed": 0.0,
    }
    return RunResult(rows, last_model, None, agg, time.perf_counter() - start, per_client=finals)


def build_shards(cfg: RunConfig, dataset: EncodedDataset) -> list[ClientShard]:
    """Seeded federation construction from the run config."""
    return make_federation(
        dataset, dataset.dag, dataset.task_node,
        n_clients=cfg.n_clients,
        task_drop_rate=cfg.task_drop_rate,
        perturb_clients=cfg.graph.perturb_rate,
        edge_fraction=cfg.graph.perturb_p,
        rng=derive_rng(cfg.seed, "partition"),
        extra_nodes=cfg.extra_anchor_nodes,
        late_frac=cfg.late_client_frac,
        late_concept_frac=cfg.late_concept_frac,
    )
