"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bayes, evaluate, federation, graphs, models, partition
from .config import ConfigError, load_config, save_config

USAGE_EXIT, DATA_EXIT, PROTOCOL_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedconcept", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="sample a reference network and synthesize inputs")
    p.add_argument("network", choices=bayes.NETWORK_NAMES)
    p.add_argument("--n", type=int, default=0, help="sample count (0 = network default)")
    p.add_argument("--latent", type=int, default=0, help="input width (0 = network default)")
    p.add_argument("--noise-mix", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("partition", help="split a dataset into client shards")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--perturb-p", type=float, default=0.3)
    p.add_argument("--perturb-rate", type=float, default=0.3)
    p.add_argument("--task-drop", type=float, default=0.3)
    p.add_argument("--late-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run one training regime end to end")
    p.add_argument("--regime", choices=["centralized", "localized", "static", "static-reinit", "fcm"])
    p.add_argument("--model", choices=list(models.KINDS))
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset")
    p.add_argument("--rounds", type=int)
    p.add_argument("--data", help="pre-generated dataset dir (default: generate from config)")
    p.add_argument("--manifest", help="replay an existing federation manifest")
    p.add_argument("--dp-sigma", type=float, dest="dp_sigma")
    p.add_argument("--out", required=True)

    p = sub.add_parser("intervene", help="depth-level intervention curve for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--data")

    p = sub.add_parser("graph-agg", help="aggregate the client graphs of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep-robustness", help="DiffPairs vs corruption sweep")
    p.add_argument("--net", choices=bayes.NETWORK_NAMES, default="asia")
    p.add_argument("--p", type=float, nargs="+", default=[0.0, 0.3, 0.6, 0.9])
    p.add_argument("--rates", type=float, nargs="+", default=[0.5])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="mean +- std tables over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    return parser


_REGIME_ALIASES = {"static": "static_fed", "static-reinit": "static_fed_reinit"}


def _cmd_gen_data(args) -> int:
    ds = bayes.generate_dataset(args.network, args.n, args.latent, args.noise_mix, args.seed)
    bayes.save_dataset(ds, args.out)
    print(f"wrote dataset {args.network} (n={ds.inputs.shape[0]}, d={ds.inputs.shape[1]}) to {args.out}")
    return 0


def _cmd_partition(args) -> int:
    from .config import derive_rng

    ds = bayes.load_dataset(args.data)
    shards = partition.make_federation(
        ds, ds.dag, ds.task_node, args.clients, args.task_drop,
        args.perturb_rate, args.perturb_p, derive_rng(args.seed, "partition"),
        late_frac=args.late_frac,
    )
    partition.save_manifest(shards, args.out)
    print(f"wrote manifest for {len(shards)} clients to {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {
        "regime": _REGIME_ALIASES.get(args.regime, args.regime),
        "model_kind": args.model,
        "seed": args.seed,
        "dataset": args.dataset,
        "rounds": args.rounds,
        "dp.sigma": args.dp_sigma,
    }
    if args.dp_sigma is not None:
        overrides["dp.enabled"] = True
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    if args.data:
        dataset = bayes.load_dataset(args.data)
    else:
        dataset = bayes.generate_dataset(cfg.dataset, cfg.n_samples, cfg.latent_dim,
                                         cfg.noise_mix, cfg.seed)
    shards = None
    if cfg.regime != "centralized":
        if args.manifest:
            shards = partition.load_manifest(dataset, args.manifest)
        else:
            shards = federation.build_shards(cfg, dataset)
        partition.save_manifest(shards, out / "manifest.json")
    result = federation.run_regime(cfg, dataset, shards)
    evaluate.write_csv(result.metrics, out / "metrics.csv")
    evaluate.write_csv([result.final], out / "final.csv")
    if result.per_client:
        evaluate.write_csv(result.per_client, out / "final_per_client.csv")
    (out / "run_info.json").write_text(json.dumps({"wall_clock_s": result.wall_clock_s}) + "\n")
    models.save_model(result.model, out / "ckpt_final")
    if result.state is not None and result.state.prejoin is not None:
        models.save_model(result.state.prejoin, out / "ckpt_prejoin")
        models.save_model(result.state.postadapt, out / "ckpt_postadapt")
    print(
        f"{cfg.regime}/{cfg.model_kind} seed {cfg.seed}: "
        f"test task acc {result.final['test_task_acc']:.3f}, coverage {result.final['coverage']:.3f}"
    )
    return 0


def _cmd_intervene(args) -> int:
    run = Path(args.run)
    cfg = load_config(run / "config.json")
    model = models.load_model(run / "ckpt_final")
    if args.data:
        dataset = bayes.load_dataset(args.data)
    else:
        dataset = bayes.generate_dataset(cfg.dataset, cfg.n_samples, cfg.latent_dim,
                                         cfg.noise_mix, cfg.seed)
    rows_idx = dataset.rows("test")
    labels = {j: dataset.concepts.column(j)[rows_idx] for j in dataset.concept_nodes}
    curve = evaluate.intervention_curve(
        model, dataset.inputs[rows_idx], labels, dataset.task[rows_idx],
        dataset.dag, dataset.task_node,
    )
    rows = [
        {
            "level": lv.level,
            "n_intervened": len(lv.intervened),
            "label_acc": lv.label_acc,
            "task_acc": lv.task_acc,
            "impossible": int(lv.impossible),
        }
        for lv in curve.levels
    ]
    evaluate.write_csv(rows, run / "intervention.csv")
    print(f"wrote {run / 'intervention.csv'} ({len(rows)} levels)")
    return 0


def _cmd_graph_agg(args) -> int:
    from .config import derive_rng

    payload = json.loads(Path(args.manifest).read_text())
    proposals, weights, nodes = [], [], []
    for client in payload["clients"]:
        g = graphs.Dag.from_edges(client["nodes"], [tuple(e) for e in client["edges"]])
        proposals.append(graphs.from_adjacency(g))
        weights.append(max(len(client["row_indices"]), 1))
        for n in client["nodes"]:
            if n not in nodes:
                nodes.append(n)
    total = float(sum(weights))
    agg = graphs.aggregate(proposals, [w / total for w in weights],
                           derive_rng(args.seed, "graph-agg"), nodes=tuple(nodes))
    graphs.write_edge_list(agg, args.out)
    print(f"wrote {len(agg.edges)} edges over {len(agg.nodes)} nodes to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    net = bayes.reference_networks()[args.net]
    rows = evaluate.robustness_sweep(
        net.dag, net.task, list(args.p), list(args.rates),
        seeds=list(range(args.seeds)), n_clients=args.clients,
    )
    evaluate.write_csv(rows, args.out)
    for row in rows:
        print(f"p={row['p']:.1f} rate={row['corrupt_rate']:.1f} "
              f"DiffPairs {row['mean_diff_pairs']:.2f}+-{row['std_diff_pairs']:.2f}")
    return 0


def _cmd_report(args) -> int:
    finals = []
    for run in args.runs:
        path = Path(run) / "final.csv"
        if not path.exists():
            raise bayes.DataError(f"no final.csv under {run}")
        finals.extend(evaluate.read_csv(path))
    table = evaluate.aggregate_report(finals)
    if args.out:
        evaluate.write_csv(table, args.out)
    header = f"{'dataset':<12}{'regime':<20}{'model':<8}{'runs':<6}{'task acc':<14}{'concept acc':<14}coverage"
    print(header)
    for row in table:
        print(f"{row['dataset']:<12}{row['regime']:<20}{row['model_kind']:<8}"
              f"{row['n_runs']:<6}{row['task_acc']:<14}{row['concept_acc']:<14}{row['coverage']}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "partition": _cmd_partition,
    "train": _cmd_train,
    "intervene": _cmd_intervene,
    "graph-agg": _cmd_graph_agg,
    "sweep-robustness": _cmd_sweep,
    "report": _cmd_report,
}


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, bayes.DataError, models.ModelError, graphs.GraphError,
            partition.PartitionError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except federation.ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return PROTOCOL_EXIT


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
