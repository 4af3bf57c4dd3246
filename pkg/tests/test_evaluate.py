import numpy as np
import pytest

from fedconcept import bayes, evaluate, federation, models
from fedconcept.config import RunConfig
from fedconcept.evaluate import (
    accuracy_with_random_fill,
    aggregate_report,
    coverage_report,
    depth_levels,
    intervention_curve,
    robustness_sweep,
)
from fedconcept.graphs import Dag


class TestRandomFill:
    def test_unpredicted_binary_scores_half(self):
        out = accuracy_with_random_fill({"a": None}, {"a": np.array([0, 1])}, {"a": 2})
        assert out["a"] == 0.5

    def test_perfect_predictor_scores_one(self):
        probs = np.eye(2)[np.array([0, 1, 1])]
        out = accuracy_with_random_fill({"a": probs}, {"a": np.array([0, 1, 1])}, {"a": 2})
        assert out["a"] == 1.0

    def test_mixed_composition_example(self):
        # three predicted binary concepts at 0.9 plus one unpredicted: mean 0.8
        probs = {}
        labels = {}
        rng = np.random.default_rng(0)
        for name in ("a", "b", "c"):
            y = rng.integers(0, 2, 1000)
            p = np.eye(2)[y].astype(float)
            flip = rng.random(1000) < 0.1
            p[flip] = p[flip][:, ::-1]
            probs[name], labels[name] = p, y
        probs["d"], labels["d"] = None, rng.integers(0, 2, 1000)
        out = accuracy_with_random_fill(probs, labels, {n: 2 for n in probs})
        assert np.mean(list(out.values())) == pytest.approx(0.8, abs=0.02)

    def test_repeated_evaluation_identical(self):
        probs = {"a": None}
        labels = {"a": np.array([1, 0])}
        a = accuracy_with_random_fill(probs, labels, {"a": 4})
        b = accuracy_with_random_fill(probs, labels, {"a": 4})
        assert a == b == {"a": 0.25}


class TestDepthLevels:
    def test_isolated_nodes_level_zero(self):
        g = Dag.from_edges("ABC", [])
        assert depth_levels(g) == {"A": 0, "B": 0, "C": 0}

    def test_chain_levels(self):
        g = Dag.from_edges("ABC", [("A", "B"), ("B", "C")])
        assert depth_levels(g) == {"A": 0, "B": 1, "C": 2}

    def test_diamond_uses_longest_path(self):
        g = Dag.from_edges("ABCD", [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])
        assert depth_levels(g)["D"] == 2

    def test_longer_route_dominates(self):
        g = Dag.from_edges("ABCD", [("A", "B"), ("B", "C"), ("A", "D"), ("C", "D")])
        assert depth_levels(g)["D"] == 3


class TestCoverage:
    def test_full_prediction_is_one(self):
        asia = bayes.reference_networks()["asia"]
        report = coverage_report(set(asia.concept_nodes), asia.dag, asia.task)
        assert report.coverage == 1.0
        assert "xray" not in report.task_relevant  # no directed path to dysp

    def test_partial_prediction_ratio(self):
        asia = bayes.reference_networks()["asia"]
        report = coverage_report({"smoke", "bronc", "xray"}, asia.dag, asia.task)
        assert report.coverage == pytest.approx(2 / 6)


@pytest.fixture(scope="module")
def chain_setup():
    # deterministic chain A -> B (B copies A), task Y = B: intervening A
    # must lift a trained graph-based model's B accuracy
    dag = Dag.from_edges(["A", "B", "Y"], [("A", "B"), ("B", "Y")])
    cpt_b = np.array([[1.0, 0.0], [0.0, 1.0]])
    net = bayes.BayesNet(
        name="chain", dag=dag, cardinality={"A": 2, "B": 2, "Y": 2},
        parents={"A": (), "B": ("A",), "Y": ("B",)},
        cpt={"A": np.array([[0.5, 0.5]]), "B": cpt_b, "Y": cpt_b}, task="Y",
    )
    table = bayes.ancestral_sample(net, 1500, np.random.default_rng(0))
    ds = bayes.synthesize_inputs(table, net.cardinality, net.task, net.dag, 6, 0.7,
                                 np.random.default_rng(1))
    cfg = RunConfig(dataset="chain", regime="centralized", model_kind="cgm", seed=0,
                    rounds=30, local_epochs=2, batch_size=128, patience=100)
    result = federation.run_regime(cfg, ds, None)
    return ds, result.model


class TestInterventionCurve:

    def test_baseline_level_is_plain_accuracy(self, chain_setup):
        ds, model = chain_setup
        rows = ds.rows("test")
        labels = {j: ds.concepts.column(j)[rows] for j in ds.concept_nodes}
        curve = intervention_curve(model, ds.inputs[rows], labels, ds.task[rows],
                                   ds.dag, ds.task_node)
        assert curve.levels[0].level == -1
        assert curve.levels[0].intervened == ()
        outputs, _ = models.forward_model(model, ds.inputs[rows])
        base_task = float((outputs.task_probs.argmax(1) == ds.task[rows]).mean())
        assert curve.levels[0].task_acc == pytest.approx(base_task)

    def test_intervening_parents_helps_deterministic_child(self, chain_setup):
        ds, model = chain_setup
        rows = ds.rows("test")
        labels = {j: ds.concepts.column(j)[rows] for j in ds.concept_nodes}
        base, _ = models.forward_model(model, ds.inputs[rows])
        poked, _ = models.forward_model(model, ds.inputs[rows], {"A": labels["A"]})
        acc = lambda out: float((out.concept_probs["B"].argmax(1) == labels["B"]).mean())
        assert acc(poked) > acc(base)

    def test_levels_cumulative_and_final_not_below_baseline(self, chain_setup):
        ds, model = chain_setup
        rows = ds.rows("test")
        labels = {j: ds.concepts.column(j)[rows] for j in ds.concept_nodes}
        curve = intervention_curve(model, ds.inputs[rows], labels, ds.task[rows],
                                   ds.dag, ds.task_node)
        for earlier, later in zip(curve.levels, curve.levels[1:]):
            assert set(earlier.intervened) <= set(later.intervened)
        assert curve.levels[-1].label_acc >= curve.levels[0].label_acc

    def test_unpredicted_level_flagged_impossible(self):
        dag = Dag.from_edges(["A", "B", "Y"], [("A", "B"), ("B", "Y")])
        cards = {"A": 2, "B": 2, "Y": 2}
        arch = models.architecture_from("cbm", ("B",), cards, "Y", input_dim=4)
        model = models.build(arch, np.random.default_rng(0))  # cannot predict A (level 0)
        X = np.random.default_rng(1).standard_normal((16, 4))
        labels = {"A": np.zeros(16, dtype=int), "B": np.zeros(16, dtype=int)}
        curve = intervention_curve(model, X, labels, np.zeros(16, dtype=int), dag, "Y")
        by_level = {lv.level: lv for lv in curve.levels}
        assert by_level[0].impossible
        assert not by_level[1].impossible
        assert "A" not in by_level[1].intervened


class TestRobustnessSweep:
    def test_unperturbed_proposals_reconstruct_exactly(self):
        asia = bayes.reference_networks()["asia"]
        rows = robustness_sweep(asia.dag, asia.task, [0.0], [0.5], seeds=[0, 1, 2])
        assert rows[0]["mean_diff_pairs"] == 0.0

    def test_degradation_grows_with_p(self):
        asia = bayes.reference_networks()["asia"]
        rows = robustness_sweep(asia.dag, asia.task, [0.3, 0.9], [0.8],
                                seeds=list(range(6)), n_clients=10)
        by_p = {r["p"]: r["mean_diff_pairs"] for r in rows}
        assert by_p[0.3] <= by_p[0.9]


class TestReportAggregation:
    def test_matches_hand_computed_mean_std(self):
        rows = []
        for seed, acc in enumerate([0.70, 0.80, 0.90]):
            rows.append({
                "dataset": "asia", "regime": "fcm", "model_kind": "cbm", "seed": seed,
                "test_task_acc": acc, "test_concept_acc": 0.5, "coverage": 1.0,
            })
        table = aggregate_report(rows)
        assert len(table) == 1
        assert table[0]["n_runs"] == 3
        mean, std = 100 * np.mean([0.7, 0.8, 0.9]), 100 * np.std([0.7, 0.8, 0.9])
        assert table[0]["task_acc"] == f"{mean:.1f}+-{std:.1f}"
        assert table[0]["coverage"] == "100.0+-0.0"

    def test_csv_roundtrip(self, tmp_path):
        rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": 0.25}]
        evaluate.write_csv(rows, tmp_path / "t.csv")
        back = evaluate.read_csv(tmp_path / "t.csv")
        assert back == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "0.25"}]
