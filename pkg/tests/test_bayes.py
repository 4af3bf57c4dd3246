import numpy as np
import pytest

from fedconcept import bayes
from fedconcept.config import derive_rng
from fedconcept.graphs import Dag
from oracles import exact_marginals


def tiny_net(p_a1=0.3, deterministic_chain=False):
    dag = Dag.from_edges(["A", "B"], [("A", "B")])
    cpt_b = np.array([[1.0, 0.0], [0.0, 1.0]]) if deterministic_chain else np.array([[0.8, 0.2], [0.4, 0.6]])
    return bayes.BayesNet(
        name="tiny",
        dag=dag,
        cardinality={"A": 2, "B": 2},
        parents={"A": (), "B": ("A",)},
        cpt={"A": np.array([[1 - p_a1, p_a1]]), "B": cpt_b},
        task="B",
    )


class TestReferenceNetworks:
    def test_published_sizes_and_tasks(self):
        nets = bayes.reference_networks()
        expected = {
            "asia": (8, 8, "dysp"),
            "sachs": (11, 17, "Akt"),
            "alarm": (37, 46, "BP"),
            "insurance": (27, 52, "PropCost"),
            "hailfinder": (56, 66, "R5Fcst"),
        }
        for name, (n_nodes, n_edges, task) in expected.items():
            net = nets[name]
            assert len(net.dag.nodes) == n_nodes
            assert len(net.dag.edges) == n_edges
            assert net.task == task

    def test_all_nets_satisfy_invariants(self):
        # the BayesNet constructor enforces row sums, row counts and acyclicity
        for net in bayes.reference_networks().values():
            for node in net.dag.nodes:
                np.testing.assert_allclose(net.cpt[node].sum(axis=1), 1.0, atol=1e-9)

    def test_malformed_file_names_the_file(self, tmp_path):
        bad = tmp_path / "broken.json"
        bad.write_text("{not json")
        with pytest.raises(bayes.DataError, match="broken.json"):
            bayes.load_network(bad)

    def test_bad_cpt_rejected(self, tmp_path):
        bad = tmp_path / "badnet.json"
        bad.write_text(
            '{"task": "A", "nodes": [{"name": "A", "cardinality": 2, "parents": [], "cpt": [0.7, 0.7]}]}'
        )
        with pytest.raises(bayes.DataError):
            bayes.load_network(bad)


class TestAncestralSample:
    def test_degenerate_root_cpt(self):
        net = tiny_net(p_a1=0.0)
        table = bayes.ancestral_sample(net, 50, np.random.default_rng(0))
        assert not table.column("A").any()

    def test_deterministic_chain_copies_parent(self):
        net = tiny_net(deterministic_chain=True)
        table = bayes.ancestral_sample(net, 200, np.random.default_rng(1))
        np.testing.assert_array_equal(table.column("A"), table.column("B"))

    def test_marginal_frequency_matches_cpt(self):
        net = tiny_net(p_a1=0.3)
        table = bayes.ancestral_sample(net, 100_000, np.random.default_rng(2))
        assert abs(table.column("A").mean() - 0.3) < 0.01

    def test_marginals_match_enumeration_oracle(self):
        # brute-force joint enumeration on the nets small enough for it
        nets = bayes.reference_networks()
        for name in ("asia", "sachs"):
            net = nets[name]
            table = bayes.ancestral_sample(net, 100_000, np.random.default_rng(3))
            exact = exact_marginals(net)
            for k, node in enumerate(net.dag.nodes):
                empirical = np.bincount(table.values[:, k], minlength=net.cardinality[node]) / 100_000
                assert np.abs(empirical - exact[node]).max() < 0.01, f"{name}:{node}"

    def test_n_must_be_positive(self):
        with pytest.raises(bayes.DataError):
            bayes.ancestral_sample(tiny_net(), 0, np.random.default_rng(0))


class TestSynthesizeInputs:
    def _samples(self, n=400, seed=0):
        net = tiny_net()
        return net, bayes.ancestral_sample(net, n, np.random.default_rng(seed))

    def test_pure_noise_ignores_annotations(self):
        # noise_mix=1: two different annotation tables, same rng -> identical inputs
        net, t1 = self._samples(seed=0)
        _, t2 = self._samples(seed=99)
        d1 = bayes.synthesize_inputs(t1, net.cardinality, net.task, net.dag, 4, 1.0,
                                     np.random.default_rng(5))
        d2 = bayes.synthesize_inputs(t2, net.cardinality, net.task, net.dag, 4, 1.0,
                                     np.random.default_rng(5))
        np.testing.assert_array_equal(d1.inputs, d2.inputs)

    def test_zero_noise_deterministic_function_of_row(self):
        net = tiny_net(deterministic_chain=True)
        table = bayes.ancestral_sample(net, 300, np.random.default_rng(1))
        ds = bayes.synthesize_inputs(table, net.cardinality, net.task, net.dag, 3, 0.0,
                                     np.random.default_rng(2))
        rows_a0 = np.flatnonzero(table.column("A") == 0)
        base = ds.inputs[rows_a0[0]]
        for r in rows_a0[1:]:
            np.testing.assert_allclose(ds.inputs[r], base, atol=1e-12)

    def test_standardization_on_training_split(self):
        net, table = self._samples(n=600)
        ds = bayes.synthesize_inputs(table, net.cardinality, net.task, net.dag, 4, 0.5,
                                     np.random.default_rng(3))
        train = ds.inputs[ds.rows("train")]
        assert np.abs(train.mean(axis=0)).max() < 1e-6
        assert np.abs(train.std(axis=0) - 1.0).max() < 1e-6

    def test_splits_disjoint_and_cover(self):
        net, table = self._samples(n=503)
        ds = bayes.synthesize_inputs(table, net.cardinality, net.task, net.dag, 4, 0.5,
                                     np.random.default_rng(4))
        allidx = np.concatenate([ds.rows("train"), ds.rows("val"), ds.rows("test")])
        assert len(allidx) == 503 and len(np.unique(allidx)) == 503
        assert len(ds.rows("train")) == int(0.7 * 503)
        assert len(ds.rows("val")) == int(0.1 * 503)

    def test_seed_determinism_end_to_end(self):
        a = bayes.generate_dataset("asia", n=300, latent_dim=8, seed=7)
        b = bayes.generate_dataset("asia", n=300, latent_dim=8, seed=7)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.task, b.task)

    def test_asia_paper_dimensions(self):
        ds = bayes.generate_dataset("asia", seed=0)
        assert ds.inputs.shape == (15000, 32)
        assert ds.task_node == "dysp"
        assert len(ds.concept_nodes) == 7

    def test_bad_latent_rejected(self):
        net, table = self._samples()
        with pytest.raises(bayes.DataError):
            bayes.synthesize_inputs(table, net.cardinality, net.task, net.dag, 0, 0.5,
                                    np.random.default_rng(0))


class TestDatasetIO:
    def test_save_load_roundtrip(self, tmp_path):
        ds = bayes.generate_dataset("asia", n=200, latent_dim=6, seed=1)
        bayes.save_dataset(ds, tmp_path / "d")
        back = bayes.load_dataset(tmp_path / "d")
        np.testing.assert_allclose(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.task, ds.task)
        np.testing.assert_array_equal(back.concepts.values, ds.concepts.values)
        assert back.dag.edges == ds.dag.edges
        assert back.cardinality == ds.cardinality
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(back.rows(split), ds.rows(split))

    def test_missing_dir_raises_data_error(self, tmp_path):
        with pytest.raises(bayes.DataError):
            bayes.load_dataset(tmp_path / "nope")
