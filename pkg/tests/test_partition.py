import numpy as np
import pytest

from fedconcept import bayes, partition
from fedconcept.graphs import Dag, has_cycle


@pytest.fixture(scope="module")
def asia_small():
    return bayes.generate_dataset("asia", n=1000, latent_dim=8, seed=0)


def federation(dataset, n_clients, seed=0, **kw):
    defaults = dict(task_drop_rate=0.3, perturb_clients=0.0, edge_fraction=0.0)
    defaults.update(kw)
    return partition.make_federation(
        dataset, dataset.dag, dataset.task_node, n_clients,
        rng=np.random.default_rng(seed), **defaults,
    )


class TestMakeFederation:
    def test_single_client_gets_everything(self, asia_small):
        shards = federation(asia_small, 1, task_drop_rate=0.0)
        spec = shards[0].spec
        assert set(spec.subgraph.nodes) == set(asia_small.dag.nodes)
        assert set(spec.supervised) == set(asia_small.concept_nodes)
        assert spec.has_task
        assert shards[0].n == 700  # full training split

    def test_row_disjointness_and_equal_sizes(self, asia_small):
        shards = federation(asia_small, 4)
        sizes = sorted(s.n for s in shards)
        assert sizes == [175, 175, 175, 175]  # 700 training rows over 4 clients
        seen = np.concatenate([s.spec.row_indices for s in shards])
        assert len(np.unique(seen)) == len(seen) == 700

    def test_masking_soundness(self, asia_small):
        for shard in federation(asia_small, 6, seed=3):
            supervised = set(shard.spec.supervised)
            for k, node in enumerate(shard.concept_nodes):
                column = shard.concepts[:, k]
                if node in supervised:
                    assert (column != partition.MISSING).all()
                else:
                    assert (column == partition.MISSING).all()
            if shard.spec.has_task:
                assert (shard.task != partition.MISSING).all()
            else:
                assert (shard.task == partition.MISSING).all()

    def test_total_coverage_including_task(self, asia_small):
        for seed in range(10):
            shards = federation(asia_small, 5, seed=seed)
            covered = set()
            for s in shards:
                covered |= set(s.spec.supervised)
                if s.spec.has_task:
                    covered.add(asia_small.task_node)
            assert covered == set(asia_small.dag.nodes)

    def test_at_least_one_task_holder(self, asia_small):
        shards = federation(asia_small, 5, task_drop_rate=0.99)
        assert any(s.spec.has_task for s in shards)

    def test_late_cohort_brings_new_concepts(self, asia_small):
        shards = federation(asia_small, 10, seed=1, late_frac=0.5, late_concept_frac=0.35)
        initial = {c for s in shards if s.spec.cohort == "initial" for c in s.spec.supervised}
        late = {c for s in shards if s.spec.cohort == "late" for c in s.spec.supervised}
        assert late - initial, "late clients should introduce unseen concepts"
        assert sum(s.spec.cohort == "late" for s in shards) == 5

    def test_perturbed_subgraphs_stay_acyclic(self, asia_small):
        for seed in range(20):
            shards = federation(asia_small, 5, seed=seed,
                                perturb_clients=1.0, edge_fraction=0.5)
            for s in shards:
                g = s.spec.subgraph
                assert not has_cycle(g.nodes, g.edges)

    def test_every_client_has_some_supervision(self, asia_small):
        for seed in range(10):
            for s in federation(asia_small, 8, seed=seed, task_drop_rate=0.5):
                assert s.spec.supervised or s.spec.has_task


class TestRestricted:
    def test_restriction_masks_extra_columns(self, asia_small):
        shard = federation(asia_small, 1, task_drop_rate=0.0)[0]
        narrowed = shard.restricted({"smoke", "lung"})
        assert set(narrowed.spec.supervised) == {"smoke", "lung"}
        assert (narrowed.concept_column("bronc") == partition.MISSING).all()
        assert (narrowed.concept_column("smoke") != partition.MISSING).all()
        # original shard untouched
        assert (shard.concept_column("bronc") != partition.MISSING).all()


class TestManifest:
    def test_roundtrip_reproduces_shards(self, asia_small, tmp_path):
        shards = federation(asia_small, 6, seed=5, perturb_clients=0.5, edge_fraction=0.3)
        path = tmp_path / "manifest.json"
        partition.save_manifest(shards, path)
        replayed = partition.load_manifest(asia_small, path)
        assert len(replayed) == len(shards)
        for a, b in zip(shards, replayed):
            assert a.spec.id == b.spec.id
            assert a.spec.subgraph.edges == b.spec.subgraph.edges
            assert a.spec.supervised == b.spec.supervised
            assert a.spec.has_task == b.spec.has_task
            assert a.spec.cohort == b.spec.cohort
            np.testing.assert_array_equal(a.spec.row_indices, b.spec.row_indices)
            np.testing.assert_array_equal(a.concepts, b.concepts)
            np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_corrupt_manifest_raises(self, asia_small, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{]")
        with pytest.raises(partition.PartitionError):
            partition.load_manifest(asia_small, path)
