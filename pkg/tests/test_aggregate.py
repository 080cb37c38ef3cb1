"""Vote tallies, tie-broken prediction, certificates, top-n aggregation,
and ensemble persistence."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpakit import dataset as ds
from dpakit import aggregate, harness, learners, partition
from dpakit.aggregate import (Certificate, Ensemble, VoteTally, certify,
                              dpa_predict, load_ensemble, save_ensemble,
                              tally, topn_aggregate)
from dpakit.fieldhash import HashSpec

from oracles import oracle_radius


def make_tally(counts, k=None, abstentions=0):
    counts = np.asarray(counts, dtype=np.int64)
    if k is None:
        k = int(counts.sum()) + abstentions
    return VoteTally(counts=counts, k=k, abstentions=abstentions)


@pytest.fixture(scope="module")
def small_ensemble():
    data = ds.generate_blobs(5, 5, 100, (4, 4, 1), noise=20)
    spec = HashSpec.for_input_dim(data.input_dim, seed=2)
    plan = partition.build_plan(data, spec, 7)
    cfg = harness.ExperimentConfig(learner_kind="nearest_centroid",
                                   k_values=(7,))
    ensemble = harness.train_ensemble(data, plan, cfg)
    return data, ensemble


class TestTally:
    def test_unanimous(self, small_ensemble):
        data, _ = small_ensemble
        model = learners.train_dataset(
            learners.LearnerSpec(kind="nearest_centroid"), data)
        ens = Ensemble([model] * 4, 4, data.num_classes)
        x = data.pixels[data.labels == 2][0]
        t = tally(ens, x)
        assert t.counts[2] == 4 and t.counts.sum() == 4

    def test_split_votes_sum_to_k(self, small_ensemble):
        data, ensemble = small_ensemble
        t = tally(ensemble, data.pixels[0])
        assert t.counts.sum() + t.abstentions == ensemble.k

    def test_abstaining_model_not_counted(self, small_ensemble):
        data, _ = small_ensemble
        model = learners.train_dataset(
            learners.LearnerSpec(kind="nearest_centroid"), data)
        mask = np.array([False, False, False, True])
        ens = Ensemble([model] * 4, 4, data.num_classes, abstain_mask=mask)
        x = data.pixels[data.labels == 2][0]
        t = tally(ens, x)
        assert t.counts[2] == 3 and t.abstentions == 1

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            VoteTally(counts=np.array([2, 1]), k=5, abstentions=1)


class TestDpaPredict:
    @pytest.mark.parametrize("counts,expected", [
        ([1, 1, 1], 0),
        ([0, 5, 2], 1),
        ([3, 0, 3], 0),
    ])
    def test_tie_break_to_smallest_index(self, counts, expected):
        assert dpa_predict(make_tally(counts)) == expected

    def test_all_abstain_predicts_class_zero(self):
        t = make_tally([0, 0, 0], k=4, abstentions=4)
        assert dpa_predict(t) == 0
        assert certify(t).radius == 0


class TestCertify:
    def test_worked_example_radius_one(self):
        # Oracle-confirmed: one reassigned vote keeps class 0 ahead, two
        # can flip the argmax.
        t = make_tally([5, 2], k=7)
        cert = certify(t)
        assert cert == Certificate(predicted=0, runner_up=1, radius=1)
        assert oracle_radius(t.counts, 0, 7) == 1

    def test_worked_example_tie_break_radius_zero(self):
        t = make_tally([0, 3, 4], k=7)
        cert = certify(t)
        assert cert.predicted == 2 and cert.radius == 0
        assert oracle_radius(t.counts, 0, 7) == 0

    def test_unanimous_radius_floor_k_minus_one_half(self):
        t = make_tally([0, 0, 0, 0, 0, 7], k=7)
        cert = certify(t)
        assert cert.predicted == 5 and cert.radius == 3
        assert oracle_radius(t.counts, 0, 7) == 3

    def test_single_class_unbounded(self):
        cert = certify(make_tally([4], k=4))
        assert cert.unbounded and cert.runner_up is None

    def test_radius_nonnegative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = rng.multinomial(10, np.ones(4) / 4)
            assert certify(make_tally(c)).radius >= 0

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 9), st.integers(2, 4), st.integers(0, 3),
           st.integers(0, 2 ** 31 - 1))
    def test_matches_brute_force_oracle(self, votes, classes, abst, seed):
        rng = np.random.default_rng(seed)
        counts = rng.multinomial(votes, np.ones(classes) / classes)
        t = make_tally(counts, abstentions=abst)
        assert certify(t).radius == oracle_radius(counts, abst, t.k)


class TestTopN:
    def test_full_n_is_permutation(self, small_ensemble):
        data, ensemble = small_ensemble
        out = topn_aggregate(ensemble, data.pixels[0], data.num_classes)
        assert sorted(out) == list(range(data.num_classes))

    def test_direct_count_example(self):
        # Model A top-2 = (3, 1), model B top-2 = (1, 2): counts
        # {1: 2, 2: 1, 3: 1}, so top-2 = [1, 2] by index tie-break.
        class Stub:
            def __init__(self, ranking):
                self.ranking = ranking
                self.num_classes = 4

            def predict_topn(self, x, n):
                return self.ranking[:n]

            def predict(self, x):
                return self.ranking[0]

        ens = Ensemble([Stub([3, 1, 2, 0]), Stub([1, 2, 3, 0])], 2, 4)
        assert topn_aggregate(ens, np.zeros((1, 1, 1)), 2) == [1, 2]

    def test_top1_equals_dpa_predict(self, small_ensemble):
        data, ensemble = small_ensemble
        rng = np.random.default_rng(9)
        inputs = rng.integers(0, 256, (100, 4, 4, 1)).astype(np.uint8)
        for x in inputs:
            assert topn_aggregate(ensemble, x, 1) \
                == [dpa_predict(tally(ensemble, x))]

    def test_n_out_of_range(self, small_ensemble):
        data, ensemble = small_ensemble
        with pytest.raises(ValueError):
            topn_aggregate(ensemble, data.pixels[0], data.num_classes + 1)


class TestEnsemblePersistence:
    def test_round_trip_tallies(self, small_ensemble, tmp_path):
        data, ensemble = small_ensemble
        save_ensemble(ensemble, tmp_path / "ens")
        clone = load_ensemble(tmp_path / "ens")
        for i in range(100):
            x = data.pixels[i % len(data)]
            assert np.array_equal(tally(clone, x).counts,
                                  tally(ensemble, x).counts)

    def test_fingerprint_mismatch_names_file(self, small_ensemble, tmp_path):
        _, ensemble = small_ensemble
        save_ensemble(ensemble, tmp_path / "ens")
        import json
        mpath = tmp_path / "ens" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["fingerprints"][2] = "0" * 64
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="model_002"):
            load_ensemble(tmp_path / "ens")
