import numpy as np
import pytest

from replaysel.buffer import ReplayBuffer
from replaysel.class_selection import BatchContext, BatchImage
from replaysel.engine import (
    ALGORITHMS,
    DATASET_END,
    EPOCH_END,
    REPLAY_RECORDED,
    AlgorithmSpec,
    DedupSchedule,
    DedupState,
    RetrievalEngine,
    adaptive_route,
    advance_window,
    canonical_name,
    dedup_mask,
)
from replaysel.errors import ConfigError, ExhaustionError
from replaysel.loss_adapt import LossAdaptConfig

from conftest import make_sample, random_batch, random_buffer


class TestAlgorithmSpec:
    def test_names(self):
        assert len(ALGORITHMS) == 9
        assert canonical_name("sw-grasp") == "SW-GRASP"
        assert canonical_name("uniform_balanced") == "UniformBalanced"
        with pytest.raises(ConfigError):
            canonical_name("reservoir")

    @pytest.mark.parametrize("name", sorted(ALGORITHMS))
    def test_create_defaults(self, name):
        spec = AlgorithmSpec.create(name)
        assert spec.name == name

    def test_defaults(self):
        assert AlgorithmSpec.create("ASER").asv.candidate_count == 168
        assert AlgorithmSpec.create("ASER-PC").asv.candidate_count == 352
        assert AlgorithmSpec.create("A-SW-GRASP").adaptive_entropy_threshold == 0.95

    def test_missing_or_extra_config(self):
        with pytest.raises(ConfigError):
            AlgorithmSpec("GRASP")
        with pytest.raises(ConfigError):
            AlgorithmSpec("Uniform", grasp=AlgorithmSpec.create("GRASP").grasp)

    def test_threshold_range(self):
        with pytest.raises(ConfigError):
            AlgorithmSpec.create("A-SW-GRASP", adaptive_entropy_threshold=1.5)


class TestDedupWindows:
    @pytest.fixture
    def buf(self):
        return ReplayBuffer([make_sample(i, 0.0, [i % 2]) for i in range(10)])

    def test_empty_state(self, buf):
        assert dedup_mask(DedupState(), buf).all()

    def test_all_replayed(self, buf):
        assert not dedup_mask(DedupState(set(range(10))), buf).any()

    def test_specific_ids(self, buf):
        mask = dedup_mask(DedupState({3, 7}), buf)
        assert np.flatnonzero(~mask).tolist() == [3, 7]

    def test_epoch_end_under_per_dataset(self):
        s = advance_window(DedupState({1}), EPOCH_END, DedupSchedule.PER_DATASET, 9)
        assert s.replayed == {1} and s.window_index == 0

    def test_dataset_end(self):
        s = advance_window(DedupState({1}), DATASET_END, DedupSchedule.PER_DATASET, 9)
        assert s.replayed == set() and s.window_index == 1

    def test_buffer_third(self):
        s = DedupState({1, 2, 3}, since_clear=3)
        advance_window(s, REPLAY_RECORDED, DedupSchedule.BUFFER_THIRD, 9)
        assert s.replayed == set() and s.window_index == 1

    def test_buffer_third_not_yet(self):
        s = DedupState({1, 2}, since_clear=2)
        advance_window(s, REPLAY_RECORDED, DedupSchedule.BUFFER_THIRD, 9)
        assert s.replayed == {1, 2}

    def test_none_schedule_never_records(self):
        buf = random_buffer(2, 3)
        eng = RetrievalEngine(buf, AlgorithmSpec.create("Uniform"), "none", seed=0)
        for _ in range(5):
            eng.retrieve(random_batch(3))
        assert eng.state.dedup.replayed == set()

    def test_parse(self):
        assert DedupSchedule.parse("PerEpoch") is DedupSchedule.PER_EPOCH
        assert DedupSchedule.parse("buffer_third") is DedupSchedule.BUFFER_THIRD
        with pytest.raises(ConfigError):
            DedupSchedule.parse("weekly")


class TestAdaptiveRoute:
    @pytest.fixture
    def buf(self):
        e = np.eye(3)
        return ReplayBuffer([make_sample(0, 0.0, {0: e[0]}), make_sample(1, 0.0, {1: e[1]})])

    def test_threshold_one_only_at_uniform(self, buf):
        spec = AlgorithmSpec.create("A-SW-GRASP", adaptive_entropy_threshold=1.0)
        assert adaptive_route([[1.0, 0.2, 0.0]], buf, spec) == "swil"
        assert adaptive_route([[0.0, 0.0, 1.0]], buf, spec) == "grasp"

    def test_threshold_zero(self, buf):
        spec = AlgorithmSpec.create("A-SW-GRASP", adaptive_entropy_threshold=0.0)
        assert adaptive_route([[1.0, 0.0, 0.0]], buf, spec) == "grasp"

    def test_point_mass(self, buf):
        spec = AlgorithmSpec.create("A-SW-GRASP", swil_w=60.0, adaptive_entropy_threshold=0.5)
        assert adaptive_route([[1.0, 0.0, 0.0]], buf, spec) == "swil"


class TestRetrieve:
    def test_single_sample_window(self):
        buf = ReplayBuffer([make_sample(5, 0.0, [0])])
        eng = RetrievalEngine(buf, AlgorithmSpec.create("Uniform"), "dataset", seed=0, fallback=False)
        batch = random_batch(1, dim=4)
        assert eng.retrieve(batch).sample_ids == (5,)
        with pytest.raises(ExhaustionError):
            eng.retrieve(batch)

    def test_fallback_opens_new_window(self):
        buf = ReplayBuffer([make_sample(i, 0.0, [0]) for i in range(3)])
        eng = RetrievalEngine(buf, AlgorithmSpec.create("Uniform"), "dataset", seed=0)
        a = eng.retrieve(random_batch(2, dim=4))
        b = eng.retrieve(random_batch(2, dim=4))
        assert len(set(a.sample_ids)) == 2
        assert b.windows == (0, 1)
        assert b.sample_ids[0] not in a.sample_ids
        assert eng.window_index == 1

    def test_balanced_one_per_class(self):
        buf = ReplayBuffer([make_sample(i, 0.0, [i]) for i in range(4)])
        eng = RetrievalEngine(buf, AlgorithmSpec.create("UniformBalanced"), "none", seed=0)
        plan = eng.retrieve(random_batch(4, dim=4))
        assert sorted(plan.sample_ids) == [0, 1, 2, 3]

    def test_no_duplicates_within_plan(self):
        buf = random_buffer(2, 3)
        for name in ALGORITHMS:
            eng = RetrievalEngine(buf, AlgorithmSpec.create(name, candidate_count=6), "none", seed=1)
            plan = eng.retrieve(random_batch(6))
            assert len(set(plan.sample_ids)) == 6, name

    def test_loss_adaptivity(self):
        buf = random_buffer(3, 4)
        batch = random_batch(4, losses=[0.1, 0.5, 0.2, 0.9])
        eng = RetrievalEngine(buf, AlgorithmSpec.create("SWIL"), seed=0, loss_adapt=LossAdaptConfig(0.3))
        plan = eng.retrieve(batch)
        assert len(plan) == 2
        assert plan.image_indices == (1, 3)
        assert plan.replay_weight == 0.5

    def test_no_replay_when_all_below(self):
        buf = random_buffer(3, 4)
        eng = RetrievalEngine(buf, AlgorithmSpec.create("ASER"), seed=0, loss_adapt=LossAdaptConfig(5.0))
        plan = eng.retrieve(random_batch(4))
        assert len(plan) == 0 and plan.replay_weight == 0.0

    def test_grasp_and_swil_agree_on_degenerate_buffer(self):
        e = np.eye(5)
        buf = ReplayBuffer([make_sample(i, 0.0, {i: e[i]}) for i in range(4)])
        batch = BatchContext((BatchImage(e[4], 1.0),))
        freqs = []
        for name in ("GRASP", "SWIL"):
            eng = RetrievalEngine(buf, AlgorithmSpec.create(name), "none", seed=2)
            ids = [eng.retrieve(batch).sample_ids[0] for _ in range(100_000)]
            freqs.append(np.bincount(ids, minlength=4) / len(ids))
        np.testing.assert_allclose(freqs[0], freqs[1], atol=0.01)
        np.testing.assert_allclose(freqs[1], 0.25, atol=0.01)

    def test_adaptive_zero_threshold_matches_grasp(self):
        buf = random_buffer(5, 6, seed=3)
        a = RetrievalEngine(buf, AlgorithmSpec.create("GRASP"), "epoch", seed=7)
        b = RetrievalEngine(buf, AlgorithmSpec.create("A-SW-GRASP", adaptive_entropy_threshold=0.0), "epoch", seed=7)
        for i in range(10):
            batch = random_batch(4, seed=i)
            assert a.retrieve(batch) == b.retrieve(batch)

    def test_single_class_sw_aser_matches_aser_pc(self):
        buf = random_buffer(1, 12, seed=4)
        kw = dict(candidate_count=8, asv_K=3)
        a = RetrievalEngine(buf, AlgorithmSpec.create("ASER-PC", **kw), "dataset", seed=3)
        b = RetrievalEngine(buf, AlgorithmSpec.create("SW-ASER-PC", **kw), "dataset", seed=3)
        for i in range(4):
            batch = random_batch(3, seed=i)
            assert a.retrieve(batch) == b.retrieve(batch)

    def test_seeded_determinism(self):
        buf = random_buffer(4, 5, seed=5)
        plans = []
        for _ in range(2):
            eng = RetrievalEngine(buf, AlgorithmSpec.create("SW-GRASP"), "buffer-third", seed=11)
            plans.append([eng.retrieve(random_batch(3, seed=i)) for i in range(6)])
        assert plans[0] == plans[1]

    def test_left_term_size_checked(self):
        from replaysel.sample_selection import precompute_left_term

        left = precompute_left_term(random_buffer(1, 2), 3)
        with pytest.raises(ConfigError):
            RetrievalEngine(random_buffer(2, 2), AlgorithmSpec.create("ASER-PC"), left_term=left)
