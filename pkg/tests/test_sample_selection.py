import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replaysel.buffer import BufferSample, ReplayBuffer
from replaysel.class_selection import BatchContext, BatchImage
from replaysel.errors import ConfigError, DataFormatError, ExhaustedClassError, ExhaustionError
from replaysel.sample_selection import (
    AsvConfig,
    GraspConfig,
    LeftTerm,
    asv_rank,
    asv_scores,
    asv_select,
    dynamic_weight,
    grasp_distances,
    grasp_pick,
    grasp_probabilities,
    grasp_scores,
    knn_sv,
    knn_sv_sorted,
    knn_sv_table,
    precompute_left_term,
    top_n_by_score,
    uniform_sample,
)

from _oracles import shapley_for_point
from conftest import make_sample, random_batch, random_buffer


class TestUniform:
    def test_single_member(self):
        assert uniform_sample([42], None, np.random.default_rng(0)) == 42

    def test_two_members_monte_carlo(self):
        rng = np.random.default_rng(1)
        draws = np.array([uniform_sample([3, 9], None, rng) for _ in range(100_000)])
        assert abs((draws == 3).mean() - 0.5) < 0.01

    def test_all_masked(self):
        with pytest.raises(ExhaustedClassError):
            uniform_sample([1, 2], [False, False], np.random.default_rng(0))


class TestGrasp:
    def test_score(self):
        proto = np.array([1.0, 0.0])
        # cosine distance 0.2 from the prototype
        member = make_sample(0, 0.0, {0: [0.8, np.sqrt(1 - 0.64)]})
        np.testing.assert_allclose(grasp_scores([member], 0, proto, GraspConfig(1.0)), [5.0])

    def test_probabilities(self):
        np.testing.assert_allclose(grasp_probabilities([0.1, 0.2], 1.0), [2 / 3, 1 / 3], atol=1e-12)

    def test_member_at_prototype_is_clamped(self):
        v = np.array([1.0, 2.0, -1.0])
        members = [make_sample(0, 0.0, {0: v})]
        d = grasp_distances(members, 0, v)
        assert d[0] == 1e-12
        assert grasp_scores(members, 0, v)[0] == pytest.approx(1e12)

    def test_single_eligible(self):
        rng = np.random.default_rng(0)
        assert grasp_pick([0.3, 0.1, 0.5], 1.0, [False, False, True], rng) == 2

    def test_equal_distances_uniform(self):
        rng = np.random.default_rng(2)
        draws = np.array([grasp_pick([0.4, 0.4], 1.0, None, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01

    def test_larger_w_concentrates(self):
        d = [0.1, 0.2, 0.3, 0.4]
        freqs = []
        for w in (1, 4, 16):
            rng = np.random.default_rng(3)
            draws = np.array([grasp_pick(d, w, None, rng) for _ in range(20_000)])
            freqs.append((draws == 0).mean())
        assert freqs[0] < freqs[1] < freqs[2]
        assert freqs[2] > 0.99

    def test_config(self):
        with pytest.raises(ConfigError):
            GraspConfig(0.0)

    def test_all_masked(self):
        with pytest.raises(ExhaustedClassError):
            grasp_probabilities([0.1, 0.2], 1.0, [False, False])


class TestKnnSv:
    def test_all_matching(self):
        sv = knn_sv_sorted(np.ones(4), 2)
        assert sv.tolist() == [0.25] * 4

    def test_all_mismatching(self):
        assert knn_sv_sorted(np.zeros(5), 3).tolist() == [0.0] * 5

    def test_single_candidate(self):
        assert knn_sv_sorted([1.0], 20).tolist() == [1.0]

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            knn_sv_sorted([1.0], 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
    def test_permutation_oracle_real_labels(self, n, K, seed):
        # the recursion is exact for real-valued label similarities too
        rng = np.random.default_rng(seed)
        feats, labs = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        ef, el = rng.normal(size=3), rng.normal(size=3)
        got = knn_sv(list(zip(feats, labs)), (ef, el), K)
        np.testing.assert_allclose(got, shapley_for_point(feats, labs, ef, el, K), atol=1e-9)

    def test_efficiency(self):
        rng = np.random.default_rng(9)
        s = rng.uniform(-1, 1, size=12)
        for K in (1, 3, 12, 20):
            k = min(K, s.size)
            total = knn_sv_sorted(s, K).sum()
            assert total == pytest.approx(s[:k].sum() / k, abs=1e-12)

    def test_any_k_all_matching(self):
        for K in (1, 2, 4, 20):
            assert knn_sv_sorted(np.ones(4), K).tolist() == [0.25] * 4


def _oracle_table(cands, evals, K, how):
    """Enumerate every (candidate instance, eval instance) value, then reduce."""
    cf = [row for s in cands for arr in s.class_embeddings.values() for row in arr]
    owner = [i for i, s in enumerate(cands) for arr in s.class_embeddings.values() for _ in arr]
    pick = max if how == "max" else min
    table = np.empty((len(cands), len(evals)))
    for j, im in enumerate(evals):
        per_instance = [shapley_for_point(cf, cf, f, y, K) for f, y in zip(im.top_k_embeddings, im.labels)]
        for i in range(len(cands)):
            table[i, j] = pick(sv[a] for sv in per_instance for a in range(len(cf)) if owner[a] == i)
    return table


class TestKnnSvTable:
    def test_one_by_one(self):
        s = make_sample(0, 0.0, {0: [1.0, 0.5]})
        im = BatchImage([0.2, 1.0], 1.0, [0.0, 1.0])
        t = knn_sv_table([s], BatchContext((im,)), 3, "min")
        expected = knn_sv([(s.class_embeddings[0][0], s.class_embeddings[0][0])], ([0.2, 1.0], [0.0, 1.0]), 3)
        np.testing.assert_allclose(t.scores, [[expected[0]]])

    def test_singleton_instances_need_no_reduction(self):
        rng = np.random.default_rng(4)
        cands = [make_sample(i, 0.0, {0: rng.normal(size=3)}) for i in range(4)]
        batch = BatchContext(tuple(BatchImage(rng.normal(size=3), 1.0, rng.normal(size=3)) for _ in range(2)))
        lo = knn_sv_table(cands, batch, 2, "min").scores
        hi = knn_sv_table(cands, batch, 2, "max").scores
        np.testing.assert_array_equal(lo, hi)
        for j, im in enumerate(batch.images):
            pairs = [(s.class_embeddings[0][0],) * 2 for s in cands]
            col = knn_sv(pairs, (im.top_k_embeddings[0], im.labels[0]), 2)
            np.testing.assert_allclose(lo[:, j], col, atol=1e-12)

    @pytest.mark.parametrize("how", ["max", "min"])
    def test_enumeration_oracle(self, how):
        rng = np.random.default_rng(5)
        cands = [make_sample(i, 0.0, {0: rng.normal(size=(2, 3))}) for i in range(3)]
        batch = BatchContext(tuple(BatchImage(rng.normal(size=(2, 3)), 1.0, rng.normal(size=(2, 3))) for _ in range(2)))
        got = knn_sv_table(cands, batch, 2, how).scores
        np.testing.assert_allclose(got, _oracle_table(cands, batch.images, 2, how), atol=1e-12)

    def test_buffer_vs_buffer_oracle(self):
        rng = np.random.default_rng(6)
        cands = [make_sample(i, 0.0, {0: rng.normal(size=(2, 3))}) for i in range(3)]
        evals = [BatchImage(s.class_embeddings[0], 0.0) for s in cands]
        got = knn_sv_table(cands, cands, 2, "max").scores
        np.testing.assert_allclose(got, _oracle_table(cands, evals, 2, "max"), atol=1e-12)

    def test_bad_reduction(self):
        s = make_sample(0, 0.0, [0])
        with pytest.raises(ValueError):
            knn_sv_table([s], [s], 1, "mean")


class TestAsvScores:
    def test_hand_computed(self):
        left = np.array([[1.0, 2.0, 3.0], [0.5, 1.0, 0.5], [2.0, 2.0, 2.0]])
        right = np.array([[-0.1, 0.2, 0.3], [0.4, -0.2, 0.1], [0.0, 0.05, 0.5]])
        # w = 0.15 * |-0.2| / |0.5| = 0.06
        expected = [0.06 * 2.0 + 0.1, 0.06 * (2.0 / 3.0) + 0.2, 0.06 * 2.0 - 0.0]
        got = asv_scores(left, right, AsvConfig(c=0.15))
        np.testing.assert_allclose(got, expected, atol=1e-12)
        assert top_n_by_score(got, [10, 11, 12], 1) == [11]

    def test_zero_weight(self):
        rng = np.random.default_rng(0)
        right = rng.normal(size=(6, 3))
        np.testing.assert_allclose(asv_scores(rng.normal(size=(6, 6)), right, AsvConfig(c=0)), -right.min(axis=1))

    def test_identical_rows(self):
        row = np.array([0.3, -0.2, 0.1])
        got = asv_scores(np.tile(row, (4, 1)), np.tile(row, (4, 1)), AsvConfig())
        assert np.ptp(got) == 0.0

    def test_dynamic_weight_fallback(self):
        assert dynamic_weight(0.15, -3.0, 0.0) == 0.15
        assert dynamic_weight(0.15, -3.0, 1.5) == pytest.approx(0.3)

    def test_ties_by_id(self):
        assert top_n_by_score([1.0, 2.0, 2.0], [9, 7, 3], 2) == [3, 7]


class TestAsvRank:
    def test_candidate_count_equals_n(self):
        buf = random_buffer(3, 4, seed=1)
        mask = np.zeros(len(buf), dtype=bool)
        mask[[1, 5, 9]] = True
        out = asv_select(buf, random_batch(3, seed=2), AsvConfig(candidate_count=3), 3, mask, np.random.default_rng(0))
        assert sorted(out) == sorted(buf.ids[[1, 5, 9]].tolist())

    def test_adversarial_twin_ranks_first(self):
        rng = np.random.default_rng(3)
        e = rng.normal(size=8)
        others = [BufferSample(i, 0.0, {0: rng.normal(size=(2, 8))}) for i in range(1, 12)]
        twin = BufferSample(0, 0.0, {0: e})
        buf = ReplayBuffer(others + [twin])
        batch = BatchContext((BatchImage(e, 1.0, -e), BatchImage(rng.normal(size=8), 1.0)))
        res = asv_rank(buf, batch, AsvConfig(c=0.0, K=3, candidate_count=len(buf)), 1, None, np.random.default_rng(0))
        assert res.selected == [0]
        right = res.right_table.scores
        assert right[list(res.candidate_ids).index(0)].min() == right.min()

    def test_precomputed_matches_on_the_fly(self):
        buf = random_buffer(4, 5, seed=4)
        batch = random_batch(4, seed=5)
        cfg = AsvConfig(K=5, candidate_count=len(buf))
        left = precompute_left_term(buf, cfg.K, chunk=7)
        a = asv_rank(buf, batch, cfg, 4, None, np.random.default_rng(0))
        b = asv_rank(buf, batch, cfg, 4, None, np.random.default_rng(0), left)
        assert a.selected == b.selected
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)

    def test_insufficient(self):
        buf = random_buffer(1, 2)
        with pytest.raises(ExhaustionError):
            asv_rank(buf, random_batch(3), AsvConfig(), 3, None, np.random.default_rng(0))


class TestLeftTerm:
    def test_single_sample(self):
        buf = ReplayBuffer([make_sample(0, 0.0, [0])])
        assert precompute_left_term(buf, 20).values.tolist() == [1.0]

    def test_identical_samples(self):
        v = np.array([[0.2, 0.9, -0.4]])
        buf = ReplayBuffer([make_sample(i, 0.0, {0: v}) for i in range(5)])
        vals = precompute_left_term(buf, 3).values
        assert np.ptp(vals) == 0.0

    def test_matches_direct_row_means(self):
        buf = random_buffer(2, 3, seed=7)
        direct = knn_sv_table(buf.samples, buf.samples, 4, "max").scores
        left = precompute_left_term(buf, 4, chunk=2)
        np.testing.assert_allclose(left.values, direct.mean(axis=1), atol=1e-12)
        assert left.table_min == direct.min()

    def test_file_round_trip(self, tmp_path):
        left = precompute_left_term(random_buffer(2, 4, seed=8), 3)
        path = tmp_path / "left.bin"
        left.save(path)
        back = LeftTerm.load(path)
        np.testing.assert_array_equal(back.values, left.values)
        assert back.table_min == left.table_min
        assert path.stat().st_size == 8 + 8 * left.values.size + 8

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x05" + b"\x00" * 20)
        with pytest.raises(DataFormatError):
            LeftTerm.load(path)
