import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsereid import evaluation, vit

from conftest import masked_vs_pruned, randomize, tiny_config


def reference_cmc_map(dist, q_ids, g_ids, q_cams, g_cams, ranks=(1, 3, 5, 10)):
    """Quadratic-time reference: full sort per query, explicit loops."""
    hits = {k: 0 for k in ranks}
    aps = []
    for i in range(len(q_ids)):
        entries = sorted(range(len(g_ids)), key=lambda j: (dist[i][j], g_ids[j], g_cams[j]))
        ranked = [j for j in entries if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        good = [g_ids[j] == q_ids[i] for j in ranked]
        if not any(good):
            continue
        for k in ranks:
            if any(good[:k]):
                hits[k] += 1
        found, precisions = 0, []
        for pos, g in enumerate(good, start=1):
            if g:
                found += 1
                precisions.append(found / pos)
        aps.append(sum(precisions) / found)
    n = len(aps)
    if n == 0:
        return None, None
    return {k: hits[k] / n for k in ranks}, sum(aps) / n


def random_instance(rng):
    q, g = int(rng.integers(1, 51)), int(rng.integers(1, 51))
    ids = int(rng.integers(1, 8))
    q_ids, g_ids = rng.integers(0, ids, q), rng.integers(0, ids, g)
    q_cams, g_cams = rng.integers(0, 3, q), rng.integers(0, 3, g)
    dist = rng.integers(0, 10, (q, g)).astype(float)  # plenty of ties
    return dist, q_ids, g_ids, q_cams, g_cams


class TestAveragePrecision:
    def test_worked_example(self):
        hits = [True, False, True, False, True]
        assert evaluation.average_precision(hits) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3)
        assert evaluation.average_precision(hits) == pytest.approx(0.7556, abs=5e-5)

    def test_no_hits(self):
        assert evaluation.average_precision([False, False]) == 0.0


class TestCmcMap:
    def test_single_correct(self):
        r = evaluation.cmc_map(np.array([[0.3]]), [1], [1], [0], [1])
        assert r.cmc[1] == 1.0 and r.mAP == 1.0

    def test_same_camera_excluded(self):
        # the closest gallery image shares id and camera, so it is ignored
        dist = np.array([[0.0, 1.0, 2.0]])
        r = evaluation.cmc_map(dist, [5], [5, 7, 5], [0], [0, 1, 1])
        assert r.cmc[1] == 0.0 and r.cmc[3] == 1.0
        assert r.mAP == pytest.approx(0.5)

    def test_query_without_match_skipped(self):
        r = evaluation.cmc_map(np.array([[1.0, 2.0], [1.0, 2.0]]), [1, 2], [1, 3], [0, 0], [1, 1])
        assert r.num_skipped == 1
        assert r.cmc[1] == 1.0

    def test_reference_agreement(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 100:
            inst = random_instance(rng)
            cmc, m = reference_cmc_map(*[x.tolist() for x in inst])
            if cmc is None:
                continue
            checked += 1
            r = evaluation.cmc_map(*inst)
            assert r.mAP == pytest.approx(m, abs=1e-12)
            for k in cmc:
                assert r.cmc[k] == pytest.approx(cmc[k], abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 16))
    def test_permutation_and_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        dist, qi, gi, qc, gc = random_instance(rng)
        dist = dist + rng.random(dist.shape) * 0.5
        base = evaluation.cmc_map(dist, qi, gi, qc, gc)
        perm = rng.permutation(len(gi))
        shuffled = evaluation.cmc_map(dist[:, perm], qi, gi[perm], qc, gc[perm])
        warped = evaluation.cmc_map(np.exp(dist) * 3 + 1, qi, gi, qc, gc)
        for other in (shuffled, warped):
            assert other.mAP == pytest.approx(base.mAP, abs=1e-12)
            assert other.cmc == pytest.approx(base.cmc, abs=1e-12)
        values = [base.cmc[k] for k in (1, 3, 5, 10)]
        assert values == sorted(values)
        assert all(0.0 <= v <= 1.0 for v in values + [base.mAP])

    def test_tie_permutation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            dist, qi, gi, qc, gc = random_instance(rng)
            base = evaluation.cmc_map(dist, qi, gi, qc, gc)
            perm = rng.permutation(len(gi))
            other = evaluation.cmc_map(dist[:, perm], qi, gi[perm], qc, gc[perm])
            assert other.mAP == pytest.approx(base.mAP, abs=1e-12)


class TestDistances:
    def test_self_zero(self, rng):
        f = evaluation.l2_normalize(rng.normal(size=(4, 6)))
        np.testing.assert_allclose(np.diag(evaluation.distance_matrix(f, f)), 0.0, atol=1e-12)

    def test_orthonormal(self):
        assert evaluation.distance_matrix(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))[0, 0] == \
            pytest.approx(2.0)

    def test_brute_force(self, rng):
        q, g = rng.normal(size=(5, 7)), rng.normal(size=(9, 7))
        ref = np.array([[((a - b) ** 2).sum() for b in g] for a in q])
        np.testing.assert_allclose(evaluation.distance_matrix(q, g), ref, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            evaluation.distance_matrix(np.zeros((1, 2)), np.zeros((1, 3)))


class TestEmbeddings:
    def test_unit_norm_and_deterministic(self, rng):
        model = randomize(vit.VisionTransformer(tiny_config()), rng)
        x = rng.random((5, 3, 32, 16)).astype(np.float32)
        a = evaluation.extract_embeddings(model, x, batch_size=2)
        b = evaluation.extract_embeddings(model, np.concatenate([x[:1], x[:1]]))
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(b[0], b[1])
        np.testing.assert_allclose(a[0], b[0], atol=1e-6)

    def test_masked_matches_pruned(self, rng):
        model = randomize(vit.VisionTransformer(tiny_config(depth=3, stage_layers=(0, 2))), rng)
        assert masked_vs_pruned(model, rng.random((4, 3, 32, 16)).astype(np.float32), rng) <= 1e-4

    def test_occluded_queries(self, rng):
        from sparsereid.augment import OcclusionPatch

        x = rng.random((3, 3, 32, 16)).astype(np.float32)
        patches = [OcclusionPatch(np.zeros((3, 5, 20), dtype=np.float32))]
        a = evaluation.occlude_queries(x, patches, seed=1)
        b = evaluation.occlude_queries(x, patches, seed=1)
        np.testing.assert_array_equal(a, b)
        assert a.shape == x.shape and not np.array_equal(a, x)
        with pytest.raises(ValueError):
            evaluation.occlude_queries(x, [])


class TestReport:
    def test_csv_and_table(self):
        r = evaluation.EvalReport({1: 0.5, 3: 0.75, 5: 1.0, 10: 1.0}, 0.6, 4, 10, 0, 0.7, 123.4)
        assert len(r.csv_row().split(",")) == len(evaluation.EvalReport.HEADER.split(","))
        assert "Rank-1" in r.table() and "0.6000" in r.table()
