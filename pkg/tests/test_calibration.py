import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import dirichlet as sp_dirichlet

from semfov.calibration import (
    CalibrationModel,
    EccentricityBins,
    TrainingRecord,
    TrainingSet,
    cell_levels,
    distance_level,
    train,
)
from semfov.semantic_map import GridGeometry

BINS = EccentricityBins.uniform(5)
GEOM = GridGeometry(640, 480)


def model_from(alpha, bins=None):
    alpha = np.asarray(alpha, dtype=float)
    k1, n = alpha.shape[:2]
    return CalibrationModel(k1 - 1, bins or EccentricityBins.uniform(n), alpha, np.full((k1, n), 100))


def random_table(rng, k1, n, lo=0.5, hi=8.0):
    return rng.uniform(lo, hi, size=(k1, n, k1))


class TestBins:
    def test_uniform_edges(self):
        assert BINS.edges == (0.2, 0.4, 0.6, 0.8, 1.0)

    @pytest.mark.parametrize("edges", [(), (0.5, 0.5, 1.0), (0.2, 0.9), (0.0, 1.0)])
    def test_invalid(self, edges):
        with pytest.raises(ValueError):
            EccentricityBins(edges)

    def test_levels(self):
        assert BINS.level(0.0) == 0
        assert BINS.level(0.5) == 2
        assert BINS.level(0.4) == 1  # upper edges are inclusive
        assert BINS.level(1.7) == 4
        np.testing.assert_array_equal(BINS.level(np.array([0.1, 0.3, 0.99])), [0, 1, 4])

    def test_distance_level(self):
        centre = (320, 240)
        assert distance_level(centre, centre, GEOM, BINS) == 0
        assert distance_level((0, 0), centre, GEOM, BINS) == 4
        assert distance_level((640, 480), centre, GEOM, BINS) == 4
        # half of the half-diagonal (400 px) along the diagonal direction
        assert distance_level((320 + 0.5 * 320, 240 + 0.5 * 240), centre, GEOM, BINS) == 2

    def test_cell_levels(self):
        table = cell_levels(GEOM, BINS)
        assert table.shape == (100, 100)
        np.testing.assert_array_equal(np.diag(table), 0)
        np.testing.assert_array_equal(table, table.T)
        c = GEOM.cell_centers().reshape(-1, 2)
        i, j = 7, 63
        assert table[i, j] == BINS.level_of(c[j], c[i], GEOM)


class TestCalibrate:
    def test_two_class_hand_value(self):
        m = model_from([[[5, 1]], [[1, 5]]], EccentricityBins((1.0,)))
        np.testing.assert_allclose(m.calibrate([0.8, 0.2], 0), [256 / 257, 1 / 257], rtol=1e-12)
        np.testing.assert_allclose(m.calibrate([0.8, 0.2], 0), [0.9961, 0.0039], atol=1e-4)

    def test_identical_likelihoods_give_uniform(self):
        a = np.tile([2.0, 3.0, 1.0], (3, 2, 1))
        np.testing.assert_allclose(model_from(a).calibrate([0.2, 0.5, 0.3], 1), 1 / 3)

    def test_swap_symmetry(self):
        m = model_from([[[5, 1]], [[1, 5]]], EccentricityBins((1.0,)))
        np.testing.assert_allclose(m.calibrate([0.3, 0.7], 0), m.calibrate([0.7, 0.3], 0)[::-1])

    def test_matches_scipy_bayes_rule(self):
        rng = np.random.default_rng(0)
        a = random_table(rng, 4, 3)
        m = model_from(a)
        s = rng.dirichlet(np.ones(4))
        for d in range(3):
            dens = np.array([sp_dirichlet.pdf(s, a[k, d]) for k in range(4)])
            np.testing.assert_allclose(m.calibrate(s, d), dens / dens.sum(), rtol=1e-9)

    def test_extreme_alphas_do_not_overflow(self):
        a = np.array([[[800.0, 1.0, 1.0]], [[1.0, 900.0, 1.0]], [[1.0, 1.0, 700.0]]])
        out = model_from(a, EccentricityBins((1.0,))).calibrate([1e-9, 1 - 2e-9, 1e-9], 0)
        assert np.all(np.isfinite(out))
        assert out.argmax() == 1

    def test_vectorized(self):
        rng = np.random.default_rng(1)
        m = model_from(random_table(rng, 3, 4))
        s = rng.dirichlet(np.ones(3), size=6)
        lv = np.array([0, 1, 2, 3, 0, 2])
        out = m.calibrate(s, lv)
        for i in range(6):
            np.testing.assert_allclose(out[i], m.calibrate(s[i], lv[i]))

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_output_is_score_vector(self, seed):
        rng = np.random.default_rng(seed)
        m = model_from(random_table(rng, 4, 2, 0.05, 60))
        s = rng.dirichlet(np.full(4, 0.3))
        out = m.calibrate(s, int(rng.integers(2)))
        assert np.all(out >= 0)
        assert out.sum() == pytest.approx(1.0)


class TestExpectedScores:
    def test_dominant_class(self):
        rng = np.random.default_rng(2)
        a = random_table(rng, 3, 2)
        m = model_from(a)
        beta = np.array([0.5, 1e6, 0.5])
        np.testing.assert_allclose(m.expected_scores(beta, 1), a[1, 1] / a[1, 1].sum(), atol=1e-5)

    def test_uniform_two_classes(self):
        a = np.array([[[4.0, 1.0]], [[1.0, 3.0]]])
        m = model_from(a, EccentricityBins((1.0,)))
        np.testing.assert_allclose(m.expected_scores([0.5, 0.5], 0), 0.5 * (np.array([0.8, 0.2]) + [0.25, 0.75]))

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        a = random_table(rng, 4, 3)
        m = model_from(a)
        beta = np.array([1.0, 3.0, 0.5, 2.0])
        n = 100_000
        classes = rng.choice(4, size=n, p=beta / beta.sum())
        draws = np.array([rng.dirichlet(a[k, 2]) for k in classes[:20_000]])
        # gamma trick for the rest keeps the test quick
        g = rng.standard_gamma(a[classes[20_000:], 2])
        draws = np.vstack([draws, g / g.sum(axis=1, keepdims=True)])
        np.testing.assert_allclose(m.expected_scores(beta, 2), draws.mean(axis=0), rtol=0.01)

    def test_local_is_level_zero(self):
        m = model_from(random_table(np.random.default_rng(4), 3, 3))
        beta = np.array([0.7, 2.0, 1.1])
        np.testing.assert_array_equal(m.expected_local_scores(beta), m.expected_scores(beta, 0))

    def test_symmetric_local_table(self):
        a = np.full((3, 2, 3), 1.0) + 4 * np.eye(3)[:, None, :]
        np.testing.assert_allclose(model_from(a).expected_local_scores([0.5, 0.5, 0.5]), 1 / 3)

    @given(st.lists(st.floats(0.01, 100), min_size=3, max_size=3))
    def test_in_convex_hull(self, beta):
        a = random_table(np.random.default_rng(5), 3, 2)
        means = a[:, 0] / a[:, 0].sum(axis=-1, keepdims=True)
        out = model_from(a).expected_scores(beta, 0)
        assert out.sum() == pytest.approx(1.0)
        assert np.all(out >= means.min(axis=0) - 1e-12) and np.all(out <= means.max(axis=0) + 1e-12)


def synth_records(alpha, per_bin, rng, bins):
    k1, n = alpha.shape[:2]
    lower = np.concatenate([[0.0], bins.edges[:-1]])
    recs = []
    for k in range(k1):
        for d in range(n):
            s = rng.dirichlet(alpha[k, d], size=per_bin)
            dist = rng.uniform(lower[d], bins.edges[d], size=per_bin)
            dist = np.maximum(dist, np.nextafter(lower[d], 1))
            recs.append(TrainingSet(s, np.full(per_bin, k), dist))
    return TrainingSet(
        np.vstack([r.scores for r in recs]),
        np.concatenate([r.classes for r in recs]),
        np.concatenate([r.distances for r in recs]),
    )


class TestTrain:
    def test_closed_loop_recovery(self):
        rng = np.random.default_rng(6)
        bins = EccentricityBins.uniform(2)
        alpha = rng.uniform(1, 10, size=(3, 2, 3))
        m = train(synth_records(alpha, 10_000, rng, bins), 2, bins)
        assert m.populated.all()
        np.testing.assert_allclose(m.alpha, alpha, rtol=0.05)

    def test_single_partition(self):
        rng = np.random.default_rng(7)
        s = rng.dirichlet([4, 1, 1], size=200)
        recs = [TrainingRecord(x, 0, 0.1) for x in s]
        m = train(recs, 2, BINS)
        assert m.populated.sum() == 1 and m.populated[0, 0]
        assert m.counts[0, 0] == 200 and m.counts.sum() == 200
        assert m.source[0, 3] == "level 0"
        assert m.source[1, 0] == "missing"
        with pytest.raises(ValueError, match="no usable likelihood"):
            m.calibrate(s[0], 0)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        data = synth_records(rng.uniform(1, 5, size=(3, 2, 3)), 300, rng, EccentricityBins.uniform(2))
        a = train(data, 2, EccentricityBins.uniform(2)).to_json()
        b = train(data, 2, EccentricityBins.uniform(2)).to_json()
        assert a == b

    def test_empty(self):
        with pytest.raises(ValueError):
            train([], 2, BINS)

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            train([TrainingRecord(np.array([0.5, 0.5]), 0, 0.1)] * 60, 2, BINS)


class TestBackoff:
    def make(self):
        alpha = np.full((2, 5, 2), np.nan)
        alpha[0, 1] = [3, 1]
        alpha[0, 3] = [2, 1]
        alpha[1, 4] = [1, 4]
        class_alpha = np.array([[2.5, 1.0], [1.0, 3.0]])
        return CalibrationModel(1, BINS, alpha, np.zeros((2, 5), int), class_alpha)

    def test_nearest_level(self):
        m = self.make()
        assert list(m.source[0]) == ["level 1", "fit", "level 1", "fit", "level 3"]
        np.testing.assert_array_equal(m.resolved[0, 2], [3, 1])  # tie goes inward
        assert list(m.source[1]) == ["level 4"] * 4 + ["fit"]

    def test_pooled_fallback(self):
        alpha = np.full((2, 2, 2), np.nan)
        alpha[0, 0] = [3, 1]
        m = CalibrationModel(1, EccentricityBins.uniform(2), alpha, np.zeros((2, 2), int), [[2.0, 1.0], [1.0, 2.0]])
        assert m.source[1, 0] == "pooled"
        np.testing.assert_array_equal(m.resolved[1, 1], [1.0, 2.0])
        assert m.calibrate([0.5, 0.5], 1).shape == (2,)

    def test_report_lists_counts_and_sources(self):
        text = self.make().report()
        assert "level 1" in text and "fit" in text


class TestSerialization:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        data = synth_records(rng.uniform(1, 5, size=(3, 2, 3)), 100, rng, EccentricityBins.uniform(2))
        data.classes[data.classes == 2] = 1  # leave class 2 empty
        m = train(data, 2, EccentricityBins.uniform(2))
        path = tmp_path / "m.json"
        m.save(path)
        back = CalibrationModel.load(path)
        assert back.to_json() == path.read_text()
        np.testing.assert_array_equal(back.alpha, m.alpha)
        assert json.loads(path.read_text())["alpha"][2] == [None, None]

    def test_records_jsonl_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        data = synth_records(rng.uniform(1, 5, size=(2, 2, 2)), 5, rng, EccentricityBins.uniform(2))
        path = tmp_path / "r.jsonl"
        data.write_jsonl(path)
        back = TrainingSet.read_jsonl(path)
        np.testing.assert_array_equal(back.scores, data.scores)
        np.testing.assert_array_equal(back.classes, data.classes)
        np.testing.assert_array_equal(back.distances, data.distances)

    @pytest.mark.parametrize(
        "bad",
        ['{"scores": [0.5, 0.5], "class": 3, "distance": 0.1}', '{"scores": [0.5, 0.5]}', "not json",
         '{"scores": [0.5, 0.5], "class": 0, "distance": 1.5}'],
    )
    def test_schema_errors_name_the_line(self, tmp_path, bad):
        path = tmp_path / "r.jsonl"
        path.write_text('{"scores": [0.4, 0.6], "class": 1, "distance": 0.2}\n' + bad + "\n")
        with pytest.raises(ValueError, match=":2:"):
            TrainingSet.read_jsonl(path)
