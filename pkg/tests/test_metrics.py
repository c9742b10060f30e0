import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmgcam import metrics, testbed
from fmgcam.adapter import predict
from fmgcam.cam import explain
from fmgcam.errors import ParameterError
from fmgcam.metrics import (
    Curve,
    MetricRecord,
    PerturbationConfig,
    aggregate,
    auc,
    deletion_curve,
    evaluate_image,
    insertion_curve,
    perturbation_order,
    saliency_for_rank,
    schedule,
    step_correlation,
)

BLACK = PerturbationConfig(insertion_start="black")


def _p0(s0):
    # pixel_sum with only quadrant 0 lit: scores (s0, 0, 0, 0)
    return math.exp(s0) / (math.exp(s0) + 3.0)


def _lit_image():
    return testbed.make_quadrant_image(32, 32, (1.0, 0.0, 0.0, 0.0), noise=0.0)


class TestAuc:
    def test_unit_rectangle(self):
        assert auc(Curve(np.linspace(0, 1, 5), np.ones(5), np.zeros(4))) == 1.0

    def test_triangle(self):
        assert auc(Curve(np.linspace(0, 1, 11), np.linspace(1, 0, 11), np.zeros(10))) == pytest.approx(0.5, abs=1e-15)

    def test_hand_sum(self):
        c = Curve(np.array([0, 1 / 3, 2 / 3, 1]), np.array([1, 0.5, 0.5, 0]), np.zeros(3))
        hand = (1 / 3) * ((1 + 0.5) / 2 + (0.5 + 0.5) / 2 + (0.5 + 0) / 2)
        assert auc(c) == pytest.approx(hand, abs=1e-15) and hand == pytest.approx(0.5)

    def test_curve_invariants(self):
        with pytest.raises(ParameterError):
            Curve(np.array([0, 0.5, 0.5, 1]), np.ones(4), np.zeros(3))
        with pytest.raises(ParameterError):
            Curve(np.array([0, 0.5, 1]), np.array([0, 1.5, 1]), np.zeros(2))


class TestStepCorrelation:
    def test_proportional(self):
        s = np.array([3.0, 1.0, 2.0, 0.5])
        ys = np.concatenate([[1.0], 1.0 - np.cumsum(0.1 * s)])
        c = Curve(np.linspace(0, 1, 5), ys, s)
        assert step_correlation(c, "deletion") == pytest.approx(1.0, abs=1e-12)
        assert step_correlation(c, "insertion") == pytest.approx(-1.0, abs=1e-12)

    def test_constant_is_degenerate(self):
        c = Curve(np.linspace(0, 1, 4), np.full(4, 0.3), np.array([1.0, 2.0, 3.0]))
        assert step_correlation(c, "deletion", full=True) == (0.0, True)

    def test_bad_mode(self):
        c = Curve(np.linspace(0, 1, 4), np.full(4, 0.3), np.zeros(3))
        with pytest.raises(ParameterError):
            step_correlation(c, "both")

    def test_bounded_and_affine_invariant(self, tiny_cnn):
        img = testbed.make_quadrant_image(16, 16, (0.2, 0.9, 0.4, 0.1), seed=1, channels=3)
        m = testbed.make_model("tiny_cnn", size=16)
        # a permutation keeps every value distinct, so 2s + 3 has the same order exactly
        s = np.random.default_rng(0).permutation(256).reshape(16, 16) / 256
        for mode, fn in (("deletion", deletion_curve), ("insertion", insertion_curve)):
            a = fn(m, img, s, 1, PerturbationConfig(steps=9))
            b = fn(m, img, 2 * s + 3, 1, PerturbationConfig(steps=9))
            assert np.array_equal(a.ys, b.ys)
            ra, rb = step_correlation(a, mode), step_correlation(b, mode)
            assert -1 <= ra <= 1 and ra == pytest.approx(rb, abs=1e-12)


class TestSchedule:
    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 5000), st.integers(2, 600))
    def test_conservation(self, n, T):
        steps = schedule(n, PerturbationConfig(steps=T))
        per = math.ceil(n / T)
        assert sum(s.stop - s.start for s in steps) == n
        assert steps[0].start == 0 and steps[-1].stop == n
        assert all(a.stop == b.start for a, b in zip(steps, steps[1:]))
        assert all(0 < s.stop - s.start <= per for s in steps)
        assert len(steps) <= T

    def test_divisible_has_exact_steps(self):
        assert len(schedule(1024, PerturbationConfig(steps=16))) == 16

    def test_zero_saliency_is_row_major(self):
        assert np.array_equal(perturbation_order(np.zeros((5, 7))), np.arange(35))

    def test_ties_row_major_within_descending(self):
        s = np.array([[0.1, 0.5], [0.5, 0.1]])
        assert perturbation_order(s).tolist() == [1, 2, 0, 3]

    def test_one_pixel_per_step(self):
        m = testbed.make_model("pixel_sum", size=8)
        img = testbed.make_quadrant_image(8, 8, (1, 0, 0, 0), seed=0)
        c = deletion_curve(m, img, np.zeros((8, 8)), 0, PerturbationConfig(steps=64))
        assert len(c.ys) == len(c.xs) == 65 and len(c.step_saliency) == 64

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            PerturbationConfig(steps=1)
        with pytest.raises(ParameterError):
            PerturbationConfig(deletion_baseline="white")
        with pytest.raises(ParameterError):
            PerturbationConfig(blur_sigma=0)
        assert PerturbationConfig().sigma(40, 60) == 2.0
        assert PerturbationConfig().pixels_per_step(32, 32) == 21


class TestCurves:
    def test_deletion_matches_analytic(self, pixel_sum_double):
        img = _lit_image()
        ideal = testbed.pixel_sum_importance(img, 0)
        c = deletion_curve(pixel_sum_double, img, ideal, 0)
        expected = [_p0((256 - min(21 * t, 256)) / 256) for t in range(len(c.ys))]
        np.testing.assert_allclose(c.ys, expected, rtol=0, atol=1e-13)
        assert np.all(np.diff(c.ys) <= 0)

    def test_insertion_matches_analytic(self, pixel_sum_double):
        img = _lit_image()
        ideal = testbed.pixel_sum_importance(img, 0)
        c = insertion_curve(pixel_sum_double, img, ideal, 0, BLACK)
        expected = [_p0(min(21 * t, 256) / 256) for t in range(len(c.ys))]
        np.testing.assert_allclose(c.ys, expected, rtol=0, atol=1e-13)
        assert np.all(np.diff(c.ys) >= 0)

    def test_ideal_dominates_random(self, pixel_sum_double):
        img = _lit_image()
        ideal = testbed.pixel_sum_importance(img, 0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            rand = rng.random((32, 32))
            assert np.all(deletion_curve(pixel_sum_double, img, ideal, 0).ys
                          <= deletion_curve(pixel_sum_double, img, rand, 0).ys + 1e-15)
            assert np.all(insertion_curve(pixel_sum_double, img, ideal, 0, BLACK).ys
                          >= insertion_curve(pixel_sum_double, img, rand, 0, BLACK).ys - 1e-15)

    def test_negated_ideal_below_100_random_orderings(self, pixel_sum_double):
        img = _lit_image()
        neg = insertion_curve(pixel_sum_double, img, -testbed.pixel_sum_importance(img, 0), 0, BLACK)
        rng = np.random.default_rng(1)
        for _ in range(100):
            rand = insertion_curve(pixel_sum_double, img, rng.random((32, 32)), 0, BLACK)
            assert np.all(neg.ys <= rand.ys + 1e-15)
            assert auc(neg) < auc(rand)

    def test_ideal_deletion_correlation(self, pixel_sum_double):
        img = testbed.make_quadrant_image(32, 32, (1.0, 0.0, 0.0, 0.0), seed=0)
        c = deletion_curve(pixel_sum_double, img, testbed.pixel_sum_importance(img, 0), 0)
        assert step_correlation(c, "deletion") > 0.9

    @pytest.mark.parametrize("start", ["blur", "black"])
    def test_endpoints_bit_exact(self, tiny_cnn, start):
        img = testbed.make_quadrant_image(32, 32, (0.2, 0.9, 0.4, 0.1), seed=1, channels=3)
        sal = np.random.default_rng(0).random((32, 32))
        p = predict(tiny_cnn, img).probabilities[2]
        cfg = PerturbationConfig(insertion_start=start)
        assert deletion_curve(tiny_cnn, img, sal, 2, cfg).ys[0] == p
        assert insertion_curve(tiny_cnn, img, sal, 2, cfg).ys[-1] == p

    def test_batched_curves_bit_identical(self):
        one = testbed.make_model("pixel_sum")
        many = testbed.make_model("pixel_sum", batch_size=16)
        img = testbed.make_quadrant_image(32, 32, (0.9, 0, 0, 0.7), seed=3)
        sal = np.random.default_rng(0).random((32, 32))
        for fn in (deletion_curve, insertion_curve):
            assert np.array_equal(fn(one, img, sal, 0).ys, fn(many, img, sal, 0).ys)

    def test_blur_start_is_gaussian(self, pixel_sum):
        from scipy.ndimage import gaussian_filter

        img = testbed.make_quadrant_image(32, 32, (0.9, 0, 0, 0.7), seed=3)
        start = metrics.baseline_image(pixel_sum, img, "blur", PerturbationConfig())
        np.testing.assert_allclose(start, gaussian_filter(img.pixels, (1.6, 1.6, 0)), rtol=1e-6)

    def test_saliency_resolution_checked(self, pixel_sum):
        img = testbed.make_quadrant_image(32, 32, (0.9, 0, 0, 0.7))
        with pytest.raises(Exception):
            deletion_curve(pixel_sum, img, np.zeros((16, 16)), 0)


class TestSaliencyForRank:
    def test_k1_single_map(self, tiny_cnn):
        img = testbed.make_quadrant_image(32, 32, (0.2, 0.9, 0.4, 0.1), seed=1, channels=3)
        ex = explain(tiny_cnn, img, K=1)
        assert np.array_equal(saliency_for_rank("fm_g_cam", ex.fused, ex.grad_cams, 1), ex.fused.channel(0))
        assert np.array_equal(saliency_for_rank("grad_cam", ex.fused, ex.grad_cams, 1), ex.grad_cams[0].values)
        assert saliency_for_rank("grad_cam", ex.fused, ex.grad_cams, 1, (32, 32)).shape == (32, 32)
        with pytest.raises(ParameterError):
            saliency_for_rank("grad_cam", ex.fused, ex.grad_cams, 2)

    def test_fused_rank2_in_its_quadrant(self, pixel_sum):
        img = testbed.make_quadrant_image(32, 32, (0.9, 0.0, 0.0, 0.7), seed=0)
        ex = explain(pixel_sum, img, K=2)
        m = saliency_for_rank("fm_g_cam", ex.fused, ex.grad_cams, 2, (32, 32))
        q = testbed.quadrant_masks(32, 32)[ex.ranked.class_ids[1]]
        assert m[q].sum() > 0 and not m[~q].any()

    def test_unknown_type(self, tiny_cnn):
        img = testbed.make_quadrant_image(32, 32, (0.2, 0.9, 0.4, 0.1), channels=3)
        ex = explain(tiny_cnn, img, K=1)
        with pytest.raises(ParameterError):
            saliency_for_rank("score_cam", ex.fused, ex.grad_cams, 1)


class TestEvaluateImage:
    CFG = PerturbationConfig(steps=9)

    def _img(self, seed=1):
        return testbed.make_quadrant_image(32, 32, (0.2, 0.9, 0.4, 0.1), seed=seed, channels=3)

    def test_record_count(self, tiny_cnn10):
        recs = evaluate_image(tiny_cnn10, self._img(), 5, cfg=self.CFG)
        assert len(recs) == 10
        assert [(r.cam_type, r.class_rank) for r in recs] == [(t, k) for t in metrics.CAM_TYPES for k in range(1, 6)]
        assert len(evaluate_image(tiny_cnn10, self._img(), 1, ("grad_cam",), self.CFG)) == 1

    def test_deterministic(self, tiny_cnn10):
        a = evaluate_image(tiny_cnn10, self._img(), 3, cfg=self.CFG)
        b = evaluate_image(tiny_cnn10, self._img(), 3, cfg=self.CFG)
        assert a == b

    @pytest.mark.parametrize("r", [1, 2, 3, 4])
    def test_gradcam_rank_independent_of_k(self, tiny_cnn10, r):
        full = evaluate_image(tiny_cnn10, self._img(2), 5, ("grad_cam",), self.CFG)
        part = evaluate_image(tiny_cnn10, self._img(2), r, ("grad_cam",), self.CFG)
        assert part == full[:r]

    def test_bad_arguments(self, tiny_cnn10):
        with pytest.raises(ParameterError):
            evaluate_image(tiny_cnn10, self._img(), 0)
        with pytest.raises(ParameterError):
            evaluate_image(tiny_cnn10, self._img(), 2, ("lime",))


def _rec(image_id="a", cam_type="fm_g_cam", rank=1, x=(0.1, 0.2, 0.3, 0.4)):
    return MetricRecord(image_id, cam_type, rank, 0, *x)


class TestAggregate:
    def test_single_record(self):
        (row,) = aggregate([_rec()])
        assert (row["mean_dauc"], row["mean_iauc"], row["mean_dc"], row["mean_ic"]) == (0.1, 0.2, 0.3, 0.4)

    def test_symmetric_mean_zero(self):
        (row,) = aggregate([_rec(x=(0.1, 0.2, 0.3, -0.4)), _rec("b", x=(0.1, 0.2, -0.3, 0.4))])
        assert row["mean_dc"] == 0.0 and row["mean_ic"] == 0.0

    def test_table_order(self):
        recs = [_rec(cam_type=t, rank=k) for t in ("grad_cam", "fm_g_cam") for k in (3, 1, 2)]
        rows = aggregate(recs)
        assert [(r["cam_type"], r["class_rank"]) for r in rows] == [
            ("fm_g_cam", 1), ("fm_g_cam", 2), ("fm_g_cam", 3), ("grad_cam", 1), ("grad_cam", 2), ("grad_cam", 3)
        ]

    def test_empty(self):
        with pytest.raises(ParameterError):
            aggregate([])

    def test_record_invariants(self):
        with pytest.raises(ParameterError):
            _rec(x=(-0.1, 0.2, 0.3, 0.4))
        with pytest.raises(ParameterError):
            _rec(x=(0.1, 0.2, 1.3, 0.4))

    def test_paper_row_fits_schema(self, tmp_path):
        # FM-G-CAM rank-1 row as reported for the full-scale run
        row = {"cam_type": "fm_g_cam", "class_rank": 1, "mean_iauc": 0.000345, "mean_ic": -0.165391,
               "mean_dauc": 0.000394, "mean_dc": 0.062597, "count": 1}
        metrics.write_aggregate_csv(tmp_path / "agg.csv", [row])
        lines = (tmp_path / "agg.csv").read_text().splitlines()
        assert lines[0] == "CAM Type,Class Rank,Mean IAUC,Mean IC,Mean DAUC,Mean DC"
        assert lines[1] == "FM-G-CAM,1,0.000345,-0.165391,0.000394,0.062597"


class TestPersistence:
    def test_csv_round_trip(self, tmp_path):
        recs = [_rec("x/1.png", t, k, (0.1 * k, 1 / 3, -0.25, 0.123456789012345)) for t in metrics.CAM_TYPES for k in (1, 2)]
        metrics.write_records_csv(tmp_path / "r.csv", recs)
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(metrics.RECORD_FIELDS)
        assert metrics.read_records_csv(tmp_path / "r.csv") == recs

    def test_wrong_columns(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ParameterError):
            metrics.read_records_csv(tmp_path / "r.csv")

    def test_aggregate_csv_independent_means(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [
            MetricRecord(f"i{n}", t, k, 0, *rng.random(2), *(rng.random(2) * 2 - 1))
            for n in range(7) for t in metrics.CAM_TYPES for k in (1, 2, 3)
        ]
        metrics.write_records_csv(tmp_path / "r.csv", recs)
        metrics.write_aggregate_csv(tmp_path / "a.csv", aggregate(recs))
        with open(tmp_path / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        with open(tmp_path / "a.csv") as fh:
            agg = list(csv.DictReader(fh))
        names = {"fm_g_cam": "FM-G-CAM", "grad_cam": "Grad-CAM"}
        for a in agg:
            grp = [r for r in rows if names[r["cam_type"]] == a["CAM Type"] and r["class_rank"] == a["Class Rank"]]
            assert len(grp) == 7
            for col, key in (("Mean IAUC", "iauc"), ("Mean IC", "ic"), ("Mean DAUC", "dauc"), ("Mean DC", "dc")):
                assert float(a[col]) == pytest.approx(sum(float(r[key]) for r in grp) / 7, rel=1e-12)
