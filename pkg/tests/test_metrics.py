import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundloc.data import BinaryMask, BoundingBox, FrameAnnotation, Heatmap, ManifestRecord, box_raster
from soundloc.errors import ContractError, MissingPredictionError
from soundloc.metrics import (
    EvalConfig,
    auc,
    binarize,
    ciou_frame,
    evaluate,
    iou,
    minmax_normalize,
    results_rows,
)
from tests import oracles


def _record(frame_id, boxes, w=16, h=16):
    return ManifestRecord(frame_id, f"{frame_id}.png", FrameAnnotation(frame_id, w, h, tuple(boxes)), "t")


class TestNormalize:
    def test_affine(self):
        assert minmax_normalize(Heatmap(np.array([[2.0, 4.0]]))).values.tolist() == [[0.0, 1.0]]

    def test_constant_is_zero(self):
        out = minmax_normalize(Heatmap(np.full((2, 2), 3.0)))
        assert out.normalized
        assert not out.values.any()

    def test_already_normalized_unchanged(self):
        v = np.array([[0, 0.5], [1, 0.75]], dtype=np.float32)
        assert np.array_equal(minmax_normalize(Heatmap(v)).values, v)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        once = minmax_normalize(Heatmap(rng.standard_normal((7, 5))))
        assert np.array_equal(minmax_normalize(once).values, once.values)


class TestBinarize:
    def test_example(self):
        h = Heatmap(np.array([[0, 0.5], [1, 0.25]]), normalized=True)
        assert binarize(h, 0.5).values.tolist() == [[False, True], [True, False]]

    def test_all_zero(self):
        assert not binarize(Heatmap(np.zeros((3, 3)), normalized=True), 0.1).values.any()

    def test_zero_threshold(self):
        assert binarize(Heatmap(np.zeros((3, 3)), normalized=True), 0.0).values.all()

    def test_requires_normalized(self):
        with pytest.raises(ContractError):
            binarize(Heatmap(np.array([[0.0, 2.0]])), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_threshold(self, seed, a, b):
        lo, hi = sorted((a, b))
        h = minmax_normalize(Heatmap(np.random.default_rng(seed).random((9, 9))))
        assert not (binarize(h, hi).values & ~binarize(h, lo).values).any()


class TestIoU:
    def test_identical(self):
        m = BinaryMask(box_raster(BoundingBox(1, 1, 3, 3), 8, 8))
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = BinaryMask(box_raster(BoundingBox(0, 0, 2, 2), 8, 8))
        b = BinaryMask(box_raster(BoundingBox(4, 4, 2, 2), 8, 8))
        assert iou(a, b) == 0.0

    def test_derived_third(self):
        boxes = [(0, 0, 8, 8), (4, 0, 8, 8)]
        pred = [[cell[0] for cell in row] for row in oracles.raster(boxes, 16, 16)]
        gt = [[cell[1] for cell in row] for row in oracles.raster(boxes, 16, 16)]
        expected = oracles.iou(pred, gt)
        assert expected == pytest.approx(1 / 3)
        got = iou(BinaryMask(box_raster(BoundingBox(0, 0, 8, 8), 16, 16)), BinaryMask(box_raster(BoundingBox(4, 0, 8, 8), 16, 16)))
        assert got == expected

    def test_empty_union(self):
        z = BinaryMask(np.zeros((4, 4), bool))
        assert iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            iou(BinaryMask(np.zeros((4, 4), bool)), BinaryMask(np.zeros((4, 5), bool)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_symmetric_bounded(self, h, w, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((h, w)) < 0.4, rng.random((h, w)) < 0.4
        v = iou(BinaryMask(a), BinaryMask(b))
        assert v == iou(BinaryMask(b), BinaryMask(a))
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (np.array_equal(a, b) and a.any())


class TestCiouFrame:
    def test_perfect(self):
        ann = FrameAnnotation("f", 16, 16, (BoundingBox(3, 4, 5, 6),))
        h = Heatmap(box_raster(ann.boxes[0], 16, 16).astype(np.float32))
        assert ciou_frame(h, ann) == 1.0

    def test_constant_heatmap(self):
        ann = FrameAnnotation("f", 16, 16, (BoundingBox(3, 4, 5, 6),))
        assert ciou_frame(Heatmap(np.full((16, 16), 7.0)), ann) == 0.0

    def test_ramp_pipeline(self):
        raw = [[float(c) for c in range(16)] for _ in range(16)]
        gt = [[cell[0] for cell in row] for row in oracles.raster([(8, 0, 8, 16)], 16, 16)]
        expected = oracles.iou(oracles.threshold(oracles.normalize(raw), 0.5), gt)
        ann = FrameAnnotation("f", 16, 16, (BoundingBox(8, 0, 8, 16),))
        assert ciou_frame(Heatmap(np.array(raw)), ann, EvalConfig(bin_threshold=0.5)) == expected

    def test_dimension_mismatch(self):
        ann = FrameAnnotation("f", 16, 16, (BoundingBox(3, 4, 5, 6),))
        with pytest.raises(ContractError):
            ciou_frame(Heatmap(np.zeros((16, 15))), ann)

    def test_auto_min_agree(self):
        multi = FrameAnnotation("f", 8, 8, (BoundingBox(0, 0, 4, 4, annotator=1), BoundingBox(2, 2, 4, 4, annotator=2)))
        single = FrameAnnotation("f", 8, 8, (BoundingBox(0, 0, 4, 4), BoundingBox(2, 2, 4, 4)))
        assert EvalConfig().agree_for(multi) == 2
        assert EvalConfig().agree_for(single) == 1
        assert EvalConfig(min_agree=3).agree_for(single) == 3

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-100, 100))
    def test_positive_affine_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        # Quantized values keep a*h+b away from rounding onto the threshold.
        raw = rng.integers(0, 64, (12, 12)).astype(np.float64)
        raw[0, 0], raw[0, 1] = 0, 63
        ann = FrameAnnotation("f", 12, 12, (BoundingBox(2, 2, 6, 7),))
        assert ciou_frame(Heatmap(raw), ann) == ciou_frame(Heatmap(a * raw + b), ann)


class TestAUC:
    def test_all_zero(self):
        assert auc({"a": 0.0, "b": 0.0}) == 0.0

    def test_single_052(self):
        assert auc({"a": 0.52}) == 0.525
        assert oracles.trapezoid_auc([0.52], [k / 20 for k in range(21)]) == pytest.approx(0.525)

    def test_all_one_strict(self):
        assert auc({"a": 1.0, "b": 1.0}) == 0.975

    def test_inclusive_variant(self):
        assert auc({"a": 1.0}, strict=False) == 1.0

    def test_empty(self):
        with pytest.raises(ContractError):
            auc({})

    @pytest.mark.parametrize("grid", [(0.1, 1.0), (0.0, 0.5), (0.0, 0.6, 0.4, 1.0)])
    def test_bad_grid(self, grid):
        with pytest.raises(ContractError):
            auc({"a": 0.5}, grid)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
    def test_matches_oracle_and_monotone(self, scores, seed):
        grid = [k / 20 for k in range(21)]
        per = {str(i): s for i, s in enumerate(scores)}
        assert auc(per) == pytest.approx(oracles.trapezoid_auc(scores, grid), abs=1e-12)
        bump = np.random.default_rng(seed).random(len(scores))
        higher = {k: min(1.0, v + bump[i]) for i, (k, v) in enumerate(per.items())}
        assert auc(higher) >= auc(per) - 1e-12


class TestEvaluate:
    def test_two_frames(self):
        recs = [_record("a", [BoundingBox(0, 0, 8, 8)]), _record("b", [BoundingBox(0, 0, 8, 8)])]
        good = Heatmap(box_raster(BoundingBox(0, 0, 8, 8), 16, 16).astype(np.float32))
        bad = Heatmap(box_raster(BoundingBox(8, 8, 8, 8), 16, 16).astype(np.float32))
        res = evaluate({"a": good, "b": bad}, recs, EvalConfig(ciou_threshold=0.5))
        assert res.per_frame_ciou == {"a": 1.0, "b": 0.0}
        assert res.ciou_at_tau == 0.5
        assert res.auc == pytest.approx(oracles.trapezoid_auc([1.0, 0.0], [k / 20 for k in range(21)]))

    def test_missing(self):
        recs = [_record("a", [BoundingBox(0, 0, 8, 8)]), _record("b", [BoundingBox(0, 0, 8, 8)])]
        with pytest.raises(MissingPredictionError) as info:
            evaluate({}, recs)
        assert info.value.frame_ids == ["a", "b"]

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(0)
        recs = [_record(f"f{i}", [BoundingBox(2, 2, 9, 9)]) for i in range(8)]
        preds = {r.frame_id: Heatmap(rng.random((16, 16))) for r in recs}
        a = evaluate(preds, recs, EvalConfig())
        b = evaluate(preds, recs, EvalConfig(workers=4))
        assert a == b

    def test_binarization_mode(self):
        recs = [_record("a", [BoundingBox(0, 0, 8, 16)])]
        raw = np.tile(np.arange(16, dtype=np.float64)[::-1], (16, 1))
        res = evaluate({"a": Heatmap(raw)}, recs, EvalConfig(auc_mode="binarization"))
        grid = [k / 20 for k in range(21)]
        norm = oracles.normalize(raw.tolist())
        gt = [[c < 8 for c in range(16)] for _ in range(16)]
        curve = [oracles.iou(oracles.threshold(norm, t), gt) for t in grid]
        expected = sum((grid[k + 1] - grid[k]) * (curve[k] + curve[k + 1]) / 2 for k in range(20))
        assert res.auc == pytest.approx(expected, abs=1e-12)

    def test_rows_format(self):
        from soundloc.metrics import EvalResult

        rows = results_rows("ds", "m", EvalResult({}, 1 / 3, 0.5), EvalConfig(ciou_threshold=0.3))
        assert rows == [["ds", "m", "ciou@0.3", "0.333"], ["ds", "m", "auc", "0.500"]]
