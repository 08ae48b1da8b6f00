"""TIL counting, density scores, and segmentation metrics."""
import numpy as np
import pytest

from tilscore.backends import CellInstance, MockBackend
from tilscore.errors import (
    NoQuantifiedPatchesError,
    PartialFailureError,
    UndefinedMetricError,
)
from tilscore.quantify import (
    SegmentationEval,
    dice_score,
    iou_score,
    multi_slide_score,
    patch_density,
    patient_score,
    pq_score,
    quantify_candidates,
    til_count,
)
from tilscore.sampling import Candidate, sig6
from tilscore.synthetic import load_truth


def test_til_count_counts_inflammatory_only():
    cells = [
        CellInstance(1, 1, "inflammatory"),
        CellInstance(2, 2, "neoplastic"),
        CellInstance(3, 3, "inflammatory"),
        CellInstance(4, 4, "dead"),
    ]
    assert til_count(cells) == 2
    assert til_count([]) == 0


def test_patch_density_worked_examples():
    # 10 cells in a 768 px patch at 0.25 um/px: side 192 um, area 0.036864 mm^2
    assert patch_density(10, 768, 0.25) == pytest.approx(271.2673611111, rel=1e-12)
    # 64 cells in a 512 px patch at 0.5 um/px: area 0.065536 mm^2
    assert patch_density(64, 512, 0.5) == pytest.approx(976.5625, rel=1e-12)
    assert patch_density(0, 768, 0.25) == 0.0


def test_patch_density_mpp_square_law():
    # density scales with 1/mpp^2 and 1/patch_size^2 at fixed count
    rng = np.random.Generator(np.random.PCG64(44))
    for trial in range(1000):
        count = int(rng.integers(0, 500))
        patch = int(rng.integers(64, 2048))
        mpp = float(rng.uniform(0.1, 8.0))
        k = float(rng.uniform(0.25, 4.0))
        d1 = patch_density(count, patch, mpp)
        d2 = patch_density(count, patch, mpp * k)
        assert d2 * k * k == pytest.approx(d1, rel=1e-9)
        d3 = patch_density(count, patch * 2, mpp)
        assert d3 * 4 == pytest.approx(d1, rel=1e-9)


def test_patch_density_validation():
    with pytest.raises(ValueError):
        patch_density(-1, 768, 0.25)
    with pytest.raises(ValueError):
        patch_density(1, 0, 0.25)
    with pytest.raises(ValueError):
        patch_density(1, 768, 0.0)


def test_patient_score_mean():
    assert patient_score([100.0, 200.0, 300.0]) == pytest.approx(200.0)
    with pytest.raises(NoQuantifiedPatchesError):
        patient_score([])


def test_multi_slide_score_mean_of_means():
    # slides are weighted equally regardless of patch count
    assert multi_slide_score([[0.0, 0.0, 0.0, 0.0], [400.0]]) == 200.0
    assert multi_slide_score([[100.0], [300.0]]) == 200.0
    assert multi_slide_score([[5.0, 15.0]]) == 10.0


def test_multi_slide_score_rejects_empty():
    with pytest.raises(NoQuantifiedPatchesError):
        multi_slide_score([])
    with pytest.raises(NoQuantifiedPatchesError):
        multi_slide_score([[100.0], []])


def _relevant(bundle, n=6):
    cands = [
        Candidate(bundle.meta.slide_id, 96 + 96 * (i % 3), 96 + 96 * (i // 3), 96,
                  h_mean=0.1, eligible=True, sampled=True, class_label="stroma")
        for i in range(n)
    ]
    return cands


def test_quantify_sets_count_and_density(make_bundle):
    bundle = make_bundle(slide_id="q1")
    cands = _relevant(bundle)
    backend = MockBackend(load_truth(bundle), seed=9)
    quantify_candidates(backend, bundle, cands)
    mpp = bundle.meta.mpp
    for c in cands:
        assert c.til_count is not None and c.til_count >= 0
        assert c.density_mm2 == sig6(patch_density(c.til_count, 96, mpp))


def test_quantify_workers_equivalent(make_bundle):
    bundle = make_bundle(slide_id="q2")
    a = _relevant(bundle)
    b = [Candidate(c.slide_id, c.x, c.y, c.patch_size, h_mean=c.h_mean,
                   eligible=c.eligible, sampled=c.sampled,
                   class_label=c.class_label) for c in a]
    backend = MockBackend(load_truth(bundle), seed=9)
    quantify_candidates(backend, bundle, a, workers=1)
    quantify_candidates(backend, bundle, b, workers=4)
    assert [(c.til_count, c.density_mm2) for c in a] == \
        [(c.til_count, c.density_mm2) for c in b]


class FlakyBackend:
    """Fails quantify for patches at x == 192, succeeds elsewhere."""

    def __init__(self, inner):
        self.inner = inner

    def quantify(self, patch_id, buf, mpp):
        if patch_id.rsplit(":", 2)[1] == "192":
            raise RuntimeError("synthetic failure")
        return self.inner.quantify(patch_id, buf, mpp)


def test_quantify_partial_failure_raises_with_ids(make_bundle):
    bundle = make_bundle(slide_id="q3")
    cands = _relevant(bundle)
    backend = FlakyBackend(MockBackend(load_truth(bundle), seed=9))
    with pytest.raises(PartialFailureError) as exc:
        quantify_candidates(backend, bundle, cands)
    assert "q3:192:96" in str(exc.value)
    assert len(exc.value.failures) == 2  # x == 192 occurs twice in the grid
    # successful candidates were still annotated
    done = [c for c in cands if c.til_count is not None]
    assert len(done) == 4


def test_quantify_tolerate_failures(make_bundle):
    bundle = make_bundle(slide_id="q4")
    cands = _relevant(bundle)
    backend = FlakyBackend(MockBackend(load_truth(bundle), seed=9))
    out = quantify_candidates(backend, bundle, cands, tolerate_failures=True)
    assert out is cands
    missing = [c for c in cands if c.til_count is None]
    assert len(missing) == 2
    assert all(c.x == 192 for c in missing)
    assert all(c.density_mm2 is None for c in missing)


# ------------------------------------------------------- segmentation metrics

def test_dice_worked_example():
    assert dice_score(50, 10, 10) == pytest.approx(5 / 6, abs=1e-12)
    assert dice_score(0, 5, 0) == 0.0
    assert dice_score(3, 0, 0) == 1.0


def test_dice_validation():
    with pytest.raises(UndefinedMetricError):
        dice_score(0, 0, 0)
    with pytest.raises(ValueError):
        dice_score(-1, 0, 0)


def test_iou_sums_before_dividing():
    # (8/10 and 4/10) pools to 12/20, not mean(0.8, 0.4)
    assert iou_score([8, 4], [10, 10]) == pytest.approx(0.6, abs=1e-12)
    assert iou_score([5], [5]) == 1.0


def test_iou_validation():
    with pytest.raises(UndefinedMetricError):
        iou_score([0, 0], [0, 0])
    with pytest.raises(ValueError):
        iou_score([], [])
    with pytest.raises(ValueError):
        iou_score([1, 2], [10])
    with pytest.raises(ValueError):
        iou_score([11], [10])  # intersection > union
    with pytest.raises(ValueError):
        iou_score([-1], [10])


def test_pq_worked_example():
    # two matches (0.8, 0.6), one unmatched prediction, one unmatched truth
    assert pq_score([0.8, 0.6], tp=2, fp=1, fn=1) == pytest.approx(1.4 / 3, abs=1e-12)
    assert pq_score([], tp=0, fp=3, fn=0) == 0.0


def test_pq_validation():
    with pytest.raises(UndefinedMetricError):
        pq_score([], tp=0, fp=0, fn=0)
    with pytest.raises(ValueError):
        pq_score([0.8], tp=2, fp=0, fn=0)  # tp disagrees with matches
    with pytest.raises(ValueError):
        pq_score([0.5], tp=1, fp=0, fn=0)  # match at threshold is not a match
    with pytest.raises(ValueError):
        pq_score([1.2], tp=1, fp=0, fn=0)


def test_dice_iou_identity():
    # DICE = 2 IoU / (1 + IoU) whenever both come from the same tp/fp/fn pools
    rng = np.random.Generator(np.random.PCG64(99))
    for trial in range(1000):
        tp = int(rng.integers(0, 1000))
        fp = int(rng.integers(0, 1000))
        fn = int(rng.integers(0, 1000))
        if tp + fp + fn == 0:
            continue
        union = tp + fp + fn
        j = iou_score([tp], [union])
        if 2 * tp + fp + fn == 0:
            continue
        d = dice_score(tp, fp, fn)
        assert d == pytest.approx(2 * j / (1 + j), rel=1e-12)


def test_pq_never_exceeds_mean_matched_iou():
    rng = np.random.Generator(np.random.PCG64(123))
    for trial in range(300):
        tp = int(rng.integers(1, 20))
        ious = rng.uniform(0.5 + 1e-9, 1.0, size=tp).tolist()
        fp = int(rng.integers(0, 10))
        fn = int(rng.integers(0, 10))
        pq = pq_score(ious, tp=tp, fp=fp, fn=fn)
        assert pq <= np.mean(ious) + 1e-12
        if fp + fn > 0:
            assert pq < np.mean(ious)


def test_segmentation_eval_serialization(tmp_path):
    ev = SegmentationEval(tp=2, fp=1, fn=1, dice=dice_score(2, 1, 1),
                          iou=iou_score([2], [4]), pq=pq_score([0.8, 0.6], 2, 1, 1),
                          matched_ious=(0.8, 0.6))
    data = ev.to_json_dict()
    assert data["pq"] == pytest.approx(1.4 / 3)
    ev.write_json(tmp_path / "seg.json")
    assert (tmp_path / "seg.json").exists()
    with pytest.raises(ValueError):
        SegmentationEval(tp=1, fp=0, fn=0, dice=1.0, iou=1.0, pq=1.0,
                         matched_ious=(0.8, 0.9))
