"""Classification of sampled candidates and classifier evaluation."""
import json

import numpy as np
import pytest

from tilscore.backends import MockBackend
from tilscore.classify import classify_candidates, evaluate_classifier, filter_relevant
from tilscore.errors import BackendUnavailableError, UndefinedMetricError
from tilscore.sampling import Candidate, enumerate_candidates, sig6, subsample
from tilscore.synthetic import load_truth
from tilscore.taxonomy import PATCH_CLASSES
from tilscore.tissue import Polygon

from conftest import small_config


def _candidates(bundle, cfg, ratio=1.0):
    w, h = bundle.meta.level_dims[0]
    poly = Polygon(
        vertices=np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float),
        space="level0",
    )
    cands = enumerate_candidates(bundle.meta, poly, cfg.replace(coverage_min=0.0))
    for c in cands:
        c.h_mean = 0.1
        c.eligible = True
    return subsample(cands, ratio, seed=5)


def test_classify_targets_sampled_only(make_bundle):
    bundle = make_bundle(slide_id="cls")
    cfg = small_config()
    cands = _candidates(bundle, cfg, ratio=0.5)
    backend = MockBackend(load_truth(bundle), seed=2)
    classify_candidates(backend, bundle, cands)
    for c in cands:
        if c.sampled:
            assert c.class_label in PATCH_CLASSES
            assert c.class_probs is not None
            assert sum(c.class_probs) == pytest.approx(1.0, abs=1e-4)
        else:
            assert c.class_label is None
            assert c.class_probs is None


def test_classify_probs_quantized_and_label_consistent(make_bundle):
    bundle = make_bundle(slide_id="clq")
    cfg = small_config()
    cands = _candidates(bundle, cfg)
    classify_candidates(MockBackend(load_truth(bundle), seed=2), bundle, cands)
    for c in cands:
        if not c.sampled:
            continue
        assert all(p == sig6(p) for p in c.class_probs)
        assert c.class_label == PATCH_CLASSES[c.class_probs.index(max(c.class_probs))]


def test_classify_matches_planted_regions(make_bundle):
    # interior patches of each planted region should get that region's label
    from tilscore.synthetic import RegionSpec
    regions = [
        RegionSpec(0, 0, 480, 960, "stroma", 1000.0),
        RegionSpec(480, 0, 480, 960, "tumor", 1000.0),
    ]
    bundle = make_bundle(slide_id="clr", regions=regions)
    cfg = small_config()
    cands = _candidates(bundle, cfg)
    classify_candidates(MockBackend(load_truth(bundle), seed=2), bundle, cands)
    for c in cands:
        want = "stroma" if c.x + c.patch_size <= 480 else "tumor"
        if c.x >= 480 or c.x + c.patch_size <= 480:
            assert c.class_label == want, (c.x, c.y)


def test_classify_workers_equivalent(make_bundle):
    bundle = make_bundle(slide_id="clw")
    cfg = small_config()
    a = _candidates(bundle, cfg)
    b = [Candidate(c.slide_id, c.x, c.y, c.patch_size, h_mean=c.h_mean,
                   eligible=c.eligible, sampled=c.sampled) for c in a]
    backend = MockBackend(load_truth(bundle), seed=2)
    classify_candidates(backend, bundle, a, workers=1)
    classify_candidates(backend, bundle, b, workers=4)
    assert [(c.class_label, c.class_probs) for c in a] == \
        [(c.class_label, c.class_probs) for c in b]


def test_classify_error_names_candidate(make_bundle):
    bundle = make_bundle(slide_id="cle")

    class Exploding:
        def classify(self, patch_id, buf, mpp):
            raise BackendUnavailableError("boom")

    cands = _candidates(bundle, small_config(), ratio=0.5)
    with pytest.raises(BackendUnavailableError) as exc:
        classify_candidates(Exploding(), bundle, cands)
    assert "cle:" in str(exc.value)
    assert "boom" in str(exc.value)


def test_filter_relevant():
    mk = lambda label, sampled=True: Candidate(
        "s", 0, 0, 96, eligible=True, sampled=sampled, class_label=label)
    cands = [mk("stroma"), mk("tumor"), mk("necrosis"), mk("normal_lung"),
             mk("stroma", sampled=False), mk(None)]
    kept = filter_relevant(cands)
    assert [c.class_label for c in kept] == ["stroma", "tumor"]
    assert kept[0] is cands[0]  # same objects, not copies


def auc_oracle(scores, positive):
    """Literal Mann-Whitney count over all (positive, negative) pairs."""
    wins = ties = n = 0
    for i, (si, pi) in enumerate(zip(scores, positive)):
        if not pi:
            continue
        for sj, pj in zip(scores, positive):
            if pj:
                continue
            n += 1
            if si > sj:
                wins += 1
            elif si == sj:
                ties += 1
    return (wins + 0.5 * ties) / n


def test_evaluate_classifier_hand_case():
    records = [
        ((0.7, 0.1, 0.1, 0.1), "necrosis"),   # right
        ((0.1, 0.7, 0.1, 0.1), "stroma"),     # right
        ((0.7, 0.1, 0.1, 0.1), "stroma"),     # wrong: predicted necrosis
        ((0.1, 0.1, 0.1, 0.7), "tumor"),      # right
    ]
    report = evaluate_classifier(records)
    assert report.n == 4
    assert report.accuracy == pytest.approx(0.75)
    assert report.confusion[0, 0] == 1
    assert report.confusion[1, 0] == 1
    assert report.confusion[1, 1] == 1
    assert report.confusion[3, 3] == 1
    assert report.confusion.sum() == 4


def test_evaluate_classifier_auc_matches_pair_oracle():
    rng = np.random.Generator(np.random.PCG64(8))
    for trial in range(20):
        n = 30
        t = rng.integers(0, 4, size=n)
        if len(np.unique(t)) < 2:
            continue
        raw = rng.random((n, 4))
        # give the true class a bump so AUC is informative but not 1
        raw[np.arange(n), t] += rng.random(n)
        p = raw / raw.sum(axis=1, keepdims=True)
        report = evaluate_classifier(
            [(tuple(p[i]), PATCH_CLASSES[t[i]]) for i in range(n)])
        for ci in range(4):
            positive = t == ci
            if positive.any() and (~positive).any():
                want = auc_oracle(p[:, ci], positive)
                assert report.per_class_auc[ci] == pytest.approx(want, abs=1e-12)
            else:
                assert np.isnan(report.per_class_auc[ci])


def test_evaluate_classifier_tie_scores_half_credit():
    records = [
        ((0.25, 0.25, 0.25, 0.25), "stroma"),
        ((0.25, 0.25, 0.25, 0.25), "tumor"),
    ]
    report = evaluate_classifier(records)
    assert report.per_class_auc[1] == pytest.approx(0.5)
    assert report.per_class_auc[3] == pytest.approx(0.5)
    assert np.isnan(report.per_class_auc[0])
    assert report.mean_auc == pytest.approx(0.5)


def test_evaluate_classifier_perfect_auc():
    records = [
        ((0.9, 0.1, 0.0, 0.0), "necrosis"),
        ((0.8, 0.2, 0.0, 0.0), "necrosis"),
        ((0.2, 0.8, 0.0, 0.0), "stroma"),
        ((0.1, 0.9, 0.0, 0.0), "stroma"),
    ]
    report = evaluate_classifier(records)
    assert report.per_class_auc[0] == 1.0
    assert report.per_class_auc[1] == 1.0
    assert report.accuracy == 1.0


def test_evaluate_classifier_single_class_truth():
    records = [((0.7, 0.1, 0.1, 0.1), "necrosis")] * 3
    with pytest.raises(UndefinedMetricError):
        evaluate_classifier(records)


def test_evaluate_classifier_input_validation():
    with pytest.raises(ValueError):
        evaluate_classifier([])
    with pytest.raises(ValueError):
        evaluate_classifier([((0.5, 0.5), "stroma")])
    with pytest.raises(ValueError):
        evaluate_classifier([((0.25, 0.25, 0.25, 0.25), "lymphoma")])


def test_report_serialization(tmp_path):
    records = [
        ((0.7, 0.1, 0.1, 0.1), "necrosis"),
        ((0.1, 0.7, 0.1, 0.1), "stroma"),
    ]
    report = evaluate_classifier(records)
    data = json.loads(report.write_json(tmp_path / "r.json").read_text())
    assert data["classes"] == list(PATCH_CLASSES)
    assert data["accuracy"] == 1.0
    assert data["per_class_auc"][2] is None  # absent class -> null, not NaN
    csv_text = report.write_confusion_csv(tmp_path / "c.csv").read_text()
    lines = csv_text.strip().splitlines()
    assert lines[0].split(",")[1:] == list(PATCH_CLASSES)
    assert len(lines) == 5
