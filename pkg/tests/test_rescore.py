import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from conftest import box, dataset_of, image, random_boxes
from contextforest.metrics import SigmaParams
from contextforest.rescore import (
    CombineWeights,
    Detection,
    combine,
    default_grid,
    fit_weights,
    iou,
    load_detections,
    location_scores,
    nms,
    rescored,
    save_detections,
)

SP = SigmaParams(0.1, "position")
SS = SigmaParams(0.2, "scale", center=1.0)


def test_coincident_detection_scores():
    d = Detection.at(0, 0.3, 0.4, 0.2, 0.1, 1.0)
    got = location_scores([d], [box(0.3, 0.4, 0.2, 0.1)], SP, SS)
    assert got[0, 0] == pytest.approx(1 / (0.01 * math.sqrt(2 * math.pi)), rel=1e-14)
    assert got[0, 1] == pytest.approx(SS.norm, rel=1e-14)


def test_location_scores_match_oracle_and_duplication():
    rng = np.random.default_rng(3)
    refs = random_boxes(rng, 30)
    dets = [Detection(0, b, 0.0) for b in random_boxes(rng, 20)]
    got = location_scores(dets, refs, SP, SS)
    for d, (p, s) in zip(dets, got):
        assert p == pytest.approx(oracles.window_score(d.box, refs, "position", SP.sigma), rel=1e-12)
        assert s == pytest.approx(oracles.window_score(d.box, refs, "scale", SS.sigma, 1.0), rel=1e-12)
    np.testing.assert_allclose(location_scores(dets, refs + refs, SP, SS), got, rtol=1e-12)


def test_location_scores_separate_scale_set():
    dets = [Detection.at(0, 0.5, 0.5, 0.2, 0.2, 0.0)]
    a = location_scores(dets, [box(w=0.2, h=0.2)], SP, SS, scale_boxes=[box(w=0.9, h=0.9)])
    b = location_scores(dets, [box(w=0.9, h=0.9)], SP, SS)
    assert a[0, 1] == b[0, 1] and a[0, 0] == pytest.approx(SP.norm)


def test_location_scores_require_references():
    with pytest.raises(ValueError):
        location_scores([Detection.at(0, .5, .5, .1, .1, 0)], [], SP, SS)


def test_combine_examples():
    d = Detection.at(0, .5, .5, .1, .1, 1.0)
    assert combine(d, 0.7, 0.3, CombineWeights(0, 0)) == 1.0
    assert combine(d, 0.2, 0.0, CombineWeights(1, 0)) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        CombineWeights(-1, 0)


def test_nms_identical_and_disjoint():
    a = Detection.at(0, .5, .5, .2, .2, 0.9)
    b = Detection.at(0, .5, .5, .2, .2, 0.4)
    assert nms([b, a], 0.5) == [a]
    far = [Detection.at(0, x, .5, .05, .05, x) for x in (0.1, 0.3, 0.5, 0.7)]
    assert len(nms(far, 0.5)) == 4
    # overlapping boxes in different images never suppress each other
    assert len(nms([a, Detection.at(1, .5, .5, .2, .2, 0.4)], 0.5)) == 2


def random_dets(rng, n, images=3):
    return [Detection.at(int(rng.integers(0, images)), *rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.4, 2),
                         float(rng.standard_normal())) for _ in range(n)]


@pytest.mark.parametrize("thr", [0.1, 0.3, 0.5, 0.7])
def test_nms_matches_reference(thr):
    rng = np.random.default_rng(int(thr * 10))
    dets = random_dets(rng, 100)
    kept = nms(dets, thr)
    ref = oracles.nms([(d.detector_score, d.image_id, (d.box.cx, d.box.cy, d.box.w, d.box.h)) for d in dets], thr)
    assert [(d.detector_score, d.image_id) for d in kept] == [(s, i) for s, i, _ in ref]


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_nms_survivors_below_threshold(seed, thr):
    kept = nms(random_dets(np.random.default_rng(seed), 40, images=2), thr)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.image_id == b.image_id:
                assert iou(a.box, b.box) <= thr


def location_predictive_case():
    """Each image has one object at (0.5, 0.5); the detector prefers a distractor."""
    imgs, dets = [], []
    for i in range(8):
        gt = box(0.5, 0.5, 0.2, 0.2)
        imgs.append(image(i, [0.0], [gt]))
        dets.append(Detection.at(i, 0.5, 0.5, 0.2, 0.2, 0.0))
        dets.append(Detection.at(i, 0.1 + 0.02 * i, 0.1, 0.2, 0.2, 0.5))
    val = dataset_of(imgs, 1, 1)
    geo = location_scores(dets, [box(0.5, 0.5, 0.2, 0.2)], SP, SS)
    return val, dets, geo


def test_fit_weights_prefers_location_when_predictive():
    val, dets, geo = location_predictive_case()
    wts, ap = fit_weights(val, dets, geo)
    assert wts.alpha_pos > 0 or wts.alpha_scale > 0
    base, _ = fit_weights(val, dets, geo, [CombineWeights(0, 0)])
    assert base == CombineWeights(0, 0)
    assert ap == 1.0


def test_fit_weights_order_independent_and_nonempty():
    val, dets, geo = location_predictive_case()
    grid = default_grid()
    a = fit_weights(val, dets, geo, grid)
    b = fit_weights(val, dets, geo, list(reversed(grid)))
    assert a == b
    with pytest.raises(ValueError):
        fit_weights(val, dets, geo, [])


def test_rescored_replaces_scores():
    dets = [Detection.at(0, .5, .5, .1, .1, 1.0)]
    out = rescored(dets, np.array([[2.0, 3.0]]), CombineWeights(0.5, 1.0))
    assert out[0].detector_score == pytest.approx(5.0) and out[0].box == dets[0].box


def test_detection_file_round_trip(tmp_path):
    dets = random_dets(np.random.default_rng(0), 10)
    p = tmp_path / "d.jsonl"
    save_detections(dets, p)
    back = load_detections(p)
    assert [(d.image_id, d.detector_score, d.box) for d in back] == [(d.image_id, d.detector_score, d.box) for d in dets]
