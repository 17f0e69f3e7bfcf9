import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from conftest import box, random_boxes
from contextforest.metrics import (
    SIGMA_EPSILON,
    PropertyKind,
    SigmaParams,
    compactness,
    distance,
    estimate_sigma,
    kde_window_score,
    kde_window_scores,
    retrieval_quality,
)

KINDS = list(PropertyKind)
unit = st.floats(0.0, 1.0)
size = st.floats(0.01, 1.0)


@st.composite
def boxes_st(draw, min_size=1, max_size=12):
    n = draw(st.integers(min_size, max_size))
    return [
        box(draw(unit), draw(unit), draw(size), draw(size),
            draw(st.lists(st.floats(-3, 3), min_size=3, max_size=3)))
        for _ in range(n)
    ]


def test_scale_distance_hand_value():
    assert distance("scale", box(w=0.2, h=0.1), box(w=0.1, h=0.2)) == pytest.approx(4.0)


def test_scale_identical_is_one_and_position_ignores_size():
    a = box(0.3, 0.4, 0.2, 0.5)
    assert distance(PropertyKind.SCALE, a, a) == 1.0
    assert distance(PropertyKind.POSITION, a, box(0.3, 0.4, 0.9, 0.1)) == 0.0


def test_appearance_dimension_mismatch():
    with pytest.raises(ValueError, match="3 vs 2"):
        distance("appearance", box(app=(1, 2, 3)), box(app=(1, 2)))


@given(boxes_st(2, 2), st.sampled_from(KINDS))
def test_distance_symmetric_and_matches_oracle(bs, kind):
    a, b = bs
    assert distance(kind, a, b) == distance(kind, b, a)
    assert distance(kind, a, b) == pytest.approx(oracles.dist(kind, a, b), rel=1e-12, abs=1e-15)


@given(st.floats(0.01, 1), st.floats(0.01, 1))
def test_scale_self_distance_is_one(w, h):
    assert distance("scale", box(w=w, h=h), box(w=w, h=h)) == 1.0


def test_compactness_two_identical_boxes():
    s = SigmaParams(1.0, "position")
    assert compactness([box(), box()], "position", s) == pytest.approx(1 / (2 * math.sqrt(2 * math.pi)), rel=1e-14)


def test_compactness_singleton_and_empty_are_zero():
    s = SigmaParams(0.3, "appearance")
    assert compactness([box()], "appearance", s) == 0.0
    assert compactness([], "position", SigmaParams(0.3, "position")) == 0.0


def test_window_score_identical_reference():
    s = SigmaParams(1.0, "position")
    assert kde_window_score(box(), [box()], "position", s) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)


def test_window_score_decays_with_distance():
    s = SigmaParams(0.1, "position")
    scores = [kde_window_score(box(cx=x), [box(cx=0.0)], "position", s) for x in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(scores, scores[1:]))
    assert scores[-1] < 1e-20


def test_window_score_requires_references():
    with pytest.raises(ValueError):
        kde_window_score(box(), [], "position", SigmaParams(1.0, "position"))


def test_retrieval_quality_identical_sets_independent_of_size():
    s = SigmaParams(1.0, "position")
    expected = 1 / math.sqrt(2 * math.pi)
    assert retrieval_quality([box()], [box()], "position", s) == pytest.approx(expected, rel=1e-14)
    for m in (2, 5, 9):
        same = [box()] * m
        assert retrieval_quality(same, same, "position", s) == pytest.approx(expected, rel=1e-14)


def test_retrieval_quality_rejects_empty():
    s = SigmaParams(1.0, "position")
    with pytest.raises(ValueError):
        retrieval_quality([], [box()], "position", s)
    with pytest.raises(ValueError):
        retrieval_quality([box()], [], "position", s)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("center", [0.0, 1.0])
def test_kde_quantities_match_oracle(kind, center):
    rng = np.random.default_rng(5)
    for _ in range(10):
        bs = random_boxes(rng, int(rng.integers(1, 40)))
        refs = random_boxes(rng, int(rng.integers(1, 40)))
        s = SigmaParams(float(rng.uniform(0.2, 2.0)), kind, center=center)
        assert compactness(bs, kind, s) == pytest.approx(oracles.compactness(bs, kind, s.sigma, center), rel=1e-12)
        assert retrieval_quality(bs, refs, kind, s) == pytest.approx(
            oracles.retrieval_quality(bs, refs, kind, s.sigma, center), rel=1e-12)
        got = kde_window_scores(bs, refs, kind, s)
        for w, g in zip(bs, got):
            assert g == pytest.approx(oracles.window_score(w, refs, kind, s.sigma, center), rel=1e-12)
            assert kde_window_score(w, refs, kind, s) == pytest.approx(g, rel=1e-13)


@given(boxes_st(1, 8), boxes_st(1, 8), st.sampled_from(KINDS))
def test_duplicating_references_leaves_scores_unchanged(ws, refs, kind):
    s = SigmaParams(0.5, kind)
    np.testing.assert_allclose(kde_window_scores(ws, refs + refs, kind, s), kde_window_scores(ws, refs, kind, s),
                               rtol=1e-12, atol=0)


@given(boxes_st(0, 10), st.sampled_from(KINDS))
def test_compactness_nonnegative(bs, kind):
    assert compactness(bs, kind, SigmaParams(0.4, kind)) >= 0.0


def test_sigma_three_point_line():
    # equally spaced 0, 0.1, 0.2 with k_nn=2: neighbour distances {0.1, 0.2}, {0.1, 0.1}, {0.1, 0.2}
    bs = [box(cx=x / 10) for x in (0, 1, 2)]
    assert estimate_sigma(bs, "position", k_nn=2, spread="std").sigma == pytest.approx(0.05, rel=1e-9)
    assert estimate_sigma(bs, "position", k_nn=2, spread="rms").sigma == pytest.approx(math.sqrt(0.025), rel=1e-9)


def test_sigma_uneven_line():
    # 0, 0.1, 0.3 with k_nn=2: distance sets {0.1, 0.3}, {0.1, 0.2}, {0.2, 0.3}
    bs = [box(cx=x) for x in (0.0, 0.1, 0.3)]
    assert estimate_sigma(bs, "position", k_nn=2, spread="std").sigma == pytest.approx(0.05, rel=1e-9)
    # root mean squares sqrt(0.05), sqrt(0.025), sqrt(0.065)
    assert estimate_sigma(bs, "position", k_nn=2, spread="rms").sigma == pytest.approx(math.sqrt(0.05), rel=1e-9)


def test_sigma_even_count_median_is_mean_of_middle():
    bs = [box(cx=x) for x in (0.0, 0.1, 0.3, 0.6)]
    d = [[abs(a - b) for b in (0.0, 0.1, 0.3, 0.6) if b != a] for a in (0.0, 0.1, 0.3, 0.6)]
    per = sorted(float(np.std(sorted(r)[:2])) for r in d)
    got = estimate_sigma(bs, "position", k_nn=2, spread="std").sigma
    assert got == pytest.approx((per[1] + per[2]) / 2, rel=1e-9)


def test_sigma_degenerate_duplicates():
    with pytest.warns(RuntimeWarning):
        s = estimate_sigma([box()] * 5, "position", k_nn=2)
    assert s.degenerate and s.sigma == SIGMA_EPSILON


def test_sigma_too_few_boxes():
    with pytest.raises(ValueError, match="at least"):
        estimate_sigma([box(), box(cx=0.1)], "position", k_nn=2)


def test_sigma_scale_centre_default():
    rng = np.random.default_rng(0)
    bs = random_boxes(rng, 30)
    assert estimate_sigma(bs, "scale").center == 1.0
    assert estimate_sigma(bs, "position").center == 0.0
    assert estimate_sigma(bs, "scale", center=0.0).center == 0.0


@given(st.permutations(list(range(12))))
def test_sigma_order_invariant(perm):
    rng = np.random.default_rng(1)
    bs = random_boxes(rng, 12)
    for kind in KINDS:
        a = estimate_sigma(bs, kind, k_nn=3)
        b = estimate_sigma([bs[i] for i in perm], kind, k_nn=3)
        assert a.sigma == pytest.approx(b.sigma, rel=1e-12)


def test_sigma_params_validation():
    with pytest.raises(ValueError):
        SigmaParams(0.0, "position")
    with pytest.raises(ValueError):
        SigmaParams(float("nan"), "position")
    with pytest.raises(ValueError):
        SigmaParams(1.0, "position", k_nn=0)
