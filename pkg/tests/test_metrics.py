import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffpatch.attack import AttackConfig, quantize_and_verify, run_attack
from diffpatch.geometry import PatchShapeSpec, mask_from_array
from diffpatch.metrics import (
    CorpusReport,
    ImageEvaluation,
    UndefinedScoreError,
    corpus_metrics,
    evaluate_image,
    make_evaluation,
    overall_score,
)
from diffpatch.synthetic import make_scene
from oracles import os_formula


def test_overall_score_examples():
    assert overall_score(4, 0, [5000]) == 1.0
    assert overall_score(4, 0, []) == 2.0
    assert overall_score(3, 3, [10]) == 0.0
    assert overall_score(3, 7, [0]) == 0.0
    assert overall_score(4, 1, [1000, 1500]) == pytest.approx((2 - 0.5) * 0.75)


def test_overall_score_undefined_without_boxes():
    with pytest.raises(UndefinedScoreError):
        overall_score(0, 0, [1])


@given(st.integers(1, 50), st.integers(0, 60), st.lists(st.integers(0, 600), max_size=10))
def test_overall_score_range_and_monotonicity(bb_orig, bb_adv, counts):
    s = overall_score(bb_orig, bb_adv, counts)
    if sum(counts) <= 5000:
        assert 0 <= s <= 2
    assert overall_score(bb_orig, bb_adv, counts + [1]) <= s
    assert overall_score(bb_orig, bb_adv + 1, counts) <= s
    assert (bb_adv == 0) == math.isclose((1 - min(bb_orig, bb_adv) / bb_orig), 1.0)


def _ev(bb_orig, bb_adv, counts, size=(500, 500), image_id=""):
    return make_evaluation(bb_orig, bb_adv, counts, size, image_id)


def test_corpus_all_suppressed():
    r = corpus_metrics([_ev(3, 0, [100]), _ev(1, 0, [200])])
    assert r.sr == 1.0 and r.bbr == 0.0


def test_corpus_single_image_app():
    r = corpus_metrics([_ev(2, 1, [1000, 1500])])
    assert r.app == pytest.approx(0.01)


def test_corpus_nothing_suppressed():
    r = corpus_metrics([_ev(2, 2, [10]), _ev(5, 5, [10])])
    assert r.sr == 0.0 and r.bbr == 1.0 and r.os_total == 0.0


def test_excluded_images_do_not_count():
    r = corpus_metrics([_ev(0, 0, []), _ev(2, 0, [2500])])
    assert r.per_image[0].excluded and r.per_image[0].os == 0
    assert r.sr == 1.0 and r.scored_images == 1
    assert r.os_total == pytest.approx(1.5)


def test_corpus_errors():
    with pytest.raises(ValueError):
        corpus_metrics([])
    with pytest.raises(UndefinedScoreError):
        corpus_metrics([_ev(0, 0, [])])


def test_nonstandard_size_uses_scaled_limit():
    ev = _ev(2, 0, [200], size=(100, 100))
    assert ev.nonstandard_size
    assert ev.os == pytest.approx(2 - 200 / 200)
    assert ev.pixel_fraction == pytest.approx(0.02)


@given(
    st.lists(
        st.tuples(st.integers(0, 8), st.integers(0, 10), st.lists(st.integers(0, 700), max_size=10)),
        min_size=1,
        max_size=20,
    )
)
def test_aggregation_matches_naive_recount(rows):
    evs = [_ev(o, a, c, image_id=str(i)) for i, (o, a, c) in enumerate(rows)]
    if sum(o for o, _, _ in rows) == 0:
        return
    r = corpus_metrics(evs)
    scored = [(o, a, c) for o, a, c in rows if o > 0]
    assert r.sr == pytest.approx(sum(1 for o, a, c in scored if a == 0) / len(scored))
    assert r.os_total == pytest.approx(sum(os_formula(o, a, sum(c)) for o, a, c in scored))
    assert r.bbr == pytest.approx(sum(a for _, a, _ in rows) / sum(o for o, _, _ in rows))
    assert r.app == pytest.approx(sum(sum(c) / 250000 for _, _, c in rows) / len(rows))


def test_report_json_round_trip():
    r = corpus_metrics([_ev(2, 0, [10, 20], image_id="a"), _ev(1, 1, [5], image_id="b")], failures=[{"id": "c", "error": "x"}])
    data = r.to_dict()
    assert data["schema_version"] == 1
    again = CorpusReport.from_dict(data)
    assert again.to_json() == r.to_json()
    lines = r.to_csv().splitlines()
    assert lines[0] == "id,bb_orig,bb_adv,sum_r,num_patches,os,success"
    assert lines[1].startswith("a,2,0,30,2,")


def test_evaluate_identity_attack(detector):
    scene = make_scene(detector, 2, (128, 128), seed=1)
    ev = evaluate_image(detector, scene.image, scene.image, mask_from_array(np.zeros((128, 128), bool)), 0.3)
    assert ev.bb_orig == 2 and ev.bb_adv == 2
    assert ev.os == 0 and not ev.success


def test_evaluate_nothing_detected(detector):
    image = np.full((64, 64, 3), 120.0)
    ev = evaluate_image(detector, image, image, mask_from_array(np.zeros((64, 64), bool)), 0.3)
    assert ev.excluded and ev.os == 0


def test_evaluate_after_successful_attack(detector):
    scene = make_scene(detector, 3, (500, 500), seed=2)
    config = AttackConfig(shape=PatchShapeSpec("grid", lines=2))
    result = quantize_and_verify(run_attack(detector, scene.image, scene.bboxes, config), detector)
    ev = evaluate_image(detector, scene.image, result.adversarial, result.final_mask, 0.3)
    assert ev.bb_orig == 3 and ev.bb_adv == 0 and ev.success
    assert ev.os == pytest.approx(2 - int(result.final_mask.mask.sum()) / 5000)
