import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpatch.attack import HingeLoss
from diffpatch.detectors import (
    ImageTooSmallError,
    NonDifferentiableLossError,
    ProposalSet,
    TemplateDetector,
    detector_from_config,
    get_detector,
    nms,
    register_detector,
)
from diffpatch.geometry import BBox
from oracles import brute_force_nms, ncc_score


def test_proposal_count_on_48px_image(detector):
    props = detector.propose(np.zeros((48, 48, 3)))
    assert len(props) == ((48 - 16) // 8 + 1) ** 2 == 25
    assert props.scores.shape == (25, detector.class_count)
    assert props.boxes[0].tolist() == [0, 0, 16, 16]
    assert props.boxes[-1].tolist() == [32, 32, 16, 16]


def test_image_too_small(detector):
    with pytest.raises(ImageTooSmallError):
        detector.propose(np.zeros((15, 40, 3)))


def test_planted_template_scores_high(detector):
    image = np.full((48, 48, 3), 128.0)
    image[16:32, 8:24] = 128 + 50 * detector.templates[1] * np.sqrt(768)
    props = detector.propose(image)
    idx = [tuple(b) for b in props.boxes.tolist()].index((8, 16, 16, 16))
    # ncc = 1 exactly, so the score is expit(10 - 5)
    assert props.scores[idx, 1] == pytest.approx(1 / (1 + np.exp(-5.0)), abs=1e-9)
    assert props.scores[idx, 1] > 0.99


def test_uniform_gray_scores(detector):
    props = detector.propose(np.full((48, 48, 3), 100.0))
    assert np.allclose(props.scores, 1 / (1 + np.exp(5.0)), atol=1e-9)
    assert props.scores.max() == pytest.approx(0.0067, abs=1e-4)


def test_scores_match_direct_definition():
    rng = np.random.default_rng(3)
    raw = rng.standard_normal((2, 16, 16, 3))
    det = TemplateDetector(raw)
    image = rng.uniform(0, 255, (40, 32, 3))
    props = det.propose(image)
    for (x, y, w, h), row in zip(props.boxes, props.scores):
        for c in range(2):
            expected, _ = ncc_score(image[y : y + h, x : x + w], raw[c])
            assert row[c] == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_non_divisible_stride_path_matches_definition():
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((1, 16, 16, 3))
    det = TemplateDetector(raw, stride=5)
    image = rng.uniform(0, 255, (37, 41, 3))
    props = det.propose(image)
    assert len(props) == ((37 - 16) // 5 + 1) * ((41 - 16) // 5 + 1)
    for (x, y, w, h), row in zip(props.boxes, props.scores):
        assert row[0] == pytest.approx(ncc_score(image[y : y + h, x : x + w], raw[0])[0], rel=1e-9)


def test_weights_round_trip(tmp_path, detector):
    path = tmp_path / "t.npz"
    detector.save_weights(path)
    again = TemplateDetector.from_weights(path)
    assert np.allclose(again.templates, detector.templates)


# --- detect ---------------------------------------------------------------


def test_detect_nothing_above_threshold(detector):
    assert detector.detect(np.full((48, 48, 3), 90.0), 0.3) == []


def test_detect_single_object(detector):
    image = np.full((64, 64, 3), 128.0)
    image[24:40, 32:48] += 40 * np.sqrt(768) * detector.templates[0]
    assert detector.detect(image, 0.3) == [BBox(32, 24, 16, 16)]


def test_nms_overlapping_pair():
    boxes = np.array([[0, 0, 10, 10], [1, 0, 10, 10], [30, 30, 10, 10]])
    # IoU of the first two is 90 / 110 > 0.5, so the weaker one goes
    assert nms(boxes, np.array([0.8, 0.9, 0.5]), 0.5) == [1, 2]


class _FixedProposals(TemplateDetector):
    def __init__(self, props):
        super().__init__()
        self._props = props

    def propose(self, image):
        return self._props


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_detect_matches_brute_force(data):
    n = data.draw(st.integers(min_value=0, max_value=100))
    rng = np.random.default_rng(data.draw(st.integers(min_value=0, max_value=2**32 - 1)))
    xy = rng.integers(0, 60, size=(n, 2))
    wh = rng.integers(4, 30, size=(n, 2))
    boxes = np.concatenate([xy, wh], axis=1)
    scores = rng.uniform(size=(n, 3))
    det = _FixedProposals(ProposalSet(boxes=boxes, scores=scores.reshape(n, 3)))
    got = [tuple(b.to_dict().values()) for b in det.detect(np.zeros((1, 1, 3)), 0.5)]
    assert got == brute_force_nms(boxes, scores, 0.5)


# --- gradients ------------------------------------------------------------


class _Constant:
    def value(self, scores):
        return 3.0

    def grad(self, scores):
        return np.zeros_like(scores)


class _WindowLogit:
    """Pre-logistic activation of one proposal and class."""

    def __init__(self, index, cls):
        self.index, self.cls = index, cls

    def value(self, scores):
        s = scores[self.index, self.cls]
        return float(np.log(s / (1 - s)))

    def grad(self, scores):
        g = np.zeros_like(scores)
        s = scores[self.index, self.cls]
        g[self.index, self.cls] = 1.0 / (s * (1 - s))
        return g


def test_constant_loss_zero_gradient(detector):
    image = np.random.default_rng(0).uniform(0, 255, (48, 48, 3))
    assert not detector.loss_gradient(image, _Constant()).any()


def test_loss_without_grad_is_rejected(detector):
    with pytest.raises(NonDifferentiableLossError):
        detector.loss_gradient(np.zeros((32, 32, 3)), lambda s: 0.0)


def test_window_logit_gradient_closed_form(detector):
    rng = np.random.default_rng(5)
    image = rng.uniform(0, 255, (48, 48, 3))
    index = 7  # window at x=16, y=8
    x, y, w, h = detector.propose(image).boxes[index]
    grad = detector.loss_gradient(image, _WindowLogit(index, 2))

    u = image[y : y + h, x : x + w].ravel()
    u = u - u.mean()
    n = np.linalg.norm(u)
    t = detector.templates[2].ravel()
    ncc = u @ t / n
    expected = detector.beta * (t / n - ncc * u / n**2)
    assert np.allclose(grad[y : y + h, x : x + w].ravel(), expected, rtol=1e-6, atol=1e-12)
    outside = np.ones(image.shape[:2], dtype=bool)
    outside[y : y + h, x : x + w] = False
    assert not grad[outside].any()


def _finite_difference_check(det, image, loss, pixels, step=0.5):
    grad = det.loss_gradient(image, loss)
    worst = 0.0
    for r, c, ch in pixels:
        up, down = image.copy(), image.copy()
        up[r, c, ch] += step
        down[r, c, ch] -= step
        fd = (loss.value(det.propose(up).scores) - loss.value(det.propose(down).scores)) / (2 * step)
        denom = max(abs(fd), abs(grad[r, c, ch]), 1e-12)
        worst = max(worst, abs(fd - grad[r, c, ch]) / denom)
    return worst


def test_gradient_matches_finite_differences(detector):
    rng = np.random.default_rng(11)
    image = rng.uniform(60, 200, (48, 48, 3))
    image[16:32, 16:32] = 128 + 40 * np.sqrt(768) * detector.templates[0] + rng.normal(0, 20, (16, 16, 3))
    probe = _WindowLogit(12, 0)
    pixels = [(int(rng.integers(16, 32)), int(rng.integers(16, 32)), int(rng.integers(3))) for _ in range(20)]
    assert _finite_difference_check(detector, image, probe, pixels) <= 1e-3


def test_hinge_gradient_matches_finite_differences(detector):
    rng = np.random.default_rng(12)
    image = rng.uniform(60, 200, (48, 48, 3))
    image[8:24, 16:32] = 128 + 40 * np.sqrt(768) * detector.templates[2] + rng.normal(0, 20, (16, 16, 3))
    loss = HingeLoss(0.3)
    pixels = [(int(rng.integers(48)), int(rng.integers(48)), int(rng.integers(3))) for _ in range(20)]
    assert _finite_difference_check(detector, image, loss, pixels) <= 1e-3


def test_hinge_gradient_is_local(detector):
    image = np.full((64, 64, 3), 128.0) + np.random.default_rng(2).normal(0, 3, (64, 64, 3))
    image[16:32, 32:48] += 40 * np.sqrt(768) * detector.templates[1]
    loss = HingeLoss(0.3)
    props = detector.propose(image)
    active = props.boxes[np.any(props.scores > 0.3, axis=1)]
    grad = detector.loss_gradient(image, loss)
    covered = np.zeros(image.shape[:2], dtype=bool)
    for x, y, w, h in active:
        covered[y : y + h, x : x + w] = True
    assert grad[covered].any()
    assert not grad[~covered].any()


# --- registry -------------------------------------------------------------


def test_registry_builds_template_detector():
    det = get_detector("template", class_count=2)
    assert isinstance(det, TemplateDetector) and det.class_count == 2
    det, threshold = detector_from_config({"name": "template", "score_threshold": 0.4, "seed": 1})
    assert threshold == 0.4


def test_registry_unknown_name():
    with pytest.raises(KeyError):
        get_detector("no-such-detector")


def test_registry_file_from_environment(tmp_path, monkeypatch):
    registry = tmp_path / "registry.json"
    registry.write_text('{"env-template": "diffpatch.detectors:TemplateDetector"}')
    monkeypatch.setenv("DIFFPATCH_DETECTOR_REGISTRY", str(registry))
    assert isinstance(get_detector("env-template"), TemplateDetector)


def test_register_custom_factory():
    register_detector("tiny", lambda **kw: TemplateDetector(class_count=1, **kw))
    assert get_detector("tiny").class_count == 1
