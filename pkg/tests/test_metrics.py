import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longidiff.fundus import TIME_INVARIANT, EyePhenotype, render_ratio, to_uint8
from longidiff.metrics import (
    PSNR_CAP,
    SSIM_C1,
    ClassifierConfig,
    ClassifierError,
    UngradableError,
    accuracy,
    ams,
    classifier_logits,
    glaucoma_threshold,
    psnr,
    ssim,
    train_classifier,
    vcdr,
)


def eye(size=32, **kw):
    s = size / 32
    base = dict(eye_id="m", center=(16.3 * s, 15.6 * s), disc_axes=(11.0 * s, 9.8 * s), r0=0.4,
                progression=TIME_INVARIANT, rate=0.0, year0=2000, seed=4, size=size, gradient=(0.02, -0.03))
    return EyePhenotype(**{**base, **kw})


def test_psnr_cap_and_hand_values():
    a = np.full((4, 4), 0.3)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    b = a.copy()
    b[:2] += 0.2  # mse 0.02
    assert psnr(a, b) == pytest.approx(10 * np.log10(50))


def test_ssim_identical_and_constant_closed_form():
    img = np.random.default_rng(0).random((12, 12))
    assert ssim(img, img) == pytest.approx(1.0)
    a, b = np.full((9, 9), 0.2), np.full((9, 9), 0.7)
    expected = (2 * 0.2 * 0.7 + SSIM_C1) / (0.2**2 + 0.7**2 + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_ssim_inverted_image_below_one():
    img = np.random.default_rng(1).random((10, 10))
    assert ssim(img, 1 - img) < 1.0


def test_metric_input_validation():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_psnr_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    perm = rng.permutation(64)
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a.ravel()[perm], b.ravel()[perm]) == pytest.approx(psnr(a, b), rel=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_disc_size_bands():
    assert glaucoma_threshold(1.5) == 0.69
    assert glaucoma_threshold(2.3) == 0.72
    assert glaucoma_threshold(2.7) == 0.72
    assert glaucoma_threshold(3.1) == 0.76


@pytest.mark.parametrize("ratio", [0.3, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0])
@pytest.mark.parametrize("quantise", [False, True])
def test_vcdr_matches_renderer(ratio, quantise):
    img = render_ratio(eye(), ratio)
    if quantise:
        img = to_uint8(img) / 255.0
    assert vcdr(img).vcdr == pytest.approx(ratio, abs=0.02)


def test_vcdr_large_render():
    ph = eye(size=128, center=(64.0, 64.0), disc_axes=(40.0, 36.0), gradient=(0.0, 0.0))
    res = vcdr(render_ratio(ph, 0.7))
    assert res.vcdr == pytest.approx(0.7, abs=0.02)
    assert res.disc_extent == pytest.approx(80, abs=1.0)


def test_vcdr_disc_area_and_decision():
    res = vcdr(render_ratio(eye(), 0.75))
    area = np.pi * 11.0 * 9.8
    assert res.disc_area_px == pytest.approx(area, rel=0.03)
    assert res.disc_area_mm2 == pytest.approx(area * 0.0069, rel=0.03)
    assert res.threshold == glaucoma_threshold(res.disc_area_mm2)
    assert res.glaucoma == (res.vcdr > res.threshold)


def test_vcdr_all_background_is_ungradable():
    with pytest.raises(UngradableError):
        vcdr(np.full((1, 32, 32), 0.25))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 0.9), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(9.5, 12.0))
def test_vcdr_property_over_geometry(ratio, dy, dx, b):
    ph = eye(center=(16 + dy, 16 + dx), disc_axes=(b, 0.9 * b))
    assert vcdr(render_ratio(ph, ratio)).vcdr == pytest.approx(ratio, abs=0.02)


def _bands(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None, None, None] == 1, 0.75, 0.25) + 0.05 * rng.standard_normal((n, 1, 16, 16))
    return x.astype(np.float32), y


def test_classifier_learns_separable_bands():
    x, y = _bands(64, 0)
    cfg = ClassifierConfig(steps=80, batch=16, accuracy_floor=0.95)
    params, acc = train_classifier(x, y, cfg, val=_bands(32, 1))
    assert acc >= 0.95
    logits = classifier_logits(params, x)
    assert logits.tobytes() == classifier_logits(params, x).tobytes()
    assert ams(x, y, params) == accuracy(params, x, y)


def test_classifier_floor_rejects_shuffled_labels():
    x, y = _bands(64, 0)
    y = np.random.default_rng(3).permutation(y)
    vx, vy = _bands(64, 1)
    with pytest.raises(ClassifierError):
        train_classifier(x, y, ClassifierConfig(steps=40, batch=16), val=(vx, np.random.default_rng(4).permutation(vy)))


def test_ams_simple_fractions():
    x, y = _bands(32, 2)
    params, _ = train_classifier(x, y, ClassifierConfig(steps=80, batch=16), check_floor=False)
    pred = (classifier_logits(params, x).argmax(1))
    assert ams(x, pred, params) == 1.0
    half = pred.copy()
    half[:16] = 1 - half[:16]
    assert ams(x, half, params) == 0.5
