"""Image-quality metrics, image-based VCDR measurement and the attribute classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from .tensor import Adam, Tensor, backward, conv2d, matmul, mse, silu, softmax

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DISC_THRESHOLD = 0.5
CUP_THRESHOLD = 0.8
# synthetic pixel area at 32x32 chosen so the mean synthetic disc is about 2.35 mm^2
MM2_PER_PX2_AT_32 = 0.0069
SMALL_DISC_MM2 = 2.0
LARGE_DISC_MM2 = 2.7
VCDR_THRESHOLDS = (0.69, 0.72, 0.76)
DISC_BAND = (0.55, 0.75)


class UngradableError(ValueError):
    """No optic disc could be segmented in the frame."""


class ClassifierError(RuntimeError):
    """The classifier did not reach its accuracy floor."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99 dB."""
    a, b = _pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def ssim(a, b, window: int = 7) -> float:
    """Mean SSIM over all fully contained ``window`` x ``window`` uniform windows.

    Inputs are (H, W) or (C, H, W); channels are averaged.
    """
    a, b = _pair(a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    win = np.lib.stride_tricks.sliding_window_view
    pa = win(a, (window, window), axis=(-2, -1))
    pb = win(b, (window, window), axis=(-2, -1))
    mu_a = pa.mean(axis=(-2, -1))
    mu_b = pb.mean(axis=(-2, -1))
    var_a = pa.var(axis=(-2, -1))
    var_b = pb.var(axis=(-2, -1))
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# VCDR


@dataclass(frozen=True)
class VcdrResult:
    vcdr: float
    cup_extent: float  # pixels
    disc_extent: float
    disc_area_px: float
    disc_area_mm2: float
    threshold: float
    glaucoma: bool


def glaucoma_threshold(disc_area_mm2: float) -> float:
    """Disc-size-banded VCDR threshold: small, medium and large discs."""
    if disc_area_mm2 < SMALL_DISC_MM2:
        return VCDR_THRESHOLDS[0]
    if disc_area_mm2 <= LARGE_DISC_MM2:
        return VCDR_THRESHOLDS[1]
    return VCDR_THRESHOLDS[2]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n == 0:
        return mask & False
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    return lab == (1 + int(np.argmax(sizes)))


def _vertical_extent(coverage: np.ndarray) -> float:
    """Height of the ellipse whose row profile has the coverage's second moment.

    A filled ellipse of vertical semi-axis ``s`` has row variance ``s^2 / 4``;
    pixel integration adds ``1 / 12``.
    """
    total = coverage.sum()
    if total <= 0:
        return 0.0
    rows = np.arange(coverage.shape[0], dtype=np.float64)
    prof = coverage.sum(axis=1)
    mean = (prof * rows).sum() / total
    var = (prof * (rows - mean) ** 2).sum() / total
    return 4.0 * np.sqrt(max(var - 1.0 / 12.0, 0.0))


def _robust_level(values: np.ndarray, fallback: float) -> float:
    return float(np.median(values)) if values.size else fallback


def _summarise(ratio, cup_extent, disc_extent, area_px, mm2_per_px2) -> VcdrResult:
    area_mm2 = area_px * mm2_per_px2
    thr = glaucoma_threshold(area_mm2)
    return VcdrResult(float(ratio), float(cup_extent), float(disc_extent), float(area_px), area_mm2, thr, bool(ratio > thr))


def _background_plane(img: np.ndarray, ring: np.ndarray) -> np.ndarray | float:
    """Least-squares plane through the ring around the disc; darker vessel pixels are dropped."""
    rr, cc = np.nonzero(ring)
    if rr.size < 6:
        return _robust_level(img[ring], 0.25)
    vals = img[rr, cc]
    design = np.stack([np.ones_like(rr), rr, cc], axis=1).astype(np.float64)
    keep = vals >= np.median(vals) - 0.05
    coef, *_ = np.linalg.lstsq(design[keep], vals[keep], rcond=None)
    rows, cols = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    return coef[0] + coef[1] * rows + coef[2] * cols


def _soft_ellipse(rows, cols, cy, cx, semi_y, semi_x) -> np.ndarray:
    """Pixel coverage of an ellipse, linearised across its boundary."""
    dy = (rows - cy) / semi_y
    dx = (cols - cx) / semi_x
    rho = np.sqrt(dy * dy + dx * dx) + 1e-9
    slope = np.sqrt((dy / semi_y) ** 2 + (dx / semi_x) ** 2) / rho + 1e-9
    return np.clip(0.5 - (rho - 1.0) / slope, 0.0, 1.0)


def _thin_rim_vcdr(img, region, background, disc_cov, cup_level, mm2_per_px2) -> VcdrResult:
    """Fit nested ellipses to the disc neighbourhood when no pure rim pixel survives.

    The rim level is constrained to the disc band, so a structure at cup
    brightness is read as a cup filling the disc rather than a bright disc.
    """
    bg = np.broadcast_to(background, img.shape)
    rows, cols = np.nonzero(region)
    target = img[rows, cols]
    base = bg[rows, cols]
    mass = disc_cov.sum()
    rr, cc = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    cy0 = (disc_cov * rr).sum() / mass
    cx0 = (disc_cov * cc).sum() / mass
    b0 = _vertical_extent(disc_cov) / 2
    a0 = _vertical_extent(disc_cov.T) / 2

    def residual(x):
        cy, cx, b, a, ratio, level = x
        disc = _soft_ellipse(rows, cols, cy, cx, b, a)
        cup = _soft_ellipse(rows, cols, cy, cx, ratio * b, ratio * a)
        return base + (level - base) * disc + (cup_level - level) * cup - target

    if min(b0, a0) < 1.0 or cup_level <= DISC_BAND[0] + 1e-3:
        raise UngradableError("ungradable frame: degenerate disc")
    lo = [cy0 - 2, cx0 - 2, 0.5 * b0, 0.5 * a0, 0.5, DISC_BAND[0]]
    hi = [cy0 + 2, cx0 + 2, 1.5 * b0 + 1, 1.5 * a0 + 1, 1.0, min(DISC_BAND[1], cup_level - 1e-3)]
    fits = [
        least_squares(residual, np.clip([cy0, cx0, b0, a0, r0, 0.65], lo, hi), bounds=(lo, hi))
        for r0 in (0.85, 0.95, 1.0)
    ]
    _, _, semi, half_width, ratio, _ = min(fits, key=lambda f: f.cost).x
    return _summarise(ratio, 2 * ratio * semi, 2 * semi, np.pi * semi * half_width, mm2_per_px2)


def vcdr(image, mm2_per_px2: float | None = None) -> VcdrResult:
    """Measure the vertical cup-to-disc ratio of a rendered or generated frame.

    Disc (>= 0.5) and cup (>= 0.8) are segmented after light smoothing and
    reduced to their largest connected components. Band levels are then read
    off the component interiors and the surrounding ring, and each structure's
    fractional pixel coverage is recovered by linear unmixing, which makes the
    vertical extent sub-pixel accurate on anti-aliased frames.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.ndim != 2:
        raise ValueError(f"vcdr expects (H, W) or (C, H, W), got {np.shape(image)}")
    if mm2_per_px2 is None:
        mm2_per_px2 = MM2_PER_PX2_AT_32 * (32.0 / img.shape[0]) ** 2
    smooth = ndimage.gaussian_filter(img, 0.5, mode="nearest")
    disc = _largest_component(smooth >= DISC_THRESHOLD)
    if not disc.any():
        raise UngradableError("ungradable frame: no optic disc component")
    cup = _largest_component((smooth >= CUP_THRESHOLD) & disc)

    grow = ndimage.binary_dilation
    ring = grow(disc, iterations=3) & ~grow(disc, iterations=1)
    background = _background_plane(img, ring)
    cup_core = ndimage.binary_erosion(cup)
    cup_level = _robust_level(img[cup_core], _robust_level(img[cup], 0.92))
    rim = ndimage.binary_erosion(disc) & ~grow(cup, iterations=1)
    disc_level = _robust_level(img[rim], np.nan)
    if np.isnan(disc_level):
        disc_level = cup_level

    region = grow(disc, iterations=1)
    disc_cov = np.where(region, np.clip((img - background) / np.maximum(disc_level - background, 1e-6), 0, 1), 0.0)
    if cup.any() and cup_level - disc_level > 1e-6:
        cup_cov = np.where(grow(cup, iterations=1), np.clip((img - disc_level) / (cup_level - disc_level), 0, 1), 0.0)
    elif cup.any():
        cup_cov = disc_cov
    else:
        cup_cov = np.zeros_like(img)

    if disc_cov.sum() <= 1.0:
        raise UngradableError("ungradable frame: disc coverage vanishes against the background")
    if np.count_nonzero(rim) < 3 and cup.any():
        return _thin_rim_vcdr(img, grow(disc, iterations=2), background, disc_cov, cup_level, mm2_per_px2)
    disc_extent = _vertical_extent(disc_cov)
    cup_extent = _vertical_extent(cup_cov)
    if disc_extent <= 0:
        raise UngradableError("ungradable frame: empty disc coverage")
    return _summarise(cup_extent / disc_extent, cup_extent, disc_extent, disc_cov.sum(), mm2_per_px2)


# --------------------------------------------------------------------------
# attribute classifier


@dataclass(frozen=True)
class ClassifierConfig:
    channels: int = 1
    width: int = 8
    steps: int = 600
    batch: int = 32
    lr: float = 3e-3
    seed: int = 0
    accuracy_floor: float = 0.95


def init_classifier(cfg: ClassifierConfig, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 1])
    w = cfg.width

    def conv(cin, cout):
        return rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))

    raw = {
        "c1.w": conv(cfg.channels, w),
        "c1.b": np.zeros(w),
        "c2.w": conv(w, 2 * w),
        "c2.b": np.zeros(2 * w),
        "head.w": rng.uniform(-1, 1, (2 * w, 2)) / np.sqrt(2 * w),
        "head.b": np.zeros(2),
    }
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


def _classifier_forward(p, x: Tensor) -> Tensor:
    h = silu(conv2d(x, p["c1.w"], p["c1.b"], stride=2, padding=1))
    h = silu(conv2d(h, p["c2.w"], p["c2.b"], stride=2, padding=1))
    n, c = h.shape[:2]
    pooled = h.reshape(n, c, -1).mean(axis=2)
    y = matmul(pooled, p["head.w"])
    return y + p["head.b"].expand(y.shape)


def classifier_logits(params, frames) -> np.ndarray:
    """Logits (N, 2) for frames (N, C, H, W) in [0, 1]."""
    x = np.asarray(frames, dtype=params["c1.w"].dtype)
    if x.ndim == 3:
        x = x[None]
    return _classifier_forward(params, Tensor(x)).data.copy()


def predict_labels(params, frames, batch: int = 256) -> np.ndarray:
    frames = np.asarray(frames)
    out = [classifier_logits(params, frames[i : i + batch]).argmax(axis=1) for i in range(0, len(frames), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params, frames, labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean(predict_labels(params, frames) == labels))


def train_classifier(frames, labels, cfg: ClassifierConfig, val=None, check_floor: bool = True):
    """Train the glaucoma classifier with class-balanced minibatches.

    ``val`` is an optional ``(frames, labels)`` held-out pair used for the
    accuracy floor (the training set is used when absent). Returns the
    parameters and the measured accuracy.
    """
    frames = np.asarray(frames, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes = [np.flatnonzero(labels == k) for k in (0, 1)]
    params = init_classifier(cfg)
    opt = Adam(params, lr=cfg.lr)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        pools = [c for c in classes if c.size]
        idx = np.concatenate([rng.choice(c, size=cfg.batch // len(pools), replace=True) for c in pools])
        target = np.eye(2, dtype=np.float32)[labels[idx]]
        probs = softmax(_classifier_forward(params, Tensor(frames[idx])), axis=1)
        loss = mse(probs, Tensor(target))
        opt.step(backward(loss, params))
    vf, vl = (frames, labels) if val is None else (np.asarray(val[0], dtype=np.float32), np.asarray(val[1]))
    acc = accuracy(params, vf, vl)
    if check_floor and acc < cfg.accuracy_floor:
        counts = np.bincount(vl, minlength=2)
        raise ClassifierError(
            f"classifier accuracy {acc:.3f} below floor {cfg.accuracy_floor} "
            f"after {cfg.steps} steps (held-out class counts {counts.tolist()})"
        )
    return params, acc


def ams(frames, intended_labels, params) -> float:
    """Fraction of frames the classifier assigns to their intended label."""
    intended = np.asarray(intended_labels)
    if intended.size == 0:
        return 0.0
    return float(np.mean(predict_labels(params, frames) == intended))
