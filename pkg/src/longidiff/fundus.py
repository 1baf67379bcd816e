"""Synthetic longitudinal fundus-like sequences with known cup/disc geometry.

Intensity bands are disjoint: background in [0.15, 0.35] (vessels darker,
<= 0.1), optic disc in [0.55, 0.75], cup in [0.85, 1.0]. Shapes are drawn
with 4x4 supersampled coverage, so edge pixels blend neighbouring bands
linearly and threshold segmentation recovers the geometry up to one pixel.

The vertical cup-to-disc ratio of an eye in a given year is ``r(year)``;
the cup is the disc ellipse scaled by ``r`` about the same centre.

Manifest layout (``manifest.json``)::

    {"format": "longidiff-fundus", "renderer_version": ..., "seed": ...,
     "image_size": 32, "channels": 1, "tau": 0.7, "image_format": "png",
     "config": {...},
     "sequences": [{"eye_id": "test-000", "split": "test",
                    "progression": "time-variant" | "time-invariant",
                    "frames": [{"year": 1990, "path": "test-000/1990.png",
                                "label": 0, "vcdr": 0.43}, ...]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

RENDERER_VERSION = "1.0"
TAU = 0.7
RATIO_CAP = 0.9
BACKGROUND_BAND = (0.15, 0.35)
DISC_BAND = (0.55, 0.75)
CUP_BAND = (0.85, 1.0)
VESSEL_MAX = 0.1
SUPERSAMPLE = 4
TIME_VARIANT = "time-variant"
TIME_INVARIANT = "time-invariant"


@dataclass(frozen=True)
class EyePhenotype:
    eye_id: str
    center: tuple[float, float]  # (row, col) in pixels
    disc_axes: tuple[float, float]  # (vertical, horizontal) semi-axes
    r0: float
    progression: str
    rate: float  # ratio per year, time-variant only
    year0: int
    seed: int
    size: int = 32
    channels: int = 1
    background: float = 0.25
    gradient: tuple[float, float] = (0.0, 0.0)
    disc_level: float = 0.65
    cup_level: float = 0.92
    tau: float = TAU

    def __post_init__(self):
        cy, cx = self.center
        b, a = self.disc_axes
        if min(cy - b, cx - a) < 1.0 or max(cy + b, cx + a) > self.size - 2.0:
            raise ValueError(f"{self.eye_id}: disc leaves the {self.size}x{self.size} canvas")
        if not 0 < self.r0 < self.tau:
            raise ValueError(f"{self.eye_id}: initial ratio {self.r0} must be in (0, tau={self.tau})")
        if self.progression not in (TIME_VARIANT, TIME_INVARIANT):
            raise ValueError(f"unknown progression class {self.progression!r}")
        if self.progression == TIME_VARIANT and self.rate <= 0:
            raise ValueError("time-variant eyes need a positive rate")
        lo, hi = BACKGROUND_BAND
        span = abs(self.gradient[0]) + abs(self.gradient[1])
        if self.background - span < lo or self.background + span > hi:
            raise ValueError("background gradient leaves the background band")
        if not DISC_BAND[0] <= self.disc_level <= DISC_BAND[1] or not CUP_BAND[0] <= self.cup_level <= CUP_BAND[1]:
            raise ValueError("disc/cup intensity outside its band")

    def ratio(self, year: int) -> float:
        """True vertical cup-to-disc ratio in ``year``."""
        if year < self.year0:
            raise ValueError(f"{self.eye_id}: year {year} precedes first visit {self.year0}")
        if self.progression == TIME_VARIANT:
            return float(min(self.r0 + self.rate * (year - self.year0), RATIO_CAP))
        jitter = np.random.default_rng([self.seed, int(year)]).uniform(-0.01, 0.01)
        return float(self.r0 + jitter)


def _sample_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s - 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    s = SUPERSAMPLE
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _ellipse_coverage(size, center, axes):
    yy, xx = _sample_grid(size)
    (cy, cx), (b, a) = center, axes
    return _coverage(((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0, size)


@lru_cache(maxsize=256)
def _vessel_layer(ph: EyePhenotype) -> tuple[np.ndarray, np.ndarray]:
    """Coverage and intensity of the fixed per-eye vessel tree."""
    rng = np.random.default_rng([ph.seed, 7])
    yy, xx = _sample_grid(ph.size)
    cy, cx = ph.center
    b, a = ph.disc_axes
    inside = np.zeros(yy.shape, dtype=bool)
    for k in range(5):
        theta = 2 * np.pi * (k + rng.uniform(0.2, 0.8)) / 5
        bend = rng.uniform(-0.6, 0.6)
        width = rng.uniform(0.7, 1.1)
        t = np.linspace(0.0, 1.0, 24)
        radius = 1.2 + t * 2.2
        ang = theta + bend * t
        py = cy + radius * b * np.sin(ang)
        px = cx + radius * a * np.cos(ang)
        for i in range(len(t) - 1):
            p0 = np.array([py[i], px[i]])
            d = np.array([py[i + 1], px[i + 1]]) - p0
            u = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
            dist2 = (yy - p0[0] - u * d[0]) ** 2 + (xx - p0[1] - u * d[1]) ** 2
            inside |= dist2 <= (width / 2) ** 2
    level = rng.uniform(0.05, VESSEL_MAX)
    return _coverage(inside, ph.size), level


def render_ratio(ph: EyePhenotype, ratio: float) -> np.ndarray:
    """Render the eye with an explicit cup-to-disc ratio; returns (C, H, W) in [0, 1]."""
    if not 0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = ph.size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    gy, gx = ph.gradient
    img = ph.background + gy * (rows - n / 2) / (n / 2) + gx * (cols - n / 2) / (n / 2)
    vcov, vlevel = _vessel_layer(ph)
    img = img * (1 - vcov) + vlevel * vcov
    dcov = _ellipse_coverage(n, ph.center, ph.disc_axes)
    img = img * (1 - dcov) + ph.disc_level * dcov
    b, a = ph.disc_axes
    ccov = _ellipse_coverage(n, ph.center, (ratio * b, ratio * a))
    img = img * (1 - ccov) + ph.cup_level * ccov
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[None], ph.channels, axis=0)


def render_frame(ph: EyePhenotype, year: int) -> tuple[np.ndarray, float]:
    """Render one visit; returns the image and its true VCDR."""
    r = ph.ratio(year)
    return render_ratio(ph, r), r


def random_phenotype(
    rng: np.random.Generator,
    eye_id: str,
    years: list[int],
    time_variant: bool,
    size: int = 32,
    channels: int = 1,
    tau: float = TAU,
) -> EyePhenotype:
    """Draw an eye whose progression fits the visit ``years``.

    Time-variant eyes cross ``tau`` strictly between the first and the last
    visit, so the last visit is labelled glaucoma and the first normal.
    """
    scale = size / 32.0
    b = rng.uniform(10.0, 12.0) * scale
    a = b * rng.uniform(0.85, 0.95)
    center = (size / 2 + rng.uniform(-1.0, 1.0) * scale, size / 2 + rng.uniform(-2.0, 2.0) * scale)
    y0, y_last = years[0], years[-1]
    if time_variant:
        if y_last - y0 < 2:
            raise ValueError("time-variant eyes need a visit span of at least 2 years")
        cross = rng.uniform(y0 + 0.5 * (y_last - y0), y_last - 0.5)
        rate = rng.uniform(0.03, 0.06)
        r0 = tau - rate * (cross - y0)
        if r0 < 0.3:
            r0 = 0.3
            rate = (tau - r0) / (cross - y0)
        elif r0 > 0.55:
            r0 = 0.55
            rate = (tau - r0) / (cross - y0)
        progression = TIME_VARIANT
    else:
        r0 = rng.uniform(0.3, 0.55)
        rate = 0.0
        progression = TIME_INVARIANT
    span = rng.uniform(0.0, 0.05)
    share = rng.uniform(0.0, 1.0)
    sign = rng.choice([-1.0, 1.0], size=2)
    gradient = (float(sign[0] * span * share), float(sign[1] * span * (1 - share)))
    return EyePhenotype(
        eye_id=eye_id,
        center=(float(center[0]), float(center[1])),
        disc_axes=(float(b), float(a)),
        r0=float(r0),
        progression=progression,
        rate=float(rate),
        year0=int(y0),
        seed=int(rng.integers(2**31)),
        size=size,
        channels=channels,
        background=float(rng.uniform(0.22, 0.28)),
        gradient=gradient,
        disc_level=float(rng.uniform(0.6, 0.7)),
        cup_level=float(rng.uniform(0.88, 0.96)),
        tau=tau,
    )


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    time_variant_fraction: float = 0.2
    image_size: int = 32
    channels: int = 1
    tau: float = TAU
    min_visits: int = 6
    max_visits: int = 10
    min_gap: int = 1
    max_gap: int = 4
    first_year: tuple[int, int] = (1986, 1996)
    image_format: str = "png"

    def validate(self) -> None:
        if not 1 <= self.min_gap <= self.max_gap:
            raise ValueError("need 1 <= min_gap <= max_gap")
        if not 2 <= self.min_visits <= self.max_visits:
            raise ValueError("need 2 <= min_visits <= max_visits")
        if not 0.0 <= self.time_variant_fraction <= 1.0:
            raise ValueError("time_variant_fraction must be in [0, 1]")
        if self.time_variant_fraction > 0 and (self.min_visits - 1) * self.min_gap < 2:
            raise ValueError("visit span too short for a normal-to-glaucoma conversion")
        if self.first_year[0] > self.first_year[1]:
            raise ValueError("first_year range is empty")
        if self.image_format not in ("png", "pgm"):
            raise ValueError("image_format must be 'png' or 'pgm'")
        if self.image_size % 8 or self.image_size < 16:
            raise ValueError("image_size must be a multiple of 8 and at least 16")


def split_counts(cfg: DataConfig) -> dict[str, tuple[int, int]]:
    """(eyes, time-variant eyes) per split."""
    out = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        out[split] = (n, int(round(n * cfg.time_variant_fraction)))
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: Path, img: np.ndarray, fmt: str = "png") -> None:
    """Write a (C, H, W) image in [0, 1] as 8-bit PNG or binary PGM/PPM."""
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img)
    if fmt == "png":
        pil = Image.fromarray(arr[0], mode="L") if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        pil.save(path, format="PNG")
    else:
        magic = b"P5" if arr.shape[0] == 1 else b"P6"
        body = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        path.write_bytes(magic + f"\n{arr.shape[2]} {arr.shape[1]}\n255\n".encode() + body.tobytes())


def read_image(path: Path) -> np.ndarray:
    """Read an image written by :func:`write_image`; returns (C, H, W) float32."""
    path = Path(path)
    if path.suffix == ".png":
        arr = np.asarray(Image.open(path))
    else:
        raw = path.read_bytes()
        parts = raw.split(maxsplit=4)
        magic, w, h = parts[0], int(parts[1]), int(parts[2])
        data = np.frombuffer(parts[4], dtype=np.uint8)
        arr = data.reshape(h, w) if magic == b"P5" else data.reshape(h, w, 3)
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def _visit_years(rng, cfg: DataConfig) -> list[int]:
    n = int(rng.integers(cfg.min_visits, cfg.max_visits + 1))
    start = int(rng.integers(cfg.first_year[0], cfg.first_year[1] + 1))
    gaps = rng.integers(cfg.min_gap, cfg.max_gap + 1, size=n - 1)
    return [start] + [start + int(g) for g in np.cumsum(gaps)]


def gen_dataset(cfg: DataConfig, out_dir: str | Path, seed: int) -> dict:
    """Render every split into ``out_dir`` and write ``manifest.json``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sequences = []
    for s_idx, (split, (n, n_tv)) in enumerate(split_counts(cfg).items()):
        order = np.random.default_rng([seed, s_idx, 999]).permutation(n)
        tv_set = set(order[:n_tv].tolist())
        for i in range(n):
            rng = np.random.default_rng([seed, s_idx, i])
            eye_id = f"{split}-{i:03d}"
            years = _visit_years(rng, cfg)
            ph = random_phenotype(rng, eye_id, years, i in tv_set, cfg.image_size, cfg.channels, cfg.tau)
            frames = []
            for y in years:
                img, r = render_frame(ph, y)
                rel = f"{eye_id}/{y}.{cfg.image_format}"
                write_image(out / rel, img, cfg.image_format)
                frames.append({"year": y, "path": rel, "label": int(r > cfg.tau), "vcdr": r})
            sequences.append(
                {"eye_id": eye_id, "split": split, "progression": ph.progression, "phenotype": _phenotype_json(ph), "frames": frames}
            )
    manifest = {
        "format": "longidiff-fundus",
        "renderer_version": RENDERER_VERSION,
        "seed": seed,
        "image_size": cfg.image_size,
        "channels": cfg.channels,
        "tau": cfg.tau,
        "image_format": cfg.image_format,
        "config": asdict(cfg),
        "sequences": sequences,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _phenotype_json(ph: EyePhenotype) -> dict:
    d = asdict(ph)
    d["center"] = list(ph.center)
    d["disc_axes"] = list(ph.disc_axes)
    d["gradient"] = list(ph.gradient)
    return d


def phenotype_from_json(d: dict) -> EyePhenotype:
    d = dict(d)
    for key in ("center", "disc_axes", "gradient"):
        d[key] = tuple(d[key])
    return EyePhenotype(**d)


@dataclass
class SequenceRecord:
    eye_id: str
    split: str
    progression: str
    years: np.ndarray
    frames: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray
    vcdr: np.ndarray
    phenotype: EyePhenotype | None = None


@dataclass
class Dataset:
    root: Path
    manifest: dict
    sequences: list[SequenceRecord] = field(default_factory=list)

    def split(self, name: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if s.split == name]

    @property
    def image_size(self) -> int:
        return int(self.manifest["image_size"])

    @property
    def channels(self) -> int:
        return int(self.manifest["channels"])


def load_dataset(root: str | Path, min_visits: int = 2) -> Dataset:
    """Load a generated dataset; sequences with fewer than ``min_visits`` frames are dropped."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    ds = Dataset(root, manifest)
    for seq in manifest["sequences"]:
        fr = seq["frames"]
        if len(fr) < min_visits:
            continue
        ph = phenotype_from_json(seq["phenotype"]) if "phenotype" in seq else None
        ds.sequences.append(
            SequenceRecord(
                eye_id=seq["eye_id"],
                split=seq["split"],
                progression=seq["progression"],
                years=np.array([f["year"] for f in fr], dtype=np.int64),
                frames=np.stack([read_image(root / f["path"]) for f in fr]),
                labels=np.array([f["label"] for f in fr], dtype=np.int64),
                vcdr=np.array([f["vcdr"] for f in fr], dtype=np.float64),
                phenotype=ph,
            )
        )
    return ds
