"""Synthetic tiny-lesion images and a PPM/PGM directory format for real data.

Four lesion classes are rendered inside a circular field of view:

    0  EX-like   bright clusters of small blobs
    1  HE-like   dark irregular blobs
    2  SE-like   large pale blobs with soft edges
    3  MA-like   dark dots of radius 1-2 px
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .netpbm import NetpbmError, read_netpbm, write_netpbm

NUM_CLASSES = 4
CLASS_NAMES = ("EX", "HE", "SE", "MA")
MANIFEST = "manifest.txt"


class GenerationError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # K x H x W float32 in {0, 1}
    id: str
    blobs: list[tuple[int, int]] = field(default_factory=list)  # (class, pixel area)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.mask.shape[1:] != self.image.shape[1:]:
            raise ValueError("image and mask sizes differ")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")


@dataclass(frozen=True)
class ClassStyle:
    count: tuple[int, int]  # inclusive range of blobs per image
    radius: tuple[float, float]


@dataclass(frozen=True)
class SynthConfig:
    count: int = 8
    size: tuple[int, int] = (256, 256)
    styles: tuple[ClassStyle, ...] = (
        ClassStyle((1, 3), (2.0, 3.5)),
        ClassStyle((1, 3), (4.0, 7.0)),
        ClassStyle((0, 2), (9.0, 14.0)),
        ClassStyle((8, 16), (1.5, 2.0)),
    )
    fov_fraction: float = 0.46
    noise: float = 0.02
    seed: int = 0
    max_tries: int = 200

    def __post_init__(self):
        if len(self.styles) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} class styles")
        if self.styles[3].radius[1] > 2:
            raise ValueError("MA-like dots must have radius <= 2 px")
        for st in self.styles:
            if st.count[0] < 0 or st.count[0] > st.count[1] or st.radius[0] <= 0 or st.radius[0] > st.radius[1]:
                raise ValueError(f"invalid class style {st}")
        if self.count < 0 or self.noise < 0:
            raise ValueError("count and noise must be non-negative")


BACKGROUND = np.array([0.55, 0.25, 0.12])
SURROUND = np.array([0.02, 0.02, 0.02])
COLORS = np.array(
    [
        [0.95, 0.85, 0.35],
        [0.28, 0.05, 0.03],
        [0.88, 0.78, 0.58],
        [0.10, 0.02, 0.30],
    ]
)


def _fov(size: tuple[int, int], fraction: float) -> tuple[float, float, float]:
    h, w = size
    return (h - 1) / 2.0, (w - 1) / 2.0, fraction * min(h, w)


def render_background(cfg: SynthConfig) -> np.ndarray:
    """Noise-free background (3 x H x W): shaded disk on a dark surround."""
    h, w = cfg.size
    cy, cx, rad = _fov(cfg.size, cfg.fov_fraction)
    yy, xx = np.mgrid[0:h, 0:w]
    rr = np.hypot(yy - cy, xx - cx) / rad
    shade = 1.0 - 0.3 * np.clip(rr, 0, 1) ** 2
    inside = rr <= 1.0
    bg = np.where(inside[None], BACKGROUND[:, None, None] * shade[None], SURROUND[:, None, None])
    return bg


def _grid(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _dots(yy, xx, cy, cx, r):
    return np.hypot(yy - cy, xx - cx) <= r


def _shape_alpha(cls: int, rng: np.random.Generator, yy, xx, cy, cx, r) -> tuple[np.ndarray, float]:
    """Opacity map of one lesion and its footprint radius (for spacing)."""
    if cls == 0:
        alpha = np.zeros(yy.shape)
        spread = 2.2 * r
        for _ in range(int(rng.integers(3, 7))):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0, spread - r)
            rr = rng.uniform(0.6 * r, r)
            alpha[_dots(yy, xx, cy + dist * np.sin(ang), cx + dist * np.cos(ang), rr)] = 1.0
        return alpha, spread
    if cls == 1:
        alpha = np.zeros(yy.shape)
        for _ in range(3):
            oy, ox = rng.uniform(-0.5 * r, 0.5 * r, size=2)
            a, b = r, rng.uniform(0.55, 1.0) * r
            th = rng.uniform(0, np.pi)
            dy, dx = yy - cy - oy, xx - cx - ox
            u = dx * np.cos(th) + dy * np.sin(th)
            v = -dx * np.sin(th) + dy * np.cos(th)
            alpha[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = 1.0
        return alpha, 1.5 * r
    if cls == 2:
        soft = 0.35 * r
        d = np.hypot(yy - cy, xx - cx)
        return np.clip(0.5 + (r - d) / soft, 0.0, 1.0), r + 0.5 * soft
    return _dots(yy, xx, cy, cx, r).astype(np.float64), r


def _render(cfg: SynthConfig, rng: np.random.Generator, sample_id: str) -> Sample:
    h, w = cfg.size
    cy0, cx0, fov_r = _fov(cfg.size, cfg.fov_fraction)
    yy, xx = _grid(h, w)
    bg = render_background(cfg)
    image = bg.copy()
    mask = np.zeros((NUM_CLASSES, h, w), dtype=np.float32)
    placed: list[tuple[float, float, float]] = []
    blobs = []

    # large lesions first so small ones fill the gaps
    for cls in (2, 1, 0, 3):
        style = cfg.styles[cls]
        n = int(rng.integers(style.count[0], style.count[1], endpoint=True))
        for _ in range(n):
            r = float(rng.uniform(*style.radius))
            if cls == 3:
                r = float(round(r))
            for _attempt in range(cfg.max_tries):
                ang = rng.uniform(0, 2 * np.pi)
                dist = fov_r * np.sqrt(rng.uniform(0, 1)) * 0.95
                cy, cx = cy0 + dist * np.sin(ang), cx0 + dist * np.cos(ang)
                if cls == 3:
                    cy, cx = float(round(cy)), float(round(cx))
                foot = {0: 2.2 * r, 1: 1.5 * r, 2: 1.2 * r}.get(cls, r)
                if all(math.hypot(cy - py, cx - px) > foot + pr + 2.0 for py, px, pr in placed):
                    break
            else:
                raise GenerationError(
                    f"could not place a class-{cls} lesion after {cfg.max_tries} tries; too many blobs for {h}x{w}"
                )
            alpha, foot = _shape_alpha(cls, rng, yy, xx, cy, cx, r)
            placed.append((cy, cx, foot))
            lesion = alpha >= 0.5
            image = image * (1.0 - alpha[None]) + COLORS[cls][:, None, None] * alpha[None]
            mask[cls][lesion] = 1.0
            blobs.append((cls, int(lesion.sum())))

    if cfg.noise > 0:
        image = image + rng.uniform(-cfg.noise, cfg.noise, size=image.shape)
    return Sample(quantize(image), mask, sample_id, blobs)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so that saving to PPM is lossless."""
    return from_u8(to_u8(image))


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def generate(cfg: SynthConfig, offset: int = 0) -> list[Sample]:
    """Deterministic under ``cfg.seed``; sample i uses the seed ``seed ^ (offset + i)``."""
    out = []
    for i in range(offset, offset + cfg.count):
        rng = np.random.default_rng(cfg.seed ^ i)
        out.append(_render(cfg, rng, f"s{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------


def save_dir(path: str | Path, samples: list[Sample]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_netpbm(path / f"{s.id}.img.ppm", to_u8(s.image.transpose(1, 2, 0)))
        for k in range(s.mask.shape[0]):
            write_netpbm(path / f"{s.id}.mask_{k}.pgm", (s.mask[k] * 255).astype(np.uint8))
    (path / MANIFEST).write_text("".join(f"{s.id}\n" for s in samples))


def _scaled(arr: np.ndarray, maxval: int) -> np.ndarray:
    if maxval == 255:
        return from_u8(arr)
    return arr.astype(np.float32) / np.float32(maxval)


def load_dir(path: str | Path, num_classes: int = NUM_CLASSES) -> list[Sample]:
    """Load ``<id>.img.ppm`` + ``<id>.mask_<k>.pgm`` pairs.

    Ids come from ``manifest.txt`` when present, otherwise from the image
    files in sorted order. Masks are binarised at 128 (of 255).
    """
    path = Path(path)
    manifest = path / MANIFEST
    if manifest.exists():
        ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    else:
        ids = sorted(p.name[: -len(".img.ppm")] for p in path.glob("*.img.ppm"))
    samples = []
    for sid in ids:
        img_path = path / f"{sid}.img.ppm"
        if not img_path.exists():
            raise FileNotFoundError(f"missing image {img_path}")
        img, maxval = read_netpbm(img_path)
        if img.ndim != 3:
            raise NetpbmError(f"{img_path}: expected a P6 colour image")
        masks = []
        for k in range(num_classes):
            mpath = path / f"{sid}.mask_{k}.pgm"
            if not mpath.exists():
                raise FileNotFoundError(f"missing mask {mpath}")
            m, mmax = read_netpbm(mpath)
            if m.ndim != 2:
                raise NetpbmError(f"{mpath}: expected a P5 grey image")
            if m.shape != img.shape[:2]:
                raise NetpbmError(f"{mpath}: size {m.shape} differs from image {img.shape[:2]}")
            thresh = 128 if mmax == 255 else (mmax + 1) // 2
            masks.append((m >= thresh).astype(np.float32))
        samples.append(Sample(_scaled(img, maxval).transpose(2, 0, 1).copy(), np.stack(masks), sid))
    return samples


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return T.bilinear_resize(T.Tensor(image[None]), *size).data[0]


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape[-2:]
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return mask[..., rows[:, None], cols[None, :]]


def augment(
    rng: np.random.Generator,
    sample: Sample,
    crop_size: tuple[int, int],
    resize_to: tuple[int, int] | None = None,
) -> Sample:
    """Random crop shared by image and masks, then resize (bilinear / nearest)."""
    _, h, w = sample.image.shape
    ch, cw = crop_size
    if ch > h or cw > w:
        raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
    r0 = int(rng.integers(0, h - ch, endpoint=True))
    c0 = int(rng.integers(0, w - cw, endpoint=True))
    image = sample.image[:, r0:r0 + ch, c0:c0 + cw]
    mask = sample.mask[:, r0:r0 + ch, c0:c0 + cw]
    if resize_to is not None and tuple(resize_to) != (ch, cw):
        image = resize_image(image, resize_to)
        mask = resize_nearest(mask, resize_to)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id, sample.blobs)
