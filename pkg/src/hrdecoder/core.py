"""High-resolution decoding: random feature crops, tiled HR prediction and fusion.

Everything here works on the feature-scale HR canvas of size
(sigma*h, sigma*w). Crop boxes are sampled in canvas coordinates and mapped
to ground-truth pixels by an integer scale (the encoder output stride when
the ground truth is at full sigma*H x sigma*W resolution).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import Model, multiclass_dice
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HRConfig:
    sigma: int = 2
    num_crops: int = 2
    crop_factor: float = 0.25
    divisor: int = 8
    hr_lambda: float = 0.1
    fusion_weight: float = 0.5
    # feature units; None means (h, w) of the LR feature map
    window: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None

    def __post_init__(self):
        if self.sigma < 1:
            raise ConfigError("sigma must be >= 1")
        if self.num_crops < 0:
            raise ConfigError("num_crops must be >= 0")
        if not 0.0 <= self.crop_factor <= 1.0:
            raise ConfigError("crop_factor must lie in [0, 1]")
        if self.divisor < 1:
            raise ConfigError("divisor must be >= 1")

    def window_for(self, h: int, w: int) -> tuple[int, int]:
        return self.window if self.window is not None else (h, w)

    def stride_for(self, h: int, w: int) -> tuple[int, int]:
        if self.stride is not None:
            return self.stride
        return self.window_for(h, w)


@dataclass(frozen=True)
class CropBox:
    """Rows b1:b2 and columns b3:b4 on the HR feature canvas."""

    b1: int
    b2: int
    b3: int
    b4: int
    scale: int = 1

    @property
    def height(self) -> int:
        return self.b2 - self.b1

    @property
    def width(self) -> int:
        return self.b4 - self.b3

    @property
    def image_box(self) -> tuple[int, int, int, int]:
        s = self.scale
        return self.b1 * s, self.b2 * s, self.b3 * s, self.b4 * s


@dataclass
class FusedOutput:
    y_hat: Tensor
    y_lr: Tensor
    y_hr: Tensor
    crop_losses: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Crop sampling
# ---------------------------------------------------------------------------


def round_to_multiple(x: float, d: int) -> int:
    """Nearest multiple of d (ties upward), at least d."""
    return max(d, int(math.floor(x / d + 0.5)) * d)


def _side(s: float, base: int, canvas: int, d: int) -> tuple[int, bool]:
    size = round_to_multiple(s * base, d)
    if size <= canvas:
        return size, False
    fitted = (canvas // d) * d
    return (fitted if fitted > 0 else canvas), True


def sample_crop_boxes(
    rng: np.random.Generator,
    cfg: HRConfig,
    canvas: tuple[int, int],
    base: tuple[int, int],
    image_scale: int = 4,
    stats: Counter | None = None,
) -> list[CropBox]:
    """Draw ``cfg.num_crops`` boxes on the HR canvas.

    A single ratio ``s ~ U(1 - delta, 1 + delta)`` scales both sides of the
    base size; each side is rounded to a multiple of the divisor. Top-left
    corners are drawn uniformly from the divisor lattice that keeps the box
    inside the canvas. Crops that would not fit are shrunk to the canvas and
    counted under ``stats["clamped"]``.
    """
    ch, cw = canvas
    h, w = base
    d = cfg.divisor
    delta = cfg.crop_factor
    boxes = []
    for _ in range(cfg.num_crops):
        s = rng.uniform(1.0 - delta, 1.0 + delta) if delta > 0 else 1.0
        sh, clamped_h = _side(s, h, ch, d)
        sw, clamped_w = _side(s, w, cw, d)
        if clamped_h or clamped_w:
            if stats is not None:
                stats["clamped"] += 1
            log.debug("crop ratio %.3f clamped to fit %dx%d canvas", s, ch, cw)
        b1 = int(rng.integers(0, (ch - sh) // d, endpoint=True)) * d
        b3 = int(rng.integers(0, (cw - sw) // d, endpoint=True)) * d
        boxes.append(CropBox(b1, b1 + sh, b3, b3 + sw, image_scale))
    return boxes


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------


def window_starts(size: int, win: int, stride: int) -> list[int]:
    """Window offsets along one axis; the last window is flushed to the edge."""
    if win > size:
        raise ConfigError(f"window {win} larger than canvas {size}")
    if stride > win:
        raise ConfigError(f"stride {stride} exceeds window {win}: coverage gaps")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    starts = list(range(0, size - win + 1, stride))
    if starts[-1] + win < size:
        starts.append(size - win)
    return starts


def tile_boxes(canvas: tuple[int, int], window: tuple[int, int], stride: tuple[int, int]) -> list[CropBox]:
    rows = window_starts(canvas[0], window[0], stride[0])
    cols = window_starts(canvas[1], window[1], stride[1])
    return [CropBox(r, r + window[0], c, c + window[1]) for r in rows for c in cols]


def overlap_counts(canvas: tuple[int, int], boxes: list[CropBox]) -> np.ndarray:
    counts = np.zeros(canvas, dtype=np.int64)
    for b in boxes:
        counts[b.b1:b.b2, b.b3:b.b4] += 1
    return counts


def sliding_window_predict(z_lr: Tensor, model: Model, cfg: HRConfig) -> Tensor:
    """Decode the sigma-upsampled feature map window by window.

    Overlapping contributions are averaged. With stride == window the tiles
    partition the canvas and no averaging happens.
    """
    n, c, h, w = z_lr.shape
    canvas = (cfg.sigma * h, cfg.sigma * w)
    window = cfg.window_for(h, w)
    stride = cfg.stride_for(h, w)
    boxes = tile_boxes(canvas, window, stride)
    z_hr = T.bilinear_resize(z_lr, *canvas)

    acc = None
    for b in boxes:
        logits = model.decode(T.slice_crop(z_hr, b))
        placed = T.paste(logits, b.b1, b.b3, *canvas)
        acc = placed if acc is None else acc + placed
    counts = overlap_counts(canvas, boxes)
    if counts.max() == 1:
        return acc
    weights = np.broadcast_to(1.0 / counts, acc.shape).astype(acc.dtype)
    return acc * Tensor(weights, dtype=acc.dtype)


# ---------------------------------------------------------------------------
# Fusion and losses
# ---------------------------------------------------------------------------


def fuse(y_hr: Tensor, y_lr: Tensor, alpha: float = 0.5) -> Tensor:
    """``alpha * y_hr + (1 - alpha) * y_lr`` on logits."""
    if y_hr.shape != y_lr.shape:
        raise ValueError(f"fuse: shape mismatch {y_hr.shape} vs {y_lr.shape}")
    return T.scale(y_hr, alpha) + T.scale(y_lr, 1.0 - alpha)


def _gt_array(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y)


def hr_representation_loss(
    z_lr: Tensor,
    y,
    boxes: list[CropBox],
    model: Model,
    cfg: HRConfig,
) -> tuple[Tensor, list[Tensor]]:
    """Mean multiclass Dice over feature crops decoded at base resolution.

    Each crop of the sigma-upsampled features is resized back to h x w,
    decoded, and its logits are upsampled to the crop's ground-truth window.
    """
    if not boxes:
        return T.zeros((), dtype=z_lr.dtype), []
    _, _, h, w = z_lr.shape
    gt = _gt_array(y)
    gh, gw = gt.shape[-2:]
    z_ori = T.bilinear_resize(z_lr, cfg.sigma * h, cfg.sigma * w)
    losses = []
    for b in boxes:
        r0, r1, c0, c1 = b.image_box
        if not (0 <= r0 < r1 <= gh and 0 <= c0 < c1 <= gw):
            raise IndexError(f"image box {b.image_box} outside ground truth {gh}x{gw}")
        z_c = T.bilinear_resize(T.slice_crop(z_ori, b), h, w)
        logits = T.bilinear_resize(model.decode(z_c), r1 - r0, c1 - c0)
        losses.append(multiclass_dice(logits, gt[..., r0:r1, c0:c1]))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return T.scale(total, 1.0 / len(losses)), losses


def hr_forward(z_lr: Tensor, model: Model, cfg: HRConfig) -> FusedOutput:
    """LR branch, tiled HR branch and their fusion, all at sigma*h x sigma*w."""
    _, _, h, w = z_lr.shape
    y_lr = T.bilinear_resize(model.decode(z_lr), cfg.sigma * h, cfg.sigma * w)
    y_hr = sliding_window_predict(z_lr, model, cfg)
    return FusedOutput(fuse(y_hr, y_lr, cfg.fusion_weight), y_lr, y_hr)


def gt_scale(y, canvas: tuple[int, int]) -> int:
    gh, gw = _gt_array(y).shape[-2:]
    if gh % canvas[0] or gw % canvas[1] or gh // canvas[0] != gw // canvas[1]:
        raise ValueError(f"ground truth {gh}x{gw} is not an integer multiple of canvas {canvas}")
    return gh // canvas[0]


def total_loss(
    x_lr: Tensor,
    y,
    model: Model,
    cfg: HRConfig,
    rng: np.random.Generator,
    stats: Counter | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """``L = L_seg + lambda * L_hr`` with the encoder run once on ``x_lr``."""
    z = model.encode(x_lr)
    _, _, h, w = z.shape
    out = hr_forward(z, model, cfg)
    gt = _gt_array(y)
    gh, gw = gt.shape[-2:]
    l_seg = multiclass_dice(T.bilinear_resize(out.y_hat, gh, gw), gt)

    canvas = (cfg.sigma * h, cfg.sigma * w)
    boxes = []
    if cfg.num_crops:
        boxes = sample_crop_boxes(rng, cfg, canvas, (h, w), gt_scale(gt, canvas), stats)
    l_hr, _ = hr_representation_loss(z, gt, boxes, model, cfg)
    return l_seg + T.scale(l_hr, cfg.hr_lambda), l_seg, l_hr


def baseline_loss(x_lr: Tensor, y, model: Model) -> Tensor:
    """Plain encoder-decoder Dice loss with logits upsampled to the ground truth."""
    gt = _gt_array(y)
    logits = model.decode(model.encode(x_lr))
    return multiclass_dice(T.bilinear_resize(logits, *gt.shape[-2:]), gt)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _pad_amounts(size: int, multiple: int) -> tuple[int, int]:
    extra = -size % multiple
    return extra // 2, extra - extra // 2


def infer(
    x,
    model: Model,
    cfg: HRConfig,
    lr_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Fused class probabilities at the input resolution.

    ``x`` is N x 3 x H x W (or 3 x H x W). Without ``lr_size`` the encoder
    sees the input downsampled by sigma, after symmetric zero padding to a
    multiple of ``output_stride * sigma``; the padding is cropped away again
    at the end.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    _, _, hin, win = arr.shape
    r = model.output_stride

    if lr_size is None:
        ph = _pad_amounts(hin, r * cfg.sigma)
        pw = _pad_amounts(win, r * cfg.sigma)
        if any(ph + pw):
            arr = np.pad(arr, ((0, 0), (0, 0), ph, pw))
        lr_size = (arr.shape[2] // cfg.sigma, arr.shape[3] // cfg.sigma)
    else:
        ph = pw = (0, 0)
        if lr_size[0] % r or lr_size[1] % r:
            raise ValueError(f"lr_size {lr_size} not divisible by output stride {r}")

    x_lr = T.bilinear_resize(Tensor(arr), *lr_size)
    z = model.encode(x_lr)
    probs = T.sigmoid(hr_forward(z, model, cfg).y_hat)
    full = T.bilinear_resize(probs, arr.shape[2], arr.shape[3]).data
    full = full[:, :, ph[0]:ph[0] + hin, pw[0]:pw[0] + win]
    return full[0] if squeeze else full
