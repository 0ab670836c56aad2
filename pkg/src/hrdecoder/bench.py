"""Executable versions of the three cost-model strategies, for latency timing."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .core import HRConfig, fuse, infer, overlap_counts, tile_boxes
from .costmodel import STRATEGIES, Strategy
from .nets import Model
from .tensor import Tensor


def predict_lr_only(x: np.ndarray, model: Model) -> np.ndarray:
    """Encoder + decoder on the given image, logits upsampled back to it."""
    xt = Tensor(x)
    logits = model.decode(model.encode(xt))
    return T.sigmoid(T.bilinear_resize(logits, *x.shape[2:])).data


def predict_hrdecoder(x: np.ndarray, model: Model, cfg: HRConfig) -> np.ndarray:
    return infer(x, model, cfg)


def predict_encoder_multipass(x: np.ndarray, model: Model, cfg: HRConfig) -> np.ndarray:
    """LR pass plus one encoder + decoder pass per window of the full-resolution image."""
    n, _, H, W = x.shape
    s, r = cfg.sigma, model.output_stride
    xt = Tensor(x)
    z = model.encode(T.bilinear_resize(xt, H // s, W // s))
    _, _, h, w = z.shape
    canvas = (s * h, s * w)
    y_lr = T.bilinear_resize(model.decode(z), *canvas)
    boxes = tile_boxes(canvas, cfg.window_for(h, w), cfg.stride_for(h, w))
    # canvas cells map to r x r image pixels when the image is sigma times the LR input
    scale = H // canvas[0]
    acc = np.zeros((n, model.num_classes, *canvas), np.float32)
    for b in boxes:
        crop = T.crop(xt, b.b1 * scale, b.b2 * scale, b.b3 * scale, b.b4 * scale)
        out = model.decode(model.encode(crop))
        if out.shape[2:] != (b.height, b.width):
            out = T.bilinear_resize(out, b.height, b.width)
        acc[:, :, b.b1:b.b2, b.b3:b.b4] += out.data
    counts = overlap_counts(canvas, boxes)
    y_hr = Tensor(acc / counts if counts.max() > 1 else acc)
    y = fuse(y_hr, y_lr, cfg.fusion_weight)
    return T.sigmoid(T.bilinear_resize(y, H, W)).data


def strategy_runner(strategy: Strategy, model: Model, lr_hw: tuple[int, int], batch: int = 1, seed: int = 0):
    """Returns a zero-argument callable running ``strategy`` on a fixed random input."""
    if strategy.kind not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy.kind!r}")
    rng = np.random.default_rng(seed)
    cfg = HRConfig(sigma=strategy.sigma, num_crops=0, window=strategy.window, stride=strategy.stride)
    if strategy.kind == "lr_only":
        x = rng.random((batch, 3, *lr_hw), dtype=np.float32)
        return lambda: predict_lr_only(x, model)
    x = rng.random((batch, 3, lr_hw[0] * strategy.sigma, lr_hw[1] * strategy.sigma), dtype=np.float32)
    if strategy.kind == "hrdecoder":
        return lambda: predict_hrdecoder(x, model, cfg)
    return lambda: predict_encoder_multipass(x, model, cfg)


def time_call(fn: Callable[[], object], runs: int = 20, warmup: int = 3) -> float:
    """Mean wall-clock seconds over ``runs`` calls after ``warmup`` untimed calls."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))

