"""Analytic FLOP and activation-memory accounting for three inference strategies.

``lr_only``            encoder + decoder on the H x W input
``hrdecoder``          one encoder pass on the downsampled image, decoder run
                       on the sigma-upsampled features window by window
``encoder_multipass``  LR pass plus one full encoder+decoder pass per HR
                       image window (l^2 + 1 encoder passes)

A multiply-accumulate counts as 2 FLOPs, bilinear resampling as 8 FLOPs per
output element, and elementwise ops as one FLOP per element and operation.
Memory counts activations only (float32, weights excluded), with layers and
windows executed one at a time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .core import tile_boxes
from .nets import DecoderConfig, EncoderConfig

BYTES_PER_VALUE = 4
STRATEGIES = ("lr_only", "hrdecoder", "encoder_multipass")


@dataclass(frozen=True)
class Conv:
    cin: int
    cout: int
    k: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Resize:
    out_h: int
    out_w: int


@dataclass(frozen=True)
class Elementwise:
    ops_per_element: int = 1


Layer = Conv | Resize | Elementwise
Shape = tuple[int, int, int]  # C, H, W


class ShapeError(ValueError):
    pass


def layer_cost(layer: Layer, shape: Shape) -> tuple[int, Shape]:
    c, h, w = shape
    if isinstance(layer, Conv):
        if layer.cin != c:
            raise ShapeError(f"conv expects {layer.cin} channels, got {c}")
        oh = (h + 2 * layer.pad - layer.k) // layer.stride + 1
        ow = (w + 2 * layer.pad - layer.k) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv kernel {layer.k} does not fit {h}x{w}")
        return 2 * layer.k * layer.k * layer.cin * layer.cout * oh * ow, (layer.cout, oh, ow)
    if isinstance(layer, Resize):
        return 8 * c * layer.out_h * layer.out_w, (c, layer.out_h, layer.out_w)
    if isinstance(layer, Elementwise):
        return layer.ops_per_element * c * h * w, shape
    raise TypeError(f"unknown layer {layer!r}")


def count_layers(layers: list[Layer], shape: Shape) -> tuple[int, Shape, list[int]]:
    """FLOPs of a sequential layer list; also returns the output shape and per-layer sizes."""
    total = 0
    sizes = [_numel(shape)]
    for layer in layers:
        flops, shape = layer_cost(layer, shape)
        total += flops
        sizes.append(_numel(shape))
    return total, shape, sizes


def _numel(shape: Shape) -> int:
    c, h, w = shape
    return c * h * w


def _chain_peak(sizes: list[int]) -> int:
    """Peak of input + output over a sequential chain (sizes[0] is the input)."""
    if len(sizes) == 1:
        return sizes[0]
    return max(a + b for a, b in zip(sizes, sizes[1:]))


@dataclass(frozen=True)
class Strategy:
    kind: str = "hrdecoder"
    sigma: int = 2
    window: tuple[int, int] | None = None  # feature units; None = (h, w)
    stride: tuple[int, int] | None = None
    m_train: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.sigma < 1:
            raise ValueError("sigma must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "lr_only":
            return "lr_only"
        return f"{self.kind}(sigma={self.sigma})"


@dataclass(frozen=True)
class PipelinePlan:
    encoder: tuple[Layer, ...]
    decoder: tuple[Layer, ...]
    strategy: Strategy
    in_channels: int = 3
    num_classes: int = 4
    output_stride: int = 4


@dataclass
class CostReport:
    strategy: str
    encoder_flops: int = 0
    decoder_flops: int = 0
    other_flops: int = 0
    peak_bytes: int = 0
    encoder_passes: int = 0
    decoder_passes: int = 0
    train_extra_flops: int = 0
    breakdown: list[tuple[str, int]] = field(default_factory=list, repr=False)

    @property
    def total_flops(self) -> int:
        return self.encoder_flops + self.decoder_flops + self.other_flops

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def add(self, stage: str, label: str, flops: int) -> None:
        setattr(self, f"{stage}_flops", getattr(self, f"{stage}_flops") + flops)
        self.breakdown.append((label, flops))


def toy_plan(strategy: Strategy, encoder_cfg: EncoderConfig = EncoderConfig(), decoder_cfg: DecoderConfig = DecoderConfig()) -> PipelinePlan:
    """Plan mirroring :mod:`hrdecoder.nets` (activations are not counted)."""
    enc = []
    cin = encoder_cfg.in_channels
    for cout, s in zip(encoder_cfg.stage_channels, encoder_cfg.stage_strides):
        enc.append(Conv(cin, cout, 3, s, 1))
        cin = cout
    dec = (
        Conv(decoder_cfg.in_channels, decoder_cfg.hidden_channels, 3, 1, 1),
        Conv(decoder_cfg.hidden_channels, decoder_cfg.num_classes, 1, 1, 0),
    )
    return PipelinePlan(tuple(enc), dec, strategy, encoder_cfg.in_channels, decoder_cfg.num_classes, encoder_cfg.output_stride)


class _Run:
    """Accumulates FLOPs and tracks peak live bytes for one forward pass."""

    def __init__(self, plan: PipelinePlan, batch: int):
        self.plan = plan
        self.batch = batch
        self.report = CostReport(plan.strategy.label)
        self.peak = 0

    def live(self, values: int) -> None:
        self.peak = max(self.peak, values * self.batch * BYTES_PER_VALUE)

    def encoder(self, h: int, w: int, held: int = 0) -> Shape:
        flops, out, sizes = count_layers(list(self.plan.encoder), (self.plan.in_channels, h, w))
        self.report.add("encoder", f"encoder@{h}x{w}", flops * self.batch)
        self.report.encoder_passes += 1
        self.live(held + _chain_peak(sizes))
        return out

    def decoder(self, shape: Shape, held: int = 0) -> Shape:
        flops, out, sizes = count_layers(list(self.plan.decoder), shape)
        self.report.add("decoder", f"decoder@{shape[1]}x{shape[2]}", flops * self.batch)
        self.report.decoder_passes += 1
        self.live(held + _chain_peak(sizes))
        return out

    def other(self, layer: Layer, shape: Shape, label: str, held: int = 0) -> Shape:
        flops, out = layer_cost(layer, shape)
        self.report.add("other", label, flops * self.batch)
        self.live(held + _numel(shape) + _numel(out))
        return out


def count_flops(plan: PipelinePlan, input_hw: tuple[int, int], batch: int = 1) -> CostReport:
    """Cost of one inference pass; ``input_hw`` is the encoder's LR input size (H, W).

    Strategies with sigma read a sigma*H x sigma*W image. For ``hrdecoder``
    the training-only crop branch is reported separately in
    ``train_extra_flops``.
    """
    st = plan.strategy
    H, W = input_hw
    r = plan.output_stride
    if H % r or W % r:
        raise ShapeError(f"input {H}x{W} not divisible by output stride {r}")
    run = _Run(plan, batch)
    K, cin = plan.num_classes, plan.in_channels

    if st.kind == "lr_only":
        z = run.encoder(H, W)
        logits = run.decoder(z)
        run.other(Resize(H, W), logits, "upsample logits")
        run.report.peak_bytes = run.peak
        return run.report

    s = st.sigma
    image = (cin, s * H, s * W)
    x_lr = (cin, H, W)
    held_image = _numel(image) if st.kind == "encoder_multipass" else 0
    run.other(Resize(H, W), image, "downsample input")

    z = run.encoder(H, W, held=held_image)
    C, h, w = z
    canvas = (s * h, s * w)
    hr_logits = (K, *canvas)
    held = held_image + (_numel(z) if st.kind == "hrdecoder" else 0)
    lr_logits = run.decoder(z, held=held_image)
    y_lr = run.other(Resize(*canvas), lr_logits, "upsample LR logits", held=held)

    window = st.window or (h, w)
    stride = st.stride or window
    boxes = tile_boxes(canvas, window, stride)
    held_tiles = held + 2 * _numel(hr_logits)  # y_lr and the HR accumulator
    for i, b in enumerate(boxes):
        wshape = (C, b.height, b.width)
        if st.kind == "hrdecoder":
            # window features are resampled from z on demand
            run.other(Resize(b.height, b.width), (C, h, w), f"window {i} features", held=held_tiles - _numel(z))
            run.live(held_tiles + _numel(wshape))
            out = run.decoder(wshape, held=held_tiles)
        else:
            crop = (cin, b.height * r, b.width * r)
            run.live(held_tiles + _numel(crop))
            zw = run.encoder(crop[1], crop[2], held=held_tiles)
            out = run.decoder(zw, held=held_tiles)
        run.live(held_tiles + _numel(out))

    if len(boxes) > 1:
        run.other(Elementwise(len(boxes) - 1), hr_logits, "aggregate windows", held=held_image + _numel(y_lr))
    counts_overlap = any(b1 is not b2 and _overlaps(b1, b2) for b1 in boxes for b2 in boxes)
    if counts_overlap:
        run.other(Elementwise(1), hr_logits, "normalise overlaps", held=held_image + _numel(y_lr))
    fused = run.other(Elementwise(3), hr_logits, "fuse", held=held_image + _numel(y_lr))
    run.other(Resize(s * H, s * W), fused, "upsample fused logits", held=held_image)

    if st.kind == "hrdecoder" and st.m_train:
        per_crop = 8 * C * h * w + count_layers(list(plan.decoder), (C, h, w))[0] + 8 * K * (h * r) * (w * r)
        run.report.train_extra_flops = batch * (8 * C * canvas[0] * canvas[1] + st.m_train * per_crop)
    run.report.peak_bytes = run.peak
    return run.report


def _overlaps(a, b) -> bool:
    return a.b1 < b.b2 and b.b1 < a.b2 and a.b3 < b.b4 and b.b3 < a.b4


def estimate_memory(plan: PipelinePlan, input_hw: tuple[int, int], batch: int = 1) -> int:
    """Peak live activation bytes with one layer and one window live at a time."""
    return count_flops(plan, input_hw, batch).peak_bytes


def compare(plans: list[PipelinePlan], input_hw: tuple[int, int], batch: int = 1) -> list[dict]:
    """One row per plan, sorted by FLOPs (stable for ties)."""
    rows = []
    for plan in plans:
        rep = count_flops(plan, input_hw, batch)
        rows.append(
            {
                "strategy": rep.strategy,
                "gflops": rep.gflops,
                "peak_mb": rep.peak_bytes / 2**20,
                "encoder_passes": rep.encoder_passes,
                "flops": rep.total_flops,
            }
        )
    return sorted(rows, key=lambda r: r["flops"])


def write_costs_csv(path: str | Path, rows: list[dict], header: str = "", extra_cols: tuple[str, ...] = ()) -> None:
    cols = ("strategy", "gflops", "peak_mb", "encoder_passes") + tuple(extra_cols)
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], (int, str)) else repr(row[c]) for c in cols])
