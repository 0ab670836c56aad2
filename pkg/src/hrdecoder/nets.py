"""Toy encoder/decoder pair, Dice losses and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1.0


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    stage_strides: tuple[int, ...] = (2, 2, 1, 1)
    pixel_mean: float = 0.0  # input is standardised as (x - mean) / std
    pixel_std: float = 1.0

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have equal length")
        r = self.output_stride
        if r & (r - 1):
            raise ValueError(f"output stride must be a power of two, got {r}")

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int = 64
    hidden_channels: int = 32
    num_classes: int = 4


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.stage_channels):
        params[f"encoder.{i}.weight"] = Tensor(_he_normal(rng, (cout, cin, 3, 3)), requires_grad=True)
        params[f"encoder.{i}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        cin = cout
    return params


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c, hdim, k = cfg.in_channels, cfg.hidden_channels, cfg.num_classes
    return {
        "decoder.0.weight": Tensor(_he_normal(rng, (hdim, c, 3, 3)), requires_grad=True),
        "decoder.0.bias": Tensor(np.zeros(hdim, np.float32), requires_grad=True),
        "decoder.1.weight": Tensor(_he_normal(rng, (k, hdim, 1, 1)), requires_grad=True),
        "decoder.1.bias": Tensor(np.zeros(k, np.float32), requires_grad=True),
    }


def encoder_forward(cfg: EncoderConfig, params: dict[str, Tensor], x: Tensor) -> Tensor:
    """3x3 conv + SiLU stages; output is N x C x H/r x W/r."""
    r = cfg.output_stride
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"encoder expects N x {cfg.in_channels} x H x W, got {x.shape}")
    if x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"input size {x.shape[2:]} not divisible by output stride {r}")
    h = x
    if cfg.pixel_mean or cfg.pixel_std != 1.0:
        h = T.scale(T.add_scalar(h, -cfg.pixel_mean), 1.0 / cfg.pixel_std)
    for i, s in enumerate(cfg.stage_strides):
        h = T.conv2d(h, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"], stride=s, padding=1)
        h = T.silu(h)
    return h


def decoder_forward(cfg: DecoderConfig, params: dict[str, Tensor], z: Tensor) -> Tensor:
    """FCN-style head: 3x3 conv + SiLU, then 1x1 conv to K logits. Keeps spatial size."""
    if z.ndim != 4 or z.shape[1] != cfg.in_channels:
        raise ValueError(f"decoder expects {cfg.in_channels} channels, got shape {z.shape}")
    h = T.silu(T.conv2d(z, params["decoder.0.weight"], params["decoder.0.bias"], padding=1))
    return T.conv2d(h, params["decoder.1.weight"], params["decoder.1.bias"])


@dataclass
class Model:
    """Encoder + decoder parameters with an encoder call counter."""

    encoder_cfg: EncoderConfig
    decoder_cfg: DecoderConfig
    params: dict[str, Tensor]
    encoder_calls: int = field(default=0, compare=False)

    @classmethod
    def init(cls, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, seed: int) -> "Model":
        if decoder_cfg.in_channels != encoder_cfg.out_channels:
            raise ValueError("decoder in_channels must equal encoder output channels")
        rng = np.random.default_rng(seed)
        params = init_encoder(encoder_cfg, rng)
        params.update(init_decoder(decoder_cfg, rng))
        return cls(encoder_cfg, decoder_cfg, params)

    @property
    def output_stride(self) -> int:
        return self.encoder_cfg.output_stride

    @property
    def num_classes(self) -> int:
        return self.decoder_cfg.num_classes

    def encode(self, x: Tensor) -> Tensor:
        self.encoder_calls += 1
        return encoder_forward(self.encoder_cfg, self.params, x)

    def decode(self, z: Tensor) -> Tensor:
        return decoder_forward(self.decoder_cfg, self.params, z)


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------


def _check_binary(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target must be binary (values in {0, 1})")


def _per_channel_dice(probs: Tensor, target: Tensor, eps: float) -> Tensor:
    # micro-averaged over the batch: intersections and sums pool N, H, W
    axes = (0, 2, 3)
    inter = T.tsum(probs * target, axis=axes)
    denom = T.add_scalar(T.tsum(probs, axis=axes) + T.tsum(target, axis=axes), eps)
    return 1.0 - T.add_scalar(T.scale(inter, 2.0), eps) / denom


def _as_target(target, like: Tensor) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 3:
        t = np.broadcast_to(t[None], (like.shape[0],) + t.shape)
    if t.shape != like.shape:
        raise ValueError(f"target shape {t.shape} does not match prediction {like.shape}")
    _check_binary(t)
    return Tensor(t, dtype=like.dtype)


def dice_loss(pred_probs: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Binary Dice loss ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` on N x 1 x H x W."""
    if pred_probs.ndim != 4 or pred_probs.shape[1] != 1:
        raise ValueError("dice_loss expects N x 1 x H x W probabilities")
    t = _as_target(target, pred_probs)
    return T.tsum(_per_channel_dice(pred_probs, t, eps))


def multiclass_dice(pred_logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """Sum over classes of binary Dice on per-channel sigmoid probabilities."""
    k = pred_logits.shape[1]
    t_shape = np.shape(target.data if isinstance(target, Tensor) else target)
    if t_shape[-3] != k:
        raise ValueError(f"prediction has {k} classes, target has {t_shape[-3]}")
    t = _as_target(target, pred_logits)
    return T.tsum(_per_channel_dice(T.sigmoid(pred_logits), t, eps))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"HRSK"
FORMAT_VERSION = 1
CONFIG_RECORD = "__config__"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    config_text: str = ""
    version: int = FORMAT_VERSION


def _write_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Little-endian: magic, u32 version, u64 step, then tensor records to EOF.

    The serialized run config travels as one extra record whose f32 payload
    holds the UTF-8 bytes.
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", ckpt.version, ckpt.step))
        for name in sorted(ckpt.params):
            _write_record(f, name, np.asarray(ckpt.params[name], dtype=np.float32))
        if ckpt.config_text:
            payload = np.frombuffer(ckpt.config_text.encode("utf-8"), dtype=np.uint8)
            _write_record(f, CONFIG_RECORD, payload.astype(np.float32))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, step = struct.unpack("<IQ", _read_exact(f, 12))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params, config_text = {}, ""
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated checkpoint")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(f, nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
            if name == CONFIG_RECORD:
                config_text = arr.astype(np.uint8).tobytes().decode("utf-8")
            else:
                params[name] = arr
    return Checkpoint(params=params, step=step, config_text=config_text, version=version)


def model_checkpoint(model: Model, step: int, config_text: str = "") -> Checkpoint:
    return Checkpoint({k: v.data for k, v in model.params.items()}, step, config_text)


def model_from_checkpoint(ckpt: Checkpoint, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig) -> Model:
    model = Model.init(encoder_cfg, decoder_cfg, seed=0)
    if set(ckpt.params) != set(model.params):
        raise ValueError("checkpoint parameter names do not match the model config")
    for name, t in model.params.items():
        if ckpt.params[name].shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {ckpt.params[name].shape} != model {t.shape}")
    model.params = {k: Tensor(ckpt.params[k], requires_grad=True) for k in model.params}
    return model
