"""Training and evaluation loops driven by a :class:`RunConfig`."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .core import infer, total_loss
from .data import CLASS_NAMES, Sample, SynthConfig, augment, generate, load_dir
from .metrics import EvalAccumulator, summarize, write_metrics_csv, write_pr_curve_csv
from .nets import Model, load_checkpoint, model_checkpoint, model_from_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor

CHECKPOINT = "checkpoint.hrsk"
TRAIN_LOG = "train_log.csv"
METRICS = "metrics.csv"


class TrainingError(RuntimeError):
    pass


def load_samples(cfg: RunConfig) -> list[Sample]:
    """Directory dataset when ``data_dir`` is set, otherwise synthetic samples."""
    if cfg.data_dir:
        samples = load_dir(cfg.data_dir, cfg.num_classes)
        return samples[cfg.offset:cfg.offset + cfg.count] if cfg.count else samples[cfg.offset:]
    synth = SynthConfig(count=cfg.count, size=(cfg.size, cfg.size), seed=cfg.data_seed)
    return generate(synth, offset=cfg.offset)


def class_names(num_classes: int) -> list[str]:
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [str(k) for k in range(num_classes)]


def init_model(cfg: RunConfig) -> Model:
    seed = int(np.random.SeedSequence(cfg.seed).spawn(1)[0].generate_state(1)[0])
    model = Model.init(cfg.encoder_config(), cfg.decoder_config(), seed)
    # start every class at a low foreground probability; lesions are rare
    bias = np.full(cfg.num_classes, cfg.prior_bias, np.float32)
    model.params["decoder.1.bias"] = Tensor(bias, requires_grad=True)
    return model


def load_model(cfg: RunConfig, path: str | Path) -> Model:
    return model_from_checkpoint(load_checkpoint(path), cfg.encoder_config(), cfg.decoder_config())


@dataclass
class LogRow:
    step: int
    loss: float
    seg_loss: float
    hr_loss: float


def _batch(samples: list[Sample], idx, cfg: RunConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    picked = [samples[i] for i in idx]
    if cfg.crop_size:
        picked = [augment(rng, s, (cfg.crop_size, cfg.crop_size)) for s in picked]
    return np.stack([s.image for s in picked]), np.stack([s.mask for s in picked])


def train(
    cfg: RunConfig,
    samples: list[Sample],
    out_dir: str | Path,
    progress: Callable[[LogRow], None] | None = None,
) -> tuple[Model, list[LogRow]]:
    """Minimise ``L = L_seg + lambda * L_hr``; writes the log and checkpoints to ``out_dir``."""
    if not samples:
        raise TrainingError("no training samples")
    if cfg.batch_size > len(samples):
        raise TrainingError(f"batch size {cfg.batch_size} exceeds the {len(samples)} training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hr_cfg = cfg.hr_config()
    model = init_model(cfg)
    order_ss, crop_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(4)[1:]
    order_rng = np.random.default_rng(order_ss)
    crop_rng = np.random.default_rng(crop_ss)
    aug_rng = np.random.default_rng(aug_ss)
    text = cfg.to_text()
    opt_state: dict = {}
    rows: list[LogRow] = []

    with open(out_dir / TRAIN_LOG, "w", newline="") as f:
        f.write(f"# {cfg.header()}\n")
        log = csv.writer(f)
        log.writerow(["step", "L", "L_Seg", "L_HR"])
        for step in range(cfg.iters):
            idx = order_rng.choice(len(samples), cfg.batch_size, replace=False)
            x, y = _batch(samples, idx, cfg, aug_rng)
            lr_hw = cfg.encoder_input(x.shape[2:])
            x_lr = T.bilinear_resize(Tensor(x), *lr_hw)
            try:
                with T.Tape() as tape:
                    loss, seg, hr = total_loss(x_lr, y, model, hr_cfg, crop_rng)
                    if not math.isfinite(loss.item()):
                        raise NonFiniteError("loss")
                grads = tape.backward(loss)
            except NonFiniteError as err:
                last = rows[-1] if rows else None
                raise TrainingError(
                    f"non-finite value at step {step} ({err}); last finite losses: "
                    + (f"L={last.loss} L_Seg={last.seg_loss} L_HR={last.hr_loss}" if last else "none")
                ) from err
            if cfg.optimizer == "adam":
                model.params = T.adam_step(model.params, grads, cfg.lr, opt_state, eps=cfg.adam_eps)
            else:
                model.params = T.sgd_step(model.params, grads, cfg.lr, cfg.momentum, opt_state)
            row = LogRow(step, loss.item(), seg.item(), hr.item())
            rows.append(row)
            log.writerow([row.step, repr(row.loss), repr(row.seg_loss), repr(row.hr_loss)])
            if progress:
                progress(row)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{step + 1:06d}.hrsk", model_checkpoint(model, step + 1, text))
    save_checkpoint(out_dir / CHECKPOINT, model_checkpoint(model, cfg.iters, text))
    return model, rows


def predictor(model: Model, cfg: RunConfig) -> Callable[[np.ndarray], np.ndarray]:
    """Maps a 3 x H x W image to K x H x W fused probabilities."""
    hr_cfg = cfg.hr_config()

    def predict(image: np.ndarray) -> np.ndarray:
        lr_size = cfg.encoder_input(image.shape[1:]) if cfg.lr_size else None
        return infer(image, model, hr_cfg, lr_size=lr_size)

    return predict


def evaluate(
    predict: Callable[[np.ndarray], np.ndarray],
    samples: list[Sample],
    num_classes: int,
    out_dir: str | Path | None = None,
    header: str = "",
) -> dict:
    """Accumulate metrics over ``samples``; optionally write metrics and PR-curve CSVs."""
    acc = EvalAccumulator(num_classes)
    for s in samples:
        acc.update(predict(s.image), s.mask)
    summary = summarize(acc)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = class_names(num_classes)
        write_metrics_csv(out_dir / METRICS, summary, names, header)
        for k, name in enumerate(names):
            scores, labels = acc.pairs(k)
            path = out_dir / f"prcurve_{name}.csv"
            if labels.any():
                write_pr_curve_csv(path, scores, labels, header)
            else:
                with open(path, "w") as f:
                    if header:
                        f.write(f"# {header}\n")
                    f.write("threshold,precision,recall\n")
    return summary
