"""Plain gradient-descent training and evaluation of the toy depth model."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Sample
from .fileio import atomic_write_text
from .metrics import DepthMetrics, evaluate, mean_metrics, valid_mask
from .model import DepthModel, ModelConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def depth_loss(pred: T.Tensor, gt: np.ndarray) -> T.Tensor:
    """Mean absolute depth error over valid ground-truth pixels."""
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    mask = valid_mask(gt).astype(np.float64)
    n = mask.sum()
    if n == 0:
        raise ValueError("ground truth has no valid pixels")
    return T.mul(T.sum(T.mul(T.abs(T.sub(pred, gt)), mask)), 1.0 / n)


def train_step(model: DepthModel, batch, lr: float, clip: float | None = 1.0) -> float:
    """One SGD step on a batch of (image, depth) pairs; returns the pre-update loss."""
    params = model.parameters()
    with T.Tape() as tape:
        losses = [depth_loss(model(image), depth) for image, depth in batch]
        loss = losses[0]
        for extra in losses[1:]:
            loss = T.add(loss, extra)
        loss = T.mul(loss, 1.0 / len(losses))
    value = loss.item()
    if not np.isfinite(value):
        where = tape.first_nonfinite()
        norms = {t.name: float(np.linalg.norm(t.data)) for t in params}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
        raise TrainingAborted(
            f"non-finite loss {value}; first non-finite tape node: {where}; largest parameter norms: {worst}")
    T.backward(tape, loss, wrt=params)
    if lr == 0.0:
        return value
    factor = 1.0
    if clip is not None:
        total = float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in params)))
        if total > clip:
            factor = clip / total
    for t in params:
        t.data -= (lr * factor) * t.grad
    return value


@dataclass
class TrainResult:
    model: DepthModel
    losses: list[float]
    log_csv: str


def train(config: ModelConfig, samples: list[Sample], steps: int, lr: float = 1e-2,
          batch_size: int = 1, clip: float | None = 1.0, seed: int | None = None,
          log_every: int = 100, decay: bool = False) -> TrainResult:
    """Train a fresh model on ``samples``; sample order is seeded and reproducible.

    ``decay`` anneals the step size linearly from ``lr`` to zero over the run.
    """
    if not samples:
        raise ValueError("no training samples")
    model = DepthModel.create(config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    order: list[int] = []
    losses = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "wall_ms"])
    start = time.perf_counter()
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(samples)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        batch = [(samples[i].image, samples[i].depth) for i in idx]
        step_lr = lr * (1.0 - step / steps) if decay else lr
        loss = train_step(model, batch, step_lr, clip)
        losses.append(loss)
        wall = (time.perf_counter() - start) * 1000.0
        writer.writerow([step, repr(loss), f"{wall:.1f}"])
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6f (%.1f s)", step, loss, wall / 1000)
    return TrainResult(model, losses, buf.getvalue())


def predict(model: DepthModel, image: np.ndarray) -> np.ndarray:
    return model(image).data[..., 0]


def evaluate_model(model: DepthModel, samples: list[Sample]):
    """Per-image aligned metrics; returns (rows, image-averaged dict)."""
    rows = []
    for s in samples:
        a, m = evaluate(predict(model, s.image), s.depth.reshape(s.image.shape[:2]))
        rows.append((s.id, a, m))
    return rows, mean_metrics([m for _, _, m in rows])


def save_model(model: DepthModel, path) -> None:
    checkpoint.save(path, model.state_dict())
    model.config.save(config_path(path))


def load_model(path) -> DepthModel:
    cfg_file = config_path(path)
    if not cfg_file.exists():
        raise FileNotFoundError(f"model config {cfg_file} not found next to checkpoint")
    model = DepthModel.create(ModelConfig.load(cfg_file))
    model.load_state_dict(checkpoint.load(path))
    return model


def config_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".cfg")


def write_log(path, text: str) -> None:
    atomic_write_text(path, text)


__all__ = [
    "DepthMetrics", "TrainResult", "TrainingAborted", "depth_loss", "evaluate_model",
    "load_model", "predict", "save_model", "train", "train_step",
]
