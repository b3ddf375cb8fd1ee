"""Seed-deterministic training loop, evaluation driver, and batch prediction.

The loop is single-threaded and fully determined by (seed, config, dataset):
per-epoch shuffles come from one generator, dropout masks from another, and
checkpoints are written atomically, so identical runs produce byte-identical
checkpoint files and loss histories.

Task selection ("mr", "hd", "both") works by zeroing the loss weights of the
inactive task, which leaves targets and the model untouched — the single-task
configurations differ from joint training only in which heads receive
gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NumericError, RngState, Tensor
from .data import DataError, VideoSample
from .decode import MomentPrediction, PredictionRecord, decode_predictions, write_predictions
from .losses import (
    LossWeights,
    build_targets,
    focal_center_loss,
    regression_losses,
    saliency_loss,
    total_loss,
)
from .metrics import EvalReport, build_report
from .model import MomentModel, save_checkpoint

TASKS = ("mr", "hd", "both")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0        # periodic snapshot interval in epochs; 0 = final only
    clip_norm: float | None = None   # optional global-norm safety rail (e.g. 10.0)
    tasks: str = "both"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be nonnegative, got {self.checkpoint_every}")
        if self.tasks not in TASKS:
            raise ValueError(f"tasks must be one of {TASKS}, got {self.tasks!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive when set, got {self.clip_norm}")

    def task_weights(self) -> LossWeights:
        """Loss weights with the inactive task's terms zeroed out."""
        if self.tasks == "mr":
            return replace(self.weights, saliency=0.0)
        if self.tasks == "hd":
            return replace(self.weights, center=0.0, window=0.0, offset=0.0)
        return self.weights


class AdamW:
    """Adaptive moment estimation with decoupled weight decay.

    The decay term is applied directly to the parameters, scaled by the
    learning rate but outside the adaptive rescaling, so regularization
    strength does not depend on gradient magnitudes.
    """

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params: list[tuple[str, Tensor]] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad**2)) for _, p in self.params if p.grad is not None))

    def clip_gradients(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for (_, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


@dataclass
class TrainResult:
    loss_history: list[float]                 # per-epoch mean of batch totals
    component_history: list[dict[str, float]]  # per-epoch unweighted component means
    checkpoints: list[Path]


def _sample_losses(model: MomentModel, sample: VideoSample, targets, weights: LossWeights,
                   rng: RngState | None, training: bool):
    preds = model.forward(sample, rng=rng, training=training)
    l_s = saliency_loss(preds.saliency, targets.saliency_targets)
    l_c = focal_center_loss(preds.heatmap, targets.heatmap, targets.n_moments, weights)
    l_w, l_o = regression_losses(preds.window, preds.offset, targets)
    return total_loss(l_s, l_c, l_w, l_o, weights), (l_s.item(), l_c.item(), l_w.item(), l_o.item())


def train(model: MomentModel, samples: list[VideoSample], config: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Optimize the model in place; returns loss history and checkpoint paths."""
    config.validate()
    if not samples:
        raise DataError("training needs at least one sample")
    weights = config.task_weights()
    targets = [build_targets(s.moments, s.saliency, s.n_clips, weights) for s in samples]
    drop_rng = RngState(config.seed)
    order = np.random.default_rng(config.seed)
    opt = AdamW(model.named_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    out_path = Path(out_dir) if out_dir is not None else None
    history: list[float] = []
    component_history: list[dict[str, float]] = []
    written: list[Path] = []
    for epoch in range(config.epochs):
        perm = order.permutation(len(samples))
        batch_values: list[float] = []
        batch_comps: list[np.ndarray] = []
        for start in range(0, len(samples), config.batch_size):
            batch = perm[start : start + config.batch_size]
            opt.zero_grad()
            total: Tensor | None = None
            comps = np.zeros(4)
            for idx in batch:
                sample_total, parts = _sample_losses(
                    model, samples[idx], targets[idx], weights, drop_rng, training=True
                )
                total = sample_total if total is None else ag.add(total, sample_total)
                comps += parts
            total = ag.mul(total, 1.0 / len(batch))
            comps /= len(batch)
            value = total.item()
            batch_id = start // config.batch_size
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch} batch {batch_id}")
            recombined = (
                weights.saliency * comps[0] + weights.center * comps[1]
                + weights.window * comps[2] + weights.offset * comps[3]
            )
            if abs(value - recombined) > 1e-10:
                raise NumericError(
                    f"loss bookkeeping drift {abs(value - recombined):.3e} at epoch {epoch} batch {batch_id}"
                )
            ag.backward(total)
            if config.clip_norm is not None:
                opt.clip_gradients(config.clip_norm)
            opt.step()
            batch_values.append(value)
            batch_comps.append(comps)
        history.append(float(np.mean(batch_values)))
        epoch_comps = np.mean(batch_comps, axis=0)
        component_history.append(
            {k: float(v) for k, v in zip(("saliency", "center", "window", "offset"), epoch_comps)}
        )
        if (
            out_path is not None and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs
        ):
            snap = out_path / f"epoch{epoch + 1:04d}.ckpt"
            save_checkpoint(model, snap, extra={"epoch": epoch + 1})
            written.append(snap)
    if out_path is not None:
        final = out_path / "final.ckpt"
        save_checkpoint(model, final, extra={"epochs": config.epochs, "loss_history": history})
        written.append(final)
    return TrainResult(history, component_history, written)


def evaluate(model: MomentModel, samples: list[VideoSample], tasks: str = "both",
             mode: str = "local_maxima", top_k: int = 10) -> EvalReport:
    """Score the model on annotated samples for the selected task mix."""
    if tasks not in TASKS:
        raise ValueError(f"tasks must be one of {TASKS}, got {tasks!r}")
    if not samples:
        raise DataError("evaluation needs at least one sample")
    need_mr = tasks in ("mr", "both")
    need_hd = tasks in ("hd", "both")
    if need_mr and not any(s.moments for s in samples):
        raise DataError("moment retrieval evaluation needs at least one annotated moment")
    if need_hd:
        for s in samples:
            if s.saliency is None:
                raise DataError(f"{s.video_id}: highlight evaluation needs saliency annotations")
    preds_q: list[list[MomentPrediction]] = []
    gts_q: list[list[tuple[float, float]]] = []
    sal_v: list[np.ndarray] = []
    pos_v: list[np.ndarray] = []
    with ag.no_grad():
        for s in samples:
            preds = model.forward(s)
            if need_mr:
                preds_q.append(
                    decode_predictions(
                        preds.heatmap.data, preds.window.data, preds.offset.data,
                        s.clip_seconds, mode=mode, top_k=top_k,
                    )
                )
                gts_q.append([m.span_seconds(s.clip_seconds) for m in s.moments])
            if need_hd:
                sal_v.append(preds.saliency.data.copy())
                pos_v.append(s.positive_flags())
    return build_report(preds_q or None, gts_q or None, sal_v or None, pos_v or None, tasks=tasks)


def predict(model: MomentModel, samples: list[VideoSample], output_path: str | Path | None = None,
            mode: str = "local_maxima", top_k: int = 10) -> list[PredictionRecord]:
    """Run inference and optionally write the JSON-lines interchange format."""
    records: list[PredictionRecord] = []
    with ag.no_grad():
        for s in samples:
            preds = model.forward(s)
            moments = decode_predictions(
                preds.heatmap.data, preds.window.data, preds.offset.data,
                s.clip_seconds, mode=mode, top_k=top_k,
            )
            records.append(
                PredictionRecord(s.video_id, moments, [float(v) for v in preds.saliency.data])
            )
    if output_path is not None:
        write_predictions(output_path, records)
    return records
