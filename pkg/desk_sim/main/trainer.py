from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, List, Optional, Tuple

import numpy as np

from ..api import CheckpointError, DatasetError, LossReport, NonFiniteError, ViewBatch, json_line
from .augment import build_view_batch
from .batch_queue import run_batches
from .checkpoint import restore_training_state, save_training_state
from .config import SimConfig, config_echo
from .dataset import ImageDataset
from .log import LOG, TRAIN_LOG
from .loss import pixel_report, total_loss
from .metrics import TrainingMetrics
from .model import SimModel, ema_momentum
from .optim import OptimizerState, adamw_step, clip_grad_norm, effective_lr, lr_at
from .tensor import Tape
from .util import derive_rng

LOG_NAME = "train-log.jsonl"
METRICS_NAME = "metrics.prom"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class FitResult:
    checkpoint: Path
    log_path: Path
    steps: int
    epoch_losses: List[float] = field(default_factory=list)
    collapse_trips: int = 0
    last_report: Optional[LossReport] = None


def hidden_positions(visible: np.ndarray, total: int) -> np.ndarray:
    hidden = np.ones((visible.shape[0], total), dtype=bool)
    hidden[np.arange(visible.shape[0])[:, None], visible] = False
    return hidden


class Trainer:
    """
    Owns the model, the optimizer state and the step counter. One
    ``train_step`` is a full online forward, backward, AdamW update and
    EMA update of the target branch.
    """

    def __init__(
        self,
        model: SimModel,
        cfg: SimConfig,
        out_dir: Optional[Path] = None,
        threads: int = 1,
        queue_size: int = 4,
    ):
        self.model = model
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.queue_size = queue_size

        self.optimizer = OptimizerState()
        self.metrics = TrainingMetrics()
        self.step = 0
        self.total_steps = 0
        self.warmup_steps = 0
        self.peak_lr = effective_lr(cfg.train)
        self.collapse_trips = 0
        self.last_lr = 0.0
        self.last_momentum = 0.0

    def set_schedule(self, steps_per_epoch: int):
        train = self.cfg.train
        self.total_steps = steps_per_epoch * train.total_epochs
        self.warmup_steps = steps_per_epoch * train.warmup_epochs

    def schedule_at(self, step: int) -> Tuple[float, float]:
        lr = lr_at(
            step,
            self.warmup_steps,
            self.total_steps,
            self.peak_lr,
            self.cfg.train.lr_schedule,
        )
        # the ramp ends on the index of the last step, where m is final
        return lr, ema_momentum(step, self.cfg.ema, self.total_steps - 1)

    def compute_loss(self, batch: ViewBatch) -> LossReport:
        threshold = self.cfg.train.collapse_threshold
        y_b = self.model.predict(batch)

        if self.cfg.train.target_type == "pixel":
            hidden = None
            if batch.shared_crop:
                hidden = hidden_positions(batch.visible, self.model.num_tokens)
            pred = self.model.predict_pixels(y_b)
            return pixel_report(pred, self.model.pixel_targets(batch), y_b, hidden, threshold)

        z_b = self.model.target_features(batch)
        return total_loss(y_b, z_b, self.cfg.loss, threshold)

    def _save_debug(self):
        if self.out_dir is None:
            LOG.error(
                "Non-finite loss at step %d; no output directory for a debug checkpoint",
                self.step,
            )
            return

        path = self.out_dir / f"debug-step{self.step}.ckpt"
        self.save(path)
        LOG.error("Non-finite loss at step %d; saved debug checkpoint %s", self.step, path)

    def train_step(self, batch: ViewBatch) -> LossReport:
        train = self.cfg.train
        params = self.model.online_parameters()
        self.model.zero_grad()

        lr, momentum = self.schedule_at(self.step)

        try:
            with Tape() as tape:
                report = self.compute_loss(batch)
        except NonFiniteError:
            self._save_debug()
            raise

        if not np.isfinite(report.total):
            self._save_debug()
            raise NonFiniteError(f"Non-finite loss {report.total} at step {self.step}")

        tape.backward(report.objective)

        if train.clip_grad > 0.0:
            clip_grad_norm(params, train.clip_grad)

        adamw_step(params, self.optimizer, lr, train.betas, train.weight_decay, train.adam_eps)
        self.model.update_target(momentum)

        self.metrics.observe(report, lr, momentum)
        if report.collapsed:
            self.collapse_trips += 1
            TRAIN_LOG.warning(
                "Collapse sentinel: feature std %.2e below %.2e at step %d",
                report.feat_std,
                train.collapse_threshold,
                self.step,
            )

        self.last_lr, self.last_momentum = lr, momentum
        self.step += 1
        return report

    def step_record(self, step: int, report: LossReport) -> str:
        lr, momentum = self.schedule_at(step)
        return json_line({"step": step, **report.to_record(), "lr": lr, "ema_m": momentum})

    def save(self, path: Path, epoch: int = 0):
        save_training_state(
            path,
            self.model,
            self.optimizer,
            self.step,
            epoch,
            config_echo(self.cfg),
            total_steps=self.total_steps,
        )

    def resume(self, path: Path) -> int:
        state = restore_training_state(path, self.model)

        if state.config_text and state.config_text != config_echo(self.cfg):
            LOG.warning("Resuming %s with a configuration that differs from its own", path)

        self.optimizer = state.optimizer
        self.step = state.step
        return state.epoch

    def fit(self, dataset: ImageDataset, resume: Optional[Path] = None) -> FitResult:
        """
        Train for ``train.total_epochs`` epochs, dropping each epoch's last
        partial batch. Batch k of epoch e is always built from the same
        shuffled indices and random streams, so resuming from any
        checkpoint replays exactly the remaining steps.
        """
        if self.out_dir is None:
            raise DatasetError("Training requires an output directory")

        train = self.cfg.train
        model_cfg = self.model.cfg

        if len(dataset) == 0:
            raise DatasetError("Training dataset is empty")

        steps_per_epoch = len(dataset) // train.batch_size
        if steps_per_epoch == 0:
            raise DatasetError(
                f"Training dataset has {len(dataset)} images, fewer than the batch size "
                f"{train.batch_size}"
            )

        self.set_schedule(steps_per_epoch)

        if resume is not None:
            self.resume(resume)

        log_path = self.out_dir / LOG_NAME
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "a" if resume is not None else "w")
        except OSError as ex:
            raise CheckpointError(f"Cannot write training log {log_path}: {ex}")

        LOG.info(
            "Training %d epochs x %d steps (peak lr %.3e, starting at step %d)",
            train.total_epochs,
            steps_per_epoch,
            self.peak_lr,
            self.step,
        )

        result = FitResult(checkpoint=self.out_dir / FINAL_CHECKPOINT, log_path=log_path, steps=0)
        epoch_totals = []  # type: List[float]

        def build(epoch: int, batch_index: int) -> ViewBatch:
            order = derive_rng(train.seed, epoch).permutation(len(dataset))
            indices = order[batch_index * train.batch_size : (batch_index + 1) * train.batch_size]
            return build_view_batch(
                dataset,
                indices,
                self.cfg.augment,
                train.same_view,
                model_cfg.image_size,
                self.model.num_tokens,
                train.seed,
                epoch,
                batch_index,
            )

        schedule = [
            (epoch, b)
            for epoch in range(train.total_epochs)
            for b in range(steps_per_epoch)
            if epoch * steps_per_epoch + b >= self.step
        ]

        with log_file:

            def consume(epoch: int, batch_index: int, batch: ViewBatch):
                step = self.step
                report = self.train_step(batch)
                self._record(log_file, step, report)

                epoch_totals.append(report.total)
                result.steps += 1
                result.last_report = report

                if batch_index == steps_per_epoch - 1:
                    self._end_epoch(epoch, epoch_totals)
                    result.epoch_losses.append(float(np.mean(epoch_totals)))
                    epoch_totals.clear()

            run_batches(build, schedule, consume, self.threads, self.queue_size)

        self.save(result.checkpoint, train.total_epochs)
        self.metrics.write(self.out_dir / METRICS_NAME)

        result.collapse_trips = self.collapse_trips
        return result

    def _record(self, log_file: IO[str], step: int, report: LossReport):
        log_file.write(self.step_record(step, report))

        if step % self.cfg.train.log_every == 0:
            TRAIN_LOG.info(
                "step %d: loss %.5f (feat std %.4f, lr %.3e, ema %.5f)",
                step,
                report.total,
                report.feat_std,
                self.last_lr,
                self.last_momentum,
            )

    def _end_epoch(self, epoch: int, totals: List[float]):
        TRAIN_LOG.info("epoch %d: mean loss %.5f", epoch + 1, float(np.mean(totals)))

        if (epoch + 1) % self.cfg.train.checkpoint_every == 0 and self.out_dir is not None:
            self.save(self.out_dir / f"checkpoint-epoch{epoch + 1:04d}.ckpt", epoch + 1)
            self.metrics.write(self.out_dir / METRICS_NAME)
