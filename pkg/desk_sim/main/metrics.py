from __future__ import annotations

from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, write_to_textfile

from ..api import LossReport
from .log import LOG


class TrainingMetrics:
    """
    Prometheus view of the training run, written as a text-format file
    next to the checkpoints.
    """

    def __init__(self):
        self.registry = CollectorRegistry()

        def gauge(name: str, doc: str) -> Gauge:
            return Gauge(name, doc, registry=self.registry)

        self.loss_total = gauge("sim_loss_total", "Weighted training objective")
        self.loss_global = gauge("sim_loss_global", "Global contrastive term")
        self.loss_dense = gauge("sim_loss_dense", "Dense contrastive or pixel term")
        self.alignment = gauge("sim_alignment", "Mean cosine between predictions and targets")
        self.uniformity = gauge("sim_uniformity", "Mean squared-cosine uniformity term")
        self.feature_std = gauge("sim_feature_std", "Token feature standard deviation")
        self.learning_rate = gauge("sim_learning_rate", "Current learning rate")
        self.ema_momentum = gauge("sim_ema_momentum", "Current EMA momentum")

        self.steps = Counter("sim_steps", "Optimizer steps taken", registry=self.registry)
        self.collapse_trips = Counter(
            "sim_collapse_trips", "Steps flagged by the collapse sentinel", registry=self.registry
        )

    def observe(self, report: LossReport, lr: float, ema_momentum: float):
        self.loss_total.set(report.total)
        if report.global_term is not None:
            self.loss_global.set(report.global_term)
        if report.dense_term is not None:
            self.loss_dense.set(report.dense_term)
        if report.align is not None:
            self.alignment.set(report.align)
        if report.uniform is not None:
            self.uniformity.set(report.uniform)
        self.feature_std.set(report.feat_std)
        self.learning_rate.set(lr)
        self.ema_momentum.set(ema_momentum)

        self.steps.inc()
        if report.collapsed:
            self.collapse_trips.inc()

    def write(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        LOG.debug("Wrote metrics to %s", path)
