"""Seeded full-scene training loop with cached geometry plans.

Spatial queries (octant tables, sampling, grouping, interpolation) depend only
on positions, so each scene's plan is built once and reused every epoch; the
per-step cost is then pure dense linear algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .config import TrainSettings
from .data import Scene
from .metrics import MetricsReport, compute_metrics
from .network import (
    NetworkConfig,
    NetworkParams,
    ScenePlan,
    build_plan,
    init_network,
    input_features,
    network_forward,
)


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class OptimizerState:
    """Adam (default) or plain SGD over a fixed parameter list."""

    parameters: list[Parameter]
    settings: TrainSettings
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.settings.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.settings.optimizer!r}")
        if self.settings.optimizer == "adam" and not self.m:
            self.m = [np.zeros_like(p.data) for p in self.parameters]
            self.v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self) -> None:
        lr = self.settings.learning_rate
        self.step_count += 1
        if self.settings.optimizer == "sgd":
            for p in self.parameters:
                p.data -= lr * p.grad
            return
        b1, b2, eps = self.settings.beta1, self.settings.beta2, 1e-8
        t = self.step_count
        for p, m, v in zip(self.parameters, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad ** 2
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()


@dataclass
class TrainStep:
    epoch: int
    step: int
    loss: float
    accuracy: float
    mean_iou: float


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[TrainStep]
    final_loss: float

    def history_csv(self) -> str:
        lines = ["epoch,step,loss,accuracy,miou"]
        for h in self.history:
            lines.append(f"{h.epoch},{h.step},{h.loss:.10g},"
                         f"{h.accuracy:.10g},{h.mean_iou:.10g}")
        return "\n".join(lines) + "\n"


def prepare_plans(scenes: list[Scene], config: NetworkConfig) -> list[ScenePlan]:
    return [build_plan(s.cloud.positions, config) for s in scenes]


def train(config: NetworkConfig, scenes: list[Scene], epochs: int,
          settings: TrainSettings | None = None,
          params: NetworkParams | None = None,
          plans: list[ScenePlan] | None = None,
          shuffle_seed: int | None = None,
          optimizer: OptimizerState | None = None,
          batch_scenes: int = 1,
          progress=None) -> TrainResult:
    """Train on whole scenes, batch_scenes scenes per optimizer step.

    Gradients are averaged over the scenes of a batch. Scene order is
    reshuffled each epoch from a seeded generator (default seed follows the
    network config), so runs are bit-reproducible. Raises DivergenceError if
    the loss ever goes non-finite.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    settings = settings or TrainSettings()
    if params is None:
        params = init_network(config)
    if plans is None:
        plans = prepare_plans(scenes, config)
    features = [input_features(s.cloud, config) for s in scenes]
    labels = [np.asarray(s.cloud.labels, dtype=np.int64) for s in scenes]
    for lab in labels:
        if lab is None:
            raise ValueError("training scenes need labels")
    opt = optimizer or OptimizerState(parameters=params.parameters(), settings=settings)
    order_rng = np.random.default_rng(config.seed if shuffle_seed is None else shuffle_seed)
    history: list[TrainStep] = []
    last_loss = math.nan
    if batch_scenes < 1:
        raise ValueError("batch_scenes must be at least 1")
    for epoch in range(epochs):
        order = order_rng.permutation(len(scenes))
        for step, start in enumerate(range(0, len(order), batch_scenes)):
            batch = order[start:start + batch_scenes]
            opt.zero_grad()
            batch_losses, preds, labs = [], [], []
            for si in batch:
                result = network_forward(params, config, plans[si], features[si])
                loss = ad.softmax_cross_entropy(result.logits, labels[si])
                last_loss = float(loss.data)
                if not math.isfinite(last_loss):
                    raise DivergenceError(
                        f"non-finite loss {last_loss} at epoch {epoch} step {step}")
                result.tape.backward(loss)
                result.tape.release()
                batch_losses.append(last_loss)
                preds.append(np.argmax(result.logits.data, axis=1))
                labs.append(labels[si])
            if len(batch) > 1:
                for p in opt.parameters:
                    p.grad /= len(batch)
            opt.step()
            report = compute_metrics(np.concatenate(preds), np.concatenate(labs),
                                     config.num_classes)
            last_loss = float(np.mean(batch_losses))
            history.append(TrainStep(epoch=epoch, step=step, loss=last_loss,
                                     accuracy=report.overall_accuracy,
                                     mean_iou=report.mean_iou))
        if progress is not None:
            progress(epoch, history[-1])
    return TrainResult(params=params, history=history, final_loss=last_loss)


def predict(params: NetworkParams, config: NetworkConfig, scene: Scene,
            plan: ScenePlan | None = None) -> np.ndarray:
    if plan is None:
        plan = build_plan(scene.cloud.positions, config)
    result = network_forward(params, config, plan, input_features(scene.cloud, config))
    result.tape.release()
    return np.argmax(result.logits.data, axis=1)


def evaluate(params: NetworkParams, config: NetworkConfig, scenes: list[Scene],
             plans: list[ScenePlan] | None = None) -> MetricsReport:
    """Pooled confusion-matrix metrics over a list of scenes."""
    if not scenes:
        raise ValueError("need at least one evaluation scene")
    if plans is None:
        plans = prepare_plans(scenes, config)
    preds, labs = [], []
    for scene, plan in zip(scenes, plans):
        preds.append(predict(params, config, scene, plan))
        labs.append(np.asarray(scene.cloud.labels, dtype=np.int64))
    return compute_metrics(np.concatenate(preds), np.concatenate(labs),
                           config.num_classes)
