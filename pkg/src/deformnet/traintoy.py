"""Smoke-test training on a synthetic task.

The dataset is one fixed, seeded batch of 10-class 32x32 images: a class
colors a soft blob (fixed palette color, class-specific center, jittered
per sample) over background noise.  Training is full-batch SGD with
softmax cross-entropy, so a zero learning rate reproduces the same loss
bit-for-bit at every step.  This certifies that the analytic gradients
descend; no accuracy claim is made or implied.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import Model, ModelConfig, apply_gradients, build_model, count_params, model_forward_vjp

NUM_CLASSES = 10
IMAGE_SIZE = 32
BATCH = 64
PARAM_GUARDRAIL = 2_000_000

_PALETTE = np.array(
    [
        [1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0], [1.0, 1.0, 0.1],
        [1.0, 0.1, 1.0], [0.1, 1.0, 1.0], [0.9, 0.5, 0.1], [0.5, 0.1, 0.9],
        [0.2, 0.7, 0.4], [0.7, 0.7, 0.7],
    ]
)


def make_toy_batch(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (images, labels): colored blobs on noise, stratified."""
    rng = np.random.default_rng(seed)
    labels = np.arange(BATCH) % NUM_CLASSES
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    images = rng.normal(0.0, 0.3, (BATCH, 3, IMAGE_SIZE, IMAGE_SIZE))
    for i, cls in enumerate(labels):
        ang = 2.0 * np.pi * cls / NUM_CLASSES
        cy = IMAGE_SIZE / 2 + 8.0 * np.sin(ang) + rng.uniform(-2, 2)
        cx = IMAGE_SIZE / 2 + 8.0 * np.cos(ang) + rng.uniform(-2, 2)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * 4.0**2))
        images[i] += 2.0 * _PALETTE[cls][:, None, None] * bump[None]
    return images, labels


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class TrainResult:
    losses: list[float]

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def train_toy(config: ModelConfig, steps: int, lr: float, seed: int) -> tuple[Model, TrainResult]:
    """Full-batch SGD on the synthetic task; returns the per-step losses.

    Refuses configurations above the parameter guardrail: this command
    exists to certify gradient descent at desk scale, nothing more.
    """
    report = count_params(
        config.stack, config.ffn_ratio, config.num_classes, config.layer_scale
    )
    if report.closed_form_total > PARAM_GUARDRAIL:
        raise ConfigError(
            f"config has {report.closed_form_total:,} params, over the "
            f"{PARAM_GUARDRAIL:,} toy-training guardrail"
        )
    if config.num_classes != NUM_CLASSES:
        raise ConfigError(f"toy task has {NUM_CLASSES} classes, config says {config.num_classes}")
    model = build_model(config)
    images, labels = make_toy_batch(seed)
    losses = []
    for _ in range(steps):
        logits, _, pull = model_forward_vjp(model, images)
        loss, glogits = cross_entropy(logits, labels)
        losses.append(loss)
        _, grads = pull(glogits)
        apply_gradients(model, grads, lr)
    return model, TrainResult(losses=losses)


def write_loss_csv(result: TrainResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses):
            writer.writerow([i, f"{loss:.17g}"])
