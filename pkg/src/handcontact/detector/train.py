"""Seeded training loop over annotation records and an image provider."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..data_model import ImageRecord
from ..errors import DataError, TrainingError
from .losses import LossWeights, combine_losses
from .model import HandObjectDetector

ImageProvider = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: str = "resnet101"
    seed: int = 0
    momentum: float = 0.9
    grad_clip: float = 10.0

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise DataError("epochs, learning_rate, and batch_size must be positive")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


def _fetch_image(provider: ImageProvider, image_id: str) -> np.ndarray:
    try:
        return provider(image_id)
    except KeyError:
        raise DataError(f"image provider cannot resolve image_id {image_id!r}") from None


def train(
    config: TrainConfig,
    train_set: Sequence[ImageRecord],
    image_provider: ImageProvider,
    model: HandObjectDetector | None = None,
) -> tuple[HandObjectDetector, list[dict[str, float]]]:
    """Train a detector; returns the model and per-iteration loss history.

    The seed fixes both initialization and the per-epoch shuffle, so two
    runs with the same config produce the same loss trajectory up to
    floating-point nondeterminism. Pass ``model`` to continue training an
    existing network instead of building a fresh one from the config.
    """
    if not train_set:
        raise DataError("training set is empty")
    torch.manual_seed(config.seed)
    if model is None:
        model = HandObjectDetector(backbone=config.backbone)
    model.train()
    optimizer = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.learning_rate,
        momentum=config.momentum,
    )
    order_rng = random.Random(config.seed)
    history: list[dict[str, float]] = []
    for epoch in range(config.epochs):
        order = list(range(len(train_set)))
        order_rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            images = [
                HandObjectDetector.image_to_tensor(_fetch_image(image_provider, r.image_id))
                for r in batch
            ]
            raw = model(images, batch)
            loss_dict = combine_losses(raw, config.weights)
            total = loss_dict.total
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, iteration {len(history)}: "
                    f"{loss_dict.as_floats()}"
                )
            optimizer.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            entry = loss_dict.as_floats()
            entry["epoch"] = float(epoch)
            history.append(entry)
    model.eval()
    return model, history
