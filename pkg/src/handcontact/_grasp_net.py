"""Torch networks for predicting grasp codes (or poses) from object crops.

Kept separate so importing the mining pipeline never pulls in torch.
"""

from __future__ import annotations

import random
from dataclasses import asdict

import cv2
import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data_model import HandSide
from .errors import DataError, TrainingError

CHECKPOINT_VERSION = 1


class TinyGraspNet(nn.Module):
    """Three stride-2 conv blocks and two linear heads; sized for 64px crops."""

    def __init__(self, out_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(64, out_dim)
        self.side_head = nn.Linear(64, 2)

    def forward(self, x):
        feats = self.features(x).flatten(1)
        return self.head(feats), self.side_head(feats)


class ResNetGraspNet(nn.Module):
    """ResNet-18 trunk with code and side heads."""

    def __init__(self, out_dim: int):
        super().__init__()
        from torchvision.models import resnet18

        trunk = resnet18(weights=None)
        dim = trunk.fc.in_features
        trunk.fc = nn.Identity()
        self.trunk = trunk
        self.head = nn.Linear(dim, out_dim)
        self.side_head = nn.Linear(dim, 2)

    def forward(self, x):
        feats = self.trunk(x)
        return self.head(feats), self.side_head(feats)


def _build_net(backbone: str, out_dim: int) -> nn.Module:
    if backbone == "tiny":
        return TinyGraspNet(out_dim)
    if backbone == "resnet18":
        return ResNetGraspNet(out_dim)
    raise DataError(f"unknown grasp backbone '{backbone}' (expected 'tiny' or 'resnet18')")


def _crop_tensor(crop: np.ndarray, size: int) -> torch.Tensor:
    arr = np.asarray(crop)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"crop must be HxWx3 (or HxW), got shape {arr.shape}")
    arr = arr.astype(np.float32)
    if arr.shape[:2] != (size, size):
        arr = cv2.resize(arr, (size, size), interpolation=cv2.INTER_AREA)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 255.0)


class GraspClassifier:
    """Maps an object crop to grasp-code probabilities plus a side estimate.

    In ``regression`` mode the code head regresses the pose vector directly
    instead; ``predict_pose`` returns it.
    """

    def __init__(self, net: nn.Module, config):
        self.net = net
        self.config = config

    @torch.no_grad()
    def _forward_one(self, crop: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        was_training = self.net.training
        self.net.eval()
        out, side = self.net(_crop_tensor(crop, self.config.input_size)[None])
        if was_training:
            self.net.train()
        return out[0], side[0]

    def predict_proba(self, crop: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.config.mode != "codebook":
            raise DataError("predict_proba requires a codebook-mode classifier")
        out, side = self._forward_one(crop)
        codes = F.softmax(out.double(), dim=0).numpy()
        sides = F.softmax(side.double(), dim=0).numpy()
        return codes / codes.sum(), sides / sides.sum()

    def predict_pose(self, crop: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.config.mode != "regression":
            raise DataError("predict_pose requires a regression-mode classifier")
        out, side = self._forward_one(crop)
        sides = F.softmax(side.double(), dim=0).numpy()
        return out.double().numpy(), sides / sides.sum()

    def save(self, path) -> None:
        torch.save(
            {
                "format_version": CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "state_dict": self.net.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "GraspClassifier":
        from pathlib import Path

        from .grasp_mining import GraspTrainConfig

        if not Path(path).exists():
            raise DataError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
            version = payload["format_version"]
            config = GraspTrainConfig(**payload["config"])
            state = payload["state_dict"]
        except DataError:
            raise
        except Exception as err:
            raise DataError(f"cannot read grasp checkpoint {path}: {err}") from err
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        out_dim = config.k if config.mode == "codebook" else config.theta_dim
        net = _build_net(config.backbone, out_dim)
        net.load_state_dict(state)
        net.eval()
        return cls(net, config)


def train_grasp_classifier(pairs, config) -> tuple[GraspClassifier, list[dict]]:
    pairs = list(pairs)
    if not pairs:
        raise DataError("no training pairs")

    crops = [_crop_tensor(crop, config.input_size) for crop, _, _ in pairs]
    sides = torch.tensor([HandSide(side).value for _, _, side in pairs], dtype=torch.long)
    if config.mode == "codebook":
        codes = [int(code) for _, code, _ in pairs]
        if any(c < 0 or c >= config.k for c in codes):
            raise DataError(f"codes must lie in [0, {config.k})")
        if len(set(codes)) < 2:
            raise DataError("training needs at least two distinct codes")
        targets = torch.tensor(codes, dtype=torch.long)
        out_dim = config.k
    elif config.mode == "regression":
        thetas = np.stack([np.asarray(theta, dtype=np.float32) for _, theta, _ in pairs])
        if thetas.ndim != 2 or thetas.shape[1] != config.theta_dim:
            raise DataError(f"pose targets must be {config.theta_dim}-dimensional")
        targets = torch.from_numpy(thetas)
        out_dim = config.theta_dim
    else:
        raise DataError(f"unknown training mode '{config.mode}'")

    torch.manual_seed(config.seed)
    net = _build_net(config.backbone, out_dim)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    order_rng = random.Random(config.seed)
    indices = list(range(len(pairs)))
    inputs = torch.stack(crops)

    history: list[dict] = []
    for epoch in range(config.epochs):
        order_rng.shuffle(indices)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, len(indices), config.batch_size):
            batch = indices[start : start + config.batch_size]
            x = inputs[batch]
            out, side_logits = net(x)
            side_loss = F.cross_entropy(side_logits, sides[batch])
            if config.mode == "codebook":
                main_loss = F.cross_entropy(out, targets[batch])
                correct += int((out.argmax(dim=1) == targets[batch]).sum())
            else:
                main_loss = F.mse_loss(out, targets[batch])
            loss = main_loss + config.side_weight * side_loss
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
        entry = {"epoch": float(epoch), "loss": epoch_loss / len(indices)}
        if config.mode == "codebook":
            entry["accuracy"] = correct / len(indices)
        history.append(entry)

    net.eval()
    return GraspClassifier(net, config), history
