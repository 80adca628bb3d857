"""Backbone registry.

A backbone is any module exposing ``out_channels`` and mapping an image
batch to a feature map (or an ordered dict of maps). Each registry entry
also carries the detector kwargs that suit its feature geometry, so the
model builder stays backbone-agnostic.
"""
from __future__ import annotations

from typing import Callable

from torch import nn
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.backbone_utils import resnet_fpn_backbone
from torchvision.ops import MultiScaleRoIAlign

from ..errors import DataError

_REGISTRY: dict[str, Callable[[], tuple[nn.Module, dict]]] = {}


def register_backbone(name: str):
    def wrap(fn: Callable[[], tuple[nn.Module, dict]]):
        _REGISTRY[name] = fn
        return fn
    return wrap


def available_backbones() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def build_backbone(name: str) -> tuple[nn.Module, dict]:
    """Instantiate a registered backbone plus its detector kwargs."""
    if name not in _REGISTRY:
        raise DataError(f"unknown backbone {name!r}; available: {', '.join(available_backbones())}")
    return _REGISTRY[name]()


class TinyBackbone(nn.Module):
    """Three strided convolutions (stride 8 overall) for desk-scale tests."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.out_channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, channels, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(8, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(8, channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


@register_backbone("tiny")
def _tiny() -> tuple[nn.Module, dict]:
    kwargs = {
        "min_size": 128,
        "max_size": 128,
        "rpn_anchor_generator": AnchorGenerator(
            sizes=((16, 32, 64),), aspect_ratios=((0.5, 1.0, 2.0),)
        ),
        "box_roi_pool": MultiScaleRoIAlign(
            featmap_names=["0"], output_size=7, sampling_ratio=2
        ),
        "rpn_pre_nms_top_n_train": 600,
        "rpn_post_nms_top_n_train": 300,
        "rpn_pre_nms_top_n_test": 300,
        "rpn_post_nms_top_n_test": 150,
        "rpn_batch_size_per_image": 128,
        "box_batch_size_per_image": 128,
        "box_positive_fraction": 0.5,
    }
    return TinyBackbone(), kwargs


def _resnet(depth: int) -> tuple[nn.Module, dict]:
    backbone = resnet_fpn_backbone(backbone_name=f"resnet{depth}", weights=None)
    return backbone, {"min_size": 800, "max_size": 1333}


@register_backbone("resnet50")
def _resnet50() -> tuple[nn.Module, dict]:
    return _resnet(50)


@register_backbone("resnet101")
def _resnet101() -> tuple[nn.Module, dict]:
    return _resnet(101)
