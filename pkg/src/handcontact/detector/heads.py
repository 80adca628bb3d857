"""Per-ROI auxiliary heads reading the pooled classification feature."""
from __future__ import annotations

import torch
from torch import Tensor, nn


def _two_fc(in_features: int, hidden: int, out_features: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_features, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_features),
    )


class AuxHeads(nn.Module):
    """Side (2), contact state (5), and offset (dir 2 + mag 1) readouts.

    Each head is two fully connected layers on the same per-ROI feature the
    box classifier consumes.
    """

    def __init__(self, in_features: int, hidden: int = 256):
        super().__init__()
        self.side = _two_fc(in_features, hidden, 2)
        self.state = _two_fc(in_features, hidden, 5)
        self.offset = _two_fc(in_features, hidden, 3)

    def forward(self, box_features: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if box_features.dim() > 2:
            box_features = torch.flatten(box_features, start_dim=1)
        side_logits = self.side(box_features)
        state_logits = self.state(box_features)
        offset = self.offset(box_features)
        return side_logits, state_logits, offset[:, :2], offset[:, 2]
