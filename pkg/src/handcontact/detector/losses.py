"""Auxiliary losses for the side, state, and offset heads.

The base detector contributes its usual classification/regression losses
(``l_det``); this module adds cross-entropy over side and state and squared
errors over the offset direction and magnitude, averaged over ROIs matched
to ground-truth hands. The weighted sum is the training objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from ..data_model import ContactState, ImageRecord
from .targets import encode_offset

__all__ = [
    "LossWeights",
    "LossDict",
    "RoiOutputs",
    "loss_orientation",
    "loss_magnitude",
    "loss_classification",
    "hand_target_tensors",
    "compute_losses",
    "combine_losses",
]


@dataclass(frozen=True)
class LossWeights:
    """Multipliers applied to the auxiliary terms in the total loss."""

    side: float = 0.1
    state: float = 0.1
    ori: float = 0.1
    mag: float = 0.1


@dataclass(frozen=True)
class LossDict:
    """All loss components plus their weighted total.

    total = l_det + side*l_side + state*l_state + ori*l_ori + mag*l_mag,
    with the lambdas taken from LossWeights. Components with an empty mask
    are zero.
    """

    l_det: Tensor
    l_side: Tensor
    l_state: Tensor
    l_ori: Tensor
    l_mag: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_det": float(self.l_det.detach()),
            "l_side": float(self.l_side.detach()),
            "l_state": float(self.l_state.detach()),
            "l_ori": float(self.l_ori.detach()),
            "l_mag": float(self.l_mag.detach()),
            "total": float(self.total.detach()),
        }


@dataclass
class RoiOutputs:
    """Raw per-ROI head outputs with the ROI-to-hand assignment.

    ``matched_hand[r]`` indexes the ground-truth hand the ROI was assigned
    to, or -1 for ROIs matched to background or objects.
    """

    side_logits: Tensor
    state_logits: Tensor
    offset_dir: Tensor
    offset_mag: Tensor
    matched_hand: Tensor


def loss_orientation(v: Tensor, v_gt: Tensor) -> Tensor:
    """Squared Euclidean distance between direction vectors, ||v - v'||^2.

    For unit inputs the value lies in [0, 4], peaking at antipodal pairs.
    """
    return ((v - v_gt) ** 2).sum(dim=-1)


def loss_magnitude(m: Tensor, m_gt: Tensor) -> Tensor:
    """Squared difference of offset magnitudes, (m - m')^2."""
    return (m - m_gt) ** 2


def loss_classification(logits: Tensor, labels: Tensor) -> Tensor:
    """Per-example cross entropy, -log softmax(logits)[label]."""
    if logits.dim() == 1:
        return F.cross_entropy(logits.unsqueeze(0), labels.reshape(1), reduction="none")[0]
    return F.cross_entropy(logits, labels, reduction="none")


def hand_target_tensors(record: ImageRecord, device: torch.device | str = "cpu") -> dict[str, Tensor]:
    """Per-hand target tensors: side, state, offset dir/mag, offset validity.

    Offsets are encoded toward the linked object for hands in any contact
    state; NO_CONTACT hands get an invalid placeholder so they are masked
    out of the offset losses.
    """
    sides, states, dirs, mags, valids = [], [], [], [], []
    for ann in record.hands:
        sides.append(int(ann.side))
        states.append(int(ann.state))
        if ann.state != ContactState.NO_CONTACT:
            target = encode_offset(ann.box, record.objects[ann.object_index],
                                   (record.width, record.height))
            dirs.append(target.dir)
            mags.append(target.mag)
            valids.append(target.valid)
        else:
            dirs.append((1.0, 0.0))
            mags.append(0.0)
            valids.append(False)
    n = len(record.hands)
    return {
        "side": torch.tensor(sides, dtype=torch.int64, device=device).reshape(n),
        "state": torch.tensor(states, dtype=torch.int64, device=device).reshape(n),
        "dir": torch.tensor(dirs, dtype=torch.float32, device=device).reshape(n, 2),
        "mag": torch.tensor(mags, dtype=torch.float32, device=device).reshape(n),
        "valid": torch.tensor(valids, dtype=torch.bool, device=device).reshape(n),
    }


def masked_aux_losses(
    side_logits: Tensor,
    state_logits: Tensor,
    offset_dir: Tensor,
    offset_mag: Tensor,
    side_t: Tensor,
    state_t: Tensor,
    dir_t: Tensor,
    mag_t: Tensor,
    valid_t: Tensor,
) -> dict[str, Tensor]:
    """Mean auxiliary losses over pre-gathered matched-hand rows.

    All prediction and target tensors are aligned row-for-row over ROIs
    matched to hands. Offset terms additionally mask to contacted hands with
    a valid encoded offset; predicted directions are unit-normalized first.
    """
    zero = side_logits.new_zeros(())
    if side_logits.shape[0] == 0:
        return {"l_side": zero, "l_state": zero.clone(),
                "l_ori": zero.clone(), "l_mag": zero.clone()}
    l_side = loss_classification(side_logits, side_t).mean()
    l_state = loss_classification(state_logits, state_t).mean()
    contact = (state_t != int(ContactState.NO_CONTACT)) & valid_t
    if contact.any():
        dir_pred = F.normalize(offset_dir[contact], dim=-1, eps=1e-8)
        l_ori = loss_orientation(dir_pred, dir_t[contact]).mean()
        l_mag = loss_magnitude(offset_mag[contact], mag_t[contact]).mean()
    else:
        l_ori = zero.clone()
        l_mag = zero.clone()
    return {"l_side": l_side, "l_state": l_state, "l_ori": l_ori, "l_mag": l_mag}


def compute_losses(
    outputs: RoiOutputs,
    ground_truth: ImageRecord,
    weights: LossWeights = LossWeights(),
    l_det: Tensor | None = None,
) -> LossDict:
    """LossDict for one image given per-ROI outputs and their assignment.

    ``l_det`` carries the base detector's summed losses and defaults to
    zero, which leaves the auxiliary terms standing alone.
    """
    mask = outputs.matched_hand >= 0
    device = outputs.side_logits.device
    targets = hand_target_tensors(ground_truth, device=device)
    idx = outputs.matched_hand[mask]
    aux = masked_aux_losses(
        outputs.side_logits[mask],
        outputs.state_logits[mask],
        outputs.offset_dir[mask],
        outputs.offset_mag[mask],
        targets["side"][idx],
        targets["state"][idx],
        targets["dir"][idx],
        targets["mag"][idx],
        targets["valid"][idx],
    )
    if l_det is None:
        l_det = outputs.side_logits.new_zeros(())
    return _assemble(l_det, aux, weights)


def combine_losses(raw: dict[str, Tensor], weights: LossWeights) -> LossDict:
    """Fold the full detector loss dict (base + auxiliary keys) into a
    LossDict. Base keys are everything not named loss_side/state/ori/mag."""
    aux_keys = {"loss_side": "l_side", "loss_state": "l_state",
                "loss_ori": "l_ori", "loss_mag": "l_mag"}
    base = [v for k, v in raw.items() if k not in aux_keys]
    l_det = torch.stack(base).sum() if base else next(iter(raw.values())).new_zeros(())
    aux = {new: raw[old] for old, new in aux_keys.items()}
    return _assemble(l_det, aux, weights)


def _assemble(l_det: Tensor, aux: dict[str, Tensor], weights: LossWeights) -> LossDict:
    total = (l_det
             + weights.side * aux["l_side"]
             + weights.state * aux["l_state"]
             + weights.ori * aux["l_ori"]
             + weights.mag * aux["l_mag"])
    return LossDict(l_det=l_det, l_side=aux["l_side"], l_state=aux["l_state"],
                    l_ori=aux["l_ori"], l_mag=aux["l_mag"], total=total)
