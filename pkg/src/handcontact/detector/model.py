"""Two-stage hand/object detector with auxiliary ROI heads.

Classes are background=0, hand=1, object=2. The ROI stage is extended with
side/state/offset readouts taken from the same pooled feature as the box
classifier; at inference the auxiliary rows are carried through class
expansion, score filtering, and NMS so every surviving detection keeps its
own predictions.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.models.detection.faster_rcnn import FasterRCNN
from torchvision.models.detection.roi_heads import RoIHeads, fastrcnn_loss
from torchvision.ops import boxes as box_ops

from ..data_model import BBox, ImageRecord
from ..errors import DataError
from .backbones import build_backbone
from .heads import AuxHeads
from .losses import masked_aux_losses
from .targets import encode_offset
from .types import HandDetection, ObjectDetection

CLASS_HAND = 1
CLASS_OBJECT = 2
CHECKPOINT_VERSION = 1

_AUX_KEYS = ("side_logits", "state_logits", "offset_dir", "offset_mag")


def record_to_target(record: ImageRecord, device: torch.device | str = "cpu") -> dict[str, Tensor]:
    """Training target for one image: hand boxes then object boxes.

    Auxiliary target rows are aligned with the full box list; object rows
    hold placeholders and are masked out by the class labels during loss
    computation. Offset targets are scale-free (unit direction, magnitude
    relative to the image diagonal) so box resizing does not invalidate
    them.
    """
    boxes = [ann.box.as_list() for ann in record.hands] + [b.as_list() for b in record.objects]
    labels = [CLASS_HAND] * len(record.hands) + [CLASS_OBJECT] * len(record.objects)
    sides, states, dirs, mags, valids = [], [], [], [], []
    for ann in record.hands:
        sides.append(int(ann.side))
        states.append(int(ann.state))
        if ann.object_index is not None:
            t = encode_offset(ann.box, record.objects[ann.object_index],
                              (record.width, record.height))
            dirs.append(t.dir)
            mags.append(t.mag)
            valids.append(t.valid)
        else:
            dirs.append((1.0, 0.0))
            mags.append(0.0)
            valids.append(False)
    for _ in record.objects:
        sides.append(0)
        states.append(0)
        dirs.append((1.0, 0.0))
        mags.append(0.0)
        valids.append(False)
    n = len(boxes)
    return {
        "boxes": torch.tensor(boxes, dtype=torch.float32, device=device).reshape(n, 4),
        "labels": torch.tensor(labels, dtype=torch.int64, device=device).reshape(n),
        "gt_side": torch.tensor(sides, dtype=torch.int64, device=device).reshape(n),
        "gt_state": torch.tensor(states, dtype=torch.int64, device=device).reshape(n),
        "gt_dir": torch.tensor(dirs, dtype=torch.float32, device=device).reshape(n, 2),
        "gt_mag": torch.tensor(mags, dtype=torch.float32, device=device).reshape(n),
        "gt_valid": torch.tensor(valids, dtype=torch.bool, device=device).reshape(n),
    }


class ContactRoIHeads(RoIHeads):
    """RoIHeads with side/state/offset heads on the shared box feature."""

    def __init__(self, aux_heads: AuxHeads, **kwargs):
        super().__init__(**kwargs)
        self.aux_heads = aux_heads

    def forward(self, features, proposals, image_shapes, targets=None):
        if self.training:
            proposals, matched_idxs, labels, regression_targets = self.select_training_samples(
                proposals, targets
            )
        else:
            matched_idxs = labels = regression_targets = None

        box_features = self.box_roi_pool(features, proposals, image_shapes)
        box_features = self.box_head(box_features)
        class_logits, box_regression = self.box_predictor(box_features)
        aux = self.aux_heads(box_features)

        result: list[dict[str, Tensor]] = []
        losses: dict[str, Tensor] = {}
        if self.training:
            loss_classifier, loss_box_reg = fastrcnn_loss(
                class_logits, box_regression, labels, regression_targets
            )
            losses = {"loss_classifier": loss_classifier, "loss_box_reg": loss_box_reg}
            losses.update(self._aux_losses(aux, proposals, labels, matched_idxs, targets))
        else:
            boxes, scores, out_labels, aux_rows = self._postprocess_with_aux(
                class_logits, box_regression, proposals, image_shapes, aux
            )
            for i in range(len(boxes)):
                entry = {"boxes": boxes[i], "labels": out_labels[i], "scores": scores[i]}
                entry.update(aux_rows[i])
                result.append(entry)
        return result, losses

    def _aux_losses(self, aux, proposals, labels, matched_idxs, targets):
        side_logits, state_logits, offset_dir, offset_mag = aux
        boxes_per_image = [p.shape[0] for p in proposals]
        side_split = side_logits.split(boxes_per_image, 0)
        state_split = state_logits.split(boxes_per_image, 0)
        dir_split = offset_dir.split(boxes_per_image, 0)
        mag_split = offset_mag.split(boxes_per_image, 0)

        preds: list[list[Tensor]] = [[], [], [], []]
        tgts: list[list[Tensor]] = [[], [], [], [], []]
        for i in range(len(proposals)):
            hand_mask = labels[i] == CLASS_HAND
            if not bool(hand_mask.any()):
                continue
            idx = matched_idxs[i][hand_mask]
            preds[0].append(side_split[i][hand_mask])
            preds[1].append(state_split[i][hand_mask])
            preds[2].append(dir_split[i][hand_mask])
            preds[3].append(mag_split[i][hand_mask])
            t = targets[i]
            tgts[0].append(t["gt_side"][idx])
            tgts[1].append(t["gt_state"][idx])
            tgts[2].append(t["gt_dir"][idx])
            tgts[3].append(t["gt_mag"][idx])
            tgts[4].append(t["gt_valid"][idx])
        if preds[0]:
            aux_losses = masked_aux_losses(
                torch.cat(preds[0]), torch.cat(preds[1]), torch.cat(preds[2]), torch.cat(preds[3]),
                torch.cat(tgts[0]), torch.cat(tgts[1]), torch.cat(tgts[2]), torch.cat(tgts[3]),
                torch.cat(tgts[4]),
            )
        else:
            zero = side_logits.new_zeros(())
            aux_losses = {"l_side": zero, "l_state": zero.clone(),
                          "l_ori": zero.clone(), "l_mag": zero.clone()}
        return {"loss_side": aux_losses["l_side"], "loss_state": aux_losses["l_state"],
                "loss_ori": aux_losses["l_ori"], "loss_mag": aux_losses["l_mag"]}

    def _postprocess_with_aux(self, class_logits, box_regression, proposals, image_shapes, aux):
        """The stock detection postprocess plus row tracking for the
        auxiliary outputs: every kept detection remembers which ROI it came
        from, and that ROI's side/state/offset rows ride along."""
        device = class_logits.device
        num_classes = class_logits.shape[-1]

        boxes_per_image = [p.shape[0] for p in proposals]
        pred_boxes = self.box_coder.decode(box_regression, proposals)
        pred_scores = F.softmax(class_logits, -1)

        pred_boxes_list = pred_boxes.split(boxes_per_image, 0)
        pred_scores_list = pred_scores.split(boxes_per_image, 0)
        aux_split = [t.split(boxes_per_image, 0) for t in aux]

        all_boxes, all_scores, all_labels, all_aux = [], [], [], []
        for i, (boxes, scores, image_shape) in enumerate(
            zip(pred_boxes_list, pred_scores_list, image_shapes)
        ):
            boxes = box_ops.clip_boxes_to_image(boxes, image_shape)
            n = boxes.shape[0]

            labels = torch.arange(num_classes, device=device).view(1, -1).expand_as(scores)
            roi_index = torch.arange(n, device=device).view(-1, 1).expand(n, num_classes)

            boxes = boxes[:, 1:].reshape(-1, 4)
            scores = scores[:, 1:].reshape(-1)
            labels = labels[:, 1:].reshape(-1)
            roi_index = roi_index[:, 1:].reshape(-1)

            inds = torch.where(scores > self.score_thresh)[0]
            boxes, scores, labels, roi_index = boxes[inds], scores[inds], labels[inds], roi_index[inds]

            keep = box_ops.remove_small_boxes(boxes, min_size=1e-2)
            boxes, scores, labels, roi_index = boxes[keep], scores[keep], labels[keep], roi_index[keep]

            keep = box_ops.batched_nms(boxes, scores, labels, self.nms_thresh)
            keep = keep[: self.detections_per_img]
            boxes, scores, labels, roi_index = boxes[keep], scores[keep], labels[keep], roi_index[keep]

            all_boxes.append(boxes)
            all_scores.append(scores)
            all_labels.append(labels)
            all_aux.append({
                key: split[i][roi_index] for key, split in zip(_AUX_KEYS, aux_split)
            })
        return all_boxes, all_scores, all_labels, all_aux


class HandObjectDetector(nn.Module):
    """Detector facade: building, forward, conversion, checkpointing."""

    def __init__(
        self,
        backbone: str = "resnet101",
        min_size: int | None = None,
        max_size: int | None = None,
        score_thresh: float = 0.05,
        detections_per_img: int = 100,
        aux_hidden: int = 256,
    ):
        super().__init__()
        self.build_config = {
            "backbone": backbone,
            "min_size": min_size,
            "max_size": max_size,
            "score_thresh": score_thresh,
            "detections_per_img": detections_per_img,
            "aux_hidden": aux_hidden,
        }
        body, kwargs = build_backbone(backbone)
        if min_size is not None:
            kwargs["min_size"] = min_size
        if max_size is not None:
            kwargs["max_size"] = max_size
        box_batch = kwargs.pop("box_batch_size_per_image", 512)
        box_posfrac = kwargs.pop("box_positive_fraction", 0.25)
        net = FasterRCNN(
            body,
            num_classes=3,
            box_score_thresh=score_thresh,
            box_detections_per_img=detections_per_img,
            box_batch_size_per_image=box_batch,
            box_positive_fraction=box_posfrac,
            **kwargs,
        )
        base = net.roi_heads
        aux_heads = AuxHeads(base.box_predictor.cls_score.in_features, hidden=aux_hidden)
        net.roi_heads = ContactRoIHeads(
            aux_heads,
            box_roi_pool=base.box_roi_pool,
            box_head=base.box_head,
            box_predictor=base.box_predictor,
            fg_iou_thresh=0.5,
            bg_iou_thresh=0.5,
            batch_size_per_image=box_batch,
            positive_fraction=box_posfrac,
            bbox_reg_weights=None,
            score_thresh=score_thresh,
            nms_thresh=0.5,
            detections_per_img=detections_per_img,
        )
        self.net = net

    @property
    def min_image_size(self) -> int:
        return 8

    def forward(self, images: Sequence[Tensor], records: Sequence[ImageRecord] | None = None):
        """Training mode: returns the raw loss dict (base + auxiliary keys).
        Eval mode: returns one detection dict per image."""
        if self.training:
            if records is None:
                raise DataError("training forward requires ground-truth records")
            device = next(self.parameters()).device
            targets = [record_to_target(r, device) for r in records]
            return self.net(list(images), targets)
        return self.net(list(images))

    @staticmethod
    def image_to_tensor(image: np.ndarray) -> Tensor:
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"expected an HxWx3 image array, got shape {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0

    def _to_detections(self, output: dict[str, Tensor]) -> tuple[list[HandDetection], list[ObjectDetection]]:
        boxes = output["boxes"].detach().cpu().numpy()
        scores = output["scores"].detach().cpu().numpy()
        labels = output["labels"].detach().cpu().numpy()
        side_probs = F.softmax(output["side_logits"].detach(), dim=-1).cpu().numpy().astype(np.float64)
        state_probs = F.softmax(output["state_logits"].detach(), dim=-1).cpu().numpy().astype(np.float64)
        dirs = output["offset_dir"].detach().cpu().numpy()
        mags = output["offset_mag"].detach().cpu().numpy()

        hands: list[HandDetection] = []
        objects: list[ObjectDetection] = []
        for k in range(len(boxes)):
            x1, y1, x2, y2 = (float(v) for v in boxes[k])
            if x2 <= x1 or y2 <= y1:
                continue
            box = BBox(x1, y1, x2, y2)
            score = float(scores[k])
            if labels[k] == CLASS_OBJECT:
                objects.append(ObjectDetection(box=box, score=score))
                continue
            dx, dy = float(dirs[k][0]), float(dirs[k][1])
            norm = math.hypot(dx, dy)
            direction = (dx / norm, dy / norm) if norm > 1e-8 else (1.0, 0.0)
            sp = side_probs[k] / side_probs[k].sum()
            cp = state_probs[k] / state_probs[k].sum()
            hands.append(HandDetection(
                box=box,
                score=score,
                side_probs=(float(sp[0]), float(sp[1])),
                state_probs=tuple(float(v) for v in cp),
                offset_dir=direction,
                offset_mag=max(0.0, float(mags[k])),
            ))
        return hands, objects

    @torch.no_grad()
    def predict(self, image: np.ndarray, score_thresh: float | None = None
                ) -> tuple[list[HandDetection], list[ObjectDetection]]:
        """Detections for one RGB uint8 image, sorted by descending score."""
        return self.predict_batch([image], score_thresh=score_thresh)[0]

    @torch.no_grad()
    def predict_batch(self, images: Sequence[np.ndarray], score_thresh: float | None = None
                      ) -> list[tuple[list[HandDetection], list[ObjectDetection]]]:
        for image in images:
            if min(image.shape[0], image.shape[1]) < self.min_image_size:
                raise DataError(f"image of shape {image.shape} is below the "
                                f"minimum size {self.min_image_size}")
        was_training = self.training
        self.eval()
        try:
            tensors = [self.image_to_tensor(img) for img in images]
            outputs = self.net(tensors)
        finally:
            self.train(was_training)
        results = []
        for output in outputs:
            hands, objects = self._to_detections(output)
            if score_thresh is not None:
                hands = [h for h in hands if h.score >= score_thresh]
                objects = [o for o in objects if o.score >= score_thresh]
            results.append((hands, objects))
        return results

    def save(self, path, extra_config: dict | None = None) -> None:
        """Versioned checkpoint: build config echo plus weights."""
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "build_config": dict(self.build_config),
            "state_dict": self.net.state_dict(),
        }
        if extra_config is not None:
            payload["train_config"] = extra_config
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "HandObjectDetector":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}") from None
        if not isinstance(payload, dict) or "format_version" not in payload:
            raise DataError(f"not a detector checkpoint: {path}")
        if payload["format_version"] != CHECKPOINT_VERSION:
            raise DataError(
                f"checkpoint version {payload['format_version']} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        model = cls(**payload["build_config"])
        model.net.load_state_dict(payload["state_dict"], strict=True)
        model.eval()
        return model
