"""Command-line pipeline: detect, render, evaluate, stats, train, mesh-score, mine, codebook.

Every command accepts --config (JSON parameter file), --seed, --out, and
--threads. Parameter precedence is flag > config file > built-in default.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import association, rendering
from .data_model import BBox, compute_stats, load_annotations
from .detector.losses import LossWeights
from .detector.model import HandObjectDetector
from .detector.train import TrainConfig, train
from .errors import DataError, HandContactError
from .evaluation import (
    ALL_CRITERIA,
    EvalCriterion,
    evaluate_state,
    format_report,
    scale_binned_ap,
    write_pr_csv,
)
from .grasp_mining import (
    FilterParams,
    build_codebook,
    build_tracks,
    filter_events,
    find_contact_events,
    save_codebook,
    save_events,
)
from .mesh_quality import (
    DEFAULT_ANGLES,
    CentroidReconstructor,
    ScoredRecord,
    consistency_score,
    load_scored_records,
    make_labels,
    save_scored_records,
)

COMMANDS = ("detect", "render", "evaluate", "stats", "train", "mesh-score",
            "mine", "codebook")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with code 1 on usage errors."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path: str, command: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError("config file must contain a JSON object")
    # A file whose top-level keys are command names holds one section per
    # command; anything else is a flat parameter set for the current command.
    if data and any(key in COMMANDS for key in data) and all(
        isinstance(value, dict) for value in data.values()
    ):
        section = data.get(command, {})
    else:
        section = data
    if not isinstance(section, dict):
        raise DataError(f"config section for {command} must be an object")
    return section


def _resolve(args: argparse.Namespace, defaults: Mapping[str, Any]) -> dict[str, Any]:
    """Merge defaults, config-file values, and explicit flags, in that order."""
    merged = dict(defaults)
    if args.config is not None:
        section = _load_config(args.config, args.command)
        unknown = sorted(set(section) - set(defaults))
        if unknown:
            raise DataError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        merged.update(section)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _require(merged: Mapping[str, Any], key: str, parser: argparse.ArgumentParser):
    if merged.get(key) is None:
        parser.error(f"--{key.replace('_', '-')} is required")
    return merged[key]


def _clamped_crop(image: np.ndarray, box: BBox) -> np.ndarray:
    h, w = image.shape[:2]
    x1 = max(0, int(np.floor(box.x1)))
    y1 = max(0, int(np.floor(box.y1)))
    x2 = min(w, int(np.ceil(box.x2)))
    y2 = min(h, int(np.ceil(box.y2)))
    if x2 <= x1 or y2 <= y1:
        raise DataError(f"box {box.as_list()} lies outside a {w}x{h} image")
    return image[y1:y2, x1:x2]


def _image_provider(images_dir: str):
    root = Path(images_dir)

    def provider(image_id: str) -> np.ndarray:
        for suffix in (".png", ".jpg", ".jpeg"):
            path = root / f"{image_id}{suffix}"
            if path.exists():
                return rendering.load_image(path)
        raise DataError(f"no image for id {image_id!r} under {root}")

    return provider


# --- commands ---------------------------------------------------------------

DETECT_DEFAULTS = {"checkpoint": None, "hand_thresh": 0.5, "object_thresh": 0.5,
                   "out": None}


def cmd_detect(args: argparse.Namespace) -> int:
    merged = _resolve(args, DETECT_DEFAULTS)
    out = _require(merged, "out", args.parser)
    parses = []
    if args.images:
        checkpoint = _require(merged, "checkpoint", args.parser)
        detector = HandObjectDetector.load(checkpoint)
        for path in args.images:
            image = rendering.load_image(path)
            hands, objects = detector.predict(image)
            parses.append(association.parse(
                hands, objects,
                image_size=(image.shape[1], image.shape[0]),
                hand_thresh=merged["hand_thresh"],
                object_thresh=merged["object_thresh"],
                image_id=Path(path).stem,
            ))
    association.save_parses(parses, out)
    return 0


RENDER_DEFAULTS = {"parses": None, "annotations": None, "image_id": None,
                   "line_width": 2, "out": None}


def cmd_render(args: argparse.Namespace) -> int:
    merged = _resolve(args, RENDER_DEFAULTS)
    out = _require(merged, "out", args.parser)
    if (merged["parses"] is None) == (merged["annotations"] is None):
        args.parser.error("exactly one of --parses or --annotations is required")
    image = rendering.load_image(args.image)
    if merged["parses"] is not None:
        candidates = association.load_parses(merged["parses"])
    else:
        candidates = [association.parse_from_record(record)
                      for record in load_annotations(merged["annotations"])]
    wanted = merged["image_id"] or Path(args.image).stem
    matches = [p for p in candidates if p.image_id == wanted]
    if not matches and len(candidates) == 1 and merged["image_id"] is None:
        matches = candidates
    if not matches:
        raise DataError(f"no parse with image_id {wanted!r}")
    rendered = rendering.render_parse(image, matches[0],
                                      line_width=int(merged["line_width"]))
    rendering.save_image(rendered, out)
    return 0


EVALUATE_DEFAULTS = {"parses": None, "gt": None, "criteria": None,
                     "iou_thresh": 0.5, "scale_bins": None,
                     "pr_csv": None, "plot": None, "out": None}


def cmd_evaluate(args: argparse.Namespace) -> int:
    merged = _resolve(args, EVALUATE_DEFAULTS)
    out = _require(merged, "out", args.parser)
    parses = association.load_parses(_require(merged, "parses", args.parser))
    gt = load_annotations(_require(merged, "gt", args.parser))
    names = merged["criteria"] or [c.value for c in ALL_CRITERIA]
    try:
        criteria = tuple(EvalCriterion(name) for name in names)
    except ValueError as exc:
        raise DataError(f"unknown criterion: {exc}") from exc
    results = evaluate_state(parses, gt, criteria=criteria,
                             iou_thresh=merged["iou_thresh"])
    scale_results = None
    if merged["scale_bins"] is not None:
        edges = _float_list(merged["scale_bins"])
        scale_results = scale_binned_ap(parses, gt, edges,
                                        iou_thresh=merged["iou_thresh"])
    Path(out).write_text(format_report(results, scale_results), encoding="utf-8")
    if merged["pr_csv"] is not None:
        write_pr_csv(results, merged["pr_csv"])
    if merged["plot"] is not None:
        rendering.save_image(rendering.render_pr_curves(results), merged["plot"])
    return 0


STATS_DEFAULTS = {"annotations": None, "out": None}


def cmd_stats(args: argparse.Namespace) -> int:
    merged = _resolve(args, STATS_DEFAULTS)
    out = _require(merged, "out", args.parser)
    records = load_annotations(_require(merged, "annotations", args.parser))
    stats = compute_stats(records)
    payload = {
        "n_images": stats.n_images,
        "n_hands": stats.n_hands,
        "n_objects": stats.n_objects,
        "state_histogram": list(stats.state_histogram),
        "hand_size_histogram": list(stats.hand_size_histogram),
    }
    Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return 0


TRAIN_DEFAULTS = {"annotations": None, "images_dir": None, "epochs": 8,
                  "learning_rate": 1e-3, "batch_size": 1, "backbone": "resnet101",
                  "seed": 0, "w_side": 0.1, "w_state": 0.1, "w_ori": 0.1,
                  "w_mag": 0.1, "history": None, "out": None}


def cmd_train(args: argparse.Namespace) -> int:
    merged = _resolve(args, TRAIN_DEFAULTS)
    out = _require(merged, "out", args.parser)
    records = load_annotations(_require(merged, "annotations", args.parser))
    provider = _image_provider(_require(merged, "images_dir", args.parser))
    config = TrainConfig(
        epochs=int(merged["epochs"]),
        learning_rate=float(merged["learning_rate"]),
        batch_size=int(merged["batch_size"]),
        backbone=merged["backbone"],
        seed=int(merged["seed"]),
        weights=LossWeights(side=float(merged["w_side"]),
                            state=float(merged["w_state"]),
                            ori=float(merged["w_ori"]),
                            mag=float(merged["w_mag"])),
    )
    model, history = train(config, records, provider)
    model.save(out)
    if merged["history"] is not None:
        Path(merged["history"]).write_text(
            json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


MESH_SCORE_DEFAULTS = {"annotations": None, "images_dir": None, "angles": None,
                       "joint_count": 21, "theta_dim": 45, "top_frac": None,
                       "bottom_frac": None, "out": None}


def cmd_mesh_score(args: argparse.Namespace) -> int:
    merged = _resolve(args, MESH_SCORE_DEFAULTS)
    out = _require(merged, "out", args.parser)
    records = load_annotations(_require(merged, "annotations", args.parser))
    provider = _image_provider(_require(merged, "images_dir", args.parser))
    angles = (_float_list(merged["angles"]) if merged["angles"] is not None
              else DEFAULT_ANGLES)
    recon = CentroidReconstructor(joint_count=int(merged["joint_count"]),
                                  theta_dim=int(merged["theta_dim"]))
    scored: list[ScoredRecord] = []
    for record in records:
        image = provider(record.image_id)
        for hand in record.hands:
            crop = _clamped_crop(image, hand.box)
            consistency = consistency_score(crop, hand.side, recon, angles)
            mesh = recon(crop, hand.side)
            scored.append(ScoredRecord(
                image_id=record.image_id,
                box=hand.box,
                side=hand.side,
                consistency=consistency,
                theta=tuple(float(v) for v in mesh.theta),
            ))
    if merged["top_frac"] is not None or merged["bottom_frac"] is not None:
        top = float(merged["top_frac"] if merged["top_frac"] is not None else 0.3)
        bottom = float(merged["bottom_frac"] if merged["bottom_frac"] is not None else 0.3)
        labeled = make_labels([(r, r.consistency) for r in scored],
                              top_frac=top, bottom_frac=bottom)
        scored = [dataclasses.replace(item.item, label=item.label)
                  for item in labeled]
    save_scored_records(scored, out)
    return 0


MINE_DEFAULTS = {"parses": None, "frames_dir": None, "iou_thresh": 0.3,
                 "max_gap": 5, "overlap_thresh": 0.1, "move_thresh": 0.25,
                 "crop_size": 64, "out": None}


def cmd_mine(args: argparse.Namespace) -> int:
    merged = _resolve(args, MINE_DEFAULTS)
    out = _require(merged, "out", args.parser)
    parses = association.load_parses(_require(merged, "parses", args.parser))
    provider = _image_provider(_require(merged, "frames_dir", args.parser))

    def frame_provider(frame_index: int) -> np.ndarray:
        return provider(parses[frame_index].image_id)

    tracks = build_tracks(parses, iou_thresh=merged["iou_thresh"],
                          max_gap=int(merged["max_gap"]))
    events = [event for track in tracks for event in find_contact_events(track)]
    params = FilterParams(overlap_thresh=merged["overlap_thresh"],
                          move_thresh=merged["move_thresh"],
                          crop_size=int(merged["crop_size"]))
    kept = filter_events(events, frame_provider, parses.__getitem__, params)
    save_events(kept, out)
    return 0


CODEBOOK_DEFAULTS = {"scored": None, "k": 10, "seed": 0, "max_iter": 300,
                     "tol": 1e-6, "out": None}


def cmd_codebook(args: argparse.Namespace) -> int:
    merged = _resolve(args, CODEBOOK_DEFAULTS)
    out = _require(merged, "out", args.parser)
    records = load_scored_records(_require(merged, "scored", args.parser))
    if not records:
        raise DataError("scored-record file is empty")
    thetas = np.array([record.theta for record in records], dtype=np.float64)
    codebook = build_codebook(thetas, k=int(merged["k"]), seed=int(merged["seed"]),
                              max_iter=int(merged["max_iter"]),
                              tol=float(merged["tol"]))
    save_codebook(codebook, out)
    return 0


# --- wiring -----------------------------------------------------------------


def _float_list(value) -> list[float]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    elif isinstance(value, Sequence):
        parts = list(value)
    else:
        raise DataError(f"expected a comma-separated list of numbers, got {value!r}")
    try:
        return [float(p) for p in parts]
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad numeric list {value!r}") from exc


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON parameter file")
    sub.add_argument("--seed", type=int, help="random seed")
    sub.add_argument("--out", help="output path")
    sub.add_argument("--threads", type=int, help="worker thread cap")


def build_parser() -> _Parser:
    parser = _Parser(prog="handcontact",
                     description="hand-object contact pipeline")
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)

    detect = subs.add_parser("detect", help="run the detector over images")
    detect.add_argument("images", nargs="*", help="image files")
    detect.add_argument("--checkpoint", help="detector checkpoint")
    detect.add_argument("--hand-thresh", dest="hand_thresh", type=float)
    detect.add_argument("--object-thresh", dest="object_thresh", type=float)
    detect.set_defaults(func=cmd_detect)

    render = subs.add_parser("render", help="draw a parse onto an image")
    render.add_argument("image", help="input image file")
    render.add_argument("--parses", help="parse file")
    render.add_argument("--annotations", help="annotation file")
    render.add_argument("--image-id", dest="image_id")
    render.add_argument("--line-width", dest="line_width", type=int)
    render.set_defaults(func=cmd_render)

    evaluate = subs.add_parser("evaluate", help="score parses against ground truth")
    evaluate.add_argument("--parses")
    evaluate.add_argument("--gt")
    evaluate.add_argument("--criteria", nargs="+",
                          choices=[c.value for c in ALL_CRITERIA])
    evaluate.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    evaluate.add_argument("--scale-bins", dest="scale_bins")
    evaluate.add_argument("--pr-csv", dest="pr_csv")
    evaluate.add_argument("--plot")
    evaluate.set_defaults(func=cmd_evaluate)

    stats = subs.add_parser("stats", help="summarize an annotation file")
    stats.add_argument("--annotations")
    stats.set_defaults(func=cmd_stats)

    train_cmd = subs.add_parser("train", help="train the detector")
    train_cmd.add_argument("--annotations")
    train_cmd.add_argument("--images-dir", dest="images_dir")
    train_cmd.add_argument("--epochs", type=int)
    train_cmd.add_argument("--learning-rate", dest="learning_rate", type=float)
    train_cmd.add_argument("--batch-size", dest="batch_size", type=int)
    train_cmd.add_argument("--backbone")
    train_cmd.add_argument("--w-side", dest="w_side", type=float)
    train_cmd.add_argument("--w-state", dest="w_state", type=float)
    train_cmd.add_argument("--w-ori", dest="w_ori", type=float)
    train_cmd.add_argument("--w-mag", dest="w_mag", type=float)
    train_cmd.add_argument("--history", help="per-epoch loss JSON output")
    train_cmd.set_defaults(func=cmd_train)

    mesh = subs.add_parser("mesh-score", help="consistency-score hand crops")
    mesh.add_argument("--annotations")
    mesh.add_argument("--images-dir", dest="images_dir")
    mesh.add_argument("--angles", help="comma-separated rotation angles")
    mesh.add_argument("--joint-count", dest="joint_count", type=int)
    mesh.add_argument("--theta-dim", dest="theta_dim", type=int)
    mesh.add_argument("--top-frac", dest="top_frac", type=float)
    mesh.add_argument("--bottom-frac", dest="bottom_frac", type=float)
    mesh.set_defaults(func=cmd_mesh_score)

    mine = subs.add_parser("mine", help="mine contact events from parses")
    mine.add_argument("--parses")
    mine.add_argument("--frames-dir", dest="frames_dir")
    mine.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    mine.add_argument("--max-gap", dest="max_gap", type=int)
    mine.add_argument("--overlap-thresh", dest="overlap_thresh", type=float)
    mine.add_argument("--move-thresh", dest="move_thresh", type=float)
    mine.add_argument("--crop-size", dest="crop_size", type=int)
    mine.set_defaults(func=cmd_mine)

    codebook = subs.add_parser("codebook", help="cluster pose vectors")
    codebook.add_argument("--scored", help="scored-record file with pose vectors")
    codebook.add_argument("--k", type=int)
    codebook.add_argument("--max-iter", dest="max_iter", type=int)
    codebook.add_argument("--tol", type=float)
    codebook.set_defaults(func=cmd_codebook)

    for sub in (detect, render, evaluate, stats, train_cmd, mesh, mine, codebook):
        _add_common(sub)
        sub.set_defaults(parser=sub)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                parser.error("--threads must be >= 1")
            import torch

            torch.set_num_threads(args.threads)
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 1)
    except DataError as exc:
        print(f"handcontact: data error: {exc}", file=sys.stderr)
        return 2
    except HandContactError as exc:
        print(f"handcontact: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # unreadable checkpoints, torch failures, ...
        print(f"handcontact: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
