"""One executable for the whole pipeline.

Subcommands: synth, priors, train, train-pc, propose, classify, ensemble,
eval, sweep. Every command takes --seed; all randomness derives from it
(scene i of `synth` uses seed + i; training draws batches from a stream
seeded by it). Exit codes: 0 success, 1 runtime failure, 2 usage or file
format errors. Diagnostics go to stderr.

A JSON config file (--config) may carry section overrides; command-line
flags win over the file. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import (
    evaluate_detections,
    pr_curve,
    recall_table,
    recall_table_csv,
    report_csv,
    svg_curve,
    sweep_budget,
    sweep_csv,
)
from .geometry import BBox, ScoredBox, box_from_dict, box_to_dict, read_jsonl, write_jsonl
from .inference import (
    Detection,
    MultiCropConfig,
    classify_detections,
    ensemble_multibox,
    multi_crop_propose,
    propose,
    select_topk,
)
from .matching_loss import LossConfig
from .priors import PriorSet, build_grid_priors, coverage, default_grid_specs
from .synthdata import SceneConfig, generate_scene, load_dataset, save_dataset
from .toynet import (
    PostClassifierConfig,
    PostClassifierNet,
    ProposerConfig,
    ProposerNet,
    build_crop_samples,
    load_weights,
    save_weights,
    train_postclassifier,
    train_proposer,
    write_loss_csv,
)

KNOWN_SECTIONS = {"scene", "proposer", "postclassifier", "context", "loss"}


class FormatError(ValueError):
    """Bad user input: malformed file, unknown key, inconsistent ids."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise FormatError("config root must be a JSON object")
    unknown = set(config) - KNOWN_SECTIONS
    if unknown:
        raise FormatError(f"unknown config sections: {sorted(unknown)}")
    return config


def _scene_config(args, config: dict) -> SceneConfig:
    section = dict(config.get("scene", {}))
    for key in ("classes", "size_range", "aspect_range"):
        if key in section:
            section[key] = tuple(section[key])
    for flag in ("image_size", "min_objects", "max_objects", "noise_level"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    try:
        return SceneConfig(**section)
    except TypeError as exc:
        raise FormatError(f"bad scene config: {exc}") from exc


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise FormatError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise FormatError(f"expected comma-separated numbers, got {text!r}") from exc


def _read_priors(path) -> PriorSet:
    try:
        return PriorSet.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read prior set {path}: {exc}") from exc


def _load_boxes_by_image(path) -> dict[str, list[dict]]:
    return {rec["image_id"]: rec["boxes"] for rec in read_jsonl(path)}


def _gts_from_records(boxes: list[dict]) -> list[tuple[BBox, int]]:
    return [(box_from_dict(b), int(b.get("class_id", 0))) for b in boxes]


def _scored_from_records(boxes: list[dict]) -> list[ScoredBox]:
    return [ScoredBox(box_from_dict(b), float(b.get("score", 0.0))) for b in boxes]


def _detections_from_records(boxes: list[dict]) -> list[Detection]:
    out = []
    for b in boxes:
        if "class_scores" not in b:
            raise FormatError("detection records need class_scores")
        out.append(
            Detection(
                box_from_dict(b),
                float(b.get("score", 0.0)),
                np.asarray(b["class_scores"], dtype=np.float64),
                str(b.get("source", "")),
            )
        )
    return out


def _save_proposer(out_dir: Path, net: ProposerNet) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(out_dir / "proposer.bin", net.named_params())
    (out_dir / "proposer.json").write_text(
        json.dumps(net.config.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _load_proposer(net_dir) -> ProposerNet:
    net_dir = Path(net_dir)
    try:
        config = ProposerConfig.from_dict(
            json.loads((net_dir / "proposer.json").read_text(encoding="utf-8"))
        )
        net = ProposerNet(config)
        net.load_state(load_weights(net_dir / "proposer.bin"))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise FormatError(f"cannot load proposer from {net_dir}: {exc}") from exc
    return net


def _save_pc(out_dir: Path, name: str, net: PostClassifierNet) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(out_dir / f"{name}.bin", net.named_params())
    (out_dir / f"{name}.json").write_text(
        json.dumps(net.config.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _load_pc(net_dir, name: str) -> PostClassifierNet:
    net_dir = Path(net_dir)
    try:
        config = PostClassifierConfig.from_dict(
            json.loads((net_dir / f"{name}.json").read_text(encoding="utf-8"))
        )
        net = PostClassifierNet(config)
        net.load_state(load_weights(net_dir / f"{name}.bin"))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise FormatError(f"cannot load {name} net from {net_dir}: {exc}") from exc
    return net


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    scene_cfg = _scene_config(args, config)
    scenes = [generate_scene(scene_cfg, args.seed + i) for i in range(args.count)]
    out = Path(args.out)
    save_dataset(scenes, out)
    (out / "scene_config.json").write_text(
        json.dumps(
            {**scene_cfg.__dict__, "classes": list(scene_cfg.classes),
             "size_range": list(scene_cfg.size_range),
             "aspect_range": list(scene_cfg.aspect_range)},
            sort_keys=True, indent=1,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_priors(args) -> int:
    grids = _parse_int_list(args.grids)
    specs = default_grid_specs(tuple(grids), args.templates)
    prior_set = build_grid_priors(specs, include_global=args.include_global)
    Path(args.out).write_text(prior_set.to_json() + "\n", encoding="utf-8")
    print(f"wrote {len(prior_set)} priors to {args.out}")

    if args.gt:
        records = read_jsonl(args.gt)
        boxes = [box_from_dict(b).as_array() for rec in records for b in rec["boxes"]]
        if not boxes:
            raise FormatError(f"no ground-truth boxes in {args.gt}")
        gts = np.stack(boxes)
        thresholds = _parse_float_list(args.thresholds)
        lines = ["threshold,coverage"]
        for t in thresholds:
            lines.append(f"{t},{coverage(prior_set, gts, t)!r}")
        cov_path = args.coverage_out or str(Path(args.out).with_suffix(".coverage.csv"))
        Path(cov_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote coverage report to {cov_path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    prior_set = _read_priors(args.priors)
    dataset = load_dataset(args.data)
    if not dataset:
        raise FormatError(f"empty dataset at {args.data}")

    section = dict(config.get("proposer", {}))
    section.setdefault("seed", args.seed)
    try:
        net_cfg = ProposerConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad proposer config: {exc}") from exc
    net = ProposerNet(net_cfg)

    loss_section = dict(config.get("loss", {}))
    if args.alpha is not None:
        loss_section["alpha"] = args.alpha
    if args.bootstrap_l is not None:
        loss_section["bootstrap_l"] = args.bootstrap_l
    try:
        loss_cfg = LossConfig(**loss_section)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad loss config: {exc}") from exc

    examples = []
    for _, image, gts in dataset:
        boxes = (
            np.stack([b.as_array() for b, _ in gts]) if gts else np.zeros((0, 4))
        )
        examples.append((image, boxes))

    log = train_proposer(
        net,
        examples,
        prior_set,
        loss_cfg,
        steps=args.steps,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    _save_proposer(out_dir, net)
    write_loss_csv(out_dir / "loss.csv", log)
    print(f"trained {args.steps} steps; final loss {log[-1].f_total:.4f}; saved to {out_dir}")
    return 0


def cmd_train_pc(args) -> int:
    config = _load_config(args.config)
    dataset = load_dataset(args.data)
    proposals = _load_boxes_by_image(args.proposals)

    pc_section = dict(config.get("postclassifier", {}))
    pc_section.setdefault("seed", args.seed)
    pc_section.setdefault("num_classes", args.num_classes)
    try:
        pc_cfg = PostClassifierConfig.from_dict(pc_section)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad post-classifier config: {exc}") from exc
    pc_net = PostClassifierNet(pc_cfg)

    ctx_net = None
    context_fn = None
    if args.context:
        ctx_section = dict(config.get("context", {}))
        ctx_section.setdefault("seed", args.seed + 1)
        ctx_section.setdefault("num_classes", args.num_classes)
        ctx_section.setdefault("feature_width", pc_cfg.context_width)
        try:
            ctx_cfg = PostClassifierConfig.from_dict(ctx_section)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad context config: {exc}") from exc
        if ctx_cfg.feature_width != pc_cfg.context_width:
            raise FormatError(
                "context net feature width must equal post-classifier context width"
            )
        ctx_net = PostClassifierNet(ctx_cfg)
        size = ctx_cfg.input_size
        whole = BBox(0.0, 0.0, 1.0, 1.0)

        from .imageops import sample_window

        def context_fn(image):
            return ctx_net.crop_features(sample_window(image, whole, size, size))[0]

    images, prop_boxes, gts = [], [], []
    for image_id, image, gt in dataset:
        images.append(image)
        gts.append(gt)
        prop_boxes.append([box_from_dict(b) for b in proposals.get(image_id, [])])
    positives, negatives = build_crop_samples(
        images, prop_boxes, gts, pc_cfg.input_size, context_fn
    )
    if not positives or not negatives:
        raise FormatError("need both positive and negative crops; check proposals")

    log = train_postclassifier(
        pc_net,
        positives,
        negatives,
        steps=args.steps,
        neg_ratio=args.neg_ratio,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    _save_pc(out_dir, "postclassifier", pc_net)
    if ctx_net is not None:
        _save_pc(out_dir, "context", ctx_net)
    write_loss_csv(out_dir / "pc_loss.csv", log)
    print(f"trained post-classifier {args.steps} steps; saved to {out_dir}")
    return 0


def cmd_propose(args) -> int:
    net = _load_proposer(args.net_dir)
    prior_set = _read_priors(args.priors)
    dataset = load_dataset(args.data)
    records = []
    for image_id, image, _ in dataset:
        if args.multi_crop:
            crop_cfg = MultiCropConfig(
                scales=tuple(_parse_float_list(args.crop_scales)),
                min_overlap=args.min_overlap,
                containment_margin=args.containment_margin,
                nms_threshold=args.nms,
            )
            found = multi_crop_propose(net, prior_set, image, crop_cfg)
        else:
            found = propose(net, prior_set, image, nms_threshold=args.nms)
        if args.top_k is not None:
            found = select_topk(found, args.top_k)
        records.append(
            {
                "image_id": image_id,
                "boxes": [box_to_dict(sb.box, score=sb.score) for sb in found],
            }
        )
    write_jsonl(args.out, records)
    mean_count = float(np.mean([len(r["boxes"]) for r in records])) if records else 0.0
    print(f"wrote proposals for {len(records)} images (avg {mean_count:.1f}/image) to {args.out}")
    return 0


def cmd_classify(args) -> int:
    pc_net = _load_pc(args.pc_dir, "postclassifier")
    ctx_net = None
    if args.context:
        ctx_net = _load_pc(args.pc_dir, "context")
    dataset = load_dataset(args.data)
    proposals = _load_boxes_by_image(args.proposals)
    records = []
    for image_id, image, _ in dataset:
        scored = _scored_from_records(proposals.get(image_id, []))
        dets = classify_detections(pc_net, ctx_net, image, scored, source=args.source)
        records.append(
            {
                "image_id": image_id,
                "boxes": [
                    box_to_dict(
                        d.box,
                        score=d.confidence,
                        class_scores=[float(v) for v in d.class_scores],
                        source=d.source,
                    )
                    for d in dets
                ],
            }
        )
    write_jsonl(args.out, records)
    print(f"classified proposals for {len(records)} images to {args.out}")
    return 0


def cmd_ensemble(args) -> int:
    per_model = [_load_boxes_by_image(path) for path in args.inputs]
    image_ids = sorted(set().union(*[set(m) for m in per_model]))
    records = []
    for image_id in image_ids:
        models = [_detections_from_records(m.get(image_id, [])) for m in per_model]
        merged = ensemble_multibox(models, nms_threshold=args.nms)
        records.append(
            {
                "image_id": image_id,
                "boxes": [
                    box_to_dict(
                        d.box,
                        score=d.confidence,
                        class_scores=[float(v) for v in d.class_scores],
                        source=d.source,
                    )
                    for d in merged
                ],
            }
        )
    write_jsonl(args.out, records)
    print(f"ensembled {len(args.inputs)} models over {len(records)} images to {args.out}")
    return 0


def _aligned_ids(gt: dict, preds: dict, pred_name: str) -> list[str]:
    missing = sorted(set(gt) - set(preds))
    if missing:
        raise FormatError(f"{pred_name} missing images: {missing[:5]}")
    return sorted(gt)


def cmd_eval(args) -> int:
    gt = _load_boxes_by_image(args.gt)
    if args.detections:
        preds = _load_boxes_by_image(args.detections)
        ids = _aligned_ids(gt, preds, "detections")
        gts = [_gts_from_records(gt[i]) for i in ids]
        dets = [_detections_from_records(preds[i]) for i in ids]
        classes = sorted({k for g in gts for _, k in g})
        report = evaluate_detections(dets, gts, classes, iou_t=args.iou)
        Path(args.out).write_text(report_csv(report), encoding="utf-8")
        if args.svg:
            points = pr_curve(dets, gts, None, args.iou)
            Path(args.svg).write_text(
                svg_curve(points, f"precision-recall @ IoU {args.iou}"), encoding="utf-8"
            )
        summary = "mAP " + (f"{report.mean_ap:.4f}" if report.mean_ap is not None else "n/a")
    else:
        preds = _load_boxes_by_image(args.proposals)
        ids = _aligned_ids(gt, preds, "proposals")
        gts = [_gts_from_records(gt[i]) for i in ids]
        props = [_scored_from_records(preds[i]) for i in ids]
        table = recall_table(props, gts)
        Path(args.out).write_text(recall_table_csv(table), encoding="utf-8")
        if args.svg:
            points = [(b / max(table.budgets[-1], 1e-9), r) for b, r in
                      zip(table.budgets, table.agnostic[:, 0])]
            Path(args.svg).write_text(
                svg_curve(points, "recall vs relative budget"), encoding="utf-8"
            )
        summary = f"recall@0.5 up to {table.agnostic[-1, 0]:.4f}"
    print(f"wrote report to {args.out} ({summary})")
    return 0


def cmd_sweep(args) -> int:
    gt = _load_boxes_by_image(args.gt)
    preds = _load_boxes_by_image(args.proposals)
    ids = _aligned_ids(gt, preds, "proposals")
    gts = [_gts_from_records(gt[i]) for i in ids]
    props = [_scored_from_records(preds[i]) for i in ids]
    budgets = _parse_int_list(args.budgets)
    points = sweep_budget(props, gts, budgets, iou_t=args.iou)
    Path(args.out).write_text(sweep_csv(points), encoding="utf-8")
    if args.svg:
        k_max = max(p.k for p in points)
        curve = [(p.k / k_max, p.recall) for p in points]
        Path(args.svg).write_text(svg_curve(curve, "recall vs budget"), encoding="utf-8")
    print(f"wrote sweep over {len(points)} budgets to {args.out}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multibox",
        description="Grid-prior region proposals: synthesize data, build priors, "
        "train, propose, classify, ensemble, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
        p.add_argument("--config", default=None, help="JSON config file with section overrides")
        p.add_argument(
            "--threads",
            type=int,
            default=1,
            help="worker cap; execution is sequential and deterministic for any value",
        )

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--min-objects", type=int, default=None)
    p.add_argument("--max-objects", type=int, default=None)
    p.add_argument("--noise-level", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("priors", help="build grid priors and optional coverage report")
    common(p)
    p.add_argument("--grids", default="8,6,4,3,2", help="comma-separated grid resolutions")
    p.add_argument("--templates", type=int, default=11, help="template shapes per cell")
    p.add_argument("--global", dest="include_global", action="store_true", default=True)
    p.add_argument("--no-global", dest="include_global", action="store_false")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", default=None, help="gt JSONL for a coverage report")
    p.add_argument("--coverage-out", default=None)
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("train", help="train the proposer network")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--bootstrap-l", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-pc", help="train the crop post-classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--neg-ratio", type=float, default=7.0)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--context", action="store_true", default=True)
    p.add_argument("--no-context", dest="context", action="store_false")
    p.set_defaults(func=cmd_train_pc)

    p = sub.add_parser("propose", help="emit ranked proposals for a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--net-dir", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--multi-crop", action="store_true")
    p.add_argument("--crop-scales", default="1.0,0.62")
    p.add_argument("--min-overlap", type=float, default=0.5)
    p.add_argument("--containment-margin", type=float, default=0.1)
    p.add_argument("--nms", type=float, default=0.85)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("classify", help="post-classify proposals into class scores")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--pc-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="model0", help="provenance tag for detections")
    p.add_argument("--context", action="store_true", default=True)
    p.add_argument("--no-context", dest="context", action="store_false")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("ensemble", help="merge detections from several models")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms", type=float, default=0.5)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="recall table (proposals) or AP report (detections)")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--proposals", default=None)
    p.add_argument("--detections", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="runtime-quality curve over top-K budgets")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--budgets", default="1,2,5,10,15,20,50,100,200")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    try:
        if args.threads < 1:
            raise FormatError("--threads must be >= 1")
        if args.command == "eval" and bool(args.proposals) == bool(args.detections):
            raise FormatError("eval needs exactly one of --proposals or --detections")
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
