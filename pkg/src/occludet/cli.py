"""Batch entry points: dataset generation, training, evaluation, figures.

Exit codes are a stable contract for scripting: 0 success, 1 usage/config
error, 2 data error, 3 numeric failure. Every command is deterministic under
a fixed seed and logs its fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from . import evalkit, synthdata, viz, weights_io
from .errors import ConfigError, ContractViolation, DataError, NumericError
from .frame_detector import (
    DetectorConfig,
    FrameDetectorNet,
    PlateauScheduler,
    train_frame_epochs,
)
from .video_detector import VideoDetectorNet, init_from_frame_detector, train, video_forward


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2; we pin usage = 1
        raise UsageError(message)


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    sub.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    sub.add_argument("--preset", help="shorthand for --set preset=NAME")
    sub.add_argument("--cell", help="shorthand for --set cell=KIND")
    sub.add_argument("--bptt", type=int, help="shorthand for --set bptt=N")
    sub.add_argument("--direction", help="shorthand for --set direction=KIND")


def _resolve_config(args) -> dict:
    file_values = config_mod.parse_config_file(args.config) if args.config else {}
    overrides: dict = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    for name in ("seed", "preset", "cell", "bptt", "direction"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = str(value)
    return config_mod.resolve(file_values, overrides)


def _write_run_config(path: Path, config: dict) -> None:
    payload = {"config": config, "config_hash": weights_io.config_hash(config)}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _pick_split(root: Path, prefer: str) -> Path:
    if (root / prefer / "manifest.json").exists():
        return root / prefer
    if (root / "manifest.json").exists():
        return root
    raise DataError(
        f"{root}: no dataset found (expected {root / prefer}/manifest.json or {root}/manifest.json); "
        f"run 'occludet gen' first"
    )


# --- gen -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _resolve_config(args)
    spec = config_mod.scene_spec(config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out}: output directory exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    seed = config["seed"]
    train_samples = synthdata.generate_dataset(spec, seed, config["train_sequences"])
    test_samples = synthdata.generate_dataset(spec, seed + 1_000_000, config["test_sequences"])
    synthdata.write_dataset(out / "train", train_samples)
    synthdata.write_dataset(out / "test", test_samples)
    _write_run_config(out / "run_config.json", config)
    print(
        f"generated {len(train_samples)} train / {len(test_samples)} test sequences "
        f"(preset {config['preset']}, seed {seed}) under {out}"
    )
    return 0


# --- train -----------------------------------------------------------------------


def _load_resume(ckpt_path: Path):
    if not ckpt_path.exists():
        return None
    net, cfg, meta, arrays = weights_io.load_checkpoint(ckpt_path)
    return {"net": net, "cfg": cfg, "meta": meta, "arrays": arrays}


def _make_checkpoint_writer(ckpt_path: Path, cfg, kind: str, stage: str, extra: dict):
    def callback(epoch, net, optimizer, scheduler, rng, history):
        progress = {"stage": stage, "epochs_done": epoch + 1, "history": history, **extra}
        weights_io.save_checkpoint(ckpt_path, net, cfg, kind, optimizer, scheduler, rng, progress)

    return callback


def cmd_train(args) -> int:
    config = _resolve_config(args)
    seed = config["seed"]
    spec = config_mod.scene_spec(config)
    dcfg = config_mod.detector_config(config)
    tcfg = config_mod.train_config(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(str(out) + ".ckpt")
    pretrain_path = Path(str(out) + ".pretrain")

    sequences = synthdata.read_dataset(_pick_split(Path(args.dataset), "train"))
    if not sequences:
        raise DataError(f"{args.dataset}: dataset is empty")

    resume = _load_resume(ckpt_path) if args.resume else None
    frame_cfg = replace(dcfg, cell="none", direction="forward")

    # stage 1: pretrain the frame detector on static composites
    frame_net = None
    pretrain_history: list[dict] = []
    if args.pretrained:
        frame_net, loaded_cfg, _ = weights_io.load_detector(args.pretrained)
        if not isinstance(frame_net, FrameDetectorNet):
            raise DataError(f"{args.pretrained}: expected frame-detector weights")
        pretrain_history = [{"loaded_from": str(args.pretrained)}]
    else:
        composites = synthdata.generate_static_composites(spec, seed + 500_000, config["pretrain_images"])
        start_epoch = 0
        if resume is not None and resume["meta"]["checkpoint"]["stage"] == "pretrain":
            frame_net = resume["net"]
            if not isinstance(frame_net, FrameDetectorNet):
                raise DataError(f"{ckpt_path}: pretrain checkpoint holds the wrong model kind")
            ck = resume["meta"]["checkpoint"]
            start_epoch = ck["epochs_done"]
            pretrain_history = ck["history"]
            rng = weights_io.unpack_rng(ck["rng"])
            opt = torch.optim.SGD(frame_net.parameters(), lr=ck["lr"], momentum=tcfg.momentum)
            weights_io.unpack_optimizer(opt, frame_net, resume["arrays"])
            sched = PlateauScheduler(opt, tcfg.plateau_lr, tcfg.plateau_patience, tcfg.plateau_min_rel_improvement)
            sched.load_state_dict(ck["scheduler"])
            resume = None  # consumed
        else:
            frame_net = FrameDetectorNet(frame_cfg, torch.Generator().manual_seed(seed))
            rng = np.random.default_rng(seed)
            opt = torch.optim.SGD(frame_net.parameters(), lr=tcfg.learning_rate, momentum=tcfg.momentum)
            sched = PlateauScheduler(opt, tcfg.plateau_lr, tcfg.plateau_patience, tcfg.plateau_min_rel_improvement)
        if start_epoch < config["pretrain_epochs"]:
            writer = _make_checkpoint_writer(ckpt_path, frame_cfg, "frame", "pretrain", {})
            pretrain_history = train_frame_epochs(
                frame_net,
                composites,
                frame_cfg,
                opt,
                sched,
                rng,
                config["pretrain_epochs"],
                start_epoch=start_epoch,
                history=pretrain_history,
                epoch_callback=writer,
            )
        weights_io.save_detector(pretrain_path, frame_net, frame_cfg, "frame")

    # stage 2: fine-tune the video detector end to end
    if resume is not None and resume["meta"]["checkpoint"]["stage"] == "finetune":
        video_net = resume["net"]
        if not isinstance(video_net, VideoDetectorNet):
            raise DataError(f"{ckpt_path}: finetune checkpoint holds the wrong model kind")
        ck = resume["meta"]["checkpoint"]
        start_epoch = ck["epochs_done"]
        history = ck["history"]
        pretrain_history = ck.get("pretrain_history", pretrain_history)
        rng = weights_io.unpack_rng(ck["rng"])
        opt = torch.optim.SGD(video_net.parameters(), lr=ck["lr"], momentum=tcfg.momentum)
        weights_io.unpack_optimizer(opt, video_net, resume["arrays"])
        sched = PlateauScheduler(opt, tcfg.plateau_lr, tcfg.plateau_patience, tcfg.plateau_min_rel_improvement)
        sched.load_state_dict(ck["scheduler"])
    else:
        video_net = init_from_frame_detector(frame_net, dcfg, seed)
        start_epoch = 0
        history = []
        rng = np.random.default_rng(seed + 1)
        opt = torch.optim.SGD(video_net.parameters(), lr=tcfg.learning_rate, momentum=tcfg.momentum)
        sched = PlateauScheduler(opt, tcfg.plateau_lr, tcfg.plateau_patience, tcfg.plateau_min_rel_improvement)

    writer = _make_checkpoint_writer(
        ckpt_path, dcfg, "video", "finetune", {"pretrain_history": pretrain_history}
    )
    history = train(
        video_net,
        sequences,
        tcfg,
        dcfg,
        rng=rng,
        optimizer=opt,
        scheduler=sched,
        start_epoch=start_epoch,
        history=history,
        epoch_callback=writer,
    )

    log = {"pretrain": pretrain_history, "finetune": history, "config": config}
    weights_io.save_detector(out, video_net, dcfg, "video", extra_meta={"train_log": log})
    Path(str(out) + ".log.json").write_text(json.dumps(log, sort_keys=True, indent=2) + "\n")
    _write_run_config(Path(str(out) + ".run.json"), config)
    final_loss = history[-1]["loss"] if history else float("nan")
    print(f"trained cell={config['cell']} for {len(history)} epochs; final loss {final_loss:.4f}")
    print(f"weights: {out}")
    return 0


# --- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    net, cfg, _ = weights_io.load_detector(args.weights)
    if not isinstance(net, VideoDetectorNet):
        raise DataError(f"{args.weights}: eval expects video-detector weights")
    dataset = synthdata.read_dataset(_pick_split(Path(args.dataset), "test"))
    report = evalkit.evaluate_detector(
        net,
        dataset,
        cfg,
        iou_threshold=config["iou_threshold"],
        recall_score_threshold=config["recall_score_threshold"],
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    _write_run_config(Path(str(report_path) + ".run.json"), config)
    occ = "n/a" if report.occluded_recall is None else f"{report.occluded_recall:.3f}"
    print(f"mAP {report.map:.3f} | occluded recall {occ} | {report.num_frames} frames")
    print(f"report: {report_path}")
    return 0


# --- viz -------------------------------------------------------------------------


def cmd_viz(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = synthdata.read_dataset(_pick_split(Path(args.dataset), "test"))
    if not 0 <= args.sequence < len(dataset):
        raise DataError(f"sequence index {args.sequence} out of range (dataset has {len(dataset)})")
    sample = dataset[args.sequence]

    models = []
    for weights in args.weights:
        net, cfg, _ = weights_io.load_detector(weights)
        if not isinstance(net, VideoDetectorNet):
            raise DataError(f"{weights}: viz expects video-detector weights")
        models.append((cfg.cell, net, cfg))
    labels = args.compare.split(",") if args.compare else [m[0] for m in models]
    if len(labels) != len(models):
        raise UsageError(
            f"--compare names {len(labels)} models but {len(models)} weight files were given"
        )

    hw = sample.frames[0].shape[:2]
    rows = [viz.hstack_frames(sample.frames)]
    for label, (cell, net, cfg) in zip(labels, models):
        detections, trace = video_forward(sample.frames, net, cfg)
        overlays, heatmaps = [], []
        for t, frame in enumerate(sample.frames):
            overlay = viz.draw_detections(frame, detections[t], score_threshold=0.5)
            heat = viz.gray_to_rgb(evalkit.memory_heatmap(trace[t], hw))
            overlays.append(overlay)
            heatmaps.append(heat)
            if len(models) == 1:
                Image.fromarray(overlay).save(out / f"overlay_{t:06d}.png")
                Image.fromarray(heat).save(out / f"heatmap_{t:06d}.png")
            else:
                Image.fromarray(overlay).save(out / f"{label}_overlay_{t:06d}.png")
                Image.fromarray(heat).save(out / f"{label}_heatmap_{t:06d}.png")
        rows.append(viz.hstack_frames(overlays))
        rows.append(viz.hstack_frames(heatmaps))
    strip = viz.vstack_rows(rows)
    Image.fromarray(strip).save(out / "compare.png")
    _write_run_config(out / "run_config.json", config)
    print(f"wrote {len(sample.frames)} frames x {len(models)} model(s) under {out}")
    return 0


# --- entry point --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="occludet", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate a synthetic occlusion dataset")
    _add_config_args(gen)
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    gen.set_defaults(func=cmd_gen)

    tr = subs.add_parser("train", help="pretrain the frame detector, then fine-tune the video detector")
    _add_config_args(tr)
    tr.add_argument("--dataset", required=True, help="dataset directory from 'gen'")
    tr.add_argument("--out", required=True, help="output weights archive")
    tr.add_argument("--resume", action="store_true", help="continue from <out>.ckpt if present")
    tr.add_argument("--pretrained", help="reuse an existing frame-detector archive, skipping stage 1")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a trained video detector")
    _add_config_args(ev)
    ev.add_argument("--weights", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--report", required=True, help="output JSON report path")
    ev.set_defaults(func=cmd_eval)

    vz = subs.add_parser("viz", help="emit detection overlays and memory heatmaps")
    _add_config_args(vz)
    vz.add_argument("--weights", action="append", required=True, help="weights archive (repeatable)")
    vz.add_argument("--dataset", required=True)
    vz.add_argument("--sequence", type=int, default=0, help="sequence index within the split")
    vz.add_argument("--out", required=True, help="output directory for PNGs")
    vz.add_argument("--compare", help="comma-separated row labels matching the weight files")
    vz.set_defaults(func=cmd_viz)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
