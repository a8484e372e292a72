"""Batch entry points: simulate, train, detect, evaluate, render.

Each subcommand writes its artifacts plus a manifest holding the RunConfig
that produced them and SHA-256 checksums of every output file. Re-running
``RunConfig.to_argv()`` with the same ``--workers`` reproduces the outputs
byte for byte on the same platform.

Exit codes: 0 success, 2 usage error, 3 input validation, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__, coco
from .evaluation import (COCO_IOU_THRESHOLDS, DEFAULT_CENTER_RADIUS, DEFAULT_MAX_DETS, evaluate,
                         render_sr_map, save_sr_png16, save_sr_ulmf)
from .frames import Frame, FrameFormatError, load_ulmf, save_ulmf
from .inference import detect
from .model import ModelConfig, NumericalError, load_checkpoint, save_checkpoint
from .patching import DEFAULT_BAND, DEFAULT_RADIUS, read_detections_csv, write_detections_csv
from .simulator import PsfModel, simulate_dataset
from .training import TrainSettings, make_patch_samples, split_train_val, train

log = logging.getLogger("ulmdetr")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.json"
FRAMES_DIR = "frames"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything needed to repeat a run: subcommand, every option value, package version."""

    subcommand: str
    options: dict = field(default_factory=dict)
    version: str = __version__

    def to_argv(self) -> list[str]:
        argv = [self.subcommand]
        for key, value in self.options.items():
            if value is None or value is False:
                continue
            flag = "--" + key.replace("_", "-")
            if value is True:
                argv.append(flag)
            elif isinstance(value, list):
                argv += [flag, ",".join(str(v) for v in value)]
            else:
                argv += [flag, str(value)]
        return argv

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "RunConfig":
        opts = {k: _plain(v) for k, v in sorted(vars(ns).items()) if k not in ("command", "handler")}
        return cls(ns.command, opts)


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):  # bubble range
        return f"{value[0]}-{value[1]}"
    return value


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, run: RunConfig, outputs, root: Path) -> None:
    files = {str(Path(p).relative_to(root)): sha256_file(p) for p in sorted(outputs)}
    doc = {"run_config": asdict(run), "files": files}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _beside(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# --- argument parsing -------------------------------------------------------

def _int_range(text: str) -> tuple[int, int]:
    """``"8"`` or ``"1-5"`` -> inclusive bubble-count range."""
    try:
        if "-" in text:
            lo, hi = (int(t) for t in text.split("-", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or MIN-MAX, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return lo, hi


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_model_args(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model (ignored with --init)")
    g.add_argument("--d-model", type=int, default=d.d_model)
    g.add_argument("--n-heads", type=int, default=d.n_heads)
    g.add_argument("--n-encoder-layers", type=int, default=d.n_encoder_layers)
    g.add_argument("--n-decoder-layers", type=int, default=d.n_decoder_layers)
    g.add_argument("--n-queries", type=int, default=d.n_queries)
    g.add_argument("--backbone-channels", type=_int_list, default=d.backbone_channels,
                   help="comma-separated conv block widths")
    g.add_argument("--patch-input-size", type=int, default=d.patch_input_size)
    g.add_argument("--dropout", type=float, default=d.dropout)
    g.add_argument("--dim-feedforward", type=int, default=d.dim_feedforward)
    g.add_argument("--activation", choices=["relu", "gelu"], default=d.activation)
    g.add_argument("--no-query-anchors", action="store_true",
                   help="disable learned per-query reference centers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulmdetr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=42, help="master random seed")
        p.add_argument("--workers", type=_positive_int, default=1,
                       help="intra-op threads; part of the reproducibility contract")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("simulate", help="write a synthetic dataset (ULMF frames + COCO JSON)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--frames", type=_positive_int, default=500)
    p.add_argument("--size", type=_positive_int, default=64, help="square frame side in pixels")
    p.add_argument("--bubbles", type=_int_range, default=(1, 5), metavar="N|MIN-MAX")
    p.add_argument("--sigma", type=float, default=2.0, help="PSF standard deviation in pixels")
    p.add_argument("--noise-std", type=float, default=0.05)
    common(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train", help="train or fine-tune a detector on a dataset directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory from 'simulate'")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--init", type=Path, help="checkpoint to fine-tune from")
    p.add_argument("--frames-limit", type=_positive_int,
                   help="train on only the first N frames (by image id)")
    p.add_argument("--train-fraction", type=float, default=0.7)
    t = TrainSettings()
    p.add_argument("--epochs", type=_positive_int, default=t.epochs)
    p.add_argument("--batch-size", type=_positive_int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--grad-clip", type=float, default=t.grad_clip, help="0 disables clipping")
    p.add_argument("--lr-drop-epoch", type=int, default=t.lr_drop_epoch,
                   help="epoch at which the learning rate is multiplied by --lr-drop-factor; 0 disables")
    p.add_argument("--lr-drop-factor", type=float, default=t.lr_drop_factor)
    p.add_argument("--lambda-class", type=float, default=t.lambda_class)
    p.add_argument("--lambda-l1", type=float, default=t.lambda_l1)
    p.add_argument("--lambda-giou", type=float, default=t.lambda_giou)
    p.add_argument("--no-object-weight", type=float, default=t.no_object_weight)
    _add_model_args(p)
    common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("detect", help="run patch-wise detection over frames")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="dataset directory (annotations.json lists the frames) or a folder of .ulmf files")
    p.add_argument("--out", type=Path, required=True, help="detections CSV path")
    p.add_argument("--grid", type=_positive_int, default=1, help="k for a k x k patch grid")
    p.add_argument("--confidence", type=float, default=0.5)
    p.add_argument("--band", type=float, default=DEFAULT_BAND)
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    p.add_argument("--frame-ids", type=_int_list, help="restrict to these image ids")
    common(p)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against COCO ground truth")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="EvalReport JSON path")
    p.add_argument("--iou-thresholds", type=_float_list, default=list(COCO_IOU_THRESHOLDS))
    p.add_argument("--center-radius", type=float, default=DEFAULT_CENTER_RADIUS)
    p.add_argument("--max-dets", type=_positive_int, default=DEFAULT_MAX_DETS)
    p.add_argument("--frame-ids", type=_int_list,
                   help="score only these image ids (default: every annotated image)")
    common(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("render", help="accumulate detections into a super-resolution map")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="16-bit PNG path")
    p.add_argument("--raw", type=Path, help="also write the map as ULMF")
    p.add_argument("--annotations", type=Path, help="take the frame size from this dataset")
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--factor", type=_positive_int, default=10, help="upsampling factor")
    common(p)
    p.set_defaults(handler=cmd_render)
    return parser


# --- helpers ----------------------------------------------------------------

def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _prepare_out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_out_file(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def load_dataset(root: Path):
    """``(CocoDataset, [(Frame, gt_items)])`` from a dataset directory, sorted by image id."""
    ds = coco.load(_require_file(root / ANNOTATIONS_NAME, "annotations"))
    out = []
    for image in sorted(ds.images, key=lambda im: im["id"]):
        frame = load_ulmf(_require_file(root / FRAMES_DIR / image["file_name"], "frame"),
                          frame_id=image["id"])
        if (frame.width, frame.height) != (image["width"], image["height"]):
            raise coco.InvalidAnnotationError(
                f"image {image['id']}: annotated size {image['width']}x{image['height']} "
                f"differs from frame {frame.width}x{frame.height}")
        out.append((frame, coco.gt_items_for_image(ds, image["id"])))
    return ds, out


def _load_frames(root: Path) -> list[Frame]:
    if (root / ANNOTATIONS_NAME).is_file():
        return [f for f, _ in load_dataset(root)[1]]
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory not found: {root}")
    paths = sorted(root.glob("*.ulmf"))
    if not paths:
        raise FileNotFoundError(f"no .ulmf frames in {root}")
    return [load_ulmf(p, frame_id=i) for i, p in enumerate(paths)]


# --- subcommands ------------------------------------------------------------

def cmd_simulate(args, run: RunConfig) -> None:
    out = _prepare_out_dir(args.out)
    data = simulate_dataset(args.frames, args.size, args.size, args.bubbles,
                            PsfModel(args.sigma, args.sigma), args.noise_std, args.seed)
    frames_dir = _prepare_out_dir(out / FRAMES_DIR)
    ds = coco.to_coco(data)
    written = []
    for (frame, _), image in zip(data, ds.images):
        path = frames_dir / image["file_name"]
        save_ulmf(frame, path)
        written.append(path)
    coco.save(ds, out / ANNOTATIONS_NAME)
    written.append(out / ANNOTATIONS_NAME)
    write_manifest(out / MANIFEST_NAME, run, written, out)
    log.info("wrote %d frames and %d annotations to %s", len(data), len(ds.annotations), out)


def cmd_train(args, run: RunConfig) -> None:
    if not 0 < args.train_fraction <= 1:
        raise UsageError("--train-fraction must be in (0, 1]")
    _, data = load_dataset(args.data)
    if args.frames_limit is not None:
        data = data[:args.frames_limit]
    tr_idx, va_idx = split_train_val(len(data), args.train_fraction, args.seed)
    if not tr_idx:
        raise UsageError("the training split is empty; raise --train-fraction or add frames")
    init = load_checkpoint(_require_file(args.init, "checkpoint")) if args.init else None
    if init is not None:
        config = init.config
    else:
        config = ModelConfig(
            d_model=args.d_model, n_heads=args.n_heads, n_encoder_layers=args.n_encoder_layers,
            n_decoder_layers=args.n_decoder_layers, n_queries=args.n_queries,
            backbone_channels=args.backbone_channels, patch_input_size=args.patch_input_size,
            dropout=args.dropout, dim_feedforward=args.dim_feedforward,
            activation=args.activation, query_anchors=not args.no_query_anchors)
    size = config.patch_input_size
    train_s = make_patch_samples([data[i] for i in tr_idx], size)
    val_s = make_patch_samples([data[i] for i in va_idx], size) if va_idx else None
    settings = TrainSettings(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, seed=args.seed, lambda_class=args.lambda_class,
        lambda_l1=args.lambda_l1, lambda_giou=args.lambda_giou,
        no_object_weight=args.no_object_weight, grad_clip=args.grad_clip or None,
        max_steps=args.max_steps, lr_drop_epoch=args.lr_drop_epoch or None,
        lr_drop_factor=args.lr_drop_factor)

    def progress(epoch, tb, vb):
        log.info("epoch %d  train %.4f  val %s", epoch, tb.total, "-" if vb is None else f"{vb.total:.4f}")

    result = train(train_s, config, settings, val_s, init=init, progress=progress)
    out = _prepare_out_dir(args.out)
    ckpt = result.checkpoint
    ckpt.extra = {"best_epoch": result.best_epoch, "train_images": [data[i][0].frame_id for i in tr_idx]}
    save_checkpoint(ckpt, out / "checkpoint.npz")
    curve = out / "loss_curve.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_total", "train_class_nll", "train_l1", "train_giou",
                    "val_total", "val_class_nll", "val_l1", "val_giou"])
        for e, tb in enumerate(result.train_curve):
            vb = result.val_curve[e] if e < len(result.val_curve) else None
            row = [e] + [f"{v:.8f}" for v in (tb.total, tb.class_nll, tb.l1, tb.giou_term)]
            row += [f"{v:.8f}" for v in (vb.total, vb.class_nll, vb.l1, vb.giou_term)] if vb else [""] * 4
            w.writerow(row)
    (out / "split.json").write_text(json.dumps({
        "train": [data[i][0].frame_id for i in tr_idx],
        "val": [data[i][0].frame_id for i in va_idx]}) + "\n", encoding="utf-8")
    write_manifest(out / MANIFEST_NAME, run,
                   [out / "checkpoint.npz", curve, out / "split.json"], out)
    log.info("best epoch %d, %d steps; checkpoint in %s", result.best_epoch, result.steps, out)


def cmd_detect(args, run: RunConfig) -> None:
    if not 0 <= args.confidence <= 1:
        raise UsageError("--confidence must be in [0, 1]")
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint")).build_model()
    frames = _load_frames(args.data)
    if args.frame_ids is not None:
        wanted = set(args.frame_ids)
        frames = [f for f in frames if f.frame_id in wanted]
    dets = detect(model, frames, args.grid, args.confidence, args.band, args.radius)
    out = _prepare_out_file(args.out)
    write_detections_csv(dets, out)
    write_manifest(_beside(out), run, [out], out.parent)
    log.info("%d detections over %d frames -> %s", sum(map(len, dets.values())), len(frames), out)


def cmd_evaluate(args, run: RunConfig) -> None:
    ds = coco.load(_require_file(args.annotations, "annotations"))
    dets = read_detections_csv(_require_file(args.detections, "detections"))
    ids = sorted(im["id"] for im in ds.images)
    if args.frame_ids is not None:
        ids = [i for i in ids if i in set(args.frame_ids)]
    unknown = sorted(set(dets) - {im["id"] for im in ds.images})
    if unknown:
        raise coco.ReferentialIntegrityError(f"detections reference unknown image ids {unknown[:5]}")
    report = evaluate([dets.get(i, []) for i in ids], [coco.gt_boxes_for_image(ds, i) for i in ids],
                      args.iou_thresholds, args.center_radius, args.max_dets)
    out = _prepare_out_file(args.out)
    report.save(out)
    write_manifest(_beside(out), run, [out], out.parent)
    log.info("mAP %.4f  AP@0.5 %s  center recall %.4f", report.mAP,
             report.ap_per_threshold.get("0.50", "n/a"), report.center_recall)


def cmd_render(args, run: RunConfig) -> None:
    dets = read_detections_csv(_require_file(args.detections, "detections"))
    if args.annotations is not None:
        images = coco.load(_require_file(args.annotations, "annotations")).images
        sizes = {(im["width"], im["height"]) for im in images}
        if len(sizes) != 1:
            raise coco.InvalidAnnotationError("render needs all frames to share one size")
        width, height = sizes.pop()
    elif args.width and args.height:
        width, height = args.width, args.height
    else:
        raise UsageError("give --annotations or both --width and --height")
    sr = render_sr_map([d for fid in sorted(dets) for d in dets[fid]], (width, height), args.factor)
    out = _prepare_out_file(args.out)
    save_sr_png16(sr, out)
    written = [out]
    if args.raw is not None:
        save_sr_ulmf(sr, _prepare_out_file(args.raw))
        written.append(args.raw)
    write_manifest(_beside(out), run, written, out.parent)
    log.info("%d centers accumulated, %d outside the frame", sr.total, sr.discarded)


# --- entry point ------------------------------------------------------------

def _fail(code: int, category: str, exc: BaseException) -> int:
    print(f"ulmdetr: error [{category}]: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    torch.set_num_threads(args.workers)
    run = RunConfig.from_namespace(args)
    try:
        args.handler(args, run)
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_VALIDATION, "missing file", exc)
    except (coco.CocoError, FrameFormatError) as exc:
        return _fail(EXIT_VALIDATION, "schema violation", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numeric failure", exc)
    except OSError as exc:
        return _fail(EXIT_VALIDATION, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_VALIDATION, "invalid input", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
