"""Command-line entry point: ``plgan {prepare,synth,train,predict,eval,overlay}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import dataio
from .config import RUN_CONFIG_KEYS, ConfigError, TrainConfig, dump_run_config, from_flat
from .metrics import _distance_to, evaluate_dataset
from .networks import CheckpointMismatch, binarize
from .trainer import TrainingAborted, fit, trainer_from_checkpoint

log = logging.getLogger("plgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- helpers

def _list_images(directory: Path, role: str | None = None) -> List[Path]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if role:
        tagged = [p for p in files if p.stem.endswith(f"_{role}")]
        if tagged:
            return tagged
        files = [p for p in files if not p.stem.endswith(("_image", "_mask", "_pl"))]
    return files


def _by_key(files: Sequence[Path]) -> Dict[str, Path]:
    return {dataio.sample_key(p): p for p in files}


def _find_manifest(data_dir: Path) -> Path:
    if data_dir.is_file():
        return data_dir
    for name in ("train.tsv", "manifest.tsv"):
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(f"{data_dir}: no train.tsv or manifest.tsv")


def _write_samples(out: Path, samples: Sequence[dataio.Sample], manifest_name: str = "manifest.tsv") -> None:
    out.mkdir(parents=True, exist_ok=True)
    entries = [dataio.write_triplet(out, s) for s in samples]
    dataio.write_manifest(out / manifest_name, dataio.DatasetManifest("train", entries))


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    samples = dataio.synth_thin_lines(args.n, args.size, args.width, args.seed)
    _write_samples(Path(args.out), samples)
    if samples:
        log.info("wrote %d samples, foreground ratio %.4f", len(samples), dataio.foreground_ratio(samples))
    return EXIT_OK


def cmd_prepare(args) -> int:
    images = _list_images(Path(args.images))
    if not images:
        raise DataError(f"{args.images}: no images found")
    ann_dir = Path(args.annotations)
    classes = tuple(c for c in args.classes.split(",") if c)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    samples, skipped = [], []
    for img in images:
        ann = next((ann_dir / f"{img.stem}{ext}" for ext in (".json", ".png")
                    if (ann_dir / f"{img.stem}{ext}").exists()), None)
        if ann is None:
            skipped.append(f"{img.name}\tno annotation")
            continue
        try:
            samples.append(dataio.load_sample(str(img), str(ann), args.size, classes))
        except (OSError, ValueError) as e:
            skipped.append(f"{ann.name}\t{e}")

    entries = [dataio.write_triplet(out, s) for s in samples]
    manifest = dataio.DatasetManifest("train", entries, classes)
    if args.train_list or args.test_list:
        read = lambda f: [l.strip() for l in Path(f).read_text().splitlines() if l.strip()] if f else []
        keyed = dataio.DatasetManifest("train", [(f"{dataio.sample_key(a)}", b) for a, b in entries], classes)
        tr, te = dataio.split_dataset(keyed, train_list=read(args.train_list), test_list=read(args.test_list))
        restore = dict(zip([k for k, _ in keyed.entries], entries))
        for name, part in (("train.tsv", tr), ("test.tsv", te)):
            dataio.write_manifest(out / name, dataio.DatasetManifest(part.split, [restore[k] for k, _ in part.entries]))
    elif args.train_ratio is not None:
        tr, te = dataio.split_dataset(manifest, ratio=args.train_ratio, seed=args.seed)
        dataio.write_manifest(out / "train.tsv", tr)
        dataio.write_manifest(out / "test.tsv", te)
    else:
        dataio.write_manifest(out / "manifest.tsv", manifest)

    if skipped:
        (out / "skipped.txt").write_text("\n".join(skipped) + "\n")
        log.warning("%d file(s) skipped; see %s", len(skipped), out / "skipped.txt")
        return EXIT_DATA
    return EXIT_OK


def _resolve_train_config(args) -> TrainConfig:
    try:
        values = json.loads(Path(args.config).read_text()) if args.config else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    for key in RUN_CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    train, _ = from_flat(values)
    return train


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    data_dir = Path(args.data)
    manifest = dataio.read_manifest(_find_manifest(data_dir))
    samples = dataio.load_manifest_samples(manifest, cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_run_config(cfg))
    torch.manual_seed(cfg.seed)
    path = fit(samples, cfg, out, resume=args.resume)
    print(path)
    return EXIT_OK


def _predict_image(trainer, image: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(image).permute(2, 0, 1)[None].float()
    h, w = x.shape[-2:]
    s = trainer.cfg.generator.stride
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return trainer.predict_probs(x)[0, :h, :w].numpy()


def cmd_predict(args) -> int:
    trainer = trainer_from_checkpoint(args.checkpoint)
    images = _list_images(Path(args.images), role="image")
    if not images:
        raise DataError(f"{args.images}: no images found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        probs = _predict_image(trainer, dataio.read_image(path))
        dataio.write_mask(out / f"{dataio.sample_key(path)}_mask.png", binarize(probs, args.threshold))
    log.info("wrote %d mask(s) to %s", len(images), out)
    return EXIT_OK


def _paired_masks(pred_dir: Path, gt_dir: Path):
    preds = _by_key(_list_images(pred_dir, role="mask"))
    gts = _by_key(_list_images(gt_dir, role="mask"))
    keys = sorted(set(preds) & set(gts))
    missing = sorted(set(gts) - set(preds))
    if missing:
        log.warning("%d ground-truth mask(s) have no prediction, e.g. %s", len(missing), missing[:3])
    if not keys:
        raise DataError(f"no matching masks between {pred_dir} and {gt_dir}")
    return keys, preds, gts


def cmd_eval(args) -> int:
    keys, preds, gts = _paired_masks(Path(args.pred), Path(args.gt))
    pred_masks, gt_masks = [], []
    for k in keys:
        p, g = dataio.read_mask(preds[k]), dataio.read_mask(gts[k])
        if p.shape != g.shape:
            raise DataError(f"{k}: prediction {p.shape} vs ground truth {g.shape}")
        pred_masks.append(p)
        gt_masks.append(g)
    report = evaluate_dataset(pred_masks, gt_masks, args.tolerance, args.beta, args.aggregation,
                              args.distance, ids=keys)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n")
    report_path.with_suffix(".csv").write_text(report.csv_row())
    for name, value in report.metrics().items():
        print(f"{name:>12s} {value:.4f}")
    return EXIT_OK


def overlay_image(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, tolerance: float = 2.0,
                  metric: str = "euclidean") -> np.ndarray:
    """Dimmed RGB base with relaxed TP green, FP red and FN blue."""
    pred, gt = pred.astype(bool), gt.astype(bool)
    near_gt = _distance_to(gt, metric) <= tolerance
    near_pred = _distance_to(pred, metric) <= tolerance
    out = (dataio.image_to_uint8(image).astype(np.float32) * 0.5).astype(np.uint8)
    out[(pred & near_gt) | (gt & near_pred)] = (0, 255, 0)
    out[pred & ~near_gt] = (255, 0, 0)
    out[gt & ~near_pred] = (0, 0, 255)
    return out


def cmd_overlay(args) -> int:
    keys, preds, gts = _paired_masks(Path(args.pred), Path(args.gt))
    images = _by_key(_list_images(Path(args.images), role="image"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    for k in keys:
        if k not in images:
            errors.append(f"{k}\tno image")
            continue
        img, p, g = dataio.read_image(images[k]), dataio.read_mask(preds[k]), dataio.read_mask(gts[k])
        if not (img.shape[:2] == p.shape == g.shape):
            errors.append(f"{k}\tsize mismatch image {img.shape[:2]} pred {p.shape} gt {g.shape}")
            continue
        Image.fromarray(overlay_image(img, p, g, args.tolerance)).save(out / f"{k}_overlay.png")
    if errors:
        (out / "errors.txt").write_text("\n".join(errors) + "\n")
        log.warning("%d overlay(s) failed; see %s", len(errors), out / "errors.txt")
        return EXIT_DATA
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic thin-line samples")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--width", type=int, default=1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="convert images + LabelMe/mask annotations to PNG triplets")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--classes", default="cable", help="comma-separated label prefixes")
    p.add_argument("--train-list", help="file of image ids for the train split")
    p.add_argument("--test-list", help="file of image ids for the test split")
    p.add_argument("--train-ratio", type=float, help="split by ratio instead of lists")
    p.add_argument("--seed", type=int, help="shuffle seed for --train-ratio")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train PLGAN on a prepared directory")
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    for key, (_, _, typ, doc) in RUN_CONFIG_KEYS.items():
        if key in ("threshold", "tolerance", "beta", "aggregation", "distance"):
            continue
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=str if typ is bool else typ, help=doc)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary masks using the embedder and semantic decoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tolerance", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--distance", choices=("euclidean", "chebyshev"), default="euclidean")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render TP/FP/FN overlays")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float, default=2.0)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"error: {e} (last checkpoint: {e.checkpoint})", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
