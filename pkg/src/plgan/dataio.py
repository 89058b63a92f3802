"""Dataset ingestion, PL-highlighted ground truth, resizing, flips, splits and synthetic data.

Conventions: images are ``H x W x 3`` float32 in ``[-1, 1]``; masks are ``H x W``
uint8 in ``{0, 1}``. On disk, images are 8-bit RGB PNGs and masks 8-bit
single-channel PNGs with ``0``/``255``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import TransformKind, apply_transform

log = logging.getLogger(__name__)

BLACK = -1.0
DEFAULT_CLASSES = ("cable",)


@dataclass
class PolygonAnnotation:
    label: str
    points: List[Tuple[float, float]]


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    pl_highlighted: np.ndarray

    @classmethod
    def from_image_mask(cls, id: str, image: np.ndarray, mask: np.ndarray) -> "Sample":
        image = np.asarray(image, dtype=np.float32)
        mask = (np.asarray(mask) > 0).astype(np.uint8)
        return cls(id, image, mask, make_pl_highlighted(image, mask))

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape


@dataclass
class DatasetManifest:
    split: str
    entries: List[Tuple[str, str]]
    class_filter: Tuple[str, ...] = DEFAULT_CLASSES
    root: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def __len__(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------- LabelMe

def _label_matches(label: str, class_filter: Iterable[str] | None) -> bool:
    if class_filter is None:
        return True
    return any(label.startswith(c) for c in class_filter)


def parse_labelme(json_text: str, class_filter: Iterable[str] | None = DEFAULT_CLASSES) -> List[PolygonAnnotation]:
    """Polygons from a LabelMe JSON document, keeping shapes whose label starts
    with one of ``class_filter`` (``None`` keeps every shape)."""
    data = json.loads(json_text)
    if not isinstance(data, dict) or not isinstance(data.get("shapes"), list):
        raise ValueError("LabelMe JSON must be an object with a 'shapes' list")
    out, skipped = [], 0
    for shape in data["shapes"]:
        label = str(shape.get("label", ""))
        if not _label_matches(label, class_filter):
            continue
        points = [(float(x), float(y)) for x, y in shape.get("points", [])]
        if len(points) < 3:
            skipped += 1
            continue
        out.append(PolygonAnnotation(label, points))
    if skipped:
        log.warning("skipped %d shape(s) with fewer than 3 points", skipped)
    return out


def rasterize_polygons(annos: Sequence[PolygonAnnotation], width: int, height: int) -> np.ndarray:
    """Binary mask of pixels whose centre lies inside any polygon (even-odd rule)."""
    if width <= 0 or height <= 0:
        raise ValueError(f"width and height must be positive, got {width}x{height}")
    mask = np.zeros((height, width), dtype=bool)
    for anno in annos:
        pts = np.asarray(anno.points, dtype=np.float64)
        x0 = max(int(np.floor(pts[:, 0].min())) - 1, 0)
        x1 = min(int(np.ceil(pts[:, 0].max())) + 1, width)
        y0 = max(int(np.floor(pts[:, 1].min())) - 1, 0)
        y1 = min(int(np.ceil(pts[:, 1].max())) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        cy, cx = np.mgrid[y0:y1, x0:x1] + 0.5
        inside = np.zeros(cx.shape, dtype=bool)
        xa, ya = pts[:, 0], pts[:, 1]
        xb, yb = np.roll(xa, -1), np.roll(ya, -1)
        for ax_, ay_, bx_, by_ in zip(xa, ya, xb, yb):
            if ay_ == by_:
                continue
            straddles = (ay_ > cy) != (by_ > cy)
            x_cross = ax_ + (cy - ay_) * (bx_ - ax_) / (by_ - ay_)
            inside ^= straddles & (cx < x_cross)
        mask[y0:y1, x0:x1] |= inside
    return mask.astype(np.uint8)


# --------------------------------------------------------------------------- samples

def make_pl_highlighted(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of ``image`` with every foreground pixel set to black."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    out = image.copy()
    out[mask.astype(bool)] = BLACK
    return out


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32), mode="F")
                   .resize((size, size), Image.BILINEAR))
        for c in range(image.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(np.float32)


def _resize_mask_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return (mask[np.ix_(rows, cols)] > 0).astype(np.uint8)


def resize_sample(sample: Sample, size: int) -> Sample:
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    if sample.size == (size, size):
        return Sample.from_image_mask(sample.id, sample.image, sample.mask)
    image = _resize_image(sample.image, size)
    mask = _resize_mask_nearest(sample.mask, size)
    return Sample.from_image_mask(sample.id, image, mask)


def augment_flip(sample: Sample, which: str) -> Sample:
    kind = TransformKind(which)
    if kind not in (TransformKind.HFLIP, TransformKind.VFLIP):
        raise ValueError(f"augment_flip supports hflip/vflip, got {which}")
    return Sample(
        id=f"{sample.id}_{kind.value}",
        image=apply_transform(sample.image, kind),
        mask=apply_transform(sample.mask, kind),
        pl_highlighted=apply_transform(sample.pl_highlighted, kind),
    )


# --------------------------------------------------------------------------- synthetic

def _stroke_distance(size: int, p0: np.ndarray, p1: np.ndarray, bend: float, n_seg: int = 24) -> np.ndarray:
    """Distance from every pixel centre to a quadratic Bezier polyline."""
    mid = (p0 + p1) / 2
    d = p1 - p0
    normal = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-9)
    ctrl = mid + bend * normal
    t = np.linspace(0, 1, n_seg + 1)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p1
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    best = np.full(pts.shape[0], np.inf)
    for a, b in zip(curve[:-1], curve[1:]):
        ab = b - a
        denom = ab @ ab
        s = np.clip(((pts - a) @ ab) / denom, 0, 1) if denom > 0 else np.zeros(len(pts))
        proj = a + s[:, None] * ab
        best = np.minimum(best, np.hypot(*(pts - proj).T))
    return best.reshape(size, size)


def _edge_points(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    sides = rng.choice(4, size=2, replace=False)

    def point(side):
        u = rng.uniform(0, size)
        return np.array([[u, 0.0], [size, u], [u, size], [0.0, u]][side])

    return point(sides[0]), point(sides[1])


def synth_thin_lines(n_images: int, size: int = 128, line_width_px: int = 1, seed: int = 0,
                     contrast: float = 0.5) -> List[Sample]:
    """Deterministic synthetic thin-line images on a textured background.

    Each image gets 1-4 straight or slightly bent strokes crossing the frame. The
    stroke count is trimmed/extended so the foreground ratio lands in 1-3% where
    the width allows it. Strokes are darker or brighter than the background at
    random; the background level varies only moderately between images.
    """
    if line_width_px < 1:
        raise ValueError("line_width_px must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for n in range(n_images):
        base = rng.uniform(-0.25, 0.25) + rng.uniform(-0.05, 0.05, size=3)
        texture = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(size / 16, size / 16, 0))
        texture /= np.abs(texture).max() + 1e-9
        fine = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(1, 1, 0))
        image = base + 0.25 * texture + 0.05 * fine

        k = int(rng.integers(1, 5))
        strokes = []
        for _ in range(4):
            p0, p1 = _edge_points(rng, size)
            bend = rng.uniform(-0.08, 0.08) * size if rng.random() < 0.5 else 0.0
            strokes.append(_stroke_distance(size, p0, p1, bend))
        half = line_width_px / 2
        masks = [(d <= half) for d in strokes]
        ratio = lambda m: float(np.logical_or.reduce(m).mean())
        while k > 1 and ratio(masks[:k]) > 0.03:
            k -= 1
        while k < 4 and ratio(masks[:k]) < 0.01:
            k += 1

        mask = np.logical_or.reduce(masks[:k]).astype(np.uint8)
        sign = rng.choice([-1.0, 1.0])
        color = base + sign * contrast * rng.uniform(0.8, 1.2)
        for d in strokes[:k]:
            alpha = np.clip(half + 0.5 - d, 0.0, 1.0)[..., None]
            image = image * (1 - alpha) + color * alpha
        image = np.clip(image, -1, 1).astype(np.float32)
        samples.append(Sample.from_image_mask(f"synth_{seed}_{n:05d}", image, mask))
    return samples


def foreground_ratio(samples: Sequence[Sample]) -> float:
    total = sum(s.mask.size for s in samples)
    return sum(int(s.mask.sum()) for s in samples) / total if total else 0.0


# --------------------------------------------------------------------------- splits

def split_dataset(manifest: DatasetManifest, ratio: float | None = None,
                  train_list: Sequence[str] | None = None, test_list: Sequence[str] | None = None,
                  seed: int | None = None) -> Tuple[DatasetManifest, DatasetManifest]:
    """Split ``manifest`` by ratio (optionally shuffled) or by explicit id lists.

    In list mode an entry's id is the stem of its image path, and every entry must
    appear in exactly one list.
    """
    if not manifest.entries:
        raise ValueError("cannot split an empty manifest")
    entries = list(manifest.entries)
    if train_list is not None or test_list is not None:
        train_ids = {Path(t).stem for t in (train_list or [])}
        test_ids = {Path(t).stem for t in (test_list or [])}
        overlap = train_ids & test_ids
        if overlap:
            raise ValueError(f"{len(overlap)} id(s) in both train and test lists, e.g. {sorted(overlap)[:3]}")
        train, test, missing = [], [], []
        for e in entries:
            stem = Path(e[0]).stem
            if stem in train_ids:
                train.append(e)
            elif stem in test_ids:
                test.append(e)
            else:
                missing.append(stem)
        if missing:
            raise ValueError(f"{len(missing)} entr(ies) not in either list, e.g. {missing[:3]}")
    else:
        if ratio is None or not 0 <= ratio <= 1:
            raise ValueError(f"ratio must be in [0, 1], got {ratio}")
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(entries))
            entries = [entries[i] for i in order]
        n_train = int(round(ratio * len(entries)))
        train, test = entries[:n_train], entries[n_train:]
    return (replace(manifest, split="train", entries=train),
            replace(manifest, split="test", entries=test))


# --------------------------------------------------------------------------- disk I/O

def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return uint8_to_image(np.asarray(im.convert("RGB")))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Image.fromarray(image_to_uint8(image), mode="RGB").save(path)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_manifest(path: str | os.PathLike, split: str = "train",
                  class_filter: Tuple[str, ...] = DEFAULT_CLASSES) -> DatasetManifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>annotation'")
        entries.append((parts[0], parts[1]))
    return DatasetManifest(split, entries, class_filter, root=str(path.parent))


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in manifest.entries))


def load_sample(image_path: str, annotation_path: str, size: int | None = None,
                class_filter: Iterable[str] | None = DEFAULT_CLASSES, id: str | None = None) -> Sample:
    """Load one sample; ``annotation_path`` is a LabelMe JSON or a mask raster."""
    image = read_image(image_path)
    if annotation_path.lower().endswith(".json"):
        annos = parse_labelme(Path(annotation_path).read_text(), class_filter)
        mask = rasterize_polygons(annos, image.shape[1], image.shape[0])
    else:
        mask = read_mask(annotation_path)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"{annotation_path}: mask {mask.shape} does not match image {image.shape[:2]}")
    sample_id = id or Path(image_path).stem
    if sample_id.endswith("_image"):
        sample_id = sample_id[: -len("_image")]
    sample = Sample.from_image_mask(sample_id, image, mask)
    return resize_sample(sample, size) if size else sample


def load_manifest_samples(manifest: DatasetManifest, size: int | None = None) -> List[Sample]:
    return [load_sample(manifest.resolve(a), manifest.resolve(b), size, manifest.class_filter)
            for a, b in manifest.entries]


def write_triplet(out_dir: str | os.PathLike, sample: Sample) -> Tuple[str, str]:
    """Write image/mask/pl-highlighted PNGs; returns the (image, mask) file names."""
    out_dir = Path(out_dir)
    names = (f"{sample.id}_image.png", f"{sample.id}_mask.png", f"{sample.id}_pl.png")
    write_image(out_dir / names[0], sample.image)
    write_mask(out_dir / names[1], sample.mask)
    write_image(out_dir / names[2], sample.pl_highlighted)
    return names[0], names[1]


def sample_key(path: str | os.PathLike) -> str:
    """File stem without the ``_image``/``_mask``/``_pl`` suffix used by triplets."""
    stem = Path(path).stem
    for suffix in ("_image", "_mask", "_pl"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem
