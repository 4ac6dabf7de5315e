"""Datasets: manifests, splitting, image decoding, cropping, resizing,
preprocessing, augmentation, and a procedural stand-in dataset."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, IntegrityError, UsageError

CLASSES = ("plastic_bottles", "aluminum_cans", "paper_cardboard")
SPLITS = ("train", "val", "test")
IMAGENET_MEAN_RGB = (123.68, 116.779, 103.939)
SCHEMES = ("resnet_mean_subtract", "mobilenet_unit_range")
AUGMENTATIONS = ("hflip", "random_crop", "random_zoom", "random_rotate")
IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass
class SampleRecord:
    path: str
    label: str
    bbox: Optional[Tuple[int, int, int, int]] = None
    split: Optional[str] = None

    def __post_init__(self):
        if self.bbox is not None:
            self.bbox = tuple(int(v) for v in self.bbox)
            if len(self.bbox) != 4 or self.bbox[2] < 1 or self.bbox[3] < 1:
                raise IntegrityError(f"{self.path}: bbox {self.bbox} has no area")
        if self.split is not None and self.split not in SPLITS:
            raise UsageError(f"{self.path}: unknown split {self.split!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox) if self.bbox is not None else None
        return d


@dataclass
class Manifest:
    records: List[SampleRecord]
    class_names: Tuple[str, ...] = CLASSES
    note: str = ""

    def split(self, name: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def label_index(self, label: str) -> int:
        try:
            return self.class_names.index(label)
        except ValueError:
            raise UsageError(f"label {label!r} not in classes {self.class_names}") from None

    def write(self, path) -> None:
        """One JSON object per line; paths are stored as given."""
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, class_names: Sequence[str] = CLASSES) -> Manifest:
    """Read a JSON-lines manifest; relative image paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from None
    records = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{i}: {e}") from None
        p = Path(d["path"])
        if not p.is_absolute():
            p = path.parent / p
        records.append(SampleRecord(str(p), d["label"], d.get("bbox"), d.get("split")))
    names = list(class_names)
    for r in records:
        if r.label not in names:
            names.append(r.label)
    return Manifest(records, tuple(names))


def split_manifest(records: Sequence[SampleRecord], ratios=(0.6, 0.2, 0.2), seed: int = 0,
                   class_names: Sequence[str] = CLASSES) -> Manifest:
    """Stratified, seed-deterministic train/val/test assignment."""
    if not records:
        raise UsageError("cannot split an empty record list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise UsageError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    names = list(class_names)
    for r in records:
        if r.label not in names:
            names.append(r.label)
    rng = np.random.default_rng(seed)
    out: List[SampleRecord] = []
    for label in names:
        group = [r for r in records if r.label == label]
        if not group:
            continue
        order = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(ratios[0] * n))
        n_val = min(int(round(ratios[1] * n)), n - n_train)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            r = group[idx]
            out.append(SampleRecord(r.path, r.label, r.bbox, split))
    return Manifest(out, tuple(names))


# ---------------------------------------------------------------------------
# images

def load_image(path) -> np.ndarray:
    """Decode a PNG or PPM file to an H x W x 3 uint8 RGB array."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise FormatError(f"{path}: unsupported image format (use PNG or PPM)")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from None


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise FormatError(f"{path}: unsupported image format (use PNG or PPM)")
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path)


def crop_to_bbox(image: np.ndarray, record: SampleRecord) -> np.ndarray:
    if record.bbox is None:
        raise UsageError(f"{record.path}: record has no bbox to crop to")
    x, y, w, h = record.bbox
    H, W = image.shape[:2]
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > W or y + h > H:
        raise IntegrityError(f"{record.path}: bbox {record.bbox} outside {W}x{H} image")
    return image[y:y + h, x:x + w].copy()


def resize_bilinear(image: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise UsageError(f"resize target must be positive, got {target}")
    h, w = image.shape[:2]
    if (h, w) == (th, tw):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    img = image.astype(np.float64)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy[:, None, None]) + bot * fy[:, None, None]
    if image.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def preprocess(image: np.ndarray, scheme: str) -> np.ndarray:
    """Map a uint8 RGB image (or batch) to the network's float input range."""
    x = np.asarray(image, dtype=np.float32)
    if scheme == "resnet_mean_subtract":
        x = x - np.asarray(IMAGENET_MEAN_RGB, dtype=np.float32)
    elif scheme == "mobilenet_unit_range":
        x = x / np.float32(127.5) - np.float32(1.0)
    else:
        raise UsageError(f"unknown preprocessing scheme {scheme!r}")
    return x[None] if x.ndim == 3 else x


def _affine_about_centre(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``image`` with output->input matrix about the image centre."""
    h, w = image.shape[:2]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = c - matrix @ c
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        res = ndimage.affine_transform(image[..., ch].astype(np.float64), matrix, offset,
                                       order=1, mode="nearest")
        out[..., ch] = np.clip(np.floor(res + 0.5), 0, 255)
    return out


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, ops: Iterable[str], seed=0, crop_min: float = 0.8,
            zoom_range: Tuple[float, float] = (0.9, 1.1), max_rotate: float = 15.0,
            force_flip: Optional[bool] = None) -> np.ndarray:
    """Seeded random flip/crop/zoom/rotation; output keeps the input's size."""
    ops = set(ops)
    unknown = ops - set(AUGMENTATIONS)
    if unknown:
        raise UsageError(f"unknown augmentations {sorted(unknown)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = image.shape[:2]
    out = image
    if "hflip" in ops:
        flip = rng.random() < 0.5
        if force_flip is not None:
            flip = force_flip
        if flip:
            out = hflip(out)
    if "random_crop" in ops:
        ch = max(1, int(round(h * rng.uniform(crop_min, 1.0))))
        cw = max(1, int(round(w * rng.uniform(crop_min, 1.0))))
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        out = resize_bilinear(out[y:y + ch, x:x + cw], (h, w))
    zoom = rng.uniform(*zoom_range) if "random_zoom" in ops else 1.0
    angle = rng.uniform(-max_rotate, max_rotate) if "random_rotate" in ops else 0.0
    if zoom != 1.0 or angle != 0.0:
        t = math.radians(angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        out = _affine_about_centre(out, rot / zoom)
    return out if out is not image else image.copy()


# ---------------------------------------------------------------------------
# in-memory datasets

@dataclass
class Dataset:
    images: np.ndarray             # N x H x W x 3 uint8
    labels: np.ndarray             # N int64
    class_names: Tuple[str, ...] = CLASSES
    paths: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_names,
                       [self.paths[i] for i in idx] if self.paths else [])


def load_split(manifest: Manifest, split: str, resolution: int, crop: bool = True) -> Dataset:
    records = manifest.split(split)
    if not records:
        raise UsageError(f"manifest has no {split!r} records")
    images = np.empty((len(records), resolution, resolution, 3), np.uint8)
    labels = np.empty(len(records), np.int64)
    for i, r in enumerate(records):
        img = load_image(r.path)
        if crop and r.bbox is not None:
            img = crop_to_bbox(img, r)
        images[i] = resize_bilinear(img, (resolution, resolution))
        labels[i] = manifest.label_index(r.label)
    return Dataset(images, labels, manifest.class_names, [r.path for r in records])


# ---------------------------------------------------------------------------
# procedural stand-in dataset

def _palette(rng, base):
    return np.clip(np.asarray(base) + rng.normal(0, 18, 3), 0, 255)


def synth_image(label: int, rng: np.random.Generator, size: int = 128):
    """One procedural image and its object bbox (x, y, w, h).

    Class 0 draws a filled ellipse, class 1 stripes, class 2 a checkerboard,
    each inside a jittered box over a noisy grey background.
    """
    bg = rng.uniform(90, 170)
    img = np.full((size, size, 3), bg) + rng.normal(0, 8, (size, size, 3))
    bw = int(rng.integers(size // 2, int(size * 0.85)))
    bh = int(rng.integers(size // 2, int(size * 0.85)))
    x0 = int(rng.integers(0, size - bw + 1))
    y0 = int(rng.integers(0, size - bh + 1))
    yy, xx = np.mgrid[0:bh, 0:bw]
    kind = label % 3
    if kind == 0:
        fg = _palette(rng, (200, 60, 50))
        cy, cx = (bh - 1) / 2, (bw - 1) / 2
        mask = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    elif kind == 1:
        fg = _palette(rng, (60, 90, 210))
        period = rng.uniform(6, 14)
        theta = rng.uniform(0, np.pi)
        phase = np.cos(theta) * xx + np.sin(theta) * yy
        mask = (phase % period) < period / 2
    else:
        fg = _palette(rng, (215, 190, 60))
        cell = int(rng.integers(6, 14))
        mask = ((yy // cell + xx // cell) % 2) == 0
    patch = img[y0:y0 + bh, x0:x0 + bw]
    patch[mask] = fg + rng.normal(0, 10, (int(mask.sum()), 3))
    if kind != 0:
        patch[~mask] = fg * 0.45 + bg * 0.55
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), (x0, y0, bw, bh)


def synth_dataset(out_dir, num_classes: int = 3, per_class: int = 100, seed: int = 0,
                  size: int = 128, ratios=(0.6, 0.2, 0.2)) -> Manifest:
    """Write PNG images plus ``manifest.jsonl`` and return the split manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = list(CLASSES[:num_classes]) + [f"class_{i}" for i in range(len(CLASSES), num_classes)]
    rng = np.random.default_rng(seed)
    records = []
    for c, name in enumerate(names):
        for i in range(per_class):
            img, bbox = synth_image(c, rng, size)
            rel = f"images/{name}_{i:05d}.png"
            save_image(img, out_dir / rel)
            records.append(SampleRecord(rel, name, bbox))
    manifest = split_manifest(records, ratios, seed, names)
    manifest.write(out_dir / "manifest.jsonl")
    return read_manifest(out_dir / "manifest.jsonl", names)
