"""Dataset ingestion, synthetic scenes, confusion-matrix metrics and colorizing.

Only binary PPM (P6) and PGM (P5) rasters are decoded in-tree. PNG datasets
can be converted once with any image tool, e.g.
``python -c "from PIL import Image; Image.open('a.png').save('a.ppm')"``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

IGNORE_INDEX = 255
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


@dataclass
class SegSample:
    """Normalized float32 image (3, H, W) with an (H, W) uint8 label map."""

    image: np.ndarray
    label: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise DataError(f"image {self.image.shape} and label {self.label.shape} disagree")


# rasters ------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes):
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported raster magic {magic!r}")
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DataError("truncated raster header")
        try:
            vals.append(int(m.group(1)))
        except ValueError as exc:
            raise DataError(f"bad raster header field {m.group(1)!r}") from exc
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DataError("raster header not terminated by whitespace")
    width, height, maxval = vals
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    return magic, width, height, pos + 1


def read_raster(path) -> np.ndarray:
    """Decode P6 to a (3, H, W) uint8 image, or P5 to an (H, W) uint8 map."""
    buf = Path(path).read_bytes()
    magic, w, h, off = _parse_header(buf)
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(buf) - off < need:
        raise DataError(f"{path}: payload has {len(buf) - off} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    if ch == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return arr.reshape(h, w).copy()


def write_raster(path, arr: np.ndarray) -> None:
    """Inverse of :func:`read_raster`."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"rasters are 8-bit, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[0] == 3:
        h, w = arr.shape[1:]
        header, payload = b"P6", arr.transpose(1, 2, 0).tobytes()
    elif arr.ndim == 2:
        h, w = arr.shape
        header, payload = b"P5", arr.tobytes()
    else:
        raise DataError(f"cannot write raster of shape {arr.shape}")
    Path(path).write_bytes(header + f"\n{w} {h}\n255\n".encode() + payload)


def normalize(image_u8: np.ndarray, mean=MEAN, std=STD) -> np.ndarray:
    img = image_u8.astype(np.float32) / 255.0
    return (img - np.asarray(mean, np.float32)[:, None, None]) / np.asarray(std, np.float32)[:, None, None]


# label schemes ----------------------------------------------------------------------

# cityscapes labelId -> trainId for the 19 evaluated classes
CITYSCAPES_TRAIN_IDS = {7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
                        23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18}
CITYSCAPES_CLASSES = ("road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
                      "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
                      "truck", "bus", "train", "motorcycle", "bicycle")
CITYSCAPES_PALETTE = ((128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156),
                      (190, 153, 153), (153, 153, 153), (250, 170, 30), (220, 220, 0),
                      (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
                      (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100), (0, 80, 100),
                      (0, 0, 230), (119, 11, 32))

# raw CamVid indices follow the alphabetical 32-class list of label_colors.txt
CAMVID_RAW_CLASSES = (
    "Animal", "Archway", "Bicyclist", "Bridge", "Building", "Car", "CartLuggagePram", "Child",
    "Column_Pole", "Fence", "LaneMkgsDriv", "LaneMkgsNonDriv", "Misc_Text", "MotorcycleScooter",
    "OtherMoving", "ParkingBlock", "Pedestrian", "Road", "RoadShoulder", "Sidewalk", "SignSymbol",
    "Sky", "SUVPickupTruck", "TrafficCone", "TrafficLight", "Train", "Tree", "Truck_Bus", "Tunnel",
    "VegetationMisc", "Void", "Wall")
CAMVID_CLASSES = ("Sky", "Building", "Column_Pole", "Road", "Sidewalk", "Tree", "SignSymbol",
                  "Fence", "Car", "Pedestrian", "Bicyclist")
CAMVID_TRAIN_IDS = {CAMVID_RAW_CLASSES.index(name): i for i, name in enumerate(CAMVID_CLASSES)}
CAMVID_PALETTE = ((128, 128, 128), (128, 0, 0), (192, 192, 128), (128, 64, 128), (0, 0, 192),
                  (128, 128, 0), (192, 128, 128), (64, 64, 128), (64, 0, 128), (64, 64, 0),
                  (0, 128, 192))

SCHEMES = {"cityscapes19": CITYSCAPES_TRAIN_IDS, "camvid11": CAMVID_TRAIN_IDS}
PALETTES = {"cityscapes19": CITYSCAPES_PALETTE, "camvid11": CAMVID_PALETTE}


def _lut(table: dict) -> np.ndarray:
    lut = np.full(256, IGNORE_INDEX, dtype=np.uint8)
    for raw, tid in table.items():
        lut[raw] = tid
    return lut


def map_labels(raw: np.ndarray, scheme: str) -> np.ndarray:
    """Raw dataset IDs to train IDs; unmapped IDs become ``IGNORE_INDEX``.

    ``scheme="identity"`` passes an already-mapped map through unchanged.
    """
    raw = np.asarray(raw)
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 255:
        raise DataError("raw label values must lie in [0, 255]")
    if scheme == "identity":
        return raw.astype(np.uint8)
    if scheme not in SCHEMES:
        raise DataError(f"unknown label scheme {scheme!r}")
    return _lut(SCHEMES[scheme])[raw.astype(np.uint8)]


def validate_labels(label: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> None:
    bad = (label >= num_classes) & (label != ignore_index)
    if bad.any():
        raise DataError(f"label value {int(label[bad][0])} outside [0, {num_classes})")


# dataset layouts ------------------------------------------------------------------

def load_sample(image_path, label_path, sample_id: str = "", scheme: str = "identity",
                num_classes: Optional[int] = None) -> SegSample:
    image = read_raster(image_path)
    label = read_raster(label_path)
    if image.ndim != 3 or label.ndim != 2:
        raise DataError(f"{image_path}: expected a P6 image and a P5 label map")
    label = map_labels(label, scheme)
    if num_classes is not None:
        validate_labels(label, num_classes)
    return SegSample(normalize(image), label, sample_id or Path(image_path).stem)


def read_manifest(path) -> list[dict]:
    """JSON list of {"image", "label", "id"} entries; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc["samples"] if isinstance(doc, dict) else doc
    out = []
    for i, e in enumerate(entries):
        if isinstance(e, (list, tuple)):
            e = dict(zip(("image", "label", "id"), e))
        if "image" not in e or "label" not in e:
            raise DataError(f"manifest entry {i} lacks image/label paths")
        out.append({"image": str(path.parent / e["image"]), "label": str(path.parent / e["label"]),
                    "id": e.get("id", f"sample{i}")})
    return out


def load_manifest(path, scheme: str = "identity", num_classes: Optional[int] = None) -> list[SegSample]:
    return [load_sample(e["image"], e["label"], e["id"], scheme, num_classes)
            for e in read_manifest(path)]


def cityscapes_pairs(root, split: str = "val") -> list[dict]:
    """Pair ``leftImg8bit/<split>/<city>/<x>_leftImg8bit.ppm`` with
    ``gtFine/<split>/<city>/<x>_gtFine_labelIds.pgm``."""
    root = Path(root)
    out = []
    for img in sorted((root / "leftImg8bit" / split).glob("*/*_leftImg8bit.ppm")):
        stem = img.name[: -len("_leftImg8bit.ppm")]
        lab = root / "gtFine" / split / img.parent.name / f"{stem}_gtFine_labelIds.pgm"
        if not lab.exists():
            raise DataError(f"missing label map for {img}")
        out.append({"image": str(img), "label": str(lab), "id": stem})
    if not out:
        raise DataError(f"no images under {root / 'leftImg8bit' / split}")
    return out


# synthetic scenes -------------------------------------------------------------------

def class_colors(classes: int, seed: int = 0) -> np.ndarray:
    """Distinct flat colors in [0, 1], one per class (fixed per seed)."""
    rng = np.random.default_rng([seed, 0xC0105])
    while True:
        cols = rng.uniform(0.05, 0.95, size=(classes, 3))
        d = np.linalg.norm(cols[:, None] - cols[None], axis=-1) + np.eye(classes)
        if d.min() > 0.25 or classes == 1:
            return cols


def synth_sample(index: int, size=(64, 64), classes: int = 3, seed: int = 0,
                 noise: float = 0.05, normalized: bool = True) -> SegSample:
    """Background plus one rectangle or disc per foreground class.

    Every foreground class is guaranteed a visible region; placement is
    redrawn (deterministically) if a later shape hides an earlier one.
    """
    h, w = size
    if classes < 2:
        raise DataError("synthetic scenes need at least 2 classes")
    if h % 32 or w % 32:
        raise DataError(f"synthetic size must be divisible by 32, got {size}")
    lo = max(4, min(h, w) // 8)
    hi = max(lo + 1, min(h, w) // 3)
    if hi >= min(h, w) or lo * lo * (classes - 1) > h * w // 2:
        raise DataError(f"{classes - 1} shapes cannot fit in a {h}x{w} scene")
    rng = np.random.default_rng([seed, index])
    colors = class_colors(classes, seed)
    yy, xx = np.mgrid[0:h, 0:w]
    min_area = max(4, lo * lo // 4)
    for _ in range(100):
        label = np.zeros((h, w), dtype=np.uint8)
        for c in range(1, classes):
            sh, sw = rng.integers(lo, hi + 1, size=2)
            y0 = int(rng.integers(0, h - sh + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            if rng.random() < 0.5:
                label[y0:y0 + sh, x0:x0 + sw] = c
            else:
                r = min(sh, sw) / 2.0
                cy, cx = y0 + sh / 2.0, x0 + sw / 2.0
                label[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r] = c
        counts = np.bincount(label.reshape(-1), minlength=classes)
        if counts[1:].min() >= min_area:
            break
    else:
        raise DataError(f"could not place {classes - 1} visible shapes in {h}x{w}")
    img = colors[label].transpose(2, 0, 1)
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if normalized:
        img = (img - np.asarray(MEAN)[:, None, None]) / np.asarray(STD)[:, None, None]
    return SegSample(img.astype(np.float32), label, f"synth{seed}_{index}")


def synth_dataset(n: int, size=(64, 64), classes: int = 3, seed: int = 0,
                  noise: float = 0.05, start: int = 0) -> list[SegSample]:
    return [synth_sample(start + i, size, classes, seed, noise) for i in range(n)]


# metrics ----------------------------------------------------------------------------

class ConfusionMatrix:
    """Rows are ground truth, columns predictions; ignore pixels are skipped."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, label: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        label = np.asarray(label).reshape(-1).astype(np.int64)
        if pred.shape != label.shape:
            raise DataError("prediction and label sizes differ")
        keep = label != self.ignore_index
        pred, label = pred[keep], label[keep]
        c = self.num_classes
        if label.size and (label.max() >= c or pred.max() >= c or pred.min() < 0):
            raise DataError("class index outside the confusion matrix")
        self.counts += np.bincount(label * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm) -> tuple[list[Optional[float]], float]:
    """Per-class IoU (None where a class never occurs) and their mean."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in per if v is not None]
    return per, float(np.mean(present)) if present else float("nan")


def evaluate(model, samples: Iterable[SegSample], num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for s in samples:
        cm.update(model.predict(s.image), s.label)
    return cm


# colorizing -------------------------------------------------------------------------

def get_palette(scheme: str) -> np.ndarray:
    if scheme not in PALETTES:
        raise DataError(f"unknown palette {scheme!r}")
    return np.asarray(PALETTES[scheme], dtype=np.uint8)


def colorize(pred: np.ndarray, palette: str | np.ndarray = "cityscapes19",
             ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """(H, W) label map to a (3, H, W) uint8 image; ignore pixels are black."""
    pal = get_palette(palette) if isinstance(palette, str) else np.asarray(palette, np.uint8)
    pred = np.asarray(pred).astype(np.int64)
    ign = pred == ignore_index
    bad = (~ign) & ((pred < 0) | (pred >= len(pal)))
    if bad.any():
        raise DataError(f"label {int(pred[bad][0])} outside the {len(pal)}-color palette")
    out = pal[np.where(ign, 0, pred)]
    out[ign] = 0
    return out.transpose(2, 0, 1).copy()


def decolorize(img: np.ndarray, palette: str | np.ndarray = "cityscapes19",
               ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Inverse palette lookup; black maps back to ``ignore_index``."""
    pal = get_palette(palette) if isinstance(palette, str) else np.asarray(palette, np.uint8)
    key = lambda a: (a[..., 0].astype(np.int64) << 16) | (a[..., 1].astype(np.int64) << 8) | a[..., 2]
    codes = key(np.asarray(img).transpose(1, 2, 0))
    lut = {int(k): i for i, k in enumerate(key(pal))}
    lut[0] = ignore_index
    out = np.vectorize(lambda c: lut.get(int(c), -1), otypes=[np.int64])(codes)
    if (out < 0).any():
        raise DataError("color not present in palette")
    return out.astype(np.uint8)


def thread_count(default: int = 1) -> int:
    """Worker bound from ``BDG_THREADS``."""
    try:
        return max(1, int(os.environ.get("BDG_THREADS", default)))
    except ValueError:
        return default
