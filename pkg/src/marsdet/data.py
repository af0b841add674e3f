"""
Dataset ingestion and preprocessing.

Images are handled as uint8 RGB arrays of shape (H, W, 3). Boxes are
(x_min, y_min, x_max, y_max) in pixel-edge coordinates of the image they
belong to.
"""
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .detector import URPC_CLASSES
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

CLASSES = URPC_CLASSES
DOMAINS = ("original", "green_cast", "blue_cast", "haze", "blur", "low_contrast", "noise")
GRAY = 128
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "classes", "domains", "records"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "split": {"type": "string"},
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "domains": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "image", "width", "height", "objects", "domain_id"],
                "properties": {
                    "image_id": {"type": "string"},
                    "image": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "domain_id": {"type": "integer", "minimum": 0},
                    "objects": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["class", "box"],
                            "properties": {
                                "class": {"type": "string"},
                                "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                            },
                        },
                    },
                    "augment": {
                        "type": ["object", "null"],
                        "required": ["domain_id", "strength", "seed"],
                        "properties": {
                            "domain_id": {"type": "integer"},
                            "strength": {"type": "number"},
                            "seed": {"type": "integer"},
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class Augment:
    domain_id: int
    strength: float
    seed: int


@dataclass
class AnnotatedImage:
    image_id: str
    image_ref: Union[str, np.ndarray]
    width: int
    height: int
    objects: List[Tuple[str, Tuple[float, float, float, float]]]
    domain_id: int = 0
    augment: Optional[Augment] = None

    def boxes(self):
        return np.array([b for _, b in self.objects], dtype=np.float64).reshape(-1, 4)

    def class_ids(self, classes=CLASSES):
        return np.array([classes.index(c) for c, _ in self.objects], dtype=np.int64)


@dataclass
class DatasetManifest:
    split: str = "train"
    records: List[AnnotatedImage] = field(default_factory=list)
    classes: Tuple[str, ...] = CLASSES
    domains: Tuple[str, ...] = DOMAINS
    root: Optional[Path] = None
    dropped_boxes: int = 0

    def __len__(self):
        return len(self.records)

    def validate(self):
        for r in self.records:
            if not 0 <= r.domain_id < len(self.domains):
                raise DataError(f"{r.image_id}: domain id {r.domain_id} outside [0, {len(self.domains)})")
            for name, (x0, y0, x1, y1) in r.objects:
                if name not in self.classes:
                    raise DataError(f"{r.image_id}: unknown class {name!r}")
                if not (0 <= x0 < x1 <= r.width and 0 <= y0 < y1 <= r.height):
                    raise DataError(f"{r.image_id}: invalid box {(x0, y0, x1, y1)} for {r.width}x{r.height} image")
        return self

    def load_image(self, record):
        """Pixels of a record with its photometric augmentation applied."""
        ref = record.image_ref
        if isinstance(ref, np.ndarray):
            img = ref
        else:
            path = Path(ref)
            if not path.is_absolute() and self.root is not None:
                path = self.root / path
            try:
                with Image.open(path) as im:
                    img = np.asarray(im.convert("RGB"))
            except (OSError, FileNotFoundError) as e:
                raise DataError(f"cannot read image {path}: {e}") from e
        if record.augment is not None:
            a = record.augment
            img = apply_domain_augmentation(img, a.domain_id, a.strength, a.seed)
        return img

    def to_dict(self, image_paths=None):
        recs = []
        for r in self.records:
            image = None
            if image_paths:
                # augmented copies "<id>@<domain>" share their source's pixels
                image = image_paths.get(r.image_id, image_paths.get(r.image_id.split("@")[0]))
            if image is None:
                if isinstance(r.image_ref, np.ndarray):
                    raise DataError(f"{r.image_id}: in-memory image has no path; save the pixels first")
                image = str(r.image_ref)
            recs.append({
                "image_id": r.image_id,
                "image": image,
                "width": int(r.width),
                "height": int(r.height),
                "domain_id": int(r.domain_id),
                "objects": [{"class": c, "box": [float(v) for v in b]} for c, b in r.objects],
                "augment": None if r.augment is None else {
                    "domain_id": r.augment.domain_id, "strength": float(r.augment.strength), "seed": r.augment.seed,
                },
            })
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "classes": list(self.classes),
            "domains": list(self.domains),
            "records": recs,
        }

    def save(self, path, image_paths=None):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(image_paths), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d, root=None):
        try:
            jsonschema.validate(d, MANIFEST_SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise DataError(f"manifest schema violation at {where}: {e.message}") from e
        records = []
        for r in d["records"]:
            aug = r.get("augment")
            records.append(AnnotatedImage(
                image_id=r["image_id"],
                image_ref=r["image"],
                width=r["width"],
                height=r["height"],
                objects=[(o["class"], tuple(float(v) for v in o["box"])) for o in r["objects"]],
                domain_id=r["domain_id"],
                augment=None if aug is None else Augment(aug["domain_id"], float(aug["strength"]), aug["seed"]),
            ))
        m = cls(d.get("split", "train"), records, tuple(d["classes"]), tuple(d["domains"]), root)
        return m.validate()

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {e.lineno}: {e.msg}") from e
        return cls.from_dict(d, root=path.parent)


# --- VOC-style annotations -------------------------------------------------

def _find_image(image_dir, xml_path, filename):
    candidates = []
    if filename:
        candidates.append(image_dir / filename)
        stem = Path(filename).stem
    else:
        stem = xml_path.stem
    candidates += [image_dir / (stem + s) for s in IMAGE_SUFFIXES]
    candidates += [image_dir / (stem + s.upper()) for s in IMAGE_SUFFIXES]
    for c in candidates:
        if c.is_file():
            return c
    return None


def parse_voc_annotations(root_dir, classes=CLASSES, split="train"):
    """Read a directory of VOC XML files (flat, or Annotations/ + JPEGImages/)."""
    root = Path(root_dir)
    ann_dir = root / "Annotations" if (root / "Annotations").is_dir() else root
    img_dir = root / "JPEGImages" if (root / "JPEGImages").is_dir() else ann_dir
    records = []
    unknown = {}
    dropped = 0
    for xml_path in sorted(ann_dir.glob("*.xml")):
        try:
            tree = ET.parse(xml_path)
        except ET.ParseError as e:
            line, col = e.position
            raise DataError(f"{xml_path}: line {line}, column {col}: malformed XML ({e})") from e
        ann = tree.getroot()
        filename = (ann.findtext("filename") or "").strip()
        img_path = _find_image(img_dir, xml_path, filename)
        if img_path is None:
            raise DataError(f"{xml_path}: image {filename or xml_path.stem!r} not found in {img_dir}")
        size = ann.find("size")
        width = height = None
        if size is not None:
            try:
                width, height = int(float(size.findtext("width"))), int(float(size.findtext("height")))
            except (TypeError, ValueError):
                width = height = None
        if not width or not height:
            with Image.open(img_path) as im:
                width, height = im.size
        objects = []
        for obj in ann.iter("object"):
            name = (obj.findtext("name") or "").strip().lower()
            if name not in classes:
                unknown.setdefault(name, []).append(xml_path.name)
                continue
            bb = obj.find("bndbox")
            try:
                x0, y0, x1, y1 = (float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
            except (AttributeError, TypeError, ValueError) as e:
                raise DataError(f"{xml_path}: object {name!r} has an unreadable bndbox") from e
            x0, x1 = min(max(x0, 0.0), width), min(max(x1, 0.0), width)
            y0, y1 = min(max(y0, 0.0), height), min(max(y1, 0.0), height)
            if x1 <= x0 or y1 <= y0:
                dropped += 1
                continue
            objects.append((name, (x0, y0, x1, y1)))
        records.append(AnnotatedImage(xml_path.stem, str(img_path.relative_to(root)), width, height, objects))
    if unknown:
        listing = ", ".join(f"{n!r} (in {', '.join(sorted(set(f))[:3])})" for n, f in sorted(unknown.items()))
        raise DataError(f"unknown class names: {listing}")
    if dropped:
        log.warning("dropped %d zero-area boxes under %s", dropped, root)
    return DatasetManifest(split, records, tuple(classes), DOMAINS, root, dropped)


# --- letterbox ---------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int

    def apply(self, boxes):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
        b[:, [0, 2]] = b[:, [0, 2]] * self.scale + self.pad_x
        b[:, [1, 3]] = b[:, [1, 3]] * self.scale + self.pad_y
        return b

    def invert(self, boxes):
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
        b[:, [0, 2]] = (b[:, [0, 2]] - self.pad_x) / self.scale
        b[:, [1, 3]] = (b[:, [1, 3]] - self.pad_y) / self.scale
        return b


def letterbox(image, target=416):
    """Aspect-preserving resize onto a gray target x target canvas."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError(f"letterbox needs a non-empty (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    scale = target / max(w, h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    pad_x, pad_y = (target - nw) // 2, (target - nh) // 2
    if (nw, nh) == (w, h):
        resized = image
    else:
        resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    canvas = np.full((target, target, 3), GRAY, dtype=np.uint8)
    canvas[pad_y:pad_y + nh, pad_x:pad_x + nw] = resized
    return canvas, LetterboxTransform(scale, pad_x, pad_y)


# --- domain degradations -----------------------------------------------------

def apply_domain_augmentation(image, domain_id, strength=1.0, seed=0):
    """Photometric degradation for one of the 7 domains (0 is the identity).

    1 green cast, 2 blue cast, 3 haze, 4 gaussian blur, 5 contrast
    reduction, 6 sensor noise. Output is uint8 with the input's shape.
    """
    if domain_id not in range(len(DOMAINS)):
        raise ConfigError(f"unknown domain id {domain_id}; expected 0..{len(DOMAINS) - 1}")
    image = np.asarray(image)
    if domain_id == 0:
        return image
    s = float(np.clip(strength, 0.0, 1.0))
    x = image.astype(np.float64)
    if domain_id == 1:
        # red absorbed, green boosted
        x = x * np.array([1 - 0.7 * s, 1.0, 1 - 0.4 * s]) + np.array([0.0, 60.0, 10.0]) * s
    elif domain_id == 2:
        x = x * np.array([1 - 0.7 * s, 1 - 0.3 * s, 1.0]) + np.array([0.0, 15.0, 70.0]) * s
    elif domain_id == 3:
        t = 1 - 0.55 * s
        veil = np.array([200.0, 215.0, 215.0])
        x = x * t + veil * (1 - t)
    elif domain_id == 4:
        sigma = 2.5 * s
        if sigma > 0:
            x = gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
    elif domain_id == 5:
        mean = x.mean()
        x = mean + (x - mean) * (1 - 0.6 * s)
    elif domain_id == 6:
        rng = np.random.default_rng([seed, domain_id, int(round(s * 1e6))])
        x = x + rng.normal(0.0, 25.0 * s, size=x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def build_augmented_dataset(manifest: DatasetManifest, strengths=1.0, seed=0):
    """Original records plus one degraded copy per record for each domain 1..6.

    ``strengths`` is a float or a mapping/sequence indexed by domain id.
    Degradations are applied lazily at load time.
    """
    def strength_for(k):
        if isinstance(strengths, dict):
            return float(strengths.get(k, 1.0))
        if isinstance(strengths, (list, tuple)):
            return float(strengths[k] if len(strengths) == len(DOMAINS) else strengths[k - 1])
        return float(strengths)

    records = list(manifest.records)
    for k in range(1, len(DOMAINS)):
        for n, r in enumerate(manifest.records):
            records.append(AnnotatedImage(
                image_id=f"{r.image_id}@{DOMAINS[k]}",
                image_ref=r.image_ref,
                width=r.width,
                height=r.height,
                objects=list(r.objects),
                domain_id=k,
                augment=Augment(k, strength_for(k), seed * 1_000_003 + n),
            ))
    return DatasetManifest(manifest.split, records, manifest.classes, DOMAINS, manifest.root)


# --- synthetic shapes --------------------------------------------------------

CLASS_COLORS = {
    "echinus": (75, 25, 90),
    "starfish": (235, 120, 35),
    "holothurian": (95, 60, 30),
    "scallop": (235, 215, 175),
    "waterweeds": (60, 200, 70),
}


def _draw_shape(draw, name, cx, cy, r, rng):
    if name == "echinus":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif name == "starfish":
        rot = rng.uniform(0, 2 * math.pi)
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else 0.42 * r
            ang = rot + k * math.pi / 5
            pts.append((cx + rad * math.cos(ang), cy + rad * math.sin(ang)))
        draw.polygon(pts, fill=255)
    elif name == "holothurian":
        ang = rng.uniform(0, math.pi)
        half = 0.65 * r
        thick = 0.35 * r
        dx, dy = half * math.cos(ang), half * math.sin(ang)
        draw.line([(cx - dx, cy - dy), (cx + dx, cy + dy)], fill=255, width=max(1, int(round(2 * thick))))
        for ex, ey in ((cx - dx, cy - dy), (cx + dx, cy + dy)):
            draw.ellipse([ex - thick, ey - thick, ex + thick, ey + thick], fill=255)
    elif name == "scallop":
        start = rng.uniform(0, 360)
        draw.pieslice([cx - r, cy - r, cx + r, cy + r], start, start + 150, fill=255)
        draw.ellipse([cx - 0.3 * r, cy - 0.3 * r, cx + 0.3 * r, cy + 0.3 * r], fill=255)
    elif name == "waterweeds":
        base_y = cy + r
        for k in range(4):
            x = cx + (k - 1.5) * 0.45 * r
            pts = [(x + 0.25 * r * math.sin(t * 2.2 + k), base_y - t * 2 * r / 4) for t in range(5)]
            draw.line(pts, fill=255, width=max(2, int(r / 5)))
    else:
        raise ValueError(f"no synthetic shape for class {name!r}")


def _background(size, rng):
    ys = np.linspace(0, 1, size)[:, None, None]
    top, bottom = np.array([30.0, 110.0, 140.0]), np.array([10.0, 55.0, 90.0])
    bg = top * (1 - ys) + bottom * ys + np.zeros((size, size, 3))
    bg = bg + rng.normal(0, 4.0, size=bg.shape)
    return np.clip(np.rint(bg), 0, 255).astype(np.uint8)


def render_synthetic_image(objects, size, rng):
    """Render (class_name, cx, cy, r) objects; returns (pixels, exact boxes)."""
    canvas = Image.fromarray(_background(size, rng))
    boxes = []
    for name, cx, cy, r in objects:
        mask = Image.new("L", (size, size), 0)
        _draw_shape(ImageDraw.Draw(mask), name, cx, cy, r, rng)
        bbox = mask.getbbox()
        canvas.paste(CLASS_COLORS[name], (0, 0, size, size), mask)
        boxes.append(tuple(float(v) for v in bbox) if bbox else None)
    return np.asarray(canvas), boxes


def generate_synthetic_dataset(n, image_size=96, seed=0, split="train"):
    """Images of 1-4 non-overlapping shapes, one shape per URPC class.

    Classes are drawn from a shuffled bag refilled every 5 draws, so every
    class appears as soon as 5 objects have been placed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    bag = []
    records = []
    for idx in range(n):
        count = int(rng.integers(1, 5))
        placed = []
        for _ in range(count):
            if not bag:
                bag = list(rng.permutation(len(CLASSES)))
            name = CLASSES[bag.pop()]
            for _attempt in range(100):
                r = rng.uniform(0.09, 0.2) * image_size
                cx = rng.uniform(r + 1, image_size - r - 1)
                cy = rng.uniform(r + 1, image_size - r - 1)
                box = (cx - r, cy - r, cx + r, cy + r)
                if all(_separated(box, p[4]) for p in placed):
                    placed.append((name, cx, cy, r, box))
                    break
        pixels, boxes = render_synthetic_image([p[:4] for p in placed], image_size, rng)
        objects = [(p[0], b) for p, b in zip(placed, boxes) if b is not None]
        records.append(AnnotatedImage(f"synth_{seed}_{idx:05d}", pixels, image_size, image_size, objects))
    return DatasetManifest(split, records, CLASSES, DOMAINS)


def _separated(a, b, margin=2.0):
    return a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]


# --- tensors for training / inference ----------------------------------------

def to_tensor(canvas):
    return torch.from_numpy(np.ascontiguousarray(canvas.transpose(2, 0, 1))).float() / 255.0


class DetectionDataset:
    """Letterboxed tensors + canvas-space targets for a manifest."""

    def __init__(self, manifest: DatasetManifest, input_size, cache=True):
        self.manifest = manifest
        self.input_size = input_size
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.manifest.records)

    def __getitem__(self, i):
        if self.cache is not None and i in self.cache:
            return self.cache[i]
        rec = self.manifest.records[i]
        img = self.manifest.load_image(rec)
        canvas, tf = letterbox(img, self.input_size)
        boxes = tf.apply(rec.boxes())
        np.clip(boxes, 0, self.input_size, out=boxes)
        item = {
            "image": to_tensor(canvas),
            "boxes": boxes,
            "labels": rec.class_ids(self.manifest.classes),
            "domain_id": rec.domain_id,
            "image_id": rec.image_id,
            "transform": tf,
            "record": rec,
        }
        if self.cache is not None:
            self.cache[i] = item
        return item
