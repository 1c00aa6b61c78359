"""Face-image ingestion, mirror augmentation and class-balanced batching.

Images are center-cropped (or cropped to user-supplied boxes), resized
bilinearly and mapped to [-1, 1]. Attributes live in a CSV manifest whose
columns follow the attribute schema below; values are lower-snake-case.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .imageops import IMAGE_SUFFIXES, hflip, resize, to_unit_range
from .rng import RngStream, as_stream

logger = logging.getLogger(__name__)

ATTRIBUTE_SCHEMA: dict[str, tuple[str, ...]] = {
    "age": ("early_adulthood", "middle_aged", "teenager", "adult", "kid", "senior", "retirement", "baby"),
    "ethnicity": ("african_american", "white", "east_asian", "south_asian"),
    "eyes_color": ("brown", "other", "blue", "green"),
    "facial_hair": (
        "no", "light_mustache", "light_goatee", "light_beard", "thick_goatee", "thick_beard", "thick_mustache",
    ),
    "gender": ("male", "female"),
    "glasses": ("no", "eyeglasses", "sunglasses"),
    "hair_color": ("black", "brown", "other", "blonde", "white", "red"),
    "hair_covered": ("no", "turban", "cap", "helmet"),
    "hair_style": ("short_straight", "long_straight", "short_curly", "other", "bald", "long_curly"),
    "smile": ("yes", "no"),
    "visible_forehead": ("yes", "no"),
}
ATTRIBUTES = tuple(ATTRIBUTE_SCHEMA)
MANIFEST_COLUMNS = ("path", "source_id", "mirrored", *ATTRIBUTES)


class SchemaError(ValueError):
    pass


def validate_attributes(attrs: dict[str, str]) -> dict[str, str]:
    out = {}
    for key, value in attrs.items():
        if key not in ATTRIBUTE_SCHEMA:
            raise SchemaError(f"unknown attribute {key!r}")
        if value in ("", None):
            continue
        if value not in ATTRIBUTE_SCHEMA[key]:
            raise SchemaError(f"value {value!r} not allowed for {key!r}; expected one of {ATTRIBUTE_SCHEMA[key]}")
        out[key] = value
    return out


@dataclass(frozen=True)
class SampleRecord:
    path: str
    source_id: str
    mirrored: bool = False
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    image_size: int
    images: np.ndarray | None = None  # (len(records), 3, s, s) in [-1, 1], when loaded
    skipped: int = 0

    @property
    def class_counts(self) -> dict[str, dict[str, int]]:
        """Per-attribute class counts, most frequent first."""
        out: dict[str, dict[str, int]] = {}
        for attr in ATTRIBUTES:
            c = Counter(r.attributes[attr] for r in self.records if attr in r.attributes)
            if c:
                out[attr] = dict(sorted(c.items(), key=lambda kv: (-kv[1], kv[0])))
        return out

    def __len__(self) -> int:
        return len(self.records)

    def write(self, manifest_path: str | Path, stats_path: str | Path | None = None) -> None:
        with open(manifest_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                w.writerow([r.path, r.source_id, int(r.mirrored), *(r.attributes.get(a, "") for a in ATTRIBUTES)])
        if stats_path is not None:
            stats = {"image_size": self.image_size, "records": len(self.records), "classes": self.class_counts}
            Path(stats_path).write_text(json.dumps(stats, indent=2) + "\n")

    @classmethod
    def read(cls, manifest_path: str | Path, image_size: int, load: bool = False) -> "DatasetManifest":
        records = []
        with open(manifest_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise SchemaError(f"{manifest_path}: unexpected columns {reader.fieldnames}")
            for row in reader:
                attrs = validate_attributes({a: row[a] for a in ATTRIBUTES})
                records.append(SampleRecord(row["path"], row["source_id"], row["mirrored"] == "1", attrs))
        manifest = cls(records, image_size)
        if load:
            manifest.images = np.stack([load_record(r, image_size) for r in records])
        return manifest


def center_box(width: int, height: int) -> tuple[int, int, int, int]:
    side = min(width, height)
    x0, y0 = (width - side) // 2, (height - side) // 2
    return x0, y0, x0 + side, y0 + side


def prepare_image(path: str | Path, size: int, box: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Crop (center square unless ``box`` is given), resize, scale to [-1, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
    box = box or center_box(*rgb.size)
    arr = np.asarray(rgb.crop(box)).transpose(2, 0, 1)
    out = to_unit_range(arr)
    if out.shape[1:] != (size, size):
        out = np.clip(resize(out, (size, size)), -1.0, 1.0)
    return out.astype(np.float32)


def load_record(record: SampleRecord, size: int, box=None) -> np.ndarray:
    img = prepare_image(record.path, size, box)
    return hflip(img) if record.mirrored else img


def _read_sidecar(path: Path) -> dict[str, dict[str, str]]:
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            name = row.pop("filename", None) or row.pop("path", None)
            if name is None:
                raise SchemaError(f"{path}: attribute CSV needs a 'filename' column")
            table[Path(name).name] = row
    return table


def ingest(
    directory: str | Path,
    target_size: int,
    attributes_csv: str | Path | None = None,
    boxes: dict[str, tuple[int, int, int, int]] | None = None,
) -> DatasetManifest:
    """Decode every image in ``directory`` into a manifest with loaded pixels.

    Undecodable files are skipped with a warning. An attribute value outside
    the schema raises :class:`SchemaError`. The sidecar CSV has a
    ``filename`` column, any schema attributes, and optionally
    ``x0,y0,x1,y1`` crop boxes.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if directory.is_dir() else []
    if not paths:
        raise ValueError(f"no images found in {directory}")
    sidecar = _read_sidecar(Path(attributes_csv)) if attributes_csv else {}
    boxes = dict(boxes or {})
    records, images, skipped = [], [], 0
    for p in paths:
        row = dict(sidecar.get(p.name, {}))
        box = boxes.get(p.name)
        if box is None and all(row.get(k) not in (None, "") for k in ("x0", "y0", "x1", "y1")):
            box = tuple(int(row[k]) for k in ("x0", "y0", "x1", "y1"))
        for k in ("x0", "y0", "x1", "y1"):
            row.pop(k, None)
        attrs = validate_attributes(row)
        try:
            img = prepare_image(p, target_size, box)
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping %s: %s", p, exc)
            skipped += 1
            continue
        records.append(SampleRecord(str(p), p.stem, False, attrs))
        images.append(img)
    if not records:
        raise ValueError(f"none of the {len(paths)} files in {directory} could be decoded")
    if skipped:
        logger.warning("skipped %d undecodable file(s)", skipped)
    return DatasetManifest(records, target_size, np.stack(images), skipped)


def mirror_augment(manifest: DatasetManifest) -> DatasetManifest:
    """Append a horizontally flipped copy of every source without one."""
    have = {r.source_id for r in manifest.records if r.mirrored}
    new_records = list(manifest.records)
    new_images = [] if manifest.images is not None else None
    for i, r in enumerate(manifest.records):
        if r.mirrored or r.source_id in have:
            continue
        new_records.append(replace(r, mirrored=True))
        have.add(r.source_id)
        if new_images is not None:
            new_images.append(hflip(manifest.images[i]))
    images = manifest.images
    if new_images:
        images = np.concatenate([manifest.images, np.stack(new_images)])
    return DatasetManifest(new_records, manifest.image_size, images, manifest.skipped)


def balanced_batches(
    manifest: DatasetManifest,
    attribute: str,
    batch_size: int,
    rng: RngStream | int | None = None,
    epochs: int | None = 1,
    classes: tuple[str, ...] | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Yield ``(indices, images)`` batches with uniform class proportions.

    Each class draws from its own reshuffled cycle, so small classes are
    oversampled. A batch gives ``batch_size // K`` slots to each of the K
    classes and the remainder to classes in rotating order, so per-batch
    counts differ by at most one. An epoch lasts until the largest class has
    been visited once. ``epochs=None`` streams forever.
    """
    if attribute not in ATTRIBUTE_SCHEMA:
        raise SchemaError(f"unknown attribute {attribute!r}")
    classes = tuple(classes or ATTRIBUTE_SCHEMA[attribute])
    members = {c: np.array([i for i, r in enumerate(manifest.records) if r.attributes.get(attribute) == c]) for c in classes}
    for c, idx in members.items():
        if idx.size == 0:
            raise ValueError(f"class {c!r} of {attribute!r} has no samples")
    k = len(classes)
    if batch_size < k:
        raise ValueError(f"batch_size {batch_size} smaller than the {k} classes")
    rng = as_stream(rng)
    largest = max(idx.size for idx in members.values())
    per_epoch = -(-largest * k // batch_size)
    cursors = {c: (rng.permutation(members[c].size), 0) for c in classes}
    rotation = 0
    epoch = 0
    while epochs is None or epoch < epochs:
        for _ in range(per_epoch):
            counts = [batch_size // k] * k
            for r in range(batch_size % k):
                counts[(rotation + r) % k] += 1
            rotation = (rotation + batch_size % k) % k
            picked = []
            for c, n in zip(classes, counts):
                perm, pos = cursors[c]
                take = []
                while len(take) < n:
                    if pos == perm.size:
                        perm, pos = rng.permutation(members[c].size), 0
                    step = min(n - len(take), perm.size - pos)
                    take.extend(members[c][perm[pos : pos + step]])
                    pos += step
                cursors[c] = (perm, pos)
                picked.extend(take)
            idx = np.array(picked, dtype=np.int64)
            images = manifest.images[idx] if manifest.images is not None else None
            yield idx, images
        epoch += 1


def synthetic_two_class(n: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Smooth random images from two visually distinct classes, in [-1, 1].

    Class 0 is a bright disc on a dark background, class 1 a dark
    horizontal band on a light background; position, radius, colour and
    a little pixel noise vary per image.
    """
    rng = RngStream(seed, 11)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    labels = (np.arange(n) % 2).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        cx, cy = rng.uniform(2) * 0.5 + 0.25
        color = rng.uniform(3) * 0.8 + 0.2
        if labels[i] == 0:
            r = 0.15 + 0.15 * rng.uniform()
            mask = ((xx - cx) ** 2 + (yy - cy) ** 2 < r * r).astype(np.float64)
            img = -0.8 + 1.6 * mask[None] * color[:, None, None]
        else:
            half = 0.08 + 0.1 * rng.uniform()
            mask = (np.abs(yy - cy) < half).astype(np.float64)
            img = 0.8 - 1.6 * mask[None] * color[:, None, None]
        img = img + 0.05 * rng.normal((3, size, size))
        images[i] = np.clip(img, -1.0, 1.0)
    return images, labels
