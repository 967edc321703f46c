"""Synthetic benchmark generators and dataset persistence.

Four families are generated procedurally so the test suite never touches
the network: digit images built from a fixed glyph font (standing in for
MNIST), smooth color textures (standing in for CIFAR10), multi-digit
composites, digit-plus-anchor scenes, and house-number-style scenes with a
known number bounding box.  Real MNIST/CIFAR10 bases are supported through
a one-time local cache of ``.npz`` files.

Every generator is a pure function of (seed, sample index): sample ``k`` is
drawn from its own random stream, so regenerating it in isolation is
bit-exact.  Datasets persist as a directory of ``manifest.json`` (with
checksums), raw little-endian arrays and per-sample ``meta.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "1"


class DataError(Exception):
    """Missing, corrupt or unsatisfiable data."""


# ---------------------------------------------------------------------------
# glyph font (5x7 bitmaps, digits 0-9)
# ---------------------------------------------------------------------------

# seven-segment style strokes on the unit square: (x0, y0, x1, y1)
_SEG = {
    "A": (0.15, 0.08, 0.85, 0.08),
    "B": (0.85, 0.08, 0.85, 0.50),
    "C": (0.85, 0.50, 0.85, 0.92),
    "D": (0.15, 0.92, 0.85, 0.92),
    "E": (0.15, 0.50, 0.15, 0.92),
    "F": (0.15, 0.08, 0.15, 0.50),
    "G": (0.15, 0.50, 0.85, 0.50),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGECD",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


def render_glyph(rng: np.random.Generator, digit: int, size: int) -> np.ndarray:
    """Render one digit as thin anti-aliased strokes in a size x size patch.

    Segment endpoints are jittered and the whole glyph gets a random
    rotation/shear/scale, so each sample's shape is unique; strokes are
    narrow and smooth-edged, nothing like the solid constant blocks used
    as anomalies.
    """
    angle = rng.uniform(-0.18, 0.18)
    shear = rng.uniform(-0.18, 0.18)
    sy = rng.uniform(0.85, 1.05)
    sx = rng.uniform(0.85, 1.05)
    cos_a, sin_a = np.cos(angle), np.sin(angle)

    segments = []
    for name in _DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = _SEG[name]
        pts = []
        for x, y in ((x0, y0), (x1, y1)):
            x = x + rng.uniform(-0.04, 0.04) - 0.5
            y = y + rng.uniform(-0.04, 0.04) - 0.5
            x = x + shear * y
            xr = (cos_a * x - sin_a * y) * sx + 0.5
            yr = (sin_a * x + cos_a * y) * sy + 0.5
            pts.append((xr, yr))
        segments.append((*pts[0], *pts[1]))

    grid = (np.arange(size) + 0.5) / size
    # px varies along columns, py along rows
    px, py = np.meshgrid(grid, grid, indexing="xy")
    dist = np.full((size, size), np.inf)
    for x0, y0, x1, y1 in segments:
        dx, dy = x1 - x0, y1 - y0
        length_sq = dx * dx + dy * dy
        if length_sq < 1e-12:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / length_sq, 0.0, 1.0)
        d = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
        dist = np.minimum(dist, d)

    # tent cross-section: strokes peak along the centerline and never
    # contain flat constant patches, unlike the solid anomaly rectangles
    radius = 0.06 + 1.0 / size
    patch = np.clip(1.0 - dist / radius, 0.0, 1.0)
    intensity = rng.uniform(0.8, 1.0)
    speckle = rng.uniform(0.95, 1.0, size=patch.shape).astype(np.float32)
    return (patch * intensity * speckle).astype(np.float32)


def glyph_digit_image(rng: np.random.Generator, digit: int, side: int = 28) -> np.ndarray:
    """A single-channel digit image with positional jitter, values in [0, 1]."""
    box = int(side * 0.8)
    patch = render_glyph(rng, digit, box)
    img = np.zeros((side, side, 1), dtype=np.float32)
    margin = side - box
    y0 = int(rng.integers(margin // 2 - 2, margin // 2 + 3))
    x0 = int(rng.integers(margin // 2 - 2, margin // 2 + 3))
    y0 = max(0, min(margin, y0))
    x0 = max(0, min(margin, x0))
    img[y0:y0 + box, x0:x0 + box, 0] = patch
    return img


def texture_image(rng: np.random.Generator, side: int = 32) -> np.ndarray:
    """Smooth random RGB texture, values in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(side) / side, np.arange(side) / side, indexing="ij")
    img = np.empty((side, side, 3), dtype=np.float32)
    for ch in range(3):
        base = rng.uniform(0.25, 0.75)
        field_ = np.full((side, side), base)
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.2)
            field_ = field_ + amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[:, :, ch] = field_
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset container and persistence
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    name: str
    images: np.ndarray           # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray           # (N,) int32, labels < n_classes
    n_classes: int
    meta: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.max(initial=0) >= self.n_classes:
            raise DataError("labels must be strictly below n_classes")
        if not self.manifest:
            self.manifest = {}
        self.manifest.setdefault("name", self.name)
        self.manifest.setdefault("generator_version", GENERATOR_VERSION)
        self.manifest.setdefault("count", int(self.images.shape[0]))
        self.manifest.setdefault("image_shape", list(self.images.shape[1:]))
        self.manifest.setdefault("n_classes", int(self.n_classes))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            name=self.name,
            images=self.images[indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
            meta=[self.meta[int(i)] for i in indices] if self.meta else [],
            manifest=dict(self.manifest, count=int(indices.size)),
        )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(dataset: Dataset, path: Path | str) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i4")
    files = {}
    for filename, arr in (("images.bin", images), ("labels.bin", labels)):
        blob = arr.tobytes()
        (path / filename).write_bytes(blob)
        files[filename] = {
            "sha256": _sha256(blob),
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
        }
    meta_text = "\n".join(json.dumps(m, sort_keys=True) for m in dataset.meta)
    (path / "meta.jsonl").write_text(meta_text + ("\n" if meta_text else ""))
    manifest = dict(dataset.manifest)
    manifest["files"] = files
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for filename, info in manifest["files"].items():
        blob = (path / filename).read_bytes()
        if _sha256(blob) != info["sha256"]:
            raise DataError(f"checksum mismatch for {path / filename}")
        arrays[filename] = np.frombuffer(blob, dtype=info["dtype"]).reshape(info["shape"])
    meta = []
    meta_path = path / "meta.jsonl"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if line.strip():
                meta.append(json.loads(line))
    count_declared = manifest["count"]
    if arrays["images.bin"].shape[0] != count_declared:
        raise DataError(
            f"manifest count {count_declared} does not match array extent "
            f"{arrays['images.bin'].shape[0]}"
        )
    return Dataset(
        name=manifest["name"],
        images=arrays["images.bin"].copy(),
        labels=arrays["labels.bin"].copy(),
        n_classes=manifest["n_classes"],
        meta=meta,
        manifest={k: v for k, v in manifest.items() if k != "files"},
    )


# ---------------------------------------------------------------------------
# real-data caches
# ---------------------------------------------------------------------------

def data_cache_dir(data_dir: Path | str | None = None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get("BOTTLEMASK_DATA")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "bottlemask"


def _load_base_cache(name: str, data_dir=None) -> tuple[np.ndarray, np.ndarray]:
    path = data_cache_dir(data_dir) / f"{name}.npz"
    if not path.exists():
        raise DataError(
            f"base dataset {name!r} not cached; expected an npz with 'images' "
            f"and 'labels' arrays at {path}"
        )
    blob = np.load(path)
    images = blob["images"].astype(np.float32) / 255.0
    if images.ndim == 3:
        images = images[..., None]
    return images, blob["labels"].astype(np.int32)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _base_image(base: str, rng: np.random.Generator, cache) -> np.ndarray:
    if base == "glyph-mnist":
        return glyph_digit_image(rng, int(rng.integers(10)), side=28)
    if base == "glyph-cifar":
        return texture_image(rng, side=32)
    images, _ = cache
    return images[int(rng.integers(images.shape[0]))].copy()


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

ANOMALY_BASES = ("glyph-mnist", "glyph-cifar", "mnist", "cifar10")


def gen_anomaly(base: str, count: int, seed: int, data_dir=None) -> Dataset:
    """Base images, half of them altered by a solid rectangle; label = altered.

    Rectangle sides are uniform in [3, 10] and always fully inside the
    frame.  Single-channel bases get a fill intensity uniform in
    [100/255, 1]; color bases get an independent uniform RGB triple.
    """
    if base not in ANOMALY_BASES:
        raise DataError(f"unknown anomaly base {base!r}; expected one of {ANOMALY_BASES}")
    cache = _load_base_cache(base, data_dir) if base in ("mnist", "cifar10") else None
    images, labels, meta = [], [], []
    for k in range(count):
        rng = _sample_rng(seed, k)
        img = _base_image(base, rng, cache)
        side_h, side_w, channels = img.shape
        altered = bool(rng.random() < 0.5)
        bbox = None
        if altered:
            rh = int(rng.integers(3, 11))
            rw = int(rng.integers(3, 11))
            y0 = int(rng.integers(0, side_h - rh + 1))
            x0 = int(rng.integers(0, side_w - rw + 1))
            if channels == 1:
                fill = rng.uniform(100.0 / 255.0, 1.0)
                img[y0:y0 + rh, x0:x0 + rw, 0] = fill
            else:
                fill = rng.uniform(0.0, 1.0, size=channels).astype(np.float32)
                img[y0:y0 + rh, x0:x0 + rw, :] = fill
            bbox = [y0, x0, rh, rw]
        images.append(img)
        labels.append(int(altered))
        meta.append({"index": k, "anomaly": altered, "bbox": bbox})
    return Dataset(
        name=f"anomaly-{base}",
        images=np.stack(images),
        labels=np.array(labels),
        n_classes=2,
        meta=meta,
        manifest={"kind": "anomaly", "base": base, "seed": seed},
    )


_QUADRANTS = ((0, 0), (0, 28), (28, 0), (28, 28))


def gen_multidigit(n_digits: int, count: int, seed: int) -> Dataset:
    """56x56 composites; the one small digit defines the 10-way label.

    Two-digit mode uses an 18x18 small digit, four-digit mode 14x14; every
    digit is shifted by at most 4 pixels per axis from its quadrant slot.
    """
    if n_digits not in (2, 4):
        raise DataError(f"n_digits must be 2 or 4, got {n_digits}")
    small_size = 18 if n_digits == 2 else 14
    images, labels, meta = [], [], []
    for k in range(count):
        rng = _sample_rng(seed, k)
        canvas = np.zeros((56, 56, 1), dtype=np.float32)
        quads = rng.choice(4, size=n_digits, replace=False)
        small_slot = int(rng.integers(n_digits))
        classes = [int(rng.integers(10)) for _ in range(n_digits)]
        small_bbox = None
        for slot, quad in enumerate(quads):
            size = small_size if slot == small_slot else 28
            patch = render_glyph(rng, classes[slot], size)
            qy, qx = _QUADRANTS[quad]
            base_y = qy + (28 - size) // 2
            base_x = qx + (28 - size) // 2
            shift = rng.integers(-4, 5, size=2)
            y0 = int(np.clip(base_y + shift[0], 0, 56 - size))
            x0 = int(np.clip(base_x + shift[1], 0, 56 - size))
            region = canvas[y0:y0 + size, x0:x0 + size, 0]
            canvas[y0:y0 + size, x0:x0 + size, 0] = np.maximum(region, patch)
            if slot == small_slot:
                small_bbox = [y0, x0, size, size]
        label = classes[small_slot]
        images.append(canvas)
        labels.append(label)
        meta.append({
            "index": k,
            "small_bbox": small_bbox,
            "small_center": [small_bbox[0] + small_bbox[2] / 2.0,
                             small_bbox[1] + small_bbox[3] / 2.0],
            "digit_classes": classes,
        })
    return Dataset(
        name=f"multidigit-{n_digits}",
        images=np.stack(images),
        labels=np.array(labels),
        n_classes=10,
        meta=meta,
        manifest={"kind": "multidigit", "n_digits": n_digits, "seed": seed},
    )


ANCHOR_CANVAS = 40
ANCHOR_SIZE = 6
ANCHOR_POSITIONS = ((2, 2), (2, 32), (32, 2), (32, 32))


def gen_anchors(count: int, seed: int, noise: bool = False) -> Dataset:
    """One digit (classes 0-4) plus four solid corner squares on a 40x40 canvas.

    The anchors give a leaking mask something cheap to point at.  Optional
    uniform background noise in [0, 0.2] is added before the anchors are
    drawn, so anchor pixels stay constant-intensity either way.
    """
    images, labels, meta = [], [], []
    for k in range(count):
        rng = _sample_rng(seed, k)
        canvas = np.zeros((ANCHOR_CANVAS, ANCHOR_CANVAS, 1), dtype=np.float32)
        digit = int(rng.integers(5))
        size = 24
        patch = render_glyph(rng, digit, size)
        base = (ANCHOR_CANVAS - size) // 2
        y0 = int(np.clip(base + rng.integers(-2, 3), 0, ANCHOR_CANVAS - size))
        x0 = int(np.clip(base + rng.integers(-2, 3), 0, ANCHOR_CANVAS - size))
        canvas[y0:y0 + size, x0:x0 + size, 0] = patch
        if noise:
            canvas[:, :, 0] = np.clip(
                canvas[:, :, 0] + rng.uniform(0.0, 0.2, size=(ANCHOR_CANVAS, ANCHOR_CANVAS)),
                0.0, 1.0,
            ).astype(np.float32)
        anchor_bboxes = []
        for ay, ax in ANCHOR_POSITIONS:
            canvas[ay:ay + ANCHOR_SIZE, ax:ax + ANCHOR_SIZE, 0] = 1.0
            anchor_bboxes.append([ay, ax, ANCHOR_SIZE, ANCHOR_SIZE])
        images.append(canvas)
        labels.append(digit)
        meta.append({
            "index": k,
            "digit_bbox": [y0, x0, size, size],
            "anchor_bboxes": anchor_bboxes,
        })
    return Dataset(
        name="anchors",
        images=np.stack(images),
        labels=np.array(labels),
        n_classes=5,
        meta=meta,
        manifest={"kind": "anchors", "seed": seed, "noise": noise},
    )


# ---------------------------------------------------------------------------
# house-number scenes and the crop-ingestion pipeline
# ---------------------------------------------------------------------------

SVHN_SOURCE_SIDE = 112
SVHN_OUT_SIDE = 128
MAX_DIGIT_COUNT = 4


def gen_svhn_synthetic(count: int, seed: int) -> Dataset:
    """House-number-style source scenes with a known number bounding box.

    Each 112x112 RGB scene carries 1-4 glyph digits in a row on a textured
    background; meta records the digit count and number bbox.
    """
    images, labels, meta = [], [], []
    for k in range(count):
        rng = _sample_rng(seed, k)
        img = texture_image(rng, side=SVHN_SOURCE_SIDE)
        n_digits = int(rng.integers(1, MAX_DIGIT_COUNT + 1))
        gap = 2
        # keep the whole number inside an 8-pixel margin
        max_h = min(33, int((SVHN_SOURCE_SIDE - 16 - (n_digits - 1) * gap) / (0.7 * n_digits)))
        digit_h = int(rng.integers(22, max_h + 1))
        digit_w = int(digit_h * 0.7)
        total_w = n_digits * digit_w + (n_digits - 1) * gap
        y0 = int(rng.integers(8, SVHN_SOURCE_SIDE - digit_h - 7))
        x0 = int(rng.integers(8, SVHN_SOURCE_SIDE - total_w - 7))
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        for j in range(n_digits):
            digit = int(rng.integers(10))
            patch = render_glyph(rng, digit, digit_h)[:, :digit_w]
            xs = x0 + j * (digit_w + gap)
            region = img[y0:y0 + digit_h, xs:xs + digit_w]
            mask = patch > 0.05
            region[mask] = color * patch[mask, None]
        bbox = [y0, x0, digit_h, total_w]
        images.append(img)
        labels.append(n_digits - 1)
        meta.append({"index": k, "digit_count": n_digits, "number_bbox": bbox})
    return Dataset(
        name="svhn-synthetic-source",
        images=np.stack(images),
        labels=np.array(labels),
        n_classes=MAX_DIGIT_COUNT,
        meta=meta,
        manifest={"kind": "svhn-source", "seed": seed},
    )


def _bilinear_resize(img: np.ndarray, out_side: int) -> np.ndarray:
    """Channels-last bilinear resize (align_corners=False convention)."""
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_side) + 0.5) * in_h / out_side - 0.5
    xs = (np.arange(out_side) + 0.5) * in_w / out_side - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _crop_constraints_ok(crop: tuple[int, int, int], bbox, source_side: int,
                         min_bbox_keep: float = 0.95, min_coverage: float = 0.40) -> bool:
    y0, x0, side = crop
    by, bx, bh, bw = bbox
    inter_h = max(0, min(y0 + side, by + bh) - max(y0, by))
    inter_w = max(0, min(x0 + side, bx + bw) - max(x0, bx))
    keep = (inter_h * inter_w) / float(bh * bw)
    coverage = (side * side) / float(source_side * source_side)
    return keep >= min_bbox_keep and coverage >= min_coverage


def ingest_svhn(source: Dataset | Path | str, count: int, seed: int,
                max_tries: int = 50) -> Dataset:
    """Random crops of house-number scenes resized to 128x128.

    Each crop must keep at least 95% of the number bounding box in frame
    and cover at least 40% of the source image.  Source samples whose
    constraints cannot be met within ``max_tries`` window draws are skipped
    (counted in the manifest).  Labels are digit counts clipped to [1, 4]
    and stored as count-1.
    """
    if not isinstance(source, Dataset):
        source = load_dataset(source)
    if not source.meta or "number_bbox" not in source.meta[0]:
        raise DataError("source dataset lacks number_bbox metadata")
    src_side = source.images.shape[1]
    min_side = int(np.ceil(np.sqrt(0.40) * src_side))
    images, labels, meta = [], [], []
    skipped = 0
    attempt = 0
    while len(images) < count:
        if attempt >= count * 10 + 100:
            raise DataError(
                f"gave up after {attempt} attempts with only {len(images)} crops; "
                f"{skipped} sources skipped"
            )
        rng = _sample_rng(seed, attempt)
        attempt += 1
        src_idx = int(rng.integers(len(source)))
        bbox = source.meta[src_idx]["number_bbox"]
        crop = None
        for _ in range(max_tries):
            side = int(rng.integers(min_side, src_side + 1))
            y0 = int(rng.integers(0, src_side - side + 1))
            x0 = int(rng.integers(0, src_side - side + 1))
            if _crop_constraints_ok((y0, x0, side), bbox, src_side):
                crop = (y0, x0, side)
                break
        if crop is None:
            skipped += 1
            continue
        y0, x0, side = crop
        out = _bilinear_resize(source.images[src_idx][y0:y0 + side, x0:x0 + side], SVHN_OUT_SIDE)
        scale = SVHN_OUT_SIDE / side
        by, bx, bh, bw = bbox
        oy0 = max(by - y0, 0)
        ox0 = max(bx - x0, 0)
        oy1 = min(by + bh - y0, side)
        ox1 = min(bx + bw - x0, side)
        out_bbox = [oy0 * scale, ox0 * scale, (oy1 - oy0) * scale, (ox1 - ox0) * scale]
        count_clipped = min(source.meta[src_idx]["digit_count"], MAX_DIGIT_COUNT)
        images.append(out)
        labels.append(count_clipped - 1)
        meta.append({
            "index": len(images) - 1,
            "attempt": attempt - 1,
            "source_index": src_idx,
            "digit_count": count_clipped,
            "number_bbox": out_bbox,
            "crop": [y0, x0, side],
        })
    return Dataset(
        name="svhn-crops",
        images=np.stack(images),
        labels=np.array(labels),
        n_classes=MAX_DIGIT_COUNT,
        meta=meta,
        manifest={"kind": "svhn", "seed": seed, "skipped": skipped},
    )


GENERATORS = {
    "anomaly-glyph-mnist": lambda count, seed: gen_anomaly("glyph-mnist", count, seed),
    "anomaly-glyph-cifar": lambda count, seed: gen_anomaly("glyph-cifar", count, seed),
    "anomaly-mnist": lambda count, seed: gen_anomaly("mnist", count, seed),
    "anomaly-cifar10": lambda count, seed: gen_anomaly("cifar10", count, seed),
    "multidigit-2": lambda count, seed: gen_multidigit(2, count, seed),
    "multidigit-4": lambda count, seed: gen_multidigit(4, count, seed),
    "anchors": lambda count, seed: gen_anchors(count, seed),
    "anchors-noise": lambda count, seed: gen_anchors(count, seed, noise=True),
    "svhn-synthetic": lambda count, seed: ingest_svhn(
        gen_svhn_synthetic(max(count // 2, 64), seed + 1), count, seed
    ),
}
