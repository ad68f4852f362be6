"""Dataset ingestion, PPM/PGM codecs, and the synthetic sign generator.

Datasets are directories with one subdirectory per class (lexicographic order
fixes the label mapping) plus an optional parallel ``masks/`` tree and a JSON
manifest carrying class order and split assignments. The synthetic generator
renders simple colored shapes (octagon, triangle, circle, diamond, square
crossed with a small palette) with rotation/translation/brightness jitter,
and designates a centered red octagon class as the attack victim with a
default two-bar sticker mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import to_array


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) codecs

def save_image(tensor, path, fmt: str | None = None) -> None:
    """Write an H x W x {1,3} float image in [0,1] as binary PGM/PPM.

    Quantization is round-half-up: byte = floor(v * 255 + 0.5).
    """
    a = to_array(tensor)
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise DataError(f"expected H x W x 1 or H x W x 3, got {a.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise DataError("pixel values must lie in [0, 1]")
    if fmt is None:
        fmt = "P5" if a.shape[2] == 1 else "P6"
    if fmt not in ("P5", "P6"):
        raise DataError(f"unsupported format {fmt!r}")
    if fmt == "P5" and a.shape[2] != 1:
        raise DataError("P5 requires a single channel")
    if fmt == "P6" and a.shape[2] != 3:
        raise DataError("P6 requires three channels")
    q = np.floor(a * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"{fmt}\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def _read_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DataError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def load_image(path) -> np.ndarray:
    """Read binary PGM/PPM; returns H x W x {1,3} float64 in [0, 1]."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"P5", b"P6"):
            raise DataError(f"{path}: unsupported magic {magic!r}")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 supported")
        ch = 1 if magic == b"P5" else 3
        raw = f.read(w * h * ch)
        if len(raw) != w * h * ch:
            raise DataError(f"{path}: truncated pixel payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, ch) / 255.0


def load_mask(path, image_shape) -> np.ndarray:
    """Load a grayscale mask file, threshold at 0.5, require nonzero area."""
    img = load_image(path)
    if img.shape[2] != 1:
        img = img.mean(axis=2, keepdims=True)
    m = (img[:, :, 0] >= 0.5).astype(np.float64)
    if m.shape != tuple(image_shape[:2]):
        raise DataError(f"mask {m.shape} does not match image {tuple(image_shape[:2])}")
    if m.sum() == 0:
        raise DataError(f"{path}: mask has zero area")
    return m


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    ri = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    ci = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return img[np.ix_(ri, ci)]


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class Dataset:
    images: np.ndarray                 # N x H x W x 3 in [0, 1]
    labels: np.ndarray                 # N int
    class_names: list[str]
    splits: dict = field(default_factory=dict)   # name -> index array
    masks: np.ndarray | None = None    # N x H x W binary, optional
    victim_class: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DataError("images must be N x H x W x 3")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("one label per image required")
        if len(self.class_names) and self.labels.size and \
                self.labels.max() >= len(self.class_names):
            raise DataError("label out of range of class_names")
        ae = self.splits.get("attack_eval")
        if ae is not None and len(ae) and \
                not np.all(self.labels[ae] == self.victim_class):
            raise DataError("attack_eval split must contain only the victim class")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str):
        idx = self.splits.get(name)
        if idx is None or len(idx) == 0:
            raise DataError(f"split {name!r} is empty")
        return self.images[idx], self.labels[idx]

    def split_masks(self, name: str):
        if self.masks is None:
            raise DataError("dataset carries no masks")
        return self.masks[self.splits[name]]


# ---------------------------------------------------------------------------
# synthetic signs

_SHAPES = ("octagon", "triangle", "circle", "diamond", "square")
_PALETTE = (
    ("red", (0.80, 0.12, 0.12)),
    ("blue", (0.15, 0.30, 0.80)),
    ("yellow", (0.88, 0.80, 0.15)),
    ("green", (0.12, 0.62, 0.22)),
)
_BACKGROUND = 0.45
_STRIPE_ANGLES = (0.0, 45.0, 90.0, 135.0)
_STRIPE_PITCH = 3.0


@dataclass
class SynthSpec:
    n_classes: int = 18
    train_per_class: int = 20
    test_per_class: int = 10
    attack_eval_count: int = 40
    image_size: int = 32
    rotation_deg: float = 15.0
    brightness: float = 0.2
    translation_px: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise DataError("need at least 2 classes")
        if self.n_classes > len(_SHAPES) * len(_PALETTE):
            raise DataError(
                f"n_classes {self.n_classes} exceeds the "
                f"{len(_SHAPES) * len(_PALETTE)} shape/color combinations")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_classes", "train_per_class", "test_per_class", "attack_eval_count",
            "image_size", "rotation_deg", "brightness", "translation_px", "seed")}

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def _shape_indicator(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if shape == "octagon":
        return np.maximum(np.maximum(np.abs(u), np.abs(v)),
                          (np.abs(u) + np.abs(v)) / np.sqrt(2.0)) <= r
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "triangle":
        # upward equilateral triangle, inradius r
        return (v <= r) & (v >= -2 * r + np.sqrt(3.0) * u) & \
               (v >= -2 * r - np.sqrt(3.0) * u)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.25 * r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.95 * r
    raise DataError(f"unknown shape {shape!r}")


def _render(shape, color, size, rot_deg, tx, ty, brightness, stripe_angle=0.0,
            supersample=3):
    """One sign image: a colored shape carrying a fine class-keyed stripe
    pattern (the high-frequency cue the classifier has to resolve), jittered
    by rotation/translation/brightness. Stripes rotate with the sign."""
    s = supersample
    n = size * s
    coords = (np.arange(n) + 0.5) / s - size / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    yy = yy - ty
    xx = xx - tx
    th = np.deg2rad(rot_deg)
    u = np.cos(th) * xx + np.sin(th) * yy
    v = -np.sin(th) * xx + np.cos(th) * yy
    r = 0.34 * size
    inside = _shape_indicator(shape, u, v, r).astype(np.float64)
    ph = np.deg2rad(stripe_angle)
    band = np.floor((np.cos(ph) * u + np.sin(ph) * v) / _STRIPE_PITCH) % 2
    light = np.clip(np.asarray(color) + 0.45, 0.0, 1.0)
    face = np.empty((n, n, 3))
    for c in range(3):
        face[:, :, c] = np.where(band > 0.5, light[c], color[c])
    cover = inside[:, :, None] * face + (1.0 - inside[:, :, None]) * _BACKGROUND
    img = cover.reshape(size, s, size, s, 3).mean(axis=(1, 3))
    return np.clip(img + brightness, 0.0, 1.0)


def default_sticker_mask(size: int = 32) -> np.ndarray:
    """Two horizontal bars, the usual black/white-sticker layout analogue."""
    m = np.zeros((size, size))
    bar_h = max(2, round(size * 3 / 32))
    c0, c1 = round(size * 7 / 32), round(size * 25 / 32)
    top = round(size * 10 / 32)
    bot = round(size * 19 / 32)
    m[top:top + bar_h, c0:c1] = 1.0
    m[bot:bot + bar_h, c0:c1] = 1.0
    return m


def class_table(n_classes: int) -> list[tuple[str, str, tuple, float]]:
    """(name, shape, rgb, stripe angle) per class; class 0 is the red octagon."""
    combos = [(sh, cname, rgb) for sh in _SHAPES for cname, rgb in _PALETTE]
    combos.remove(("octagon", "red", _PALETTE[0][1]))
    table = [("stop", "octagon", _PALETTE[0][1])]
    for sh, cname, rgb in combos[:n_classes - 1]:
        table.append((f"{sh}_{cname}", sh, rgb))
    return [(name, sh, rgb, _STRIPE_ANGLES[i % len(_STRIPE_ANGLES)])
            for i, (name, sh, rgb) in enumerate(table)]


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Render the jittered shape dataset; pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    table = class_table(spec.n_classes)
    size = spec.image_size
    images, labels, tags = [], [], []

    def draw(cls, shape, color, angle, jitter=True, centered=False):
        if jitter and not centered:
            rot = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
            tx, ty = rng.uniform(-spec.translation_px, spec.translation_px, size=2)
            b = rng.uniform(-spec.brightness, spec.brightness)
        elif jitter:
            # victim-class eval images stay centered/upright so one shared
            # pre-aligned sticker mask fits all of them
            rot, tx, ty = 0.0, 0.0, 0.0
            b = rng.uniform(-spec.brightness, spec.brightness)
        else:
            rot = tx = ty = b = 0.0
        images.append(_render(shape, color, size, rot, tx, ty, b, angle))
        labels.append(cls)

    jitter = (spec.rotation_deg, spec.brightness, spec.translation_px) != (0, 0, 0)
    for phase, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for cls, (name, shape, color, angle) in enumerate(table):
            for _ in range(count):
                draw(cls, shape, color, angle, jitter=jitter)
                tags.append(phase)
    name, shape, color, angle = table[0]
    for _ in range(spec.attack_eval_count):
        draw(0, shape, color, angle, jitter=jitter, centered=True)
        tags.append("attack_eval")

    tags = np.asarray(tags)
    splits = {k: np.flatnonzero(tags == k) for k in ("train", "test", "attack_eval")}
    n = len(images)
    masks = np.broadcast_to(default_sticker_mask(size), (n, size, size)).copy()
    return Dataset(images=np.stack(images), labels=np.asarray(labels),
                   class_names=[t[0] for t in table], splits=splits,
                   masks=masks, victim_class=0)


# ---------------------------------------------------------------------------
# directory persistence

def save_dataset(ds: Dataset, root) -> None:
    """Write root/<idx>_<class>/<img>.ppm, masks tree, and the manifest."""
    os.makedirs(root, exist_ok=True)
    dirnames = [f"{i:02d}_{name}" for i, name in enumerate(ds.class_names)]
    counters = [0] * len(dirnames)
    filenames = []
    for i in range(ds.images.shape[0]):
        cls = int(ds.labels[i])
        d = os.path.join(root, dirnames[cls])
        os.makedirs(d, exist_ok=True)
        fn = f"{counters[cls]:04d}.ppm"
        counters[cls] += 1
        save_image(ds.images[i], os.path.join(d, fn), fmt="P6")
        filenames.append(f"{dirnames[cls]}/{fn}")
        if ds.masks is not None:
            md = os.path.join(root, "masks", dirnames[cls])
            os.makedirs(md, exist_ok=True)
            save_image(ds.masks[i][:, :, None], os.path.join(md, fn[:-4] + ".pgm"),
                       fmt="P5")
    manifest = {
        "class_names": dirnames,
        "victim_class": ds.victim_class,
        "splits": {k: [filenames[i] for i in v] for k, v in ds.splits.items()},
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(root, resolution: int = 32) -> Dataset:
    """Ingest a class-per-subdirectory image tree.

    Class order is the lexicographic subdirectory order; images are resized
    (nearest neighbor) to the target resolution and mapped to [0, 1] by /255.
    A manifest, when present, restores split assignments and the victim class.
    """
    if not os.path.isdir(root):
        raise DataError(f"{root} is not a directory")
    classes = sorted(d for d in os.listdir(root)
                     if os.path.isdir(os.path.join(root, d)) and d != "masks")
    if not classes:
        raise DataError(f"{root} contains no class subdirectories")
    images, labels, masks, filenames = [], [], [], []
    any_masks = False
    for cls, cname in enumerate(classes):
        cdir = os.path.join(root, cname)
        files = sorted(f for f in os.listdir(cdir)
                       if f.lower().endswith((".ppm", ".pgm")))
        if not files:
            raise DataError(f"class directory {cdir} is empty")
        for fn in files:
            img = load_image(os.path.join(cdir, fn))
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            if img.shape[0] != resolution or img.shape[1] != resolution:
                img = _resize_nearest(img, resolution)
            images.append(img)
            labels.append(cls)
            filenames.append(f"{cname}/{fn}")
            mpath = os.path.join(root, "masks", cname, fn[:-4] + ".pgm")
            if os.path.exists(mpath):
                masks.append(load_mask(mpath, img.shape))
                any_masks = True
            else:
                masks.append(np.zeros((resolution, resolution)))
    manifest_path = os.path.join(root, "manifest.json")
    splits, victim = {}, 0
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        victim = int(manifest.get("victim_class", 0))
        pos = {fn: i for i, fn in enumerate(filenames)}
        for k, v in manifest.get("splits", {}).items():
            splits[k] = np.asarray([pos[fn] for fn in v if fn in pos], dtype=int)
    if not splits:
        splits = {"train": np.arange(len(images))}
    return Dataset(images=np.stack(images), labels=np.asarray(labels),
                   class_names=classes, splits=splits,
                   masks=np.stack(masks) if any_masks else None,
                   victim_class=victim)
