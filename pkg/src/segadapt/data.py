"""Datasets, tiling, label palettes and the synthetic two-domain benchmark."""

from __future__ import annotations

import functools
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DataError, ParameterError, ShapeError

ISPRS_CLASSES = ("impervious_surfaces", "building", "low_vegetation", "tree", "car", "clutter")

# ISPRS 2D labelling colour convention.
ISPRS_PALETTE = {
    "impervious_surfaces": (255, 255, 255),
    "building": (0, 0, 255),
    "low_vegetation": (0, 255, 255),
    "tree": (0, 255, 0),
    "car": (255, 255, 0),
    "clutter": (255, 0, 0),
}

# Pixel share of each class in the Potsdam tiles (percent).
POTSDAM_FREQUENCIES = {
    "impervious_surfaces": 29.9,
    "building": 28.2,
    "low_vegetation": 20.9,
    "tree": 14.4,
    "car": 1.7,
    "clutter": 4.8,
}

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "segadapt-dataset"
MANIFEST_VERSION = 1


# --- normalization ----------------------------------------------------------

def normalize(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(img, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(img: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8 [0, 255], rounding to nearest."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# --- schema and containers --------------------------------------------------

@dataclass
class DatasetSchema:
    class_names: Tuple[str, ...] = ISPRS_CLASSES
    palette: Dict[str, Tuple[int, int, int]] = field(default_factory=lambda: dict(ISPRS_PALETTE))
    channels: Tuple[str, ...] = ("R", "G", "B")
    resolution_cm: float = 5.0

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.channels = tuple(self.channels)
        self.palette = {k: tuple(int(c) for c in v) for k, v in self.palette.items()}
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        if len(self.class_names) < 2:
            raise ParameterError("a dataset schema needs at least 2 classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ParameterError("class names must be unique")
        missing = [c for c in self.class_names if c not in self.palette]
        if missing:
            raise ParameterError(f"palette has no colour for classes {missing}")
        colours = [self.palette[c] for c in self.class_names]
        if len(set(colours)) != len(colours):
            raise ParameterError("palette colours must be pairwise distinct")
        if not self.channels:
            raise ParameterError("schema needs at least one channel tag")

    def palette_array(self) -> np.ndarray:
        return np.array([self.palette[c] for c in self.class_names], dtype=np.uint8)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "palette": {k: list(v) for k, v in self.palette.items() if k in self.class_names},
            "channels": list(self.channels),
            "resolution_cm": self.resolution_cm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        unknown = set(d) - {"class_names", "palette", "channels", "resolution_cm"}
        if unknown:
            raise DataError(f"unknown schema keys {sorted(unknown)}")
        return cls(
            class_names=tuple(d["class_names"]),
            palette={k: tuple(v) for k, v in d["palette"].items()},
            channels=tuple(d["channels"]),
            resolution_cm=float(d.get("resolution_cm", 5.0)),
        )


@dataclass
class LabeledPatch:
    image: np.ndarray  # float32, C x H x W, values in [-1, 1]
    mask: Optional[np.ndarray] = None  # uint8, H x W class indices
    origin: Tuple[str, int, int] = ("", 0, 0)  # (source image id, tile row offset, tile col offset)
    split: str = "train"


class DomainDataset:
    """Ordered patches sharing one schema, size and channel count."""

    def __init__(self, schema: DatasetSchema, patches: Sequence[LabeledPatch], name: str = ""):
        self.schema = schema
        self.patches = list(patches)
        self.name = name
        self.validate()

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i) -> LabeledPatch:
        return self.patches[i]

    def validate(self) -> None:
        if not self.patches:
            return
        shape = self.patches[0].image.shape
        if len(shape) != 3:
            raise ShapeError(f"patch images must be C x H x W, got {shape}")
        if shape[0] != len(self.schema.channels):
            raise ShapeError(f"patches have {shape[0]} channels but schema declares {len(self.schema.channels)}")
        c = self.schema.num_classes
        for i, p in enumerate(self.patches):
            if p.image.shape != shape:
                raise ShapeError(f"patch {i} has shape {p.image.shape}, expected {shape}")
            if p.mask is not None:
                if p.mask.shape != shape[1:]:
                    raise ShapeError(f"patch {i} mask shape {p.mask.shape} != {shape[1:]}")
                if p.mask.size and int(p.mask.max()) >= c:
                    raise DataError(f"patch {i} mask contains class {int(p.mask.max())} >= {c}")

    @property
    def tile_shape(self) -> Tuple[int, int, int]:
        return self.patches[0].image.shape if self.patches else (len(self.schema.channels), 0, 0)

    @property
    def is_labeled(self) -> bool:
        return all(p.mask is not None for p in self.patches)

    def require_labels(self, what: str = "operation") -> None:
        unlabeled = [i for i, p in enumerate(self.patches) if p.mask is None]
        if unlabeled:
            raise DataError(f"{what} needs labelled patches; {len(unlabeled)} unlabelled (first index {unlabeled[0]})")

    def split(self, name: str) -> "DomainDataset":
        return DomainDataset(self.schema, [p for p in self.patches if p.split == name], f"{self.name}:{name}")

    def splits(self) -> List[str]:
        return sorted({p.split for p in self.patches})

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.patches])

    def masks(self) -> np.ndarray:
        self.require_labels("masks()")
        return np.stack([p.mask for p in self.patches])

    def with_images(self, images: Sequence[np.ndarray], name: str = "") -> "DomainDataset":
        """Same masks, origins and order with replaced image content."""
        if len(images) != len(self.patches):
            raise ShapeError(f"{len(images)} images for {len(self.patches)} patches")
        patches = [replace(p, image=np.asarray(img, dtype=np.float32)) for p, img in zip(self.patches, images)]
        return DomainDataset(self.schema, patches, name or self.name)

    def with_masks(self, masks: Sequence[Optional[np.ndarray]], name: str = "") -> "DomainDataset":
        patches = [replace(p, mask=None if m is None else np.asarray(m, dtype=np.uint8)) for p, m in zip(self.patches, masks)]
        return DomainDataset(self.schema, patches, name or self.name)

    def without_masks(self) -> "DomainDataset":
        return self.with_masks([None] * len(self.patches))

    def mask_checksum(self) -> str:
        """SHA-256 over every mask in order; tracks label integrity across stages."""
        h = hashlib.sha256()
        for p in self.patches:
            if p.mask is None:
                h.update(b"<none>")
            else:
                h.update(np.ascontiguousarray(p.mask, dtype=np.uint8).tobytes())
        return h.hexdigest()


# --- tiling -----------------------------------------------------------------

def _to_chw_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be C x H x W, got {image.shape}")
    if image.dtype == np.uint8:
        return normalize(image)
    image = image.astype(np.float32)
    if image.size and (image.min() < -1 or image.max() > 1):
        raise DataError("float images must already be normalized to [-1, 1]")
    return image


def tile(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    tile_size: int,
    policy: str = "drop",
    image_id: str = "image",
    split: str = "train",
) -> List[LabeledPatch]:
    """Cut a C x H x W raster (and its mask) into square tiles, row-major.

    ``drop`` keeps only whole tiles; ``reflect_pad`` pads the bottom/right
    edges by reflection so the tiles cover the full image.
    """
    if tile_size < 16 or tile_size % 16:
        raise ParameterError(f"tile size must be >= 16 and divisible by 16, got {tile_size}")
    if policy not in ("drop", "reflect_pad"):
        raise ParameterError(f"unknown tiling policy '{policy}'")
    img = _to_chw_float(image)
    _, h, w = img.shape
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise ShapeError(f"mask shape {mask.shape} != image spatial shape {(h, w)}")
    t = tile_size
    if policy == "drop":
        rows, cols = h // t, w // t
        if rows == 0 or cols == 0:
            warnings.warn(f"image {image_id} ({h}x{w}) is smaller than one {t}x{t} tile; no tiles produced")
            return []
    else:
        rows, cols = math.ceil(h / t), math.ceil(w / t)
        ph, pw = rows * t - h, cols * t - w
        mode = "reflect" if ph < h and pw < w else "symmetric"
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)
        if mask is not None:
            mask = np.pad(mask, ((0, ph), (0, pw)), mode=mode)
    out = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * t, c * t
            m = None if mask is None else np.ascontiguousarray(mask[y : y + t, x : x + t], dtype=np.uint8)
            out.append(LabeledPatch(np.ascontiguousarray(img[:, y : y + t, x : x + t]), m, (image_id, y, x), split))
    return out


def untile(patches: Sequence[LabeledPatch], height: int, width: int):
    """Reassemble tiles produced by :func:`tile` and crop to the original extent."""
    if not patches:
        raise DataError("no patches to reassemble")
    c, t, _ = patches[0].image.shape
    H = max(p.origin[1] for p in patches) + t
    W = max(p.origin[2] for p in patches) + t
    img = np.zeros((c, H, W), dtype=np.float32)
    has_mask = all(p.mask is not None for p in patches)
    mask = np.zeros((H, W), dtype=np.uint8) if has_mask else None
    for p in patches:
        _, y, x = p.origin
        img[:, y : y + t, x : x + t] = p.image
        if has_mask:
            mask[y : y + t, x : x + t] = p.mask
    return img[:, :height, :width], (None if mask is None else mask[:height, :width])


# --- statistics -------------------------------------------------------------

def class_distribution(ds: DomainDataset) -> Dict[str, float]:
    """Percentage of all labelled pixels belonging to each class."""
    ds.require_labels("class_distribution")
    c = ds.schema.num_classes
    counts = np.zeros(c, dtype=np.int64)
    for p in ds.patches:
        counts += np.bincount(p.mask.ravel(), minlength=c)[:c]
    total = counts.sum()
    if total == 0:
        raise DataError("dataset has no pixels")
    return {name: float(100.0 * n / total) for name, n in zip(ds.schema.class_names, counts)}


def format_distribution(dist: Dict[str, float]) -> str:
    lines = [f"{'Category':<24}{'Percentage':>12}"]
    for name, pct in dist.items():
        lines.append(f"{name:<24}{pct:>11.2f}%")
    lines.append(f"{'total':<24}{sum(dist.values()):>11.2f}%")
    return "\n".join(lines)


# --- palette codec ----------------------------------------------------------

def encode_mask(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Class-index mask -> H x W x 3 colour image."""
    palette = np.asarray(palette, dtype=np.uint8)
    mask = np.asarray(mask)
    if mask.size and int(mask.max()) >= len(palette):
        raise DataError(f"mask class {int(mask.max())} has no palette colour")
    return palette[mask]


def decode_mask(color: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """H x W x 3 colour image -> class-index mask; every colour must be in the palette."""
    palette = np.asarray(palette, dtype=np.uint8)
    color = np.asarray(color, dtype=np.uint8)
    if color.ndim != 3 or color.shape[2] < 3:
        raise ShapeError(f"colour mask must be H x W x 3, got {color.shape}")
    color = color[..., :3]
    key = (color[..., 0].astype(np.int64) << 16) | (color[..., 1].astype(np.int64) << 8) | color[..., 2]
    pkey = (palette[:, 0].astype(np.int64) << 16) | (palette[:, 1].astype(np.int64) << 8) | palette[:, 2]
    order = np.argsort(pkey)
    pos = np.searchsorted(pkey[order], key)
    pos = np.clip(pos, 0, len(pkey) - 1)
    hit = pkey[order][pos] == key
    if not hit.all():
        bad_keys, counts = np.unique(key[~hit], return_counts=True)
        listing = ", ".join(
            f"({k >> 16}, {(k >> 8) & 255}, {k & 255}) x{n}" for k, n in zip(bad_keys[:10], counts[:10])
        )
        raise DataError(f"{int((~hit).sum())} pixels have colours outside the palette: {listing}")
    return order[pos].astype(np.uint8)


# --- PNG datasets -----------------------------------------------------------

def save_png(path, chw: np.ndarray) -> None:
    arr = denormalize(chw).transpose(1, 2, 0)
    if arr.shape[2] not in (3, 4):
        raise ShapeError(f"PNG export supports 3 or 4 channels, got {arr.shape[2]}")
    Image.fromarray(arr, mode="RGB" if arr.shape[2] == 3 else "RGBA").save(path)


def read_image(path, channel_map: Optional[Sequence[int]] = None) -> np.ndarray:
    """Read an 8-bit raster as C x H x W uint8, keeping the channels in ``channel_map``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: only 8-bit rasters are supported, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[..., None]
    arr = arr.transpose(2, 0, 1)
    if channel_map is None:
        channel_map = list(range(min(3, arr.shape[0])))
    if max(channel_map) >= arr.shape[0]:
        raise DataError(f"{path}: channel map {list(channel_map)} exceeds {arr.shape[0]} channels")
    return np.ascontiguousarray(arr[list(channel_map)])


def read_mask(path, palette: np.ndarray) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"mask file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return decode_mask(arr, palette)


def save_dataset(ds: DomainDataset, directory) -> Path:
    """Write PNG images, colour-coded PNG masks and a JSON manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    if any(p.mask is not None for p in ds.patches):
        (directory / "masks").mkdir(parents=True, exist_ok=True)
    palette = ds.schema.palette_array()
    entries = []
    for i, p in enumerate(ds.patches):
        img_rel = f"images/{i:06d}.png"
        save_png(directory / img_rel, p.image)
        mask_rel = None
        if p.mask is not None:
            mask_rel = f"masks/{i:06d}.png"
            Image.fromarray(encode_mask(p.mask, palette), mode="RGB").save(directory / mask_rel)
        entries.append({"image": img_rel, "mask": mask_rel, "origin": list(p.origin), "split": p.split})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": ds.name,
        "schema": ds.schema.to_dict(),
        "patches": entries,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory) -> DomainDataset:
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.exists():
        raise DataError(f"no dataset manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{mpath}: unsupported manifest format/version")
    schema = DatasetSchema.from_dict(manifest["schema"])
    palette = schema.palette_array()
    nch = len(schema.channels)
    patches = []
    for e in manifest["patches"]:
        img = normalize(read_image(directory / e["image"], list(range(nch))))
        mask = None if e.get("mask") is None else read_mask(directory / e["mask"], palette)
        o = e.get("origin", ["", 0, 0])
        patches.append(LabeledPatch(img, mask, (str(o[0]), int(o[1]), int(o[2])), e.get("split", "train")))
    return DomainDataset(schema, patches, manifest.get("name", directory.name))


def ingest(
    image_paths: Sequence,
    mask_paths: Optional[Sequence],
    schema: DatasetSchema,
    tile_size: int = 512,
    policy: str = "drop",
    channel_map: Optional[Sequence[int]] = None,
    split: str = "train",
) -> DomainDataset:
    """Tile full rasters (optionally with colour-coded label rasters) into a dataset."""
    if mask_paths is not None and len(mask_paths) != len(image_paths):
        raise DataError(f"{len(image_paths)} images but {len(mask_paths)} masks")
    cmap = list(channel_map) if channel_map is not None else list(range(len(schema.channels)))
    if len(cmap) != len(schema.channels):
        raise DataError(f"channel map {cmap} does not match schema channels {schema.channels}")
    patches: List[LabeledPatch] = []
    for i, ip in enumerate(image_paths):
        img = read_image(ip, cmap)
        mask = None if mask_paths is None else read_mask(mask_paths[i], schema.palette_array())
        patches.extend(tile(img, mask, tile_size, policy, image_id=Path(ip).stem, split=split))
    return DomainDataset(schema, patches, "ingested")


# --- synthetic two-domain benchmark ------------------------------------------

# Source-domain base colours, RGB in [0, 1].
BASE_COLOURS = {
    "impervious_surfaces": (0.55, 0.55, 0.55),
    "building": (0.78, 0.36, 0.26),
    "low_vegetation": (0.55, 0.78, 0.35),
    "tree": (0.16, 0.45, 0.16),
    "car": (0.20, 0.30, 0.80),
    "clutter": (0.85, 0.72, 0.20),
}

# Top layer first: later classes are painted only where no earlier class lies.
PAINT_ORDER = ("clutter", "car", "tree", "building", "low_vegetation")


@dataclass
class SynthConfig:
    tile_size: int = 64
    n_source_train: int = 300
    n_source_test: int = 100
    n_target_train: int = 300
    n_target_test: int = 100
    classes: Tuple[str, ...] = ISPRS_CLASSES
    frequencies: Dict[str, float] = field(default_factory=lambda: dict(POTSDAM_FREQUENCIES))
    sensor_shift: bool = True
    resolution_shift: bool = False
    class_representation_shift: bool = False
    shifted_classes: Tuple[str, ...] = ("low_vegetation", "tree", "clutter")
    channel_permutation: Tuple[int, int, int] = (1, 0, 2)
    tone_gain: Tuple[float, float, float] = (1.1, 0.9, 0.8)
    tone_offset: Tuple[float, float, float] = (0.05, 0.0, 0.1)
    resolution_factor: float = 5.0 / 9.0
    noise_std: float = 0.03

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.shifted_classes = tuple(self.shifted_classes)
        self.channel_permutation = tuple(int(i) for i in self.channel_permutation)
        self.tone_gain = tuple(float(v) for v in self.tone_gain)
        self.tone_offset = tuple(float(v) for v in self.tone_offset)

    def validate(self) -> None:
        if self.tile_size < 16 or self.tile_size % 16:
            raise ParameterError(f"tile_size must be >= 16 and divisible by 16, got {self.tile_size}")
        if not 2 <= len(self.classes) <= 6 or len(set(self.classes)) != len(self.classes):
            raise ParameterError(f"classes must be 2-6 distinct ISPRS class names, got {self.classes}")
        unknown = [c for c in self.classes if c not in ISPRS_CLASSES]
        if unknown:
            raise ParameterError(f"unknown classes {unknown}; choose from {ISPRS_CLASSES}")
        if self.classes[0] != "impervious_surfaces":
            raise ParameterError("the first class must be impervious_surfaces (the scene background)")
        for n in (self.n_source_train, self.n_source_test, self.n_target_train, self.n_target_test):
            if n < 0:
                raise ParameterError("patch counts must be >= 0")
        fg = [c for c in self.classes[1:]]
        if any(self.frequencies.get(c, 0) < 0 for c in fg):
            raise ParameterError("class frequencies must be >= 0")
        if sum(self.frequencies.get(c, 0) for c in fg) > 95:
            raise ParameterError("foreground frequency targets exceed 95% of the tile")
        if sorted(self.channel_permutation) != [0, 1, 2]:
            raise ParameterError(f"channel_permutation must permute (0, 1, 2), got {self.channel_permutation}")
        if any(g <= 0 for g in self.tone_gain):
            raise ParameterError("tone gains must be > 0")
        if not 0 < self.resolution_factor <= 1:
            raise ParameterError("resolution_factor must be in (0, 1]")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class Shape:
    """One painted primitive; ``kind`` is rect, disk, blob, field or speck."""

    cls: int
    kind: str
    params: Tuple[float, ...]


@functools.lru_cache(maxsize=8)
def _grid(s: int):
    yy, xx = np.mgrid[0:s, 0:s]
    return yy, xx


def _disk(m: np.ndarray, cy: float, cx: float, r: float) -> None:
    s = m.shape[0]
    y0, y1 = max(0, int(math.floor(cy - r))), min(s, int(math.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(math.floor(cx - r))), min(s, int(math.ceil(cx + r)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = _grid(s)
    m[y0:y1, x0:x1] |= (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2 <= r * r


def rasterize(shape: Shape, s: int) -> np.ndarray:
    """Boolean pixel coverage of one primitive on an s x s tile."""
    m = np.zeros((s, s), dtype=bool)
    p = shape.params
    if shape.kind in ("rect", "field", "speck"):
        y0, x0, h, w = p
        # pixel (y, x) is covered when y0 <= y < y0 + h
        ys, ye = max(0, math.ceil(y0)), min(s, math.ceil(y0 + h))
        xs, xe = max(0, math.ceil(x0)), min(s, math.ceil(x0 + w))
        if ys < ye and xs < xe:
            m[ys:ye, xs:xe] = True
    elif shape.kind == "disk":
        _disk(m, *p)
    elif shape.kind == "blob":
        for i in range(0, len(p), 3):
            _disk(m, *p[i : i + 3])
    else:
        raise ParameterError(f"unknown shape kind {shape.kind}")
    return m


def render_mask(shapes: Sequence[Shape], s: int) -> np.ndarray:
    """Rebuild a class mask from its primitives: first painted wins, background 0."""
    mask = np.zeros((s, s), dtype=np.uint8)
    free = np.ones((s, s), dtype=bool)
    for sh in shapes:
        px = rasterize(sh, s) & free
        mask[px] = sh.cls
        free &= ~px
    return mask


def _sample_shape(name: str, cls: int, s: int, rng: np.random.Generator, alt: bool) -> Shape:
    u = s / 64.0
    if name == "building":
        h, w = rng.uniform(8, 24, size=2) * u
        return Shape(cls, "rect", (rng.uniform(-4, s - 4), rng.uniform(-4, s - 4), round(h), round(w)))
    if name == "car":
        h, w = (3 * u, 6 * u) if rng.random() < 0.5 else (6 * u, 3 * u)
        return Shape(cls, "rect", (rng.integers(0, s), rng.integers(0, s), round(h), round(w)))
    if name == "tree":
        if alt:  # small clustered crowns
            return Shape(cls, "disk", (rng.uniform(0, s), rng.uniform(0, s), rng.uniform(1.5, 3.0) * u))
        return Shape(cls, "disk", (rng.uniform(0, s), rng.uniform(0, s), rng.uniform(3.5, 7.0) * u))
    if name == "low_vegetation":
        if alt:  # agricultural strips
            h, w = (rng.uniform(14, 30) * u, rng.uniform(6, 12) * u)
            if rng.random() < 0.5:
                h, w = w, h
            return Shape(cls, "field", (rng.uniform(-4, s - 4), rng.uniform(-4, s - 4), round(h), round(w)))
        cy, cx = rng.uniform(0, s, size=2)
        parts = []
        for _ in range(int(rng.integers(3, 6))):
            parts += [cy + rng.normal(0, 4 * u), cx + rng.normal(0, 4 * u), rng.uniform(2.5, 5.5) * u]
        return Shape(cls, "blob", tuple(parts))
    if name == "clutter":
        size = rng.uniform(4, 8) * u if alt else rng.uniform(1, 3) * u
        return Shape(cls, "speck", (rng.integers(0, s), rng.integers(0, s), round(size), round(size)))
    raise ParameterError(f"no shape sampler for class {name}")


def _scene(cfg: SynthConfig, rng: np.random.Generator, alt_classes: frozenset):
    """Sample primitives until every class reaches its pixel-share target."""
    s = cfg.tile_size
    area = s * s
    free = np.ones((s, s), dtype=bool)
    shapes: List[Shape] = []
    index = {name: i for i, name in enumerate(cfg.classes)}
    for name in PAINT_ORDER:
        if name not in index:
            continue
        target = cfg.frequencies.get(name, 0.0) / 100.0 * area
        # Randomize the per-tile target so tiles differ in composition.
        target *= rng.uniform(0.7, 1.3)
        count = 0
        for _ in range(400):
            if count >= target:
                break
            sh = _sample_shape(name, index[name], s, rng, name in alt_classes)
            cover = rasterize(sh, s) & free
            new = int(cover.sum())
            if new == 0:
                continue
            if count + new > target and (count + new - target) > (target - count):
                break
            shapes.append(sh)
            free &= ~cover
            count += new
    return shapes


def _texture(name: str, kind: str, ys: np.ndarray, xs: np.ndarray, s: int, rng: np.random.Generator) -> np.ndarray:
    """Brightness modulation for the pixels (ys, xs) of one primitive."""
    if kind == "field":
        period = 3 + int(rng.integers(0, 2))
        phase = (ys if rng.random() < 0.5 else xs) % period
        return np.where(phase == 0, -0.12, 0.04)
    if name == "tree" and kind == "disk":
        return rng.normal(0, 0.06, size=ys.shape)
    if name == "building":
        # roof ridge: one half slightly darker
        split = rng.integers(0, s)
        return np.where((xs if rng.random() < 0.5 else ys) < split, -0.05, 0.03)
    return np.zeros(ys.shape)


def _paint(cfg: SynthConfig, shapes: Sequence[Shape], rng: np.random.Generator, alt_classes: frozenset):
    s = cfg.tile_size
    img = np.empty((3, s, s), dtype=np.float64)
    img[:] = np.array(BASE_COLOURS["impervious_surfaces"])[:, None, None]
    img += rng.normal(0, 0.02, size=(1, s, s))
    free = np.ones((s, s), dtype=bool)
    mask = np.zeros((s, s), dtype=np.uint8)
    for sh in shapes:
        name = cfg.classes[sh.cls]
        px = rasterize(sh, s) & free
        free &= ~px
        mask[px] = sh.cls
        colour = np.array(BASE_COLOURS[name]) + rng.normal(0, 0.04, size=3)
        if name == "car":
            colour = rng.permutation(np.array(BASE_COLOURS["car"])) * 0.5 + colour * 0.5
        if name in alt_classes and name == "tree":
            colour = colour * 0.85
        ys, xs = np.nonzero(px)
        tex = _texture(name, sh.kind, ys, xs, s, rng)
        img[:, ys, xs] = colour[:, None] + tex[None, :]
    img *= rng.uniform(0.92, 1.08)
    img += rng.normal(0, cfg.noise_std, size=img.shape)
    return np.clip(img, 0, 1), mask


def _resample(img: np.ndarray, factor: float) -> np.ndarray:
    """Blur + downscale by ``factor`` then rescale to the original size, per channel."""
    c, h, w = img.shape
    small = (max(1, round(w * factor)), max(1, round(h * factor)))
    out = np.empty_like(img)
    for i in range(c):
        ch = Image.fromarray(img[i].astype(np.float32), mode="F")
        ch = ch.resize(small, Image.BILINEAR).resize((w, h), Image.BILINEAR)
        out[i] = np.asarray(ch)
    return out


def sensor_transform(img01: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Fixed channel permutation followed by a per-channel affine tone curve."""
    out = img01[list(cfg.channel_permutation)]
    gain = np.array(cfg.tone_gain)[:, None, None]
    offset = np.array(cfg.tone_offset)[:, None, None]
    return np.clip(out * gain + offset, 0, 1)


def _make_patch(cfg: SynthConfig, seed_seq: np.random.SeedSequence, target: bool, split: str, idx: int, domain: str):
    rng = np.random.default_rng(seed_seq)
    alt = frozenset(cfg.shifted_classes) if (target and cfg.class_representation_shift) else frozenset()
    shapes = _scene(cfg, rng, alt)
    img, mask = _paint(cfg, shapes, rng, alt)
    if target and cfg.resolution_shift:
        img = np.clip(_resample(img, cfg.resolution_factor), 0, 1)
    if target and cfg.sensor_shift:
        img = sensor_transform(img, cfg)
    u8 = np.rint(img * 255).astype(np.uint8)
    return LabeledPatch(normalize(u8), mask, (f"{domain}_{split}_{idx:05d}", 0, 0), split), shapes


@dataclass
class SynthBenchmark:
    source: DomainDataset  # labelled, splits train/test
    target: DomainDataset  # images only, splits train/test
    target_labels: List[np.ndarray]  # hidden masks aligned with ``target`` patches

    def target_eval(self, split: str = "test") -> DomainDataset:
        """Target patches with their hidden labels attached (evaluation only)."""
        labelled = self.target.with_masks(self.target_labels, name="target_eval")
        return labelled.split(split) if split else labelled


def synth_schema(cfg: SynthConfig, target: bool) -> DatasetSchema:
    channels = ("R", "G", "B")
    if target and cfg.sensor_shift:
        channels = ("IR", "R", "G")
    resolution = 9.0 if (target and cfg.resolution_shift) else 5.0
    palette = {c: ISPRS_PALETTE[c] for c in cfg.classes}
    return DatasetSchema(cfg.classes, palette, channels, resolution)


def synth_generate(cfg: SynthConfig = SynthConfig(), seed: int = 0, return_shapes: bool = False):
    """Generate a labelled source domain and a shifted, label-hidden target domain.

    Each tile draws from its own child seed, so output is bit-identical for a
    given ``seed`` regardless of generation order.
    """
    cfg.validate()
    root = np.random.SeedSequence(seed)
    src_seq, tgt_seq = root.spawn(2)
    src_patches, tgt_patches, all_shapes = [], [], {"source": [], "target": []}
    for target, seq in ((False, src_seq), (True, tgt_seq)):
        n_train = cfg.n_target_train if target else cfg.n_source_train
        n_test = cfg.n_target_test if target else cfg.n_source_test
        children = seq.spawn(n_train + n_test)
        domain = "target" if target else "source"
        for i, child in enumerate(children):
            split = "train" if i < n_train else "test"
            patch, shapes = _make_patch(cfg, child, target, split, i, domain)
            (tgt_patches if target else src_patches).append(patch)
            all_shapes[domain].append(shapes)
    source = DomainDataset(synth_schema(cfg, False), src_patches, "source")
    target_full = DomainDataset(synth_schema(cfg, True), tgt_patches, "target")
    bench = SynthBenchmark(
        source=source,
        target=target_full.without_masks(),
        target_labels=[p.mask for p in tgt_patches],
    )
    if return_shapes:
        return bench, all_shapes
    return bench
