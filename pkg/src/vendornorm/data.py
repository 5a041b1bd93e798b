"""Ingestion, preprocessing, splitting, batching and raster I/O.

The preprocessing follows the clinical recipe: the top 1% of pixel values of
the whole (per-vendor) dataset saturate at 255 and the rest scale linearly,
and only the central half of every volume is kept.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateInputError

RAW = "raw"
CLIPPED = "clipped-0-255"
NORMALIZED = "normalized-[-1,1]"
VALUE_RANGES = (RAW, CLIPPED, NORMALIZED)

DOMAINS = ("A", "B")
SPLITS = ("train", "val", "test")

RASTER_MAGIC = b"VNRASTR1"
RASTER_HEADER = struct.Struct("<8sII")  # 16 bytes: magic, height, width
MANIFEST_COLUMNS = ("path", "domain", "split", "source_id", "kind")


@dataclass
class SliceImage:
    pixels: np.ndarray
    value_range: str = RAW
    source_id: str = ""
    name: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ContractError(f"SliceImage needs a 2D array, got shape {self.pixels.shape}")
        if self.value_range not in VALUE_RANGES:
            raise ContractError(f"unknown value_range {self.value_range!r}")
        lo, hi = {CLIPPED: (0.0, 255.0), NORMALIZED: (-1.0, 1.0)}.get(
            self.value_range, (-math.inf, math.inf)
        )
        if self.pixels.size and (self.pixels.min() < lo or self.pixels.max() > hi):
            raise ContractError(
                f"pixels of {self.source_id or 'image'} outside declared range {self.value_range}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DomainDataset:
    images: list[SliceImage]
    domain_tag: str
    split: str = "train"

    def __post_init__(self):
        if self.domain_tag not in DOMAINS:
            raise ConfigError(f"domain_tag must be one of {DOMAINS}, got {self.domain_tag!r}")
        if self.split not in SPLITS + ("all",):
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def source_ids(self) -> set[str]:
        return {im.source_id for im in self.images}

    def as_array(self) -> np.ndarray:
        """Stack to an (N, 1, H, W) float32 array."""
        return np.stack([im.pixels for im in self.images])[:, None].astype(np.float32)


@dataclass
class VolumeStack:
    slices: list[SliceImage] = field(default_factory=list)

    def __post_init__(self):
        if len(self.slices) < 2:
            raise DegenerateInputError("a volume needs at least 2 slices")
        ids = {s.source_id for s in self.slices}
        if len(ids) != 1:
            raise ContractError(f"volume slices span several source ids: {sorted(ids)}")

    @property
    def slice_count(self) -> int:
        return len(self.slices)

    @property
    def source_id(self) -> str:
        return self.slices[0].source_id


# --------------------------------------------------------------------------
# preprocessing

def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the smallest sample with at least q% of data at or below it."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if flat.size == 0:
        raise DegenerateInputError("percentile of an empty population")
    rank = max(1, math.ceil(q / 100.0 * flat.size))
    return float(flat[rank - 1])


def clip_and_scale(images: Sequence[SliceImage], percentile: float = 99.0) -> list[SliceImage]:
    """Saturate the dataset-wide top 1% at 255 and scale the rest by 255/p99.

    The threshold is computed over the pooled pixels of all ``images``; call
    once per vendor (default) or once over everything for global pooling.
    """
    if not images:
        raise DegenerateInputError("clip_and_scale needs at least one image")
    for im in images:
        if im.value_range != RAW:
            raise ContractError(f"{im.source_id}: expected raw range, got {im.value_range}")
    pooled = np.concatenate([im.pixels.ravel() for im in images])
    p99 = nearest_rank_percentile(pooled, percentile)
    if p99 <= 0:
        raise DegenerateInputError(f"p{percentile:g} of the dataset is {p99}; cannot scale")
    out = []
    for im in images:
        scaled = np.where(im.pixels >= p99, 255.0, im.pixels * (255.0 / p99))
        out.append(replace(im, pixels=np.clip(scaled, 0.0, 255.0), value_range=CLIPPED))
    return out


def select_middle_slices(volume: VolumeStack) -> VolumeStack:
    n = volume.slice_count
    if n < 4:
        raise DegenerateInputError(f"need at least 4 slices to take the middle half, got {n}")
    start = n // 4
    return VolumeStack(volume.slices[start:start + n // 2])


def to_model_range(img: SliceImage) -> SliceImage:
    if img.value_range != CLIPPED:
        raise ContractError(f"to_model_range expects {CLIPPED}, got {img.value_range}")
    return replace(img, pixels=img.pixels / 127.5 - 1.0, value_range=NORMALIZED)


def from_model_range(img: SliceImage) -> SliceImage:
    if img.value_range != NORMALIZED:
        raise ContractError(f"from_model_range expects {NORMALIZED}, got {img.value_range}")
    return replace(img, pixels=np.clip((img.pixels + 1.0) * 127.5, 0.0, 255.0), value_range=CLIPPED)


def to_display_scale(img: SliceImage) -> np.ndarray:
    """Pixels on the 0-255 scale whatever the declared range."""
    if img.value_range == NORMALIZED:
        return from_model_range(img).pixels
    return img.pixels


def center_crop_resize(pixels: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to a square, then area-resample to ``size`` x ``size``."""
    import torch
    import torch.nn.functional as F

    h, w = pixels.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = np.ascontiguousarray(pixels[top:top + side, left:left + side], dtype=np.float64)
    if side == size:
        return crop
    t = torch.from_numpy(crop)[None, None]
    return F.interpolate(t, size=(size, size), mode="area")[0, 0].numpy()


# --------------------------------------------------------------------------
# splitting and batching

def assign_splits(
    source_ids: Iterable[str],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, str]:
    """Randomly assign whole sources (patients/phantoms) to train/val/test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    ids = sorted(set(source_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    out = {}
    for rank, idx in enumerate(order):
        out[ids[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def split_dataset(dataset: DomainDataset, assignment: dict[str, str]) -> dict[str, DomainDataset]:
    parts: dict[str, list[SliceImage]] = {s: [] for s in SPLITS}
    for im in dataset.images:
        parts[assignment[im.source_id]].append(im)
    return {s: DomainDataset(ims, dataset.domain_tag, s) for s, ims in parts.items()}


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(dataset: DomainDataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """One shuffled epoch of (B, 1, H, W) float32 batches; the last one may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ConfigError(f"dataset {dataset.domain_tag}/{dataset.split} is empty")
    stack = dataset.as_array()
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield stack[order[start:start + batch_size]]


class BatchStream:
    """Endless batch source whose position is a pure function of the step index.

    Resuming at step k therefore reproduces exactly the batches an
    uninterrupted run would have seen.
    """

    def __init__(self, dataset: DomainDataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        if len(dataset) == 0:
            raise ConfigError(f"dataset {dataset.domain_tag}/{dataset.split} is empty")
        self.stack = dataset.as_array()
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = math.ceil(len(dataset) / batch_size)
        self._cache: tuple[int, np.ndarray] | None = None

    def batch(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.per_epoch)
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, epoch_order(len(self.stack), self.seed, epoch))
        order = self._cache[1]
        return self.stack[order[k * self.batch_size:(k + 1) * self.batch_size]]


# --------------------------------------------------------------------------
# raster and manifest I/O

def write_raster(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"raster must be 2D, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(RASTER_HEADER.pack(RASTER_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(RASTER_HEADER.size)
        if len(header) != RASTER_HEADER.size:
            raise ContractError(f"{path}: truncated raster header")
        magic, h, w = RASTER_HEADER.unpack(header)
        if magic != RASTER_MAGIC:
            raise ContractError(f"{path}: not a raster file (bad magic)")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise ContractError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    """8-bit grayscale preview; pixels are expected on the 0-255 scale."""
    from PIL import Image

    Image.fromarray(np.clip(np.rint(pixels), 0, 255).astype(np.uint8), mode="L").save(path)


def load_pixels(path: str | Path) -> np.ndarray:
    """Read a float raster, a .npy array or any image Pillow understands."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    if path.suffix == ".png" or path.suffix in (".jpg", ".jpeg", ".tif", ".tiff"):
        from PIL import Image

        return np.asarray(Image.open(path).convert("F"), dtype=np.float64)
    return read_raster(path)


@dataclass
class ManifestRecord:
    path: str
    domain: str
    split: str
    source_id: str
    kind: str = "image"


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.path, r.domain, r.split, r.source_id, r.kind])


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Parse a tab-separated manifest; the ``kind`` column is optional."""
    records = []
    with open(path, encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh, delimiter="\t") if row and not row[0].startswith("#")]
    if rows and rows[0][0] == "path":
        rows = rows[1:]
    for lineno, row in enumerate(rows, start=2):
        if len(row) not in (4, 5):
            raise ConfigError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields, got {len(row)}")
        rec = ManifestRecord(*row)
        if rec.domain not in DOMAINS:
            raise ConfigError(f"{path}:{lineno}: unknown domain {rec.domain!r}")
        records.append(rec)
    return records


def image_name(path: str) -> str:
    """Stable image name: the file name without directory or extension."""
    return Path(path).name.split(".")[0]


def load_manifest_datasets(manifest: str | Path, split: str, value_range: str = CLIPPED) -> dict[str, DomainDataset]:
    """Load the image records of one split, grouped by domain."""
    base = Path(manifest).parent
    records = read_manifest(manifest)
    out = {}
    for dom in DOMAINS:
        ims = [
            SliceImage(load_pixels(base / r.path), value_range, r.source_id, image_name(r.path))
            for r in records
            if r.kind == "image" and r.domain == dom and r.split == split
        ]
        out[dom] = DomainDataset(ims, dom, split)
    return out


def load_manifest_masks(manifest: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Boolean masks per image name, e.g. ``masks["A_0003"]["dense"]``.

    A mask file ``<name>.<kind>.f32`` belongs to the image ``<name>.f32``.
    """
    base = Path(manifest).parent
    out: dict[str, dict[str, np.ndarray]] = {}
    for r in read_manifest(manifest):
        if r.kind != "image":
            out.setdefault(image_name(r.path), {})[r.kind] = read_raster(base / r.path) > 0.5
    return out


def prepare(
    records: Sequence[ManifestRecord],
    base_dir: str | Path,
    size: int,
    clip: bool = True,
    middle_slices: bool = True,
    pool_globally: bool = False,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> list[tuple[ManifestRecord, SliceImage]]:
    """Run the full preprocessing recipe on raw user images.

    Records sharing a source_id form one volume in manifest order. Records
    whose split is empty or ``auto`` get a source-level random split.
    """
    if size < 32 or size % 4:
        raise ConfigError(f"size must be >= 32 and a multiple of 4, got {size}")
    base_dir = Path(base_dir)
    volumes: dict[tuple[str, str], list[ManifestRecord]] = {}
    for r in records:
        if r.kind == "image":
            volumes.setdefault((r.domain, r.source_id), []).append(r)

    auto = sorted({sid for (_, sid), rs in volumes.items() if rs[0].split in ("", "auto")})
    assignment = assign_splits(auto, split_fractions, seed) if auto else {}

    kept: list[tuple[ManifestRecord, SliceImage]] = []
    for (dom, sid), rs in volumes.items():
        slices = [SliceImage(load_pixels(base_dir / r.path), RAW, sid, image_name(r.path)) for r in rs]
        pairs = list(zip(rs, slices))
        if middle_slices and len(pairs) > 1:
            start, n = len(pairs) // 4, len(pairs)
            middle = select_middle_slices(VolumeStack(slices))
            pairs = pairs[start:start + n // 2]
            assert len(pairs) == middle.slice_count
        for r, im in pairs:
            split = assignment.get(sid, r.split)
            kept.append((replace(r, split=split), im))

    splits_by_source: dict[str, set[str]] = {}
    for r, _ in kept:
        splits_by_source.setdefault(r.source_id, set()).add(r.split)
    leaked = sorted(s for s, sp in splits_by_source.items() if len(sp) > 1)
    if leaked:
        raise ConfigError(f"source ids assigned to several splits: {leaked[:5]}")

    if clip:
        groups = [list(range(len(kept)))] if pool_globally else [
            [i for i, (r, _) in enumerate(kept) if r.domain == dom] for dom in DOMAINS
        ]
        images = [im for _, im in kept]
        for idx in groups:
            if not idx:
                continue
            scaled = clip_and_scale([images[i] for i in idx])
            for i, im in zip(idx, scaled):
                images[i] = im
        kept = [(r, im) for (r, _), im in zip(kept, images)]
    else:
        kept = [(r, replace(im, pixels=np.clip(im.pixels, 0, 255), value_range=CLIPPED)) for r, im in kept]

    return [(r, replace(im, pixels=np.clip(center_crop_resize(im.pixels, size), 0, 255))) for r, im in kept]
