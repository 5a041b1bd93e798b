"""Shape-preservation and intensity evaluation of trained translators.

Shape preservation is the Dice overlap between the object mask of an image
and the object mask of its translation. Masks are extracted automatically
(Otsu threshold, largest component, hole filling) as a stand-in for manual
annotation. Intensity normalization is judged by dense-tissue mean
intensities before and after translation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .data import NORMALIZED, DomainDataset, SliceImage, to_display_scale
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class BinaryMask:
    grid: np.ndarray
    source_id: str = ""
    kind: str = "object"  # object | dense-region

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)


def _grid(m) -> np.ndarray:
    return m.grid if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    ga, gb = _grid(a), _grid(b)
    if ga.shape != gb.shape:
        raise ContractError(f"mask shapes differ: {ga.shape} vs {gb.shape}")
    total = int(ga.sum()) + int(gb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ga, gb).sum()) / total


def _border_and_center(px: np.ndarray) -> tuple[float, float]:
    h, w = px.shape
    bw = max(1, min(h, w) // 16)
    border = np.concatenate([px[:bw].ravel(), px[-bw:].ravel(), px[:, :bw].ravel(), px[:, -bw:].ravel()])
    center = px[h // 4: h - h // 4, w // 4: w - w // 4]
    return float(border.mean()), float(center.mean())


def mask_from_image(img: SliceImage | np.ndarray) -> BinaryMask:
    """Otsu foreground, largest connected component, holes filled.

    The object is assumed brighter than the background; if the frame border
    is brighter than the center the image is inverted first.
    """
    if isinstance(img, SliceImage):
        px, sid = to_display_scale(img), img.source_id
    else:
        px, sid = np.asarray(img, dtype=np.float64), ""
    if px.size == 0 or np.ptp(px) == 0:
        return BinaryMask(np.zeros(px.shape, dtype=bool), sid)
    border, center = _border_and_center(px)
    if border > center:
        px = px.max() - px
    fg = px > threshold_otsu(px)
    labels, n = ndimage.label(fg)
    if n == 0:
        return BinaryMask(np.zeros(px.shape, dtype=bool), sid)
    sizes = ndimage.sum(fg, labels, index=np.arange(1, n + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return BinaryMask(ndimage.binary_fill_holes(largest), sid)


def dense_intensity_stats(img: SliceImage | np.ndarray, dense) -> float:
    """Mean intensity under the dense-tissue mask, on the 0-255 scale."""
    px = to_display_scale(img) if isinstance(img, SliceImage) else np.asarray(img, dtype=np.float64)
    g = _grid(dense)
    if g.shape != px.shape:
        raise ContractError(f"mask shape {g.shape} does not match image {px.shape}")
    if not g.any():
        raise ContractError("dense-tissue mask is empty")
    return float(px[g].mean())


def composite_difference(before, after) -> np.ndarray:
    """RGB uint8 raster of after - before: green where positive, magenta where negative.

    Both signs share one scale, the largest absolute difference.
    """
    b = to_display_scale(before) if isinstance(before, SliceImage) else np.asarray(before, dtype=np.float64)
    a = to_display_scale(after) if isinstance(after, SliceImage) else np.asarray(after, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {b.shape} vs {a.shape}")
    d = a - b
    scale = np.abs(d).max()
    rgb = np.zeros(d.shape + (3,), dtype=np.uint8)
    if scale == 0:
        return rgb
    pos = np.rint(np.clip(d, 0, None) / scale * 255).astype(np.uint8)
    neg = np.rint(np.clip(-d, 0, None) / scale * 255).astype(np.uint8)
    rgb[..., 0] = neg
    rgb[..., 1] = pos
    rgb[..., 2] = neg
    return rgb


# --------------------------------------------------------------------------
# whole-run evaluation

@dataclass
class ImageEval:
    name: str
    dice: float
    dense_before: float | None = None
    dense_after: float | None = None


@dataclass
class DirectionResult:
    images: list[ImageEval] = field(default_factory=list)

    @property
    def dice(self) -> list[float]:
        return [r.dice for r in self.images]

    @property
    def dense_before(self) -> list[float]:
        return [r.dense_before for r in self.images if r.dense_before is not None]

    @property
    def dense_after(self) -> list[float]:
        return [r.dense_after for r in self.images if r.dense_after is not None]

    @property
    def skipped(self) -> int:
        return sum(r.dense_before is None for r in self.images)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.images else math.nan

    @property
    def std_dice(self) -> float:
        return float(np.std(self.dice)) if self.images else math.nan


@dataclass
class EvalReport:
    a_to_b: DirectionResult
    b_to_a: DirectionResult
    metadata: dict = field(default_factory=dict)

    def directions(self):
        return (("AtoB", self.a_to_b), ("BtoA", self.b_to_a))

    def summary(self) -> str:
        lines = ["direction\tmean_dice\tstd_dice\tn\tskipped_intensity\tdense_before\tdense_after"]
        for tag, r in self.directions():
            before = np.mean(r.dense_before) if r.dense_before else math.nan
            after = np.mean(r.dense_after) if r.dense_after else math.nan
            lines.append(f"{tag}\t{r.mean_dice:.4f}\t{r.std_dice:.4f}\t{len(r.images)}\t{r.skipped}\t{before:.2f}\t{after:.2f}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
        with open(out / "per_image.tsv", "w") as fh:
            fh.write("direction\tname\tdice\tdense_before\tdense_after\n")
            for tag, r in self.directions():
                for e in r.images:
                    fh.write(f"{tag}\t{e.name}\t{e.dice:.6f}\t{fmt(e.dense_before)}\t{fmt(e.dense_after)}\n")
        (out / "summary.txt").write_text(self.summary() + "\n")


def _to_model(ds: DomainDataset) -> np.ndarray:
    stack = np.stack([to_display_scale(im) for im in ds.images])[:, None]
    return (stack / 127.5 - 1.0).astype(np.float32)


def evaluate_direction(generator, dataset: DomainDataset, dense_masks: Mapping[str, np.ndarray] | None) -> DirectionResult:
    from .trainer import translate

    res = DirectionResult()
    if len(dataset) == 0:
        return res
    outputs = translate(generator, _to_model(dataset))
    for im, out in zip(dataset.images, outputs[:, 0]):
        translated = SliceImage(np.clip(out, -1, 1), NORMALIZED, im.source_id, im.name)
        entry = ImageEval(im.name, dice(mask_from_image(im), mask_from_image(translated)))
        dense = None if dense_masks is None else dense_masks.get(im.name)
        if dense is not None and _grid(dense).any():
            entry.dense_before = dense_intensity_stats(im, dense)
            entry.dense_after = dense_intensity_stats(translated, dense)
        res.images.append(entry)
    if dense_masks is not None and res.skipped:
        log.warning("%d image(s) without a dense-tissue mask were left out of the intensity statistics", res.skipped)
    return res


def evaluate_run(state_or_checkpoint, test_a: DomainDataset, test_b: DomainDataset,
                 dense_masks: Mapping[str, np.ndarray] | None = None,
                 out_dir: str | Path | None = None) -> EvalReport:
    """Translate both test sets and score shape preservation and intensities."""
    from .trainer import Checkpoint

    state = state_or_checkpoint.restore() if isinstance(state_or_checkpoint, Checkpoint) else state_or_checkpoint
    report = EvalReport(
        evaluate_direction(state.g_ab, test_a, dense_masks),
        evaluate_direction(state.g_ba, test_b, dense_masks),
        {"iteration": state.iteration, "variant": state.config.variant, "fov": state.config.fov_choice},
    )
    if out_dir is not None:
        report.write(out_dir)
        plot_intensity_distributions(report, Path(out_dir) / "dense_intensity.png")
    return report


def plot_intensity_distributions(report: EvalReport, path: str | Path) -> None:
    """Three panels: original A vs original B, original A vs normalized B, original B vs normalized A."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ab, ba = report.a_to_b, report.b_to_a
    panels = [
        ("original A vs original B", ab.dense_before, "original A", ba.dense_before, "original B"),
        ("original A vs normalized B", ab.dense_before, "original A", ba.dense_after, "normalized B (B->A)"),
        ("original B vs normalized A", ba.dense_before, "original B", ab.dense_after, "normalized A (A->B)"),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5), sharex=True)
    bins = np.linspace(0, 255, 52)
    for ax, (title, x, lx, y, ly) in zip(axes, panels):
        ax.hist(x, bins=bins, alpha=0.6, label=lx)
        ax.hist(y, bins=bins, alpha=0.6, label=ly)
        ax.set_title(title)
        ax.set_xlabel("dense-tissue mean intensity")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
