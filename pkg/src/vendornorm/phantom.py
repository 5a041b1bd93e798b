"""Synthetic two-vendor phantom populations with known masks.

Every phantom is a smooth star-shaped blob (an ellipse whose radius is
perturbed by a few low-order Fourier terms) containing blobby "dense tissue"
patches. A :class:`VendorStyle` decides how that anatomy is rendered:
intensity gain/offset, a separate dense-tissue gain, pixel noise and an
optional noisy halo ring around the object.

The halo defaults are free parameters chosen to be visible but below the
object/background Otsu split; they are not calibrated against scanner data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .data import CLIPPED, DomainDataset, SliceImage
from .errors import ConfigError

# anatomy levels before vendor styling, on the 0-255 scale
TISSUE_LEVEL = 110.0
DENSE_LEVEL = 210.0
NOISE_CLIP = 4.0  # pixel noise is a Gaussian truncated at this many sigmas
MIN_DENSE_GAP = 0.2 * 255.0


@dataclass(frozen=True)
class ShapeFamily:
    center_jitter: float = 0.06
    radius_range: tuple[float, float] = (0.24, 0.40)
    roughness: float = 0.07
    n_harmonics: int = 5


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_images: int = 200
    shape_family: ShapeFamily = field(default_factory=ShapeFamily)
    dense_region_fraction: float = 0.25
    seed: int = 7

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 4:
            raise ConfigError(f"image_size must be >= 32 and a multiple of 4, got {self.image_size}")
        if self.n_images < 1:
            raise ConfigError(f"n_images must be >= 1, got {self.n_images}")
        if not 0 < self.dense_region_fraction <= 0.5:
            raise ConfigError(f"dense_region_fraction must lie in (0, 0.5], got {self.dense_region_fraction}")
        lo, hi = self.shape_family.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"radius_range must satisfy 0 < lo <= hi < 0.5, got {(lo, hi)}")
        if not 0 <= self.shape_family.roughness < 0.3:
            raise ConfigError(f"roughness must lie in [0, 0.3), got {self.shape_family.roughness}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class VendorStyle:
    base_gain: float = 1.0
    base_offset: float = 10.0
    dense_gain: float = 1.0
    noise_sigma: float = 5.0
    halo_amplitude: float = 0.0
    halo_width: float = 4.0

    def validate(self) -> None:
        if self.halo_amplitude < 0:
            raise ConfigError(f"halo_amplitude must be >= 0, got {self.halo_amplitude}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.halo_width < 0:
            raise ConfigError(f"halo_width must be >= 0, got {self.halo_width}")

    @property
    def background_level(self) -> float:
        return self.base_offset

    @property
    def tissue_level(self) -> float:
        return self.base_offset + self.base_gain * TISSUE_LEVEL

    @property
    def dense_level(self) -> float:
        """Noise-free dense-tissue intensity; the target of the dense-region mean."""
        return self.base_offset + self.dense_gain * DENSE_LEVEL


# GE-like source: bright, noisier, with a halo. SE-like target: darker, cleaner.
STYLE_A = VendorStyle(base_gain=1.0, base_offset=10.0, dense_gain=1.0, noise_sigma=5.0,
                      halo_amplitude=40.0, halo_width=4.0)
STYLE_B = VendorStyle(base_gain=0.6, base_offset=5.0, dense_gain=0.6, noise_sigma=3.0,
                      halo_amplitude=0.0, halo_width=4.0)


class PhantomMasks(NamedTuple):
    object: np.ndarray
    dense: np.ndarray


class PhantomSet(NamedTuple):
    domain_a: DomainDataset
    domain_b: DomainDataset
    masks: dict[str, PhantomMasks]  # keyed by image name


def check_styles(style_a: VendorStyle, style_b: VendorStyle) -> None:
    style_a.validate()
    style_b.validate()
    gap = abs(style_a.dense_level - style_b.dense_level)
    if gap < MIN_DENSE_GAP:
        raise ConfigError(
            f"styles too similar: dense levels {style_a.dense_level:.1f} vs {style_b.dense_level:.1f} "
            f"differ by {gap:.1f} < {MIN_DENSE_GAP:.1f} (20% of range)"
        )


def sample_shape(size: int, family: ShapeFamily, rng: np.random.Generator, margin: int) -> np.ndarray:
    """Rejection-sample a star-shaped object mask covering 15-60% of the frame."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(1000):
        cy, cx = size / 2 + rng.uniform(-1, 1, 2) * family.center_jitter * size
        a, b = rng.uniform(*family.radius_range, 2) * size
        tilt = rng.uniform(0, np.pi)
        amps = rng.normal(0, family.roughness, family.n_harmonics) / np.arange(1, family.n_harmonics + 1)
        phases = rng.uniform(0, 2 * np.pi, family.n_harmonics)

        dy, dx = yy - cy, xx - cx
        theta = np.arctan2(dy, dx)
        rho = np.hypot(dy, dx)
        phi = theta - tilt
        ellipse_r = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
        k = np.arange(2, family.n_harmonics + 2)[:, None, None]
        bump = 1 + np.sum(amps[:, None, None] * np.cos(k * theta + phases[:, None, None]), axis=0)
        mask = rho <= ellipse_r * np.clip(bump, 0.5, None)

        frac = mask.mean()
        inner = mask[margin:size - margin, margin:size - margin].sum()
        if 0.15 <= frac <= 0.60 and inner == mask.sum():
            return mask
    raise ConfigError("could not place an object inside the frame; widen the frame or shrink radius_range")


def sample_dense(obj: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Pick the brightest ``fraction`` of object pixels of a smooth random field, away from the edge."""
    field_ = ndimage.gaussian_filter(rng.normal(size=obj.shape), sigma=obj.shape[0] / 16)
    interior = ndimage.binary_erosion(obj, iterations=3)
    if not interior.any():
        interior = obj
    count = min(int(round(fraction * obj.sum())), int(interior.sum()))
    count = max(count, 1)
    idx = np.flatnonzero(interior)
    chosen = idx[np.argsort(-field_.ravel()[idx], kind="stable")[:count]]
    dense = np.zeros(obj.size, dtype=bool)
    dense[chosen] = True
    return dense.reshape(obj.shape)


def truncated_noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(rng.normal(size=shape), -NOISE_CLIP, NOISE_CLIP) * sigma


def render(obj: np.ndarray, dense: np.ndarray, style: VendorStyle, rng: np.random.Generator) -> np.ndarray:
    """Render one anatomy in a vendor style; returns 0-255 pixels."""
    img = np.full(obj.shape, style.background_level)
    img[obj] = style.tissue_level
    img[dense] = style.dense_level
    if style.halo_amplitude > 0 and style.halo_width > 0:
        width = int(np.ceil(style.halo_width))
        ring = ndimage.binary_dilation(obj, iterations=width) & ~obj
        profile = ndimage.gaussian_filter(ring.astype(float), sigma=max(style.halo_width / 3, 0.5))
        profile[obj] = 0.0
        texture = 1.0 + 0.5 * np.clip(rng.normal(size=obj.shape), -NOISE_CLIP, NOISE_CLIP)
        img += style.halo_amplitude * profile * np.clip(texture, 0, None)
    img += truncated_noise(obj.shape, style.noise_sigma, rng)
    return np.clip(img, 0.0, 255.0)


def _population(spec: PhantomSpec, style: VendorStyle, tag: str, rng: np.random.Generator, margin: int):
    size = spec.image_size
    images, masks = [], {}
    for i in range(spec.n_images):
        obj = sample_shape(size, spec.shape_family, rng, margin)
        dense = sample_dense(obj, spec.dense_region_fraction, rng)
        name = f"{tag}_{i:04d}"
        images.append(SliceImage(render(obj, dense, style, rng), CLIPPED, f"phantom-{name}", name))
        masks[name] = PhantomMasks(obj, dense)
    return DomainDataset(images, tag, "all"), masks


def generate_phantom_pairless(spec: PhantomSpec, style_a: VendorStyle, style_b: VendorStyle) -> PhantomSet:
    """Render two unpaired populations from the same shape distribution.

    Domain A and B draw their anatomies from independent random streams, so
    no image in A has a counterpart in B.
    """
    spec.validate()
    check_styles(style_a, style_b)
    root = np.random.SeedSequence(spec.seed)
    stream_a, stream_b = (np.random.default_rng(s) for s in root.spawn(2))
    # one margin for both domains keeps their shape distributions identical
    margin = 2 + int(np.ceil(max(style_a.halo_width, style_b.halo_width)))
    ds_a, masks_a = _population(spec, style_a, "A", stream_a, margin)
    ds_b, masks_b = _population(spec, style_b, "B", stream_b, margin)
    return PhantomSet(ds_a, ds_b, {**masks_a, **masks_b})
