"""Generator and PatchGAN discriminator construction plus receptive-field arithmetic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError, ShapeError

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # convolution | residual-block | transposed-convolution
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    norm: str = "none"  # instance | none
    activation: str = "none"  # leaky-relu | relu | tanh | none
    slope: float = 0.0  # leaky-relu negative slope

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"kernel and stride must be >= 1: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be >= 1: {self}")
        if self.kind not in ("convolution", "residual-block", "transposed-convolution"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.activation not in ("leaky-relu", "relu", "tanh", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")


def compute_receptive_field(layers: Sequence[tuple[int, int]]) -> int:
    """Receptive field of a stack of (kernel, stride) layers.

    Walks backwards from one output unit: r <- r*s + (k - s).

    >>> compute_receptive_field([(4, 2), (4, 2), (4, 1), (4, 1)])
    34
    """
    if not layers:
        raise ContractError("receptive field of an empty layer list")
    r = 1
    for k, s in reversed(list(layers)):
        if k < 1 or s < 1:
            raise ContractError(f"kernel and stride must be >= 1, got {(k, s)}")
        r = r * s + (k - s)
    return r


def parse_layer_list(text: str) -> list[tuple[int, int]]:
    """Parse ``"k:s,k:s,..."`` into (kernel, stride) pairs."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            k, s = (int(v) for v in item.split(":"))
        except ValueError:
            raise ConfigError(f"bad layer {item!r}; expected kernel:stride") from None
        out.append((k, s))
    if not out:
        raise ConfigError("empty layer list")
    return out


# --------------------------------------------------------------------------
# discriminators

# (out_channels, kernel, stride) per layer, straight from the published tables
DISCRIMINATOR_TABLES: dict[int, list[tuple[int, int, int]]] = {
    70: [(64, 4, 2), (128, 4, 2), (256, 4, 2), (512, 4, 1), (1, 4, 1)],
    45: [(64, 5, 2), (128, 5, 2), (256, 5, 1), (1, 5, 1)],
    34: [(64, 4, 2), (128, 4, 2), (256, 4, 1), (1, 4, 1)],
    1: [(64, 1, 1), (128, 1, 1), (1, 1, 1)],
}
FOV_CHOICES = tuple(sorted(DISCRIMINATOR_TABLES))


@dataclass(frozen=True)
class DiscriminatorSpec:
    layers: tuple[LayerSpec, ...]
    declared_fov: int

    @property
    def receptive_field(self) -> int:
        return compute_receptive_field([(l.kernel, l.stride) for l in self.layers])

    @property
    def stride_product(self) -> int:
        p = 1
        for l in self.layers:
            p *= l.stride
        return p

    def validate(self) -> None:
        if self.receptive_field != self.declared_fov:
            raise ConfigError(f"declared FOV {self.declared_fov} but layers give {self.receptive_field}")
        if self.layers[0].norm != "none":
            raise ConfigError("the first discriminator layer must not be normalized")
        for l in self.layers:
            if l.activation == "leaky-relu" and l.slope != LEAKY_SLOPE:
                raise ConfigError(f"leaky-relu slope must be {LEAKY_SLOPE}, got {l.slope}")


def discriminator_spec(fov: int, in_channels: int = 1, width: int = 64) -> DiscriminatorSpec:
    """Layer list for a published FOV variant.

    ``width`` rescales the channel progression (64 reproduces the tables);
    the final single-channel head is never rescaled.
    """
    if fov not in DISCRIMINATOR_TABLES:
        raise ConfigError(f"unsupported FOV {fov}; valid choices are {list(FOV_CHOICES)}")
    if width < 1:
        raise ConfigError(f"discriminator width must be >= 1, got {width}")
    table = DISCRIMINATOR_TABLES[fov]
    layers, c_in = [], in_channels
    for i, (c_out, k, s) in enumerate(table):
        last = i == len(table) - 1
        if not last:
            c_out = max(1, c_out * width // 64)
        layers.append(LayerSpec(
            "convolution", c_in, c_out, k, s,
            norm="none" if i == 0 or last else "instance",
            activation="none" if last else "leaky-relu",
            slope=0.0 if last else LEAKY_SLOPE,
        ))
        c_in = c_out
    spec = DiscriminatorSpec(tuple(layers), fov)
    spec.validate()
    return spec


def conv_padding(kernel: int) -> int:
    # k=4 -> 1, k=5 -> 2, k=1 -> 0
    return (kernel - 1) // 2 if kernel % 2 else kernel // 2 - 1


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic emitting one realness score per overlapping patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        mods: list[nn.Module] = []
        for l in spec.layers:
            mods.append(nn.Conv2d(l.in_channels, l.out_channels, l.kernel, l.stride, conv_padding(l.kernel)))
            if l.norm == "instance":
                mods.append(nn.InstanceNorm2d(l.out_channels))
            if l.activation == "leaky-relu":
                mods.append(nn.LeakyReLU(l.slope, inplace=True))
        self.model = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def build_discriminator(fov_choice: int, in_channels: int = 1, width: int = 64) -> tuple[DiscriminatorSpec, PatchDiscriminator]:
    spec = discriminator_spec(fov_choice, in_channels, width)
    net = PatchDiscriminator(spec)
    init_weights(net)
    return spec, net


def patch_map_size(spec: DiscriminatorSpec, size: int) -> int:
    """Output side length for a square input, by standard conv arithmetic."""
    for l in spec.layers:
        size = (size + 2 * conv_padding(l.kernel) - l.kernel) // l.stride + 1
    return size


def forward_discriminator(net: PatchDiscriminator, img: torch.Tensor) -> torch.Tensor:
    """Score an (N, C, H, H) batch; returns the (N, 1, h, h) patch map."""
    if img.dim() == 2:
        img = img[None, None]
    h, w = img.shape[-2:]
    if h != w:
        raise ShapeError(f"discriminator input must be square, got {h}x{w}")
    if h < net.spec.declared_fov:
        raise ShapeError(f"input {h}x{w} is smaller than the {net.spec.declared_fov}x{net.spec.declared_fov} field of view")
    return net(img)


# --------------------------------------------------------------------------
# generator

@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int
    width: int
    n_residual_blocks: int
    upsample: str
    layers: tuple[LayerSpec, ...]


def default_residual_blocks(image_size: int) -> int:
    return 9 if image_size >= 256 else 6


def generator_spec(image_size: int, n_residual_blocks: int | None = None, width: int = 32,
                   upsample: str = "deconv", channels: int = 1) -> GeneratorSpec:
    """Encoder (2 stride-2 convs), residual transformer, decoder (2 upsamplings), tanh."""
    if image_size < 8 or image_size % 4:
        raise ConfigError(f"image_size must be divisible by 4 (and >= 8), got {image_size}")
    if upsample not in ("deconv", "resize"):
        raise ConfigError(f"upsample must be 'deconv' or 'resize', got {upsample!r}")
    if width < 1:
        raise ConfigError(f"generator width must be >= 1, got {width}")
    if n_residual_blocks is None:
        n_residual_blocks = default_residual_blocks(image_size)
    if n_residual_blocks < 0:
        raise ConfigError(f"n_residual_blocks must be >= 0, got {n_residual_blocks}")
    w = width
    up_kind = "transposed-convolution" if upsample == "deconv" else "convolution"
    layers = [
        LayerSpec("convolution", channels, w, 7, 1, "instance", "relu"),
        LayerSpec("convolution", w, 2 * w, 3, 2, "instance", "relu"),
        LayerSpec("convolution", 2 * w, 4 * w, 3, 2, "instance", "relu"),
        *[LayerSpec("residual-block", 4 * w, 4 * w, 3, 1, "instance", "relu")] * n_residual_blocks,
        LayerSpec(up_kind, 4 * w, 2 * w, 3, 2, "instance", "relu"),
        LayerSpec(up_kind, 2 * w, w, 3, 2, "instance", "relu"),
        LayerSpec("convolution", w, channels, 7, 1, "none", "tanh"),
    ]
    return GeneratorSpec(image_size, width, n_residual_blocks, upsample, tuple(layers))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _activation(l: LayerSpec) -> list[nn.Module]:
    return {
        "relu": [nn.ReLU(True)],
        "leaky-relu": [nn.LeakyReLU(l.slope, True)],
        "tanh": [nn.Tanh()],
        "none": [],
    }[l.activation]


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        mods: list[nn.Module] = []
        for l in spec.layers:
            if l.kind == "residual-block":
                mods.append(ResidualBlock(l.out_channels))
                continue
            if l.kind == "transposed-convolution":
                mods.append(nn.ConvTranspose2d(l.in_channels, l.out_channels, l.kernel, l.stride,
                                               padding=1, output_padding=1))
            elif l.stride == 2 and l.in_channels > l.out_channels:
                # resize-then-convolve upsampling
                mods += [nn.Upsample(scale_factor=2, mode="nearest"), nn.ReflectionPad2d(l.kernel // 2),
                         nn.Conv2d(l.in_channels, l.out_channels, l.kernel)]
            elif l.stride == 1:
                mods += [nn.ReflectionPad2d(l.kernel // 2), nn.Conv2d(l.in_channels, l.out_channels, l.kernel)]
            else:
                mods.append(nn.Conv2d(l.in_channels, l.out_channels, l.kernel, l.stride, padding=l.kernel // 2))
            if l.norm == "instance":
                mods.append(nn.InstanceNorm2d(l.out_channels))
            mods += _activation(l)
        self.model = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def build_generator(image_size: int, n_residual_blocks: int | None = None, width: int = 32,
                    upsample: str = "deconv") -> tuple[GeneratorSpec, ResnetGenerator]:
    spec = generator_spec(image_size, n_residual_blocks, width, upsample)
    net = ResnetGenerator(spec)
    init_weights(net)
    return spec, net


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    """N(0, gain) weights and zero biases for every conv/linear layer."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
