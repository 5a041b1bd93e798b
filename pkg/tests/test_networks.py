import time

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from vendornorm.errors import ConfigError, ContractError, ShapeError
from vendornorm.networks import (
    DISCRIMINATOR_TABLES,
    build_discriminator,
    build_generator,
    compute_receptive_field,
    count_parameters,
    discriminator_spec,
    forward_discriminator,
    parse_layer_list,
    patch_map_size,
)

# 6 residual blocks, 64 px, width 32 (c7s1-32, d64, d128, 6xR128, u64, u32, c7s1-1)
GENERATOR_PARAMS_W32 = 1_958_785
GENERATOR_PARAMS_W64 = 7_825_153


def rf_forward(layers):
    # independent oracle: grow the field front to back with the running jump
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


@pytest.mark.parametrize("layers, fov", [
    ([(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)], 70),
    ([(5, 2), (5, 2), (5, 1), (5, 1)], 45),
    ([(4, 2), (4, 2), (4, 1), (4, 1)], 34),
    ([(1, 1), (1, 1), (1, 1)], 1),
])
def test_receptive_field_published(layers, fov):
    assert compute_receptive_field(layers) == fov
    assert rf_forward(layers) == fov


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 7), st.integers(1, 3)), min_size=1, max_size=6))
def test_receptive_field_matches_forward_oracle(layers):
    assert compute_receptive_field(layers) == rf_forward(layers)


def test_receptive_field_rejects_bad_layers():
    with pytest.raises(ContractError):
        compute_receptive_field([])
    with pytest.raises(ContractError):
        compute_receptive_field([(0, 1)])
    assert parse_layer_list("4:2, 4:2,4:1,4:1") == [(4, 2), (4, 2), (4, 1), (4, 1)]
    with pytest.raises(ConfigError):
        parse_layer_list("4-2")


@pytest.mark.parametrize("fov, channels, strides, kernel", [
    (34, [1, 64, 128, 256, 1], [2, 2, 1, 1], 4),
    (70, [1, 64, 128, 256, 512, 1], [2, 2, 2, 1, 1], 4),
    (45, [1, 64, 128, 256, 1], [2, 2, 1, 1], 5),
    (1, [1, 64, 128, 1], [1, 1, 1], 1),
])
def test_discriminator_tables(fov, channels, strides, kernel):
    spec, net = build_discriminator(fov)
    assert [l.in_channels for l in spec.layers] + [spec.layers[-1].out_channels] == channels
    assert [l.stride for l in spec.layers] == strides
    assert {l.kernel for l in spec.layers} == {kernel}
    assert spec.receptive_field == spec.declared_fov == fov
    assert spec.layers[0].norm == "none"
    assert all(l.slope == 0.2 for l in spec.layers if l.activation == "leaky-relu")
    convs = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    assert [c.out_channels for c in convs] == channels[1:]
    norms = [m for m in net.modules() if isinstance(m, nn.InstanceNorm2d)]
    assert len(norms) == len(convs) - 2


def test_unsupported_fov():
    with pytest.raises(ConfigError, match="valid choices"):
        build_discriminator(50)


def test_patch_maps():
    _, d34 = build_discriminator(34)
    x = torch.zeros(1, 1, 64, 64)
    # k4/p1 arithmetic: 64 -> 32 -> 16 -> 15 -> 14
    assert forward_discriminator(d34, x).shape[-2:] == (14, 14)
    assert patch_map_size(d34.spec, 64) == 14
    _, d1 = build_discriminator(1)
    out = forward_discriminator(d1, torch.randn(2, 1, 64, 64))
    assert out.shape == (2, 1, 64, 64) and torch.isfinite(out).all()
    _, d70 = build_discriminator(70)
    with pytest.raises(ShapeError):
        forward_discriminator(d70, x)
    with pytest.raises(ShapeError):
        forward_discriminator(d34, torch.zeros(1, 1, 64, 48))


@pytest.mark.parametrize("fov", sorted(DISCRIMINATOR_TABLES))
def test_patch_map_size_matches_network(fov):
    _, net = build_discriminator(fov, width=8)
    for size in (72, 96):
        assert net(torch.zeros(1, 1, size, size)).shape[-1] == patch_map_size(net.spec, size)


def test_generator_contract():
    spec, g = build_generator(64, 6)
    assert spec.n_residual_blocks == 6
    y = g(torch.zeros(1, 1, 64, 64))
    assert y.shape == (1, 1, 64, 64)
    assert torch.isfinite(y).all() and y.abs().max() <= 1
    assert count_parameters(g) == GENERATOR_PARAMS_W32
    assert count_parameters(build_generator(64, 6, width=64)[1]) == GENERATOR_PARAMS_W64
    assert build_generator(256, width=2)[0].n_residual_blocks == 9
    assert build_generator(128, width=2)[0].n_residual_blocks == 6


@settings(max_examples=15, deadline=None)
@given(st.integers(8, 64).map(lambda k: 4 * k), st.sampled_from(["deconv", "resize"]))
def test_generator_preserves_size(size, upsample):
    _, g = build_generator(size, 1, width=2, upsample=upsample)
    with torch.no_grad():
        y = g(torch.randn(1, 1, size, size))
    assert y.shape == (1, 1, size, size)
    assert torch.isfinite(y).all()


def test_generator_rejects_indivisible_size():
    with pytest.raises(ConfigError):
        build_generator(62)


def test_discriminator_width_scales_channels_not_head():
    spec = discriminator_spec(34, width=16)
    assert [l.out_channels for l in spec.layers] == [16, 32, 64, 1]


def test_rf_check_is_fast():
    start = time.perf_counter()
    for fov in DISCRIMINATOR_TABLES:
        assert discriminator_spec(fov).receptive_field == fov
    assert time.perf_counter() - start < 1.0
