import math

import numpy as np
import pytest
import torch
from scipy import stats

from mine_oracle import fitted_estimate
from vendornorm.errors import ContractError
from vendornorm.mine import (
    ConvStatistics,
    MineEstimator,
    MLPStatistics,
    corrected_objective,
    dv_bound,
    gaussian_mi,
    mi_loss,
    random_derangement,
    sample_marginal,
    to_tiles,
)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
def test_dv_bound_constant(c):
    assert dv_bound(t(c, c, c), t(c, c)).item() == pytest.approx(0.0, abs=1e-9)


def test_dv_bound_examples():
    assert dv_bound(t(1, 1), t(0, 0)).item() == pytest.approx(1.0)
    assert dv_bound(t(0, 0), t(0, math.log(3))).item() == pytest.approx(-math.log(2))
    with pytest.raises(ContractError):
        dv_bound(t(), t(1))


def test_dv_bound_shift_invariant():
    g = torch.Generator().manual_seed(0)
    j, m = torch.randn(20, generator=g, dtype=torch.float64), torch.randn(30, generator=g, dtype=torch.float64)
    assert dv_bound(j + 123.4, m + 123.4).item() == pytest.approx(dv_bound(j, m).item(), abs=1e-9)
    # no overflow for huge statistics
    assert math.isfinite(dv_bound(j * 1000, m * 1000).item())


def test_sample_marginal_pairs_and_determinism():
    x, z = ["x1", "x2"], ["z1", "z2"]
    _, shuffled, _ = sample_marginal(x, z, 0)
    assert shuffled == ["z2", "z1"]
    a = sample_marginal(list(range(10)), list(range(10)), 42)[2]
    b = sample_marginal(list(range(10)), list(range(10)), 42)[2]
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        sample_marginal(["x"], ["z"], 0)
    with pytest.raises(ContractError):
        sample_marginal([1, 2], [1, 2, 3], 0)


def test_derangement_has_no_fixed_points():
    rng = np.random.default_rng(0)
    for n in range(2, 30):
        assert not np.any(random_derangement(n, rng) == np.arange(n))


def test_uniform_shuffle_frequencies():
    # +-0.01 is about 3 standard errors per cell, so a few seeds of a perfect
    # shuffle miss it in one of the 64 cells; the chi-square test is the real check
    rng = np.random.default_rng(1)
    counts = np.zeros((8, 8))
    for _ in range(10_000):
        perm = sample_marginal(list(range(8)), list(range(8)), rng, derangement=False)[2]
        counts[np.arange(8), perm] += 1
    assert np.all(np.abs(counts / 10_000 - 1 / 8) <= 0.01)
    assert stats.chisquare(counts.ravel()).pvalue > 1e-3


def test_mi_loss_untrained_is_finite():
    torch.manual_seed(0)
    est = MineEstimator(ConvStatistics(width=4))
    x, z = torch.randn(1, 1, 32, 32), torch.randn(1, 1, 32, 32)
    value, objective = mi_loss(est, x, z, np.random.default_rng(0), tile=8, update_ema=True)
    assert math.isfinite(value.item()) and math.isfinite(objective.item())
    assert objective.item() == pytest.approx(value.item(), abs=1e-6)
    assert est.ema_denominator > 0
    with pytest.raises(ContractError):
        mi_loss(est, x, torch.randn(1, 1, 16, 16), np.random.default_rng(0))


def test_to_tiles():
    img = torch.arange(2 * 16.0).reshape(2, 1, 4, 4)
    tiles = to_tiles(img, 2)
    assert tiles.shape == (8, 1, 2, 2)
    assert torch.equal(tiles[0, 0], torch.tensor([[0.0, 1.0], [4.0, 5.0]]))
    with pytest.raises(ContractError):
        to_tiles(img, 3)


def _grads(est, objective):
    grads = torch.autograd.grad(objective, list(est.parameters()))
    return torch.cat([g.reshape(-1) for g in grads])


def test_ema_correction_converges_to_plain_gradient():
    torch.manual_seed(0)
    est = MineEstimator(MLPStatistics(1, 1, 16), ema_decay=0.9)
    g = torch.Generator().manual_seed(1)
    x, z = torch.randn(64, 1, generator=g), torch.randn(64, 1, generator=g)
    z_marg = z[torch.randperm(64, generator=g)]
    plain = _grads(est, dv_bound(est(x, z), est(x, z_marg)))
    # seed the average from an unrelated batch, then keep feeding the frozen one
    est.update_ema(est(x, torch.randn(64, 1, generator=g) * 3).detach())
    gaps = []
    for _ in range(200):
        est.update_ema(est(x, z_marg).detach())
        corrected = _grads(est, corrected_objective(est(x, z), est(x, z_marg), est.log_ema))
        gaps.append((corrected - plain).norm().item())
    assert gaps[-1] < 1e-5 * max(1.0, plain.norm().item())
    assert gaps[-1] < gaps[0]


def test_ema_starts_from_first_batch():
    est = MineEstimator(MLPStatistics(1, 1, 4), ema_decay=0.5)
    assert math.isnan(est.ema_denominator)
    est.update_ema(t(0.0, math.log(3)).float())
    assert est.ema_denominator == pytest.approx(2.0)
    est.update_ema(t(0.0, 0.0).float())
    assert est.ema_denominator == pytest.approx(1.5)
    with pytest.raises(ContractError):
        MineEstimator(MLPStatistics(), ema_decay=1.0)


def test_gaussian_estimate_single_seed():
    rho = 0.5
    est = fitted_estimate(rho, seed=0, steps=1500)
    assert abs(est - gaussian_mi(rho)) <= 0.15 * gaussian_mi(rho)


def test_bound_does_not_exceed_true_mi():
    rho = 0.5
    values = np.array([fitted_estimate(rho, seed=s, steps=600, held_out=20_000) for s in range(10)])
    se = values.std(ddof=1) / math.sqrt(len(values))
    assert values.mean() <= gaussian_mi(rho) + 3 * se
