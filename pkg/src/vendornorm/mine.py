"""Mutual information neural estimation with the Donsker-Varadhan bound.

Estimates are in nats. The statistics network is trained to tighten

    I(X; Z) >= E_joint[T] - log E_marginal[exp(T)]

and its gradient uses a moving average of the marginal partition term in the
denominator, which removes the minibatch bias of the naive gradient.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .errors import ContractError


def dv_bound(t_joint, t_marginal) -> torch.Tensor:
    """mean(T_joint) - log(mean(exp(T_marginal))), evaluated via log-sum-exp."""
    t_joint = torch.as_tensor(t_joint, dtype=torch.get_default_dtype()) if not torch.is_tensor(t_joint) else t_joint
    t_marginal = torch.as_tensor(t_marginal, dtype=t_joint.dtype) if not torch.is_tensor(t_marginal) else t_marginal
    if t_joint.numel() == 0 or t_marginal.numel() == 0:
        raise ContractError("dv_bound needs non-empty joint and marginal samples")
    t_marginal = t_marginal.reshape(-1)
    return t_joint.mean() - (torch.logsumexp(t_marginal, 0) - math.log(t_marginal.numel()))


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation with no fixed points (rejection sampling, ~e tries)."""
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def sample_marginal(batch_x, batch_z, rng: np.random.Generator | int, derangement: bool = True):
    """Re-pair ``batch_z`` with ``batch_x`` to sample the product of marginals.

    Returns ``(batch_x, shuffled_z, permutation)``. With ``derangement`` no z
    stays with its own x.
    """
    if len(batch_x) != len(batch_z):
        raise ContractError(f"batch sizes differ: {len(batch_x)} vs {len(batch_z)}")
    n = len(batch_x)
    if n < 2:
        raise ContractError("marginal sampling needs at least 2 pairs; a single pair cannot be re-paired")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    perm = random_derangement(n, rng) if derangement else rng.permutation(n)
    if torch.is_tensor(batch_z):
        shuffled = batch_z[torch.as_tensor(perm)]
    elif isinstance(batch_z, np.ndarray):
        shuffled = batch_z[perm]
    else:
        shuffled = [batch_z[i] for i in perm]
    return batch_x, shuffled, perm


class MLPStatistics(nn.Module):
    """T(x, z) for vector samples."""

    def __init__(self, dim_x: int = 1, dim_z: int = 1, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim_x + dim_z, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x, z):
        return self.net(torch.cat([x, z], dim=1)).squeeze(1)


class ConvStatistics(nn.Module):
    """T(x, z) for image pairs: strided convs over the 2-channel stack, global pooling, scalar head."""

    def __init__(self, width: int = 16, channels: int = 1):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(2 * channels, width, 3, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(2 * width, 2 * width, 3, 1, 1), nn.LeakyReLU(0.2, True),
        )
        self.head = nn.Linear(2 * width, 1)

    def forward(self, x, z):
        h = self.features(torch.cat([x, z], dim=1))
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


class MineEstimator(nn.Module):
    """Statistics network plus the moving average of E_marginal[exp(T)].

    The average is kept in log space so large T values cannot overflow.
    """

    def __init__(self, statistics_network: nn.Module, ema_decay: float = 0.99):
        super().__init__()
        if not 0 < ema_decay < 1:
            raise ContractError(f"ema_decay must lie in (0, 1), got {ema_decay}")
        self.statistics_network = statistics_network
        self.ema_decay = ema_decay
        self.register_buffer("log_ema", torch.zeros(()))
        self.register_buffer("ema_ready", torch.zeros((), dtype=torch.bool))

    @property
    def ema_denominator(self) -> float:
        return float(self.log_ema.exp()) if bool(self.ema_ready) else float("nan")

    def forward(self, x, z):
        return self.statistics_network(x, z)

    @torch.no_grad()
    def update_ema(self, t_marginal: torch.Tensor) -> None:
        batch_log_mean = torch.logsumexp(t_marginal.detach().reshape(-1), 0) - math.log(t_marginal.numel())
        batch_log_mean = batch_log_mean.to(self.log_ema.dtype)
        if not bool(self.ema_ready):
            self.log_ema.copy_(batch_log_mean)
            self.ema_ready.fill_(True)
        else:
            d = self.ema_decay
            self.log_ema.copy_(torch.logaddexp(self.log_ema + math.log(d), batch_log_mean + math.log(1 - d)))


def to_tiles(img: torch.Tensor, tile: int) -> torch.Tensor:
    """(B, C, H, W) -> (B * (H/tile) * (W/tile), C, tile, tile) non-overlapping tiles."""
    b, c, h, w = img.shape
    if h % tile or w % tile:
        raise ContractError(f"tile {tile} does not divide image {h}x{w}")
    t = img.reshape(b, c, h // tile, tile, w // tile, tile).permute(0, 2, 4, 1, 3, 5)
    return t.reshape(-1, c, tile, tile)


def corrected_objective(t_joint: torch.Tensor, t_marginal: torch.Tensor, log_denominator: torch.Tensor) -> torch.Tensor:
    """Tensor whose value is the DV bound but whose gradient divides by ``exp(log_denominator)``."""
    bound = dv_bound(t_joint, t_marginal)
    surrogate = t_joint.mean() - torch.exp(t_marginal.reshape(-1) - log_denominator.detach()).mean()
    return bound.detach() + (surrogate - surrogate.detach())


def mi_loss(est: MineEstimator, x: torch.Tensor, z: torch.Tensor, rng: np.random.Generator,
            tile: int | None = None, update_ema: bool = False, derangement: bool = True):
    """MI between inputs and their translations.

    Returns ``(estimate, objective)``: the DV bound in nats, and a tensor with
    the same value whose gradient uses the moving-average denominator. Image
    batches may be cut into ``tile``-sized tiles so a batch of one image still
    supplies several joint samples and a shuffled marginal.
    """
    if x.shape != z.shape:
        raise ContractError(f"MI inputs differ in shape: {tuple(x.shape)} vs {tuple(z.shape)}")
    if tile is not None and x.dim() == 4:
        x, z = to_tiles(x, tile), to_tiles(z, tile)
    _, z_marg, _ = sample_marginal(x, z, rng, derangement)
    t_joint = est(x, z)
    t_marg = est(x, z_marg)
    if update_ema:
        est.update_ema(t_marg)
    if bool(est.ema_ready):
        log_den = est.log_ema
    else:
        log_den = torch.logsumexp(t_marg.detach().reshape(-1), 0) - math.log(t_marg.numel())
    estimate = dv_bound(t_joint, t_marg)
    return estimate, corrected_objective(t_joint, t_marg, log_den)


def train_estimator(est: MineEstimator, sampler, steps: int, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit a standalone estimator on pairs drawn from ``sampler(rng) -> (x, z)``.

    Returns the per-step bound values.
    """
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(est.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        x, z = sampler(rng)
        estimate, objective = mi_loss(est, x, z, rng, update_ema=True)
        opt.zero_grad()
        (-objective).backward()
        opt.step()
        history.append(float(estimate.detach()))
    return history


@torch.no_grad()
def evaluate_bound(est: MineEstimator, x: torch.Tensor, z: torch.Tensor, rng: np.random.Generator) -> float:
    """DV bound of a frozen estimator on a (large) held-out sample."""
    _, z_marg, _ = sample_marginal(x, z, rng)
    return float(dv_bound(est(x, z), est(x, z_marg)))


def gaussian_pairs(rho: float, n: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """n samples of a standard bivariate Gaussian with correlation rho, as (n, 1) tensors."""
    x = rng.standard_normal(n)
    z = rho * x + math.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    dtype = torch.get_default_dtype()
    return torch.as_tensor(x, dtype=dtype)[:, None], torch.as_tensor(z, dtype=dtype)[:, None]


def gaussian_mi(rho: float) -> float:
    return -0.5 * math.log(1 - rho ** 2)
