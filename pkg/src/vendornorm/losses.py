"""Least-squares adversarial, L1 cycle-consistency and combined objectives.

All reductions are means over patches/pixels, so loss magnitudes do not
depend on the discriminator's field of view or the image size.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import torch

from .errors import ConfigError, ContractError, NumericError


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def adversarial_d_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    """mean((D(real) - 1)^2) + mean(D(fake)^2)."""
    _check_finite(scores_real, "real patch scores")
    _check_finite(scores_fake, "fake patch scores")
    return ((scores_real - 1) ** 2).mean() + (scores_fake ** 2).mean()


def adversarial_g_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    """mean((D(G(x)) - 1)^2): the generator wants its samples scored as real."""
    _check_finite(scores_fake, "fake patch scores")
    return ((scores_fake - 1) ** 2).mean()


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference between an image and its round trip."""
    if original.shape != reconstructed.shape:
        raise ContractError(f"cycle loss shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (reconstructed - original).abs().mean()


@dataclass
class LossReport:
    adv_g1: float = 0.0
    adv_g2: float = 0.0
    adv_d1: float = 0.0
    adv_d2: float = 0.0
    cyc_ab: float = 0.0
    cyc_ba: float = 0.0
    mi_ab: float = 0.0
    mi_ba: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    iteration: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise NumericError(f"{f.name} is not finite at iteration {self.iteration}")
        if self.cyc_ab < 0 or self.cyc_ba < 0:
            raise ContractError("cycle losses must be non-negative")

    @classmethod
    def columns(cls) -> list[str]:
        return ["iteration"] + [f.name for f in fields(cls) if f.name != "iteration"]

    def to_row(self) -> str:
        d = asdict(self)
        return "\t".join(str(d["iteration"]) if c == "iteration" else repr(float(d[c])) for c in self.columns())

    @classmethod
    def from_row(cls, row: str) -> "LossReport":
        values = row.rstrip("\n").split("\t")
        kw = dict(zip(cls.columns(), values))
        return cls(**{k: int(v) if k == "iteration" else float(v) for k, v in kw.items()})


def total_objective(parts: LossReport, lambda_cyc: float, lambda_mut: float = 0.0):
    """Combine per-term losses into (generator total, (D1 total, D2 total)).

    Works on floats or tensors. The MI term enters with a minus sign because
    the generators maximize mutual information.
    """
    if lambda_cyc < 0 or lambda_mut < 0:
        raise ConfigError(f"loss weights must be non-negative, got lambda_cyc={lambda_cyc}, lambda_mut={lambda_mut}")
    g = parts.adv_g1 + parts.adv_g2 + lambda_cyc * (parts.cyc_ab + parts.cyc_ba)
    if lambda_mut:
        g = g - lambda_mut * (parts.mi_ab + parts.mi_ba)
    return g, (parts.adv_d1, parts.adv_d2)


class LossLog:
    """Append-only tab-separated log of LossReports."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text("\t".join(LossReport.columns()) + "\n")

    def append(self, reports: Iterable[LossReport]) -> None:
        with open(self.path, "a") as fh:
            for r in reports:
                fh.write(r.to_row() + "\n")

    def truncate_after(self, iteration: int) -> None:
        """Drop rows past ``iteration`` (used when resuming from a checkpoint)."""
        kept = [r for r in read_loss_log(self.path) if r.iteration <= iteration]
        self.path.write_text("\t".join(LossReport.columns()) + "\n" + "".join(r.to_row() + "\n" for r in kept))


def read_loss_log(path: str | Path) -> list[LossReport]:
    lines = Path(path).read_text().splitlines()
    return [LossReport.from_row(line) for line in lines[1:] if line.strip()]
