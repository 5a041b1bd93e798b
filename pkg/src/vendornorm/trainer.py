"""Adversarial training loop, history pool, checkpoints and hyperparameter sweeps.

Each iteration updates both generators (and the MINE statistics networks in
the ``+mine`` variants) first, then both discriminators on pooled fakes.

The default learning rate is 0.002 as published; most CycleGAN
implementations use 0.0002, and ``lr`` can be overridden in the config.
"""
from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import CLIPPED, NORMALIZED, BatchStream, DomainDataset, write_png
from .errors import ConfigError, NumericError, TrainingError
from .losses import LossLog, LossReport, adversarial_d_loss, adversarial_g_loss, cycle_loss, total_objective
from .mine import ConvStatistics, MineEstimator, mi_loss
from .networks import FOV_CHOICES, build_discriminator, build_generator, forward_discriminator

log = logging.getLogger(__name__)

VARIANTS = ("std", "std+mine", "small-fov", "small-fov+mine")
CHECKPOINT_MAGIC = b"VNCKPT\x00\x01"
CHECKPOINT_VERSION = 1

LAMBDA_CYC = 5.0
LAMBDA_MUT = 0.5
LR = 0.002


@dataclass
class TrainConfig:
    variant: str = "small-fov"
    fov_choice: int = 0  # 0: 70 for std variants, 34 for small-fov variants
    lambda_cyc: float = LAMBDA_CYC
    lambda_mut: float = LAMBDA_MUT  # only applied by +mine variants
    lr: float = LR
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    iterations: int = 2000
    seed: int = 0
    image_size: int = 64
    pool_capacity: int = 50
    generator_width: int = 32
    n_residual_blocks: int = 0  # 0: 6 below 256 px, 9 from 256 px
    discriminator_width: int = 64
    upsample: str = "deconv"
    mine_width: int = 16
    mine_tile: int = 0  # 0: image_size // 4
    mine_lr: float = 0.0  # 0: same as lr
    ema_decay: float = 0.99
    checkpoint_every: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fov_choice == 0:
            self.fov_choice = 70 if self.variant.startswith("std") else 34
        self.validate()

    @property
    def uses_mine(self) -> bool:
        return self.variant.endswith("+mine")

    @property
    def mi_weight(self) -> float:
        return self.lambda_mut if self.uses_mine else 0.0

    @property
    def tile(self) -> int:
        return self.mine_tile or self.image_size // 4

    def validate(self) -> None:
        if self.fov_choice not in FOV_CHOICES:
            raise ConfigError(f"fov_choice must be one of {FOV_CHOICES}, got {self.fov_choice}")
        if self.variant.startswith("std") and self.fov_choice != 70:
            raise ConfigError(f"variant {self.variant} uses the 70x70 discriminator, got fov_choice={self.fov_choice}")
        if self.variant.startswith("small-fov") and self.fov_choice == 70:
            raise ConfigError("small-fov variants need fov_choice 1, 34 or 45")
        if self.lambda_cyc < 0:
            raise ConfigError(f"lambda_cyc must be >= 0, got {self.lambda_cyc}")
        if self.lambda_mut < 0:
            raise ConfigError(f"lambda_mut must be >= 0, got {self.lambda_mut}")
        if self.lr <= 0 or self.mine_lr < 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.image_size < 32 or self.image_size % 4:
            raise ConfigError(f"image_size must be >= 32 and a multiple of 4, got {self.image_size}")
        if self.image_size < self.fov_choice:
            raise ConfigError(f"image_size {self.image_size} is smaller than the {self.fov_choice}x{self.fov_choice} "
                              "discriminator field of view")
        if self.pool_capacity < 0:
            raise ConfigError(f"pool_capacity must be >= 0, got {self.pool_capacity}")
        if self.upsample not in ("deconv", "resize"):
            raise ConfigError(f"upsample must be 'deconv' or 'resize', got {self.upsample!r}")
        if self.image_size % self.tile:
            raise ConfigError(f"mine_tile {self.tile} must divide image_size {self.image_size}")
        if self.uses_mine and self.batch_size * (self.image_size // self.tile) ** 2 < 2:
            raise ConfigError("MI needs at least two tiles per batch; lower mine_tile or raise batch_size")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        """Build from explicitly given settings, rejecting unknown keys.

        An explicit positive ``lambda_mut`` on a variant without MI is an error
        rather than silently ignored.
        """
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**values)
        if "lambda_mut" in values and values["lambda_mut"] > 0 and not cfg.uses_mine:
            raise ConfigError(f"lambda_mut={values['lambda_mut']} given but variant {cfg.variant} has no MI term")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


class HistoryPool:
    """Buffer of past generator outputs shown to the discriminator."""

    def __init__(self, capacity: int = 50, rng: np.random.Generator | None = None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng()
        self.stored: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self.stored)

    def query_one(self, fresh: torch.Tensor) -> torch.Tensor:
        fresh = fresh.detach()
        if self.capacity == 0:
            return fresh
        if len(self.stored) < self.capacity:
            self.stored.append(fresh.clone())
            return fresh
        if self.rng.random() < 0.5:
            return fresh
        idx = int(self.rng.integers(len(self.stored)))
        old = self.stored[idx]
        self.stored[idx] = fresh.clone()
        return old

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        """Apply :meth:`query_one` to every image of an (N, C, H, W) batch."""
        return torch.stack([self.query_one(img) for img in batch])


def pool_query(pool: HistoryPool, fresh: torch.Tensor) -> torch.Tensor:
    return pool.query_one(fresh)


@dataclass
class TrainState:
    config: TrainConfig
    g_ab: torch.nn.Module  # A -> B
    g_ba: torch.nn.Module  # B -> A
    d_b: torch.nn.Module  # judges domain B: real B vs g_ab(A)
    d_a: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    pool_a: HistoryPool
    pool_b: HistoryPool
    mi_rng: np.random.Generator
    mine_ab: MineEstimator | None = None
    mine_ba: MineEstimator | None = None
    opt_mine: torch.optim.Optimizer | None = None
    iteration: int = 0

    def generators(self) -> list[torch.nn.Module]:
        return [self.g_ab, self.g_ba]

    def discriminators(self) -> list[torch.nn.Module]:
        return [self.d_b, self.d_a]

    def estimators(self) -> list[MineEstimator]:
        return [m for m in (self.mine_ab, self.mine_ba) if m is not None]

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_b": self.d_b, "d_a": self.d_a}
        if self.mine_ab is not None:
            mods.update(mine_ab=self.mine_ab, mine_ba=self.mine_ba)
        return mods

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        opts = {"opt_g": self.opt_g, "opt_d": self.opt_d}
        if self.opt_mine is not None:
            opts["opt_mine"] = self.opt_mine
        return opts


def build_state(config: TrainConfig) -> TrainState:
    """Freshly initialized networks, optimizers, pools and random streams."""
    torch.manual_seed(config.seed)
    blocks = config.n_residual_blocks or None
    _, g_ab = build_generator(config.image_size, blocks, config.generator_width, config.upsample)
    _, g_ba = build_generator(config.image_size, blocks, config.generator_width, config.upsample)
    _, d_b = build_discriminator(config.fov_choice, width=config.discriminator_width)
    _, d_a = build_discriminator(config.fov_choice, width=config.discriminator_width)
    mine_ab = mine_ba = opt_mine = None
    if config.uses_mine:
        mine_ab = MineEstimator(ConvStatistics(config.mine_width), config.ema_decay)
        mine_ba = MineEstimator(ConvStatistics(config.mine_width), config.ema_decay)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam([*g_ab.parameters(), *g_ba.parameters()], lr=config.lr, betas=betas)
    opt_d = torch.optim.Adam([*d_b.parameters(), *d_a.parameters()], lr=config.lr, betas=betas)
    if mine_ab is not None:
        opt_mine = torch.optim.Adam([*mine_ab.parameters(), *mine_ba.parameters()],
                                    lr=config.mine_lr or config.lr, betas=betas)
    pool_seq, pool_seq_b, mi_seq = np.random.SeedSequence(config.seed).spawn(3)
    return TrainState(
        config, g_ab, g_ba, d_b, d_a, opt_g, opt_d,
        HistoryPool(config.pool_capacity, np.random.default_rng(pool_seq)),
        HistoryPool(config.pool_capacity, np.random.default_rng(pool_seq_b)),
        np.random.default_rng(mi_seq), mine_ab, mine_ba, opt_mine,
    )


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _check_terms(terms: dict[str, torch.Tensor], iteration: int) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericError(f"non-finite {name} at iteration {iteration}")


def _check_parameters(state: TrainState) -> None:
    for name, mod in state.modules().items():
        for pname, p in mod.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite parameter {name}.{pname} after iteration {state.iteration}")


def train_step(state: TrainState, batch_a: torch.Tensor, batch_b: torch.Tensor) -> LossReport:
    """One generator update followed by one discriminator update."""
    try:
        return _train_step(state, batch_a, batch_b)
    except NumericError as e:
        if "iteration" in str(e):
            raise
        raise NumericError(f"{e} at iteration {state.iteration + 1}") from e


def _train_step(state: TrainState, batch_a: torch.Tensor, batch_b: torch.Tensor) -> LossReport:
    cfg = state.config
    it = state.iteration + 1
    real_a = torch.as_tensor(batch_a, dtype=torch.float32)
    real_b = torch.as_tensor(batch_b, dtype=torch.float32)

    # generators (and statistics networks)
    _set_requires_grad(state.discriminators(), False)
    fake_b = state.g_ab(real_a)
    fake_a = state.g_ba(real_b)
    rec_a = state.g_ba(fake_b)
    rec_b = state.g_ab(fake_a)
    parts = LossReport(iteration=it)
    terms = {
        "adv_g1": adversarial_g_loss(forward_discriminator(state.d_b, fake_b)),
        "adv_g2": adversarial_g_loss(forward_discriminator(state.d_a, fake_a)),
        "cyc_ab": cycle_loss(real_a, rec_a),
        "cyc_ba": cycle_loss(real_b, rec_b),
    }
    if cfg.uses_mine:
        _, terms["mi_ab"] = mi_loss(state.mine_ab, real_a, fake_b, state.mi_rng, cfg.tile)
        _, terms["mi_ba"] = mi_loss(state.mine_ba, real_b, fake_a, state.mi_rng, cfg.tile)
    _check_terms(terms, it)
    for k, v in terms.items():
        setattr(parts, k, v)
    total_g, _ = total_objective(parts, cfg.lambda_cyc, cfg.mi_weight)
    _check_terms({"total_g": total_g}, it)
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()

    if cfg.uses_mine:
        state.opt_mine.zero_grad(set_to_none=True)
        _, obj_ab = mi_loss(state.mine_ab, real_a, fake_b.detach(), state.mi_rng, cfg.tile, update_ema=True)
        _, obj_ba = mi_loss(state.mine_ba, real_b, fake_a.detach(), state.mi_rng, cfg.tile, update_ema=True)
        _check_terms({"mine objective": obj_ab + obj_ba}, it)
        (-(obj_ab + obj_ba)).backward()
        state.opt_mine.step()

    # discriminators on pooled fakes
    _set_requires_grad(state.discriminators(), True)
    pooled_b = state.pool_b.query(fake_b.detach())
    pooled_a = state.pool_a.query(fake_a.detach())
    d_terms = {
        "adv_d1": adversarial_d_loss(state.d_b(real_b), state.d_b(pooled_b)),
        "adv_d2": adversarial_d_loss(state.d_a(real_a), state.d_a(pooled_a)),
    }
    _check_terms(d_terms, it)
    state.opt_d.zero_grad(set_to_none=True)
    (d_terms["adv_d1"] + d_terms["adv_d2"]).backward()
    state.opt_d.step()
    state.opt_g.zero_grad(set_to_none=True)

    state.iteration = it
    _check_parameters(state)
    report = LossReport(
        **{k: float(v.detach()) for k, v in {**terms, **d_terms}.items()},
        total_g=float(total_g.detach()),
        total_d=float((d_terms["adv_d1"] + d_terms["adv_d2"]).detach()),
        iteration=it,
    )
    report.validate()
    return report


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    payload: dict

    @property
    def iteration(self) -> int:
        return self.payload["iteration"]

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.payload["config"])

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "iteration": state.iteration,
            "config": state.config.to_dict(),
            "modules": {k: {n: t.detach().clone() for n, t in m.state_dict().items()}
                        for k, m in state.modules().items()},
            "optimizers": {k: _clone_state(o.state_dict()) for k, o in state.optimizers().items()},
            "pools": {"a": [t.clone() for t in state.pool_a.stored], "b": [t.clone() for t in state.pool_b.stored]},
            "rng": {
                "pool_a": state.pool_a.rng.bit_generator.state,
                "pool_b": state.pool_b.rng.bit_generator.state,
                "mi": state.mi_rng.bit_generator.state,
            },
        }
        return cls(payload)

    def restore(self) -> TrainState:
        p = self.payload
        if p.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {p.get('format_version')}")
        state = build_state(self.config)
        for k, m in state.modules().items():
            m.load_state_dict(p["modules"][k])
        for k, o in state.optimizers().items():
            o.load_state_dict(p["optimizers"][k])
        state.pool_a.stored = [t.clone() for t in p["pools"]["a"]]
        state.pool_b.stored = [t.clone() for t in p["pools"]["b"]]
        state.pool_a.rng.bit_generator.state = p["rng"]["pool_a"]
        state.pool_b.rng.bit_generator.state = p["rng"]["pool_b"]
        state.mi_rng.bit_generator.state = p["rng"]["mi"]
        state.iteration = p["iteration"]
        return state

    def save(self, path: str | Path) -> None:
        """Atomic write: magic header, then a torch-serialized payload."""
        path = Path(path)
        buf = io.BytesIO()
        torch.save(self.payload, buf)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(CHECKPOINT_MAGIC)
                fh.write(buf.getvalue())
            os.replace(tmp, path)
        except OSError:
            tmp.unlink(missing_ok=True)
            raise

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        payload = torch.load(io.BytesIO(raw[len(CHECKPOINT_MAGIC):]), weights_only=False)
        return cls(payload)


def _clone_state(obj):
    if torch.is_tensor(obj):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_state(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# training runs

def _model_stack(dataset: DomainDataset) -> DomainDataset:
    ims = []
    for im in dataset.images:
        if im.value_range == CLIPPED:
            im = replace(im, pixels=im.pixels / 127.5 - 1.0, value_range=NORMALIZED)
        elif im.value_range != NORMALIZED:
            raise ConfigError(f"{im.source_id}: training data must be clipped-0-255 or normalized, got {im.value_range}")
        ims.append(im)
    return DomainDataset(ims, dataset.domain_tag, dataset.split)


@torch.no_grad()
def translate(generator: torch.nn.Module, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run a generator on (N, 1, H, W) model-range pixels."""
    generator.eval()
    outs = [generator(torch.as_tensor(pixels[i:i + batch_size], dtype=torch.float32)).numpy()
            for i in range(0, len(pixels), batch_size)]
    generator.train()
    return np.concatenate(outs) if outs else np.zeros((0,) + pixels.shape[1:], np.float32)


def write_snapshot(state: TrainState, val_a: DomainDataset, val_b: DomainDataset, out_dir: Path, k: int = 4) -> None:
    """Grid of inputs (top) over translations (bottom) for each direction."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for tag, gen, ds in (("AtoB", state.g_ab, val_a), ("BtoA", state.g_ba, val_b)):
        if ds is None or len(ds) == 0:
            continue
        x = _model_stack(DomainDataset(ds.images[:k], ds.domain_tag, ds.split)).as_array()
        y = translate(gen, x)
        grid = np.vstack([np.hstack(list(x[:, 0])), np.hstack(list(y[:, 0]))])
        write_png(out_dir / f"iter_{state.iteration:06d}_{tag}.png", (grid + 1) * 127.5)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[LossReport]
    state: TrainState


def run_training(
    config: TrainConfig,
    data_a: DomainDataset,
    data_b: DomainDataset,
    out_dir: str | Path | None = None,
    val_a: DomainDataset | None = None,
    val_b: DomainDataset | None = None,
    resume_from: Checkpoint | str | Path | None = None,
    progress: Callable[[LossReport], None] | None = None,
) -> TrainResult:
    """Train for ``config.iterations`` steps (continuing a checkpoint if given)."""
    if len(data_a) == 0 or len(data_b) == 0:
        raise ConfigError("both training sets must be non-empty")
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        if ckpt.config.to_dict() != config.to_dict():
            config_diff = {k for k, v in config.to_dict().items() if ckpt.payload["config"].get(k) != v}
            if config_diff - {"iterations", "checkpoint_every", "snapshot_every"}:
                raise ConfigError(f"resume config differs from checkpoint in {sorted(config_diff)}")
            ckpt.payload["config"] = config.to_dict()
        state = ckpt.restore()
    else:
        state = build_state(config)

    stream_a = BatchStream(_model_stack(data_a), config.batch_size, _stream_seed(config.seed, 1))
    stream_b = BatchStream(_model_stack(data_b), config.batch_size, _stream_seed(config.seed, 2))

    out = Path(out_dir) if out_dir is not None else None
    loss_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_log = LossLog(out / "losses.tsv")
        if resume_from is not None:
            loss_log.truncate_after(state.iteration)

    reports: list[LossReport] = []
    while state.iteration < config.iterations:
        step = state.iteration
        report = train_step(state, stream_a.batch(step), stream_b.batch(step))
        reports.append(report)
        if loss_log is not None:
            loss_log.append([report])
        if progress is not None:
            progress(report)
        if out is not None and config.snapshot_every and state.iteration % config.snapshot_every == 0:
            write_snapshot(state, val_a, val_b, out / "snapshots")
        if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            _save_checkpoint(Checkpoint.from_state(state), out / f"checkpoint_{state.iteration:06d}.ckpt", out)

    final = Checkpoint.from_state(state)
    if out is not None:
        _save_checkpoint(final, out / "final.ckpt", out)
    return TrainResult(final, reports, state)


def _stream_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _save_checkpoint(ckpt: Checkpoint, path: Path, out: Path) -> None:
    try:
        ckpt.save(path)
    except OSError as e:
        raise TrainingError(
            f"could not write checkpoint {path} at iteration {ckpt.iteration} ({e}); "
            f"loss log up to this point is preserved in {out / 'losses.tsv'}"
        ) from e


# --------------------------------------------------------------------------
# sweeps

@dataclass
class SweepRow:
    config: TrainConfig
    mean_dice: float = math.nan
    std_dice: float = math.nan
    status: str = "ok"
    error: str = ""
    selected: bool = False


def rank_rows(rows: Sequence[SweepRow]) -> list[SweepRow]:
    """Best first: higher mean Dice, then lower std, then lower weights; failures last."""
    ok = [r for r in rows if r.status == "ok"]
    failed = [r for r in rows if r.status != "ok"]
    ok.sort(key=lambda r: (-r.mean_dice, r.std_dice, r.config.lambda_cyc, r.config.mi_weight))
    for r in rows:
        r.selected = False
    if ok:
        ok[0].selected = True
    return ok + failed


def sweep(
    configs: Sequence[TrainConfig],
    data_a: DomainDataset,
    data_b: DomainDataset,
    eval_hook: Callable[[TrainResult], Sequence[float]],
    train_fn: Callable[..., TrainResult] = run_training,
    out_dir: str | Path | None = None,
) -> list[SweepRow]:
    """Train and score every config; a failed member is recorded and skipped.

    ``eval_hook`` returns per-image validation Dice values for a trained run.
    """
    rows = []
    for i, cfg in enumerate(configs):
        row = SweepRow(cfg)
        try:
            member_dir = Path(out_dir) / f"run_{i:03d}" if out_dir is not None else None
            result = train_fn(cfg, data_a, data_b, out_dir=member_dir)
            scores = np.asarray(eval_hook(result), dtype=float)
            if scores.size == 0 or not np.all(np.isfinite(scores)):
                raise NumericError("evaluation produced no finite Dice values")
            row.mean_dice, row.std_dice = float(scores.mean()), float(scores.std())
        except Exception as e:  # noqa: BLE001 - one bad member must not stop the sweep
            log.warning("sweep member %d failed: %s", i, e)
            row.status, row.error = "failed", f"{type(e).__name__}: {e}"
        rows.append(row)
    return rank_rows(rows)


def write_sweep_table(path: str | Path, rows: Sequence[SweepRow], swept: Sequence[str]) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(["rank", *swept, "mean_dice", "std_dice", "status", "selected", "error"]) + "\n")
        for rank, r in enumerate(rows, 1):
            vals = [str(getattr(r.config, k)) for k in swept]
            fh.write("\t".join([str(rank), *vals, f"{r.mean_dice:.6f}", f"{r.std_dice:.6f}", r.status,
                                "yes" if r.selected else "", r.error]) + "\n")
