import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vendornorm.errors import ConfigError, NumericError, TrainingError
from vendornorm.losses import read_loss_log
from vendornorm.trainer import (
    Checkpoint,
    HistoryPool,
    SweepRow,
    TrainConfig,
    build_state,
    pool_query,
    rank_rows,
    run_training,
    sweep,
    train_step,
    write_sweep_table,
)


def tiny(**kw):
    base = dict(image_size=36, generator_width=4, n_residual_blocks=1, discriminator_width=8,
                mine_width=4, iterations=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _train(ps):
    return ps.domain_a, ps.domain_b


# --------------------------------------------------------------------------
# config

def test_config_defaults():
    cfg = TrainConfig.from_dict({})
    assert (cfg.lambda_cyc, cfg.lambda_mut, cfg.lr) == (5.0, 0.5, 0.002)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.pool_capacity, cfg.batch_size) == (0.5, 0.999, 50, 1)
    assert cfg.variant == "small-fov" and cfg.fov_choice == 34
    assert cfg.mi_weight == 0.0
    assert TrainConfig(variant="small-fov+mine").mi_weight == 0.5
    assert TrainConfig(variant="std", image_size=72).fov_choice == 70


@pytest.mark.parametrize("values", [
    {"lambda_cyc": -1},
    {"variant": "std", "lambda_mut": 0.5, "image_size": 72},
    {"variant": "std", "fov_choice": 34},
    {"variant": "small-fov", "fov_choice": 70, "image_size": 72},
    {"variant": "pix2pix"},
    {"fov_choice": 50},
    {"image_size": 62},
    {"variant": "std", "image_size": 64},
    {"bogus_key": 1},
])
def test_config_errors(values):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(values)


# --------------------------------------------------------------------------
# history pool

def _img(v):
    return torch.full((1, 2, 2), float(v))


def test_pool_fill_phase_and_disabled():
    pool = HistoryPool(50, np.random.default_rng(0))
    for i in range(50):
        assert torch.equal(pool_query(pool, _img(i)), _img(i))
    assert len(pool) == 50
    off = HistoryPool(0, np.random.default_rng(0))
    for i in range(10):
        assert torch.equal(off.query_one(_img(i)), _img(i))
    assert len(off) == 0


def test_pool_returns_fresh_half_the_time():
    pool = HistoryPool(50, np.random.default_rng(0))
    for i in range(50):
        pool.query_one(_img(-1))
    fresh = sum(bool(torch.equal(pool.query_one(_img(i)), _img(i))) for i in range(100_000))
    assert abs(fresh / 100_000 - 0.5) <= 0.01


def test_pool_detaches_and_is_deterministic():
    x = torch.ones(1, 2, 2, requires_grad=True) * 2
    pool = HistoryPool(2, np.random.default_rng(0))
    assert not pool.query_one(x).requires_grad
    a, b = HistoryPool(3, np.random.default_rng(5)), HistoryPool(3, np.random.default_rng(5))
    for i in range(40):
        assert torch.equal(a.query_one(_img(i)), b.query_one(_img(i)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 8), st.lists(st.integers(1, 4), max_size=30))
def test_pool_never_exceeds_capacity(capacity, batch_sizes):
    pool = HistoryPool(capacity, np.random.default_rng(0))
    for n in batch_sizes:
        out = pool.query(torch.zeros(n, 1, 2, 2))
        assert out.shape == (n, 1, 2, 2)
        assert len(pool) <= capacity


# --------------------------------------------------------------------------
# training steps

def _batches(ps, k):
    a = ps.domain_a.images[k % len(ps.domain_a)].pixels / 127.5 - 1
    b = ps.domain_b.images[k % len(ps.domain_b)].pixels / 127.5 - 1
    return torch.tensor(a[None, None], dtype=torch.float32), torch.tensor(b[None, None], dtype=torch.float32)


def _run_steps(cfg, ps, n):
    state = build_state(cfg)
    return [train_step(state, *_batches(ps, k)) for k in range(n)]


def test_train_step_is_deterministic(small_phantoms):
    cfg = tiny()
    assert _run_steps(cfg, small_phantoms, 100) == _run_steps(cfg, small_phantoms, 100)


def test_train_step_with_mine_reports_mi(small_phantoms):
    reports = _run_steps(tiny(variant="small-fov+mine"), small_phantoms, 5)
    assert all(math.isfinite(r.mi_ab) and math.isfinite(r.mi_ba) for r in reports)
    assert any(r.mi_ab != 0 for r in reports)
    for r in reports:
        assert r.total_g == pytest.approx(
            r.adv_g1 + r.adv_g2 + 5.0 * (r.cyc_ab + r.cyc_ba) - 0.5 * (r.mi_ab + r.mi_ba), rel=1e-5)


def _params(nets):
    return [p.detach().clone() for n in nets for p in n.parameters()]


def test_gradient_isolation(small_phantoms):
    state = build_state(tiny())
    batch = _batches(small_phantoms, 0)
    d_before = _params(state.discriminators())
    state.opt_d.step = lambda *a, **k: None
    train_step(state, *batch)
    assert all(torch.equal(x, y) for x, y in zip(d_before, _params(state.discriminators())))

    state = build_state(tiny())
    g_before = _params(state.generators())
    state.opt_g.step = lambda *a, **k: None
    train_step(state, *batch)
    assert all(torch.equal(x, y) for x, y in zip(g_before, _params(state.generators())))


def test_nonfinite_input_aborts_with_term_and_iteration(small_phantoms):
    state = build_state(tiny())
    a, b = _batches(small_phantoms, 0)
    a[0, 0, 0, 0] = math.nan
    with pytest.raises(NumericError, match=r"iteration 1"):
        train_step(state, a, b)


def test_large_cycle_weight_drives_cycle_loss_down():
    from vendornorm.phantom import STYLE_A, STYLE_B, PhantomSpec, generate_phantom_pairless

    ps = generate_phantom_pairless(PhantomSpec(image_size=32, n_images=20, seed=4), STYLE_A, STYLE_B)
    cfg = TrainConfig(image_size=32, fov_choice=1, lambda_cyc=100.0, lr=2e-4, generator_width=4,
                      n_residual_blocks=1, discriminator_width=8, iterations=500, seed=0)
    log = run_training(cfg, ps.domain_a, ps.domain_b).log
    cyc = np.array([r.cyc_ab + r.cyc_ba for r in log])
    assert cyc[-20:].mean() < 0.25 * cyc[:5].mean()


# --------------------------------------------------------------------------
# runs and checkpoints

def test_zero_iterations(small_phantoms, tmp_path):
    result = run_training(tiny(iterations=0), *_train(small_phantoms), out_dir=tmp_path)
    assert result.log == [] and result.checkpoint.iteration == 0
    assert read_loss_log(tmp_path / "losses.tsv") == []
    assert (tmp_path / "final.ckpt").exists()


@pytest.mark.parametrize("variant", ["small-fov", "small-fov+mine"])
def test_resume_reproduces_uninterrupted_log(small_phantoms, tmp_path, variant):
    cfg = tiny(variant=variant, iterations=12, checkpoint_every=5)
    full = run_training(cfg, *_train(small_phantoms), out_dir=tmp_path / "full")
    resumed = run_training(cfg, *_train(small_phantoms), out_dir=tmp_path / "full",
                           resume_from=tmp_path / "full" / "checkpoint_000005.ckpt")
    assert resumed.log == full.log[5:]
    assert read_loss_log(tmp_path / "full" / "losses.tsv") == full.log


def test_checkpoint_round_trip_reproduces_next_step(small_phantoms, tmp_path):
    state = build_state(tiny(variant="small-fov+mine"))
    for k in range(3):
        train_step(state, *_batches(small_phantoms, k))
    Checkpoint.from_state(state).save(tmp_path / "c.ckpt")
    restored = Checkpoint.load(tmp_path / "c.ckpt").restore()
    batch = _batches(small_phantoms, 3)
    assert train_step(restored, *batch) == train_step(state, *batch)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        Checkpoint.load(tmp_path / "junk.ckpt")


def test_resume_rejects_changed_config(small_phantoms, tmp_path):
    run_training(tiny(iterations=2), *_train(small_phantoms), out_dir=tmp_path)
    with pytest.raises(ConfigError, match="lambda_cyc"):
        run_training(tiny(iterations=4, lambda_cyc=9.0), *_train(small_phantoms),
                     resume_from=tmp_path / "final.ckpt")


def test_checkpoint_write_failure_keeps_log(small_phantoms, tmp_path, monkeypatch):
    def full_disk(self, path):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(Checkpoint, "save", full_disk)
    with pytest.raises(TrainingError, match="losses.tsv"):
        run_training(tiny(iterations=4, checkpoint_every=2), *_train(small_phantoms), out_dir=tmp_path)
    assert len(read_loss_log(tmp_path / "losses.tsv")) == 2


def test_snapshots_written(small_phantoms, tmp_path):
    run_training(tiny(iterations=2, snapshot_every=2), *_train(small_phantoms), out_dir=tmp_path,
                 val_a=small_phantoms.domain_a, val_b=small_phantoms.domain_b)
    assert sorted(p.name for p in (tmp_path / "snapshots").iterdir()) == [
        "iter_000002_AtoB.png", "iter_000002_BtoA.png"]


# --------------------------------------------------------------------------
# sweeps

def test_rank_rows_tie_breaks():
    rows = [SweepRow(tiny(lambda_cyc=10.0), 0.9, 0.05), SweepRow(tiny(lambda_cyc=5.0), 0.9, 0.01),
            SweepRow(tiny(lambda_cyc=2.5), 0.8, 0.0), SweepRow(tiny(lambda_cyc=7.5), status="failed")]
    ranked = rank_rows(rows)
    assert [r.config.lambda_cyc for r in ranked] == [5.0, 10.0, 2.5, 7.5]
    assert [r.selected for r in ranked] == [True, False, False, False]
    same = rank_rows([SweepRow(tiny(lambda_cyc=7.5), 0.9, 0.01), SweepRow(tiny(lambda_cyc=2.5), 0.9, 0.01)])
    assert same[0].config.lambda_cyc == 2.5


def test_sweep_continues_past_failures(small_phantoms, tmp_path):
    configs = [tiny(lambda_cyc=v, iterations=1) for v in (2.5, 5.0, 7.5, 10.0)]

    def train_fn(cfg, a, b, out_dir=None):
        if cfg.lambda_cyc == 7.5:
            raise NumericError("non-finite adv_g1 at iteration 1")
        return run_training(cfg, a, b, out_dir=out_dir)

    hook = lambda result: [1.0 - result.state.config.lambda_cyc / 100, 0.9]  # noqa: E731
    rows = sweep(configs, *_train(small_phantoms), hook, train_fn=train_fn, out_dir=tmp_path)
    assert len(rows) == 4 and sum(r.selected for r in rows) == 1
    assert rows[0].config.lambda_cyc == 2.5 and rows[-1].status == "failed"
    write_sweep_table(tmp_path / "sweep.tsv", rows, ["lambda_cyc"])
    lines = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 5 and "failed" in lines[-1]
    single = sweep(configs[:1], *_train(small_phantoms), hook)
    assert len(single) == 1 and single[0].selected
