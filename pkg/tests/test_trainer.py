import numpy as np
import pytest

from stg_avatar import checkpoint
from stg_avatar.config import RunConfig
from stg_avatar.data import DataError
from stg_avatar.trainer import LOG_FIELDS, Trainer, init_model, write_metrics


def small_run(mode="full", iters=8, **train):
    run = RunConfig.default()
    run.train.mode = mode
    run.train.iterations = iters
    run.train.init_count = 300
    run.train.densify_from = 2
    run.train.densify_interval = 3
    run.train.log_interval = 1
    for k, v in train.items():
        setattr(run.train, k, v)
    return run


@pytest.fixture(scope="module")
def full_result(tiny_dataset):
    tr = Trainer(tiny_dataset, small_run())
    return tr, tr.run()


def test_zero_iterations_is_initialization(tiny_dataset):
    run = small_run(iters=0)
    res = Trainer(tiny_dataset, run).run()
    init = init_model(tiny_dataset, run.train, run.encoding)
    assert checkpoint.to_bytes(res.model) == checkpoint.to_bytes(init)
    assert res.rows == []


def test_breakdown_total_identity_every_iteration(full_result):
    _, res = full_result
    assert len(res.breakdowns) == 8
    for b in res.breakdowns:
        l1, l2, l3 = b.lambdas
        assert np.isfinite([b.rgb, b.flow, b.temp, b.reg, *b.lambdas]).all()
        assert b.total == b.rgb + l1 * b.flow + l2 * b.temp + l3 * b.reg


def test_rows_carry_log_fields(full_result):
    _, res = full_result
    assert [r["iteration"] for r in res.rows] == list(range(8))
    assert all(set(LOG_FIELDS) <= set(r) for r in res.rows)


def test_densification_ran(full_result):
    tr, res = full_result
    assert res.added > 0
    assert len(res.model) == len(tr.strikes) == len(tr.born) == len(tr.contrib)
    assert len(res.model) <= round(tr.dens.budget_factor * tr.init_count)


def test_adaptive_weights_track_ratios(full_result):
    tr, _ = full_result
    lam = tr.breakdowns[-1].lambdas
    for i, r in enumerate(tr.cfg.ratios):
        if tr.ema[i + 1] and 1e-4 < lam[i] < 10:
            assert 0.5 * r <= lam[i] * tr.ema[i + 1] / tr.ema[0] <= 2 * r


def test_parameters_are_float32_exact(full_result):
    _, res = full_result
    for name, arr in res.model.gaussians.arrays().items():
        if arr.dtype == np.float64:
            assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64)), name


def test_fixed_seed_is_bit_identical(tiny_dataset, full_result, tmp_path):
    _, a = full_result
    b = Trainer(tiny_dataset, small_run()).run()
    assert checkpoint.to_bytes(a.model) == checkpoint.to_bytes(b.model)
    write_metrics(tmp_path / "a.csv", a.rows)
    write_metrics(tmp_path / "b.csv", b.rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_no_stg_keeps_motion_at_zero(tiny_dataset):
    res = Trainer(tiny_dataset, small_run("no-stg")).run()
    g = res.model.gaussians
    assert not g.motion_coeffs.any() and not g.rot_coeffs[:, 1:].any()


def test_no_flow_only_prunes(tiny_dataset):
    res = Trainer(tiny_dataset, small_run("no-flow")).run()
    assert res.added == 0 and res.flagged == 0
    assert len(res.model) == 300 - res.removed


def test_sh_mode_uses_harmonics(tiny_dataset):
    tr = Trainer(tiny_dataset, small_run("sh", iters=4, densify_from=100))
    before = {k: v.copy() for k, v in tr.model.mlp.params.items()}
    sh0 = tr.model.gaussians.sh_coeffs.copy()
    feat0 = tr.model.gaussians.appearance_feat.copy()
    res = tr.run()
    assert res.model.color_mode == "sh"
    assert not np.array_equal(res.model.gaussians.sh_coeffs, sh0)
    assert np.array_equal(res.model.gaussians.appearance_feat, feat0)
    for k, v in before.items():
        assert np.array_equal(res.model.mlp.params[k], v)


def test_rgb_loss_drops_on_short_run(tiny_dataset):
    res = Trainer(tiny_dataset, small_run(iters=120, densify_interval=40)).run()
    rgb = [b.rgb for b in res.breakdowns]
    assert np.mean(rgb[-7:]) < np.mean(rgb[:7])


def test_holdout_only_dataset_is_rejected(tiny_dataset):
    import dataclasses
    meta = dict(tiny_dataset.meta, holdout=list(range(len(tiny_dataset))))
    ds = dataclasses.replace(tiny_dataset, meta=meta)
    with pytest.raises(DataError):
        Trainer(ds, small_run())
