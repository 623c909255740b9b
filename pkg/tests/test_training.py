import math

import numpy as np
import pytest
import torch

from ntforecast import training
from ntforecast.data import SplitSpec, split
from ntforecast.errors import ArgumentError, LeakageError, ShapeError, TrainingError
from ntforecast.graph import ClusterAssignment, spearman_matrix, cluster_series
from ntforecast.losses import huber_loss
from ntforecast.models import CALFConfig, LSTMConfig
from ntforecast.synth import synth_generate
from ntforecast.training import (
    EarlyStopper,
    GridSpec,
    PreparedData,
    RunLog,
    TrainConfig,
    fit_cluster_assignment,
    grid_search,
    point_feasible,
    run_point,
    train_cluster_calf,
    train_model,
)


def huber_oracle(r, delta):
    r = abs(r)
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


@pytest.fixture(scope="module")
def prep():
    r = synth_generate(6, 900, 2, seed=4)
    return PreparedData.from_splits(*split(r.data, SplitSpec()), r.graph)


def windows(prep, L=24, H=2):
    return prep.windows("train", L, H, True), prep.windows("val", L, H, True)


# ---------------------------------------------------------------- Huber

def test_huber_examples():
    assert huber_loss(torch.zeros(3), torch.zeros(3)).item() == 0.0
    assert huber_loss(torch.tensor([0.5, 2.0]), torch.zeros(2), 1.0).item() == pytest.approx(0.8125)
    for d in (0.3, 1.0, 2.5):
        assert huber_loss(torch.tensor([d]), torch.zeros(1), d).item() == pytest.approx(0.5 * d * d)


def test_huber_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        r = rng.normal(scale=3.0, size=int(rng.integers(1, 20)))
        d = float(rng.uniform(0.1, 3.0))
        got = huber_loss(torch.tensor(r), torch.zeros(len(r), dtype=torch.float64), d).item()
        assert got == pytest.approx(np.mean([huber_oracle(x, d) for x in r]), rel=1e-12)


@pytest.mark.parametrize("offset", [-1e-3, 1e-3])
@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_huber_gradient_near_knee(offset, delta):
    r0 = delta + offset
    p = torch.tensor([r0], dtype=torch.float64, requires_grad=True)
    huber_loss(p, torch.zeros(1, dtype=torch.float64), delta).backward()
    eps = 1e-7
    fd = (huber_oracle(r0 + eps, delta) - huber_oracle(r0 - eps, delta)) / (2 * eps)
    assert p.grad.item() == pytest.approx(fd, abs=1e-6)


def test_huber_errors():
    with pytest.raises(ShapeError):
        huber_loss(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ArgumentError):
        huber_loss(torch.zeros(2), torch.zeros(2), 0.0)


# ---------------------------------------------------------------- configs and logs

def test_train_config_invariants():
    with pytest.raises(ArgumentError):
        TrainConfig(max_epochs=3, early_stop_patience=3)
    with pytest.raises(ArgumentError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ArgumentError):
        TrainConfig(optimizer="rmsprop")


def test_early_stopper_keeps_best():
    m = torch.nn.Linear(1, 1)
    s = EarlyStopper(2)
    for epoch, loss in enumerate([3.0, 2.0, 1.0, 1.5, 1.2], start=1):
        with torch.no_grad():
            m.weight.fill_(float(epoch))
        stop = s.update(epoch, loss, m)
    assert stop and s.best_epoch == 3
    assert s.best_state["weight"].item() == 3.0


# ---------------------------------------------------------------- train_model

def test_early_stopping_contract(prep, monkeypatch):
    curve = iter([5.0, 4.0, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0])
    snapshots = {}
    real = training._validation_loss

    def fake(model, batch, delta, batch_size):
        real(model, batch, delta, batch_size)
        epoch = len(snapshots) + 1
        snapshots[epoch] = {k: v.clone() for k, v in model.state_dict().items()}
        return next(curve)

    monkeypatch.setattr(training, "_validation_loss", fake)
    tr, va = windows(prep)
    cfg = LSTMConfig(n_series=tr.N, input_length=24, horizon=2, hidden_units=4)
    model, log = train_model("lstm", cfg, TrainConfig(max_epochs=10, early_stop_patience=2), tr, va)
    assert log.n_epochs == 5
    assert log.best_epoch == 3
    assert log.val_losses[log.best_epoch - 1] == min(log.val_losses)
    for k, v in model.state_dict().items():
        assert torch.equal(v, snapshots[3][k])


def test_training_is_deterministic(prep):
    tr, va = windows(prep)
    cfg = LSTMConfig(n_series=tr.N, input_length=24, horizon=2, hidden_units=6)
    tc = TrainConfig(max_epochs=3, early_stop_patience=2, seed=7)
    _, a = train_model("lstm", cfg, tc, tr, va)
    _, b = train_model("lstm", cfg, tc, tr, va)
    assert a.train_losses == b.train_losses and a.val_losses == b.val_losses
    _, c = train_model("lstm", cfg, TrainConfig(max_epochs=3, early_stop_patience=2, seed=8), tr, va)
    assert c.train_losses != a.train_losses


def test_training_reduces_validation_loss(prep):
    tr, va = windows(prep, L=24, H=1)
    cfg = LSTMConfig(n_series=tr.N, input_length=24, horizon=1, hidden_units=16, dropout_rate=0.0)
    _, log = train_model("lstm", cfg, TrainConfig(max_epochs=20, early_stop_patience=5, learning_rate=3e-3), tr, va)
    assert min(log.val_losses) <= 0.8 * log.val_losses[0]


def test_divergence_raises_with_log(prep):
    tr, va = windows(prep)
    bad = tr.__class__(tr.inputs * np.nan, tr.targets, tr.origin_indices, tr.link_ids, tr.rows, tr.scaled)
    cfg = LSTMConfig(n_series=tr.N, input_length=24, horizon=2, hidden_units=4)
    with pytest.raises(TrainingError) as info:
        train_model("lstm", cfg, TrainConfig(max_epochs=3, early_stop_patience=1), bad, va)
    assert isinstance(info.value.run_log, RunLog)
    assert info.value.run_log.n_epochs == 1


def test_train_model_requires_scaled(prep):
    raw = prep.windows("train", 24, 2, scaled=False)
    cfg = LSTMConfig(n_series=raw.N, input_length=24, horizon=2)
    with pytest.raises(ArgumentError, match="scaled"):
        train_model("lstm", cfg, TrainConfig(max_epochs=2, early_stop_patience=1), raw, raw)


def test_train_stride_subsamples(prep):
    tr, va = windows(prep)
    cfg = LSTMConfig(n_series=tr.N, input_length=24, horizon=2, hidden_units=4)
    _, full = train_model("lstm", cfg, TrainConfig(max_epochs=2, early_stop_patience=1), tr, va)
    _, half = train_model("lstm", cfg, TrainConfig(max_epochs=2, early_stop_patience=1, train_stride=2), tr, va)
    assert full.train_losses != half.train_losses


def test_all_architectures_train(prep):
    tc = TrainConfig(max_epochs=2, early_stop_patience=1)
    small = {
        "lstm": {"hidden_units": 4},
        "ntgat": {"n_heads": 2, "lift_dim": 2, "gat_out_dim": 4, "lstm1_hidden": 4, "lstm2_hidden": 4, "hops": 1},
        "calf": {"d_model": 8, "n_heads": 2, "d_ff": 16, "vocab_size": 16, "n_principal": 4, "n_layers": 1},
    }
    small["cluster-calf"] = {**small["calf"], "k": 2}
    for arch, params in small.items():
        res = run_point(arch, 24, 2, params, prep, tc)
        assert res.test_report.per_series.shape[0] == prep.train.N
        assert math.isfinite(res.val_smape) and 0 <= res.test_smape <= 200


# ---------------------------------------------------------------- Cluster-CALF

CALF_SMALL = dict(d_model=8, n_heads=2, d_ff=16, vocab_size=16, n_principal=4, n_layers=1)


def test_cluster_calf_k1_equals_plain_calf(prep):
    tr, va = windows(prep)
    cfg = CALFConfig(input_length=24, horizon=2, **CALF_SMALL)
    tc = TrainConfig(max_epochs=2, early_stop_patience=1)
    single, slog = train_model("calf", cfg, tc, tr, va)
    cc, clog = train_cluster_calf(fit_cluster_assignment(prep.train, 1), cfg, tc, tr, va)
    assert clog.parts[0].val_losses == slog.val_losses
    x = torch.as_tensor(va.inputs[:5], dtype=torch.float32)
    assert torch.equal(cc.predict(x), single.predict(x))


def test_cluster_assignment_leakage_guard(prep):
    from ntforecast.data import concat_rows

    full = concat_rows([prep.train, prep.val, prep.test])
    with pytest.raises(LeakageError):
        fit_cluster_assignment(full, 2)
    # an assignment carrying a fingerprint over test rows is rejected at training time
    leaky = cluster_series(spearman_matrix(full), 2)
    tr, va = windows(prep)
    cfg = CALFConfig(input_length=24, horizon=2, **CALF_SMALL)
    with pytest.raises(LeakageError):
        train_cluster_calf(leaky, cfg, TrainConfig(max_epochs=2, early_stop_patience=1), tr, va)


def test_cluster_calf_rejects_wrong_size(prep):
    tr, va = windows(prep)
    cfg = CALFConfig(input_length=24, horizon=2, **CALF_SMALL)
    with pytest.raises(ArgumentError):
        train_cluster_calf(ClusterAssignment(1, np.zeros(3, dtype=int)), cfg,
                           TrainConfig(max_epochs=2, early_stop_patience=1), tr, va)


# ---------------------------------------------------------------- grid search

FAST = TrainConfig(max_epochs=2, early_stop_patience=1)


def test_grid_single_point_equals_run_point(prep):
    res = grid_search("lstm", GridSpec((2,), (24,), {"hidden_units": [4]}), prep, FAST)
    direct = run_point("lstm", 24, 2, {"hidden_units": 4}, prep, FAST)
    assert len(res) == 1
    assert res[0].val_smape == direct.val_smape
    assert res[0].run_log.val_losses == direct.run_log.val_losses


def test_grid_sorted_and_stable(prep):
    grid = GridSpec((1, 2), (24,), {"hidden_units": [3, 5]})
    res = grid_search("lstm", grid, prep, FAST)
    assert len(res) == 4
    vals = [r.val_smape for r in res]
    assert vals == sorted(vals)
    assert len({r.config_id for r in res}) == 4


def test_grid_stable_tie_break(prep, monkeypatch):
    # identical scores must keep grid order
    def fake(arch, L, H, params, prep, cfg, keep_model=False, varied=None):
        return training.GridResult(training.config_id(arch, L, H, varied), arch, L, H, dict(params), 1.0, 1.0,
                                   RunLog("x"), None, None, 0.0)

    monkeypatch.setattr(training, "run_point", fake)
    res = grid_search("lstm", GridSpec((1, 2), (24, 48), {}), prep, FAST)
    assert [(r.L, r.H) for r in res] == [(24, 1), (24, 2), (48, 1), (48, 2)]


def test_grid_skips_infeasible(prep, caplog):
    res = grid_search("lstm", GridSpec((1,), (24, 400), {"hidden_units": [3]}), prep, FAST)
    assert [r.L for r in res] == [24]
    assert "skipping" in caplog.text


def test_feasibility_rule():
    r = synth_generate(4, 572, 1, seed=0)
    # 400 / 86 / 86 rows; (336, 24) leaves 41 training windows but val/test are shorter than L+H
    p = PreparedData.from_splits(*split(r.data, SplitSpec(0.7, 0.15, 0.15)))
    assert p.train.T == 400
    assert "val split" in point_feasible(p, 336, 24)
    assert "training windows" in point_feasible(p, 360, 10)
    assert point_feasible(p, 24, 24) is None


def test_grid_parallel_matches_sequential(prep):
    grid = GridSpec((1, 2), (24,), {"hidden_units": [3]})
    seq = grid_search("lstm", grid, prep, FAST, n_jobs=1)
    par = grid_search("lstm", grid, prep, FAST, n_jobs=2)
    assert [r.config_id for r in seq] == [r.config_id for r in par]
    for a, b in zip(seq, par):
        assert a.run_log.val_losses == b.run_log.val_losses
        assert a.val_smape == b.val_smape and a.test_smape == b.test_smape


def test_predictions_in_original_units(prep):
    res = run_point("lstm", 24, 1, {"hidden_units": 4}, prep, FAST, keep_model=True)
    te = prep.windows("test", 24, 1, scaled=True)
    pred = training.predict(res.model, te, prep.scaler).predictions
    raw = prep.windows("test", 24, 1, scaled=False)
    # predictions live on the data's scale, not the unit-variance scale
    assert abs(pred.mean() - raw.targets.mean()) < 0.5 * raw.targets.std()
    with pytest.raises(ArgumentError):
        training.predict(res.model, te, None)
