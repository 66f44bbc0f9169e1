import itertools

import numpy as np
import pytest

from globalvol import diffcore as dc
from globalvol import training as tr
from globalvol.neuralmodels import ModelConfig, VolModel, pad_batch
from globalvol.series import ReturnSeries
from globalvol.simgarch import GarchParams, make_universe, simulate


def small_series(seed, T=60):
    return simulate(GarchParams(0.05, 0.15, 0.8), T=T, seed=seed, series_id=f"s{seed}")


def lstm(seed=0, H=4):
    return VolModel.init(ModelConfig(arch="LSTM", d_hidden=H), seed=seed)


def test_sequence_nll_examples():
    assert tr.sequence_nll(np.array([1.0]), np.array([0.0])).item() == pytest.approx(0.9189385332, abs=1e-10)
    assert tr.sequence_nll(np.array([1.0]), np.array([1.0])).item() == pytest.approx(1.4189385332, abs=1e-10)
    with pytest.raises(dc.ContractError):
        tr.sequence_nll(np.ones(3), np.zeros(3), mask=np.zeros(3, dtype=bool))
    with pytest.raises(dc.ContractError):
        tr.sequence_nll(np.array([1.0, 0.0]), np.zeros(2))


def test_sequence_nll_matches_gaussian_density():
    rng = np.random.default_rng(0)
    y, s = rng.standard_normal(50), rng.uniform(0.5, 2, 50)
    dens = np.exp(-0.5 * (y / s) ** 2) / (np.sqrt(2 * np.pi) * s)
    assert tr.sequence_nll(s, y).item() == pytest.approx(-np.mean(np.log(dens)), rel=1e-13)


def test_patience_one_with_worsening_validation(monkeypatch):
    vals = iter([5.0, 1.0, 2.0, 3.0, 4.0])  # initial, then epochs
    monkeypatch.setattr(tr, "validation_nll", lambda *a, **k: next(vals))
    trace = tr.train_local(lstm(), small_series(1), tr.TrainConfig(mode="local", patience=1, max_epochs=10))
    assert trace.n_epochs == 2 and trace.stopped_early and trace.best_epoch == 1


def test_zero_lr_leaves_parameters_unchanged():
    m = lstm()
    before = m.state_dict()
    trace = tr.train_local(m, small_series(2), tr.TrainConfig(mode="local", lr=0.0, max_epochs=4, patience=10))
    for k, v in before.items():
        assert np.array_equal(v, m.params[k].data)
    assert len(set(trace.train_nll)) == 1 and len(set(trace.val_nll)) == 1


def test_local_training_improves_validation():
    s = simulate(GarchParams(0.05, 0.15, 0.8), T=500, seed=3)
    m = lstm(H=8)
    trace = tr.train_local(m, s, tr.TrainConfig(mode="local", lr=1e-2, max_epochs=60, patience=10))
    assert trace.best_val_nll <= trace.initial_val_nll
    assert tr.validation_nll(m, [s]) == trace.best_val_nll


def test_single_series_global_equals_local():
    s = small_series(4)
    cfg = tr.TrainConfig(lr=1e-2, batch_size=1, max_epochs=5, patience=10, seed=7)
    a, b = lstm(1), lstm(1)
    ta = tr.train_local(a, s, cfg)
    tb = tr.train_global(b, [s], cfg)
    assert ta.train_nll == tb.train_nll and ta.val_nll == tb.val_nll
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def _grad_of(model, segments):
    Y, lengths = pad_batch(segments)
    mask = tr._window_mask(lengths, [0] * len(lengths), lengths, Y.shape[0])
    dc.zero_grad(model.parameters())
    dc.backward(tr.batch_nll(model.forward(Y), Y, mask))
    return np.concatenate([p.grad.ravel() for p in model.parameters()])


def test_expected_minibatch_gradient_equals_full_gradient():
    series = [small_series(10 + i, T=40).train for i in range(4)]
    m = lstm(seed=2)
    full = _grad_of(m, series)
    batch_grads = []
    for pair in itertools.combinations(range(4), 2):
        # each 2+2 partition contributes both halves; averaging all halves covers every partition
        batch_grads.append(_grad_of(m, [series[i] for i in pair]))
    np.testing.assert_allclose(np.mean(batch_grads, axis=0), full, rtol=1e-10, atol=1e-14)


def test_padding_contributes_nothing():
    m = lstm(seed=3)
    a = small_series(20, T=50).train
    b = small_series(21, T=30).train
    g_padded = _grad_of(m, [a, b])
    ga, gb = _grad_of(m, [a]), _grad_of(m, [b])
    np.testing.assert_allclose(g_padded, 0.5 * (ga + gb), rtol=1e-10, atol=1e-14)


def test_batch_objective_equals_mean_of_sequence_nll():
    m = lstm(seed=4)
    series = [small_series(30 + i, T=30 + 7 * i) for i in range(5)]
    segs = [s.train for s in series]
    Y, lengths = pad_batch(segs)
    mask = tr._window_mask(lengths, [0] * 5, lengths, Y.shape[0])
    with dc.no_grad():
        batch = tr.batch_nll(m.forward(Y), Y, mask).item()
    assert batch == pytest.approx(tr.global_objective(m, series), abs=1e-10)


def test_global_training_deterministic():
    u = make_universe(6, T=60, master_seed=1)
    cfg = tr.TrainConfig(lr=1e-2, batch_size=4, max_epochs=4, patience=10, seed=3)
    a, b = lstm(), lstm()
    tr.train_global(a, u, cfg)
    tr.train_global(b, u, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_early_stopping_restores_best_epoch():
    u = make_universe(4, T=80, master_seed=2)
    cfg = tr.TrainConfig(lr=0.05, batch_size=2, max_epochs=25, patience=25, seed=1)
    m = lstm()
    trace = tr.train_global(m, u, cfg)
    assert trace.best_val_nll == min(trace.val_nll)
    replay = lstm()
    cfg_b = tr.TrainConfig(lr=0.05, batch_size=2, max_epochs=trace.best_epoch, patience=25, seed=1)
    tr.train_global(replay, u, cfg_b)
    for k in m.params:
        assert np.array_equal(m.params[k].data, replay.params[k].data)


def test_divergence_raises_with_trace():
    m = lstm()
    m.params["head.b"].data[:] = np.nan
    with pytest.raises(tr.TrainingDivergedError) as err:
        tr.train_local(m, small_series(5), tr.TrainConfig(mode="local", max_epochs=3))
    assert err.value.trace.n_epochs == 1


def test_finetune_zero_epochs_is_identity():
    m = lstm()
    before = m.state_dict()
    tr.finetune(m, small_series(6), tr.TrainConfig(mode="finetune", lr=1e-4, max_epochs=0, frozen_prefix=True))
    for k, v in before.items():
        assert np.array_equal(v, m.params[k].data)


def test_finetune_only_moves_head():
    u = make_universe(8, T=200, master_seed=3)
    m = lstm(H=6)
    tr.train_global(m, u[:6], tr.TrainConfig(lr=1e-2, batch_size=3, max_epochs=5))
    before = m.state_dict()
    cfg = tr.TrainConfig(mode="finetune", lr=1e-3, max_epochs=15, patience=100, frozen_prefix=True)
    trace = tr.finetune(m, u[7], cfg)
    for k, v in before.items():
        if k.startswith("head."):
            continue
        assert np.array_equal(v, m.params[k].data)
        assert m.params[k].requires_grad
    assert any(not np.array_equal(before[k], m.params[k].data) for k in ("head.W", "head.b"))
    assert len(trace.test_nll) == trace.n_epochs
    assert trace.train_nll[4] <= trace.train_nll[0]


def test_finetune_requires_freezing():
    with pytest.raises(dc.ContractError):
        tr.finetune(lstm(), small_series(7), tr.TrainConfig(mode="finetune"))


def test_config_files(tmp_path):
    (tmp_path / "c.toml").write_text('[train]\nlr = 0.01\nbatch_size = 8\nmode = "local"\n')
    (tmp_path / "c.json").write_text('{"lr": 0.02, "patience": 3}')
    assert tr.TrainConfig.from_file(tmp_path / "c.toml").batch_size == 8
    assert tr.TrainConfig.from_file(tmp_path / "c.json").patience == 3
    with pytest.raises(dc.ContractError):
        tr.TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(dc.ContractError):
        tr.TrainConfig(lr=-1)


def test_trace_csv(tmp_path):
    t = tr.TrainTrace(train_nll=[1.5, 1.25], val_nll=[1.75, 1.5], best_epoch=2)
    t.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["epoch,train_nll,val_nll", "1,1.5,1.75", "2,1.25,1.5"]


def test_series_without_validation_rejected():
    s = ReturnSeries("x", np.zeros(10), 10, 10)
    with pytest.raises(dc.ContractError):
        tr.train_local(lstm(), s, tr.TrainConfig(mode="local"))


def test_max_steps_caps_updates_across_epochs(monkeypatch):
    U = [small_series(i) for i in range(5)]
    calls = []
    real = tr._batch_step
    monkeypatch.setattr(tr, "_batch_step", lambda *a: calls.append(1) or real(*a))
    trace = tr.train_global(lstm(), U, tr.TrainConfig(lr=1e-3, batch_size=2, max_epochs=10,
                                                      patience=50, max_steps=7))
    assert len(calls) == 7 and trace.n_epochs == 3
    with pytest.raises(dc.ContractError):
        tr.TrainConfig(max_steps=0)
