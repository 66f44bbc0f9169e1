import math

import numpy as np
import pytest

from globalvol import diffcore as dc
from globalvol import kernels
from globalvol.neuralmodels import (ModelConfig, VolModel, gru_forward, lstm_forward,
                                    positional_encoding, rnn_forward, transformer_forward)

from conftest import max_rel_grad_error


def softplus(x):
    return math.log1p(math.exp(x))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def tiny(arch, **kw):
    base = dict(arch=arch, n_layers=1, d_hidden=1, d_model=2, d_ff=2, n_heads=1, max_context=8)
    base.update(kw)
    return ModelConfig(**base)


def set_params(model, **values):
    for k, v in values.items():
        model.params[k].data[...] = np.asarray(v, dtype=np.float64).reshape(model.params[k].shape)


ALL = ["RNN", "GRU", "LSTM", "Transformer"]


@pytest.mark.parametrize("arch", ALL)
def test_zero_weights_give_log2(arch):
    m = VolModel.zeros(tiny(arch, d_hidden=3, d_model=4, d_ff=3, n_heads=2))
    sig = m.sigma_path(np.random.default_rng(0).standard_normal(12))
    np.testing.assert_allclose(sig, math.log(2.0) + 1e-8, rtol=0, atol=1e-15)
    assert abs(sig[0] - 0.6931) < 1e-4


def test_rnn_single_step_by_hand():
    m = VolModel.zeros(tiny("RNN"))
    set_params(m, **{"layer0.W_x": 0.5, "layer0.b": -0.2, "head.W": 1.5, "head.b": 0.1})
    sig = rnn_forward(m, np.array([2.0, 0.0]))
    h1 = sigmoid(0.5 * 2.0 - 0.2)
    assert sig[0] == pytest.approx(softplus(0.1) + 1e-8, abs=1e-15)
    assert sig[1] == pytest.approx(softplus(1.5 * h1 + 0.1) + 1e-8, abs=1e-15)


def test_gru_single_step_by_hand():
    m = VolModel.zeros(tiny("GRU"))
    set_params(m, **{"layer0.W_x": [0.3, -0.4, 0.8], "layer0.b": [0.1, 0.2, -0.3],
                     "layer0.W_h": [0.7, 0.9, -1.1], "head.W": -0.6, "head.b": 0.05})
    y1 = 1.5
    z = sigmoid(-0.4 * y1 + 0.2)
    n = math.tanh(0.8 * y1 - 0.3)  # r * h0 = 0
    h1 = (1 - z) * n
    sig = gru_forward(m, np.array([y1, 0.0]))
    assert sig[1] == pytest.approx(softplus(-0.6 * h1 + 0.05) + 1e-8, abs=1e-15)


def test_lstm_single_step_by_hand():
    m = VolModel.zeros(tiny("LSTM"))
    set_params(m, **{"layer0.W_x": [0.3, -0.4, 0.8, 1.2], "layer0.b": [0.1, 0.2, -0.3, 0.05],
                     "layer0.W_h": [0.5, 0.5, 0.5, 0.5], "head.W": 0.9, "head.b": -0.1})
    y1 = -0.7
    i = sigmoid(-0.4 * y1 + 0.2)
    o = sigmoid(0.8 * y1 - 0.3)
    g = math.tanh(1.2 * y1 + 0.05)
    h1 = o * math.tanh(i * g)
    sig = lstm_forward(m, np.array([y1, 0.0]))
    assert sig[1] == pytest.approx(softplus(0.9 * h1 - 0.1) + 1e-8, abs=1e-15)


def test_gru_saturated_update_gate_freezes_state():
    m = VolModel.init(tiny("GRU", d_hidden=3), seed=1)
    b = m.params["layer0.b"].data
    b[3:6] = 60.0  # z -> 1
    sig = m.sigma_path(np.random.default_rng(2).standard_normal(30))
    np.testing.assert_allclose(sig[1:], sig[1], rtol=0, atol=1e-12)


def test_lstm_saturated_gates_keep_cell_constant():
    H = 3
    xp = np.random.default_rng(3).standard_normal((20, 2, 4 * H))
    xp[:, :, :H] = 60.0      # f -> 1
    xp[:, :, H:2 * H] = -60.0  # i -> 0
    _, cs, _ = kernels.lstm_scan_forward(xp, np.zeros((H, 4 * H)))
    np.testing.assert_allclose(cs, 0.0, atol=1e-25)


def test_transformer_single_position_by_hand():
    cfg = tiny("Transformer", d_model=2, d_ff=2, n_heads=1)
    m = VolModel.init(cfg, seed=4)
    P = {k: v.data for k, v in m.params.items()}
    y1 = 0.8
    x0 = y1 * P["embed.W"][0] + P["embed.b"] + np.array([0.0, 1.0])  # PE(0) = [sin 0, cos 0]
    v = x0 @ P["block0.Wv"]  # one position: attention weight is exactly 1

    def ln(x, g, b):
        mu = x.mean()
        return (x - mu) / math.sqrt(((x - mu) ** 2).mean() + 1e-5) * g + b

    a = ln(x0 + v @ P["block0.Wo"], P["block0.att.ln_g"], P["block0.att.ln_b"])
    ff = np.maximum(0, a @ P["block0.W1"] + P["block0.b1"]) @ P["block0.W2"] + P["block0.b2"]
    xl = ln(a + ff, P["block0.ff.ln_g"], P["block0.ff.ln_b"])
    expect = softplus(float(xl @ P["head.W"][:, 0] + P["head.b"][0])) + 1e-8
    sig = transformer_forward(m, np.array([y1, 0.3]))
    assert sig[1] == pytest.approx(expect, rel=1e-13)


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[2], [math.sin(2), math.cos(2), math.sin(2 / 100), math.cos(2 / 100)])


@pytest.mark.parametrize("arch", ALL)
def test_gradients_match_finite_differences(arch):
    cfg = ModelConfig(arch=arch, n_layers=2, d_hidden=3, d_model=4, d_ff=3, n_heads=2, max_context=8)
    rng = np.random.default_rng(5)
    for seed in range(3):
        m = VolModel.init(cfg, seed=seed)
        y = rng.standard_normal(8)
        assert max_rel_grad_error(m, y) < 1e-4


@pytest.mark.parametrize("arch", ["RNN", "GRU", "LSTM"])
def test_fused_scan_matches_reference_graph(arch):
    cfg = ModelConfig(arch=arch, n_layers=2, d_hidden=4)
    m = VolModel.init(cfg, seed=6)
    Y = np.random.default_rng(7).standard_normal((15, 3))
    W = np.random.default_rng(8).standard_normal((15, 3))
    grads = []
    for fused in (True, False):
        m.fused = fused
        dc.zero_grad(m.parameters())
        out = m.forward(Y)
        dc.backward((out * W).sum())
        grads.append((out.data.copy(), [p.grad.copy() for p in m.parameters()]))
    np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=0, atol=1e-14)
    for a, b in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("arch", ALL)
def test_causality_under_suffix_perturbation(arch):
    cfg = ModelConfig(arch=arch, n_layers=2, d_hidden=3, d_model=4, d_ff=4, n_heads=2, max_context=5)
    m = VolModel.init(cfg, seed=9)
    rng = np.random.default_rng(10)
    y = rng.standard_normal(14)
    base = m.sigma_path(y)
    for t in range(1, 14):
        z = y.copy()
        z[t:] += rng.standard_normal(14 - t) * 3
        # sigma_{s} depends on y_{1..s-1} only
        np.testing.assert_array_equal(m.sigma_path(z)[: t + 1], base[: t + 1])


def test_transformer_window_equals_standalone_context():
    cfg = ModelConfig(arch="Transformer", n_layers=1, d_model=4, d_ff=4, n_heads=2, max_context=4)
    m = VolModel.init(cfg, seed=11)
    y = np.random.default_rng(12).standard_normal(12)
    full = m.sigma_path(y)
    for t in range(5, 12):  # sigma_{t+1} from the last four inputs only
        alone = m.sigma_path(np.append(y[t - 4: t], 0.0))
        assert full[t] == pytest.approx(alone[-1], rel=1e-13)


@pytest.mark.parametrize("arch", ALL)
def test_eval_deterministic_and_dropout_only_in_training(arch):
    cfg = ModelConfig(arch=arch, n_layers=2, d_hidden=4, d_model=4, d_ff=4, n_heads=2, dropout=0.5)
    m = VolModel.init(cfg, seed=13)
    Y = np.random.default_rng(14).standard_normal((10, 2))
    with dc.no_grad():
        a, b = m.forward(Y).data, m.forward(Y).data
        c = m.forward(Y, training=True, rng=np.random.default_rng(0)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all(a > 1e-8) and np.all(c > 1e-8)


def test_batched_equals_single_series():
    m = VolModel.init(ModelConfig(arch="LSTM", d_hidden=4), seed=15)
    rng = np.random.default_rng(16)
    ys = [rng.standard_normal(n) for n in (9, 5, 12)]
    for y, s in zip(ys, m.sigma_paths(ys)):
        np.testing.assert_allclose(s, m.sigma_path(y), rtol=0, atol=1e-15)


@pytest.mark.parametrize("arch", ALL)
def test_checkpoint_round_trip(arch, tmp_path):
    cfg = ModelConfig(arch=arch, n_layers=2, d_hidden=3, d_model=4, d_ff=4, n_heads=2)
    m = VolModel.init(cfg, seed=17)
    m.save(tmp_path / "m.json")
    back = VolModel.load(tmp_path / "m.json")
    assert back.config == cfg
    for k in m.params:
        assert np.array_equal(m.params[k].data, back.params[k].data)


def test_checkpoint_version_checked(tmp_path):
    import json
    m = VolModel.init(ModelConfig(arch="RNN", d_hidden=2))
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(dc.ContractError):
        VolModel.load(tmp_path / "m.json")


def test_config_invariants():
    with pytest.raises(dc.ContractError):
        ModelConfig(arch="Transformer", d_model=5, n_heads=2)
    with pytest.raises(dc.ContractError):
        ModelConfig(arch="CNN")
    with pytest.raises(dc.ContractError):
        ModelConfig(dropout=1.0)


def test_nonfinite_input_rejected():
    m = VolModel.init(ModelConfig(arch="RNN", d_hidden=2))
    with pytest.raises(dc.ContractError):
        m.sigma_path(np.array([0.1, np.nan]))


def test_init_bounds():
    m = VolModel.init(ModelConfig(arch="LSTM", d_hidden=16), seed=0)
    for p in m.parameters():
        assert np.all(np.abs(p.data) <= 0.25)
