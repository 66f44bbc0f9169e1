"""Neural volatility forecasters: RNN, GRU, LSTM and a decoder-only Transformer.

Every model maps returns ``y_{1:t}`` to ``sigma_{t+1}`` and shares the
output head ``softplus(h W + b) + 1e-8``. ``sigma_1`` comes from the zero
initial state, i.e. ``softplus(b) + 1e-8``.

Batched inputs are time-major ``(T, B)``. Recurrent layers run as fused
diffcore nodes whose backward pass calls the scan kernels; a step-by-step
reference built from primitive ops is kept for cross-checking.

Checkpoint format (JSON)::

    {"format": "globalvol-checkpoint", "version": 1,
     "config": {...ModelConfig...},
     "params": {name: {"shape": [...], "data": [...]}}}

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tensor

ARCHS = ("RNN", "GRU", "LSTM", "Transformer")
_GATES = {"RNN": 1, "GRU": 3, "LSTM": 4}
SIGMA_FLOOR = 1e-8
LN_EPS = 1e-5
CHECKPOINT_FORMAT = "globalvol-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    arch: str = "LSTM"
    n_layers: int = 1
    d_hidden: int = 16
    n_heads: int = 2
    d_model: int = 16
    d_ff: int = 16
    dropout: float = 0.0
    max_context: int = 64

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise dc.ContractError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.n_layers < 1:
            raise dc.ContractError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise dc.ContractError("dropout must be in [0, 1)")
        if self.arch == "Transformer":
            if self.d_model % self.n_heads:
                raise dc.ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
            if self.max_context < 1:
                raise dc.ContractError("max_context must be >= 1")

    @property
    def width(self) -> int:
        """Size of the representation fed to the output head."""
        return self.d_model if self.arch == "Transformer" else self.d_hidden

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------------------
# Fused recurrent scans
# ---------------------------------------------------------------------------

def _scan_node(arch: str, xp: Tensor, w_h: Tensor) -> Tensor:
    """Hidden states ``(T, B, H)`` of one recurrent layer given its input projection."""
    x = np.ascontiguousarray(xp.data)
    w = np.ascontiguousarray(w_h.data)
    if arch == "RNN":
        hs = kernels.rnn_scan_forward(x, w)
        saved = (hs,)
    elif arch == "GRU":
        hs, gates = kernels.gru_scan_forward(x, w)
        saved = (hs, gates)
    else:
        hs, cs, gates = kernels.lstm_scan_forward(x, w)
        saved = (hs, cs, gates)
    back = {"RNN": kernels.rnn_scan_backward, "GRU": kernels.gru_scan_backward,
            "LSTM": kernels.lstm_scan_backward}[arch]

    def bw(g):
        return back(w, *saved, np.ascontiguousarray(g))

    return dc.make_node(np.asarray(hs), (xp, w_h), bw, op=f"{arch.lower()}_scan")


def _reference_scan(arch: str, xp: Tensor, w_h: Tensor) -> Tensor:
    """Same recursion as :func:`_scan_node`, one primitive op at a time."""
    T, B, G = xp.shape
    H = w_h.shape[0]
    h = dc.tensor(np.zeros((B, H)))
    c = dc.tensor(np.zeros((B, H)))
    out = []
    for t in range(T):
        x = xp[t]
        if arch == "RNN":
            h = dc.sigmoid(x + h @ w_h)
        elif arch == "GRU":
            rz = dc.sigmoid(x[:, : 2 * H] + h @ w_h[:, : 2 * H])
            r, z = rz[:, :H], rz[:, H:]
            n = dc.tanh(x[:, 2 * H:] + (r * h) @ w_h[:, 2 * H:])
            h = z * h + (1.0 - z) * n
        else:
            a = x + h @ w_h
            f = dc.sigmoid(a[:, :H])
            i = dc.sigmoid(a[:, H: 2 * H])
            o = dc.sigmoid(a[:, 2 * H: 3 * H])
            g = dc.tanh(a[:, 3 * H:])
            c = f * c + i * g
            h = o * dc.tanh(c)
        out.append(h)
    return dc.stack(out, axis=0)


# ---------------------------------------------------------------------------
# Transformer pieces
# ---------------------------------------------------------------------------

def positional_encoding(n_pos: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_pos, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / dc.sqrt(var + eps) * gain + bias


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class VolModel:
    """A neural forecaster with named parameters stored as diffcore tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.fused = True

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "VolModel":
        """Uniform(-1/sqrt(width), 1/sqrt(width)) initialization for every tensor.

        LayerNorm gains start at 1 and biases at 0.
        """
        rng = np.random.default_rng(seed)
        shapes = cls.param_shapes(config)
        bound = 1.0 / math.sqrt(config.width)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".ln_g"):
                data = np.ones(shape)
            elif name.endswith(".ln_b"):
                data = np.zeros(shape)
            else:
                data = rng.uniform(-bound, bound, size=shape)
            params[name] = dc.tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "VolModel":
        model = cls.init(config)
        for p in model.params.values():
            p.data[...] = 0.0
        return model

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if cfg.arch == "Transformer":
            d, f = cfg.d_model, cfg.d_ff
            shapes["embed.W"] = (1, d)
            shapes["embed.b"] = (d,)
            for l in range(cfg.n_layers):
                for m in ("Wq", "Wk", "Wv", "Wo"):
                    shapes[f"block{l}.{m}"] = (d, d)
                shapes[f"block{l}.att.ln_g"] = (d,)
                shapes[f"block{l}.att.ln_b"] = (d,)
                shapes[f"block{l}.W1"] = (d, f)
                shapes[f"block{l}.b1"] = (f,)
                shapes[f"block{l}.W2"] = (f, d)
                shapes[f"block{l}.b2"] = (d,)
                shapes[f"block{l}.ff.ln_g"] = (d,)
                shapes[f"block{l}.ff.ln_b"] = (d,)
        else:
            H, G = cfg.d_hidden, _GATES[cfg.arch]
            for l in range(cfg.n_layers):
                d_in = 1 if l == 0 else H
                shapes[f"layer{l}.W_x"] = (d_in, G * H)
                shapes[f"layer{l}.W_h"] = (H, G * H)
                shapes[f"layer{l}.b"] = (G * H,)
        shapes["head.W"] = (cfg.width, 1)
        shapes["head.b"] = (1,)
        return shapes

    # -- parameter views ------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_parameters(self) -> list[Tensor]:
        return [self.params["head.W"], self.params["head.b"]]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise dc.ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data[...] = v

    def copy(self) -> "VolModel":
        m = VolModel(self.config, {k: dc.tensor(v.data, requires_grad=True, name=k)
                                   for k, v in self.params.items()})
        m.fused = self.fused
        return m

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ----------------------------------------------------------------

    def _head(self, reps: Tensor, batch: int) -> Tensor:
        """Map representations ``(T-1, B, width)`` to sigma ``(T, B)``."""
        W, b = self.params["head.W"], self.params["head.b"]
        first = dc.softplus(b) + SIGMA_FLOOR
        first = dc.reshape(first * np.ones((1, batch, 1)), (1, batch))
        if reps.shape[0] == 0:
            return first
        rest = dc.softplus(reps @ W + b) + SIGMA_FLOOR
        return dc.concat([first, dc.reshape(rest, rest.shape[:2])], axis=0)

    def _recurrent_reps(self, Y: np.ndarray, training: bool, rng) -> Tensor:
        cfg = self.config
        T, B = Y.shape
        x = dc.tensor(Y[:, :, None])
        scan = _scan_node if self.fused else _reference_scan
        for l in range(cfg.n_layers):
            p = self.params
            xp = x @ p[f"layer{l}.W_x"] + p[f"layer{l}.b"]
            x = scan(cfg.arch, xp, p[f"layer{l}.W_h"])
            if l < cfg.n_layers - 1:
                x = dc.dropout(x, cfg.dropout, rng, training)
        return x

    def _transformer_block_stack(self, Yb: np.ndarray, training: bool, rng) -> Tensor:
        """Transformer over batch-major windows ``(B, L)``; returns ``(B, L, d_model)``."""
        cfg = self.config
        p = self.params
        B, L = Yb.shape
        d, h = cfg.d_model, cfg.n_heads
        dk = d // h
        x = dc.tensor(Yb[:, :, None]) @ p["embed.W"] + p["embed.b"] + positional_encoding(L, d)
        mask = _causal_mask(L)
        for l in range(cfg.n_layers):
            q = (x @ p[f"block{l}.Wq"]).reshape(B, L, h, dk).transpose(0, 2, 1, 3)
            k = (x @ p[f"block{l}.Wk"]).reshape(B, L, h, dk).transpose(0, 2, 3, 1)
            v = (x @ p[f"block{l}.Wv"]).reshape(B, L, h, dk).transpose(0, 2, 1, 3)
            att = dc.softmax((q @ k) * (1.0 / math.sqrt(dk)), axis=-1, mask=mask)
            heads = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            mh = dc.dropout(heads @ p[f"block{l}.Wo"], cfg.dropout, rng, training)
            x = layer_norm(x + mh, p[f"block{l}.att.ln_g"], p[f"block{l}.att.ln_b"])
            ff = dc.relu(x @ p[f"block{l}.W1"] + p[f"block{l}.b1"]) @ p[f"block{l}.W2"] + p[f"block{l}.b2"]
            ff = dc.dropout(ff, cfg.dropout, rng, training)
            x = layer_norm(x + ff, p[f"block{l}.ff.ln_g"], p[f"block{l}.ff.ln_b"])
        return x

    def _transformer_reps(self, Y: np.ndarray, training: bool, rng,
                          window_chunk: int = 256) -> Tensor:
        """Representations for positions 1..T-1 (time-major), windowed past ``max_context``."""
        W = self.config.max_context
        T, B = Y.shape
        Yb = np.ascontiguousarray(Y[: T - 1].T)  # inputs y_1..y_{T-1}
        n = T - 1
        head = self._transformer_block_stack(Yb[:, : min(n, W)], training, rng)
        parts = [head.transpose(1, 0, 2)]
        if n > W:
            # position t > W sees only y_{t-W+1..t}; evaluate each window, keep its last row
            starts = np.arange(1, n - W + 1)
            for c0 in range(0, len(starts), window_chunk):
                s = starts[c0: c0 + window_chunk]
                idx = s[:, None] + np.arange(W)[None, :]
                win = Yb[:, idx].reshape(B * len(s), W)
                out = self._transformer_block_stack(win, training, rng)[:, W - 1, :]
                parts.append(out.reshape(B, len(s), -1).transpose(1, 0, 2))
        return dc.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def forward(self, Y: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Sigma paths ``(T, B)`` for time-major returns ``Y`` of shape ``(T, B)``."""
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if not np.all(np.isfinite(Y)):
            raise dc.ContractError("inputs must be finite")
        T, B = Y.shape
        if T == 0:
            raise dc.ContractError("empty input")
        if self.config.arch == "Transformer":
            if T == 1:
                return self._head(dc.tensor(np.zeros((0, B, self.config.width))), B)
            reps = self._transformer_reps(Y, training, rng)
        else:
            reps = self._recurrent_reps(Y[:-1], training, rng) if T > 1 else \
                dc.tensor(np.zeros((0, B, self.config.width)))
        return self._head(reps, B)

    def sigma_path(self, y: np.ndarray) -> np.ndarray:
        """ForecastPath for one series: sigma_t for t = 1..T (evaluation mode)."""
        with dc.no_grad():
            return self.forward(np.asarray(y, dtype=np.float64)[:, None]).data[:, 0].copy()

    def sigma_paths(self, series: list[np.ndarray], batch_size: int = 256) -> list[np.ndarray]:
        """Evaluation-mode sigma for several series, right-padded in batches."""
        out: list[np.ndarray] = []
        with dc.no_grad():
            for i in range(0, len(series), batch_size):
                chunk = series[i: i + batch_size]
                Y, lengths = pad_batch(chunk)
                S = self.forward(Y).data
                out.extend(S[: n, j].copy() for j, n in enumerate(lengths))
        return out

    # -- persistence ----------------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "config": asdict(self.config), "extra": extra or {},
               "params": {k: {"shape": list(v.shape), "data": v.data.ravel().tolist()}
                          for k, v in self.params.items()}}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "VolModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise dc.ContractError(f"{path}: not a checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise dc.ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        cfg = ModelConfig.from_dict(doc["config"])
        model = cls.init(cfg)
        state = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                 for k, v in doc["params"].items()}
        if set(state) != set(model.params):
            raise dc.ContractError(f"{path}: parameter names do not match config")
        model.load_state_dict(state)
        return model


def pad_batch(series: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Right-pad series with zeros into a time-major ``(T_max, B)`` array."""
    lengths = [len(s) for s in series]
    Y = np.zeros((max(lengths), len(series)))
    for j, s in enumerate(series):
        Y[: len(s), j] = s
    return Y, lengths


def _forward_one(model: VolModel, y: np.ndarray) -> np.ndarray:
    return model.sigma_path(y)


def rnn_forward(model: VolModel, y: np.ndarray) -> np.ndarray:
    assert model.config.arch == "RNN"
    return _forward_one(model, y)


def gru_forward(model: VolModel, y: np.ndarray) -> np.ndarray:
    assert model.config.arch == "GRU"
    return _forward_one(model, y)


def lstm_forward(model: VolModel, y: np.ndarray) -> np.ndarray:
    assert model.config.arch == "LSTM"
    return _forward_one(model, y)


def transformer_forward(model: VolModel, y: np.ndarray) -> np.ndarray:
    assert model.config.arch == "Transformer"
    return _forward_one(model, y)
