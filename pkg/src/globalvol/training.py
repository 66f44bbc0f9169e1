"""Local, global and fine-tuning loops over the Gaussian NLL objective."""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .neuralmodels import VolModel, pad_batch
from .series import ReturnSeries

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MODES = ("local", "global", "finetune")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss turns NaN or infinite; ``trace`` holds the epochs so far."""

    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    mode: str = "global"
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    frozen_prefix: bool = False
    clip_norm: float = 5.0
    eval_batch_size: int = 64
    workers: int = 1
    max_steps: int | None = None  # optional cap on optimizer updates across epochs

    def __post_init__(self):
        if self.mode not in MODES:
            raise dc.ContractError(f"mode must be one of {MODES}")
        # lr == 0 is accepted as a dry run that never touches the parameters
        if not self.lr >= 0:
            raise dc.ContractError("lr must be non-negative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise dc.ContractError("batch_size and patience must be >= 1, max_epochs >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise dc.ContractError("max_steps must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise dc.ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                d = tomllib.load(fh)
        else:
            d = json.loads(path.read_text())
        return cls.from_dict(d.get("train", d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    test_nll: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    initial_val_nll: float = math.nan

    @property
    def n_epochs(self) -> int:
        return len(self.train_nll)

    @property
    def best_val_nll(self) -> float:
        return self.val_nll[self.best_epoch - 1] if self.best_epoch else self.initial_val_nll

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["epoch", "train_nll", "val_nll"] + (["test_nll"] if self.test_nll else [])
            w.writerow(header)
            for e in range(self.n_epochs):
                row = [e + 1, repr(self.train_nll[e]), repr(self.val_nll[e])]
                if self.test_nll:
                    row.append(repr(self.test_nll[e]))
                w.writerow(row)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def nll_terms(sigma: Tensor, y: np.ndarray) -> Tensor:
    """Per-step ``-log N(y; 0, sigma^2)``."""
    return dc.log(sigma) + (0.5 * y * y) / dc.square(sigma) + HALF_LOG_2PI


def sequence_nll(sigma, y: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean NLL over the unmasked steps of one series."""
    sigma = dc.as_tensor(sigma)
    y = np.asarray(y, dtype=np.float64)
    if sigma.shape != y.shape:
        raise dc.ShapeError(f"sigma shape {sigma.shape} != y shape {y.shape}")
    if np.any(sigma.data <= 0):
        raise dc.ContractError("sigma must be strictly positive")
    mask = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise dc.ContractError("no unmasked steps: empty mean")
    return (nll_terms(sigma, y) * (mask / n)).sum()


def batch_nll(sigma: Tensor, Y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-series mean over unmasked steps, then mean over series; inputs ``(T, B)``."""
    counts = mask.sum(axis=0)
    if np.any(counts == 0):
        raise dc.ContractError("a series in the batch has no unmasked steps")
    weights = mask / (counts[None, :] * Y.shape[1])
    return (nll_terms(sigma, Y) * weights).sum()


def _window_mask(lengths: Sequence[int], lo: Sequence[int], hi: Sequence[int], T: int) -> np.ndarray:
    """Boolean ``(T, B)`` marking steps ``lo[j] <= t < min(hi[j], lengths[j])``."""
    t = np.arange(T)[:, None]
    return (t >= np.asarray(lo)[None, :]) & (t < np.minimum(hi, lengths)[None, :])


def evaluate_segments(model: VolModel, series: Sequence[ReturnSeries],
                      batch_size: int = 64) -> dict[str, float]:
    """Pooled per-step NLL on train, validation and test segments from one eval pass."""
    sums = {"train": 0.0, "val": 0.0, "test": 0.0}
    counts = {"train": 0, "val": 0, "test": 0}
    with dc.no_grad():
        for i in range(0, len(series), batch_size):
            chunk = series[i: i + batch_size]
            Y, lengths = pad_batch([s.returns for s in chunk])
            terms = nll_terms(model.forward(Y), Y).data
            T = Y.shape[0]
            bounds = {"train": ([0] * len(chunk), [s.train_end for s in chunk]),
                      "val": ([s.train_end for s in chunk], [s.val_end for s in chunk]),
                      "test": ([s.val_end for s in chunk], [s.T for s in chunk])}
            for k, (lo, hi) in bounds.items():
                m = _window_mask(lengths, lo, hi, T)
                sums[k] += float(terms[m].sum())
                counts[k] += int(m.sum())
    return {k: (sums[k] / counts[k] if counts[k] else math.nan) for k in sums}


def validation_nll(model: VolModel, series: Sequence[ReturnSeries], batch_size: int = 64) -> float:
    """Pooled per-step NLL over validation segments, conditioning on full history."""
    total, count = 0.0, 0
    with dc.no_grad():
        for i in range(0, len(series), batch_size):
            chunk = series[i: i + batch_size]
            Y, lengths = pad_batch([s.returns[: s.val_end] for s in chunk])
            terms = nll_terms(model.forward(Y), Y).data
            m = _window_mask(lengths, [s.train_end for s in chunk], [s.val_end for s in chunk],
                             Y.shape[0])
            total += float(terms[m].sum())
            count += int(m.sum())
    if count == 0:
        raise dc.ContractError("validation segments are empty")
    return total / count


def global_objective(model: VolModel, series: Sequence[ReturnSeries]) -> float:
    """Mean over series of the per-series training NLL (the global loss)."""
    vals = []
    with dc.no_grad():
        for s in series:
            y = s.train
            vals.append(sequence_nll(model.forward(y[:, None])[:, 0], y).item())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

def _check_series(series: Sequence[ReturnSeries]) -> None:
    if not series:
        raise dc.ContractError("need at least one series")
    for s in series:
        if s.train_end < 1 or s.val_end <= s.train_end:
            raise dc.ContractError(f"{s.id}: train and validation segments must be nonempty")


def _batch_step(model: VolModel, params: list[Tensor], state: dc.AdamState,
                segments: list[np.ndarray], cfg: TrainConfig,
                rng: np.random.Generator) -> float:
    Y, lengths = pad_batch(segments)
    mask = _window_mask(lengths, [0] * len(lengths), lengths, Y.shape[0])
    dc.zero_grad(model.parameters())
    loss = batch_nll(model.forward(Y, training=True, rng=rng), Y, mask)
    value = loss.item()
    if not math.isfinite(value):
        return value
    dc.backward(loss)
    if cfg.lr > 0:
        dc.clip_grad_norm(params, cfg.clip_norm)
        dc.adam_step(params, [p.grad for p in params], state, cfg.lr)
    return value


def _run(model: VolModel, series: Sequence[ReturnSeries], cfg: TrainConfig,
         params: list[Tensor], with_test: bool = False) -> TrainTrace:
    _check_series(series)
    rng = np.random.default_rng(cfg.seed)
    state = dc.AdamState.for_params(params)
    trace = TrainTrace()
    trace.initial_val_nll = validation_nll(model, series, cfg.eval_batch_size)
    best_val = math.inf  # epoch 1 always becomes the first best
    best_state = model.state_dict()
    since_best = 0
    steps = 0
    n = len(series)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n) if n > 1 else np.zeros(1, dtype=int)
        losses, weights = [], []
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0: b0 + cfg.batch_size]
            value = _batch_step(model, params, state, [series[i].train for i in idx], cfg, rng)
            losses.append(value)
            weights.append(len(idx))
            steps += 1
            if not math.isfinite(value) or steps == cfg.max_steps:
                break
        train_value = float(np.average(losses, weights=weights))
        if with_test:
            seg = evaluate_segments(model, series, cfg.eval_batch_size)
            val_value = seg["val"]
            trace.test_nll.append(seg["test"])
        else:
            val_value = validation_nll(model, series, cfg.eval_batch_size) \
                if math.isfinite(train_value) else math.nan
        trace.train_nll.append(train_value)
        trace.val_nll.append(val_value)
        if not (math.isfinite(train_value) and math.isfinite(val_value)):
            model.load_state_dict(best_state)
            raise TrainingDivergedError(f"loss diverged at epoch {epoch}", trace)
        if val_value < best_val:
            best_val = val_value
            best_state = model.state_dict()
            trace.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                trace.stopped_early = True
                break
        if steps == cfg.max_steps:
            break
        log.debug("epoch %d train %.6f val %.6f", epoch, train_value, val_value)
    model.load_state_dict(best_state)
    return trace


def train_local(model: VolModel, series: ReturnSeries, cfg: TrainConfig) -> TrainTrace:
    """One full-sequence gradient step per epoch on a single series."""
    return _run(model, [series], cfg, model.parameters())


def train_global(model: VolModel, universe: Sequence[ReturnSeries], cfg: TrainConfig) -> TrainTrace:
    """Mini-batches of ``cfg.batch_size`` series, reshuffled every epoch."""
    return _run(model, list(universe), cfg, model.parameters())


def finetune(model: VolModel, series: ReturnSeries, cfg: TrainConfig) -> TrainTrace:
    """Update only the output head on one series; the trace also records test NLL.

    ``cfg.frozen_prefix`` must be set: everything but the head stays fixed.
    """
    if not cfg.frozen_prefix:
        raise dc.ContractError("finetune requires frozen_prefix=True")
    head = model.head_parameters()
    frozen = [p for p in model.parameters() if all(p is not h for h in head)]
    # frozen tensors stop requiring grad so backward never enters the recurrent core
    for p in frozen:
        p.requires_grad = False
    try:
        return _run(model, [series], cfg, head, with_test=True)
    finally:
        for p in frozen:
            p.requires_grad = True
