"""GARCH(1,1), GJR-GARCH(1,1) and EGARCH(1,1) baselines.

Parameters are fitted by Gaussian maximum likelihood with the shared Adam
engine on unconstrained coordinates:

GARCH   omega = exp(u0), s = sigmoid(u1), alpha = s*w, beta = s*(1-w), w = sigmoid(u2)
GJR     omega = exp(u0), s = sigmoid(u1), (alpha, beta, gamma/2) = s * softmax(u2, 0, u3)
EGARCH  omega = u0, alpha = u1, beta = tanh(u2), gamma = u3

so every iterate is stationary. ``s`` is the total persistence. The GJR
map keeps gamma >= 0, the usual leverage sign.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import kernels
from .series import ReturnSeries
from .simgarch import KINDS, GarchParams

log = logging.getLogger(__name__)

MIN_TRAIN_LENGTH = 100


@dataclass
class EconFit:
    params: GarchParams
    nll_in_sample: float
    converged: bool
    n_iterations: int
    mode: str = "local"
    n_series: int = 1
    n_clamped: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "nll_in_sample": self.nll_in_sample,
                "converged": self.converged, "n_iterations": self.n_iterations,
                "mode": self.mode, "n_series": self.n_series, "n_clamped": self.n_clamped,
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EconFit":
        return cls(params=GarchParams.from_dict(d["params"]), nll_in_sample=d["nll_in_sample"],
                   converged=d["converged"], n_iterations=d["n_iterations"],
                   mode=d.get("mode", "local"), n_series=d.get("n_series", 1),
                   n_clamped=d.get("n_clamped", 0), meta=d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EconFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def garch_filter_with_diagnostics(params: GarchParams, y: np.ndarray,
                                  sigma1_sq: float) -> tuple[np.ndarray, int]:
    """Like :func:`garch_filter` but also returns the number of clamped EGARCH steps."""
    if not sigma1_sq > 0:
        raise dc.ContractError(f"sigma1_sq must be positive, got {sigma1_sq}")
    s2, clamped = kernels.garch_variance(params.kind_code, *params.theta,
                                         np.asarray(y, dtype=np.float64), float(sigma1_sq))
    if clamped:
        log.warning("EGARCH log-variance clamped on %d steps", clamped)
    return np.sqrt(s2), int(clamped)


def garch_filter(params: GarchParams, y: np.ndarray, sigma1_sq: float) -> np.ndarray:
    """One-step-ahead conditional sigma for t = 1..T, starting from ``sigma1_sq``."""
    return garch_filter_with_diagnostics(params, y, sigma1_sq)[0]


def initial_variance(y_train: np.ndarray) -> float:
    """Starting variance used for fitting and forecasting: the training sample variance."""
    v = float(np.var(y_train))
    return v if v > 0 else 1e-12


def forecast_sigma(params: GarchParams, series: ReturnSeries) -> np.ndarray:
    """Filter the whole series, starting from its training-segment variance."""
    return garch_filter(params, series.returns, initial_variance(series.train))


# ---------------------------------------------------------------------------
# Parameter transforms
# ---------------------------------------------------------------------------

_ZERO = dc.tensor([0.0])


def _theta_tensor(kind: str, u: dc.Tensor) -> dc.Tensor:
    if kind == "GARCH":
        s = dc.sigmoid(u[1])
        w = dc.sigmoid(u[2])
        return dc.concat([dc.stack([dc.exp(u[0]), s * w, s * (1.0 - w)]), _ZERO])
    if kind == "GJR":
        s = dc.sigmoid(u[1])
        share = dc.softmax(dc.concat([u[2:3], _ZERO, u[3:4]]), axis=0)
        return dc.concat([dc.exp(u[0:1]), s * share[0:2], s * share[2:3] * 2.0])
    return dc.concat([u[0:2], dc.tanh(u[2:3]), u[3:4]])


def _params_from_u(kind: str, u: np.ndarray) -> GarchParams:
    with dc.no_grad():
        th = _theta_tensor(kind, dc.tensor(u)).data
    return GarchParams(omega=float(th[0]), alpha=float(th[1]), beta=float(th[2]),
                       gamma=float(th[3]), kind=kind)


def _u_from_params(p: GarchParams) -> np.ndarray:
    if p.kind == "GARCH":
        s = p.alpha + p.beta
        w = p.alpha / s
        return np.array([math.log(p.omega), _logit(s), _logit(w)])
    if p.kind == "GJR":
        s = p.alpha + p.beta + 0.5 * p.gamma
        return np.array([math.log(p.omega), _logit(s), math.log(p.alpha / p.beta),
                         math.log(0.5 * p.gamma / p.beta)])
    return np.array([p.omega, p.alpha, math.atanh(p.beta), p.gamma])


def _logit(x: float) -> float:
    return math.log(x / (1.0 - x))


def _start_grid(kind: str, var: float) -> list[GarchParams]:
    """Candidate starts, lowest persistence first so ties keep the simpler model."""
    out = []
    if kind == "EGARCH":
        lv = math.log(var)
        for b in (0.5, 0.9, 0.97):
            for a in (0.1, 0.25):
                for g in (0.0, -0.08):
                    out.append(GarchParams((1.0 - b) * lv, a, b, g, "EGARCH"))
        return out
    for s in (0.05, 0.5, 0.8, 0.9, 0.95, 0.98, 0.995, 0.999):
        for share in (0.05, 0.15, 0.3):
            omega = var * (1.0 - s)
            if kind == "GARCH":
                out.append(GarchParams(omega, s * share, s * (1.0 - share)))
            else:
                for gshare in (0.02, 0.1):
                    a = s * share
                    g2 = s * gshare
                    out.append(GarchParams(omega, a, s - a - g2, 2.0 * g2, "GJR"))
    return out


# ---------------------------------------------------------------------------
# Likelihood as a fused op
# ---------------------------------------------------------------------------

@dataclass
class _Panel:
    y: np.ndarray          # (N, T_max), right padded
    lengths: np.ndarray    # (N,)
    sigma1_sq: np.ndarray  # (N,)
    kind: str

    @property
    def n_steps(self) -> int:
        return int(self.lengths.sum())


def _make_panel(segments: Sequence[np.ndarray], kind: str) -> _Panel:
    lengths = np.array([len(s) for s in segments], dtype=np.int64)
    y = np.zeros((len(segments), int(lengths.max())))
    for i, s in enumerate(segments):
        y[i, : len(s)] = s
    s1 = np.array([initial_variance(s) for s in segments])
    return _Panel(y=y, lengths=lengths, sigma1_sq=s1, kind=kind)


def garch_nll(theta: dc.Tensor, panel: _Panel) -> dc.Tensor:
    """Pooled per-step Gaussian NLL of ``panel`` as a differentiable scalar."""
    code = {"GARCH": kernels.KIND_GARCH, "GJR": kernels.KIND_GJR,
            "EGARCH": kernels.KIND_EGARCH}[panel.kind]
    sums, grads, _ = kernels.garch_nll_grad(code, theta.data, panel.y, panel.lengths,
                                            panel.sigma1_sq)
    n = panel.n_steps
    total_grad = grads.sum(axis=0) / n

    def bw(g):
        return (g * total_grad,)

    return dc.make_node(np.asarray(sums.sum() / n), (theta,), bw, op="garch_nll")


def panel_nll(params: GarchParams, panel: _Panel) -> float:
    with dc.no_grad():
        return garch_nll(dc.tensor(params.theta), panel).item()


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class FitOptions:
    lr: float = 0.1
    max_iter: int = 20_000
    tol: float = 1e-9
    tol_window: int = 50
    plateau: int = 50
    min_lr: float = 1e-7


def _optimize(kind: str, panel: _Panel, u0: np.ndarray,
              opts: FitOptions) -> tuple[np.ndarray, float, bool, int]:
    u = dc.tensor(u0, requires_grad=True)
    state = dc.AdamState.for_params([u])
    lr = opts.lr
    best_f, best_u = math.inf, u.data.copy()
    prev = None
    small = stall = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        u.grad = None
        loss = garch_nll(_theta_tensor(kind, u), panel)
        f = loss.item()
        if not math.isfinite(f):
            # step overshot into a region the float recursion cannot handle
            u.data[:] = best_u
            lr *= 0.5
            state = dc.AdamState.for_params([u])
            small = stall = 0
            prev = None
            if lr < opts.min_lr:
                break
            continue
        dc.backward(loss)
        if f < best_f:
            if f < best_f - 1e-12:
                stall = 0
            best_f, best_u = f, u.data.copy()
        else:
            stall += 1
        if prev is not None and abs(f - prev) < opts.tol:
            small += 1
            if small >= opts.tol_window:
                converged = True
                break
        else:
            small = 0
        prev = f
        if stall >= opts.plateau:
            lr *= 0.5
            stall = 0
            if lr < opts.min_lr:
                converged = True
                break
        if not np.all(np.isfinite(u.grad)):
            u.grad = np.nan_to_num(u.grad)
        dc.adam_step([u], [u.grad], state, lr)
    return best_u, best_f, converged, it


def _fit(segments: Sequence[np.ndarray], kind: str, mode: str,
         opts: FitOptions | None = None) -> EconFit:
    if kind not in KINDS:
        raise dc.ContractError(f"unknown kind {kind!r}")
    opts = opts or FitOptions()
    panel = _make_panel(segments, kind)
    pooled_var = float(np.average(panel.sigma1_sq, weights=panel.lengths))
    starts = _start_grid(kind, pooled_var)
    nlls = [panel_nll(p, panel) for p in starts]
    start = starts[int(np.nanargmin(np.where(np.isfinite(nlls), nlls, np.inf)))]
    u, f, converged, n_iter = _optimize(kind, panel, _u_from_params(start), opts)
    params = _params_from_u(kind, u)
    converged = converged and params.is_stationary()
    if not converged:
        log.warning("%s %s fit stopped after %d iterations without converging", mode, kind, n_iter)
    return EconFit(params=params, nll_in_sample=f, converged=converged, n_iterations=n_iter,
                   mode=mode, n_series=len(segments), meta={"start": start.to_dict()})


def fit_local(y_train: np.ndarray, kind: str = "GARCH",
              opts: FitOptions | None = None) -> EconFit:
    """Maximum-likelihood fit on one training segment."""
    y_train = np.asarray(y_train, dtype=np.float64)
    if len(y_train) < MIN_TRAIN_LENGTH:
        raise dc.ContractError(f"need at least {MIN_TRAIN_LENGTH} observations, got {len(y_train)}")
    return _fit([y_train], kind, "local", opts)


def fit_local_many(series: Sequence[ReturnSeries], kind: str = "GARCH",
                   opts: FitOptions | None = None, workers: int = 1) -> list[EconFit]:
    if workers <= 1:
        return [fit_local(s.train, kind, opts) for s in series]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fit_local(s.train, kind, opts), series))


def fit_global(universe: Sequence[ReturnSeries] | Sequence[np.ndarray], kind: str = "GARCH",
               opts: FitOptions | None = None) -> EconFit:
    """One parameter set minimizing the pooled NLL over all training segments."""
    if len(universe) < 1:
        raise dc.ContractError("fit_global needs at least one series")
    segments = [np.asarray(s.train if isinstance(s, ReturnSeries) else s, dtype=np.float64)
                for s in universe]
    if any(len(s) < MIN_TRAIN_LENGTH for s in segments):
        raise dc.ContractError(f"every training segment needs {MIN_TRAIN_LENGTH}+ observations")
    return _fit(segments, kind, "global", opts)


def in_sample_nll(params: GarchParams, y_train: np.ndarray) -> float:
    """Per-step NLL of ``params`` on ``y_train`` with the fitting convention for sigma_1."""
    return panel_nll(params, _make_panel([np.asarray(y_train, dtype=np.float64)], params.kind))
