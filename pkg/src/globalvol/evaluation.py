"""Forecast scores, Gaussian VaR/ES and the Model Confidence Set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc

from . import kernels
from .diffcore import ContractError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Acklam's rational approximation to the inverse normal CDF (relative error
# about 1.15e-9), followed by one Halley step against erfc, which brings it
# to double precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _acklam(p: np.ndarray) -> np.ndarray:
    """Lower-half rational approximation; expects ``0 < p <= 0.5``."""
    x = np.empty_like(p)
    lo = p < _P_LOW
    mid = ~lo
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
                ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
                 (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    return x


def norm_ppf(p):
    """Inverse standard normal CDF for ``0 < p < 1``.

    Works on the lower tail ``q = min(p, 1 - p)`` (``1 - p`` is exact for
    ``p > 0.5``) so the Halley correction never subtracts nearly equal numbers.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ContractError("norm_ppf needs 0 < p < 1")
    flat = p.reshape(-1)
    upper = flat > 0.5
    q = np.where(upper, 1.0 - flat, flat)
    x = _acklam(q)
    e = 0.5 * erfc(-x / math.sqrt(2.0)) - q
    u = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    x = np.where(upper, -x, x)
    return x.reshape(p.shape) if p.ndim else float(x[0])


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x) - HALF_LOG_2PI)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

@dataclass
class RiskForecast:
    sigma: np.ndarray | float
    var_alpha: np.ndarray | float
    es_alpha: np.ndarray | float
    alpha: float


def gaussian_risk(sigma, alpha: float) -> RiskForecast:
    """Mean-zero Gaussian VaR and ES at level ``alpha`` (left tail)."""
    if not 0.0 < alpha < 0.5:
        raise ContractError(f"alpha must be in (0, 0.5), got {alpha}")
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ContractError("sigma must be positive")
    z = norm_ppf(alpha)
    q = s * z
    es = -s * norm_pdf(z) / alpha
    if s.ndim == 0:
        return RiskForecast(float(s), float(q), float(es), alpha)
    return RiskForecast(s, q, es, alpha)


def quantile_loss(y, Q, alpha: float) -> tuple[np.ndarray, float, float]:
    """Per-step ``(alpha - I(y < Q)) (y - Q)``, its sum and its mean."""
    y = np.asarray(y, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    per = (alpha - (y < Q)) * (y - Q)
    return per, float(per.sum()), float(per.mean())


def joint_loss_terms(y, Q, ES, alpha: float) -> np.ndarray:
    """Per-step Asymmetric Laplace joint VaR/ES loss."""
    y = np.asarray(y, dtype=np.float64)
    Q = np.broadcast_to(np.asarray(Q, dtype=np.float64), y.shape)
    ES = np.broadcast_to(np.asarray(ES, dtype=np.float64), y.shape)
    bad = np.flatnonzero(ES.reshape(-1) >= 0)
    if bad.size:
        raise ContractError(f"ES must be negative; first offending timestep {int(bad[0])}")
    return -np.log((alpha - 1.0) / ES) - (y - Q) * (alpha - (y <= Q)) / (alpha * ES)


def joint_loss(y, Q, ES, alpha: float) -> float:
    return float(np.mean(joint_loss_terms(y, Q, ES, alpha)))


def nll_terms(y, sigma) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    return HALF_LOG_2PI + np.log(s) + 0.5 * (y / s) ** 2


def gaussian_nll(y, sigma) -> float:
    """Average negative Gaussian log-likelihood of ``y`` given ``sigma``."""
    return float(np.mean(nll_terms(y, sigma)))


def mse_sigma(sigma_hat, sigma_true) -> float:
    a = np.asarray(sigma_hat, dtype=np.float64)
    b = np.asarray(sigma_true, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# Model Confidence Set
# ---------------------------------------------------------------------------

@dataclass
class LossMatrix:
    losses: np.ndarray
    names: list[str]

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.ndim != 2 or self.losses.shape[1] != len(self.names):
            raise ContractError("losses must be (T, K) with one name per column")
        if len(set(self.names)) != len(self.names):
            raise ContractError("model names must be unique")
        if not np.all(np.isfinite(self.losses)):
            raise ContractError("loss matrix has non-finite entries")


@dataclass
class MCSResult:
    included: list[str]
    p_values: dict[str, float]
    confidence_level: float
    elimination_order: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"included": self.included, "p_values": self.p_values,
                "confidence_level": self.confidence_level,
                "elimination_order": self.elimination_order}


def stationary_bootstrap_indices(T: int, n_bootstrap: int, block_length: float,
                                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Random draws driving the stationary bootstrap: ``(u, starts, p)``.

    Replicate ``b`` restarts at ``starts[b, t]`` whenever ``u[b, t] < p`` with
    ``p = 1/block_length``, giving geometric blocks of mean length ``block_length``.
    """
    p = 1.0 / block_length
    u = rng.random((n_bootstrap, T))
    starts = rng.integers(0, T, size=(n_bootstrap, T), dtype=np.int64)
    return u, starts, p


def _range_stats(mean: np.ndarray, boot: np.ndarray, active: list[int]):
    """Range statistic, its bootstrap distribution and per-model elimination scores."""
    a = np.asarray(active)
    d = mean[a][:, None] - mean[a][None, :]
    db = boot[:, a][:, :, None] - boot[:, a][:, None, :]
    dev = db - d[None]
    var = np.mean(dev * dev, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(var > 0, d / np.sqrt(var), np.where(d == 0, 0.0, np.sign(d) * np.inf))
        tb = np.where(var[None] > 0, np.abs(dev) / np.sqrt(var)[None], 0.0)
    stat = float(np.max(np.abs(t)))
    boot_stat = tb.reshape(tb.shape[0], -1).max(axis=1)
    return stat, boot_stat, t.max(axis=1)


def mcs(losses: LossMatrix, confidence_level: float = 0.75, n_bootstrap: int = 1000,
        block_length: float = 10.0, seed: int = 0) -> MCSResult:
    """Model Confidence Set with the range statistic and a stationary bootstrap.

    Models are handled in name order so the result does not depend on column
    order. Elimination continues until one model is left so every model gets
    a p-value; the SSM holds those with p-value above ``1 - confidence_level``.
    """
    if not 0.0 < confidence_level < 1.0:
        raise ContractError("confidence_level must be in (0, 1)")
    order = sorted(range(len(losses.names)), key=lambda i: losses.names[i])
    names = [losses.names[i] for i in order]
    L = losses.losses[:, order]
    T, K = L.shape
    if K < 2:
        raise ContractError("need at least two models")
    if T < 50:
        raise ContractError(f"need at least 50 observations, got {T}")
    rng = np.random.default_rng(seed)
    u, starts, p = stationary_bootstrap_indices(T, n_bootstrap, block_length, rng)
    boot = kernels.stationary_bootstrap_means(L, u, starts, p)
    mean = L.mean(axis=0)

    active = list(range(K))
    p_values: dict[str, float] = {}
    eliminated: list[str] = []
    running = 0.0
    while len(active) > 1:
        stat, boot_stat, scores = _range_stats(mean, boot, active)
        p_round = float(np.mean(boot_stat >= stat))
        running = max(running, p_round)
        # argmax picks the first maximum, i.e. the earliest name on ties
        worst = active[int(np.argmax(scores))]
        p_values[names[worst]] = running
        eliminated.append(names[worst])
        active.remove(worst)
    p_values[names[active[0]]] = 1.0
    size = 1.0 - confidence_level
    included = [n for n in names if p_values[n] > size]
    return MCSResult(included=included, p_values={n: p_values[n] for n in names},
                     confidence_level=confidence_level, elimination_order=eliminated)


def loss_columns(y: np.ndarray, sigmas: dict[str, np.ndarray], metric: str,
                 alpha: float = 0.01, sigma_true: np.ndarray | None = None) -> LossMatrix:
    """Per-step losses of each model's sigma forecast for one metric.

    ``metric`` is one of ``nll``, ``mse`` (needs ``sigma_true``), ``qloss`` or ``jointloss``.
    """
    cols, names = [], []
    for name, s in sigmas.items():
        if metric == "nll":
            col = nll_terms(y, s)
        elif metric == "mse":
            if sigma_true is None:
                raise ContractError("mse needs sigma_true")
            col = (np.asarray(s) - sigma_true) ** 2
        elif metric == "qloss":
            col = quantile_loss(y, gaussian_risk(s, alpha).var_alpha, alpha)[0]
        elif metric == "jointloss":
            r = gaussian_risk(s, alpha)
            col = joint_loss_terms(y, r.var_alpha, r.es_alpha, alpha)
        else:
            raise ContractError(f"unknown metric {metric!r}")
        cols.append(col)
        names.append(name)
    return LossMatrix(np.column_stack(cols), names)


def score_forecast(y: np.ndarray, sigma: np.ndarray, sigma_true: np.ndarray | None = None,
                   alphas: Sequence[float] = (0.01, 0.025)) -> dict[str, float]:
    """All scalar scores for one test segment."""
    out = {"nll": gaussian_nll(y, sigma)}
    if sigma_true is not None:
        out["mse"] = mse_sigma(sigma, sigma_true)
    for a in alphas:
        r = gaussian_risk(sigma, a)
        _, qsum, qmean = quantile_loss(y, r.var_alpha, a)
        tag = f"{a * 100:g}"
        out[f"qloss_sum_{tag}"] = qsum
        out[f"qloss_mean_{tag}"] = qmean
        out[f"jointloss_{tag}"] = joint_loss(y, r.var_alpha, r.es_alpha, a)
    return out
