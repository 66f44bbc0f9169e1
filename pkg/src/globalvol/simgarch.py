"""Synthetic GARCH(1,1) universes with randomized parameters.

Shocks come from NumPy's ``Generator.standard_normal`` (Ziggurat on PCG64),
so a seed fixes a series on every platform NumPy supports.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffcore import ContractError
from .series import ReturnSeries, split_indices

KINDS = ("GARCH", "GJR", "EGARCH")
_KIND_CODES = {"GARCH": kernels.KIND_GARCH, "GJR": kernels.KIND_GJR, "EGARCH": kernels.KIND_EGARCH}

DEFAULT_T = 4000
DEFAULT_BURN_IN = 500


@dataclass(frozen=True)
class GarchParams:
    omega: float
    alpha: float
    beta: float
    gamma: float = 0.0
    kind: str = "GARCH"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown kind {self.kind!r}; expected one of {KINDS}")

    @property
    def kind_code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def theta(self) -> tuple[float, float, float, float]:
        return (self.omega, self.alpha, self.beta, self.gamma)

    @property
    def persistence(self) -> float:
        if self.kind == "EGARCH":
            return abs(self.beta)
        return self.alpha + self.beta + 0.5 * self.gamma

    def is_stationary(self) -> bool:
        vals = self.theta
        if not all(math.isfinite(v) for v in vals):
            return False
        if self.kind == "EGARCH":
            return abs(self.beta) < 1.0
        return (self.omega > 0.0 and self.alpha >= 0.0 and self.beta >= 0.0
                and self.alpha + self.gamma >= 0.0 and self.persistence < 1.0)

    def check(self) -> "GarchParams":
        if not self.is_stationary():
            raise ContractError(f"non-stationary or invalid parameters: {self}")
        return self

    def unconditional_variance(self) -> float:
        """Stationary variance; for EGARCH the exp of the stationary log-variance mean."""
        self.check()
        if self.kind == "EGARCH":
            return math.exp(self.omega / (1.0 - self.beta))
        return self.omega / (1.0 - self.persistence)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "omega": self.omega, "alpha": self.alpha,
                "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "GarchParams":
        return cls(omega=float(d["omega"]), alpha=float(d["alpha"]), beta=float(d["beta"]),
                   gamma=float(d.get("gamma", 0.0)), kind=d.get("kind", "GARCH"))


@dataclass(kw_only=True)
class SimulatedSeries(ReturnSeries):
    """A :class:`ReturnSeries` that also carries its generating process.

    ``sigma1_sq`` is the exact conditional variance at the first retained
    step, so refiltering ``returns`` from it reproduces ``true_sigma`` bit
    for bit.
    """

    params: GarchParams
    seed: int
    sigma1_sq: float

    @property
    def true_sigma(self) -> np.ndarray:
        return self.sigma_true


def sample_params(rng: np.random.Generator) -> GarchParams:
    """Draw omega ~ U(0.01, 0.1), alpha ~ U(0.1, 0.3), beta ~ U(0.7, 1 - alpha)."""
    while True:
        omega = rng.uniform(0.01, 0.1)
        alpha = rng.uniform(0.1, 0.3)
        beta = rng.uniform(0.7, 1.0 - alpha)
        # the half-open support already excludes alpha + beta = 1 except by rounding
        if alpha + beta < 1.0:
            return GarchParams(omega=omega, alpha=alpha, beta=beta)


def simulate_paths(params: GarchParams, T: int, burn_in: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Return ``(y, sigma, sigma1_sq)`` after discarding ``burn_in`` steps."""
    params.check()
    if T < 10:
        raise ContractError(f"T must be >= 10, got {T}")
    if burn_in < 0:
        raise ContractError("burn_in must be non-negative")
    eps = rng.standard_normal(burn_in + T)
    s1 = params.unconditional_variance()
    om, al, be, ga = params.theta
    y, sigma = kernels.garch_simulate(params.kind_code, om, al, be, ga, s1, eps)
    s2, _ = kernels.garch_variance(params.kind_code, om, al, be, ga, y, s1)
    return np.asarray(y[burn_in:]), np.asarray(sigma[burn_in:]), float(s2[burn_in])


def simulate(params: GarchParams, T: int = DEFAULT_T, burn_in: int = DEFAULT_BURN_IN,
             rng: np.random.Generator | None = None, *, seed: int | None = None,
             series_id: str = "sim") -> SimulatedSeries:
    """Simulate one series from ``params``.

    Either ``rng`` or ``seed`` must be given; with ``seed`` a fresh
    ``default_rng(seed)`` is used and recorded on the result.
    """
    if rng is None:
        if seed is None:
            raise ContractError("simulate needs an rng or a seed")
        rng = np.random.default_rng(seed)
    y, sigma, s1 = simulate_paths(params, T, burn_in, rng)
    train_end, val_end = split_indices(T)
    return SimulatedSeries(id=series_id, returns=y, train_end=train_end, val_end=val_end,
                           source_meta={"source": "simulated", "burn_in": burn_in},
                           sigma_true=sigma, params=params,
                           seed=-1 if seed is None else int(seed), sigma1_sq=s1)


def series_seeds(n_series: int, master_seed: int) -> list[int]:
    """Independent 63-bit seeds for each series, spawned from ``master_seed``."""
    children = np.random.SeedSequence(master_seed).spawn(n_series)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def _one_series(index: int, seed: int, T: int, burn_in: int) -> SimulatedSeries:
    rng = np.random.default_rng(seed)
    params = sample_params(rng)
    s = simulate(params, T, burn_in, rng, series_id=f"sim{index:06d}")
    s.seed = seed
    s.source_meta["index"] = index
    return s


def make_universe(n_series: int, T: int = DEFAULT_T, master_seed: int = 0, *,
                  burn_in: int = DEFAULT_BURN_IN, workers: int = 1) -> list[SimulatedSeries]:
    """Simulate ``n_series`` independent series.

    Each series draws its parameters and shocks from its own generator, so
    the result does not depend on ``workers``.
    """
    if n_series < 1:
        raise ContractError("n_series must be >= 1")
    seeds = series_seeds(n_series, master_seed)
    if workers <= 1:
        return [_one_series(i, s, T, burn_in) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: _one_series(a[0], a[1], T, burn_in), enumerate(seeds)))
