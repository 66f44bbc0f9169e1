"""Daily closing prices to demeaned percent log returns.

Input files are CSVs with a ``date,close`` header, one asset per file,
dates ascending and unique. Output is the universe layout shared with the
simulator (see :mod:`globalvol.series`).
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import ContractError
from .series import ReturnSeries, save_universe, split_indices

log = logging.getLogger(__name__)

MIN_TRAIN_OBS_DEFAULT = 1260


class IngestError(ContractError):
    """A price file that cannot be turned into a return series."""


def read_price_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dates, closes)``; rejects missing values, unsorted or duplicate dates."""
    path = Path(path)
    dates, closes = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip().lower() for f in (reader.fieldnames or [])]
        if "date" not in fields or "close" not in fields:
            raise IngestError(f"{path.name}: header must contain date and close")
        reader.fieldnames = fields
        for row_no, row in enumerate(reader, start=2):
            d, c = (row.get("date") or "").strip(), (row.get("close") or "").strip()
            if not d or not c:
                raise IngestError(f"{path.name}: missing value at row {row_no}")
            try:
                dates.append(np.datetime64(d, "D"))
                closes.append(float(c))
            except ValueError as exc:
                raise IngestError(f"{path.name}: unparseable row {row_no}: {exc}") from None
    dates_arr = np.array(dates, dtype="datetime64[D]")
    if len(dates_arr) > 1:
        step = np.diff(dates_arr).astype(np.int64)
        if np.any(step == 0):
            raise IngestError(f"{path.name}: duplicate date at row {int(np.argmin(step != 0)) + 3}")
        if np.any(step < 0):
            raise IngestError(f"{path.name}: dates not ascending at row {int(np.argmax(step < 0)) + 3}")
    return dates_arr, np.array(closes, dtype=np.float64)


def date_split_indices(return_dates: np.ndarray, val_start, test_start) -> tuple[int, int]:
    """Split points for returns dated before ``val_start`` / ``test_start``."""
    d = np.asarray(return_dates, dtype="datetime64[D]")
    v, t = np.datetime64(val_start, "D"), np.datetime64(test_start, "D")
    if t < v:
        raise ContractError("test_start precedes val_start")
    return int(np.searchsorted(d, v)), int(np.searchsorted(d, t))


def prices_to_returns(prices: Sequence[float], series_id: str = "asset", *,
                      dates: np.ndarray | None = None,
                      split: tuple[int, int] | None = None,
                      date_split: tuple[str, str] | None = None,
                      in_sample_end: int | None = None,
                      source_meta: dict | None = None) -> ReturnSeries:
    """``y_t = 100 (log(P_t / P_{t-1}) - m)`` with ``m`` the in-sample mean log return.

    The in-sample segment is the training segment unless ``in_sample_end``
    says otherwise; validation and test returns reuse the same ``m``.
    """
    p = np.asarray(prices, dtype=np.float64)
    if p.ndim != 1 or len(p) < 2:
        raise IngestError(f"{series_id}: need at least two prices")
    if not np.all(np.isfinite(p)):
        raise IngestError(f"{series_id}: missing price at row {int(np.argmin(np.isfinite(p)))}")
    if np.any(p <= 0):
        raise IngestError(f"{series_id}: non-positive price at row {int(np.argmax(p <= 0))}")
    r = np.diff(np.log(p))
    T = len(r)
    meta = dict(source_meta or {})
    if date_split is not None:
        if dates is None:
            raise ContractError("date_split needs dates")
        train_end, val_end = date_split_indices(np.asarray(dates)[1:], *date_split)
    elif split is not None:
        train_end, val_end = split
    else:
        train_end, val_end = split_indices(T)
    n_in = train_end if in_sample_end is None else in_sample_end
    if not 0 < n_in <= T:
        raise IngestError(f"{series_id}: empty in-sample segment")
    m = r[:n_in].mean()
    y = 100.0 * (r - m)
    if dates is not None:
        meta.setdefault("first_date", str(np.asarray(dates)[0]))
        meta.setdefault("last_date", str(np.asarray(dates)[-1]))
    meta["in_sample_mean_log_return"] = float(m)
    return ReturnSeries(id=series_id, returns=y, train_end=train_end, val_end=val_end,
                        source_meta=meta)


def filter_universe(series: Sequence[ReturnSeries], min_train_obs: int = MIN_TRAIN_OBS_DEFAULT,
                    dropped: list[dict] | None = None) -> list[ReturnSeries]:
    """Keep series with at least ``min_train_obs`` training observations.

    Reasons for drops are appended to ``dropped`` when given.
    """
    kept = []
    for s in series:
        if s.train_end >= min_train_obs:
            kept.append(s)
        elif dropped is not None:
            dropped.append({"id": s.id, "reason": f"{s.train_end} training observations < {min_train_obs}"})
    return kept


def ingest_directory(src: str | Path, out: str | Path | None = None, *,
                     min_train_obs: int = MIN_TRAIN_OBS_DEFAULT,
                     date_split: tuple[str, str] | None = None,
                     exchange: str | None = None, workers: int = 1) -> tuple[list[ReturnSeries], list[dict]]:
    """Ingest every ``*.csv`` under ``src``; optionally persist the universe to ``out``."""
    files = sorted(Path(src).glob("*.csv"))
    dropped: list[dict] = []

    def one(path: Path):
        try:
            dates, closes = read_price_csv(path)
            meta = {"file": path.name}
            if exchange:
                meta["exchange"] = exchange
            return prices_to_returns(closes, path.stem, dates=dates, date_split=date_split,
                                     source_meta=meta)
        except IngestError as exc:
            return {"id": path.stem, "reason": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, files))
    else:
        results = [one(f) for f in files]
    parsed = []
    for r in results:
        if isinstance(r, dict):
            dropped.append(r)
        else:
            parsed.append(r)
    kept = filter_universe(parsed, min_train_obs, dropped)
    for d in dropped:
        log.info("dropped %s: %s", d["id"], d["reason"])
    if out is not None:
        save_universe(kept, out, source="ingested",
                      extra={"min_train_obs": min_train_obs, "dropped": dropped,
                             "date_split": list(date_split) if date_split else None})
    return kept, dropped
