"""Return series containers and their on-disk format.

A universe directory holds ``manifest.json`` plus one CSV per series with
columns ``t, y, sigma_true`` (``sigma_true`` empty for real data). Simulated
and ingested universes share this layout so downstream code does not care
where the returns came from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1


def split_indices(T: int, train_frac: float = 0.6, val_frac: float = 0.8) -> tuple[int, int]:
    """``(floor(train_frac*T), floor(val_frac*T))`` without float drift for the 60/80 default."""
    if (train_frac, val_frac) == (0.6, 0.8):
        return T * 6 // 10, T * 8 // 10
    return int(math.floor(train_frac * T)), int(math.floor(val_frac * T))


@dataclass
class ReturnSeries:
    id: str
    returns: np.ndarray
    train_end: int
    val_end: int
    source_meta: dict = field(default_factory=dict)
    sigma_true: np.ndarray | None = None

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=np.float64)
        if self.sigma_true is not None:
            self.sigma_true = np.asarray(self.sigma_true, dtype=np.float64)
        if not 0 <= self.train_end <= self.val_end <= len(self.returns):
            raise ValueError(f"{self.id}: bad split ({self.train_end}, {self.val_end}) "
                             f"for length {len(self.returns)}")

    @property
    def T(self) -> int:
        return len(self.returns)

    @property
    def split(self) -> tuple[int, int]:
        return self.train_end, self.val_end

    @property
    def train(self) -> np.ndarray:
        return self.returns[: self.train_end]

    @property
    def val(self) -> np.ndarray:
        return self.returns[self.train_end: self.val_end]

    @property
    def test(self) -> np.ndarray:
        return self.returns[self.val_end:]


def _write_series_csv(path: Path, s: ReturnSeries) -> None:
    with open(path, "w") as fh:
        fh.write("t,y,sigma_true\n")
        sig = s.sigma_true
        for t, y in enumerate(s.returns, start=1):
            st = "" if sig is None else repr(float(sig[t - 1]))
            fh.write(f"{t},{float(y)!r},{st}\n")


def _read_series_csv(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    ys, sig = [], []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["t", "y"]:
            raise ValueError(f"{path}: expected header t,y,sigma_true")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ys.append(float(parts[1]))
            sig.append(float(parts[2]) if len(parts) > 2 and parts[2] else None)
    has_sigma = all(v is not None for v in sig) and sig
    return np.array(ys), (np.array(sig, dtype=np.float64) if has_sigma else None)


def save_universe(series: list[ReturnSeries], directory: str | Path, *,
                  source: str, extra: dict | None = None) -> Path:
    """Write ``series`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "series").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in series:
        fname = f"series/{s.id}.csv"
        _write_series_csv(directory / fname, s)
        entry = {"id": s.id, "file": fname, "T": s.T, "train_end": s.train_end,
                 "val_end": s.val_end, "source_meta": s.source_meta}
        params = getattr(s, "params", None)
        if params is not None:
            entry["params"] = params.to_dict()
            entry["seed"] = int(s.seed)
            entry["sigma1_sq"] = float(s.sigma1_sq)
        entries.append(entry)
    manifest = {"version": MANIFEST_VERSION, "source": source, **(extra or {}), "series": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_universe(directory: str | Path) -> list[ReturnSeries]:
    from .simgarch import GarchParams, SimulatedSeries

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out: list[ReturnSeries] = []
    for e in manifest["series"]:
        y, sig = _read_series_csv(directory / e["file"])
        if "params" in e:
            out.append(SimulatedSeries(
                id=e["id"], returns=y, train_end=e["train_end"], val_end=e["val_end"],
                source_meta=e.get("source_meta", {}), sigma_true=sig,
                params=GarchParams.from_dict(e["params"]), seed=e["seed"],
                sigma1_sq=e["sigma1_sq"]))
        else:
            out.append(ReturnSeries(id=e["id"], returns=y, train_end=e["train_end"],
                                    val_end=e["val_end"], source_meta=e.get("source_meta", {}),
                                    sigma_true=sig))
    return out


def read_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
