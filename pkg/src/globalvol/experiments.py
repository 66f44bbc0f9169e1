"""Scaling experiments: nested training ladders, baselines, reports and MCS tables.

Every number in a report is recomputed from per-run artifacts on disk, so
``build_report`` can regenerate the tables without retraining.

Output layout::

    <out>/plan.json            resolved plan
    <out>/sets.json            training ladder, supervised and zero-shot ids
    <out>/runs/<run>/          status.json, scores.csv, forecasts.csv
                               (+ checkpoint.json, trace.csv or fits.json)
    <out>/report.csv           long form: model,family,train_size,eval_mode,metric,value,n_series,status
    <out>/report.json          summary and plot data (train_size vs metric)
    <out>/mcs.csv              metric,model,series,value,in_ssm,p_value
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import econmodels as em
from . import evaluation as ev
from .diffcore import ContractError
from .neuralmodels import ModelConfig, VolModel
from .series import ReturnSeries, load_universe
from .simgarch import KINDS, make_universe
from .training import TrainConfig, TrainingDivergedError, train_global, train_local

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

METRICS = ("nll", "mse", "qloss", "jointloss")
LOCAL_NN = "LSTM"


def load_config_file(path: str | Path) -> dict:
    """JSON or TOML (by suffix) into a dict."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


@dataclass
class ModelSpec:
    name: str
    config: ModelConfig
    mandatory: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        name = d.pop("name", None) or d.get("arch", "LSTM").lower()
        mandatory = bool(d.pop("mandatory", True))
        unknown = set(d) - set(ModelConfig.__dataclass_fields__)
        if unknown:
            raise ContractError(f"model {name}: unknown keys {sorted(unknown)}")
        return cls(name=name, config=ModelConfig(**d), mandatory=mandatory)

    def to_dict(self) -> dict:
        return {"name": self.name, "mandatory": self.mandatory, **asdict(self.config)}


@dataclass
class ExperimentPlan:
    """Everything needed to rerun a scaling study.

    ``universe`` is ``{"kind": "simulated", "n_series", "T", "seed"}`` or
    ``{"kind": "ingested", "path"}`` (any saved universe directory).
    """
    universe: dict
    models: list[ModelSpec] = field(default_factory=lambda: [ModelSpec("lstm", ModelConfig())])
    ladder: list[int] = field(default_factory=lambda: [10, 100, 1000])
    n_zero_shot: int = 100
    n_supervised: int | None = None
    metrics: list[str] = field(default_factory=lambda: list(METRICS))
    alphas: list[float] = field(default_factory=lambda: [0.01, 0.025])
    baselines: list[str] = field(default_factory=lambda: ["GARCH", "GJR", "EGARCH"])
    global_garch: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: dict = field(default_factory=dict)
    mcs_metrics: list[str] = field(default_factory=lambda: ["nll"])
    confidence_level: float = 0.75
    n_bootstrap: int = 1000
    block_length: float = 10.0
    output_dir: str = "experiment"
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.ladder or any(n < 1 for n in self.ladder):
            raise ContractError("ladder must hold positive sizes")
        if list(self.ladder) != sorted(set(self.ladder)):
            raise ContractError("ladder must be strictly increasing")
        if self.n_supervised is None:
            self.n_supervised = self.ladder[0]
        if not 0 <= self.n_supervised <= self.ladder[0]:
            raise ContractError("supervised ids must fit inside the smallest training set")
        if self.n_zero_shot < 0:
            raise ContractError("n_zero_shot must be >= 0")
        for m in list(self.metrics) + list(self.mcs_metrics):
            if m not in METRICS:
                raise ContractError(f"unknown metric {m!r}")
        for b in self.baselines:
            if b not in KINDS and b != LOCAL_NN:
                raise ContractError(f"unknown baseline {b!r}")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ContractError("model names must be unique")
        kind = self.universe.get("kind")
        if kind not in ("simulated", "ingested"):
            raise ContractError("universe.kind must be 'simulated' or 'ingested'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown plan keys: {sorted(unknown)}")
        if "models" in d:
            d["models"] = [m if isinstance(m, ModelSpec) else ModelSpec.from_dict(m) for m in d["models"]]
        if "train" in d and isinstance(d["train"], dict):
            d["train"] = TrainConfig.from_dict({"mode": "global", **d["train"]})
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_dict(load_config_file(path))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["models"] = [m.to_dict() for m in self.models]
        d["train"] = self.train.to_dict()
        return d


@dataclass
class EvalSets:
    ladder: dict[int, list[str]]
    supervised: list[str]
    zero_shot: list[str]

    def modes(self) -> dict[str, list[str]]:
        return {"supervised": self.supervised, "zero_shot": self.zero_shot}

    def to_dict(self) -> dict:
        return {"ladder": {str(k): v for k, v in self.ladder.items()},
                "supervised": self.supervised, "zero_shot": self.zero_shot}


def load_plan_universe(plan: ExperimentPlan) -> list[ReturnSeries]:
    u = plan.universe
    if "path" in u:
        return load_universe(u["path"])
    if u["kind"] != "simulated":
        raise ContractError("an ingested universe needs a path")
    n = u.get("n_series", plan.ladder[-1] + plan.n_zero_shot)
    return make_universe(n, u.get("T", 4000), u.get("seed", plan.master_seed),
                         burn_in=u.get("burn_in", 500), workers=plan.workers)


def assign_sets(plan: ExperimentPlan, series: Sequence[ReturnSeries]) -> EvalSets:
    """Seeded ordering of the universe: training ladders are prefixes, zero-shot the tail."""
    ids = sorted(s.id for s in series)
    need = plan.ladder[-1] + plan.n_zero_shot
    if len(ids) < need:
        raise ContractError(f"universe has {len(ids)} series, plan needs {need}")
    perm = np.random.default_rng(plan.master_seed).permutation(len(ids))
    ordered = [ids[i] for i in perm]
    ladder = {n: ordered[:n] for n in plan.ladder}
    zero_shot = ordered[len(ordered) - plan.n_zero_shot:] if plan.n_zero_shot else []
    sets = EvalSets(ladder=ladder, supervised=ordered[: plan.n_supervised], zero_shot=zero_shot)
    check_sets(sets)
    return sets


def check_sets(sets: EvalSets) -> None:
    sizes = sorted(sets.ladder)
    for a, b in zip(sizes, sizes[1:]):
        if not set(sets.ladder[a]) <= set(sets.ladder[b]):
            raise ContractError(f"ladder not nested: size {a} is not inside size {b}")
    if sizes and not set(sets.supervised) <= set(sets.ladder[sizes[0]]):
        raise ContractError("supervised ids must lie in the smallest training set")
    trained = set().union(*sets.ladder.values()) if sets.ladder else set()
    if trained & set(sets.zero_shot):
        raise ContractError("zero-shot ids overlap a training set")


@contextmanager
def output_lock(directory: str | Path):
    """Exclusive lock file so two jobs never write one output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Per-run artifacts
# ---------------------------------------------------------------------------

def _score_columns(metrics: Sequence[str], alphas: Sequence[float], simulated: bool) -> list[str]:
    cols = []
    for m in metrics:
        if m == "nll":
            cols.append("nll")
        elif m == "mse":
            if simulated:
                cols.append("mse")
        else:
            for a in alphas:
                tag = f"{a * 100:g}"
                cols.append(f"qloss_mean_{tag}" if m == "qloss" else f"jointloss_{tag}")
    return cols


def write_run(run_dir: Path, forecasts: dict[str, np.ndarray], series: dict[str, ReturnSeries],
              eval_sets: dict[str, list[str]], metrics: Sequence[str], alphas: Sequence[float],
              status: dict) -> None:
    """Persist test-segment forecasts and per-series scores for one run.

    ``eval_sets`` maps an evaluation-mode label to the series scored under it.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    simulated = all(series[s].sigma_true is not None for s in forecasts)
    cols = _score_columns(metrics, alphas, simulated)
    with open(run_dir / "forecasts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "t", "sigma"])
        for sid in sorted(forecasts):
            s0 = series[sid].val_end
            for k, v in enumerate(forecasts[sid]):
                w.writerow([sid, s0 + k, repr(float(v))])
    with open(run_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "eval_mode"] + cols)
        for mode, ids in eval_sets.items():
            for sid in ids:
                if sid not in forecasts:
                    continue
                s = series[sid]
                st = s.sigma_true[s.val_end:] if s.sigma_true is not None else None
                sc = ev.score_forecast(s.test, forecasts[sid], st, alphas)
                w.writerow([sid, mode] + [repr(float(sc[c])) for c in cols])
    (run_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True))


def read_forecasts(run_dir: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, list[float]] = {}
    with open(Path(run_dir) / "forecasts.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["series"], []).append(float(row["sigma"]))
    return {k: np.array(v) for k, v in out.items()}


def _eval_ids(sets: EvalSets) -> list[str]:
    return sorted(set(sets.supervised) | set(sets.zero_shot))


def _global_nn_job(plan: ExperimentPlan, spec: ModelSpec, size: int, sets: EvalSets,
                   by_id: dict[str, ReturnSeries], out: Path) -> dict:
    run_dir = out / "runs" / f"{spec.name}-n{size}"
    run_dir.mkdir(parents=True, exist_ok=True)
    status = {"run": run_dir.name, "model": spec.name, "family": "global", "train_size": size,
              "mandatory": spec.mandatory}
    try:
        model = VolModel.init(spec.config, seed=plan.master_seed)
        trace = train_global(model, [by_id[i] for i in sets.ladder[size]], plan.train)
    except (TrainingDivergedError, ContractError, FloatingPointError) as exc:
        status.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        if isinstance(exc, TrainingDivergedError):
            exc.trace.to_csv(run_dir / "trace.csv")
        (run_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True))
        log.error("run %s failed: %s", run_dir.name, exc)
        return status
    trace.to_csv(run_dir / "trace.csv")
    model.save(run_dir / "checkpoint.json", extra={"train_size": size, "train_ids": sets.ladder[size],
                                                   "train": plan.train.to_dict()})
    ids = _eval_ids(sets)
    paths = model.sigma_paths([by_id[i].returns for i in ids])
    forecasts = {i: p[by_id[i].val_end:] for i, p in zip(ids, paths)}
    status.update(status="ok", epochs=trace.n_epochs, best_epoch=trace.best_epoch,
                  best_val_nll=trace.best_val_nll)
    write_run(run_dir, forecasts, by_id, sets.modes(), plan.metrics, plan.alphas, status)
    return status


def _global_garch_job(plan: ExperimentPlan, size: int, sets: EvalSets,
                      by_id: dict[str, ReturnSeries], out: Path) -> dict:
    run_dir = out / "runs" / f"global-garch-n{size}"
    run_dir.mkdir(parents=True, exist_ok=True)
    status = {"run": run_dir.name, "model": "global-garch", "family": "global", "train_size": size,
              "mandatory": False}
    try:
        fit = em.fit_global([by_id[i] for i in sets.ladder[size]], "GARCH", em.FitOptions(**plan.fit))
    except ContractError as exc:
        status.update(status="failed", error=str(exc))
        (run_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True))
        return status
    fit.save(run_dir / "fits.json")
    forecasts = {i: em.forecast_sigma(fit.params, by_id[i])[by_id[i].val_end:] for i in _eval_ids(sets)}
    status.update(status="ok", params=fit.params.to_dict(), converged=fit.converged)
    write_run(run_dir, forecasts, by_id, sets.modes(), plan.metrics, plan.alphas, status)
    return status


def _local_job(plan: ExperimentPlan, kind: str, sets: EvalSets,
               by_id: dict[str, ReturnSeries], out: Path) -> dict:
    """Local fits on every evaluation series; failures excluded and counted."""
    name = f"local-{kind.lower()}"
    run_dir = out / "runs" / name
    run_dir.mkdir(parents=True, exist_ok=True)
    forecasts, fits, failed = {}, {}, {}
    for sid in _eval_ids(sets):
        s = by_id[sid]
        try:
            if kind == LOCAL_NN:
                spec = next((m for m in plan.models if m.config.arch == LOCAL_NN), None)
                model = VolModel.init(spec.config if spec else ModelConfig(), seed=plan.master_seed)
                trace = train_local(model, s, replace(plan.train, mode="local"))
                fits[sid] = {"epochs": trace.n_epochs, "best_epoch": trace.best_epoch}
                forecasts[sid] = model.sigma_path(s.returns)[s.val_end:]
            else:
                fit = em.fit_local(s.train, kind, em.FitOptions(**plan.fit))
                fits[sid] = fit.to_dict()
                forecasts[sid] = em.forecast_sigma(fit.params, s)[s.val_end:]
        except (ContractError, TrainingDivergedError) as exc:
            failed[sid] = f"{type(exc).__name__}: {exc}"
    (run_dir / "fits.json").write_text(json.dumps(fits, indent=1, sort_keys=True))
    status = {"run": name, "model": name, "family": "local", "train_size": 1, "mandatory": False,
              "status": "ok" if forecasts else "failed", "n_failed": len(failed), "failed": failed}
    write_run(run_dir, forecasts, by_id, sets.modes(), plan.metrics, plan.alphas, status)
    return status


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ScalingReport:
    rows: list[dict]
    failed_runs: list[dict]
    mcs: dict = field(default_factory=dict)

    def value(self, model: str, train_size: int, eval_mode: str, metric: str) -> float:
        for r in self.rows:
            if (r["model"], r["train_size"], r["eval_mode"], r["metric"]) == (model, train_size, eval_mode, metric):
                return r["value"]
        raise KeyError((model, train_size, eval_mode, metric))

    @property
    def mandatory_failed(self) -> bool:
        return any(r.get("mandatory") for r in self.failed_runs)

    def plot_data(self) -> dict:
        """``{model: {eval_mode: {metric: [[train_size, value], ...]}}}``."""
        out: dict = {}
        for r in self.rows:
            if r["status"] != "ok":
                continue
            out.setdefault(r["model"], {}).setdefault(r["eval_mode"], {}) \
               .setdefault(r["metric"], []).append([r["train_size"], r["value"]])
        return out


def build_report(out: str | Path) -> ScalingReport:
    """Aggregate per-series scores of every run under ``out/runs``; pure function of the files."""
    out = Path(out)
    rows, failed = [], []
    for run_dir in sorted((out / "runs").iterdir()):
        status_path = run_dir / "status.json"
        if not status_path.exists():
            continue
        st = json.loads(status_path.read_text())
        if st.get("status") != "ok":
            failed.append({k: st.get(k) for k in ("run", "model", "train_size", "mandatory", "error")})
            rows.append({"model": st["model"], "family": st["family"], "train_size": st["train_size"],
                         "eval_mode": "", "metric": "", "value": math.nan, "n_series": 0,
                         "status": "missing"})
            continue
        with open(run_dir / "scores.csv", newline="") as fh:
            reader = csv.DictReader(fh)
            cols = [c for c in reader.fieldnames if c not in ("series", "eval_mode")]
            table: dict[str, list[list[float]]] = {}
            for row in reader:
                table.setdefault(row["eval_mode"], []).append([float(row[c]) for c in cols])
        for mode in sorted(table):
            arr = np.array(table[mode])
            for j, c in enumerate(cols):
                rows.append({"model": st["model"], "family": st["family"],
                             "train_size": st["train_size"], "eval_mode": mode, "metric": c,
                             "value": float(arr[:, j].mean()), "n_series": len(arr),
                             "status": "ok"})
    rows.sort(key=lambda r: (r["family"], r["model"], r["train_size"], r["eval_mode"], r["metric"]))
    return ScalingReport(rows=rows, failed_runs=failed)


def write_report(report: ScalingReport, out: str | Path) -> None:
    out = Path(out)
    fields = ["model", "family", "train_size", "eval_mode", "metric", "value", "n_series", "status"]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in report.rows:
            w.writerow({**r, "value": repr(r["value"])})
    summary = {"rows": report.rows, "failed_runs": report.failed_runs,
               "plot_data": report.plot_data(), "mcs": report.mcs}
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


@dataclass
class MCSReport:
    rows: list[dict]
    counts: dict[str, int]
    mean_p: dict[str, float]
    n_series: int
    flagged: dict[str, str]

    def to_dict(self) -> dict:
        return {"counts": self.counts, "mean_p": self.mean_p, "n_series": self.n_series,
                "flagged": self.flagged}


def run_mcs_report(per_series_losses: dict[str, ev.LossMatrix | Exception], confidence_level: float = 0.75,
                   *, n_bootstrap: int = 1000, block_length: float = 10.0, seed: int = 0,
                   metric: str = "") -> MCSReport:
    """MCS on every series; counts SSM inclusions and averages p-values per model.

    Series whose losses are non-finite, too short or hold fewer than two models
    are flagged and left out of the counts; an exception in place of a loss
    matrix flags the series with its message.
    """
    rows, flagged = [], {}
    counts: dict[str, int] = {}
    p_sum: dict[str, float] = {}
    n_ok = 0
    for k, sid in enumerate(sorted(per_series_losses)):
        L = per_series_losses[sid]
        if isinstance(L, Exception):
            flagged[sid] = str(L)
            continue
        try:
            res = ev.mcs(L, confidence_level, n_bootstrap, block_length, seed=seed + k)
        except ContractError as exc:
            flagged[sid] = str(exc)
            continue
        n_ok += 1
        means = L.losses.mean(axis=0)
        for j, name in enumerate(L.names):
            inside = name in res.included
            counts[name] = counts.get(name, 0) + int(inside)
            p_sum[name] = p_sum.get(name, 0.0) + res.p_values[name]
            rows.append({"metric": metric, "model": name, "series": sid, "value": float(means[j]),
                         "in_ssm": inside, "p_value": res.p_values[name]})
    mean_p = {m: p_sum[m] / n_ok for m in sorted(p_sum)}
    return MCSReport(rows=rows, counts=dict(sorted(counts.items())), mean_p=mean_p,
                     n_series=n_ok, flagged=flagged)


def write_mcs_rows(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "model", "series", "value", "in_ssm", "p_value"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(r["value"]), "p_value": repr(r["p_value"])})


def mcs_from_runs(out: str | Path, series: dict[str, ReturnSeries], ids: Sequence[str],
                  metric: str, plan: ExperimentPlan) -> MCSReport:
    """MCS over every successful run's test forecasts on ``ids``."""
    runs = {}
    for run_dir in sorted((Path(out) / "runs").iterdir()):
        sp = run_dir / "status.json"
        if sp.exists() and json.loads(sp.read_text()).get("status") == "ok":
            runs[run_dir.name] = read_forecasts(run_dir)
    losses = {}
    alpha = plan.alphas[0]
    for sid in ids:
        sig = {name: f[sid] for name, f in runs.items() if sid in f}
        s = series[sid]
        st = s.sigma_true[s.val_end:] if s.sigma_true is not None else None
        try:
            losses[sid] = ev.loss_columns(s.test, sig, metric, alpha, st)
        except (ContractError, ValueError) as exc:
            losses[sid] = exc
    return run_mcs_report(losses, plan.confidence_level, n_bootstrap=plan.n_bootstrap,
                          block_length=plan.block_length, seed=plan.master_seed, metric=metric)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def _prepare(plan: ExperimentPlan, series: Sequence[ReturnSeries] | None):
    series = list(series) if series is not None else load_plan_universe(plan)
    sets = assign_sets(plan, series)
    out = Path(plan.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True))
    (out / "sets.json").write_text(json.dumps(sets.to_dict(), indent=1))
    return {s.id: s for s in series}, sets, out


def _run_jobs(jobs: list, workers: int) -> list[dict]:
    def call(job):
        fn, args = job
        try:
            return fn(*args)
        except Exception as exc:  # noqa: BLE001 - a crashed job becomes a missing cell
            log.error("job crashed: %s", traceback.format_exc())
            return {"status": "crashed", "error": f"{type(exc).__name__}: {exc}"}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(call, jobs))
    return [call(j) for j in jobs]


def run_baselines(plan: ExperimentPlan, series: Sequence[ReturnSeries] | None = None) -> ScalingReport:
    """Local baselines on the evaluation series plus global GARCH along the ladder."""
    by_id, sets, out = _prepare(plan, series)
    with output_lock(out):
        jobs = [(_local_job, (plan, k, sets, by_id, out)) for k in plan.baselines]
        if plan.global_garch:
            jobs += [(_global_garch_job, (plan, n, sets, by_id, out)) for n in plan.ladder]
        _run_jobs(jobs, plan.workers)
        report = build_report(out)
        write_report(report, out)
    return report


def run_scaling(plan: ExperimentPlan, series: Sequence[ReturnSeries] | None = None,
                with_baselines: bool = True) -> ScalingReport:
    """Train every (model, ladder size) pair, evaluate, add baselines, emit reports."""
    by_id, sets, out = _prepare(plan, series)
    with output_lock(out):
        jobs = [(_global_nn_job, (plan, spec, n, sets, by_id, out))
                for spec in plan.models for n in plan.ladder]
        if with_baselines:
            jobs += [(_local_job, (plan, k, sets, by_id, out)) for k in plan.baselines]
            if plan.global_garch:
                jobs += [(_global_garch_job, (plan, n, sets, by_id, out)) for n in plan.ladder]
        results = _run_jobs(jobs, plan.workers)
        report = build_report(out)
        crashed = [r for r in results if r.get("status") == "crashed"]
        report.failed_runs.extend({"run": None, "mandatory": True, "error": r["error"]} for r in crashed)
        mcs_rows = []
        for metric in plan.mcs_metrics:
            if metric == "mse" and not all(by_id[i].sigma_true is not None for i in sets.zero_shot):
                continue
            ids = sets.zero_shot or sets.supervised
            rep = mcs_from_runs(out, by_id, ids, metric, plan)
            report.mcs[metric] = rep.to_dict()
            mcs_rows.extend(rep.rows)
        write_mcs_rows(mcs_rows, out / "mcs.csv")
        write_report(report, out)
    return report
