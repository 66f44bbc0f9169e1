"""``globalvol`` command line.

Every verb accepts ``--config FILE`` (JSON or TOML). Keys are read from the
table named after the verb (``[train-global]``) or from the top level, use
the flag names with underscores, and win over command-line values; a warning
is logged for each flag they override.

Exit status: 0 on success, 1 when a mandatory stage fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import econmodels as em
from . import evaluation as ev
from . import experiments as ex
from .dataingest import IngestError, ingest_directory
from .diffcore import ContractError
from .neuralmodels import ARCHS, ModelConfig, VolModel
from .series import load_universe, save_universe
from .simgarch import KINDS, make_universe
from .training import TrainConfig, TrainingDivergedError, finetune, train_global

log = logging.getLogger("globalvol")


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    p.add_argument("--arch", choices=ARCHS, default=d.arch)
    p.add_argument("--n-layers", type=int, default=d.n_layers)
    p.add_argument("--d-hidden", type=int, default=d.d_hidden)
    p.add_argument("--n-heads", type=int, default=d.n_heads)
    p.add_argument("--d-model", type=int, default=d.d_model)
    p.add_argument("--d-ff", type=int, default=d.d_ff)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--max-context", type=int, default=d.max_context)


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)
    p.add_argument("--seed", type=int, default=d.seed)


def _model_config(a) -> ModelConfig:
    return ModelConfig(**{k: getattr(a, k) for k in ModelConfig.__dataclass_fields__})


def _train_config(a, mode: str, **extra) -> TrainConfig:
    keys = ("lr", "batch_size", "patience", "max_epochs", "max_steps", "clip_norm", "seed")
    return TrainConfig(mode=mode, **{k: getattr(a, k) for k in keys}, **extra)


def _pick_series(universe, ids_arg: str | None, n_first: int | None):
    if ids_arg:
        wanted = [i for i in ids_arg.split(",") if i]
        by_id = {s.id: s for s in universe}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ContractError(f"unknown series ids: {missing[:5]}")
        return [by_id[i] for i in wanted]
    return universe[:n_first] if n_first else universe


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="globalvol", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)
    parser.verb_parsers = {}

    def verb(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        parser.verb_parsers[name] = p  # p.needed: required, but may come from --config
        p.add_argument("--config", help="JSON/TOML file; its values win over flags")
        return p

    p = verb("simulate", "simulate a GARCH(1,1) universe")
    p.add_argument("--n-series", type=int, default=100)
    p.add_argument("--T", type=int, default=4000)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.needed = ["out"]

    p = verb("ingest", "turn a directory of date,close CSVs into a universe")
    p.add_argument("--src")
    p.add_argument("--out")
    p.add_argument("--min-train-obs", type=int, default=1260)
    p.add_argument("--val-start", help="first validation date (YYYY-MM-DD)")
    p.add_argument("--test-start", help="first test date (YYYY-MM-DD)")
    p.add_argument("--exchange")
    p.add_argument("--workers", type=int, default=1)
    p.needed = ["src", "out"]

    p = verb("fit-local", "maximum-likelihood GARCH-family fits (per series, or pooled with --pooled)")
    p.add_argument("--universe")
    p.add_argument("--kind", choices=KINDS, default="GARCH")
    p.add_argument("--ids", help="comma-separated series ids")
    p.add_argument("--n-series", type=int)
    p.add_argument("--pooled", action="store_true", help="one global fit over all selected series")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output JSON file")
    p.needed = ["universe", "out"]

    p = verb("train-global", "train one neural model on a pool of series")
    p.add_argument("--universe")
    p.add_argument("--ids")
    p.add_argument("--n-series", type=int)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--out", help="run directory")
    p.needed = ["universe", "out"]

    p = verb("finetune", "update only the output head of a checkpoint on one series")
    p.add_argument("--checkpoint")
    p.add_argument("--universe")
    p.add_argument("--series")
    _train_flags(p)
    p.add_argument("--out", help="run directory")
    p.needed = ["checkpoint", "universe", "series", "out"]

    p = verb("evaluate", "test-segment forecasts and scores for a checkpoint or fit file")
    p.add_argument("--universe")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--fits", help="JSON written by fit-local")
    p.add_argument("--ids")
    p.add_argument("--n-series", type=int)
    p.add_argument("--metrics", default="nll,mse,qloss,jointloss")
    p.add_argument("--alphas", default="0.01,0.025")
    p.add_argument("--out", help="run directory")
    p.needed = ["universe", "out"]

    p = verb("mcs", "model confidence set per series from evaluated runs")
    p.add_argument("--universe")
    p.add_argument("--run", action="append", required=True, metavar="NAME=DIR",
                   help="run directory holding forecasts.csv; repeat per model")
    p.add_argument("--metric", choices=ex.METRICS, default="nll")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--confidence-level", type=float, default=0.75)
    p.add_argument("--n-bootstrap", type=int, default=1000)
    p.add_argument("--block-length", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report CSV; a JSON summary is written next to it")
    p.needed = ["universe", "out"]

    p = verb("scaling", "run a full ExperimentPlan")
    p.add_argument("--plan")
    p.add_argument("--out", help="override plan output_dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-baselines", action="store_true")
    p.needed = ["plan"]
    return parser


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Merge ``--config`` values into ``args``; the file wins and overrides are logged."""
    if getattr(args, "config", None):
        _merge_config(args, parser)
    missing = [d for d in parser.verb_parsers[args.verb].needed if getattr(args, d) is None]
    if missing:
        parser.verb_parsers[args.verb].error(
            "missing " + ", ".join("--" + d.replace("_", "-") for d in missing))
    return args


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    doc = ex.load_config_file(args.config)
    section = doc.get(args.verb, doc)
    if not isinstance(section, dict):
        raise ContractError(f"config section {args.verb!r} must be a table")
    defaults = {act.dest: act.default for act in parser.verb_parsers[args.verb]._actions}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest not in defaults or dest in ("config", "help"):
            log.warning("config key %r ignored: not an option of %s", key, args.verb)
            continue
        current = getattr(args, dest)
        if current != defaults[dest] and current != value:
            log.warning("config file overrides --%s=%r with %r", dest.replace("_", "-"), current, value)
        setattr(args, dest, value)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_simulate(a) -> int:
    U = make_universe(a.n_series, a.T, a.seed, burn_in=a.burn_in, workers=a.workers)
    save_universe(U, a.out, source="simulated",
                  extra={"master_seed": a.seed, "T": a.T, "burn_in": a.burn_in})
    log.info("wrote %d series to %s", len(U), a.out)
    return 0


def cmd_ingest(a) -> int:
    split = None
    if a.val_start or a.test_start:
        if not (a.val_start and a.test_start):
            raise ContractError("--val-start and --test-start go together")
        split = (a.val_start, a.test_start)
    kept, dropped = ingest_directory(a.src, a.out, min_train_obs=a.min_train_obs, date_split=split,
                                     exchange=a.exchange, workers=a.workers)
    log.info("kept %d series, dropped %d", len(kept), len(dropped))
    if not kept:
        log.error("no series survived ingestion")
        return 1
    return 0


def cmd_fit_local(a) -> int:
    series = _pick_series(load_universe(a.universe), a.ids, a.n_series)
    if a.pooled:
        fit = em.fit_global(series, a.kind)
        doc = {"mode": "global", "kind": a.kind, "global": fit.to_dict(),
               "series": [s.id for s in series]}
    else:
        fits = em.fit_local_many(series, a.kind, workers=a.workers)
        doc = {"mode": "local", "kind": a.kind, "fits": {s.id: f.to_dict() for s, f in zip(series, fits)}}
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def cmd_train_global(a) -> int:
    series = _pick_series(load_universe(a.universe), a.ids, a.n_series)
    model = VolModel.init(_model_config(a), seed=a.init_seed)
    cfg = _train_config(a, "global")
    out = Path(a.out)
    with ex.output_lock(out):
        try:
            trace = train_global(model, series, cfg)
        except TrainingDivergedError as exc:
            exc.trace.to_csv(out / "trace.csv")
            raise
        trace.to_csv(out / "trace.csv")
        model.save(out / "checkpoint.json", extra={"train_ids": [s.id for s in series],
                                                   "train": cfg.to_dict(),
                                                   "best_epoch": trace.best_epoch})
    log.info("best epoch %d, val nll %.6f", trace.best_epoch, trace.best_val_nll)
    return 0


def cmd_finetune(a) -> int:
    by_id = {s.id: s for s in load_universe(a.universe)}
    if a.series not in by_id:
        raise ContractError(f"unknown series {a.series!r}")
    model = VolModel.load(a.checkpoint)
    cfg = _train_config(a, "finetune", frozen_prefix=True)
    out = Path(a.out)
    with ex.output_lock(out):
        trace = finetune(model, by_id[a.series], cfg)
        trace.to_csv(out / "trace.csv")
        model.save(out / "checkpoint.json", extra={"finetuned_on": a.series, "base": str(a.checkpoint),
                                                   "train": cfg.to_dict()})
    return 0


def _fits_forecaster(path: str):
    doc = json.loads(Path(path).read_text())
    if doc.get("mode") == "global":
        params = em.EconFit.from_dict(doc["global"]).params
        return lambda s: em.forecast_sigma(params, s)
    fits = {k: em.EconFit.from_dict(v).params for k, v in doc["fits"].items()}

    def fc(s):
        if s.id not in fits:
            raise ContractError(f"{path}: no local fit for {s.id}")
        return em.forecast_sigma(fits[s.id], s)
    return fc


def cmd_evaluate(a) -> int:
    series = _pick_series(load_universe(a.universe), a.ids, a.n_series)
    metrics = [m for m in a.metrics.split(",") if m]
    alphas = [float(x) for x in a.alphas.split(",") if x]
    if a.checkpoint:
        model = VolModel.load(a.checkpoint)
        paths = dict(zip([s.id for s in series], model.sigma_paths([s.returns for s in series])))
    else:
        fc = _fits_forecaster(a.fits)
        paths = {s.id: fc(s) for s in series}
    by_id = {s.id: s for s in series}
    forecasts = {i: p[by_id[i].val_end:] for i, p in paths.items()}
    out = Path(a.out)
    with ex.output_lock(out):
        ex.write_run(out, forecasts, by_id, {"all": sorted(forecasts)}, metrics, alphas,
                     {"status": "ok", "source": a.checkpoint or a.fits})
    return 0


def cmd_mcs(a) -> int:
    by_id = {s.id: s for s in load_universe(a.universe)}
    runs = {}
    for spec in a.run:
        name, _, path = spec.partition("=")
        if not path:
            raise ContractError(f"--run expects NAME=DIR, got {spec!r}")
        runs[name] = ex.read_forecasts(path)
    common = sorted(set.intersection(*(set(f) for f in runs.values())))
    losses = {}
    for sid in common:
        s = by_id[sid]
        st = s.sigma_true[s.val_end:] if s.sigma_true is not None else None
        try:
            losses[sid] = ev.loss_columns(s.test, {n: f[sid] for n, f in runs.items()}, a.metric,
                                          a.alpha, st)
        except (ContractError, ValueError) as exc:
            losses[sid] = exc
    rep = ex.run_mcs_report(losses, a.confidence_level, n_bootstrap=a.n_bootstrap,
                            block_length=a.block_length, seed=a.seed, metric=a.metric)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ex.write_mcs_rows(rep.rows, out)
    out.with_suffix(".json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    for name in rep.counts:
        log.info("%s: in SSM for %d/%d series, mean p %.3f", name, rep.counts[name],
                 rep.n_series, rep.mean_p[name])
    return 0


def cmd_scaling(a) -> int:
    plan = ex.ExperimentPlan.from_file(a.plan)
    if a.out:
        plan.output_dir = a.out
    if a.workers:
        plan.workers = a.workers
    report = ex.run_scaling(plan, with_baselines=not a.no_baselines)
    for f in report.failed_runs:
        log.error("run %s failed: %s", f.get("run"), f.get("error"))
    return 1 if report.mandatory_failed else 0


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "fit-local": cmd_fit_local,
            "train-global": cmd_train_global, "finetune": cmd_finetune,
            "evaluate": cmd_evaluate, "mcs": cmd_mcs, "scaling": cmd_scaling}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = apply_config(args, parser)
        return COMMANDS[args.verb](args)
    except (ContractError, IngestError, TrainingDivergedError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        log.error("%s failed: %s", args.verb, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
