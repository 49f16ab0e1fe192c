"""Command-line entry point: pretrain, finetune, forecast, evaluate.

Configuration precedence (highest first): command-line flags, the YAML file
given by ``--config``, built-in defaults. Every output directory receives a
``config.yaml`` holding the fully resolved configuration actually used.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Failures print one JSON object on stderr, e.g.
``{"error": "usage", "exit": 2, "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError, load_checkpoint
from .config import GuidanceConfig, ModelConfig, TrainConfig
from .data import DataError, dataset_from_entry, load_csv, load_registry, write_csv
from .metrics import METRIC_NAMES, MetricReport, compute_metrics
from .nets import ForecastModel, state_digest
from .sampler import forecast
from .schedule import make_linear_schedule
from .trainer import TrainingError, finetune_adapters, pretrain

OUTPUT_ROOT_ENV = "FUSECAST_OUTPUT_ROOT"
RUN_FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("fusecast")


class UsageError(Exception):
    """Bad flags, bad config, or missing inputs (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


# -- run configuration ---------------------------------------------------

def load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {p} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {p} must be a mapping with sections model/train/guidance/datasets")
    known = {"model", "train", "guidance", "datasets", "registry", "finetune_dataset", "output", "seed",
             "format_version"}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected some of {sorted(known)}")
    doc["_base"] = str(p.parent.resolve())
    return doc


def _resolve_entries(entries, base: Path) -> list[dict]:
    out = []
    for e in entries or []:
        e = dict(e)
        if "path" in e and not Path(e["path"]).is_absolute():
            e["path"] = str((base / e["path"]).resolve())
        out.append(e)
    return out


def _datasets(doc: dict) -> list:
    base = Path(doc.get("_base", "."))
    if doc.get("registry"):
        reg = Path(doc["registry"])
        return load_registry(reg if reg.is_absolute() else base / reg)
    entries = _resolve_entries(doc.get("datasets"), base)
    if not entries:
        raise UsageError("config lists no datasets (add a 'datasets' section or a 'registry' path)")
    return [dataset_from_entry(e) for e in entries]


def _train_config(doc: dict, args) -> TrainConfig:
    train = dict(doc.get("train") or {})
    seed = doc.get("seed")
    if seed is not None:
        train["seed"] = seed
    for flag, key in (("n_iter", "n_iter"), ("seed", "seed"), ("batch_size", "batch_size"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            train[key] = v
    try:
        return TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train section: {exc}") from None


def _output_dir(args, doc: dict, command: str) -> Path:
    if args.output:
        out = Path(args.output)
    elif doc.get("output"):
        out = Path(doc["output"])
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, resolved: dict) -> None:
    resolved = {"format_version": RUN_FORMAT_VERSION, **resolved}
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))


# -- subcommands ---------------------------------------------------------

def cmd_pretrain(args) -> int:
    doc = load_run_config(args.config)
    try:
        mcfg = ModelConfig.from_dict(doc.get("model"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model section: {exc}") from None
    tcfg = _train_config(doc, args)
    datasets = _datasets(doc)
    out = _output_dir(args, doc, "pretrain")
    _write_config(out, {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                        "datasets": _resolve_entries(doc.get("datasets"), Path(doc.get("_base", "."))),
                        "registry": doc.get("registry"), "output": str(out)})
    torch.manual_seed(tcfg.seed)
    model = ForecastModel(mcfg)
    sched = make_linear_schedule(mcfg.T_train, mcfg.beta_start, mcfg.beta_end)
    result = pretrain(model, datasets, tcfg, sched, out_dir=out)
    print(json.dumps({"checkpoint": str(result.checkpoints[-1]), "final_loss": result.losses[-1] if result.losses else None}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    doc = load_run_config(args.config)
    model, sched, meta = load_checkpoint(args.checkpoint)
    tcfg = _train_config(doc, args)
    base = Path(doc.get("_base", "."))
    if doc.get("finetune_dataset"):
        entry = _resolve_entries([doc["finetune_dataset"]], base)[0]
        ds = dataset_from_entry(entry)
    else:
        ds = _datasets(doc)[0]
    out = _output_dir(args, doc, "finetune")
    _write_config(out, {"model": model.cfg.to_dict(), "train": tcfg.to_dict(), "checkpoint": str(args.checkpoint),
                        "finetune_dataset": ds.name, "output": str(out)})
    parent = meta["provenance"].get("digest") or state_digest(model)
    n_train = sum(p.numel() for n, p in model.named_parameters() if n.startswith("adapters."))
    audit = {"adapter_parameters": n_train, "total_parameters": model.parameter_count(),
             "adapter_fraction": n_train / model.parameter_count()}
    (out / "parameter_audit.json").write_text(json.dumps(audit, indent=2))
    result = finetune_adapters(model, ds, tcfg, sched, out_dir=out, parent=parent)
    print(json.dumps({"checkpoint": str(result.checkpoints[-1]), **audit}))
    return EXIT_OK


def cmd_forecast(args) -> int:
    model, sched, meta = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    P = cfg.patch_len
    if args.horizon < 1 or args.horizon % P:
        raise UsageError(f"horizon {args.horizon} is not a positive multiple of patch length {P}")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    try:
        ds = load_csv(args.input)
    except (FileNotFoundError, DataError) as exc:
        raise UsageError(str(exc)) from None
    L = args.lookback or ds.length
    if L > ds.length:
        raise UsageError(f"lookback {L} exceeds input length {ds.length}")
    if L % P:
        if not args.truncate_to_patch:
            raise UsageError(f"lookback {L} is not divisible by patch length {P}; nearest valid truncation is "
                             f"{L - L % P} (pass --truncate-to-patch)")
        L -= L % P
        if L == 0:
            raise UsageError(f"input shorter than one patch ({P})")
    obs = torch.as_tensor(ds.values[None, :, -L:].copy(), dtype=next(model.parameters()).dtype)
    lam = cfg.lambda_guidance if args.guidance_lambda is None else args.guidance_lambda
    out = _output_dir(args, {}, "forecast")
    _write_config(out, {"checkpoint": str(args.checkpoint), "input": str(args.input), "horizon": args.horizon,
                        "lookback": L, "guidance_lambda": lam, "samples": args.samples, "seed": args.seed,
                        "T_infer": args.T_infer or cfg.T_infer, "output": str(out)})
    res = forecast(model, obs, args.horizon, GuidanceConfig(lam), T_infer=args.T_infer, seed=args.seed,
                   n_samples=args.samples, sched=sched, checkpoint_id=meta["provenance"].get("digest"))
    steps = list(range(ds.length, ds.length + args.horizon))
    names = list(ds.channel_names)
    pred = res.prediction[0].double().numpy()
    if not np.isfinite(pred).all():
        raise RuntimeError("forecast produced non-finite values")
    write_csv(out / "prediction.csv", pred, names, steps)
    if res.ensemble is not None:
        ens_dir = out / "ensemble"
        for s in range(args.samples):
            write_csv(ens_dir / f"sample_{s:04d}.csv", res.ensemble[s, 0].double().numpy(), names, steps)
    (out / "metadata.json").write_text(json.dumps({**res.metadata, "input": str(args.input),
                                                   "channels": names}, indent=2, sort_keys=True))
    print(json.dumps({"prediction": str(out / "prediction.csv"), "samples": args.samples}))
    return EXIT_OK


def _read_matrix(path: Path) -> np.ndarray:
    try:
        return load_csv(path).values
    except DataError as exc:
        raise UsageError(str(exc)) from None


def cmd_evaluate(args) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRIC_NAMES]
    if unknown or not names:
        raise UsageError(f"unknown metric(s) {unknown}; valid names: {', '.join(METRIC_NAMES)}")
    pred_dir = Path(args.pred)
    if not (pred_dir / "prediction.csv").is_file():
        raise UsageError(f"{pred_dir} has no prediction.csv")
    truth_path = Path(args.truth)
    if not truth_path.is_file():
        raise UsageError(f"truth file not found: {truth_path}")
    point = _read_matrix(pred_dir / "prediction.csv")
    truth = _read_matrix(truth_path)
    if truth.shape != point.shape:
        raise UsageError(f"truth shape {truth.shape} (channels, steps) != prediction shape {point.shape}")
    ens_files = sorted((pred_dir / "ensemble").glob("*.csv")) if (pred_dir / "ensemble").is_dir() else []
    ensemble = np.stack([_read_matrix(f) for f in ens_files]) if ens_files else None
    metrics, flags = compute_metrics(names, truth, point, ensemble)
    report = MetricReport(config={"pred": str(pred_dir), "truth": str(truth_path), "metrics": names}, flags=flags)
    dataset = truth_path.stem
    report.add(dataset, truth.shape[1], metrics, truth.size, 1 if ensemble is None else ensemble.shape[0])
    out = _output_dir(args, {}, "evaluate")
    _write_config(out, report.config)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    print(json.dumps(report.results))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusecast", description="Diffusion forecasting with adapter fine-tuning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--output", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>, or runs/<command>)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    def training(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--n-iter", dest="n_iter", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--lr", type=float)

    sp = sub.add_parser("pretrain", help="train all components on a domain mixture")
    training(sp)
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="train only the adapters on a target domain")
    training(sp)
    sp.add_argument("--checkpoint", required=True)
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("forecast", help="sample forecasts for the tail of a CSV series")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="wide CSV: timestamp column then one column per channel")
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--lookback", type=int, help="use the last N rows (default: all rows)")
    sp.add_argument("--guidance-lambda", dest="guidance_lambda", type=float)
    sp.add_argument("--samples", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--T-infer", dest="T_infer", type=int)
    sp.add_argument("--truncate-to-patch", action="store_true",
                    help="drop the oldest rows so the lookback is a multiple of the patch length")
    common(sp)
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("evaluate", help="score a forecast directory against ground truth")
    sp.add_argument("--pred", required=True, help="directory written by 'forecast'")
    sp.add_argument("--truth", required=True, help="CSV with the true horizon values")
    sp.add_argument("--metrics", default="mse,mae", help=f"comma list from: {','.join(METRIC_NAMES)}")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (FileNotFoundError, DataError, CheckpointError) as exc:
        return _fail("config", EXIT_USAGE, exc)
    except (TrainingError, AssertionError, RuntimeError, ValueError) as exc:
        return _fail(type(exc).__name__, EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
