"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, manifest, input
file), 2 runtime failure (divergence, unexpected error). Logs go to
stderr as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .dataset import Dataset, ManifestError, load_dataset, metadata_vector, quantize, read_biomarkers, read_manifest
from .evalsuite import MetricError, metrics_report
from .fusion import FusionModel, InputBatch, mc_predict, saliency
from .io import load_image, save_image, write_csv, write_json
from .numerics import ConfigurationError
from .preprocess import PreprocessError, laplacian_variance, preprocess_image
from .synthdata import CohortConfig, gen_cohort
from .temporal_graph import GraphError, batch_graphs, build_graph
from .training import (
    AblationVariant,
    SplitError,
    TrainingDivergence,
    ablate,
    cross_validate,
    predict_dataset,
    stratified_split,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigurationError, ManifestError, CheckpointError, PreprocessError, GraphError,
                     SplitError, MetricError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def log(**fields) -> None:
    parts = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        text = str(v)
        parts.append(f"{k}={json.dumps(text) if (' ' in text or text == '') else text}")
    print(" ".join(parts), file=sys.stderr, flush=True)


def _log_line(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    priors = tuple(float(p) for p in args.priors.split(",")) if args.priors else CohortConfig.priors
    seed = int(os.environ["TPRS_SEED"]) if os.environ.get("TPRS_SEED") else args.seed
    try:
        cfg = CohortConfig(n=args.n, seed=seed, priors=priors, render_size=args.render_size)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    log(cmd="synth", n=cfg.n, seed=cfg.seed, out=args.out)
    records = gen_cohort(cfg, args.out)
    counts = np.bincount([r.grade for r in records], minlength=5)
    log(cmd="synth", status="done", grades=",".join(str(c) for c in counts))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args.config)
    records = read_manifest(args.manifest, load_images=False)
    root = Path(args.manifest).parent
    out = Path(args.out)
    report, rows = [], []
    for rec in records:
        src = root / rec.image_path
        img = quantize(load_image(src))
        lv = laplacian_variance(img)
        ok = lv >= cfg.preprocess.blur_threshold
        report.append([rec.image_path, lv, int(ok)])
        if ok:
            rel = f"images/{rec.patient_id}.png"
            save_image(out / rel, preprocess_image(img, cfg.preprocess))
            rows.append(rec.patient_id)
    write_csv(out / "rejections.csv", ["path", "laplacian_variance", "accepted"], report)
    log(cmd="preprocess", images=len(records), accepted=len(rows), rejected=len(records) - len(rows),
        report=str(out / "rejections.csv"))
    return EXIT_OK


def _load_data(args, cfg: RunConfig) -> Dataset:
    data_dir = Path(args.data)
    manifest = data_dir / "manifest.csv" if data_dir.is_dir() else data_dir
    data = load_dataset(manifest, cfg.preprocess)
    log(event="data", subjects=len(data), grades=",".join(str(c) for c in np.bincount(data.grades, minlength=5)))
    return data


def _save_predictions(path: Path, table) -> None:
    write_csv(path, table.HEADER, table.csv_rows())


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    log(cmd="train", preset=cfg.preset, seed=cfg.seed, config_digest=cfg.model.digest()[:12], out=str(out))
    data = _load_data(args, cfg)
    tr, va, te = stratified_split(data.grades, cfg.train.split, cfg.seed)
    model = FusionModel(cfg.model, np.random.default_rng(cfg.seed))
    log(event="model", params=model.num_parameters(), fusion_in=cfg.model.fusion_in_dim)
    t0 = time.perf_counter()
    result = train(model, data.subset(tr), data.subset(va), cfg.train, cfg.loss, cfg.optim, cfg.preprocess,
                   log=_log_line)
    log(event="trained", epochs=len(result.history), best_epoch=result.history.best_epoch,
        stop=result.history.stop_reason, seconds=time.perf_counter() - t0)
    write_csv(out / "history.csv", result.history.CSV_HEADER, result.history.csv_rows())
    save_checkpoint(out / "model.ckpt", model, result.optimizer,
                    np.random.default_rng(cfg.seed).bit_generator.state, result.history.best_val_loss,
                    {"run_config": cfg.to_dict()})
    write_json(out / "config.json", cfg.to_dict())
    write_json(out / "splits.json", {"train": [data.ids[i] for i in tr], "val": [data.ids[i] for i in va],
                                     "test": [data.ids[i] for i in te]})
    report = {}
    if len(te):
        table = predict_dataset(model, data.subset(te), cfg.train.mc_samples, cfg.seed)
        _save_predictions(out / "predictions.csv", table)
        report = table.report().to_dict()
        write_json(out / "report.json", _json_safe(report))
    log(cmd="train", status="done", accuracy=report.get("accuracy", float("nan")),
        checkpoint=str(out / "model.ckpt"))
    return EXIT_OK


def _read_predictions(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"predictions file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"true_grade", "p0", "p1", "p2", "p3", "p4", "risk"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        grades, probs, risk, times, events = [], [], [], [], []
        for n, row in enumerate(reader, start=2):
            try:
                grades.append(int(row["true_grade"]))
                probs.append([float(row[f"p{c}"]) for c in range(5)])
                risk.append(float(row["risk"]))
                t, e = row.get("progression_months", ""), row.get("event", "")
                times.append(float(t) if t else np.nan)
                events.append(int(e) if e else -1)
            except ValueError as exc:
                raise ManifestError(f"{path} row {n}: {exc}") from None
    if not grades:
        raise ManifestError(f"{path}: no rows")
    times, events = np.array(times), np.array(events)
    has_surv = bool(np.all(np.isfinite(times)) and np.all(events >= 0))
    return (np.array(grades), np.array(probs), np.array(risk),
            times if has_surv else None, events if has_surv else None)


def cmd_evaluate(args) -> int:
    grades, probs, risk, times, events = _read_predictions(Path(args.predictions))
    rep = metrics_report(grades, probs, risk, times, events)
    out = Path(args.out)
    write_json(out / "report.json", _json_safe(rep.to_dict()))
    # curves exist only when the binary referable-DR labels hold both classes
    roc = rep.curves.get("roc", {"threshold": [], "fpr": [], "tpr": []})
    write_csv(out / "roc.csv", ["threshold", "fpr", "tpr"], zip(roc["threshold"], roc["fpr"], roc["tpr"]))
    pr = rep.curves.get("pr", {"recall": [], "precision": []})
    write_csv(out / "pr.csv", ["recall", "precision"], zip(pr["recall"], pr["precision"]))
    write_csv(out / "dca.csv", ["threshold", "net_benefit_model", "net_benefit_all", "net_benefit_none"],
              [[p_t, nb, nb_all, 0.0] for p_t, nb, nb_all in rep.curves.get("dca", [])])
    write_csv(out / "confusion.csv", ["true\\pred", *[str(c) for c in range(rep.confusion.shape[1])]],
              [[r, *rep.confusion[r].tolist()] for r in range(rep.confusion.shape[0])])
    log(cmd="evaluate", n=len(grades), accuracy=rep.values["accuracy"], qwk=rep.values["qwk"],
        auc_roc=rep.values["auc_roc"], out=str(out))
    return EXIT_OK


def _parse_meta(text: str) -> np.ndarray:
    try:
        parts = dict(p.split("=", 1) for p in text.split(",")) if "=" in text else None
        if parts is not None:
            unknown = set(parts) - {"age", "diabetes_years"}
            if unknown:
                raise ConfigurationError(f"--meta: unknown keys {sorted(unknown)}")
            age, dur = float(parts["age"]), float(parts["diabetes_years"])
        else:
            age, dur = (float(v) for v in text.split(","))
    except (ValueError, KeyError):
        raise ConfigurationError("--meta expects 'age=<years>,diabetes_years=<years>'") from None
    return metadata_vector(age, dur)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run_cfg = RunConfig.from_dict(ckpt.extra["run_config"]) if "run_config" in ckpt.extra else None
    pcfg = run_cfg.preprocess if run_cfg is not None else None
    if pcfg is None:
        raise CheckpointError(f"{args.checkpoint}: no preprocessing settings stored")
    seed = int(os.environ["TPRS_SEED"]) if os.environ.get("TPRS_SEED") else (
        args.seed if args.seed is not None else run_cfg.seed)
    series_by_pid = read_biomarkers(args.biomarkers)
    if args.patient_id is not None:
        if args.patient_id not in series_by_pid:
            raise ManifestError(f"{args.biomarkers}: no rows for patient {args.patient_id}")
        series = series_by_pid[args.patient_id]
    elif len(series_by_pid) == 1:
        series = next(iter(series_by_pid.values()))
    else:
        raise ConfigurationError("biomarker file holds several patients; pass --patient-id")
    from .dataset import GRAPH_TIME_SCALE
    from .temporal_graph import DEFAULT_VALUE_RANGES
    image = preprocess_image(quantize(load_image(args.image)), pcfg)
    graph = build_graph(series, GRAPH_TIME_SCALE, DEFAULT_VALUE_RANGES)
    batch = InputBatch(image[None], batch_graphs([graph]), _parse_meta(args.meta)[None])
    k = args.mc_samples if args.mc_samples is not None else run_cfg.train.mc_samples
    pred = mc_predict(ckpt.model, batch, k, np.random.default_rng(seed))[0]
    result = {"patient_id": args.patient_id, **pred.to_dict()}
    if args.saliency:
        sal = saliency(ckpt.model, batch, "risk")
        save_image(args.saliency, sal)
        result["saliency"] = str(args.saliency)
    text = json.dumps(_json_safe(result), indent=2, sort_keys=True)
    if args.out:
        write_json(args.out, _json_safe(result))
    print(text)
    log(cmd="predict", grade=pred.grade, risk=pred.risk, tier=pred.tier.value, k=k)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = load_run_config(args.config)
    data = _load_data(args, cfg)
    log(cmd="cv", k=args.k, seed=cfg.seed)
    res = cross_validate(data, args.k, cfg.model, cfg.train, cfg.loss, cfg.optim, cfg.preprocess, log=_log_line)
    out = Path(args.out)
    write_json(out / "cv_report.json", _json_safe(res.to_dict()))
    log(cmd="cv", status="done", accuracy_mean=res.summary["accuracy"]["mean"],
        accuracy_std=res.summary["accuracy"]["std"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    data = _load_data(args, cfg)
    variants = [v.value for v in AblationVariant] if args.variant == "all" else [args.variant]
    splits = stratified_split(data.grades, cfg.train.split, cfg.seed)
    rows = []
    out = Path(args.out)
    for v in variants:
        res = ablate(data, v, cfg.model, cfg.train, cfg.loss, cfg.optim, cfg.preprocess, splits=splits)
        rows.append(res.row())
        write_json(out / f"ablation_{v}.json", _json_safe({"row": res.row(), "report": res.report}))
        log(cmd="ablate", variant=v, params=res.param_count, accuracy=res.report.get("accuracy"))
    keys = list(rows[0])
    write_csv(out / "ablation.csv", keys, [[("" if r[k] is None else r[k]) for k in keys] for r in rows])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="retinarisk", description="Multimodal retinopathy grading and progression risk.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--priors", help="five comma-separated grade probabilities")
    s.add_argument("--render-size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="quality-check and preprocess manifest images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("cv", cmd_cv, "stratified k-fold cross-validation"),
                              ("ablate", cmd_ablate, "train ablation variants on one split")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", required=True, help="cohort directory or manifest CSV")
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        if name == "cv":
            s.add_argument("--k", type=int, default=5)
        if name == "ablate":
            s.add_argument("--variant", default="all", choices=["all", *[v.value for v in AblationVariant]])
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="metrics from a predictions CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="single-subject prediction with uncertainty")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--biomarkers", required=True, help="long-format biomarker CSV")
    s.add_argument("--meta", required=True, help="age=<years>,diabetes_years=<years>")
    s.add_argument("--patient-id")
    s.add_argument("--mc-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--saliency", help="write a saliency PNG here")
    s.add_argument("--out", help="also write the JSON result here")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        log(status="error", kind="validation", error=type(exc).__name__, message=str(exc))
        return EXIT_INVALID
    except TrainingDivergence as exc:
        log(status="error", kind="runtime", error="TrainingDivergence", epoch=exc.epoch, batch=exc.batch,
            message=str(exc))
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log(status="error", kind="runtime", error=type(exc).__name__, message=str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
