"""Command-line pipeline: synth -> preprocess -> segment -> train / loocv -> report, explain."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .ecgio import LEAD_NAMES, SyntheticConfig, generate_synthetic_dataset, load_dataset, save_dataset
from .errors import ConfigError, IoError, WctError
from .evaluation import build_report, loocv, read_folds, write_fold, write_report
from .explain import (
    global_lead_importance,
    lead_attribution,
    sample_attribution,
    train_mean_baseline,
    write_lead_importance_csv,
    write_shapley_csv,
)
from .model import ModelConfig, build_model, load_weights, save_weights
from .preprocess import FilterSpec, preprocess_record
from .segment import SegmentSet, lead_index, load_segments, save_segments, segment_record
from .training import TrainConfig, train

logger = logging.getLogger("wctnet")


def _write_run_json(out_dir: Path, command: str, config: dict) -> None:
    doc = {"command": command, "version": __version__, "config": config}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig(
        conv_filters=args.conv_filters,
        conv_kernel=args.conv_kernel,
        dropout_rate=args.dropout,
        lstm1_units=args.lstm1_units,
        lstm2_units=args.lstm2_units,
        dense1_units=args.dense1_units,
    )
    cfg.validate()
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        lr=args.lr,
        lr_decay_factor=args.lr_decay,
        lr_patience_epochs=args.lr_patience,
        early_stop_patience_epochs=args.es_patience,
        val_fraction=args.val_fraction,
        seed=args.seed,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    informative = tuple(args.informative_leads.split(",")) if args.informative_leads else None
    cfg = SyntheticConfig(
        n_patients_per_class=args.patients_per_class,
        record_duration_s=args.duration,
        seed=args.seed,
        informative_leads=informative,
    )
    records = generate_synthetic_dataset(cfg)
    save_dataset(records, out)
    _write_run_json(out, "synth", asdict(cfg))
    return 0


def cmd_preprocess(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    records = load_dataset(args.manifest)
    rate = records[0].sampling_rate_hz if records else 1000
    spec = FilterSpec(args.low_hz, args.high_hz, args.order, rate)
    spec.validate()
    save_dataset([preprocess_record(r, spec) for r in records], out)
    _write_run_json(out, "preprocess", {"manifest": args.manifest, "filter": asdict(spec)})
    return 0


def cmd_segment(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    lead = lead_index(args.peak_lead)
    records = load_dataset(args.manifest)
    segs = SegmentSet.concat(segment_record(r, lead) for r in records)
    save_segments(segs, out)
    counts = {k.value: v for k, v in segs.counts_per_class.items()}
    _write_run_json(out, "segment", {"manifest": args.manifest, "peak_lead": LEAD_NAMES[lead], "counts": counts})
    return 0


def cmd_train(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    mcfg, tcfg = _model_config(args), _train_config(args)
    segs = load_segments(args.segments)
    params = build_model(mcfg, rng_seed=args.seed)
    report = train(params, segs, tcfg)
    save_weights(params, out / "weights.bin")
    report.to_csv(out / "train_report.csv")
    _write_run_json(out, "train", {
        "segments": args.segments, "model_config": asdict(mcfg), "model_overrides": mcfg.overrides(),
        "train_config": asdict(tcfg), "stopped_epoch": report.stopped_epoch, "best_epoch": report.best_epoch,
    })
    return 0


def cmd_loocv(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    mcfg, tcfg = _model_config(args), _train_config(args)
    segs = load_segments(args.segments)
    folds = loocv(segs, tcfg, mcfg, jobs=args.jobs)
    for fold in folds:
        write_fold(fold, out / "folds" / fold.held_out_patient)
    _write_run_json(out, "loocv", {
        "segments": args.segments, "model_config": asdict(mcfg), "model_overrides": mcfg.overrides(),
        "train_config": asdict(tcfg), "jobs": args.jobs, "folds": [f.held_out_patient for f in folds],
    })
    return 0


def cmd_report(args) -> int:
    folds = read_folds(Path(args.loocv_dir) / "folds")
    out = _prepare_out_dir(args.out_dir)
    report = build_report(folds)
    write_report(report, out)
    _write_run_json(out, "report", {"loocv_dir": args.loocv_dir, "n_folds": len(folds)})
    return 0


def _model_config_for_weights(args) -> ModelConfig:
    # weights from `train` sit next to run.json; LOOCV fold weights sit two levels below it
    for parent in list(Path(args.weights).resolve().parents)[:3]:
        run = parent / "run.json"
        if run.is_file():
            stored = json.loads(run.read_text()).get("config", {}).get("model_config")
            if stored:
                return ModelConfig(**stored)
    return _model_config(args)


def cmd_explain(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    mcfg = _model_config_for_weights(args)
    params = load_weights(args.weights, mcfg)
    segs = load_segments(args.segments)
    if args.patients:
        segs = segs.select(args.patients.split(","))
    if len(segs) == 0:
        raise ConfigError("no segments selected for explanation")
    if args.baseline == "train_mean":
        background = load_segments(args.background) if args.background else segs
        baseline = train_mean_baseline(background)
    else:
        baseline = "zeros"
    sample_lead = lead_index(args.sample_lead)
    chosen = segs.segments[: args.max_segments]
    shap_dir = out / "shapley"
    shap_dir.mkdir(exist_ok=True)
    reports = []
    for i, seg in enumerate(chosen):
        stem = f"{i:04d}_{seg.patient_id}_{seg.peak_index}"
        rep = lead_attribution(params, seg, baseline)
        write_shapley_csv(rep, shap_dir / f"{stem}_leads.csv")
        reports.append(rep)
        if args.permutations > 0:
            srep = sample_attribution(params, seg, sample_lead, args.groups, args.permutations,
                                      seed=args.seed + i, baseline=baseline)
            write_shapley_csv(srep, shap_dir / f"{stem}_samples.csv")
    write_lead_importance_csv(global_lead_importance(reports), out / "lead_importance.csv")
    _write_run_json(out, "explain", {
        "weights": args.weights, "segments": args.segments, "model_config": asdict(mcfg),
        "baseline": args.baseline, "groups": args.groups, "permutations": args.permutations,
        "sample_lead": LEAD_NAMES[sample_lead], "n_segments": len(chosen), "seed": args.seed,
    })
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", required=True, help="directory for this stage's artifacts")
    p.add_argument("--seed", type=int, default=0)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--conv-filters", type=int, default=d.conv_filters)
    g.add_argument("--conv-kernel", type=int, default=d.conv_kernel)
    g.add_argument("--dropout", type=float, default=d.dropout_rate)
    g.add_argument("--lstm1-units", type=int, default=d.lstm1_units)
    g.add_argument("--lstm2-units", type=int, default=d.lstm2_units)
    g.add_argument("--dense1-units", type=int, default=d.dense1_units)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--max-epochs", type=int, default=d.max_epochs)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--lr-decay", type=float, default=d.lr_decay_factor)
    g.add_argument("--lr-patience", type=int, default=d.lr_patience_epochs)
    g.add_argument("--es-patience", type=int, default=d.early_stop_patience_epochs)
    g.add_argument("--val-fraction", type=float, default=d.val_fraction)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wctnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic 12-lead cohort")
    _add_common(p)
    p.add_argument("--patients-per-class", type=int, default=5)
    p.add_argument("--duration", type=float, default=60.0, help="record length in seconds")
    p.add_argument("--informative-leads", default=None, help="comma-separated leads carrying the class signal")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="band-pass filter and z-score every record")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    d = FilterSpec()
    p.add_argument("--low-hz", type=float, default=d.low_cut_hz)
    p.add_argument("--high-hz", type=float, default=d.high_cut_hz)
    p.add_argument("--order", type=int, default=d.order)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("segment", help="detect R-peaks and cut 500-sample windows")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--peak-lead", default="II")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="fit one model on a segment directory")
    _add_common(p)
    p.add_argument("--segments", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loocv", help="patient-level leave-one-out cross-validation")
    _add_common(p)
    p.add_argument("--segments", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("report", help="aggregate LOOCV folds into metric CSVs")
    _add_common(p)
    p.add_argument("--loocv-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("explain", help="Shapley attributions for trained weights")
    _add_common(p)
    p.add_argument("--segments", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--patients", default=None, help="comma-separated patient ids to explain")
    p.add_argument("--max-segments", type=int, default=20)
    p.add_argument("--baseline", choices=("zeros", "train_mean"), default="zeros")
    p.add_argument("--background", default=None, help="segment directory for the train_mean baseline")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--permutations", type=int, default=200)
    p.add_argument("--sample-lead", default="V6")
    _add_model_flags(p)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except WctError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
