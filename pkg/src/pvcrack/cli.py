"""Batch command-line front end.

Every artifact-producing command writes a JSON run manifest beside its
outputs (resolved configuration, seeds, paths, artifact checksums,
timestamps) so runs are reproducible. Exit status: 0 success, 1 usage
error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import arch, dataset, engine, evalkit, nn, quant, synthetic, trainer

DATA_ENV = "PVCRACK_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _variant(text: str) -> dataset.DatasetVariant:
    key = text.upper()
    if not key.startswith("V"):
        key = "V" + key.zfill(2)
    if key not in dataset.VARIANTS:
        raise argparse.ArgumentTypeError(
            f"unknown variant {text!r} (expected one of {', '.join(dataset.VARIANTS)})")
    return dataset.VARIANTS[key]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(primary_output: Path, command: str, ns: argparse.Namespace,
                    outputs: list, extra: dict | None = None) -> Path:
    outputs = [Path(p) for p in outputs]
    config = {k: (str(v) if isinstance(v, Path) else v)
              for k, v in vars(ns).items() if k != "func"}
    config["variant"] = getattr(ns, "variant", None) and ns.variant.variant_id
    manifest = {
        "command": command,
        "config": config,
        "outputs": [str(p) for p in outputs],
        "checksums": {p.name: _sha256(p) for p in outputs if p.is_file()},
        "started_at": ns._started_at,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "deterministic": bool(getattr(ns, "deterministic", False)),
    }
    if extra:
        manifest.update(extra)
    primary_output = Path(primary_output)
    if primary_output.is_dir():
        path = primary_output / "run.manifest.json"
    else:
        path = primary_output.with_name(primary_output.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return path


def _prepare_dataset(ns):
    cells = dataset.load_elpv(ns.data)
    ds = dataset.build_variant(cells, ns.variant, ns.seed)
    plan = dataset.make_folds(ds, ns.folds, ns.seed)
    return cells, ds, plan


def _train_config(ns, extra_seed_shift: int = 0) -> trainer.TrainConfig:
    policy = None
    if getattr(ns, "augment", False):
        policy = dataset.AugmentPolicy(rotate_degrees_max=10.0, translate_px_max=4,
                                       horizontal_flip=True, vertical_flip=True,
                                       contrast_range=(0.8, 1.2))
    return trainer.TrainConfig(
        epochs=ns.epochs,
        batch_size=ns.batch_size,
        optimizer=nn.OptimConfig(kind=ns.optimizer, learning_rate=ns.lr,
                                 momentum=ns.momentum),
        augment=policy,
        freeze_prefix=getattr(ns, "freeze_prefix", 0),
        seed=ns.seed + extra_seed_shift,
        early_stop_patience=ns.patience if ns.patience > 0 else None,
    )


def _load_spec(ns) -> arch.ModelSpec:
    if ns.spec is not None:
        return arch.spec_from_text(Path(ns.spec).read_text("utf-8"))
    if ns.model_name == "model2":
        return arch.reference_model2_spec(ns.input_side)
    return arch.reference_model1_spec(ns.input_side)


def cmd_prepare(ns) -> int:
    out_dir = Path(ns.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells, ds, plan = _prepare_dataset(ns)
    manifest_path = out_dir / f"dataset_{ns.variant.variant_id}.tsv"
    dataset.write_dataset_manifest(manifest_path, ds, plan)
    counts = dataset.check_table_counts(cells)
    discrepancies = [
        f"{vid}: computed {info['computed']} vs published table {info['table']}"
        for vid, info in counts.items() if not info["match"]
    ]
    print(f"variant {ns.variant.variant_id}: {len(ds.samples)} training samples, "
          f"{len(ds.forced_test)} forced-test samples, {plan.k} folds")
    for line in discrepancies:
        print(f"table discrepancy: {line}")
    _write_manifest(out_dir, "prepare", ns, [manifest_path],
                    {"sample_count": len(ds.samples),
                     "forced_test_count": len(ds.forced_test),
                     "table_counts": counts})
    return EXIT_OK


def cmd_train(ns) -> int:
    _, ds, plan = _prepare_dataset(ns)
    spec = _load_spec(ns)
    model = arch.build_model(spec, ns.seed)
    cfg = _train_config(ns)
    trained, history = trainer.train(model, ds, plan, ns.val_fold, cfg)
    out = Path(ns.out)
    trainer.save_checkpoint(trained, out, {
        "variant": ns.variant.variant_id,
        "seed": ns.seed,
        "val_fold": ns.val_fold,
        "epochs_completed": len(history.train_loss),
        "history": {"train_loss": history.train_loss,
                    "train_acc": history.train_acc,
                    "val_acc": history.val_acc},
    })
    val = history.val_acc[-1] if history.val_acc else float("nan")
    print(f"trained {len(history.train_loss)} epochs, final val accuracy {val:.4f}")
    _write_manifest(out, "train", ns, [out, out.with_name(out.name + ".json")])
    return EXIT_OK


def cmd_finetune(ns) -> int:
    _, ds, plan = _prepare_dataset(ns)
    base, _info = trainer.load_checkpoint(ns.base)
    cfg = _train_config(ns)
    if ns.ladder is not None:
        cfg = trainer.apply_config(cfg, base, ns.ladder)
    tuned, history = trainer.fine_tune(base, ds, plan, ns.val_fold, cfg)
    out = Path(ns.out)
    trainer.save_checkpoint(tuned, out, {
        "variant": ns.variant.variant_id,
        "base": str(ns.base),
        "ladder": ns.ladder,
        "freeze_prefix": cfg.freeze_prefix,
        "epochs_completed": len(history.train_loss),
        "history": {"train_loss": history.train_loss,
                    "train_acc": history.train_acc,
                    "val_acc": history.val_acc},
    })
    val = history.val_acc[-1] if history.val_acc else float("nan")
    print(f"fine-tuned {len(history.train_loss)} epochs "
          f"(freeze_prefix={cfg.freeze_prefix}), final val accuracy {val:.4f}")
    _write_manifest(out, "finetune", ns, [out, out.with_name(out.name + ".json")])
    return EXIT_OK


def cmd_evaluate(ns) -> int:
    _, ds, plan = _prepare_dataset(ns)
    instance = engine.parse(Path(ns.model).read_bytes())
    if instance.scheme == engine.SCHEME_INT8:
        if ns.forced_test:
            samples = list(ds.forced_test)
        else:
            idx = np.flatnonzero(plan.fold_assignment == ns.fold)
            samples = [ds.samples[i] for i in idx]
        if not samples:
            raise dataset.DatasetError("evaluation partition is empty")
        preds = [instance.infer(img.pixels)[0] for img, _ in samples]
        truth = [cls for _, cls in samples]
        report = evalkit.compute_metrics(
            evalkit.confusion_matrix(preds, truth, ds.num_classes))
    else:
        report = trainer.evaluate_model(instance.float_model(), ds, plan,
                                        ns.fold, use_forced_test=ns.forced_test)
    print(f"accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} "
          f"n={report.sample_count}")
    if ns.out:
        out = Path(ns.out)
        evalkit.write_metrics_report(out, report)
        _write_manifest(out, "evaluate", ns, [out])
    return EXIT_OK


def _calibration_tensors(model, ds, plan, val_fold, count):
    idx = np.flatnonzero(plan.fold_assignment != val_fold)[:count]
    return [dataset.preprocess(ds.samples[i][0], model.spec.input_side) for i in idx]


def cmd_quantize(ns) -> int:
    _, ds, plan = _prepare_dataset(ns)
    model, _info = trainer.load_checkpoint(ns.model)
    calib = _calibration_tensors(model, ds, plan, ns.val_fold, ns.calib)
    qm = quant.quantize_int8(model, quant.calibrate(model, calib))
    out = Path(ns.out)
    out.write_bytes(engine.serialize(qm))

    val_idx = np.flatnonzero(plan.fold_assignment == ns.val_fold)
    samples = [(dataset.preprocess(ds.samples[i][0], model.spec.input_side),
                ds.samples[i][1]) for i in val_idx]
    report = quant.quant_error_stats(model, qm, samples)
    est = arch.estimate_size(model.spec)
    report_path = out.with_name(out.name + ".report")
    quant.write_quant_report(report_path, report, {
        "fp32": est.bytes_fp32, "fp16": est.bytes_fp16, "int8": est.bytes_int8})
    print(f"int8 blob {out.stat().st_size} bytes; float accuracy "
          f"{report.accuracy_float:.4f}, int8 accuracy {report.accuracy_int8:.4f}, "
          f"agreement {report.agreement_rate:.4f}")
    _write_manifest(out, "quantize", ns, [out, report_path])
    return EXIT_OK


def cmd_export(ns) -> int:
    model, _info = trainer.load_checkpoint(ns.model)
    out = Path(ns.out)
    if ns.scheme == "fp32":
        blob = engine.serialize(model)
    elif ns.scheme == "fp16":
        blob = engine.serialize(quant.quantize_fp16(model))
    else:
        if not ns.data:
            raise dataset.DatasetError("int8 export needs --data for calibration")
        _, ds, plan = _prepare_dataset(ns)
        calib = _calibration_tensors(model, ds, plan, ns.val_fold, ns.calib)
        qm = quant.quantize_int8(model, quant.calibrate(model, calib))
        blob = engine.serialize(qm)
    out.write_bytes(blob)
    print(f"exported {ns.scheme} blob: {len(blob)} bytes -> {out}")
    _write_manifest(out, "export", ns, [out])
    return EXIT_OK


def cmd_infer(ns) -> int:
    instance = engine.parse(Path(ns.model).read_bytes())
    with Image.open(ns.image) as img:
        pixels = np.asarray(img.convert("L"), dtype=np.uint8)
    cls, logits = instance.infer(pixels)
    print(f"class={cls} logits=[{', '.join(f'{v:.6f}' for v in logits)}]")
    return EXIT_OK


def cmd_benchmark(ns) -> int:
    instance = engine.parse(Path(ns.model).read_bytes())
    report = engine.benchmark(instance, ns.runs, ns.warmup)
    s = report.stats
    print(f"runs={s.runs} mean={s.mean_ms:.3f}ms p50={s.p50_ms:.3f}ms "
          f"p95={s.p95_ms:.3f}ms min={s.min_ms:.3f}ms max={s.max_ms:.3f}ms")
    print(f"blob_bytes={report.blob_bytes} arena_bytes={report.arena_bytes} "
          f"compute_only={str(report.compute_only).lower()}")
    if ns.out:
        out = Path(ns.out)
        out.write_text(
            "\n".join([
                f"runs={s.runs}", f"mean_ms={s.mean_ms:.6f}",
                f"p50_ms={s.p50_ms:.6f}", f"p95_ms={s.p95_ms:.6f}",
                f"min_ms={s.min_ms:.6f}", f"max_ms={s.max_ms:.6f}",
                f"blob_bytes={report.blob_bytes}",
                f"arena_bytes={report.arena_bytes}",
                f"compute_only={str(report.compute_only).lower()}",
            ]) + "\n", "utf-8")
        _write_manifest(out, "benchmark", ns, [out])
    return EXIT_OK


def cmd_search(ns) -> int:
    _, ds, plan = _prepare_dataset(ns)
    space = arch.SearchSpace()
    budget_cfg = trainer.TrainConfig(
        epochs=ns.epochs, batch_size=ns.batch_size,
        optimizer=nn.OptimConfig(kind=ns.optimizer, learning_rate=ns.lr,
                                 momentum=ns.momentum),
        seed=ns.seed, early_stop_patience=None)
    result = arch.random_search(space, ns.budget, ns.trials, budget_cfg, ds, ns.seed)
    out_dir = Path(ns.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranking = out_dir / "search_ranking.txt"
    lines = [f"status={result.status}", f"trials={result.trials}"]
    for i, entry in enumerate(result.entries):
        lines.append(f"rank={i + 1} trial={entry.trial} accuracy={entry.accuracy:.4f} "
                     f"int8_bytes={entry.size.bytes_int8} params={entry.size.param_count}")
    ranking.write_text("\n".join(lines) + "\n", "utf-8")
    outputs = [ranking]
    if result.entries:
        best = out_dir / "best_spec.txt"
        best.write_text(arch.spec_to_text(result.entries[0].spec), "utf-8")
        outputs.append(best)
        print(f"best: accuracy {result.entries[0].accuracy:.4f}, "
              f"{result.entries[0].size.bytes_int8} int8 bytes "
              f"({len(result.entries)}/{result.trials} feasible)")
    else:
        print("no feasible architecture")
    _write_manifest(out_dir, "search", ns, outputs, {"status": result.status})
    return EXIT_OK


def _read_candidate_metrics(path: Path) -> dict:
    values = {}
    if path.is_file():
        for line in path.read_text("utf-8").splitlines():
            key, _, value = line.partition("=")
            if value:
                values[key.strip()] = value.strip()
    return values


def cmd_gate(ns) -> int:
    profile = evalkit.PROFILES[ns.profile]
    candidate_dir = Path(ns.candidates)
    blobs = sorted(candidate_dir.glob("*.pvtm"))
    if not blobs:
        raise dataset.DatasetError(f"no .pvtm candidates under {candidate_dir}")
    candidates = []
    for blob_path in blobs:
        instance = engine.parse(blob_path.read_bytes())
        meta = _read_candidate_metrics(blob_path.with_suffix(".metrics"))
        accuracy = float(meta.get("mean_accuracy", meta.get("accuracy", "nan")))
        p50 = meta.get("p50_ms") or meta.get("p50_latency_ms")
        candidates.append(evalkit.Candidate(
            name=blob_path.stem,
            scheme=engine.SCHEME_NAMES[instance.scheme],
            blob_bytes=instance.blob_bytes,
            arena_bytes=instance.plan.arena_bytes,
            mean_accuracy=accuracy,
            p50_latency_ms=float(p50) if p50 else None,
        ))
    report = evalkit.budget_gate(candidates, profile)
    print(evalkit.render_selection_table(report))
    print(f"status: {report.status}" +
          (f", selected: {report.selected}" if report.selected else ""))
    if ns.out:
        out = Path(ns.out)
        evalkit.write_selection_report(out, report)
        _write_manifest(out, "gate", ns, [out])
    return EXIT_OK


def cmd_synth_data(ns) -> int:
    root = synthetic.generate_elpv_fixture(ns.out, seed=ns.seed)
    n = len((root / "labels.csv").read_text("utf-8").splitlines())
    print(f"wrote {n} synthetic cells under {root}")
    _write_manifest(root, "synth-data", ns, [root / "labels.csv"])
    return EXIT_OK


def _add_data_args(p, folds_default=5):
    p.add_argument("--data", default=os.environ.get(DATA_ENV),
                   help=f"dataset root (default ${DATA_ENV})")
    p.add_argument("--variant", type=_variant, default=dataset.VARIANTS["V06"],
                   help="dataset variant 01..08 (default 06)")
    p.add_argument("--folds", type=int, default=folds_default,
                   help="cross-validation fold count (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="seed (default %(default)s)")


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=60, help="default %(default)s")
    p.add_argument("--batch-size", type=int, default=32, help="default %(default)s")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam",
                   help="default %(default)s")
    p.add_argument("--lr", type=float, default=1e-3, help="default %(default)s")
    p.add_argument("--momentum", type=float, default=0.0,
                   help="sgd momentum (default %(default)s)")
    p.add_argument("--patience", type=int, default=10,
                   help="early-stop patience on val accuracy, 0 disables "
                        "(default %(default)s)")
    p.add_argument("--val-fold", type=int, default=0, help="default %(default)s")
    p.add_argument("--augment", action="store_true", help="enable augmentation")


def build_parser() -> _Parser:
    parser = _Parser(prog="pvcrack",
                     description="Train, quantize, and budget-check tiny EL "
                                 "crack classifiers.")
    parser.add_argument("--config", default=None,
                        help="key=value file supplying flag defaults")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-ordered reductions (runs are "
                             "single-threaded either way)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("prepare", help="build a variant and fold plan")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--freeze-prefix", type=int, default=0, help="default %(default)s")
    p.add_argument("--spec", default=None, help="model spec file")
    p.add_argument("--model-name", choices=("model1", "model2"), default="model1",
                   help="reference model when no --spec (default %(default)s)")
    p.add_argument("--input-side", type=int, default=96, help="default %(default)s")
    p.add_argument("--out", required=True, help="checkpoint path (.pvtm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--freeze-prefix", type=int, default=0, help="default %(default)s")
    p.add_argument("--base", required=True, help="base checkpoint (.pvtm)")
    p.add_argument("--ladder", type=int, choices=(1, 2, 3), default=None,
                   help="configuration ladder step (overrides --freeze-prefix)")
    p.add_argument("--out", required=True, help="checkpoint path (.pvtm)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a model on one fold")
    _add_data_args(p)
    p.add_argument("--model", required=True, help="model blob (.pvtm)")
    p.add_argument("--fold", type=int, default=0, help="default %(default)s")
    p.add_argument("--forced-test", action="store_true",
                   help="evaluate the forced test partition (V04/V05)")
    p.add_argument("--out", default=None, help="metrics report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("quantize", help="int8-quantize a checkpoint")
    _add_data_args(p)
    p.add_argument("--model", required=True, help="fp32 checkpoint (.pvtm)")
    p.add_argument("--val-fold", type=int, default=0, help="default %(default)s")
    p.add_argument("--calib", type=int, default=quant.DEFAULT_CALIBRATION_SAMPLES,
                   help="calibration sample count (default %(default)s)")
    p.add_argument("--out", required=True, help="int8 blob path (.pvtm)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export", help="serialize a checkpoint to a scheme")
    _add_data_args(p)
    p.add_argument("--model", required=True, help="fp32 checkpoint (.pvtm)")
    p.add_argument("--scheme", choices=("fp32", "fp16", "int8"), default="int8",
                   help="default %(default)s")
    p.add_argument("--val-fold", type=int, default=0, help="default %(default)s")
    p.add_argument("--calib", type=int, default=quant.DEFAULT_CALIBRATION_SAMPLES,
                   help="calibration sample count (default %(default)s)")
    p.add_argument("--out", required=True, help="blob path (.pvtm)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--model", required=True, help="model blob (.pvtm)")
    p.add_argument("--image", required=True, help="cell image (png)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="time repeated inference")
    p.add_argument("--model", required=True, help="model blob (.pvtm)")
    p.add_argument("--runs", type=int, default=50, help="default %(default)s")
    p.add_argument("--warmup", type=int, default=5, help="default %(default)s")
    p.add_argument("--out", default=None, help="latency report path")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("search", help="random architecture search under a budget")
    _add_data_args(p)
    p.add_argument("--budget", type=int, default=100 * 1024,
                   help="int8 byte budget (default %(default)s)")
    p.add_argument("--trials", type=int, default=8, help="default %(default)s")
    p.add_argument("--epochs", type=int, default=3,
                   help="training epochs per trial (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="default %(default)s")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam",
                   help="default %(default)s")
    p.add_argument("--lr", type=float, default=1e-3, help="default %(default)s")
    p.add_argument("--momentum", type=float, default=0.0, help="default %(default)s")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gate", help="check candidates against a budget profile")
    p.add_argument("--profile", choices=tuple(evalkit.PROFILES), required=True)
    p.add_argument("--candidates", required=True,
                   help="directory of .pvtm blobs with optional .metrics sidecars")
    p.add_argument("--out", default=None, help="selection report path")
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("synth-data", help="generate an ELPV-layout demo dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="default %(default)s")
    p.set_defaults(func=cmd_synth_data)

    return parser


def _apply_config_file(parser: _Parser, argv: list) -> None:
    if "--config" not in argv:
        return
    path = Path(argv[argv.index("--config") + 1])
    if not path.is_file():
        parser.error(f"config file not found: {path}")
    overrides = {}
    for line in path.read_text("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            parser.error(f"bad config line {line!r} in {path}")
        overrides[key.strip().replace("-", "_")] = value.strip()
    parser.set_defaults(**overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config_file(parser, argv)
    ns = parser.parse_args(argv)
    ns._started_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if getattr(ns, "data", "unset") is None:
        parser.error(f"--data is required (or set ${DATA_ENV})")
    try:
        return ns.func(ns)
    except (dataset.DatasetError, engine.BlobError, arch.SpecError,
            quant.QuantError, evalkit.MetricsError, OSError, ValueError) as exc:
        print(f"pvcrack: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
