"""Command-line pipeline: dump activations, tag filters, explain, evaluate.

Every subcommand with identical inputs and seed writes byte-identical
artifacts (manifest timestamps aside) regardless of --threads.  Exit codes:
0 success, 1 internal error, 2 input/usage error, 3 contamination.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import figures, reports
from .errors import ContaminationError, DataError, FiltagError
from .explain import (
    activated_filters,
    error_report,
    evaluate,
    explain_image,
    sweep,
)
from .infer import forward
from .ingest import ActivationRecord, read_dump, split_dataset, write_dump
from .model import load_model
from .tagging import SelectionMethod, build_tag_store, load_tag_store, save_tag_store
from .tensor import load_tensor

log = logging.getLogger("filtag")

PREDICTIONS_NAME = "predictions.json"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONTAMINATION = 3


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _run_dir(command: str, config: dict, out: str | None) -> Path:
    """Explicit --out, or a directory named by a hash of the run config."""
    if out:
        return Path(out)
    blob = json.dumps({"command": command, **config}, sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:12]
    return Path("filtag-runs") / f"{command}-{digest}"


def _method_from_args(args, required: bool) -> SelectionMethod | None:
    k = getattr(args, "k", None)
    q = getattr(args, "q", None)
    if k is not None and q is not None:
        raise DataError("use exactly one of --k and --q")
    if k is not None:
        return SelectionMethod.k_best(k)
    if q is not None:
        return SelectionMethod.q_quantile(q)
    if required:
        raise DataError("one of --k or --q is required")
    return None


def _load_image_manifest(images_dir: Path):
    manifest_path = images_dir / "images.json"
    if not manifest_path.exists():
        raise DataError(f"no images.json in {images_dir}")
    doc = json.loads(manifest_path.read_text())
    entries = []
    for entry in doc.get("images", []):
        image_id = entry.get("image_id")
        if image_id is None:
            raise DataError(f"image entry {entry!r} has no image_id")
        if not entry.get("class_label"):
            raise DataError(f"image {image_id} has no class label in images.json")
        if "file" not in entry:
            raise DataError(f"image {image_id} has no file in images.json")
        entries.append((int(image_id), entry["class_label"], images_dir / entry["file"]))
    return sorted(entries)


def _load_predictions(path: Path | None, dump_dir: Path | None) -> dict | None:
    if path is None and dump_dir is not None:
        candidate = dump_dir / PREDICTIONS_NAME
        path = candidate if candidate.exists() else None
    if path is None:
        return None
    doc = json.loads(Path(path).read_text())
    return {int(k): v for k, v in doc.get("predictions", {}).items()}


def _write_predictions(path: Path, predictions: dict, model_name: str) -> None:
    doc = {
        "format_version": 1,
        "model_name": model_name,
        "predictions": {str(k): predictions[k] for k in sorted(predictions)},
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_dump_activations(args) -> int:
    model = load_model(args.model)
    entries = _load_image_manifest(Path(args.images))
    dump_dir = Path(args.dump) if args.dump else _run_dir(
        "dump-activations",
        {"model": args.model, "images": args.images},
        args.out,
    ) / "dump"

    def run_one(entry):
        image_id, label, file_path = entry
        trace = forward(model, load_tensor(file_path))
        records = [
            ActivationRecord(
                image_id=image_id, class_label=label, layer_id=m, feature_maps=out
            )
            for m, out in enumerate(trace.conv_outputs)
        ]
        return image_id, trace.predicted_class, records

    from .explain import _map_windowed

    all_records = []
    predictions = {}
    for image_id, predicted, records in _map_windowed(run_one, entries, args.threads):
        predictions[image_id] = predicted
        all_records.extend(records)

    metadata = write_dump(all_records, dump_dir, model_name=model.name)
    _write_predictions(dump_dir / PREDICTIONS_NAME, predictions, model.name)
    print(
        f"dump {dump_dir}: {len(metadata.images)} images x {len(metadata.layers)} layers, "
        f"{len(metadata.shards)} shard(s), classes: {', '.join(metadata.classes)}"
    )
    return EXIT_OK


def _store_summary(store) -> str:
    lines = []
    for layer_id in sorted(store.layers):
        filters = store.layers[layer_id]
        tagged = sum(1 for tags in filters.values() if tags)
        total_tags = sum(len(tags) for tags in filters.values())
        classes = {t.class_label for tags in filters.values() for t in tags}
        line = (
            f"layer {layer_id}: {tagged}/{len(filters)} filters tagged, "
            f"{total_tags} tags across {len(classes)} classes"
        )
        if classes and all(
            {t.class_label for t in tags} == classes for tags in filters.values()
        ):
            line += " (every filter tagged by every class)"
        lines.append(line)
    return "\n".join(lines)


def cmd_tag(args) -> int:
    reader = read_dump(args.dump)
    method = _method_from_args(args, required=True)
    split = split_dataset(reader.labels(), fraction=args.split_fraction, seed=args.seed)
    store = build_tag_store(reader, split, method)
    if args.store:
        store_path = Path(args.store)
    else:
        config = {
            "dump": args.dump,
            "method": method.to_json_dict(),
            "seed": args.seed,
            "fraction": args.split_fraction,
        }
        store_path = _run_dir("tag", config, args.out) / "store.json"
    store_path.parent.mkdir(parents=True, exist_ok=True)
    save_tag_store(store, store_path)
    print(f"store {store_path} ({method.label()}, seed {split.seed})")
    print(_store_summary(store))
    return EXIT_OK


def _find_image(reader, image_id: int):
    for image in reader.iter_images():
        if image.image_id == image_id:
            return image
    raise DataError(f"image {image_id} is not in the dump")


def cmd_explain(args) -> int:
    reader = read_dump(args.dump)
    store = load_tag_store(args.store)
    method = _method_from_args(args, required=False) or store.method
    predictions = _load_predictions(
        Path(args.predictions) if args.predictions else None, Path(args.dump)
    )
    image = _find_image(reader, args.image_id)
    active = activated_filters(image.layers, method, reader.metadata.layer_filter_counts())
    explanation = explain_image(
        active,
        store,
        image_id=image.image_id,
        true_class=image.class_label,
        predicted_class=predictions.get(image.image_id) if predictions else None,
        class_order=reader.metadata.classes,
    )
    doc = reports.explanation_json_dict(explanation, method)
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    else:
        print(reports.explanation_text(explanation), end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        reports.write_json(out_dir / "explanation.json", doc)
        (out_dir / "explanation.txt").write_text(reports.explanation_text(explanation))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reader = read_dump(args.dump)
    store = load_tag_store(args.store)
    method = _method_from_args(args, required=False)
    split = split_dataset(reader.labels(), fraction=args.split_fraction, seed=args.seed)
    predictions = _load_predictions(
        Path(args.predictions) if args.predictions else None, Path(args.dump)
    )
    report = evaluate(
        reader,
        store,
        split,
        n_values=args.n,
        method=method,
        predictions=predictions,
        eval_ids=args.ids,
        threads=args.threads,
    )
    config = {
        "dump": args.dump,
        "store": args.store,
        "n": sorted(set(args.n)),
        "seed": args.seed,
        "fraction": args.split_fraction,
        "ids": args.ids,
        "method": (method or store.method).to_json_dict(),
        "format": args.format,
    }
    out_dir = _run_dir("evaluate", config, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = reports.report_json_dict(report)
    reports.write_json(out_dir / "report.json", doc)
    reports.write_csv(out_dir / "report.csv", reports.report_csv_rows(report))
    (out_dir / "report.txt").write_text(reports.report_text(report))
    figures.render_hits_report(report, out_dir / "report.png")
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    elif args.format == "csv":
        sys.stdout.write(
            "\n".join(",".join(str(v) for v in row) for row in reports.report_csv_rows(report))
            + "\n"
        )
    else:
        print(reports.report_text(report), end="")
    log.info("evaluate artifacts in %s", out_dir)
    return EXIT_OK


def cmd_sweep(args) -> int:
    reader = read_dump(args.dump)
    methods = [SelectionMethod.k_best(k) for k in (args.k or [])]
    methods += [SelectionMethod.q_quantile(q) for q in (args.q or [])]
    if not methods:
        raise DataError("sweep needs at least one --k or --q value")
    split = split_dataset(reader.labels(), fraction=args.split_fraction, seed=args.seed)
    predictions = _load_predictions(
        Path(args.predictions) if args.predictions else None, Path(args.dump)
    )
    result = sweep(reader, split, methods, args.n, predictions=predictions)
    config = {
        "dump": args.dump,
        "k": args.k,
        "q": args.q,
        "n": sorted(set(args.n)),
        "seed": args.seed,
        "fraction": args.split_fraction,
        "format": args.format,
    }
    out_dir = _run_dir("sweep", config, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = reports.sweep_json_dict(result)
    reports.write_json(out_dir / "sweep.json", doc)
    reports.write_csv(out_dir / "sweep.csv", reports.sweep_csv_rows(result))
    (out_dir / "sweep.txt").write_text(reports.sweep_text(result))
    figures.render_sweep(result, out_dir / "sweep.png")
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    elif args.format == "csv":
        sys.stdout.write(
            "\n".join(",".join(str(v) for v in row) for row in reports.sweep_csv_rows(result))
            + "\n"
        )
    else:
        print(reports.sweep_text(result), end="")
    log.info("sweep artifacts in %s", out_dir)
    return EXIT_OK


def cmd_analyze_errors(args) -> int:
    reader = read_dump(args.dump)
    store = load_tag_store(args.store)
    method = _method_from_args(args, required=False) or store.method
    predictions = _load_predictions(
        Path(args.predictions) if args.predictions else None, Path(args.dump)
    )
    if not predictions:
        raise DataError(
            "error analysis needs predictions (a predictions.json next to the dump "
            "or --predictions)"
        )
    if args.image_id not in predictions:
        raise DataError(f"no prediction for image {args.image_id}")
    image = _find_image(reader, args.image_id)
    active = activated_filters(image.layers, method, reader.metadata.layer_filter_counts())
    explanation = explain_image(
        active,
        store,
        image_id=image.image_id,
        true_class=image.class_label,
        predicted_class=predictions[args.image_id],
        class_order=reader.metadata.classes,
    )
    report = error_report(
        explanation, store, args.n, method=method, class_order=reader.metadata.classes
    )
    config = {
        "dump": args.dump,
        "store": args.store,
        "image_id": args.image_id,
        "n": sorted(set(args.n)),
        "method": method.to_json_dict(),
    }
    out_dir = _run_dir("analyze-errors", config, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = reports.error_report_json_dict(report)
    reports.write_json(out_dir / "error_report.json", doc)
    (out_dir / "error_report.txt").write_text(reports.error_report_text(report))
    figures.render_error_report(report, out_dir / "error_report.png")
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    else:
        print(reports.error_report_text(report), end="")
    log.info("error-analysis artifacts in %s", out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_common_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: hash-named run dir)")
    p.add_argument(
        "--format", choices=["json", "csv", "text"], default="text", help="stdout format"
    )


def _add_split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split-fraction", type=float, default=0.8, help="tagging-side fraction")
    p.add_argument("--seed", type=int, required=True, help="split seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filtag",
        description="Tag convolutional filters with the classes that activate them "
        "and explain classifications from the tags",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump-activations", help="run the model and dump conv feature maps")
    p.add_argument("--model", required=True, help="model manifest (model.json)")
    p.add_argument("--images", required=True, help="image directory with images.json")
    p.add_argument("--dump", help="output dump directory")
    p.add_argument("--threads", type=int, default=1)
    _add_common_output(p)
    p.set_defaults(func=cmd_dump_activations)

    p = sub.add_parser("tag", help="build a tag store from a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--store", help="output store path (store.json)")
    p.add_argument("--k", type=int, help="k-best method")
    p.add_argument("--q", type=float, help="q-quantile method")
    _add_split_args(p)
    _add_common_output(p)
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("explain", help="explain one image from a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--k", type=int, help="override the store's selection with k-best")
    p.add_argument("--q", type=float, help="override the store's selection with q-quantile")
    p.add_argument("--predictions", help="predictions.json (default: next to the dump)")
    _add_common_output(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="Hits@n over the held-out test side")
    p.add_argument("--dump", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--n", type=_int_list, default=[1], help="comma-separated n values")
    p.add_argument("--k", type=int, help="override the store's selection with k-best")
    p.add_argument("--q", type=float, help="override the store's selection with q-quantile")
    p.add_argument("--ids", type=_int_list, help="evaluate only these image ids")
    p.add_argument("--predictions", help="predictions.json (default: next to the dump)")
    p.add_argument("--threads", type=int, default=1)
    _add_split_args(p)
    _add_common_output(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate a grid of k and q values")
    p.add_argument("--dump", required=True)
    p.add_argument("--k", type=_int_list, help="comma-separated k values")
    p.add_argument("--q", type=_float_list, help="comma-separated q values")
    p.add_argument("--n", type=_int_list, default=[1], help="comma-separated n values")
    p.add_argument("--predictions", help="predictions.json (default: next to the dump)")
    _add_split_args(p)
    _add_common_output(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-errors", help="report on one misclassified image")
    p.add_argument("--dump", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--image-id", type=int, required=True)
    p.add_argument("--n", type=_int_list, default=[1], help="comma-separated n values")
    p.add_argument("--k", type=int, help="override the store's selection with k-best")
    p.add_argument("--q", type=float, help="override the store's selection with q-quantile")
    p.add_argument("--predictions", help="predictions.json (default: next to the dump)")
    _add_common_output(p)
    p.set_defaults(func=cmd_analyze_errors)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("FILTAG_LOG", "warning").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ContaminationError as exc:
        log.error("contamination: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTAMINATION
    except (FiltagError, ValueError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
