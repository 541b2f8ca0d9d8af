"""JSON, CSV, and text renderings of explanations and evaluation reports.

All writers are deterministic: fixed key order, ``\\n`` line endings, floats
via their shortest round-trip decimals.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

from .explain import (
    ActivatedFilter,
    ErrorReport,
    Explanation,
    HitsReport,
    RankedTag,
    SweepResult,
)
from .tagging import SelectionMethod
from .tensor import FilterKey

REPORT_FORMAT_VERSION = 1

CSV_COLUMNS = ["method", "param", "n", "class", "hits", "total", "rate"]
OVERALL = "overall"  # class column value for the all-classes row


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# Hits reports


def report_json_dict(r: HitsReport) -> dict:
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "method": r.method.to_json_dict(),
        "n_values": list(r.n_values),
        "empty": r.empty,
        "total_images": r.total_images,
        "overall": [
            {"n": n, "hits": hr.hits, "total": hr.total, "rate": hr.rate}
            for n, hr in sorted(r.overall.items())
        ],
        "per_class": [
            {
                "class": c,
                "results": [
                    {"n": n, "hits": hr.hits, "total": hr.total, "rate": hr.rate}
                    for n, hr in sorted(rates.items())
                ],
            }
            for c, rates in r.per_class.items()
        ],
        "per_class_accuracy": None,
        "correlation": None,
    }
    if r.per_class_accuracy is not None:
        doc["per_class_accuracy"] = [
            {"class": c, "correct": a.hits, "total": a.total, "accuracy": a.rate}
            for c, a in r.per_class_accuracy.items()
        ]
        doc["correlation"] = {
            "statistic": "spearman",
            "classes": len(r.per_class_accuracy),
            "value": r.correlation,
        }
    return doc


def report_csv_rows(r: HitsReport) -> list:
    rows = [list(CSV_COLUMNS)]
    kind = r.method.kind
    param = r.method.param
    for n in r.n_values:
        hr = r.overall[n]
        rows.append([kind, param, n, OVERALL, hr.hits, hr.total, hr.rate])
        for c, rates in r.per_class.items():
            hr = rates[n]
            rows.append([kind, param, n, c, hr.hits, hr.total, hr.rate])
    return rows


def report_text(r: HitsReport) -> str:
    lines = [f"hits report: {r.method.label()}, {r.total_images} images"]
    if r.empty:
        lines.append("  (empty test set)")
    for n in r.n_values:
        hr = r.overall[n]
        lines.append(f"  Hits@{n}: {hr.rate:.4f} ({hr.hits}/{hr.total})")
    for c, rates in r.per_class.items():
        parts = [f"Hits@{n}={rates[n].rate:.4f}" for n in r.n_values]
        if r.per_class_accuracy is not None:
            acc = r.per_class_accuracy[c]
            parts.append(f"accuracy={acc.rate:.4f}")
        lines.append(f"  class {c}: " + ", ".join(parts))
    if r.per_class_accuracy is not None:
        value = "undefined" if r.correlation is None else f"{r.correlation:.4f}"
        lines.append(f"  spearman(hit rate @ n={r.n_values[-1]}, accuracy) = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sweep tables


def sweep_json_dict(s: SweepResult) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "n_values": list(s.n_values),
        "grid": [
            {"method": method.to_json_dict(), "report": report_json_dict(report)}
            for method, report in s.entries
        ],
    }


def sweep_csv_rows(s: SweepResult) -> list:
    rows = [list(CSV_COLUMNS)]
    for _, report in s.entries:
        rows.extend(report_csv_rows(report)[1:])
    return rows


def sweep_text(s: SweepResult) -> str:
    lines = [f"sweep over {len(s.entries)} grid points, n = {list(s.n_values)}"]
    for method, report in s.entries:
        rates = ", ".join(f"Hits@{n}={report.overall[n].rate:.4f}" for n in s.n_values)
        lines.append(f"  {method.label()}: {rates}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Explanations


def explanation_json_dict(e: Explanation, method: Optional[SelectionMethod] = None) -> dict:
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "image_id": e.image_id,
        "true_class": e.true_class,
        "predicted_class": e.predicted_class,
        "activated": [
            {"layer_id": af.key.layer_id, "filter_index": af.key.filter_index, "score": af.score}
            for af in e.activated
        ],
        "ranked_tags": [
            {"class": t.class_label, "frequency": t.frequency, "score_sum": t.score_sum}
            for t in e.ranked_tags
        ],
    }
    if method is not None:
        doc["method"] = method.to_json_dict()
    return doc


def explanation_from_json_dict(doc: dict) -> Explanation:
    return Explanation(
        image_id=int(doc["image_id"]),
        true_class=doc["true_class"],
        predicted_class=doc["predicted_class"],
        activated=tuple(
            ActivatedFilter(
                key=FilterKey(int(a["layer_id"]), int(a["filter_index"])),
                score=float(a["score"]),
            )
            for a in doc["activated"]
        ),
        ranked_tags=tuple(
            RankedTag(
                class_label=t["class"],
                frequency=int(t["frequency"]),
                score_sum=float(t["score_sum"]),
            )
            for t in doc["ranked_tags"]
        ),
    )


def explanation_text(e: Explanation) -> str:
    lines = [f"image {e.image_id} (true class: {e.true_class})"]
    if e.predicted_class is not None:
        lines.append(f"predicted: {e.predicted_class}")
    lines.append("activated filters:")
    for af in e.activated:
        lines.append(
            f"  layer {af.key.layer_id} filter {af.key.filter_index}  score {af.score:.6f}"
        )
    lines.append("ranked tags:")
    if not e.ranked_tags:
        lines.append("  (none: no activated filter carries a tag)")
    for i, t in enumerate(e.ranked_tags, start=1):
        lines.append(
            f"  {i}. {t.class_label}  frequency {t.frequency}  score sum {t.score_sum:.6f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Misclassification reports


def _class_summary_dict(s) -> dict:
    return {
        "class": s.class_label,
        "rank": s.rank,
        "frequency": s.frequency,
        "score_sum": s.score_sum,
        "filters": [
            {"layer_id": af.key.layer_id, "filter_index": af.key.filter_index, "score": af.score}
            for af in s.filters
        ],
    }


def error_report_json_dict(r: ErrorReport) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "image_id": r.image_id,
        "true_class": r.true_class,
        "predicted_class": r.predicted_class,
        "method": r.method.to_json_dict(),
        "n_values": list(r.n_values),
        "hits": [{"n": n, "hit": r.hits[n]} for n in r.n_values],
        "true": _class_summary_dict(r.true_summary),
        "predicted": _class_summary_dict(r.predicted_summary),
        "shared": {
            "filters": [
                {"layer_id": k.layer_id, "filter_index": k.filter_index}
                for k in r.shared_filters
            ],
            "classes": list(r.shared_classes),
        },
        "ranked_tags": [
            {"class": t.class_label, "frequency": t.frequency, "score_sum": t.score_sum}
            for t in r.ranked_tags
        ],
    }


def _class_summary_text(label: str, s) -> list:
    rank = "not ranked" if s.rank is None else f"rank {s.rank}"
    lines = [f"{label} class {s.class_label!r}: {rank}, frequency {s.frequency}"]
    if s.filters:
        for af in s.filters:
            lines.append(
                f"    activated via layer {af.key.layer_id} filter {af.key.filter_index}"
                f" (score {af.score:.6f})"
            )
    else:
        lines.append("    no activated filter carries this tag")
    return lines


def error_report_text(r: ErrorReport) -> str:
    lines = [
        f"misclassification report for image {r.image_id}",
        f"selection: {r.method.label()}",
    ]
    lines += _class_summary_text("true", r.true_summary)
    lines += _class_summary_text("predicted", r.predicted_summary)
    hits = ", ".join(f"Hits@{n}={'yes' if r.hits[n] else 'no'}" for n in r.n_values)
    lines.append(f"hits: {hits}")
    if r.shared_filters:
        keys = ", ".join(f"layer {k.layer_id} filter {k.filter_index}" for k in r.shared_filters)
        lines.append(f"filters tagged with both classes: {keys}")
        lines.append(f"classes on those filters: {', '.join(r.shared_classes)}")
    else:
        lines.append("no activated filter is tagged with both classes")
    lines.append("full tag ranking:")
    for i, t in enumerate(r.ranked_tags, start=1):
        lines.append(f"  {i}. {t.class_label}  frequency {t.frequency}")
    return "\n".join(lines) + "\n"
