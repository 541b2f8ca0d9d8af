"""Serialization round-trips and figure rendering."""

import json

import pytest

from filtag import (
    SelectionMethod,
    build_tag_store,
    error_report,
    evaluate,
    read_dump,
    split_dataset,
    sweep,
)
from filtag import figures, reports
from filtag.explain import activated_filters, explain_image
from conftest import build_stripe_dump

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    path = tmp_path_factory.mktemp("reports") / "dump"
    dump_path, predictions = build_stripe_dump(
        path, classes=("vertical", "horizontal", "diagonal"), per_class=8, seed=7
    )
    reader = read_dump(dump_path)
    split = split_dataset(reader.labels(), seed=3)
    store = build_tag_store(reader, split, SelectionMethod.k_best(1))
    report = evaluate(reader, store, split, n_values=[1, 2, 3], predictions=predictions)
    return dump_path, predictions, split, store, report


def test_report_json_shape(world):
    *_, report = world
    doc = reports.report_json_dict(report)
    assert doc["method"] == {"kind": "k_best", "k": 1}
    assert doc["n_values"] == [1, 2, 3]
    assert doc["correlation"]["statistic"] == "spearman"
    assert len(doc["per_class"]) == 3
    parsed = json.loads(json.dumps(doc))
    assert parsed == doc


def test_report_csv_rows(world):
    *_, report = world
    rows = reports.report_csv_rows(report)
    assert rows[0] == ["method", "param", "n", "class", "hits", "total", "rate"]
    overall = [r for r in rows[1:] if r[3] == "overall"]
    assert len(overall) == 3  # one per n
    assert all(r[0] == "k_best" and r[1] == 1 for r in rows[1:])
    # hits never exceed totals, rates consistent
    for r in rows[1:]:
        assert r[4] <= r[5]
        assert r[6] == pytest.approx(r[4] / r[5] if r[5] else 0.0)


def test_report_text_mentions_rates(world):
    *_, report = world
    text = reports.report_text(report)
    assert "Hits@1" in text and "spearman" in text


def test_explanation_json_roundtrip(world):
    dump_path, predictions, split, store, _ = world
    reader = read_dump(dump_path)
    image = next(iter(reader.iter_images()))
    active = activated_filters(
        image.layers, store.method, reader.metadata.layer_filter_counts()
    )
    e = explain_image(
        active,
        store,
        image_id=image.image_id,
        true_class=image.class_label,
        predicted_class=predictions[image.image_id],
        class_order=reader.metadata.classes,
    )
    doc = json.loads(json.dumps(reports.explanation_json_dict(e, store.method)))
    assert reports.explanation_from_json_dict(doc) == e
    text = reports.explanation_text(e)
    assert f"image {image.image_id}" in text


def test_error_report_serialization(world):
    dump_path, predictions, split, store, _ = world
    reader = read_dump(dump_path)
    image = next(
        im
        for im in reader.iter_images()
        if im.class_label == "diagonal" and predictions[im.image_id] != "diagonal"
    )
    active = activated_filters(
        image.layers, SelectionMethod.k_best(2), reader.metadata.layer_filter_counts()
    )
    e = explain_image(
        active,
        store,
        image_id=image.image_id,
        true_class=image.class_label,
        predicted_class=predictions[image.image_id],
        class_order=reader.metadata.classes,
    )
    rep = error_report(e, store, n_values=[1, 2], class_order=reader.metadata.classes)
    doc = reports.error_report_json_dict(rep)
    assert doc["true"]["class"] == "diagonal"
    assert doc["predicted"]["class"] == predictions[image.image_id]
    text = reports.error_report_text(rep)
    assert "misclassification report" in text
    assert "diagonal" in text
    figures.render_error_report(rep, world_path := dump_path.parent / "err.png")
    assert world_path.read_bytes()[:8] == PNG_MAGIC


def test_hits_figure_rendering(world, tmp_path):
    *_, report = world
    figures.render_hits_report(report, tmp_path / "hits.png")
    data = (tmp_path / "hits.png").read_bytes()
    assert data[:8] == PNG_MAGIC and len(data) > 1000


def test_sweep_serialization_and_figure(world, tmp_path):
    dump_path, predictions, split, store, _ = world
    result = sweep(
        read_dump(dump_path),
        split,
        [SelectionMethod.k_best(1), SelectionMethod.q_quantile(0.5)],
        [1, 2],
        predictions=predictions,
    )
    doc = reports.sweep_json_dict(result)
    assert len(doc["grid"]) == 2
    rows = reports.sweep_csv_rows(result)
    assert rows[0] == ["method", "param", "n", "class", "hits", "total", "rate"]
    assert {r[0] for r in rows[1:]} == {"k_best", "q_quantile"}
    figures.render_sweep(result, tmp_path / "sweep.png")
    assert (tmp_path / "sweep.png").read_bytes()[:8] == PNG_MAGIC


def test_figures_deterministic(world, tmp_path):
    *_, report = world
    figures.render_hits_report(report, tmp_path / "a.png")
    figures.render_hits_report(report, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
