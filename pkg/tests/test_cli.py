"""End-to-end CLI pipeline: exit codes, artifacts, determinism."""

import json
from pathlib import Path

import pytest

from filtag import cli, load_tag_store, read_dump, split_dataset
from filtag.model import save_model
from filtag.synthetic import build_stripe_model, make_stripe_dataset, write_image_dir


def _setup_world(root: Path, classes=("vertical", "horizontal"), per_class=10):
    model = build_stripe_model(classes)
    save_model(model, root / "model.json")
    dataset = make_stripe_dataset(classes, per_class=per_class, seed=7)
    write_image_dir(dataset, root / "images")
    return root


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = _setup_world(tmp_path_factory.mktemp("cliworld"))
    code = cli.main(
        [
            "dump-activations",
            "--model",
            str(root / "model.json"),
            "--images",
            str(root / "images"),
            "--dump",
            str(root / "dump"),
        ]
    )
    assert code == 0
    code = cli.main(
        [
            "tag",
            "--dump",
            str(root / "dump"),
            "--k",
            "1",
            "--seed",
            "3",
            "--store",
            str(root / "store.json"),
        ]
    )
    assert code == 0
    return root


def _manifest_sans_timestamp(path: Path) -> dict:
    doc = json.loads((path / "manifest.json").read_text())
    doc.pop("created_at", None)
    return doc


def test_dump_counts_and_predictions(world):
    manifest = json.loads((world / "dump" / "manifest.json").read_text())
    assert len(manifest["images"]) == 20
    assert len(manifest["layers"]) == 1
    assert manifest["classes"] == ["horizontal", "vertical"]
    preds = json.loads((world / "dump" / "predictions.json").read_text())["predictions"]
    assert len(preds) == 20


def test_dump_rerun_identical_and_thread_independent(world, tmp_path):
    for name, threads in (("again", "1"), ("parallel", "4")):
        code = cli.main(
            [
                "dump-activations",
                "--model",
                str(world / "model.json"),
                "--images",
                str(world / "images"),
                "--dump",
                str(tmp_path / name),
                "--threads",
                threads,
            ]
        )
        assert code == 0
        assert _manifest_sans_timestamp(tmp_path / name) == _manifest_sans_timestamp(world / "dump")
        assert (tmp_path / name / "shard-0000.bin").read_bytes() == (
            world / "dump" / "shard-0000.bin"
        ).read_bytes()
        assert (tmp_path / name / "predictions.json").read_bytes() == (
            world / "dump" / "predictions.json"
        ).read_bytes()


def test_dump_missing_label_names_image(tmp_path, capsys):
    root = _setup_world(tmp_path, per_class=2)
    manifest_path = root / "images" / "images.json"
    doc = json.loads(manifest_path.read_text())
    del doc["images"][1]["class_label"]
    manifest_path.write_text(json.dumps(doc))
    code = cli.main(
        [
            "dump-activations",
            "--model",
            str(root / "model.json"),
            "--images",
            str(root / "images"),
            "--dump",
            str(root / "dump"),
        ]
    )
    assert code == 2
    assert "image 1" in capsys.readouterr().err


def test_tag_store_matches_library(world):
    from filtag import SelectionMethod, build_tag_store
    from filtag.tagging import save_tag_store

    reader = read_dump(world / "dump")
    split = split_dataset(reader.labels(), seed=3)
    expected = build_tag_store(reader, split, SelectionMethod.k_best(1))
    save_tag_store(expected, world / "expected-store.json")
    assert (world / "store.json").read_bytes() == (world / "expected-store.json").read_bytes()


def test_tag_requires_exactly_one_method(world, capsys):
    base = ["tag", "--dump", str(world / "dump"), "--seed", "3"]
    assert cli.main(base) == 2
    assert cli.main(base + ["--k", "1", "--q", "0.5"]) == 2


def test_tag_full_quantile_summary(world, tmp_path, capsys):
    code = cli.main(
        [
            "tag",
            "--dump",
            str(world / "dump"),
            "--q",
            "1.0",
            "--seed",
            "3",
            "--store",
            str(tmp_path / "full.json"),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "every filter tagged by every class" in out


def test_explain_text_ranks_true_class_first(world, capsys):
    reader = read_dump(world / "dump")
    split = split_dataset(reader.labels(), seed=3)
    image_id = next(
        i for i in sorted(split.test_ids()) if reader.labels()[i] == "vertical"
    )
    code = cli.main(
        [
            "explain",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--image-id",
            str(image_id),
        ]
    )
    assert code == 0
    out = capsys.readouterr().out
    ranked = out[out.index("ranked tags:") :]
    assert "1. vertical" in ranked


def test_explain_json_roundtrip(world, capsys):
    from filtag.explain import activated_filters, explain_image
    from filtag.reports import explanation_from_json_dict

    image_id = sorted(read_dump(world / "dump").labels())[0]
    code = cli.main(
        [
            "explain",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--image-id",
            str(image_id),
            "--format",
            "json",
        ]
    )
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    e = explanation_from_json_dict(doc)

    reader = read_dump(world / "dump")
    store = load_tag_store(world / "store.json")
    image = next(im for im in reader.iter_images() if im.image_id == image_id)
    preds = json.loads((world / "dump" / "predictions.json").read_text())["predictions"]
    expected = explain_image(
        activated_filters(image.layers, store.method, reader.metadata.layer_filter_counts()),
        store,
        image_id=image_id,
        true_class=image.class_label,
        predicted_class=preds[str(image_id)],
        class_order=reader.metadata.classes,
    )
    assert e == expected


def test_explain_unknown_image_exits_2(world, capsys):
    code = cli.main(
        [
            "explain",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--image-id",
            "4242",
        ]
    )
    assert code == 2


def test_evaluate_artifacts_and_perfect_hits(world, tmp_path):
    out = tmp_path / "eval"
    code = cli.main(
        [
            "evaluate",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--n",
            "1,2",
            "--seed",
            "3",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    for name in ("report.json", "report.csv", "report.txt", "report.png"):
        assert (out / name).exists()
    doc = json.loads((out / "report.json").read_text())
    assert doc["overall"][0] == {"n": 1, "hits": 4, "total": 4, "rate": 1.0}


def test_evaluate_contamination_exit_codes(world, tmp_path):
    args = [
        "evaluate",
        "--dump",
        str(world / "dump"),
        "--store",
        str(world / "store.json"),
        "--n",
        "1",
        "--out",
        str(tmp_path / "x"),
    ]
    assert cli.main(args + ["--seed", "99"]) == 3
    tagging_id = sorted(split_dataset(read_dump(world / "dump").labels(), seed=3).tagging_ids())[0]
    assert cli.main(args + ["--seed", "3", "--ids", str(tagging_id)]) == 3


def test_evaluate_deterministic_across_runs_and_threads(world, tmp_path):
    outs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        out = tmp_path / name
        code = cli.main(
            [
                "evaluate",
                "--dump",
                str(world / "dump"),
                "--store",
                str(world / "store.json"),
                "--n",
                "1,2",
                "--seed",
                "3",
                "--threads",
                threads,
                "--out",
                str(out),
            ]
        )
        assert code == 0
        outs.append(out)
    for name in ("report.json", "report.csv", "report.txt", "report.png"):
        blobs = {(o / name).read_bytes() for o in outs}
        assert len(blobs) == 1, f"{name} differs across runs/threads"


def test_sweep_singleton_matches_evaluate(world, tmp_path):
    eval_out, sweep_out = tmp_path / "eval", tmp_path / "sweep"
    assert (
        cli.main(
            [
                "evaluate",
                "--dump",
                str(world / "dump"),
                "--store",
                str(world / "store.json"),
                "--n",
                "1,2",
                "--seed",
                "3",
                "--out",
                str(eval_out),
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "sweep",
                "--dump",
                str(world / "dump"),
                "--k",
                "1",
                "--n",
                "1,2",
                "--seed",
                "3",
                "--out",
                str(sweep_out),
            ]
        )
        == 0
    )
    sweep_doc = json.loads((sweep_out / "sweep.json").read_text())
    eval_doc = json.loads((eval_out / "report.json").read_text())
    assert sweep_doc["grid"][0]["report"] == eval_doc
    assert (sweep_out / "sweep.csv").exists()
    assert (sweep_out / "sweep.png").exists()


def test_sweep_needs_grid(world, tmp_path):
    code = cli.main(
        ["sweep", "--dump", str(world / "dump"), "--n", "1", "--seed", "3", "--out", str(tmp_path / "s")]
    )
    assert code == 2


@pytest.fixture(scope="module")
def diag_world(tmp_path_factory):
    root = _setup_world(
        tmp_path_factory.mktemp("cli3"), classes=("vertical", "horizontal", "diagonal")
    )
    assert (
        cli.main(
            [
                "dump-activations",
                "--model",
                str(root / "model.json"),
                "--images",
                str(root / "images"),
                "--dump",
                str(root / "dump"),
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "tag",
                "--dump",
                str(root / "dump"),
                "--k",
                "1",
                "--seed",
                "3",
                "--store",
                str(root / "store.json"),
            ]
        )
        == 0
    )
    return root


def test_analyze_errors_lists_both_stripe_classes(diag_world, tmp_path, capsys):
    preds = json.loads((diag_world / "dump" / "predictions.json").read_text())["predictions"]
    labels = read_dump(diag_world / "dump").labels()
    image_id = next(
        i for i, c in sorted(labels.items()) if c == "diagonal" and preds[str(i)] != "diagonal"
    )
    out = tmp_path / "err"
    code = cli.main(
        [
            "analyze-errors",
            "--dump",
            str(diag_world / "dump"),
            "--store",
            str(diag_world / "store.json"),
            "--image-id",
            str(image_id),
            "--k",
            "2",
            "--n",
            "1,2,3",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    text = capsys.readouterr().out
    assert "vertical" in text and "horizontal" in text
    for name in ("error_report.json", "error_report.txt", "error_report.png"):
        assert (out / name).exists()
    doc = json.loads((out / "error_report.json").read_text())
    listed = {t["class"] for t in doc["ranked_tags"]}
    assert {"vertical", "horizontal"} <= listed


def test_analyze_errors_on_correct_image_is_usage_error(diag_world, tmp_path):
    preds = json.loads((diag_world / "dump" / "predictions.json").read_text())["predictions"]
    labels = read_dump(diag_world / "dump").labels()
    image_id = next(i for i, c in sorted(labels.items()) if preds[str(i)] == c)
    code = cli.main(
        [
            "analyze-errors",
            "--dump",
            str(diag_world / "dump"),
            "--store",
            str(diag_world / "store.json"),
            "--image-id",
            str(image_id),
            "--out",
            str(tmp_path / "err2"),
        ]
    )
    assert code == 2


def test_dump_counts_with_two_conv_layers(tmp_path):
    import numpy as np

    from filtag.model import (
        ConvLayer,
        DenseLayer,
        FlattenLayer,
        ModelSpec,
        SoftmaxLayer,
    )
    from filtag.tensor import save_tensor

    rng = np.random.default_rng(3)
    model = ModelSpec(
        name="two-conv",
        class_names=("a", "b"),
        input_shape=(1, 8, 8),
        layers=(
            ConvLayer(weights=rng.normal(size=(2, 1, 3, 3)).astype(np.float32),
                      bias=np.zeros(2, dtype=np.float32)),
            ConvLayer(weights=rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
                      bias=np.zeros(3, dtype=np.float32)),
            FlattenLayer(),
            DenseLayer(weights=rng.normal(size=(2, 48)).astype(np.float32),
                       bias=np.zeros(2, dtype=np.float32)),
            SoftmaxLayer(),
        ),
    )
    save_model(model, tmp_path / "model.json")
    images_dir = tmp_path / "images"
    images_dir.mkdir()
    entries = []
    for i in range(4):
        name = f"img-{i}.ft3"
        save_tensor(
            __import__("filtag").Tensor3(rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)),
            images_dir / name,
        )
        entries.append({"image_id": i, "class_label": "a" if i % 2 else "b", "file": name})
    (images_dir / "images.json").write_text(
        json.dumps({"format_version": 1, "images": entries})
    )
    assert (
        cli.main(
            [
                "dump-activations",
                "--model",
                str(tmp_path / "model.json"),
                "--images",
                str(images_dir),
                "--dump",
                str(tmp_path / "dump"),
            ]
        )
        == 0
    )
    manifest = json.loads((tmp_path / "dump" / "manifest.json").read_text())
    assert len(manifest["images"]) == 4
    assert [l["layer_id"] for l in manifest["layers"]] == [0, 1]
    assert [l["filter_count"] for l in manifest["layers"]] == [2, 3]
    assert manifest["shards"][0]["record_count"] == 8  # 4 images x 2 layers


def test_default_out_dir_is_config_hashed(world, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code = cli.main(
        [
            "evaluate",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--n",
            "1",
            "--seed",
            "3",
        ]
    )
    assert code == 0
    runs = list((tmp_path / "filtag-runs").iterdir())
    assert len(runs) == 1
    assert runs[0].name.startswith("evaluate-")
    # same config reuses the same directory
    assert cli.main(
        [
            "evaluate",
            "--dump",
            str(world / "dump"),
            "--store",
            str(world / "store.json"),
            "--n",
            "1",
            "--seed",
            "3",
        ]
    ) == 0
    assert len(list((tmp_path / "filtag-runs").iterdir())) == 1
