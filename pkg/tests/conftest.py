"""Shared builders for synthetic activation datasets and dumps."""

from __future__ import annotations

import numpy as np
import pytest

from filtag import ActivationRecord, Tensor3, write_dump


def random_activation_dataset(rng, quantize=False):
    """A small random labeled activation dataset for pipeline oracle tests.

    Returns (labels, layer_shapes, images) where images is a list of
    (image_id, label, {layer_id: raw ndarray (filters, h, w) >= 0}).
    Quantized datasets snap activations to a coarse grid so score ties
    actually occur and exercise the tie rules.
    """
    n_classes = int(rng.integers(1, 6))
    classes = [f"class{c}" for c in range(n_classes)]
    n_images = int(rng.integers(n_classes, 21))
    n_layers = int(rng.integers(1, 3))
    layer_shapes = {}
    for m in range(n_layers):
        layer_shapes[m] = (
            int(rng.integers(1, 17)),
            int(rng.integers(1, 7)),
            int(rng.integers(1, 7)),
        )
    images = []
    labels = {}
    for image_id in range(n_images):
        # every class gets at least one image, the rest are random
        label = classes[image_id] if image_id < n_classes else classes[int(rng.integers(n_classes))]
        labels[image_id] = label
        layers = {}
        for m, shape in layer_shapes.items():
            raw = rng.uniform(0.0, 4.0, size=shape)
            if quantize:
                raw = np.round(raw * 2.0) / 2.0
            layers[m] = raw.astype(np.float32)
        images.append((image_id, label, layers))
    return labels, layer_shapes, images


def dataset_to_dump(images, path, model_name="random", created_at="2000-01-01T00:00:00+00:00"):
    records = [
        ActivationRecord(
            image_id=image_id, class_label=label, layer_id=m, feature_maps=Tensor3(raw)
        )
        for image_id, label, layers in images
        for m, raw in layers.items()
    ]
    return write_dump(records, path, model_name=model_name, created_at=created_at)


def build_stripe_dump(
    path,
    classes=("vertical", "horizontal"),
    per_class=10,
    seed=7,
    label_noise=0.0,
    created_at="2000-01-01T00:00:00+00:00",
):
    """Forward the stripe model over a generated dataset into a dump.

    Returns (dump_path, predictions) where predictions maps image_id to the
    model's argmax class.
    """
    from filtag import forward
    from filtag.synthetic import build_stripe_model, make_stripe_dataset

    model = build_stripe_model(classes)
    dataset = make_stripe_dataset(classes, per_class=per_class, seed=seed, label_noise=label_noise)
    records = []
    predictions = {}
    for image_id, label, image in dataset:
        trace = forward(model, image)
        predictions[image_id] = trace.predicted_class
        for m, out in enumerate(trace.conv_outputs):
            records.append(
                ActivationRecord(
                    image_id=image_id, class_label=label, layer_id=m, feature_maps=out
                )
            )
    write_dump(records, path, model_name=model.name, created_at=created_at)
    return path, predictions


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
