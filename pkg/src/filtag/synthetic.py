"""Synthetic stripe-image scenario with a hand-authored edge-detector model.

Two 3x3 kernels (vertical-edge and horizontal-edge) make the filter/class
mapping known by construction: vertical stripes drive the vertical-edge
filter, horizontal stripes the horizontal-edge filter, diagonal stripes both.
The dense head only discriminates the two axis-aligned classes, so diagonal
images are misclassified by design, giving known ground truth for
end-to-end tests and for the demo data generator
(``python -m filtag.synthetic``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .model import (
    ACT_NONE,
    ACT_RELU,
    PAD_VALID,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelSpec,
    SoftmaxLayer,
)
from .tensor import Tensor3, save_tensor

CLASS_VERTICAL = "vertical"
CLASS_HORIZONTAL = "horizontal"
CLASS_DIAGONAL = "diagonal"
CLASS_ANTIDIAGONAL = "antidiagonal"

STRIPE_CLASSES = (CLASS_VERTICAL, CLASS_HORIZONTAL, CLASS_DIAGONAL, CLASS_ANTIDIAGONAL)

VERTICAL_EDGE_KERNEL = np.array(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=np.float32
)
HORIZONTAL_EDGE_KERNEL = VERTICAL_EDGE_KERNEL.T.copy()

VERTICAL_FILTER = 0
HORIZONTAL_FILTER = 1

IMAGES_MANIFEST_NAME = "images.json"
IMAGES_FORMAT_VERSION = 1


def build_stripe_model(class_names: Sequence[str], image_size: int = 16) -> ModelSpec:
    """Conv(2 edge filters) -> ReLU -> MaxPool -> Dense -> Softmax.

    The dense head averages each filter's pooled map into that class's logit:
    row 0 (vertical) reads the vertical-edge channel, row 1 (horizontal) the
    horizontal-edge channel, any further classes get zero weights and are
    therefore never predicted.
    """
    class_names = tuple(class_names)
    conv = ConvLayer(
        weights=np.stack(
            [VERTICAL_EDGE_KERNEL[None, :, :], HORIZONTAL_EDGE_KERNEL[None, :, :]]
        ),
        bias=np.zeros(2, dtype=np.float32),
        stride=1,
        padding=PAD_VALID,
        activation=ACT_RELU,
    )
    conv_hw = image_size - 2
    pooled_hw = conv_hw // 2
    cells = pooled_hw * pooled_hw
    dense_w = np.zeros((len(class_names), 2 * cells), dtype=np.float32)
    dense_w[0, :cells] = 1.0 / cells  # vertical logit <- vertical-edge channel
    if len(class_names) > 1:
        dense_w[1, cells:] = 1.0 / cells  # horizontal logit <- horizontal-edge channel
    return ModelSpec(
        name=f"stripe-edges-{len(class_names)}class",
        class_names=class_names,
        input_shape=(1, image_size, image_size),
        layers=(
            conv,
            MaxPoolLayer(size=2, stride=2),
            FlattenLayer(),
            DenseLayer(
                weights=dense_w,
                bias=np.zeros(len(class_names), dtype=np.float32),
                activation=ACT_NONE,
            ),
            SoftmaxLayer(),
        ),
    )


def stripe_image(
    kind: str, rng: np.random.Generator, image_size: int = 16, noise: float = 0.05
) -> Tensor3:
    """One stripe image (period-4 bands of 1s and 0s) plus uniform noise."""
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    if kind == CLASS_VERTICAL:
        pattern = (xs // 2) % 2
    elif kind == CLASS_HORIZONTAL:
        pattern = (ys // 2) % 2
    elif kind == CLASS_DIAGONAL:
        pattern = ((xs + ys) // 2) % 2
    elif kind == CLASS_ANTIDIAGONAL:
        pattern = ((xs - ys) // 2) % 2
    else:
        raise ValueError(f"unknown stripe kind {kind!r}")
    values = pattern.astype(np.float64)
    if noise:
        values = values + rng.uniform(-noise, noise, size=values.shape)
    return Tensor3(values[None, :, :].astype(np.float32))


def make_stripe_dataset(
    classes: Sequence[str],
    per_class: int = 40,
    seed: int = 7,
    image_size: int = 16,
    noise: float = 0.05,
    label_noise: float = 0.0,
) -> List[Tuple[int, str, Tensor3]]:
    """Deterministic (image_id, label, image) triples; optional label noise
    relabels a seeded fraction of images with a different class."""
    classes = tuple(classes)
    rng = np.random.default_rng(seed)
    dataset = []
    image_id = 0
    for kind in classes:
        for _ in range(per_class):
            dataset.append([image_id, kind, stripe_image(kind, rng, image_size, noise)])
            image_id += 1
    if label_noise:
        flip = rng.random(len(dataset)) < label_noise
        for idx in np.flatnonzero(flip):
            entry = dataset[idx]
            others = [c for c in classes if c != entry[1]]
            entry[1] = others[int(rng.integers(len(others)))]
    return [tuple(e) for e in dataset]


def write_image_dir(dataset: Sequence[Tuple[int, str, Tensor3]], out_dir) -> Path:
    """Write an image directory in the CLI's input layout: a manifest plus
    one binary tensor file per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id, label, image in sorted(dataset, key=lambda e: e[0]):
        name = f"img-{image_id:05d}.ft3"
        save_tensor(image, out_dir / name)
        entries.append({"image_id": image_id, "class_label": label, "file": name})
    manifest = {"format_version": IMAGES_FORMAT_VERSION, "images": entries}
    (out_dir / IMAGES_MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        description="Generate the stripe-world demo model and image directory"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--classes", type=int, default=2, choices=[2, 3, 4])
    parser.add_argument("--per-class", type=int, default=40)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--noise", type=float, default=0.05)
    parser.add_argument("--label-noise", type=float, default=0.0)
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classes = STRIPE_CLASSES[: args.classes]
    model = build_stripe_model(classes)
    from .model import save_model

    save_model(model, out / "model.json")
    dataset = make_stripe_dataset(
        classes,
        per_class=args.per_class,
        seed=args.seed,
        noise=args.noise,
        label_noise=args.label_noise,
    )
    write_image_dir(dataset, out / "images")
    print(f"wrote {out / 'model.json'} and {len(dataset)} images under {out / 'images'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
