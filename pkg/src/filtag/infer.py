"""Minimal deterministic CNN forward pass.

Convolution follows deep-learning convention: cross-correlation, no kernel
flip.  Feature maps handed downstream are captured after each conv layer's
nonlinearity, so dumped activations are nonnegative.  All inner products
accumulate in float64 and are evaluated single-threaded per image
(``np.einsum`` without ``optimize``), so a forward pass is bit-reproducible
regardless of how many images run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import (
    ACT_RELU,
    PAD_SAME_ZERO,
    PAD_VALID,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelSpec,
    SoftmaxLayer,
    conv_output_hw,
)
from .tensor import Tensor3


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Per-conv-layer feature maps (post-activation) plus the class posterior."""

    conv_outputs: tuple  # one Tensor3 per conv layer
    probabilities: np.ndarray  # float64, sums to 1
    predicted_class: str

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ForwardTrace):
            return NotImplemented
        return (
            self.conv_outputs == other.conv_outputs
            and self.probabilities.tobytes() == other.probabilities.tobytes()
            and self.predicted_class == other.predicted_class
        )


def conv2d(
    t: Tensor3,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: str = PAD_VALID,
) -> Tensor3:
    """Cross-correlate ``t`` with ``weights`` (F, C, kh, kw); float64 accumulation.

    "valid" output dims are floor((H-kh)/stride)+1; "same-zero" zero-pads so
    stride-1 output preserves H and W.
    """
    weights = np.asarray(weights, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if weights.ndim != 4:
        raise ShapeError(f"conv weights need 4 dims (F, C, kh, kw), got {weights.shape}")
    if weights.shape[1] != t.channels:
        raise ShapeError(
            f"filter channels {weights.shape[1]} != input channels {t.channels}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding not in (PAD_VALID, PAD_SAME_ZERO):
        raise ValueError(f"unknown padding {padding!r}")
    kh, kw = int(weights.shape[2]), int(weights.shape[3])
    oh, ow, (pt, pb, pl, pr) = conv_output_hw(t.height, t.width, kh, kw, stride, padding)
    x = t.values.astype(np.float64)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    # windows: (C, oh, ow, kh, kw) via stride tricks, then one einsum per image
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]
    out = np.einsum("chwij,fcij->fhw", win, weights.astype(np.float64))
    out += bias.astype(np.float64)[:, None, None]
    return Tensor3(out.astype(np.float32))


def relu(t: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(t.values, np.float32(0.0)))


def maxpool2d(t: Tensor3, size: int, stride: int) -> Tensor3:
    """Per-channel window maximum; output dims floor((H-size)/stride)+1."""
    if size < 1 or stride < 1:
        raise ValueError("maxpool size and stride must be >= 1")
    if size > t.height or size > t.width:
        raise ShapeError(f"pool window {size} exceeds input {t.height}x{t.width}")
    win = np.lib.stride_tricks.sliding_window_view(t.values, (size, size), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]
    return Tensor3(win.max(axis=(3, 4)))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax in float64; invariant to constant shifts."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def forward(model: ModelSpec, image: Tensor3) -> ForwardTrace:
    """Run the model on one image, capturing post-activation conv feature maps."""
    if (image.channels, image.height, image.width) != model.input_shape:
        raise ShapeError(
            f"image shape {(image.channels, image.height, image.width)} "
            f"!= model input {model.input_shape}"
        )
    current: object = image
    conv_outputs = []
    probabilities = None
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            out = conv2d(current, layer.weights, layer.bias, layer.stride, layer.padding)
            if layer.activation == ACT_RELU:
                out = relu(out)
            conv_outputs.append(out)
            current = out
        elif isinstance(layer, MaxPoolLayer):
            current = maxpool2d(current, layer.size, layer.stride)
        elif isinstance(layer, FlattenLayer):
            current = current.flat.astype(np.float32)
        elif isinstance(layer, DenseLayer):
            vec = np.asarray(current, dtype=np.float64)
            out = np.einsum("oi,i->o", layer.weights.astype(np.float64), vec)
            out += layer.bias.astype(np.float64)
            if layer.activation == ACT_RELU:
                out = np.maximum(out, 0.0)
            current = out.astype(np.float32)
        elif isinstance(layer, SoftmaxLayer):
            probabilities = softmax(np.asarray(current, dtype=np.float64))
        else:  # pragma: no cover - ModelSpec.validate rejects unknown kinds
            raise ShapeError(f"layer {idx}: unknown layer kind")
    probabilities.flags.writeable = False
    predicted = model.class_names[int(np.argmax(probabilities))]
    return ForwardTrace(
        conv_outputs=tuple(conv_outputs),
        probabilities=probabilities,
        predicted_class=predicted,
    )
