"""Declarative CNN description and its JSON-manifest + weight-blob file format.

A model file is a JSON manifest (architecture, class names, per-layer shape
metadata, byte offsets) referencing one binary blob of concatenated tensor
blocks in declaration order.  Weights are authored or imported, never trained
here.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import Tensor3, read_tensor, write_tensor

MODEL_FORMAT_VERSION = 1

PAD_VALID = "valid"
PAD_SAME_ZERO = "same-zero"

ACT_RELU = "relu"
ACT_NONE = "none"


def _check_activation(activation: str, where: str) -> None:
    if activation not in (ACT_RELU, ACT_NONE):
        raise FormatError(f"{where}: unknown activation {activation!r}")


def _as_f32(arr, where: str, shape=None) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if shape is not None and out.shape != shape:
        raise ShapeError(f"{where}: expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """2-D cross-correlation layer; one (in_channels, kh, kw) kernel per filter."""

    weights: np.ndarray  # (out_channels, in_channels, kernel_h, kernel_w) float32
    bias: np.ndarray  # (out_channels,) float32
    stride: int = 1
    padding: str = PAD_VALID
    activation: str = ACT_RELU

    kind = "conv"

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        if w.ndim != 4:
            raise ShapeError(f"conv weights need 4 dims (F, C, kh, kw), got {w.shape}")
        b = _as_f32(self.bias, "conv bias", (w.shape[0],))
        if self.stride < 1:
            raise ValueError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding not in (PAD_VALID, PAD_SAME_ZERO):
            raise FormatError(f"conv: unknown padding {self.padding!r}")
        _check_activation(self.activation, "conv")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def kernel_h(self) -> int:
        return int(self.weights.shape[2])

    @property
    def kernel_w(self) -> int:
        return int(self.weights.shape[3])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConvLayer):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
            and (self.stride, self.padding, self.activation)
            == (other.stride, other.padding, other.activation)
        )


@dataclass(frozen=True)
class MaxPoolLayer:
    size: int
    stride: int

    kind = "maxpool"

    def __post_init__(self) -> None:
        if self.size < 1 or self.stride < 1:
            raise ValueError("maxpool size and stride must be >= 1")


@dataclass(frozen=True)
class FlattenLayer:
    kind = "flatten"


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim) float32
    bias: np.ndarray  # (out_dim,) float32
    activation: str = ACT_NONE

    kind = "dense"

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        if w.ndim != 2:
            raise ShapeError(f"dense weights need 2 dims (out, in), got {w.shape}")
        b = _as_f32(self.bias, "dense bias", (w.shape[0],))
        _check_activation(self.activation, "dense")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
            and self.activation == other.activation
        )


@dataclass(frozen=True)
class SoftmaxLayer:
    kind = "softmax"


Layer = Union[ConvLayer, MaxPoolLayer, FlattenLayer, DenseLayer, SoftmaxLayer]


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """Spatial output dims plus the (top, bottom, left, right) zero padding."""
    if padding == PAD_VALID:
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        return (h - kh) // stride + 1, (w - kw) // stride + 1, (0, 0, 0, 0)
    # same-zero: output ceil(dim/stride); preserves H, W at stride 1
    oh = -(-h // stride)
    ow = -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    if kh > h + pad_h or kw > w + pad_w:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input")
    return oh, ow, (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Ordered layer list with a fixed input shape and output class names."""

    name: str
    class_names: tuple
    input_shape: tuple  # (channels, height, width)
    layers: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise FormatError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not self.class_names:
            raise FormatError("model declares no class names")
        if not any(isinstance(l, ConvLayer) for l in self.layers):
            raise FormatError("model needs at least one conv layer")
        softmax_positions = [i for i, l in enumerate(self.layers) if isinstance(l, SoftmaxLayer)]
        if softmax_positions != [len(self.layers) - 1]:
            raise FormatError("model needs exactly one trailing softmax layer")
        shapes = self.layer_shapes()
        if shapes[-1][1] != (len(self.class_names),):
            raise FormatError(
                f"softmax output dim {shapes[-1][1]} != {len(self.class_names)} classes"
            )

    def layer_shapes(self):
        """(input_shape, output_shape) per layer, raising on any inconsistency."""
        shape = self.input_shape
        out = []
        for idx, layer in enumerate(self.layers):
            where = f"layer {idx} ({layer.kind})"
            if isinstance(layer, ConvLayer):
                if len(shape) != 3:
                    raise FormatError(f"{where}: expects a 3-D input, got {shape}")
                c, h, w = shape
                if layer.weights.shape[1] != c:
                    raise FormatError(
                        f"{where}: filter channels {layer.weights.shape[1]} != input channels {c}"
                    )
                try:
                    oh, ow, _ = conv_output_hw(
                        h, w, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding
                    )
                except ShapeError as exc:
                    raise FormatError(f"{where}: {exc}") from exc
                new = (layer.out_channels, oh, ow)
            elif isinstance(layer, MaxPoolLayer):
                if len(shape) != 3:
                    raise FormatError(f"{where}: expects a 3-D input, got {shape}")
                c, h, w = shape
                if layer.size > h or layer.size > w:
                    raise FormatError(f"{where}: window {layer.size} exceeds input {h}x{w}")
                new = (c, (h - layer.size) // layer.stride + 1, (w - layer.size) // layer.stride + 1)
            elif isinstance(layer, FlattenLayer):
                new = (int(np.prod(shape)),)
            elif isinstance(layer, DenseLayer):
                if len(shape) != 1:
                    raise FormatError(f"{where}: expects a flat input, got {shape}")
                if layer.in_dim != shape[0]:
                    raise FormatError(
                        f"{where}: weight in_dim {layer.in_dim} != input dim {shape[0]}"
                    )
                new = (layer.out_dim,)
            elif isinstance(layer, SoftmaxLayer):
                if len(shape) != 1:
                    raise FormatError(f"{where}: expects a flat input, got {shape}")
                new = shape
            else:
                raise FormatError(f"{where}: unknown layer kind")
            out.append((shape, new))
            shape = new
        return out

    def conv_layers(self):
        """Conv layers with their ordinal layer_id (0-based over conv layers only)."""
        return [(m, l) for m, l in enumerate(l for l in self.layers if isinstance(l, ConvLayer))]

    def conv_filter_counts(self) -> dict:
        return {m: l.out_channels for m, l in self.conv_layers()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.class_names == other.class_names
            and self.input_shape == other.input_shape
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )


def _weight_tensors(layer: Layer):
    """Tensor blocks serialized for a layer, in declaration order."""
    if isinstance(layer, ConvLayer):
        blocks = [Tensor3(layer.weights[f]) for f in range(layer.out_channels)]
        blocks.append(Tensor3(layer.bias.reshape(1, 1, -1)))
        return blocks
    if isinstance(layer, DenseLayer):
        return [
            Tensor3(layer.weights.reshape(1, *layer.weights.shape)),
            Tensor3(layer.bias.reshape(1, 1, -1)),
        ]
    return []


def save_model(model: ModelSpec, path) -> None:
    """Write ``path`` (JSON manifest) plus a sibling ``*.weights.bin`` blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights_name = path.stem + ".weights.bin"
    blob = io.BytesIO()
    manifest_layers = []
    shapes = model.layer_shapes()
    for idx, layer in enumerate(model.layers):
        entry = {"kind": layer.kind}
        if isinstance(layer, ConvLayer):
            entry.update(
                out_channels=layer.out_channels,
                kernel_h=layer.kernel_h,
                kernel_w=layer.kernel_w,
                stride=layer.stride,
                padding=layer.padding,
                activation=layer.activation,
            )
        elif isinstance(layer, MaxPoolLayer):
            entry.update(size=layer.size, stride=layer.stride)
        elif isinstance(layer, DenseLayer):
            entry.update(out_dim=layer.out_dim, activation=layer.activation)
        tensors = _weight_tensors(layer)
        if tensors:
            entry["weights_offset"] = blob.tell()
            for t in tensors:
                write_tensor(t, blob)
            entry["weights_size"] = blob.tell() - entry["weights_offset"]
        entry["input_shape"] = list(shapes[idx][0])
        entry["output_shape"] = list(shapes[idx][1])
        manifest_layers.append(entry)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "model_name": model.name,
        "class_names": list(model.class_names),
        "input_shape": {
            "channels": model.input_shape[0],
            "height": model.input_shape[1],
            "width": model.input_shape[2],
        },
        "weights_file": weights_name,
        "layers": manifest_layers,
    }
    (path.parent / weights_name).write_bytes(blob.getvalue())
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _read_layer_weights(blob: io.BytesIO, entry: dict, where: str, n_tensors: int):
    blob.seek(entry["weights_offset"])
    tensors = []
    for _ in range(n_tensors):
        try:
            tensors.append(read_tensor(blob))
        except FormatError as exc:
            raise FormatError(f"{where}: {exc}") from exc
    got = blob.tell() - entry["weights_offset"]
    if got != entry["weights_size"]:
        raise FormatError(
            f"{where}: declared weight bytes {entry['weights_size']}, found {got}"
        )
    return tensors


def load_model(path) -> ModelSpec:
    """Parse a model manifest + blob; ``load_model(save_model(m)) == m`` bit-exactly."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"model manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {manifest.get('format_version')!r}")
    for key in ("model_name", "class_names", "input_shape", "weights_file", "layers"):
        if key not in manifest:
            raise FormatError(f"model manifest missing key {key!r}")
    blob_path = path.parent / manifest["weights_file"]
    if not blob_path.exists():
        raise FormatError(f"weights blob {manifest['weights_file']!r} not found")
    blob = io.BytesIO(blob_path.read_bytes())
    ishape = manifest["input_shape"]
    layers = []
    for idx, entry in enumerate(manifest["layers"]):
        kind = entry.get("kind")
        where = f"layer {idx} ({kind})"
        if kind == "conv":
            n_filters = int(entry["out_channels"])
            tensors = _read_layer_weights(blob, entry, where, n_filters + 1)
            filters, bias_t = tensors[:-1], tensors[-1]
            for f, t in enumerate(filters):
                if (t.height, t.width) != (entry["kernel_h"], entry["kernel_w"]):
                    raise FormatError(
                        f"{where}: filter {f} block is {t.height}x{t.width}, "
                        f"declared {entry['kernel_h']}x{entry['kernel_w']}"
                    )
            weights = np.stack([t.values for t in filters])
            layers.append(
                ConvLayer(
                    weights=weights,
                    bias=bias_t.flat,
                    stride=int(entry["stride"]),
                    padding=entry["padding"],
                    activation=entry["activation"],
                )
            )
        elif kind == "maxpool":
            layers.append(MaxPoolLayer(size=int(entry["size"]), stride=int(entry["stride"])))
        elif kind == "flatten":
            layers.append(FlattenLayer())
        elif kind == "dense":
            tensors = _read_layer_weights(blob, entry, where, 2)
            weights = tensors[0].values[0]
            if weights.shape[0] != entry["out_dim"]:
                raise FormatError(
                    f"{where}: weight rows {weights.shape[0]} != declared out_dim {entry['out_dim']}"
                )
            layers.append(
                DenseLayer(weights=weights, bias=tensors[1].flat, activation=entry["activation"])
            )
        elif kind == "softmax":
            layers.append(SoftmaxLayer())
        else:
            raise FormatError(f"layer {idx}: unknown layer kind {kind!r}")
    model = ModelSpec(
        name=manifest["model_name"],
        class_names=tuple(manifest["class_names"]),
        input_shape=(ishape["channels"], ishape["height"], ishape["width"]),
        layers=tuple(layers),
    )
    # declared per-layer shapes must agree with recomputation
    shapes = model.layer_shapes()
    for idx, entry in enumerate(manifest["layers"]):
        declared = tuple(entry["output_shape"])
        if declared != tuple(shapes[idx][1]):
            raise FormatError(
                f"layer {idx} ({entry['kind']}): declared output shape {declared} "
                f"!= computed {tuple(shapes[idx][1])}"
            )
    return model
