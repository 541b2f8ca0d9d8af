"""Filter tagging: per-image layer scaling, filter/class activation means,
and tag selection by k-best or q-quantile.

The pipeline per image and conv layer: scale all of the layer's activations
jointly to [0, 1] (min-max over every filter's map pooled, so no image is
overrepresented by overall high activations), average each filter's scaled
feature map into a per-image filter score, then average those scores over a
class's tagging images into the class/filter affinity matrix.  Per class and
layer, the top filters by affinity get tagged with that class.

Tie-breaking is total everywhere: higher score first, then ascending filter
index, then ascending class id, so stores are byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError, IncompleteDumpError
from .ingest import DatasetSplit, DumpReader
from .tensor import FilterKey, Tensor3

STORE_FORMAT_VERSION = 1

KIND_K_BEST = "k_best"
KIND_Q_QUANTILE = "q_quantile"


def f32_shortest(x: float) -> float:
    """The float64 whose repr is the shortest round-trip decimal of float32(x)."""
    return float(str(np.float32(x)))


def quantile_count(q: float, n_filters: int) -> int:
    """Number of filters the q-quantile method selects: ceil(q * n).

    q is interpreted as the decimal the caller wrote (via its shortest
    repr), so e.g. q=0.3 with 10 filters gives exactly 3, not a float
    artifact of 4.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    if n_filters < 1:
        raise ValueError("layer has no filters")
    return min(n_filters, max(1, math.ceil(Fraction(str(q)) * n_filters)))


@dataclass(frozen=True)
class SelectionMethod:
    """k-best (top k filters per class/layer) or q-quantile (top ceil(q*|I_m|))."""

    kind: str
    k: Optional[int] = None
    q: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind == KIND_K_BEST:
            if self.k is None or self.k < 1 or self.q is not None:
                raise ValueError(f"k-best needs k >= 1, got k={self.k}, q={self.q}")
        elif self.kind == KIND_Q_QUANTILE:
            if self.q is None or not 0.0 < self.q <= 1.0 or self.k is not None:
                raise ValueError(f"q-quantile needs 0 < q <= 1, got q={self.q}, k={self.k}")
        else:
            raise ValueError(f"unknown selection kind {self.kind!r}")

    @classmethod
    def k_best(cls, k: int) -> "SelectionMethod":
        return cls(kind=KIND_K_BEST, k=int(k))

    @classmethod
    def q_quantile(cls, q: float) -> "SelectionMethod":
        return cls(kind=KIND_Q_QUANTILE, q=float(q))

    def count_for(self, n_filters: int) -> int:
        if self.kind == KIND_K_BEST:
            return min(self.k, n_filters)
        return quantile_count(self.q, n_filters)

    @property
    def param(self) -> float:
        return self.k if self.kind == KIND_K_BEST else self.q

    def label(self) -> str:
        if self.kind == KIND_K_BEST:
            return f"k-best(k={self.k})"
        return f"q-quantile(q={self.q})"

    def to_json_dict(self) -> dict:
        if self.kind == KIND_K_BEST:
            return {"kind": self.kind, "k": self.k}
        return {"kind": self.kind, "q": self.q}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SelectionMethod":
        kind = d.get("kind")
        if kind == KIND_K_BEST:
            return cls.k_best(d["k"])
        if kind == KIND_Q_QUANTILE:
            return cls.q_quantile(d["q"])
        raise FormatError(f"unknown selection method kind {kind!r}")


@dataclass(frozen=True)
class ScaledLayerActivations:
    """One image's conv-layer output with all activations min-max scaled to [0, 1]."""

    image_id: int
    layer_id: int
    maps: Tensor3


@dataclass(frozen=True)
class FilterImageScore:
    """Mean scaled activation of one filter's feature map for one image."""

    image_id: int
    key: FilterKey
    score: float


@dataclass(frozen=True, eq=False)
class ClassActivationMatrix:
    """Per-layer class/filter affinities: mean per-image filter score by class."""

    layer_id: int
    classes: Tuple[str, ...]
    matrix: np.ndarray  # float64, (len(classes), n_filters)
    image_counts: Tuple[int, ...]

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if m.ndim != 2 or m.shape[0] != len(self.classes):
            raise DataError(f"matrix shape {m.shape} inconsistent with {len(self.classes)} classes")
        if len(self.image_counts) != len(self.classes) or any(c <= 0 for c in self.image_counts):
            raise DataError("every matrix row needs a positive image count")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n_filters(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, class_label: str) -> np.ndarray:
        return self.matrix[self.classes.index(class_label)]


def scale_values(values: np.ndarray) -> np.ndarray:
    """Min-max scale a float32 volume jointly over all its entries.

    A constant input (typically an all-zero post-ReLU layer) carries no
    pattern evidence and maps to all zeros.
    """
    if values.size == 0:
        return values.copy()
    mn = float(values.min())
    mx = float(values.max())
    if mx == mn:
        return np.zeros_like(values)
    return ((values.astype(np.float64) - mn) / (mx - mn)).astype(np.float32)


def scale_layer(raw: Tensor3, image_id: int = 0, layer_id: int = 0) -> ScaledLayerActivations:
    """Scale one image's layer output to [0, 1] over all filters pooled."""
    return ScaledLayerActivations(
        image_id=image_id, layer_id=layer_id, maps=Tensor3(scale_values(raw.values))
    )


def scaled_feature_map_means(raw: Tensor3) -> np.ndarray:
    """Per-filter mean of the scaled feature maps, float64, shape (n_filters,)."""
    if raw.height * raw.width == 0:
        raise ValueError("empty feature map")
    scaled = scale_values(raw.values)
    return np.mean(scaled, axis=(1, 2), dtype=np.float64)


def feature_map_scores(s: ScaledLayerActivations) -> np.ndarray:
    """All per-filter means of an already-scaled layer, float64."""
    if s.maps.height * s.maps.width == 0:
        raise ValueError("empty feature map")
    return np.mean(s.maps.values, axis=(1, 2), dtype=np.float64)


def feature_map_score(s: ScaledLayerActivations, i: int) -> FilterImageScore:
    """Mean scaled activation of filter i's feature map."""
    if not 0 <= i < s.maps.channels:
        raise IndexError(f"filter {i} out of range for {s.maps.channels} filters")
    return FilterImageScore(
        image_id=s.image_id,
        key=FilterKey(layer_id=s.layer_id, filter_index=i),
        score=float(feature_map_scores(s)[i]),
    )


class ClassMeanAccumulator:
    """Streaming one-pass mean of per-image filter scores by (class, layer).

    The fold is a running (sum, count) per cell; feeding images in a canonical
    order makes the result bit-reproducible across worker counts.
    """

    def __init__(self, classes: Sequence[str], layer_filter_counts: Mapping[int, int]):
        self.classes = tuple(classes)
        self._class_index = {c: i for i, c in enumerate(self.classes)}
        self._filter_counts = dict(layer_filter_counts)
        self._sums = {
            m: np.zeros((len(self.classes), n), dtype=np.float64)
            for m, n in self._filter_counts.items()
        }
        self._counts = {
            m: np.zeros(len(self.classes), dtype=np.int64) for m in self._filter_counts
        }

    def add_image_layer(self, layer_id: int, class_label: str, scores: np.ndarray) -> None:
        if class_label not in self._class_index:
            raise DataError(f"unknown class label {class_label!r}")
        if layer_id not in self._sums:
            raise DataError(f"unknown layer {layer_id}")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (self._filter_counts[layer_id],):
            raise DataError(
                f"layer {layer_id}: expected {self._filter_counts[layer_id]} scores, "
                f"got shape {scores.shape}"
            )
        c = self._class_index[class_label]
        self._sums[layer_id][c] += scores
        self._counts[layer_id][c] += 1

    def finalize(self) -> Dict[int, ClassActivationMatrix]:
        return _finalize_matrices(self.classes, self._sums, self._counts)


def _finalize_matrices(classes, sums, counts) -> Dict[int, ClassActivationMatrix]:
    out = {}
    for layer_id in sorted(sums):
        layer_counts = counts[layer_id]
        present = np.flatnonzero(layer_counts)
        if present.size == 0:
            continue
        matrix = sums[layer_id][present] / layer_counts[present, None]
        out[layer_id] = ClassActivationMatrix(
            layer_id=layer_id,
            classes=tuple(classes[i] for i in present),
            matrix=np.clip(matrix, 0.0, 1.0),
            image_counts=tuple(int(layer_counts[i]) for i in present),
        )
    return out


def accumulate_class_means(
    scores: Iterable[FilterImageScore],
    labels: Mapping[int, str],
    classes: Optional[Sequence[str]] = None,
    layer_filter_counts: Optional[Mapping[int, int]] = None,
) -> Dict[int, ClassActivationMatrix]:
    """Fold a stream of per-filter image scores into class/filter matrices.

    One pass of running sums and counts; output is independent of stream
    order (within float64 accumulation noise).  Filter counts are taken
    from the schema when given, otherwise inferred as max filter index + 1
    per layer.
    """
    scores = list(scores)
    for s in scores:
        if s.image_id not in labels:
            raise DataError(f"image {s.image_id} has no label")
    if classes is None:
        classes = sorted({labels[s.image_id] for s in scores})
    if layer_filter_counts is None:
        layer_filter_counts = {}
        for s in scores:
            m = s.key.layer_id
            layer_filter_counts[m] = max(layer_filter_counts.get(m, 0), s.key.filter_index + 1)

    class_index = {c: i for i, c in enumerate(classes)}
    sums = {m: np.zeros((len(classes), n), dtype=np.float64) for m, n in layer_filter_counts.items()}
    counts = {m: np.zeros(len(classes), dtype=np.int64) for m in layer_filter_counts}
    seen_image_layers = set()
    for s in sorted(scores, key=lambda s: (s.image_id, s.key.layer_id, s.key.filter_index)):
        c = class_index[labels[s.image_id]]
        sums[s.key.layer_id][c, s.key.filter_index] += s.score
        if (s.image_id, s.key.layer_id) not in seen_image_layers:
            seen_image_layers.add((s.image_id, s.key.layer_id))
            counts[s.key.layer_id][c] += 1
    return _finalize_matrices(tuple(classes), sums, counts)


def _top_indices(row: np.ndarray, count: int) -> Tuple[int, ...]:
    """Indices of the `count` highest entries; ties resolve to lower indices."""
    order = np.argsort(-row, kind="stable")
    return tuple(int(i) for i in order[:count])


def select_k_best(matrix: ClassActivationMatrix, k: int) -> Dict[str, Tuple[int, ...]]:
    """Per class, the min(k, n_filters) filter indices with highest affinity."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    count = min(k, matrix.n_filters)
    return {c: _top_indices(matrix.matrix[i], count) for i, c in enumerate(matrix.classes)}


def select_q_quantile(matrix: ClassActivationMatrix, q: float) -> Dict[str, Tuple[int, ...]]:
    """Per class, the top ceil(q * n_filters) filters; agrees with k-best at
    k = ceil(q * n_filters)."""
    count = quantile_count(q, matrix.n_filters)
    return {c: _top_indices(matrix.matrix[i], count) for i, c in enumerate(matrix.classes)}


def select(matrix: ClassActivationMatrix, method: SelectionMethod) -> Dict[str, Tuple[int, ...]]:
    if method.kind == KIND_K_BEST:
        return select_k_best(matrix, method.k)
    return select_q_quantile(matrix, method.q)


@dataclass(frozen=True)
class TagEntry:
    class_label: str
    score: float  # the class/filter affinity, canonicalized to float32 precision


@dataclass(frozen=True)
class Provenance:
    dump_id: str
    seed: int
    model_name: str


@dataclass(frozen=True)
class TagStore:
    """Inverse mapping filter -> tagged classes with scores, plus provenance.

    Every filter of every layer is present; untagged filters carry an empty
    tag tuple.  Tag lists are sorted by score descending, ties by ascending
    class id.
    """

    method: SelectionMethod
    provenance: Provenance
    layers: Dict[int, Dict[int, Tuple[TagEntry, ...]]]

    def tags_for(self, key: FilterKey) -> Tuple[TagEntry, ...]:
        try:
            return self.layers[key.layer_id][key.filter_index]
        except KeyError:
            raise KeyError(f"filter {key} not covered by this store") from None

    def layer_filter_counts(self) -> Dict[int, int]:
        return {m: len(filters) for m, filters in self.layers.items()}

    def tagged_classes(self) -> Tuple[str, ...]:
        seen = set()
        for filters in self.layers.values():
            for tags in filters.values():
                seen.update(t.class_label for t in tags)
        return tuple(sorted(seen))


def build_store_from_matrices(
    matrices: Mapping[int, ClassActivationMatrix],
    method: SelectionMethod,
    provenance: Provenance,
    class_order: Sequence[str],
    layer_filter_counts: Mapping[int, int],
) -> TagStore:
    """Invert per-class selections into the filter -> tags mapping."""
    class_id = {c: i for i, c in enumerate(class_order)}
    layers: Dict[int, Dict[int, Tuple[TagEntry, ...]]] = {}
    for layer_id in sorted(layer_filter_counts):
        n_filters = layer_filter_counts[layer_id]
        per_filter: Dict[int, list] = {i: [] for i in range(n_filters)}
        matrix = matrices.get(layer_id)
        if matrix is not None:
            chosen = select(matrix, method)
            for ci, class_label in enumerate(matrix.classes):
                row = matrix.matrix[ci]
                for f in chosen[class_label]:
                    per_filter[f].append(
                        TagEntry(class_label=class_label, score=f32_shortest(row[f]))
                    )
        layers[layer_id] = {
            i: tuple(
                sorted(per_filter[i], key=lambda t: (-t.score, class_id[t.class_label]))
            )
            for i in range(n_filters)
        }
    return TagStore(method=method, provenance=provenance, layers=layers)


def build_tag_store(reader: DumpReader, split: DatasetSplit, method: SelectionMethod) -> TagStore:
    """Run the full tagging pipeline over a dump's tagging-side images.

    Deterministic for fixed inputs: images fold into the class means in
    ascending image id (the dump's canonical order), and selection applies
    the documented tie rules.
    """
    metadata = reader.metadata
    schema = metadata.layer_filter_counts()
    tagging_ids = split.tagging_ids()
    acc = ClassMeanAccumulator(metadata.classes, schema)
    seen = set()
    for image in reader.iter_images():
        if image.image_id not in tagging_ids:
            continue
        missing = sorted(set(schema) - set(image.layers))
        if missing:
            raise IncompleteDumpError(
                f"image {image.image_id} has no records for layer {missing[0]}"
            )
        for layer_id in sorted(image.layers):
            acc.add_image_layer(
                layer_id, image.class_label, scaled_feature_map_means(image.layers[layer_id])
            )
        seen.add(image.image_id)
    absent = sorted(tagging_ids - seen)
    if absent:
        raise IncompleteDumpError(f"tagging-set image {absent[0]} missing from dump")
    matrices = acc.finalize()
    provenance = Provenance(
        dump_id=reader.dump_id, seed=split.seed, model_name=metadata.model_name
    )
    return build_store_from_matrices(
        matrices, method, provenance, metadata.classes, schema
    )


def save_tag_store(store: TagStore, path) -> None:
    doc = {
        "format_version": STORE_FORMAT_VERSION,
        "method": store.method.to_json_dict(),
        "provenance": {
            "dump_id": store.provenance.dump_id,
            "seed": store.provenance.seed,
            "model_name": store.provenance.model_name,
        },
        "layers": [
            {
                "layer_id": layer_id,
                "filters": [
                    {
                        "filter_index": i,
                        "tags": [
                            {"class": t.class_label, "score": t.score}
                            for t in store.layers[layer_id][i]
                        ],
                    }
                    for i in sorted(store.layers[layer_id])
                ],
            }
            for layer_id in sorted(store.layers)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_tag_store(path) -> TagStore:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"tag store is not valid JSON: {exc}") from exc
    if doc.get("format_version") != STORE_FORMAT_VERSION:
        raise FormatError(f"unsupported store format_version {doc.get('format_version')!r}")
    for key in ("method", "provenance", "layers"):
        if key not in doc:
            raise FormatError(f"tag store missing key {key!r}")
    prov = doc["provenance"]
    layers: Dict[int, Dict[int, Tuple[TagEntry, ...]]] = {}
    for layer in doc["layers"]:
        filters = {}
        for f in layer["filters"]:
            filters[int(f["filter_index"])] = tuple(
                TagEntry(class_label=t["class"], score=float(t["score"])) for t in f["tags"]
            )
        layers[int(layer["layer_id"])] = filters
    return TagStore(
        method=SelectionMethod.from_json_dict(doc["method"]),
        provenance=Provenance(
            dump_id=prov["dump_id"], seed=int(prov["seed"]), model_name=prov["model_name"]
        ),
        layers=layers,
    )
