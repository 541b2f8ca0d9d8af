"""Per-image explanations, the Hits@n metric, evaluation, and error analysis.

An image's classification is explained by the union of the tags carried by
its most activated filters: filters selected per layer with the same method
family used at tagging time, tags ranked by how many activated filters carry
them.  Hits@n asks whether the image's true class appears among the top-n
ranked tags.
"""

from __future__ import annotations

import collections
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ContaminationError,
    DataError,
    IncompleteDumpError,
    SchemaError,
)
from .ingest import DatasetSplit, DumpReader, ImageActivations
from .tagging import (
    ClassMeanAccumulator,
    Provenance,
    SelectionMethod,
    TagStore,
    _top_indices,
    build_store_from_matrices,
    scaled_feature_map_means,
)
from .tensor import FilterKey, Tensor3


@dataclass(frozen=True)
class ActivatedFilter:
    key: FilterKey
    score: float  # the image's mean scaled activation for this filter


@dataclass(frozen=True)
class RankedTag:
    class_label: str
    frequency: int  # number of activated filters carrying this tag
    score_sum: float  # summed class/filter affinity over those filters


@dataclass(frozen=True)
class Explanation:
    image_id: int
    true_class: str
    predicted_class: Optional[str]
    activated: Tuple[ActivatedFilter, ...]
    ranked_tags: Tuple[RankedTag, ...]


def activated_filters_from_scores(
    scores: Mapping[int, np.ndarray],
    method: SelectionMethod,
    layer_filter_counts: Mapping[int, int],
) -> Tuple[ActivatedFilter, ...]:
    """Select the top filters per layer from precomputed per-filter scores."""
    out: List[ActivatedFilter] = []
    for layer_id in sorted(layer_filter_counts):
        if layer_id not in scores:
            raise IncompleteDumpError(f"no records for layer {layer_id}")
        vec = scores[layer_id]
        count = method.count_for(layer_filter_counts[layer_id])
        for i in _top_indices(vec, count):
            out.append(
                ActivatedFilter(key=FilterKey(layer_id, i), score=float(vec[i]))
            )
    return tuple(out)


def activated_filters(
    layers: Mapping[int, Tensor3],
    method: SelectionMethod,
    layer_filter_counts: Optional[Mapping[int, int]] = None,
) -> Tuple[ActivatedFilter, ...]:
    """Scale each layer, score each filter, and keep the most activated ones.

    Selection per layer takes the top k (or top ceil(q * n_filters)) filters
    by mean scaled activation, with the tagging module's tie rule.
    """
    if layer_filter_counts is None:
        layer_filter_counts = {m: t.channels for m, t in layers.items()}
    scores = {m: scaled_feature_map_means(t) for m, t in layers.items()}
    return activated_filters_from_scores(scores, method, layer_filter_counts)


def explain_image(
    activated: Sequence[ActivatedFilter],
    store: TagStore,
    image_id: int,
    true_class: str,
    predicted_class: Optional[str] = None,
    class_order: Sequence[str] = (),
) -> Explanation:
    """Rank the multiset union of the activated filters' tags.

    Frequency counts how many activated filters carry a tag (across all
    layers); ties order by summed affinity descending, then class id.
    """
    class_id = {c: i for i, c in enumerate(class_order)}
    freq: Dict[str, int] = {}
    score_sum: Dict[str, float] = {}
    for af in activated:
        try:
            tags = store.tags_for(af.key)
        except KeyError as exc:
            raise SchemaError(f"store does not cover activated filter {af.key}") from exc
        for tag in tags:
            freq[tag.class_label] = freq.get(tag.class_label, 0) + 1
            score_sum[tag.class_label] = score_sum.get(tag.class_label, 0.0) + tag.score
    ranked = sorted(
        freq,
        key=lambda c: (-freq[c], -score_sum[c], class_id.get(c, len(class_id)), c),
    )
    return Explanation(
        image_id=image_id,
        true_class=true_class,
        predicted_class=predicted_class,
        activated=tuple(activated),
        ranked_tags=tuple(
            RankedTag(class_label=c, frequency=freq[c], score_sum=score_sum[c]) for c in ranked
        ),
    )


def hits_at_n(e: Explanation, n: int) -> bool:
    """True iff the image's true class ranks among the top-n tags."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return any(t.class_label == e.true_class for t in e.ranked_tags[:n])


def tag_rank(e: Explanation, class_label: str) -> Optional[int]:
    """1-based rank of a class in the explanation, None when absent."""
    for i, t in enumerate(e.ranked_tags):
        if t.class_label == class_label:
            return i + 1
    return None


# ---------------------------------------------------------------------------
# Hits@n reports


@dataclass(frozen=True)
class HitRate:
    hits: int
    total: int

    @property
    def rate(self) -> float:
        return self.hits / self.total if self.total else 0.0


@dataclass(frozen=True)
class HitsReport:
    method: SelectionMethod
    n_values: Tuple[int, ...]
    empty: bool
    total_images: int
    overall: Dict[int, HitRate]
    per_class: Dict[str, Dict[int, HitRate]]
    per_class_accuracy: Optional[Dict[str, HitRate]]
    correlation: Optional[float]


def spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation with average ranks for ties.

    Returns None when fewer than two points or when either side has zero
    rank variance (the coefficient is undefined there).
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError(f"spearman needs two equal-length vectors, got {xa.shape}, {ya.shape}")
    if xa.size < 2:
        return None
    rx = _average_ranks(xa)
    ry = _average_ranks(ya)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = float(np.sqrt((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return None
    return float((rx * ry).sum() / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    pos = 0
    sorted_v = v[order]
    while pos < v.size:
        end = pos
        while end + 1 < v.size and sorted_v[end + 1] == sorted_v[pos]:
            end += 1
        avg = (pos + end) / 2.0 + 1.0
        ranks[order[pos : end + 1]] = avg
        pos = end + 1
    return ranks


def _normalize_n_values(n_values: Sequence[int]) -> Tuple[int, ...]:
    if not n_values:
        raise ValueError("need at least one n value")
    out = sorted(set(int(n) for n in n_values))
    if out[0] < 1:
        raise ValueError(f"n values must be >= 1, got {out[0]}")
    return tuple(out)


def _aggregate_report(
    explanations: Sequence[Explanation],
    classes: Sequence[str],
    n_values: Tuple[int, ...],
    method: SelectionMethod,
    predictions: Optional[Mapping[int, str]],
) -> HitsReport:
    """Fold explanations into per-class and overall hit rates.

    Counters are integers merged in canonical class order, so the result is
    exactly reproducible regardless of how the explanations were computed.
    """
    present = [c for c in classes if any(e.true_class == c for e in explanations)]
    overall = {}
    per_class: Dict[str, Dict[int, HitRate]] = {c: {} for c in present}
    for n in n_values:
        total_hits = 0
        for c in present:
            hits = sum(1 for e in explanations if e.true_class == c and hits_at_n(e, n))
            total = sum(1 for e in explanations if e.true_class == c)
            per_class[c][n] = HitRate(hits=hits, total=total)
            total_hits += hits
        overall[n] = HitRate(hits=total_hits, total=len(explanations))

    accuracy = None
    correlation = None
    if predictions is not None and explanations:
        accuracy = {}
        for c in present:
            of_class = [e for e in explanations if e.true_class == c]
            correct = sum(1 for e in of_class if e.predicted_class == c)
            accuracy[c] = HitRate(hits=correct, total=len(of_class))
        if len(present) >= 2:
            top_n = n_values[-1]
            correlation = spearman(
                [per_class[c][top_n].rate for c in present],
                [accuracy[c].rate for c in present],
            )
    return HitsReport(
        method=method,
        n_values=n_values,
        empty=not explanations,
        total_images=len(explanations),
        overall=overall,
        per_class=per_class,
        per_class_accuracy=accuracy,
        correlation=correlation,
    )


def _map_windowed(fn, items: Iterable, threads: int) -> Iterator:
    """Apply fn across items with a bounded worker pool, preserving order."""
    if threads <= 1:
        for item in items:
            yield fn(item)
        return
    pending = collections.deque()
    with ThreadPoolExecutor(max_workers=threads) as executor:
        for item in items:
            pending.append(executor.submit(fn, item))
            if len(pending) >= 4 * threads:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _check_store_matches(reader: DumpReader, store: TagStore, split: DatasetSplit) -> None:
    if store.provenance.dump_id != reader.dump_id:
        raise ContaminationError(
            f"store was built from dump {store.provenance.dump_id}, "
            f"evaluating against {reader.dump_id}; cannot verify the holdout"
        )
    if store.provenance.seed != split.seed:
        raise ContaminationError(
            f"store was built with split seed {store.provenance.seed}, "
            f"evaluation uses seed {split.seed}; test side may overlap the tagging side"
        )


def evaluate(
    reader: DumpReader,
    store: TagStore,
    split: DatasetSplit,
    n_values: Sequence[int],
    method: Optional[SelectionMethod] = None,
    predictions: Optional[Mapping[int, str]] = None,
    eval_ids: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> HitsReport:
    """Hits@n over held-out images, guarding against split contamination.

    Explanation-time selection defaults to the store's own method.  The
    evaluation set defaults to the split's test side; explicit ids must stay
    disjoint from the tagging side.
    """
    n_values = _normalize_n_values(n_values)
    method = method or store.method
    _check_store_matches(reader, store, split)
    labels = reader.labels()
    tagging_ids = split.tagging_ids()
    if eval_ids is None:
        chosen = sorted(split.test_ids())
    else:
        chosen = sorted(set(int(i) for i in eval_ids))
        unknown = [i for i in chosen if i not in labels]
        if unknown:
            raise DataError(f"image {unknown[0]} is not in the dump")
        contaminated = [i for i in chosen if i in tagging_ids]
        if contaminated:
            raise ContaminationError(
                f"image {contaminated[0]} is in the store's tagging set"
            )
    if predictions is not None:
        missing = [i for i in chosen if i not in predictions]
        if missing:
            raise DataError(f"no prediction for image {missing[0]}")

    wanted = set(chosen)
    schema = reader.metadata.layer_filter_counts()

    def work(image: ImageActivations) -> Explanation:
        af = activated_filters(image.layers, method, schema)
        return explain_image(
            af,
            store,
            image_id=image.image_id,
            true_class=image.class_label,
            predicted_class=predictions.get(image.image_id) if predictions else None,
            class_order=reader.metadata.classes,
        )

    explanations = list(
        _map_windowed(work, (im for im in reader.iter_images() if im.image_id in wanted), threads)
    )
    seen = {e.image_id for e in explanations}
    absent = sorted(wanted - seen)
    if absent:
        raise IncompleteDumpError(f"evaluation image {absent[0]} missing from dump")
    return _aggregate_report(
        explanations, reader.metadata.classes, n_values, method, predictions
    )


# ---------------------------------------------------------------------------
# Sweep: many (method, n) evaluations sharing one pass over the dump


class PipelineCache:
    """One pass over a dump: class/filter matrices from the tagging side and
    per-image filter scores for the test side, reusable across grid points."""

    def __init__(self, reader: DumpReader, split: DatasetSplit):
        metadata = reader.metadata
        self.classes = metadata.classes
        self.schema = metadata.layer_filter_counts()
        self.provenance = Provenance(
            dump_id=reader.dump_id, seed=split.seed, model_name=metadata.model_name
        )
        tagging_ids = split.tagging_ids()
        test_ids = split.test_ids()
        acc = ClassMeanAccumulator(self.classes, self.schema)
        self.test_scores: List[Tuple[int, str, Dict[int, np.ndarray]]] = []
        seen_tagging = set()
        for image in reader.iter_images():
            in_tagging = image.image_id in tagging_ids
            in_test = image.image_id in test_ids
            if not (in_tagging or in_test):
                continue
            missing = sorted(set(self.schema) - set(image.layers))
            if missing:
                raise IncompleteDumpError(
                    f"image {image.image_id} has no records for layer {missing[0]}"
                )
            scores = {
                m: scaled_feature_map_means(image.layers[m]) for m in sorted(image.layers)
            }
            if in_tagging:
                for m in sorted(scores):
                    acc.add_image_layer(m, image.class_label, scores[m])
                seen_tagging.add(image.image_id)
            if in_test:
                self.test_scores.append((image.image_id, image.class_label, scores))
        absent = sorted(tagging_ids - seen_tagging)
        if absent:
            raise IncompleteDumpError(f"tagging-set image {absent[0]} missing from dump")
        missing_test = sorted(test_ids - {i for i, _, _ in self.test_scores})
        if missing_test:
            raise IncompleteDumpError(f"test-set image {missing_test[0]} missing from dump")
        self.matrices = acc.finalize()

    def build_store(self, method: SelectionMethod) -> TagStore:
        return build_store_from_matrices(
            self.matrices, method, self.provenance, self.classes, self.schema
        )

    def evaluate(
        self,
        method: SelectionMethod,
        n_values: Sequence[int],
        predictions: Optional[Mapping[int, str]] = None,
    ) -> HitsReport:
        n_values = _normalize_n_values(n_values)
        if predictions is not None:
            missing = [i for i, _, _ in self.test_scores if i not in predictions]
            if missing:
                raise DataError(f"no prediction for image {missing[0]}")
        store = self.build_store(method)
        explanations = []
        for image_id, true_class, scores in self.test_scores:
            af = activated_filters_from_scores(scores, method, self.schema)
            explanations.append(
                explain_image(
                    af,
                    store,
                    image_id=image_id,
                    true_class=true_class,
                    predicted_class=predictions.get(image_id) if predictions else None,
                    class_order=self.classes,
                )
            )
        return _aggregate_report(explanations, self.classes, n_values, method, predictions)


@dataclass(frozen=True)
class SweepResult:
    n_values: Tuple[int, ...]
    entries: Tuple[Tuple[SelectionMethod, HitsReport], ...]


def sweep(
    reader: DumpReader,
    split: DatasetSplit,
    methods: Sequence[SelectionMethod],
    n_values: Sequence[int],
    predictions: Optional[Mapping[int, str]] = None,
) -> SweepResult:
    """Evaluate every grid point, computing scaling and class means once."""
    if not methods:
        raise ValueError("sweep grid is empty")
    n_values = _normalize_n_values(n_values)
    cache = PipelineCache(reader, split)
    entries = tuple(
        (method, cache.evaluate(method, n_values, predictions)) for method in methods
    )
    return SweepResult(n_values=n_values, entries=entries)


# ---------------------------------------------------------------------------
# Misclassification reports


@dataclass(frozen=True)
class ClassInExplanation:
    class_label: str
    rank: Optional[int]  # 1-based; None when the class never appears
    frequency: int
    score_sum: float
    filters: Tuple[ActivatedFilter, ...]  # activated filters tagged with the class


@dataclass(frozen=True)
class ErrorReport:
    """Descriptive report on one misclassified image."""

    image_id: int
    true_class: str
    predicted_class: str
    method: SelectionMethod
    n_values: Tuple[int, ...]
    hits: Dict[int, bool]
    true_summary: ClassInExplanation
    predicted_summary: ClassInExplanation
    shared_filters: Tuple[FilterKey, ...]
    shared_classes: Tuple[str, ...]
    ranked_tags: Tuple[RankedTag, ...]


def _class_in_explanation(e: Explanation, store: TagStore, class_label: str) -> ClassInExplanation:
    entry = next((t for t in e.ranked_tags if t.class_label == class_label), None)
    filters = tuple(
        af
        for af in e.activated
        if any(t.class_label == class_label for t in store.tags_for(af.key))
    )
    return ClassInExplanation(
        class_label=class_label,
        rank=tag_rank(e, class_label),
        frequency=entry.frequency if entry else 0,
        score_sum=entry.score_sum if entry else 0.0,
        filters=filters,
    )


def error_report(
    e: Explanation,
    store: TagStore,
    n_values: Sequence[int],
    method: Optional[SelectionMethod] = None,
    class_order: Sequence[str] = (),
) -> ErrorReport:
    """Contrast the true and predicted classes inside one explanation.

    The shared section lists the activated filters tagged with both classes
    and every class those ambiguous filters carry.
    """
    if e.predicted_class is None:
        raise ValueError("explanation carries no prediction; error analysis needs one")
    if e.predicted_class == e.true_class:
        raise ValueError(
            f"image {e.image_id} was classified correctly ({e.true_class}); "
            "error analysis applies to misclassifications"
        )
    n_values = _normalize_n_values(n_values)
    true_summary = _class_in_explanation(e, store, e.true_class)
    predicted_summary = _class_in_explanation(e, store, e.predicted_class)
    shared_keys = tuple(
        af.key
        for af in e.activated
        if af.key in {f.key for f in true_summary.filters}
        and af.key in {f.key for f in predicted_summary.filters}
    )
    class_id = {c: i for i, c in enumerate(class_order)}
    shared_classes = sorted(
        {
            t.class_label
            for key in shared_keys
            for t in store.tags_for(key)
        },
        key=lambda c: (class_id.get(c, len(class_id)), c),
    )
    return ErrorReport(
        image_id=e.image_id,
        true_class=e.true_class,
        predicted_class=e.predicted_class,
        method=method or store.method,
        n_values=n_values,
        hits={n: hits_at_n(e, n) for n in n_values},
        true_summary=true_summary,
        predicted_summary=predicted_summary,
        shared_filters=shared_keys,
        shared_classes=tuple(shared_classes),
        ranked_tags=e.ranked_tags,
    )
