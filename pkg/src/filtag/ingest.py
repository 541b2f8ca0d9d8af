"""Activation-dump file format and the stratified holdout split.

A dump is a directory with ``manifest.json`` plus shard files of concatenated
records (u32 LE image id, u16 LE layer id, one tensor block).  Records are
canonically sorted by (image_id, layer_id) before writing, so dump content is
independent of the order activations were produced in.  Dumps store full
feature maps, not pre-reduced means, so tagging can be re-run with different
hyperparameters without re-inference.

Feature maps are post-nonlinearity by convention: every value must be >= 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ChecksumError,
    DataError,
    DuplicateRecordError,
    FormatError,
    SchemaError,
)
from .tensor import Tensor3, read_tensor, write_tensor

DUMP_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_RECORD_HEADER = struct.Struct("<IH")  # image_id, layer_id


@dataclass(frozen=True, eq=False)
class ActivationRecord:
    """One image's post-activation feature maps at one conv layer."""

    image_id: int
    class_label: str
    layer_id: int
    feature_maps: Tensor3

    def __post_init__(self) -> None:
        if not 0 <= self.image_id < 2**32:
            raise DataError(f"image_id {self.image_id} outside u32 range")
        if not 0 <= self.layer_id < 2**16:
            raise DataError(f"layer_id {self.layer_id} outside u16 range")
        if self.feature_maps.values.size and float(self.feature_maps.values.min()) < 0.0:
            raise DataError(
                f"image {self.image_id} layer {self.layer_id}: negative activation "
                "(feature maps must be post-nonlinearity)"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.class_label == other.class_label
            and self.layer_id == other.layer_id
            and self.feature_maps == other.feature_maps
        )


@dataclass(frozen=True)
class LayerInfo:
    layer_id: int
    filter_count: int
    height: int
    width: int


@dataclass(frozen=True)
class ImageEntry:
    image_id: int
    class_label: str
    shard: str
    offset: int


@dataclass(frozen=True)
class ShardInfo:
    file: str
    crc32: int
    record_count: int


@dataclass(frozen=True)
class DumpMetadata:
    model_name: str
    created_at: str
    classes: Tuple[str, ...]
    layers: Tuple[LayerInfo, ...]
    images: Tuple[ImageEntry, ...]
    shards: Tuple[ShardInfo, ...]

    def labels(self) -> Dict[int, str]:
        return {e.image_id: e.class_label for e in self.images}

    def layer_filter_counts(self) -> Dict[int, int]:
        return {l.layer_id: l.filter_count for l in self.layers}


@dataclass(frozen=True)
class ImageActivations:
    """All of one image's records, keyed by layer_id in ascending order."""

    image_id: int
    class_label: str
    layers: Dict[int, Tensor3]


def _manifest_dict(metadata: DumpMetadata) -> dict:
    return {
        "format_version": DUMP_FORMAT_VERSION,
        "model_name": metadata.model_name,
        "created_at": metadata.created_at,
        "classes": list(metadata.classes),
        "layers": [
            {
                "layer_id": l.layer_id,
                "filter_count": l.filter_count,
                "height": l.height,
                "width": l.width,
            }
            for l in metadata.layers
        ],
        "images": [
            {
                "image_id": e.image_id,
                "class_label": e.class_label,
                "shard": e.shard,
                "offset": e.offset,
            }
            for e in metadata.images
        ],
        "shards": [
            {"file": s.file, "crc32": s.crc32, "record_count": s.record_count}
            for s in metadata.shards
        ],
    }


def compute_dump_id(manifest: dict) -> str:
    """Content hash of the manifest, excluding the timestamp field."""
    canonical = {k: v for k, v in manifest.items() if k != "created_at"}
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_dump(
    records: Iterable[ActivationRecord],
    path,
    model_name: str = "",
    classes: Optional[Sequence[str]] = None,
    images_per_shard: int = 64,
    created_at: Optional[str] = None,
) -> DumpMetadata:
    """Write a dump directory; returns the manifest summary.

    Content is order-independent: records are indexed and serialized by
    (image_id, layer_id) no matter the order the stream supplies them in.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if images_per_shard < 1:
        raise ValueError("images_per_shard must be >= 1")

    by_key: Dict[Tuple[int, int], ActivationRecord] = {}
    labels: Dict[int, str] = {}
    layer_schema: Dict[int, Tuple[int, int, int]] = {}
    for rec in records:
        key = (rec.image_id, rec.layer_id)
        if key in by_key:
            raise DuplicateRecordError(
                f"duplicate record for image {rec.image_id}, layer {rec.layer_id}"
            )
        fm = rec.feature_maps
        shape = (fm.channels, fm.height, fm.width)
        known = layer_schema.setdefault(rec.layer_id, shape)
        if known != shape:
            raise SchemaError(
                f"layer {rec.layer_id} schema drift: image {rec.image_id} has maps "
                f"{shape}, earlier records had {known}"
            )
        if labels.setdefault(rec.image_id, rec.class_label) != rec.class_label:
            raise DataError(
                f"image {rec.image_id} appears with conflicting labels "
                f"{labels[rec.image_id]!r} and {rec.class_label!r}"
            )
        by_key[key] = rec

    if classes is None:
        class_list = tuple(sorted(set(labels.values())))
    else:
        class_list = tuple(classes)
        missing = sorted(set(labels.values()) - set(class_list))
        if missing:
            raise SchemaError(f"records carry labels outside the class list: {missing}")

    image_ids = sorted({image_id for image_id, _ in by_key})
    shard_infos = []
    image_entries = []
    for shard_idx in range(0, max(len(image_ids), 0), images_per_shard):
        chunk = image_ids[shard_idx : shard_idx + images_per_shard]
        shard_name = f"shard-{shard_idx // images_per_shard:04d}.bin"
        shard_path = path / shard_name
        record_count = 0
        with open(shard_path, "wb") as fp:
            for image_id in chunk:
                image_entries.append(
                    ImageEntry(
                        image_id=image_id,
                        class_label=labels[image_id],
                        shard=shard_name,
                        offset=fp.tell(),
                    )
                )
                for layer_id in sorted(l for (i, l) in by_key if i == image_id):
                    rec = by_key[(image_id, layer_id)]
                    fp.write(_RECORD_HEADER.pack(image_id, layer_id))
                    write_tensor(rec.feature_maps, fp)
                    record_count += 1
        crc = zlib.crc32(shard_path.read_bytes()) & 0xFFFFFFFF
        shard_infos.append(ShardInfo(file=shard_name, crc32=crc, record_count=record_count))

    metadata = DumpMetadata(
        model_name=model_name,
        created_at=created_at
        if created_at is not None
        else datetime.now(timezone.utc).isoformat(timespec="seconds"),
        classes=class_list,
        layers=tuple(
            LayerInfo(layer_id=m, filter_count=s[0], height=s[1], width=s[2])
            for m, s in sorted(layer_schema.items())
        ),
        images=tuple(image_entries),
        shards=tuple(shard_infos),
    )
    (path / MANIFEST_NAME).write_text(json.dumps(_manifest_dict(metadata), indent=2) + "\n")
    return metadata


class DumpReader:
    """Streaming reader over a dump directory.

    ``iter_images`` yields one :class:`ImageActivations` per image, layers in
    ascending layer_id, holding at most a single image's records in memory.
    ``max_live_records`` exposes the observed high-water mark for tests.
    """

    def __init__(self, path):
        self.path = Path(path)
        manifest_path = self.path / MANIFEST_NAME
        if not manifest_path.exists():
            raise FormatError(f"no {MANIFEST_NAME} in {self.path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"dump manifest is not valid JSON: {exc}") from exc
        if manifest.get("format_version") != DUMP_FORMAT_VERSION:
            raise FormatError(
                f"unsupported dump format_version {manifest.get('format_version')!r}"
            )
        for key in ("model_name", "classes", "layers", "images", "shards"):
            if key not in manifest:
                raise FormatError(f"dump manifest missing key {key!r}")
        self.metadata = DumpMetadata(
            model_name=manifest["model_name"],
            created_at=manifest.get("created_at", ""),
            classes=tuple(manifest["classes"]),
            layers=tuple(
                LayerInfo(int(l["layer_id"]), int(l["filter_count"]), int(l["height"]), int(l["width"]))
                for l in manifest["layers"]
            ),
            images=tuple(
                ImageEntry(int(e["image_id"]), e["class_label"], e["shard"], int(e["offset"]))
                for e in manifest["images"]
            ),
            shards=tuple(
                ShardInfo(s["file"], int(s["crc32"]), int(s["record_count"]))
                for s in manifest["shards"]
            ),
        )
        self.dump_id = compute_dump_id(manifest)
        self._layer_shapes = {
            l.layer_id: (l.filter_count, l.height, l.width) for l in self.metadata.layers
        }
        self._image_entries = {e.image_id: (e.shard, e.offset) for e in self.metadata.images}
        self._labels = self.metadata.labels()
        bad = sorted(set(self._labels.values()) - set(self.metadata.classes))
        if bad:
            raise FormatError(f"manifest images reference undeclared classes: {bad}")
        self.live_records = 0
        self.max_live_records = 0
        self._verify_shards()

    def _verify_shards(self) -> None:
        for shard in self.metadata.shards:
            shard_path = self.path / shard.file
            if not shard_path.exists():
                raise FormatError(f"missing shard {shard.file!r}")
            crc = 0
            with open(shard_path, "rb") as fp:
                while True:
                    chunk = fp.read(1 << 20)
                    if not chunk:
                        break
                    crc = zlib.crc32(chunk, crc)
            if (crc & 0xFFFFFFFF) != shard.crc32:
                raise ChecksumError(
                    f"shard {shard.file!r}: crc32 {crc & 0xFFFFFFFF:#010x} "
                    f"!= manifest {shard.crc32:#010x}"
                )

    def labels(self) -> Dict[int, str]:
        return dict(self._labels)

    def _read_payload(self, fp, shard_name: str, image_id: int, layer_id: int) -> ActivationRecord:
        maps = read_tensor(fp)
        shape = (maps.channels, maps.height, maps.width)
        if shape != self._layer_shapes[layer_id]:
            raise SchemaError(
                f"image {image_id} layer {layer_id}: maps {shape} != "
                f"declared {self._layer_shapes[layer_id]}"
            )
        label = self._labels.get(image_id)
        if label is None:
            raise FormatError(f"shard {shard_name!r}: image {image_id} not in manifest")
        if maps.values.size and float(maps.values.min()) < 0.0:
            raise DataError(
                f"image {image_id} layer {layer_id}: negative activation value"
            )
        return ActivationRecord(
            image_id=image_id, class_label=label, layer_id=layer_id, feature_maps=maps
        )

    def iter_images(self) -> Iterator[ImageActivations]:
        group: list = []
        last_key = None
        for shard in self.metadata.shards:
            with open(self.path / shard.file, "rb") as fp:
                seen = 0
                while True:
                    record_start = fp.tell()
                    header = fp.read(_RECORD_HEADER.size)
                    if not header:
                        break
                    if len(header) < _RECORD_HEADER.size:
                        raise FormatError(f"shard {shard.file!r}: truncated record header")
                    image_id, layer_id = _RECORD_HEADER.unpack(header)
                    if not group or group[0].image_id != image_id:
                        declared = self._image_entries.get(image_id)
                        if declared is None:
                            raise FormatError(
                                f"shard {shard.file!r}: image {image_id} not in manifest"
                            )
                        if declared != (shard.file, record_start):
                            raise FormatError(
                                f"image {image_id}: manifest places it at {declared}, "
                                f"found at ({shard.file!r}, {record_start})"
                            )
                    key = (image_id, layer_id)
                    if last_key is not None and key <= last_key:
                        if key == last_key:
                            raise DuplicateRecordError(
                                f"duplicate record for image {image_id}, layer {layer_id}"
                            )
                        raise FormatError(
                            f"shard {shard.file!r}: records not sorted at image "
                            f"{image_id}, layer {layer_id}"
                        )
                    if layer_id not in self._layer_shapes:
                        raise SchemaError(f"shard {shard.file!r}: undeclared layer {layer_id}")
                    last_key = key
                    # release the finished image before materializing the next payload
                    if group and group[0].image_id != image_id:
                        done = group
                        group = []
                        self.live_records -= len(done)
                        yield _finish_group(done)
                    group.append(self._read_payload(fp, shard.file, image_id, layer_id))
                    seen += 1
                    self.live_records += 1
                    self.max_live_records = max(self.max_live_records, self.live_records)
                if seen != shard.record_count:
                    raise FormatError(
                        f"shard {shard.file!r}: {seen} records, manifest says "
                        f"{shard.record_count}"
                    )
        if group:
            self.live_records -= len(group)
            yield _finish_group(group)

    def iter_records(self) -> Iterator[ActivationRecord]:
        for image in self.iter_images():
            for layer_id in sorted(image.layers):
                yield ActivationRecord(
                    image_id=image.image_id,
                    class_label=image.class_label,
                    layer_id=layer_id,
                    feature_maps=image.layers[layer_id],
                )


def _finish_group(records: list) -> ImageActivations:
    return ImageActivations(
        image_id=records[0].image_id,
        class_label=records[0].class_label,
        layers={r.layer_id: r.feature_maps for r in records},
    )


def read_dump(path) -> DumpReader:
    """Open a dump, validating the manifest against the shards up front."""
    return DumpReader(path)


@dataclass(frozen=True)
class DatasetSplit:
    """Seeded per-class partition: a tagging side and a held-out test side."""

    tagging: Dict[str, Tuple[int, ...]]
    test: Dict[str, Tuple[int, ...]]
    seed: int
    fraction: float

    def tagging_ids(self) -> set:
        return {i for ids in self.tagging.values() for i in ids}

    def test_ids(self) -> set:
        return {i for ids in self.test.values() for i in ids}


def split_dataset(
    labels: Mapping[int, str],
    fraction: float = 0.8,
    seed: int = 0,
    classes: Optional[Sequence[str]] = None,
) -> DatasetSplit:
    """Per-class stratified holdout split, deterministic for a fixed seed.

    The tagging side takes round(fraction * n_c) images per class, half-up,
    clamped to [1, n_c - 1] when the class has at least two images.  A
    single-image class contributes that image to the tagging side and warns;
    a declared class with no images is skipped with a warning.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    by_class: Dict[str, list] = {}
    for image_id, label in labels.items():
        by_class.setdefault(label, []).append(image_id)
    if classes is None:
        class_list = sorted(by_class)
    else:
        class_list = sorted(classes)
        unknown = sorted(set(by_class) - set(class_list))
        if unknown:
            raise DataError(f"images labeled with undeclared classes: {unknown}")

    frac = Fraction(str(fraction))
    rng = np.random.default_rng(seed)
    tagging: Dict[str, Tuple[int, ...]] = {}
    test: Dict[str, Tuple[int, ...]] = {}
    for label in class_list:
        ids = sorted(by_class.get(label, []))
        n = len(ids)
        if n == 0:
            warnings.warn(f"class {label!r} has no images; skipped", UserWarning)
            continue
        if n == 1:
            warnings.warn(
                f"class {label!r} has a single image; it goes to the tagging side, "
                "test side is empty for this class",
                UserWarning,
            )
            tagging[label] = (ids[0],)
            test[label] = ()
            continue
        take = int(frac * n + Fraction(1, 2))  # round half-up
        take = min(max(take, 1), n - 1)
        order = rng.permutation(n)
        chosen = sorted(ids[i] for i in order[:take])
        rest = sorted(ids[i] for i in order[take:])
        tagging[label] = tuple(chosen)
        test[label] = tuple(rest)
    return DatasetSplit(tagging=tagging, test=test, seed=seed, fraction=fraction)
