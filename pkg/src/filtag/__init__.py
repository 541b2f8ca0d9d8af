"""filtag: tag convolutional filters with the classes whose images activate
them, then explain individual classifications from the activated filters'
tags."""

from .errors import (
    ChecksumError,
    ContaminationError,
    DataError,
    DuplicateRecordError,
    FiltagError,
    FormatError,
    IncompleteDumpError,
    SchemaError,
    ShapeError,
)
from .explain import (
    ActivatedFilter,
    ErrorReport,
    Explanation,
    HitRate,
    HitsReport,
    PipelineCache,
    RankedTag,
    SweepResult,
    activated_filters,
    error_report,
    evaluate,
    explain_image,
    hits_at_n,
    spearman,
    sweep,
)
from .infer import ForwardTrace, conv2d, forward, maxpool2d, relu, softmax
from .ingest import (
    ActivationRecord,
    DatasetSplit,
    DumpMetadata,
    DumpReader,
    ImageActivations,
    read_dump,
    split_dataset,
    write_dump,
)
from .model import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelSpec,
    SoftmaxLayer,
    load_model,
    save_model,
)
from .tagging import (
    ClassActivationMatrix,
    FilterImageScore,
    Provenance,
    ScaledLayerActivations,
    SelectionMethod,
    TagEntry,
    TagStore,
    accumulate_class_means,
    build_tag_store,
    feature_map_score,
    load_tag_store,
    save_tag_store,
    scale_layer,
    select_k_best,
    select_q_quantile,
)
from .tensor import FilterKey, Tensor3, channel_slice, load_tensor, mean, save_tensor

__version__ = "0.1.0"
