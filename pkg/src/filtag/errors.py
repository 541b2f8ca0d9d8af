"""Exception hierarchy shared by all filtag modules.

The CLI maps these onto exit codes: contamination -> 3, everything else
raised by the library -> 2 (input/usage), unexpected exceptions -> 1.
"""


class FiltagError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FiltagError):
    """Tensor or layer shapes are inconsistent with the requested operation."""


class DataError(FiltagError):
    """Input values violate a data invariant (NaN/Inf, negative activations,
    unlabeled images)."""


class FormatError(FiltagError):
    """A file does not parse: bad magic, bad version, truncation, unknown
    layer kind, or declared metadata that contradicts the payload."""


class SchemaError(FormatError):
    """Structurally valid data whose schema does not match its peers
    (layer shape drift inside a dump, store built for a different model)."""


class ChecksumError(FormatError):
    """A shard's payload does not match the checksum recorded in the manifest."""


class DuplicateRecordError(FiltagError):
    """Two activation records share the same (image_id, layer_id)."""


class IncompleteDumpError(FiltagError):
    """A dump is missing records that the requested operation needs."""


class ContaminationError(FiltagError):
    """Evaluation would reuse images that participated in tag-store
    construction (or provenance cannot rule that out)."""
