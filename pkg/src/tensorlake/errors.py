"""Exception types raised across the tensorlake package."""


class TensorLakeError(Exception):
    """Base class for all tensorlake errors."""


# --- storage ---------------------------------------------------------------


class KeyNotFoundError(TensorLakeError, KeyError):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"key not found: {self.key!r}"


class RangeOutOfBoundsError(TensorLakeError):
    pass


class IoFailureError(TensorLakeError):
    pass


class ReadOnlyProviderError(TensorLakeError):
    pass


class BadKeyError(TensorLakeError):
    """Storage key violates the key contract (empty, absolute, or contains '..')."""


# --- format ----------------------------------------------------------------


class ValidationError(TensorLakeError):
    pass


class DtypeMismatchError(ValidationError):
    pass


class RankMismatchError(ValidationError):
    pass


class HtypeConstraintError(ValidationError):
    pass


class ChunkOverflowError(TensorLakeError):
    pass


class IndexOutOfRangeError(TensorLakeError, IndexError):
    pass


class CorruptHeaderError(TensorLakeError):
    pass


class InvariantViolationError(TensorLakeError):
    pass


# --- dataset / engine ------------------------------------------------------


class AlreadyExistsError(TensorLakeError):
    pass


class DatasetNotFoundError(TensorLakeError):
    pass


class InvalidSchemaError(TensorLakeError):
    pass


class ChunkWriteFailureError(TensorLakeError):
    pass


class RegionOutOfBoundsError(TensorLakeError):
    pass


class LinkResolveFailureError(TensorLakeError):
    pass


class BranchLockedError(TensorLakeError):
    pass


class UnknownTensorError(TensorLakeError):
    pass


# --- version control -------------------------------------------------------


class NothingToCommitError(TensorLakeError):
    pass


class UnknownTargetError(TensorLakeError):
    pass


class DirtyStateError(TensorLakeError):
    pass


class ChunkNotFoundError(TensorLakeError):
    pass


class UnknownCommitError(TensorLakeError):
    pass


class UnknownBranchError(TensorLakeError):
    pass


class SchemaMismatchError(TensorLakeError):
    pass


class ReadOnlyCommitError(TensorLakeError):
    """Write attempted against an immutable snapshot (historic commit checkout)."""


class MergeConflictError(TensorLakeError):
    def __init__(self, conflicts):
        # conflicts: {tensor: [sample ids updated on both sides]}
        self.conflicts = conflicts
        flat = ", ".join(
            f"{tensor}: {sorted(ids)}" for tensor, ids in sorted(conflicts.items())
        )
        super().__init__(f"conflicting updates by sample id ({flat})")


# --- query language --------------------------------------------------------


class TqlError(TensorLakeError):
    pass


class TqlSyntaxError(TqlError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownFunctionError(TqlError):
    pass


class TqlTypeError(TqlError):
    pass


class ShapeMismatchError(TqlError):
    pass


class RuntimeEvalError(TqlError):
    def __init__(self, message: str, row: int):
        super().__init__(f"{message} (row {row})")
        self.row = row


# --- views -----------------------------------------------------------------


class DuplicateIndexError(TensorLakeError):
    pass


class DestinationNotEmptyError(TensorLakeError):
    pass
