"""Tensor type contracts: htypes constrain dtype, rank, and layout of the
samples appended to a tensor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from tensorlake.errors import (
    DtypeMismatchError,
    HtypeConstraintError,
    InvalidSchemaError,
    RankMismatchError,
)

HTYPES = ("generic", "image", "class_label", "bbox", "text", "binary_mask")
META_TYPES = ("sequence", "link")
DTYPE_TAGS = ("int8", "uint8", "int32", "int64", "float32", "float64")
BBOX_FORMATS = ("LTWH", "LTRB")
COMPRESSIONS = ("none", "lz")

INTEGER_TAGS = ("int8", "uint8", "int32", "int64")

# htypes whose samples may be split across spatial tiles when oversized
TILEABLE_HTYPES = ("generic", "image", "binary_mask")


def numpy_dtype(tag: str) -> np.dtype:
    """Little-endian numpy dtype for a tag; byte order matters on disk."""
    return np.dtype(tag).newbyteorder("<")


@dataclass
class HtypeSchema:
    """Per-tensor type contract.

    ``ndim`` of None leaves the rank unconstrained (ragged tensors may still
    vary their per-dimension sizes freely either way).
    """

    name: str
    htype: str = "generic"
    dtype: str = "float64"
    ndim: Optional[int] = None
    meta: Optional[str] = None
    sample_compression: str = "none"
    bbox_format: str = "LTWH"

    def __post_init__(self):
        if self.htype not in HTYPES:
            raise InvalidSchemaError(f"unknown htype {self.htype!r}")
        if self.dtype == "float64":
            # the field default stands in for "unspecified" on htypes that
            # pin their element type anyway
            if self.htype in ("image", "binary_mask", "text"):
                self.dtype = "uint8"
            elif self.htype == "class_label":
                self.dtype = "int64"
        if self.meta is not None and self.meta not in META_TYPES:
            raise InvalidSchemaError(f"unknown meta type {self.meta!r}")
        if self.dtype not in DTYPE_TAGS:
            raise InvalidSchemaError(f"unknown dtype tag {self.dtype!r}")
        if self.sample_compression not in COMPRESSIONS:
            raise InvalidSchemaError(
                f"unknown sample_compression {self.sample_compression!r}"
            )
        if self.bbox_format not in BBOX_FORMATS:
            raise InvalidSchemaError(f"unknown bbox_format {self.bbox_format!r}")
        if self.htype == "image":
            if self.dtype != "uint8":
                raise InvalidSchemaError("image htype requires dtype uint8")
            if self.ndim is None:
                self.ndim = 3
            elif self.ndim != 3:
                raise InvalidSchemaError("image htype requires ndim 3")
        if self.htype == "binary_mask" and self.dtype != "uint8":
            raise InvalidSchemaError("binary_mask htype requires dtype uint8")
        if self.htype == "class_label" and self.dtype not in INTEGER_TAGS:
            raise InvalidSchemaError("class_label htype requires an integer dtype")
        if self.htype == "bbox" and self.dtype not in ("float32", "float64", "int32", "int64"):
            raise InvalidSchemaError("bbox htype requires a float or wide int dtype")

    @property
    def np_dtype(self) -> np.dtype:
        return numpy_dtype(self.dtype)

    @property
    def is_link(self) -> bool:
        return self.meta == "link"

    @property
    def tileable(self) -> bool:
        return self.htype in TILEABLE_HTYPES and self.meta is None

    def spatial_ndim(self, sample_ndim: int) -> int:
        """Number of leading dimensions treated as spatial when tiling."""
        if self.htype in ("image", "binary_mask") and sample_ndim == 3:
            return 2  # keep the channel dimension whole
        return sample_ndim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HtypeSchema":
        return cls(**{k: d[k] for k in (
            "name", "htype", "dtype", "ndim", "meta", "sample_compression", "bbox_format"
        ) if k in d})


def validate_sample(schema: HtypeSchema, sample: np.ndarray, raw_bytes: bool = False) -> np.ndarray:
    """Check a sample against its tensor's schema; returns the array cast to
    the schema dtype's exact (little-endian) form.

    ``raw_bytes`` admits an opaque 1-D uint8 payload (pass-through encoded
    images, linked payloads) without rank/htype checks; decoding such samples
    is the consumer's job.
    """
    sample = np.asarray(sample)
    if raw_bytes:
        if sample.dtype != np.uint8 or sample.ndim != 1:
            raise DtypeMismatchError(
                f"{schema.name}: raw payload must be 1-D uint8, got "
                f"{sample.dtype}{sample.shape}"
            )
        return as_contiguous(sample)
    if np.dtype(sample.dtype).kind != np.dtype(schema.dtype).kind or \
            sample.dtype.itemsize != np.dtype(schema.dtype).itemsize:
        raise DtypeMismatchError(
            f"{schema.name}: expected dtype {schema.dtype}, got {sample.dtype}"
        )
    is_empty = sample.size == 0
    if schema.ndim is not None and sample.ndim != schema.ndim and not is_empty:
        raise RankMismatchError(
            f"{schema.name}: expected ndim {schema.ndim}, got {sample.ndim}"
        )
    if not is_empty:
        if schema.htype == "bbox":
            if sample.shape[-1] != 4:
                raise HtypeConstraintError(
                    f"{schema.name}: bbox samples need a trailing dimension of 4, "
                    f"got shape {sample.shape}"
                )
        elif schema.htype == "binary_mask":
            if not np.isin(sample, (0, 1)).all():
                raise HtypeConstraintError(f"{schema.name}: mask values must be 0/1")
    return as_contiguous(sample.astype(schema.np_dtype, copy=False))


def as_contiguous(arr: np.ndarray) -> np.ndarray:
    """C-contiguous view/copy that preserves 0-d shapes (ascontiguousarray
    silently promotes scalars to rank 1)."""
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


def empty_sample(schema: HtypeSchema) -> np.ndarray:
    """The gap filler for sparse writes: zero-length payload, all-zero shape.
    Rank-0 tensors use shape (0,) since a 0-d array always holds one element."""
    ndim = schema.ndim if schema.ndim else 1
    return np.zeros((0,) * ndim, dtype=schema.np_dtype)
