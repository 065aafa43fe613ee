"""Numeric built-ins available inside queries."""

from __future__ import annotations

import numpy as np

from tensorlake.errors import ShapeMismatchError, TqlTypeError

BUILTIN_FUNCTIONS = {
    "IOU", "NORMALIZE", "MEAN", "SUM", "MIN", "MAX", "SHAPE", "ANY", "ALL", "CONTAINS",
}


def _as_box_set(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[-1] != 4:
        raise ShapeMismatchError(
            f"{what}: boxes need a trailing dimension of 4, got shape {np.asarray(value).shape}"
        )
    return arr


def _to_ltrb(boxes: np.ndarray, fmt: str) -> np.ndarray:
    if fmt == "LTRB":
        return boxes
    out = boxes.copy()
    out[:, 2] = boxes[:, 0] + boxes[:, 2]
    out[:, 3] = boxes[:, 1] + boxes[:, 3]
    return out


def iou(a, b, fmt_a: str = "LTWH", fmt_b: str = "LTWH") -> float:
    """Intersection over union: one value for a single box pair, the mean over
    index-paired rows for box sets. A degenerate zero-area union scores 0."""
    single = np.asarray(a).ndim == 1 and np.asarray(b).ndim == 1
    boxes_a = _to_ltrb(_as_box_set(a, "IOU"), fmt_a)
    boxes_b = _to_ltrb(_as_box_set(b, "IOU"), fmt_b)
    n = min(len(boxes_a), len(boxes_b))
    if n == 0:
        return 0.0
    boxes_a, boxes_b = boxes_a[:n], boxes_b[:n]
    ix = np.maximum(
        0.0,
        np.minimum(boxes_a[:, 2], boxes_b[:, 2]) - np.maximum(boxes_a[:, 0], boxes_b[:, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(boxes_a[:, 3], boxes_b[:, 3]) - np.maximum(boxes_a[:, 1], boxes_b[:, 1]),
    )
    inter = ix * iy
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a + area_b - inter
    scores = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(scores[0]) if single else float(scores.mean())


def normalize_boxes(boxes, crop, fmt: str = "LTWH") -> np.ndarray:
    """Express box coordinates relative to a [x, y, w, h] crop window; origins
    translate by (-x, -y), nothing is clipped."""
    crop = np.asarray(crop, dtype=np.float64).reshape(-1)
    if crop.shape != (4,):
        raise ShapeMismatchError(f"NORMALIZE: crop must have 4 entries, got {crop.shape}")
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr  # empty samples pass through untouched
    single = arr.ndim == 1
    boxes_arr = _as_box_set(arr, "NORMALIZE").copy()
    x, y = crop[0], crop[1]
    boxes_arr[:, 0] -= x
    boxes_arr[:, 1] -= y
    if fmt == "LTRB":
        boxes_arr[:, 2] -= x
        boxes_arr[:, 3] -= y
    return boxes_arr[0] if single else boxes_arr


def _as_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind not in "iufb":
        raise TqlTypeError(f"{name}: operand must be numeric, got dtype {arr.dtype}")
    return arr


def reduce_mean(value) -> float:
    arr = _as_array(value, "MEAN")
    if arr.size == 0:
        return float("nan")
    return float(np.mean(arr, dtype=np.float64))


def reduce_sum(value):
    arr = _as_array(value, "SUM")
    if arr.dtype.kind in "ib":
        return int(np.sum(arr, dtype=np.int64))
    return float(np.sum(arr, dtype=np.float64))


def reduce_min(value):
    arr = _as_array(value, "MIN")
    if arr.size == 0:
        return float("nan")
    v = arr.min()
    return int(v) if arr.dtype.kind in "ib" else float(v)


def reduce_max(value):
    arr = _as_array(value, "MAX")
    if arr.size == 0:
        return float("nan")
    v = arr.max()
    return int(v) if arr.dtype.kind in "ib" else float(v)


def shape_of(value) -> np.ndarray:
    return np.asarray(np.asarray(value).shape, dtype=np.int64)


def any_of(value) -> bool:
    return bool(np.any(np.asarray(value)))


def all_of(value) -> bool:
    return bool(np.all(np.asarray(value)))


def contains(value, literal) -> bool:
    """True when the literal matches any element (numeric/label tensors) or is
    a substring of the sample decoded as UTF-8 (text tensors)."""
    arr = np.asarray(value)
    if isinstance(literal, str):
        if arr.dtype != np.uint8:
            raise TqlTypeError("CONTAINS with a string literal needs a text operand")
        return literal in arr.tobytes().decode("utf-8", errors="replace")
    return bool(np.any(arr == literal))
