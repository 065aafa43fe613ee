"""Dataset views (ordered row projections pinned to a commit) and
materialization of views or linked tensors into a fresh, optimally chunked
dataset with recorded lineage."""

from __future__ import annotations

import hashlib
import json
import time
from typing import Callable, Optional, Sequence, Union

import numpy as np

from tensorlake.chunk import ChunkPolicy
from tensorlake.errors import (
    DestinationNotEmptyError,
    DuplicateIndexError,
    IndexOutOfRangeError,
    LinkResolveFailureError,
)
from tensorlake.htype import HtypeSchema, empty_sample
from tensorlake.storage import StorageProvider


class DatasetView:
    """An ordered subset of dataset rows with optional projected expressions,
    pinned to one commit."""

    def __init__(
        self,
        ds,
        commit_id: str,
        row_order: list[int],
        projections: Optional[list[tuple[str, object]]] = None,
        evaluator: Optional[Callable[[object, int], object]] = None,
        group_boundaries: Optional[list[int]] = None,
        query_text: Optional[str] = None,
    ):
        self.ds = ds
        self.commit_id = commit_id
        self.row_order = list(row_order)
        self.projections = projections
        self.evaluator = evaluator
        self.group_boundaries = group_boundaries
        self.query_text = query_text

    def __len__(self) -> int:
        return len(self.row_order)

    @property
    def is_identity(self) -> bool:
        return self.projections is None

    def tensors(self) -> list[str]:
        """Streamable column names: projection aliases, or every tensor."""
        if self.projections is not None:
            return [alias for alias, _ in self.projections]
        return self.ds.tensors(commit=self.commit_id)

    def referenced_tensors(self, name: str) -> list[str]:
        """Underlying tensor paths one column reads (for fetch planning)."""
        if self.projections is None:
            return [name]
        from tensorlake.tql.ast import TensorRef, walk

        for alias, expr in self.projections:
            if alias == name:
                return [n.path for n in walk(expr) if isinstance(n, TensorRef)]
        raise KeyError(f"no projection named {name!r}")

    def value(self, name: str, position: int):
        """Evaluate column ``name`` for view row ``position``."""
        index = self.row_order[position]
        if self.projections is None:
            return self.ds.read(name, index, commit=self.commit_id)
        for alias, expr in self.projections:
            if alias == name:
                return self.evaluator(expr, index)
        raise KeyError(f"no projection named {name!r}")

    def row(self, position: int) -> dict:
        return {name: self.value(name, position) for name in self.tensors()}

    def groups(self) -> list[tuple[int, int]]:
        """(start, end) view positions of each ARRANGE BY group."""
        if not self.group_boundaries:
            return [(0, len(self))] if len(self) else []
        bounds = list(self.group_boundaries) + [len(self)]
        return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    # --- persistence ----------------------------------------------------------

    def digest(self) -> str:
        ident = json.dumps(
            {"commit": self.commit_id, "query": self.query_text, "rows": self.row_order},
            sort_keys=True,
        )
        return hashlib.sha256(ident.encode()).hexdigest()[:16]

    def save(self) -> str:
        """Serialize under the dataset root as view_<hash>.json; returns the key."""
        key = self.ds.layout.view(self.digest())
        payload = {
            "commit": self.commit_id,
            "query_text": self.query_text,
            "row_order": self.row_order,
        }
        self.ds.provider.put(key, json.dumps(payload).encode("utf-8"))
        return key


def load_view(ds, key: str) -> DatasetView:
    raw = json.loads(ds.provider.get(key).decode("utf-8"))
    if raw.get("query_text"):
        view = ds.query(raw["query_text"], version=raw["commit"])
        if view.row_order != raw["row_order"]:
            raise DuplicateIndexError(
                f"stored view {key!r} no longer matches its query at commit {raw['commit']}"
            )
        return view
    return DatasetView(ds, raw["commit"], raw["row_order"], query_text=None)


def identity_view(ds, commit: Optional[str] = None) -> DatasetView:
    """All rows, natural order, identity projections, pinned to ``commit``."""
    if commit is None and not ds.read_only and ds.branch is not None:
        ds.flush()
    commit_id = ds._resolve_commit(commit)
    return DatasetView(ds, commit_id, list(range(ds.num_rows(commit_id))))


def view_from_indices(ds, commit: Optional[str], indices: Sequence[int]) -> DatasetView:
    """View whose rows are exactly ``indices`` in the given order."""
    commit_id = ds._resolve_commit(commit)
    n = ds.num_rows(commit_id)
    seen = set()
    for i in indices:
        i = int(i)
        if not (0 <= i < n):
            raise IndexOutOfRangeError(f"view index {i} out of range ({n} rows)")
        if i in seen:
            raise DuplicateIndexError(f"duplicate view index {i}")
        seen.add(i)
    return DatasetView(ds, commit_id, [int(i) for i in indices])


def _infer_schema(view: DatasetView, name: str) -> HtypeSchema:
    """Schema for a materialized column: copied for bare tensors (links become
    embedded payload tensors), inferred from the first row for computed ones."""
    from tensorlake.tql.ast import TensorRef

    if view.projections is None:
        src = view.ds.schema(name)
        d = src.to_dict()
        d["name"] = name
        if src.is_link:
            d["meta"] = None
            d["ndim"] = 1 if src.htype != "image" else None
            d["htype"] = "generic"
            d["dtype"] = "uint8"
        return HtypeSchema.from_dict(d)
    for alias, expr in view.projections:
        if alias == name:
            if isinstance(expr, TensorRef):
                src = view.ds.schema(expr.path)
                d = src.to_dict()
                d["name"] = name
                if src.is_link:
                    d["meta"] = None
                    d["htype"] = "generic"
                    d["dtype"] = "uint8"
                    d["ndim"] = None
                return HtypeSchema.from_dict(d)
            sample = np.asarray(view.value(name, 0)) if len(view) else np.asarray(0.0)
            dtype = sample.dtype
            tag = {
                "int8": "int8", "uint8": "uint8", "int32": "int32", "int64": "int64",
                "float32": "float32", "float64": "float64",
            }.get(dtype.name)
            if tag is None:
                tag = "int64" if dtype.kind in "ib" else "float64"
            return HtypeSchema(name=name, htype="generic", dtype=tag)
    raise KeyError(f"no projection named {name!r}")


def materialize(
    view: DatasetView,
    target: Union[str, StorageProvider],
    policy: Optional[ChunkPolicy] = None,
    root: str = "",
    skip_links: bool = False,
    message: str = "materialize",
) -> "Dataset":
    """Copy a view into a fresh dataset with optimal chunk layout: projected
    values computed, linked samples fetched and embedded, lineage recorded.
    The source dataset is untouched."""
    from tensorlake.dataset import _as_provider, create_dataset
    from tensorlake.layout import KeyLayout

    provider = _as_provider(target)
    if provider.list(KeyLayout(root).prefix):
        raise DestinationNotEmptyError(f"materialize destination {root or '.'!r} is not empty")
    names = view.tensors()
    schemas = {name: _infer_schema(view, name) for name in names}
    dest = create_dataset(provider, schemas, policy=policy or view.ds.policy, root=root)

    for position in range(len(view)):
        row = {}
        for name in names:
            try:
                row[name] = view.value(name, position)
            except LinkResolveFailureError as e:
                if not skip_links:
                    raise LinkResolveFailureError(
                        f"row {view.row_order[position]} of {name!r}: {e}"
                    ) from None
                row[name] = empty_sample(schemas[name])
        for name in names:
            dest.append_stored(name, row[name])
    lineage = {
        "source_root": view.ds.layout.prefix or ".",
        "source_commit": view.commit_id,
        "query_text": view.query_text,
        "row_digest": view.digest(),
        "materialized_at": time.time(),
    }
    provider.put(dest.layout.lineage(), json.dumps(lineage, indent=2).encode("utf-8"))
    dest.commit(message)
    return dest
