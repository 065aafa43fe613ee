"""In-format version control: a branching commit tree where each commit's
directory holds only the chunks written in that commit (copy-on-write), plus
per-tensor chunk_set and commit-diff records that make traversal and version
comparison cheap."""

from __future__ import annotations

import json
import secrets
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional

from tensorlake.errors import (
    ChunkNotFoundError,
    MergeConflictError,
    NothingToCommitError,
    SchemaMismatchError,
    UnknownBranchError,
    UnknownCommitError,
    UnknownTargetError,
)
from tensorlake.layout import KeyLayout
from tensorlake.storage import StorageProvider


def new_commit_id() -> str:
    return secrets.token_hex(16)


@dataclass
class CommitDiff:
    """Per-tensor record of what a commit changed: appended index ranges and
    the set of in-place updated indices."""

    added: list[list[int]] = field(default_factory=list)  # [start, end) ranges
    updated: set[int] = field(default_factory=set)

    def record_append(self, start: int, count: int) -> None:
        if self.added and self.added[-1][1] == start:
            self.added[-1][1] = start + count
        else:
            self.added.append([start, start + count])

    def record_update(self, index: int) -> None:
        self.updated.add(index)

    def added_indices(self) -> set[int]:
        out: set[int] = set()
        for start, end in self.added:
            out.update(range(start, end))
        return out

    @property
    def empty(self) -> bool:
        return not self.added and not self.updated

    def to_dict(self) -> dict:
        return {"added": [list(r) for r in self.added], "updated": sorted(self.updated)}

    @classmethod
    def from_dict(cls, d: dict) -> "CommitDiff":
        return cls(added=[list(r) for r in d.get("added", [])], updated=set(d.get("updated", [])))


@dataclass
class CommitNode:
    commit_id: str
    parent: Optional[str]
    branch: str
    message: Optional[str] = None
    timestamp: Optional[float] = None
    committed: bool = False  # frozen snapshot vs writable working node


class VersionTree:
    """Commit graph plus branch heads. The head node of every branch is its
    working (uncommitted) state; commit freezes the head and starts a fresh
    child, so chunk resolution treats working state like any other commit."""

    def __init__(self, provider: StorageProvider, layout: KeyLayout):
        self.provider = provider
        self.layout = layout
        self.nodes: dict[str, CommitNode] = {}
        self.branches: dict[str, str] = {}
        self._chunk_sets: dict[tuple[str, str], set[str]] = {}
        self._commit_diffs: dict[tuple[str, str], CommitDiff] = {}

    # --- construction / persistence ---------------------------------------

    @classmethod
    def create(cls, provider: StorageProvider, layout: KeyLayout) -> "VersionTree":
        tree = cls(provider, layout)
        root = CommitNode(commit_id=new_commit_id(), parent=None, branch="main")
        tree.nodes[root.commit_id] = root
        tree.branches["main"] = root.commit_id
        tree.save()
        return tree

    @classmethod
    def load(cls, provider: StorageProvider, layout: KeyLayout) -> "VersionTree":
        tree = cls(provider, layout)
        info = json.loads(provider.get(layout.vc_info()).decode("utf-8"))
        for commit_id, raw in info["commits"].items():
            tree.nodes[commit_id] = CommitNode(
                commit_id=commit_id,
                parent=raw["parent"],
                branch=raw["branch"],
                message=raw["message"],
                timestamp=raw["timestamp"],
                committed=raw.get("committed", True),
            )
        tree.branches = dict(info["branches"])
        return tree

    def save(self) -> None:
        info = {
            "branches": self.branches,
            "commits": {
                c.commit_id: {
                    "parent": c.parent,
                    "branch": c.branch,
                    "message": c.message,
                    "timestamp": c.timestamp,
                    "committed": c.committed,
                }
                for c in self.nodes.values()
            },
        }
        self.provider.put(self.layout.vc_info(), json.dumps(info, indent=2).encode("utf-8"))

    # --- basic queries ------------------------------------------------------

    def node(self, commit_id: str) -> CommitNode:
        try:
            return self.nodes[commit_id]
        except KeyError:
            raise UnknownCommitError(f"unknown commit {commit_id!r}") from None

    def head_of(self, branch: str) -> str:
        try:
            return self.branches[branch]
        except KeyError:
            raise UnknownBranchError(f"unknown branch {branch!r}") from None

    def resolve_target(self, target: str) -> tuple[Optional[str], str]:
        """Branch name or commit id -> (branch or None, commit id)."""
        if target in self.branches:
            return target, self.branches[target]
        if target in self.nodes:
            return None, target
        raise UnknownTargetError(f"unknown branch or commit {target!r}")

    def ancestry(self, commit_id: str) -> Iterator[CommitNode]:
        """The commit and its ancestors, nearest first."""
        node = self.node(commit_id)
        while node is not None:
            yield node
            node = self.nodes[node.parent] if node.parent is not None else None

    def lowest_common_ancestor(self, a: str, b: str) -> str:
        seen = {n.commit_id for n in self.ancestry(a)}
        for node in self.ancestry(b):
            if node.commit_id in seen:
                return node.commit_id
        raise UnknownCommitError(f"no common ancestor between {a!r} and {b!r}")

    def path_from(self, commit_id: str, ancestor: str) -> list[CommitNode]:
        """Nodes from ``commit_id`` down to (excluding) ``ancestor``."""
        path = []
        for node in self.ancestry(commit_id):
            if node.commit_id == ancestor:
                return path
            path.append(node)
        raise UnknownCommitError(f"{ancestor!r} is not an ancestor of {commit_id!r}")

    # --- chunk sets and commit diffs ---------------------------------------

    def chunk_set(self, commit_id: str, tensor: str) -> set[str]:
        key = (commit_id, tensor)
        if key not in self._chunk_sets:
            try:
                data = self.provider.get(self.layout.chunk_set(commit_id, tensor))
                self._chunk_sets[key] = set(json.loads(data.decode("utf-8")))
            except KeyError:
                self._chunk_sets[key] = set()
        return self._chunk_sets[key]

    def commit_diff(self, commit_id: str, tensor: str) -> CommitDiff:
        key = (commit_id, tensor)
        if key not in self._commit_diffs:
            try:
                data = self.provider.get(self.layout.commit_diff(commit_id, tensor))
                self._commit_diffs[key] = CommitDiff.from_dict(json.loads(data.decode("utf-8")))
            except KeyError:
                self._commit_diffs[key] = CommitDiff()
        return self._commit_diffs[key]

    def store_records(self, commit_id: str, tensor: str, chunk_set: set[str], diff: CommitDiff) -> None:
        # keep object identity: the working state mutates these between flushes
        self._chunk_sets[(commit_id, tensor)] = chunk_set
        self._commit_diffs[(commit_id, tensor)] = diff
        self.provider.put(
            self.layout.chunk_set(commit_id, tensor),
            json.dumps(sorted(chunk_set)).encode("utf-8"),
        )
        self.provider.put(
            self.layout.commit_diff(commit_id, tensor),
            json.dumps(diff.to_dict()).encode("utf-8"),
        )

    # --- traversal ----------------------------------------------------------

    def resolve_chunk(self, tensor: str, chunk_name: str, commit_id: str) -> str:
        """Walk from ``commit_id`` towards the root; the first commit whose
        chunk_set holds ``chunk_name`` owns the bytes. Returns the storage key."""
        for node in self.ancestry(commit_id):
            if chunk_name in self.chunk_set(node.commit_id, tensor):
                return self.layout.chunk(node.commit_id, tensor, chunk_name)
        raise ChunkNotFoundError(
            f"chunk {chunk_name!r} of tensor {tensor!r} unreachable from commit {commit_id!r}"
        )

    def find_tensor_state(self, tensor: str, commit_id: str) -> Optional[str]:
        """Nearest ancestor (inclusive) that wrote this tensor's metadata."""
        for node in self.ancestry(commit_id):
            if self.provider.exists(self.layout.tensor_meta(node.commit_id, tensor)):
                return node.commit_id
        return None

    # --- commit / checkout / branch ----------------------------------------

    def commit_head(self, branch: str, message: str, dirty: bool, allow_empty: bool) -> tuple[str, str]:
        """Freeze the branch head, start a new working child. Returns
        (frozen commit id, new working head id)."""
        head_id = self.head_of(branch)
        head = self.node(head_id)
        if not dirty and not allow_empty:
            raise NothingToCommitError(f"no changes to commit on branch {branch!r}")
        head.message = message
        head.timestamp = time.time()
        head.committed = True
        child = CommitNode(commit_id=new_commit_id(), parent=head_id, branch=branch)
        self.nodes[child.commit_id] = child
        self.branches[branch] = child.commit_id
        self.save()
        return head_id, child.commit_id

    def create_branch(self, name: str, at_commit: str) -> str:
        """Fork a new branch whose working head's parent is ``at_commit``."""
        if name in self.branches:
            raise UnknownTargetError(f"branch {name!r} already exists")
        base = self.node(at_commit)
        if not base.committed:
            # fork from the last frozen state beneath a clean working head
            at_commit = base.parent if base.parent is not None else at_commit
        head = CommitNode(commit_id=new_commit_id(), parent=at_commit, branch=name)
        self.nodes[head.commit_id] = head
        self.branches[name] = head.commit_id
        self.save()
        return head.commit_id

    def log(self, commit_id: str) -> list[CommitNode]:
        return [n for n in self.ancestry(commit_id) if n.committed]


# --- diff and merge ---------------------------------------------------------


def accumulate_diff(tree: VersionTree, commit_id: str, ancestor: str, tensors: list[str]) -> dict[str, CommitDiff]:
    """Union of commit_diff records along the path ancestor -> commit_id."""
    out = {t: CommitDiff() for t in tensors}
    for node in reversed(tree.path_from(commit_id, ancestor)):
        for tensor in tensors:
            diff = tree.commit_diff(node.commit_id, tensor)
            for start, end in diff.added:
                out[tensor].record_append(start, end - start)
            out[tensor].updated.update(diff.updated)
    return out


def diff_commits(tree: VersionTree, a: str, b: str, tensors: list[str]) -> dict[str, dict]:
    """Per-tensor added/updated on each side relative to the lowest common
    ancestor; assembled purely from commit-diff records, no chunk data read."""
    tree.node(a)
    tree.node(b)
    ancestor = tree.lowest_common_ancestor(a, b)
    side_a = accumulate_diff(tree, a, ancestor, tensors)
    side_b = accumulate_diff(tree, b, ancestor, tensors)
    return {
        tensor: {
            "ancestor": ancestor,
            "added_a": sorted(side_a[tensor].added_indices()),
            "added_b": sorted(side_b[tensor].added_indices()),
            "updated_a": sorted(side_a[tensor].updated),
            "updated_b": sorted(side_b[tensor].updated),
        }
        for tensor in tensors
    }


def merge_branches(ds, source: str, policy: str = "fail_on_conflict", message: Optional[str] = None) -> str:
    """Merge ``source`` branch into the dataset's current branch.

    Rows are matched by sample id, never by position: samples appended on
    source that the current branch has not seen are appended; samples updated
    on source are rewritten in place; a sample updated on both sides since the
    common ancestor is a conflict resolved per ``policy`` (ours keeps the
    current value, theirs takes the source's, fail_on_conflict raises).
    """
    if policy not in ("ours", "theirs", "fail_on_conflict"):
        raise ValueError(f"unknown merge policy {policy!r}")
    tree: VersionTree = ds.tree
    if source not in tree.branches:
        raise UnknownBranchError(f"unknown branch {source!r}")
    if ds.branch is None:
        raise UnknownBranchError("cannot merge into a detached (read-only) checkout")
    ds.flush()

    ours_head = tree.head_of(ds.branch)
    theirs_head = tree.head_of(source)
    if sorted(ds.tensors(commit=ours_head)) != sorted(ds.tensors(commit=theirs_head)):
        raise SchemaMismatchError(
            "branches declare different tensor sets; merge of schema changes is unsupported"
        )
    tensors = ds.tensors(commit=ours_head)
    ancestor = tree.lowest_common_ancestor(ours_head, theirs_head)
    ours_diff = accumulate_diff(tree, ours_head, ancestor, tensors)
    theirs_diff = accumulate_diff(tree, theirs_head, ancestor, tensors)

    # conflicts: the same sample id updated on both sides since the ancestor
    conflicts: dict[str, set[int]] = {}
    plans: dict[str, dict] = {}
    for tensor in tensors:
        our_ids = ds.sample_id_list(tensor, commit=ours_head)
        their_ids = ds.sample_id_list(tensor, commit=theirs_head)
        our_pos = {sid: i for i, sid in enumerate(our_ids)}
        our_updated_ids = {our_ids[i] for i in ours_diff[tensor].updated if i < len(our_ids)}
        their_updated_ids = {
            their_ids[i] for i in theirs_diff[tensor].updated if i < len(their_ids)
        }
        both = our_updated_ids & their_updated_ids
        if both:
            conflicts[tensor] = both
        plans[tensor] = {
            "their_ids": their_ids,
            "our_pos": our_pos,
            "their_updated_ids": their_updated_ids,
            "conflict_ids": both,
        }
    if conflicts and policy == "fail_on_conflict":
        raise MergeConflictError({t: sorted(ids) for t, ids in conflicts.items()})

    for tensor, plan in plans.items():
        their_ids = plan["their_ids"]
        our_pos = plan["our_pos"]
        for their_index, sid in enumerate(their_ids):
            if sid not in our_pos:
                # added on source (or on an unmerged path): append, keep the id
                value = ds.read(tensor, their_index, commit=theirs_head, resolve_links=False)
                ds.append_with_id(tensor, value, sid)
            elif sid in plan["their_updated_ids"]:
                if sid in plan["conflict_ids"] and policy == "ours":
                    continue
                value = ds.read(tensor, their_index, commit=theirs_head, resolve_links=False)
                ds.update_stored(tensor, our_pos[sid], value)

    return ds.commit(message or f"merge {source!r} (policy={policy})", allow_empty=True)
