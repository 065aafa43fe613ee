"""Storage key layout of a dataset: where metadata, per-version tensor state,
chunks, and locks live under the dataset root prefix."""

from __future__ import annotations


class KeyLayout:
    def __init__(self, root: str = ""):
        root = root.strip("/")
        self.prefix = f"{root}/" if root else ""

    def dataset_meta(self) -> str:
        return f"{self.prefix}dataset_meta.json"

    def vc_info(self) -> str:
        return f"{self.prefix}version_control_info.json"

    def version_dir(self, commit_id: str) -> str:
        return f"{self.prefix}versions/{commit_id}/"

    def tensor_dir(self, commit_id: str, tensor: str) -> str:
        return f"{self.version_dir(commit_id)}{tensor}/"

    def tensor_meta(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}tensor_meta.json"

    def chunk(self, commit_id: str, tensor: str, name: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}chunks/{name}"

    def chunk_encoder(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}chunk_encoder"

    def shape_encoder(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}shape_encoder"

    def tile_map(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}tile_map"

    def sample_ids(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}sample_ids"

    def chunk_set(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}chunk_set.json"

    def commit_diff(self, commit_id: str, tensor: str) -> str:
        return f"{self.tensor_dir(commit_id, tensor)}commit_diff.json"

    def branch_lock(self, branch: str) -> str:
        return f"{self.prefix}branches/{branch}.lock"

    def view(self, view_hash: str) -> str:
        return f"{self.prefix}view_{view_hash}.json"

    def lineage(self) -> str:
        return f"{self.prefix}lineage.json"
