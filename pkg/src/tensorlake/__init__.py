"""tensorlake: chunked columnar tensor storage with built-in version control,
an embedded array-aware query language, and a streaming dataloader."""

from tensorlake.chunk import ChunkPolicy
from tensorlake.dataset import (
    Dataset,
    LinkedSample,
    create_dataset,
    open_dataset,
    register_link_scheme,
)
from tensorlake.htype import HtypeSchema
from tensorlake.loader import Batch, Loader, LoaderConfig, plan_fetch_order, stream
from tensorlake.storage import (
    CountingProvider,
    FilesystemProvider,
    LRUCache,
    MemoryProvider,
    SimulatedRemoteProvider,
    StorageProvider,
    chain,
)
from tensorlake.views import (
    DatasetView,
    identity_view,
    load_view,
    materialize,
    view_from_indices,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ChunkPolicy",
    "CountingProvider",
    "Dataset",
    "DatasetView",
    "FilesystemProvider",
    "HtypeSchema",
    "LRUCache",
    "LinkedSample",
    "Loader",
    "LoaderConfig",
    "MemoryProvider",
    "SimulatedRemoteProvider",
    "StorageProvider",
    "chain",
    "create_dataset",
    "identity_view",
    "load_view",
    "materialize",
    "open_dataset",
    "plan_fetch_order",
    "register_link_scheme",
    "stream",
    "view_from_indices",
]
