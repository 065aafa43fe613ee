export { CliRunner, CliOptions, CliResult, TensorLakeCliError } from "./cli.js";
export {
    Batch,
    BoundDataset,
    DiffEntry,
    LoaderOptions,
    QueryView,
} from "./dataset.js";

import { CliOptions } from "./cli.js";
import { BoundDataset } from "./dataset.js";

/** Create an empty dataset at `root`. */
export function create(
    root: string,
    tensors: Record<string, string>,
    options?: CliOptions & { minBytes?: number; maxBytes?: number },
): BoundDataset {
    return BoundDataset.create(root, tensors, options ?? {});
}

/** Open an existing dataset at `root`. */
export function open(root: string, options?: CliOptions): BoundDataset {
    return BoundDataset.open(root, options ?? {});
}

/** Run a query and return the resulting view. */
export function query(ds: BoundDataset, text: string, version?: string) {
    return ds.query(text, version);
}

/** Stream batches from a dataset or query view. */
export function loader(ds: BoundDataset, view?: ReturnType<BoundDataset["query"]>, options?: { batchSize?: number; tensors?: string[] }) {
    return ds.loader(view, options);
}
