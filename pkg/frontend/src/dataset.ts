import { CliOptions, CliResult, CliRunner } from "./cli.js";

export interface QueryView {
    rows: number[];
    commit: string;
    count: number;
    columns: Record<string, any[]>;
    groupBoundaries?: number[];
    raw: string;
}

export interface LoaderOptions {
    batchSize?: number;
    tensors?: string[];
}

export interface Batch {
    indices: number[];
    columns: Record<string, any[]>;
}

export interface DiffEntry {
    ancestor: string;
    added_a: number[];
    added_b: number[];
    updated_a: number[];
    updated_b: number[];
}

/**
 * Handle to a dataset managed by the tensorlake core. Every operation
 * delegates to the CLI's JSON surface; no format logic lives here.
 */
export class BoundDataset {
    readonly root: string;
    branch: string;
    private readonly cli: CliRunner;
    /** Raw stdout of the most recent call, for output-parity checks. */
    lastRaw: string = "";

    private constructor(root: string, branch: string, cli: CliRunner) {
        this.root = root;
        this.branch = branch;
        this.cli = cli;
    }

    static create(
        root: string,
        tensors: Record<string, string>,
        options: CliOptions & { minBytes?: number; maxBytes?: number } = {},
    ): BoundDataset {
        const ds = new BoundDataset(root, "main", new CliRunner(options));
        const spec = Object.entries(tensors)
            .map(([name, htype]) => `${name}:${htype}`)
            .join(",");
        const args = ["--root", root, "init", "--tensors", spec];
        if (options.minBytes) args.push("--min-bytes", String(options.minBytes));
        if (options.maxBytes) args.push("--max-bytes", String(options.maxBytes));
        ds.exec(args);
        return ds;
    }

    static open(root: string, options: CliOptions = {}): BoundDataset {
        const ds = new BoundDataset(root, "main", new CliRunner(options));
        ds.stats(); // fails fast when no dataset lives at the root
        return ds;
    }

    /** Run any subcommand against this dataset; returns the parsed JSON. */
    exec(args: string[]): any {
        const result: CliResult = this.cli.json(["--root", this.root, "--branch", this.branch, ...args]);
        this.lastRaw = result.raw;
        return result.data;
    }

    stats(): any {
        return this.exec(["stats"]);
    }

    rows(): number {
        const stats = this.stats();
        const counts = Object.values(stats.tensors).map((t: any) => t.rows as number);
        return counts.length ? Math.min(...counts) : 0;
    }

    ingestRandom(shape: number[], count: number, seed: number = 0): any {
        return this.exec([
            "ingest", "--random", shape.join("x"), "--count", String(count), "--seed", String(seed),
        ]);
    }

    /** Append image files (payload bytes stored pass-through). */
    ingestFiles(directory: string, labelsFile?: string): any {
        const args = ["ingest", "--images", directory];
        if (labelsFile) args.push("--labels", labelsFile);
        return this.exec(args);
    }

    read(tensor: string, indices: number[], version?: string): any[] {
        const args = ["cat", tensor, ...indices.map(String)];
        if (version) args.push("--version", version);
        return this.exec(args).values;
    }

    commit(message: string): string {
        return this.exec(["commit", "-m", message]).commit;
    }

    checkout(target: string, create: boolean = false): void {
        const args = ["checkout", target];
        if (create) args.push("-b");
        this.exec(args);
        this.branch = target;
    }

    branches(): Record<string, string> {
        return this.exec(["branch"]).branches;
    }

    diff(a: string, b: string): Record<string, DiffEntry> {
        return this.exec(["diff", a, b]).tensors;
    }

    merge(source: string, policy: "ours" | "theirs" | "fail_on_conflict" = "fail_on_conflict"): string {
        return this.exec(["merge", source, "--policy", policy]).commit;
    }

    log(): any[] {
        return this.exec(["log"]).commits;
    }

    query(text: string, version?: string): QueryView {
        const args = ["query", text];
        if (version) args.push("--version", version);
        const data = this.exec(args);
        return {
            rows: data.rows,
            commit: data.commit,
            count: data.count,
            columns: data.columns,
            groupBoundaries: data.group_boundaries,
            raw: this.lastRaw,
        };
    }

    /**
     * Stream batches of decoded samples for a view (or the whole dataset),
     * as an async iterator in row order.
     */
    async *loader(view?: QueryView, options: LoaderOptions = {}): AsyncGenerator<Batch, void, void> {
        const batchSize = options.batchSize ?? 32;
        const stats = this.stats();
        const tensors = options.tensors ?? Object.keys(stats.tensors);
        const rowOrder = view?.rows ?? [...Array(this.rows()).keys()];
        const version = view?.commit;
        for (let start = 0; start < rowOrder.length; start += batchSize) {
            const indices = rowOrder.slice(start, start + batchSize);
            const columns: Record<string, any[]> = {};
            for (const tensor of tensors) {
                columns[tensor] = this.read(tensor, indices, version);
            }
            yield { indices, columns };
        }
    }
}
