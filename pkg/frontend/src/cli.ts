import { spawnSync } from "node:child_process";

/** Error surfaced by the CLI's structured stderr payload. */
export class TensorLakeCliError extends Error {
    readonly kind: string;

    constructor(kind: string, message: string) {
        super(message);
        this.name = kind;
        this.kind = kind;
    }
}

export interface CliOptions {
    /** Command vector used to launch the CLI (default: python3 -m tensorlake). */
    command?: string[];
    env?: Record<string, string>;
}

export interface CliResult {
    raw: string;
    data: any;
}

/** Runs tensorlake subcommands and parses their JSON output. */
export class CliRunner {
    private readonly command: string[];
    private readonly env: Record<string, string>;

    constructor(options: CliOptions = {}) {
        this.command = options.command ?? ["python3", "-m", "tensorlake"];
        this.env = options.env ?? {};
    }

    run(args: string[], parse: boolean = true): CliResult {
        const [exe, ...prefix] = this.command;
        const proc = spawnSync(exe, [...prefix, ...args], {
            encoding: "utf-8",
            maxBuffer: 256 * 1024 * 1024,
            env: { ...process.env, ...this.env },
        });
        if (proc.error) {
            throw new TensorLakeCliError("SpawnError", String(proc.error));
        }
        if (proc.status !== 0) {
            try {
                const payload = JSON.parse(proc.stderr.trim());
                throw new TensorLakeCliError(payload.error, payload.message);
            } catch (e) {
                if (e instanceof TensorLakeCliError) throw e;
                throw new TensorLakeCliError(
                    "CliFailure",
                    `exit ${proc.status}: ${proc.stderr.trim() || proc.stdout.trim()}`,
                );
            }
        }
        const raw = proc.stdout;
        return { raw, data: parse && raw.trim() ? JSON.parse(raw) : null };
    }

    json(args: string[]): CliResult {
        return this.run([...args, "--format", "json"]);
    }
}
