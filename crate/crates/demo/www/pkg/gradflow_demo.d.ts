/* tslint:disable */
/* eslint-disable */

/**
 * A Fokker-Planck density on a 1-D grid, advanced on demand.
 */
export class FpeDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Advances by `duration` using stable sub-steps.
     */
    advance(duration: number): void;
    centers(): Float64Array;
    density(): Float64Array;
    kl(): number;
    /**
     * `variant` is `"fpe"`, `"fpe_weighted"` or `"fpe_bdl"`; the initial
     * density is `N(mean, var)`.
     */
    constructor(potential: string, lo: number, hi: number, n: number, mean: number, _var: number, variant: string);
    target(): Float64Array;
    time(): number;
}

/**
 * Runs ULA and birth-death Langevin from `N(-2, 1/4)` on the symmetric
 * mixture with modes at ±2 and returns `[ula_hist, bdl_hist, target]`
 * concatenated, each with `bins` values on `[-4, 4]`, followed by the two
 * right-mode fractions.
 */
export function bimodal_histograms(seed: bigint, particles: number, horizon: number, tau: number, bins: number): Float64Array;

/**
 * Gradient descent on the double well from each of `inits`. Returns the
 * trajectories back to back, each `steps + 1` states long (fewer if one
 * stops early at a stationary point, in which case it is padded with its
 * last state).
 */
export function gd_trajectories(inits: Float64Array, tau: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_fpedemo_free: (a: number, b: number) => void;
    readonly bimodal_histograms: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly fpedemo_advance: (a: number, b: number) => [number, number];
    readonly fpedemo_centers: (a: number) => [number, number];
    readonly fpedemo_density: (a: number) => [number, number];
    readonly fpedemo_kl: (a: number) => number;
    readonly fpedemo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
    readonly fpedemo_target: (a: number) => [number, number];
    readonly fpedemo_time: (a: number) => number;
    readonly gd_trajectories: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
