/* tslint:disable */
/* eslint-disable */

export function apollonius_circle(kx: number, ky: number, ox: number, oy: number, lambda: number): Float64Array;

export function decision_map(kx: number, ky: number, ox: number, oy: number, lambda: number, width: number, height: number, extent: number): Uint8Array;

export function prompt_params(channels: number, height: number, width: number, p: number): number;

export function prompted_image(side: number, p: number, _class: number, seed: number, amplitude: number): Uint8Array;

/**
 * JSON `{points, auroc}` for Gaussian scores with the given separation.
 */
export function roc_curve(separation: number, spread: number, n: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly apollonius_circle: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly decision_map: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly prompt_params: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly prompted_image: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly roc_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
