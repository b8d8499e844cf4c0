/* tslint:disable */
/* eslint-disable */

/**
 * JSON `{spearman, mean_abs_error, exact_slice, approx_slice}`.
 */
export function agreement(seed: number, kind: string, size: number, h: number): string;

export function image_slice(seed: number, kind: string, size: number): Float32Array;

export function mask_slice(seed: number, kind: string, size: number): Float32Array;

/**
 * JSON `{mode, dice, slice}`.
 */
export function roundtrip(seed: number, kind: string, size: number, mode: string, h: number): string;

export function signed_slice(seed: number, kind: string, size: number, approx: boolean, h: number): Float32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly agreement: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly image_slice: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly mask_slice: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly roundtrip: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly signed_slice: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
