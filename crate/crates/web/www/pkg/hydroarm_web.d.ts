/* tslint:disable */
/* eslint-disable */

/**
 * Joint positions and manipulability for joint angles `q` (5 values).
 */
export function arm_pose(q: Float64Array): string;

/**
 * Closed-loop Jacobian + PID tracking of an 8 s axis profile on the plant.
 * `preset`: mid_workspace | near_extension | low_boom; `axis`: x | y | z.
 */
export function dls_track(preset: string, axis: string, speed: number, k: number): string;

/**
 * Rate response of one powered joint (0, 2, 3 or 4) to a duty step,
 * from rest or from steady motion at half the duty.
 */
export function step_response(joint: number, duty: number, from_motion: boolean, seconds: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly arm_pose: (a: number, b: number) => [number, number, number, number];
    readonly dls_track: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly step_response: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
