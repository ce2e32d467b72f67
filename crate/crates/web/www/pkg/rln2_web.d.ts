/* tslint:disable */
/* eslint-disable */

export class Frame {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Copies the pixels out, row-major RGBA.
     */
    pixels(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

export class Studio {
    free(): void;
    [Symbol.dispose](): void;
    guidance(mode: string): Frame;
    constructor(seed: number, size: number);
    /**
     * `lights` is a flat list of `[hue, saturation, intensity, azimuth,
     * elevation]` groups.
     */
    relight(lights: Float64Array, shadows: boolean): Frame;
    subbands(levels: number, gain: number): Frame;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_frame_free: (a: number, b: number) => void;
    readonly __wbg_studio_free: (a: number, b: number) => void;
    readonly frame_height: (a: number) => number;
    readonly frame_pixels: (a: number) => [number, number];
    readonly frame_width: (a: number) => number;
    readonly studio_guidance: (a: number, b: number, c: number) => [number, number, number];
    readonly studio_new: (a: number, b: number) => [number, number, number];
    readonly studio_relight: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly studio_subbands: (a: number, b: number, c: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
