/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_frame_free: (a: number, b: number) => void;
export const __wbg_studio_free: (a: number, b: number) => void;
export const frame_height: (a: number) => number;
export const frame_pixels: (a: number) => [number, number];
export const frame_width: (a: number) => number;
export const studio_guidance: (a: number, b: number, c: number) => [number, number, number];
export const studio_new: (a: number, b: number) => [number, number, number];
export const studio_relight: (a: number, b: number, c: number, d: number) => [number, number, number];
export const studio_subbands: (a: number, b: number, c: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
