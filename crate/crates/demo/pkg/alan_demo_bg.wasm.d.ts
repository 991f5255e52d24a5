/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_frames: (a: number) => number;
export const demo_height: (a: number) => number;
export const demo_interior_ids: (a: number) => [number, number];
export const demo_last_dice: (a: number) => number;
export const demo_last_warnings: (a: number) => [number, number];
export const demo_new: (a: bigint, b: number, c: number) => [number, number, number];
export const demo_parcels: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_segment: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const demo_train: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const demo_width: (a: number) => number;
export const knn_map: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
