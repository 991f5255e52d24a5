/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    frames(): number;
    height(): number;
    interior_ids(): Uint16Array;
    last_dice(): number;
    last_warnings(): string;
    /**
     * Four training and two test sequences of `frames` frames.
     */
    constructor(seed: bigint, noise: number, frames: number);
    /**
     * RGBA parcel map of a test frame; interior parcels drawn opaque.
     */
    parcels(seq: number, frame: number): Uint8Array;
    /**
     * RGBA overlay of the segmentation chain on a test frame: green
     * prediction only, blue annotation only, turquoise overlap.
     */
    segment(seq: number, frame: number, enclave_cutoff: number, closing_radius: number, snake_iters: number): Uint8Array;
    /**
     * Trains a K-parcel head, fits the interior set on the training ES/ED
     * frames and returns the per-epoch losses. Short clips and a larger step
     * than the CLI defaults keep this to a couple of seconds in the browser.
     */
    train(epochs: number, classes: number, seed: bigint): Float64Array;
    width(): number;
}

/**
 * Decision map of the weighted kNN classifier over the plane of 2-D
 * descriptors `[-1.5, 1.5]²`, with the four view clusters placed on the
 * axes. Pixel colour is the winning view, brightness its vote share;
 * stored descriptors are drawn white.
 */
export function knn_map(size: number, k: number, temperature: number, spread: number, seed: bigint): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_frames: (a: number) => number;
    readonly demo_height: (a: number) => number;
    readonly demo_interior_ids: (a: number) => [number, number];
    readonly demo_last_dice: (a: number) => number;
    readonly demo_last_warnings: (a: number) => [number, number];
    readonly demo_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly demo_parcels: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_segment: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_train: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly knn_map: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
