/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    clean(): Float32Array;
    /**
     * Degraded heights with NaN at holes.
     */
    degraded(): Float32Array;
    /**
     * Replaces the displayed scene; the model is kept.
     */
    generate(seed: number): void;
    /**
     * Builds the training scenes and an untrained model, then generates
     * scene `seed`.
     */
    constructor(seed: number, noise: number);
    /**
     * Refines the degraded scene and returns a one-line MAE comparison.
     */
    refine(): string;
    /**
     * Refined heights, empty before the first `refine`.
     */
    refined(): Float32Array;
    /**
     * Held-out metrics over `scenes` fresh scenes.
     */
    score(scenes: number): string;
    size(): number;
    steps_done(): number;
    /**
     * Runs `steps` more Adam steps and returns the last image loss.
     */
    train(steps: number): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_clean: (a: number) => [number, number];
    readonly demo_degraded: (a: number) => [number, number];
    readonly demo_generate: (a: number, b: number) => [number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_refine: (a: number) => [number, number, number, number];
    readonly demo_refined: (a: number) => [number, number];
    readonly demo_score: (a: number, b: number) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_steps_done: (a: number) => number;
    readonly demo_train: (a: number, b: number) => [number, number, number];
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
