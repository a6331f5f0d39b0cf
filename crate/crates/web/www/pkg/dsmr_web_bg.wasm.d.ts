/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_clean: (a: number) => [number, number];
export const demo_degraded: (a: number) => [number, number];
export const demo_generate: (a: number, b: number) => [number, number];
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_refine: (a: number) => [number, number, number, number];
export const demo_refined: (a: number) => [number, number];
export const demo_score: (a: number, b: number) => [number, number, number, number];
export const demo_size: (a: number) => number;
export const demo_steps_done: (a: number) => number;
export const demo_train: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
