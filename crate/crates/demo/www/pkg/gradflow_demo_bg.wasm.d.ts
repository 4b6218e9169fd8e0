/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_fpedemo_free: (a: number, b: number) => void;
export const bimodal_histograms: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const fpedemo_advance: (a: number, b: number) => [number, number];
export const fpedemo_centers: (a: number) => [number, number];
export const fpedemo_density: (a: number) => [number, number];
export const fpedemo_kl: (a: number) => number;
export const fpedemo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
export const fpedemo_target: (a: number) => [number, number];
export const fpedemo_time: (a: number) => number;
export const gd_trajectories: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
