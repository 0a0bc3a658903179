/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const apollonius_circle: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const decision_map: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const prompt_params: (a: number, b: number, c: number, d: number) => [number, number, number];
export const prompted_image: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const roc_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
