//! Tape-free numeric kernels shared by the tape ops and frozen inference.

use alloc::vec;
use alloc::vec::Vec;

/// `a[r×s] · b[s×t]`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let out_row = &mut out[i * t..(i + 1) * t];
        for (m, &aim) in a[i * s..(i + 1) * s].iter().enumerate() {
            if aim == 0.0 {
                continue;
            }
            let b_row = &b[m * t..(m + 1) * t];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aim * bv;
            }
        }
    }
    out
}

/// `g[r×t] · b[s×t]ᵀ`, the left-operand gradient of a matmul.
pub fn matmul_bt(g: &[f64], b: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * s];
    for i in 0..r {
        let g_row = &g[i * t..(i + 1) * t];
        for m in 0..s {
            let b_row = &b[m * t..(m + 1) * t];
            out[i * s + m] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[r×s]ᵀ · g[r×t]`, the right-operand gradient of a matmul.
pub fn matmul_at(a: &[f64], g: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * t];
    for i in 0..r {
        let g_row = &g[i * t..(i + 1) * t];
        for (m, &aim) in a[i * s..(i + 1) * s].iter().enumerate() {
            if aim == 0.0 {
                continue;
            }
            let out_row = &mut out[m * t..(m + 1) * t];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aim * gv;
            }
        }
    }
    out
}

/// Adds `bias[c]` to every row of `x[r×c]` in place.
pub fn add_bias_inplace(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Softmax of one row, stabilised by subtracting the row maximum.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        softmax_inplace(row);
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

/// Index of the largest entry; the lowest index wins ties. `None` when empty.
pub fn argmax(x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
