//! Matrix kernels shared by the tape's forward and backward passes.
//!
//! Every output element is a reduction in a fixed index order, so results are
//! bit-identical whether or not rayon splits the row loop across threads.

use super::Element;
use rayon::prelude::*;

/// Work threshold below which the row loop stays sequential.
const PAR_FLOPS: usize = 1 << 17;

/// `out[m,n] += x[m,k] @ w[k,n]`
pub fn matmul_acc<T: Element>(m: usize, k: usize, n: usize, x: &[T], w: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        let xr = &x[i * k..(i + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            let wr = &w[kk * n..(kk + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(wr) {
                *o += a * b;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// Serial version for callers already running inside a parallel region.
pub fn matmul_acc_serial<T: Element>(m: usize, k: usize, n: usize, x: &[T], w: &[T], out: &mut [T]) {
    debug_assert_eq!(out.len(), m * n);
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        let xr = &x[i * k..(i + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            let wr = &w[kk * n..(kk + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(wr) {
                *o += a * b;
            }
        }
    }
}

/// `out[m,k] += y[m,n] @ transpose(w[k,n])`
///
/// The dot products run over eight independent lanes (then a fixed-order
/// lane sum) so the compiler can vectorize the reduction; the order is
/// fixed, so results stay bit-deterministic.
pub fn matmul_bt_acc<T: Element>(m: usize, k: usize, n: usize, y: &[T], w: &[T], out: &mut [T]) {
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |i: usize, out_row: &mut [T]| {
        let yr = &y[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let wr = &w[kk * n..(kk + 1) * n];
            *o += dot(yr, wr);
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(i, r);
        }
    }
}

/// Serial version for callers already running inside a parallel region.
pub fn matmul_bt_acc_serial<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    y: &[T],
    w: &[T],
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * k);
    for (i, out_row) in out.chunks_mut(k).enumerate() {
        let yr = &y[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let wr = &w[kk * n..(kk + 1) * n];
            *o += dot(yr, wr);
        }
    }
}

/// Lane-blocked dot product with a fixed accumulation order.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut total = T::ZERO;
    for l in 0..LANES {
        total += acc[l];
    }
    total + tail
}

/// `out[k,n] += transpose(x[m,k]) @ y[m,n]`
pub fn matmul_at_acc<T: Element>(m: usize, k: usize, n: usize, x: &[T], y: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |kk: usize, out_row: &mut [T]| {
        for i in 0..m {
            let a = x[i * k + kk];
            let yr = &y[i * n..(i + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(yr) {
                *o += a * b;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, r)| row(kk, r));
    } else {
        for (kk, r) in out.chunks_mut(n).enumerate() {
            row(kk, r);
        }
    }
}

/// Serial version for callers already running inside a parallel region.
pub fn matmul_at_acc_serial<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    x: &[T],
    y: &[T],
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), k * n);
    for (kk, out_row) in out.chunks_mut(n).enumerate() {
        for i in 0..m {
            let a = x[i * k + kk];
            let yr = &y[i * n..(i + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(yr) {
                *o += a * b;
            }
        }
    }
}

/// Softmax over the trailing dimension, in place. Handles `-inf` entries
/// (they map to exactly 0); a row of all `-inf` maps to all zeros. Rows are
/// independent, so large inputs split across threads without changing any
/// per-row arithmetic.
pub fn softmax_rows_inplace<T: Element>(data: &mut [T], n: usize) {
    debug_assert!(n > 0);
    let one_row = |row: &mut [T]| {
        let mut mx = T::NEG_INFINITY;
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        if !(mx > T::NEG_INFINITY) {
            for v in row.iter_mut() {
                *v = T::ZERO;
            }
            return;
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    };
    if data.len() >= PAR_FLOPS {
        data.par_chunks_mut(n).for_each(one_row);
    } else {
        for row in data.chunks_mut(n) {
            one_row(row);
        }
    }
}

/// Run a function over independent, equal-size slices of two parallel
/// buffers (used for per-head attention products).
pub fn for_each_slice_pair<T: Element>(
    a: &[T],
    a_slice: usize,
    out: &mut [T],
    out_slice: usize,
    f: impl Fn(usize, &[T], &mut [T]) + Send + Sync,
) {
    let slices = out.len() / out_slice;
    if out.len() >= PAR_FLOPS && slices > 1 {
        out.par_chunks_mut(out_slice)
            .enumerate()
            .for_each(|(s, o)| f(s, &a[s * a_slice..(s + 1) * a_slice], o));
    } else {
        for (s, o) in out.chunks_mut(out_slice).enumerate() {
            f(s, &a[s * a_slice..(s + 1) * a_slice], o);
        }
    }
}

/// Parallel elementwise map over chunks; per-element work is independent.
pub fn par_map_chunks<T: Element>(data: &mut [T], f: impl Fn(usize, &mut [T]) + Send + Sync) {
    const CHUNK: usize = 16_384;
    if data.len() >= PAR_FLOPS {
        data.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, chunk)| f(ci * CHUNK, chunk));
    } else {
        f(0, data);
    }
}

/// log(sum(exp(values))) with max subtraction.
pub fn logsumexp<T: Element>(values: impl Iterator<Item = T> + Clone) -> T {
    let mut mx = T::NEG_INFINITY;
    for v in values.clone() {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in values {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}
