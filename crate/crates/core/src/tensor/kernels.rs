//! Dense numeric kernels behind the autodiff primitives.
//!
//! All matrix products accumulate into their output (`out += ...`) so the
//! same routines serve both forward evaluation (over a zeroed buffer) and
//! additive gradient accumulation. Loops are ordered so the innermost loop
//! walks contiguous memory.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[k,n] += aᵀ · b  with a[m,k], b[m,n]  (gradient w.r.t. the right
/// matmul operand).
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a · bᵀ  with a[m,n], b[k,n]  (gradient w.r.t. the left
/// matmul operand).
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Output spatial extent of a convolution along one axis, or `None` when
/// `(extent + 2·pad − k)` is negative or not divisible by `stride`.
pub(crate) fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Unfold `input[c,h,w]` into `cols[c·k·k, oh·ow]` so that conv2d becomes a
/// single matmul. Out-of-bounds taps read as zero (zero padding).
pub(crate) fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let pos = oh * ow;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * pos;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut cols[row + oi * ow..row + (oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let in_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *o = if jj >= 0 && jj < w as isize {
                            in_row[jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` gradients back onto the input
/// gradient buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [f64],
) {
    debug_assert_eq!(grad_input.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let pos = oh * ow;
    for ch in 0..c {
        let plane = &mut grad_input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * pos;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let col_row = &cols[row + oi * ow..row + (oi + 1) * ow];
                    for (oj, &g) in col_row.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            in_row[jj as usize] += g;
                        }
                    }
                }
            }
        }
    }
}
