//! Raw numeric kernels shared by the recorded tensor ops.
//!
//! Every kernel is deterministic for fixed inputs regardless of the rayon
//! pool size: parallel tasks own disjoint output regions, and reductions go
//! through [`chunked_sum`], which fixes both the chunk boundaries and the
//! order in which partial sums are combined.

use rayon::prelude::*;

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (s, &dim) in strides.iter_mut().zip(shape.iter()).rev() {
        *s = acc;
        acc *= dim;
    }
    strides
}

/// Number of elements for a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Deterministic parallel accumulation: splits `0..n_items` into fixed
/// ranges, lets each range accumulate into its own buffer, then folds the
/// partials in range order. The result is bit-identical for any thread count.
pub fn chunked_sum<F>(n_items: usize, out_len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    const TARGET_CHUNKS: usize = 32;
    if n_items == 0 {
        return vec![0.0; out_len];
    }
    let chunk = n_items.div_ceil(TARGET_CHUNKS).max(1);
    let ranges: Vec<std::ops::Range<usize>> = (0..n_items)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n_items))
        .collect();
    let partials: Vec<Vec<f64>> = ranges
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0; out_len];
            for i in range {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; out_len];
    for partial in partials {
        for (t, v) in total.iter_mut().zip(partial) {
            *t += v;
        }
    }
    total
}

/// Plain 2D matrix product with optional operand transposes.
///
/// `a` is (m, k) unless `ta`, then (k, m); `b` is (k, n) unless `tb`, then
/// (n, k). Writes into `out` (m, n), overwriting it.
pub fn mm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    out.fill(0.0);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            // a is (k, m)
            for p in 0..k {
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b is (n, k)
            for i in 0..m {
                let arow = &a[i * k..i * k + k];
                for j in 0..n {
                    let brow = &b[j * k..j * k + k];
                    let mut s = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        s += av * bv;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
}

/// Batched matmul over pre-resolved operand offsets. Each batch writes a
/// disjoint slab of `out`, so the parallel split cannot affect the result.
pub fn mm_batched(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    a_offsets: &[usize],
    b_offsets: &[usize],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a_offsets.len(), b_offsets.len());
    out.par_chunks_mut(m * n)
        .zip(a_offsets.par_iter().zip(b_offsets.par_iter()))
        .for_each(|(slab, (&ao, &bo))| {
            mm(&a[ao..], &b[bo..], slab, m, k, n, ta, tb);
        });
}

/// 3D cross-correlation with a 3x3x3 window, zero padding 1, channels-last.
/// `x` is (n1, n2, n3, cin); `w` is (3, 3, 3, cin, cout); `y` is
/// (n1, n2, n3, cout).
pub fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    y: &mut [f64],
    dims: [usize; 3],
    cin: usize,
    cout: usize,
) {
    let [n1, n2, n3] = dims;
    let slab = n2 * n3 * cout;
    y.par_chunks_mut(slab).enumerate().for_each(|(i1, yslab)| {
        for i2 in 0..n2 {
            for i3 in 0..n3 {
                let acc = &mut yslab[(i2 * n3 + i3) * cout..(i2 * n3 + i3) * cout + cout];
                acc.copy_from_slice(bias);
                for d1 in 0..3usize {
                    let j1 = i1 as isize + d1 as isize - 1;
                    if j1 < 0 || j1 >= n1 as isize {
                        continue;
                    }
                    for d2 in 0..3usize {
                        let j2 = i2 as isize + d2 as isize - 1;
                        if j2 < 0 || j2 >= n2 as isize {
                            continue;
                        }
                        for d3 in 0..3usize {
                            let j3 = i3 as isize + d3 as isize - 1;
                            if j3 < 0 || j3 >= n3 as isize {
                                continue;
                            }
                            let xbase =
                                (((j1 as usize * n2) + j2 as usize) * n3 + j3 as usize) * cin;
                            let wbase = ((d1 * 3 + d2) * 3 + d3) * cin * cout;
                            for c in 0..cin {
                                let xv = x[xbase + c];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &w[wbase + c * cout..wbase + c * cout + cout];
                                for (o, &wv) in acc.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of conv3d w.r.t. its input.
pub fn conv3d_backward_input(
    grad_y: &[f64],
    w: &[f64],
    grad_x: &mut [f64],
    dims: [usize; 3],
    cin: usize,
    cout: usize,
) {
    let [n1, n2, n3] = dims;
    let slab = n2 * n3 * cin;
    grad_x
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(i1, gxslab)| {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    let acc = &mut gxslab[(i2 * n3 + i3) * cin..(i2 * n3 + i3) * cin + cin];
                    acc.fill(0.0);
                    // y[o] consumed x[i] through tap d where i = o + d - 1,
                    // so o = i + 1 - d.
                    for d1 in 0..3usize {
                        let o1 = i1 as isize + 1 - d1 as isize;
                        if o1 < 0 || o1 >= n1 as isize {
                            continue;
                        }
                        for d2 in 0..3usize {
                            let o2 = i2 as isize + 1 - d2 as isize;
                            if o2 < 0 || o2 >= n2 as isize {
                                continue;
                            }
                            for d3 in 0..3usize {
                                let o3 = i3 as isize + 1 - d3 as isize;
                                if o3 < 0 || o3 >= n3 as isize {
                                    continue;
                                }
                                let gybase = (((o1 as usize * n2) + o2 as usize) * n3
                                    + o3 as usize)
                                    * cout;
                                let wbase = ((d1 * 3 + d2) * 3 + d3) * cin * cout;
                                for c in 0..cin {
                                    let wrow = &w[wbase + c * cout..wbase + c * cout + cout];
                                    let gyrow = &grad_y[gybase..gybase + cout];
                                    let mut s = 0.0;
                                    for (&gv, &wv) in gyrow.iter().zip(wrow) {
                                        s += gv * wv;
                                    }
                                    acc[c] += s;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradients of conv3d w.r.t. the kernel and bias. Deterministic chunked
/// reduction over the leading spatial dimension.
pub fn conv3d_backward_weights(
    x: &[f64],
    grad_y: &[f64],
    dims: [usize; 3],
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let [n1, n2, n3] = dims;
    let wlen = 27 * cin * cout;
    let grad_w = chunked_sum(n1, wlen, |i1, acc| {
        for i2 in 0..n2 {
            for i3 in 0..n3 {
                let gybase = ((i1 * n2 + i2) * n3 + i3) * cout;
                let gyrow = &grad_y[gybase..gybase + cout];
                for d1 in 0..3usize {
                    let j1 = i1 as isize + d1 as isize - 1;
                    if j1 < 0 || j1 >= n1 as isize {
                        continue;
                    }
                    for d2 in 0..3usize {
                        let j2 = i2 as isize + d2 as isize - 1;
                        if j2 < 0 || j2 >= n2 as isize {
                            continue;
                        }
                        for d3 in 0..3usize {
                            let j3 = i3 as isize + d3 as isize - 1;
                            if j3 < 0 || j3 >= n3 as isize {
                                continue;
                            }
                            let xbase =
                                (((j1 as usize * n2) + j2 as usize) * n3 + j3 as usize) * cin;
                            let wbase = ((d1 * 3 + d2) * 3 + d3) * cin * cout;
                            for c in 0..cin {
                                let xv = x[xbase + c];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &mut acc[wbase + c * cout..wbase + c * cout + cout];
                                for (o, &gv) in wrow.iter_mut().zip(gyrow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let voxels = n1 * n2 * n3;
    let grad_b = chunked_sum(voxels, cout, |v, acc| {
        let row = &grad_y[v * cout..v * cout + cout];
        for (o, &gv) in acc.iter_mut().zip(row) {
            *o += gv;
        }
    });
    (grad_w, grad_b)
}

/// Numerically stable softmax over the trailing axis, in place per row.
pub fn softmax_rows_forward(x: &[f64], out: &mut [f64], row_len: usize) {
    out.par_chunks_mut(row_len)
        .zip(x.par_chunks(row_len))
        .for_each(|(orow, xrow)| {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        });
}

/// Jacobian-vector product of the row softmax: dx = s * (g - <g, s>).
pub fn softmax_rows_backward(s: &[f64], grad_y: &[f64], grad_x: &mut [f64], row_len: usize) {
    grad_x
        .par_chunks_mut(row_len)
        .zip(s.par_chunks(row_len).zip(grad_y.par_chunks(row_len)))
        .for_each(|(gx, (srow, grow))| {
            let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
            for ((o, &sv), &gv) in gx.iter_mut().zip(srow).zip(grow) {
                *o = sv * (gv - dot);
            }
        });
}
