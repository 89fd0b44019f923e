//! Shared test oracles: brute-force attention, a straight-line forward
//! pass, and a from-scratch reimplementation of the projection procedure.
//! Everything here is written with plain loops, independent of the library
//! implementations, so agreement is a genuine cross-check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use slicerec_core::model::ModelState;

/// From-scratch projection: anchor where the adjacent slices agree, then
/// repeatedly assign the unassigned voxels holding the round's maximum
/// number of observed/assigned neighbors (2 across-slice + assigned 4-window
/// in slice), each taking the candidate ID nearest its predicted vector in
/// L2 (ties to the lowest ID), scanning row-major with immediate
/// visibility.
pub fn projection_oracle(
    rows: usize,
    cols: usize,
    pred: &[f64],
    prev: &[u32],
    next: &[u32],
    dict: &BTreeMap<u32, [f64; 3]>,
) -> Vec<u32> {
    let mut state: Vec<Option<u32>> = (0..rows * cols)
        .map(|i| if prev[i] == next[i] { Some(prev[i]) } else { None })
        .collect();

    let count_at = |state: &[Option<u32>], r: usize, c: usize| -> usize {
        let mut n = 2usize; // prev and next are always observed
        if r > 0 && state[(r - 1) * cols + c].is_some() {
            n += 1;
        }
        if r + 1 < rows && state[(r + 1) * cols + c].is_some() {
            n += 1;
        }
        if c > 0 && state[r * cols + c - 1].is_some() {
            n += 1;
        }
        if c + 1 < cols && state[r * cols + c + 1].is_some() {
            n += 1;
        }
        n
    };

    while state.iter().any(|s| s.is_none()) {
        let mut round_max = 0;
        for r in 0..rows {
            for c in 0..cols {
                if state[r * cols + c].is_none() {
                    round_max = round_max.max(count_at(&state, r, c));
                }
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let idx = r * cols + c;
                if state[idx].is_some() || count_at(&state, r, c) < round_max {
                    continue;
                }
                let mut ids = vec![prev[idx], next[idx]];
                if r > 0 {
                    if let Some(id) = state[(r - 1) * cols + c] {
                        ids.push(id);
                    }
                }
                if r + 1 < rows {
                    if let Some(id) = state[(r + 1) * cols + c] {
                        ids.push(id);
                    }
                }
                if c > 0 {
                    if let Some(id) = state[idx - 1] {
                        ids.push(id);
                    }
                }
                if c + 1 < cols {
                    if let Some(id) = state[idx + 1] {
                        ids.push(id);
                    }
                }
                ids.sort_unstable();
                ids.dedup();
                let p = &pred[idx * 3..idx * 3 + 3];
                let mut choice = (f64::INFINITY, u32::MAX);
                for id in ids {
                    let v = dict[&id];
                    let d = (p[0] - v[0]).powi(2) + (p[1] - v[1]).powi(2) + (p[2] - v[2]).powi(2);
                    if d < choice.0 || (d == choice.0 && id < choice.1) {
                        choice = (d, id);
                    }
                }
                state[idx] = Some(choice.1);
            }
        }
    }
    state.into_iter().map(|s| s.unwrap()).collect()
}

/// Multi-head attention on a single fiber, computed exactly as written:
/// per-head projections, scaled scores, softmax, context, concat, output
/// projection. `xs` is (len, d) row-major; weights are (d, d) packed with
/// head h occupying columns h*dh..(h+1)*dh.
pub fn fiber_attention(
    xs: &[f64],
    len: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; len * d];
    for h in 0..heads {
        let col0 = h * dh;
        let project = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; len * dh];
            for t in 0..len {
                for j in 0..dh {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += xs[t * d + i] * w[i * d + col0 + j];
                    }
                    out[t * dh + j] = s;
                }
            }
            out
        };
        let q = project(wq);
        let k = project(wk);
        let v = project(wv);
        for t in 0..len {
            // scores for query t against all keys
            let mut scores = vec![0.0; len];
            for u in 0..len {
                let mut s = 0.0;
                for j in 0..dh {
                    s += q[t * dh + j] * k[u * dh + j];
                }
                scores[u] = s * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for e in exps.iter_mut() {
                *e /= sum;
            }
            for j in 0..dh {
                let mut ctx = 0.0;
                for u in 0..len {
                    ctx += exps[u] * v[u * dh + j];
                }
                concat[t * d + col0 + j] = ctx;
            }
        }
    }
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += concat[t * d + i] * wo[i * d + j];
            }
            out[t * d + j] = s;
        }
    }
    out
}

/// Axial attention over a channels-last tensor by looping over fibers.
pub fn axial_attention_oracle(
    x: &[f64],
    spatial: &[usize],
    d: usize,
    axis: usize,
    heads: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> Vec<f64> {
    let len = spatial[axis];
    let mut out = vec![0.0; x.len()];
    // iterate over every combination of the non-axis coordinates
    let mut others: Vec<usize> = (0..spatial.len()).filter(|&a| a != axis).collect();
    others.sort_unstable();
    let other_dims: Vec<usize> = others.iter().map(|&a| spatial[a]).collect();
    let n_fibers: usize = other_dims.iter().product();
    let strides = {
        let mut s = vec![1usize; spatial.len()];
        for i in (0..spatial.len() - 1).rev() {
            s[i] = s[i + 1] * spatial[i + 1];
        }
        s
    };
    for fiber in 0..n_fibers {
        // decode the fixed coordinates
        let mut rem = fiber;
        let mut base = 0usize;
        for (idx, &a) in others.iter().enumerate().rev() {
            let c = rem % other_dims[idx];
            rem /= other_dims[idx];
            base += c * strides[a];
        }
        let mut xs = vec![0.0; len * d];
        for t in 0..len {
            let flat = base + t * strides[axis];
            xs[t * d..(t + 1) * d].copy_from_slice(&x[flat * d..flat * d + d]);
        }
        let ys = fiber_attention(&xs, len, d, heads, wq, wk, wv, wo);
        for t in 0..len {
            let flat = base + t * strides[axis];
            out[flat * d..flat * d + d].copy_from_slice(&ys[t * d..(t + 1) * d]);
        }
    }
    out
}

fn layer_norm_rows(x: &mut [f64], d: usize, gamma: &[f64], beta: &[f64]) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
            *v = (*v - mean) * inv * g + b;
        }
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn conv3d_plain(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    dims: [usize; 3],
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let [n1, n2, n3] = dims;
    let mut y = vec![0.0; n1 * n2 * n3 * cout];
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for i3 in 0..n3 {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for d1 in 0..3usize {
                        for d2 in 0..3usize {
                            for d3 in 0..3usize {
                                let j1 = i1 as isize + d1 as isize - 1;
                                let j2 = i2 as isize + d2 as isize - 1;
                                let j3 = i3 as isize + d3 as isize - 1;
                                if j1 < 0
                                    || j2 < 0
                                    || j3 < 0
                                    || j1 >= n1 as isize
                                    || j2 >= n2 as isize
                                    || j3 >= n3 as isize
                                {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xi = ((j1 as usize * n2 + j2 as usize) * n3
                                        + j3 as usize)
                                        * cin
                                        + ci;
                                    let wi =
                                        (((d1 * 3 + d2) * 3 + d3) * cin + ci) * cout + co;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    y[((i1 * n2 + i2) * n3 + i3) * cout + co] = acc;
                }
            }
        }
    }
    y
}

/// Complete forward pass rebuilt from the parameter buffers with plain
/// loops: embedding, positional tables, pre-norm residual axial attention
/// along each axis, pre-norm residual convolutional feedforward, head.
pub fn straight_line_forward(state: &ModelState, input: &[f64]) -> Vec<f64> {
    let cfg = state.config();
    let [n1, n2, n3] = cfg.crop_shape;
    let d = cfg.embed_dim;
    let c = cfg.input_channels;
    let voxels = n1 * n2 * n3;
    let p = |name: &str| state.value(name).unwrap();

    // embedding
    let ew = p("embed.weight");
    let eb = p("embed.bias");
    let mut x = vec![0.0; voxels * d];
    for vox in 0..voxels {
        for od in 0..d {
            let mut s = eb[od];
            for ic in 0..c {
                s += input[vox * c + ic] * ew[ic * d + od];
            }
            x[vox * d + od] = s;
        }
    }
    // positional tables
    let (p0, p1, p2) = (p("pos.0"), p("pos.1"), p("pos.2"));
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let vox = (i * n2 + j) * n3 + k;
                for od in 0..d {
                    x[vox * d + od] += p0[i * d + od] + p1[j * d + od] + p2[k * d + od];
                }
            }
        }
    }

    for l in 0..cfg.layers {
        for axis in 0..3 {
            let prefix = format!("layer{l}.axis{axis}");
            let mut normed = x.clone();
            layer_norm_rows(
                &mut normed,
                d,
                p(&format!("{prefix}.norm.gamma")),
                p(&format!("{prefix}.norm.beta")),
            );
            let att = axial_attention_oracle(
                &normed,
                &[n1, n2, n3],
                d,
                axis,
                cfg.heads,
                p(&format!("{prefix}.wq")),
                p(&format!("{prefix}.wk")),
                p(&format!("{prefix}.wv")),
                p(&format!("{prefix}.wo")),
            );
            for (xi, ai) in x.iter_mut().zip(att) {
                *xi += ai;
            }
        }
        let prefix = format!("layer{l}.ff");
        let mut normed = x.clone();
        layer_norm_rows(
            &mut normed,
            d,
            p(&format!("{prefix}.norm.gamma")),
            p(&format!("{prefix}.norm.beta")),
        );
        let mut hidden = conv3d_plain(
            &normed,
            p(&format!("{prefix}.conv1.weight")),
            p(&format!("{prefix}.conv1.bias")),
            [n1, n2, n3],
            d,
            cfg.ff_dim,
        );
        for h in hidden.iter_mut() {
            *h = gelu(*h);
        }
        let ff = conv3d_plain(
            &hidden,
            p(&format!("{prefix}.conv2.weight")),
            p(&format!("{prefix}.conv2.bias")),
            [n1, n2, n3],
            cfg.ff_dim,
            d,
        );
        for (xi, fi) in x.iter_mut().zip(ff) {
            *xi += fi;
        }
    }

    // head
    let hw = p("head.weight");
    let hb = p("head.bias");
    let mut out = vec![0.0; voxels * c];
    for vox in 0..voxels {
        for oc in 0..c {
            let mut s = hb[oc];
            for od in 0..d {
                s += x[vox * d + od] * hw[od * c + oc];
            }
            out[vox * c + oc] = s;
        }
    }
    out
}
