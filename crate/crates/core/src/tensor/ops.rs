//! Recorded tensor operations: forward kernels plus backward closures.

use rand::RngCore;
use rayon::prelude::*;

use super::kernels::{
    chunked_sum, conv3d_backward_input, conv3d_backward_weights, conv3d_forward, mm, mm_batched,
    numel, softmax_rows_backward, softmax_rows_forward, strides_of,
};
use super::{broadcast_shapes, broadcast_strides, Result, Tensor, TensorError};

/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> (f64, f64) {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x);
    (y, dy)
}

/// Element index map for one operand of a broadcast elementwise op.
fn broadcast_index(flat: usize, out_shape: &[usize], bstrides: &[usize]) -> usize {
    let mut idx = 0;
    let mut r = flat;
    for d in (0..out_shape.len()).rev() {
        let c = r % out_shape[d];
        r /= out_shape[d];
        idx += c * bstrides[d];
    }
    idx
}

impl Tensor {
    fn binary_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        fwd: fn(f64, f64) -> f64,
        // partials w.r.t. (lhs, rhs) at broadcast positions
        dl: fn(f64, f64) -> f64,
        dr: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shapes(op, self.shape(), rhs.shape())?;
        let n = numel(&out_shape);
        let mut data = vec![0.0; n];
        if self.shape() == rhs.shape() {
            for ((o, &a), &b) in data.iter_mut().zip(self.data()).zip(rhs.data()) {
                *o = fwd(a, b);
            }
        } else {
            let ls = broadcast_strides(self.shape(), &out_shape);
            let rs = broadcast_strides(rhs.shape(), &out_shape);
            for (flat, o) in data.iter_mut().enumerate() {
                let a = self.data()[broadcast_index(flat, &out_shape, &ls)];
                let b = rhs.data()[broadcast_index(flat, &out_shape, &rs)];
                *o = fwd(a, b);
            }
        }
        let a_t = self.clone();
        let b_t = rhs.clone();
        let shape_for_back = out_shape.clone();
        let back = Box::new(move |g: &[f64]| {
            let out_shape = &shape_for_back;
            let ls = broadcast_strides(a_t.shape(), out_shape);
            let rs = broadcast_strides(b_t.shape(), out_shape);
            let mut ga = if a_t.tracks() {
                Some(vec![0.0; a_t.len()])
            } else {
                None
            };
            let mut gb = if b_t.tracks() {
                Some(vec![0.0; b_t.len()])
            } else {
                None
            };
            for (flat, &gv) in g.iter().enumerate() {
                let ia = broadcast_index(flat, out_shape, &ls);
                let ib = broadcast_index(flat, out_shape, &rs);
                let av = a_t.data()[ia];
                let bv = b_t.data()[ib];
                if let Some(buf) = ga.as_mut() {
                    buf[ia] += gv * dl(av, bv);
                }
                if let Some(buf) = gb.as_mut() {
                    buf[ib] += gv * dr(av, bv);
                }
            }
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v * c).collect();
        let back = Box::new(move |g: &[f64]| vec![Some(g.iter().map(|&v| v * c).collect())]);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            back,
        ))
    }

    /// Batched matrix product. The trailing two axes multiply as matrices;
    /// leading axes broadcast as batch dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), rhs.shape());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, p) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let a_batch = &a_shape[..a_shape.len() - 2];
        let b_batch = &b_shape[..b_shape.len() - 2];
        let batch_shape = broadcast_shapes("matmul", a_batch, b_batch)?;
        let nbatch = numel(&batch_shape);

        let a_bs = broadcast_strides(a_batch, &batch_shape);
        let b_bs = broadcast_strides(b_batch, &batch_shape);
        let mut a_offsets = Vec::with_capacity(nbatch);
        let mut b_offsets = Vec::with_capacity(nbatch);
        for flat in 0..nbatch {
            a_offsets.push(broadcast_index(flat, &batch_shape, &a_bs) * m * k);
            b_offsets.push(broadcast_index(flat, &batch_shape, &b_bs) * k * p);
        }

        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(p);
        let mut data = vec![0.0; nbatch * m * p];
        mm_batched(
            self.data(),
            rhs.data(),
            &mut data,
            &a_offsets,
            &b_offsets,
            m,
            k,
            p,
            false,
            false,
        );

        let a_t = self.clone();
        let b_t = rhs.clone();
        let a_full = a_batch.len() == batch_shape.len() && a_offsets.len() * m * k == a_t.len();
        let b_full = b_batch.len() == batch_shape.len() && b_offsets.len() * k * p == b_t.len();
        let back = Box::new(move |g: &[f64]| {
            let a_data: &[f64] = a_t.data();
            let b_data: &[f64] = b_t.data();
            let ga = if a_t.tracks() {
                // dA = dY @ B^T
                if a_full {
                    let mut da = vec![0.0; a_t.len()];
                    da.par_chunks_mut(m * k)
                        .enumerate()
                        .for_each(|(bi, slab)| {
                            mm(
                                &g[bi * m * p..],
                                &b_data[b_offsets[bi]..],
                                slab,
                                m,
                                p,
                                k,
                                false,
                                true,
                            );
                        });
                    Some(da)
                } else {
                    let alen = a_t.len();
                    Some(chunked_sum(a_offsets.len(), alen, |bi, acc| {
                        let mut tmp = vec![0.0; m * k];
                        mm(
                            &g[bi * m * p..],
                            &b_data[b_offsets[bi]..],
                            &mut tmp,
                            m,
                            p,
                            k,
                            false,
                            true,
                        );
                        let off = a_offsets[bi];
                        for (dst, v) in acc[off..off + m * k].iter_mut().zip(tmp) {
                            *dst += v;
                        }
                    }))
                }
            } else {
                None
            };
            let gb = if b_t.tracks() {
                // dB = A^T @ dY
                if b_full {
                    let mut db = vec![0.0; b_t.len()];
                    db.par_chunks_mut(k * p)
                        .enumerate()
                        .for_each(|(bi, slab)| {
                            mm(
                                &a_data[a_offsets[bi]..],
                                &g[bi * m * p..],
                                slab,
                                k,
                                m,
                                p,
                                true,
                                false,
                            );
                        });
                    Some(db)
                } else {
                    let blen = b_t.len();
                    Some(chunked_sum(b_offsets.len(), blen, |bi, acc| {
                        let mut tmp = vec![0.0; k * p];
                        mm(
                            &a_data[a_offsets[bi]..],
                            &g[bi * m * p..],
                            &mut tmp,
                            k,
                            m,
                            p,
                            true,
                            false,
                        );
                        let off = b_offsets[bi];
                        for (dst, v) in acc[off..off + k * p].iter_mut().zip(tmp) {
                            *dst += v;
                        }
                    }))
                }
            } else {
                None
            };
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            back,
        ))
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(TensorError::Dimension(
                "softmax_rows needs at least one axis".into(),
            ));
        }
        if !self.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::Numeric(
                "softmax_rows received a non-finite input".into(),
            ));
        }
        let row_len = *self.shape().last().unwrap();
        let mut data = vec![0.0; self.len()];
        softmax_rows_forward(self.data(), &mut data, row_len);
        let saved = data.clone();
        let back = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; saved.len()];
            softmax_rows_backward(&saved, g, &mut gx, row_len);
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            back,
        ))
    }

    /// 3x3x3 convolution (cross-correlation) over a channels-last volume,
    /// zero padding 1, spatial shape preserved.
    pub fn conv3d(&self, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv3d input must be (n1, n2, n3, cin), got {:?}",
                self.shape()
            )));
        }
        if w.shape().len() != 5 || w.shape()[..3] != [3, 3, 3] {
            return Err(TensorError::Dimension(format!(
                "conv3d kernel must be (3, 3, 3, cin, cout), got {:?}",
                w.shape()
            )));
        }
        let cin = self.shape()[3];
        let cout = w.shape()[4];
        if w.shape()[3] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if bias.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: w.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let dims = [self.shape()[0], self.shape()[1], self.shape()[2]];
        let mut out_shape = dims.to_vec();
        out_shape.push(cout);
        let mut data = vec![0.0; numel(&out_shape)];
        conv3d_forward(self.data(), w.data(), bias.data(), &mut data, dims, cin, cout);

        let x_t = self.clone();
        let w_t = w.clone();
        let b_t = bias.clone();
        let back = Box::new(move |g: &[f64]| {
            let gx = if x_t.tracks() {
                let mut buf = vec![0.0; x_t.len()];
                conv3d_backward_input(g, w_t.data(), &mut buf, dims, cin, cout);
                Some(buf)
            } else {
                None
            };
            let (gw, gb) = if w_t.tracks() || b_t.tracks() {
                let (gw, gb) = conv3d_backward_weights(x_t.data(), g, dims, cin, cout);
                (
                    if w_t.tracks() { Some(gw) } else { None },
                    if b_t.tracks() { Some(gb) } else { None },
                )
            } else {
                (None, None)
            };
            vec![gx, gw, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), w.clone(), bias.clone()],
            back,
        ))
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            TensorError::Dimension("layer_norm needs at least one axis".into())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.len() / d;
        let mut data = vec![0.0; self.len()];
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; rows];
        {
            let gamma_data: &[f64] = gamma.data();
            let beta_data: &[f64] = beta.data();
            data.par_chunks_mut(d)
                .zip(xhat.par_chunks_mut(d))
                .zip(inv_std.par_iter_mut())
                .zip(self.data().par_chunks(d))
                .for_each(|(((orow, hrow), istd), xrow)| {
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var =
                        xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    *istd = inv;
                    for ((o, h), (&x, (&g, &b))) in orow.iter_mut().zip(hrow.iter_mut()).zip(
                        xrow.iter().zip(gamma_data.iter().zip(beta_data.iter())),
                    ) {
                        *h = (x - mean) * inv;
                        *o = g * *h + b;
                    }
                });
        }

        let x_t = self.clone();
        let g_t = gamma.clone();
        let b_t = beta.clone();
        let back = Box::new(move |g: &[f64]| {
            let dgamma = if g_t.tracks() {
                Some(chunked_sum(rows, d, |r, acc| {
                    for c in 0..d {
                        acc[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }))
            } else {
                None
            };
            let dbeta = if b_t.tracks() {
                Some(chunked_sum(rows, d, |r, acc| {
                    for c in 0..d {
                        acc[c] += g[r * d + c];
                    }
                }))
            } else {
                None
            };
            let dx = if x_t.tracks() {
                let gamma_data: &[f64] = g_t.data();
                let mut buf = vec![0.0; x_t.len()];
                buf.par_chunks_mut(d).enumerate().for_each(|(r, row)| {
                    let grow = &g[r * d..r * d + d];
                    let hrow = &xhat[r * d..r * d + d];
                    let mut m1 = 0.0; // mean of g*gamma
                    let mut m2 = 0.0; // mean of g*gamma*xhat
                    for c in 0..d {
                        let gg = grow[c] * gamma_data[c];
                        m1 += gg;
                        m2 += gg * hrow[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        let gg = grow[c] * gamma_data[c];
                        row[c] = inv_std[r] * (gg - m1 - hrow[c] * m2);
                    }
                });
                Some(buf)
            } else {
                None
            };
            vec![dx, dgamma, dbeta]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            back,
        ))
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&self) -> Result<Tensor> {
        let mut data = vec![0.0; self.len()];
        let mut deriv = vec![0.0; self.len()];
        for ((o, dv), &x) in data.iter_mut().zip(deriv.iter_mut()).zip(self.data()) {
            let (y, dy) = gelu_scalar(x);
            *o = y;
            *dv = dy;
        }
        let back = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter().zip(deriv.iter()).map(|(&gv, &dv)| gv * dv).collect(),
            )]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            back,
        ))
    }

    /// Inverted dropout: in training mode zeroes elements with probability
    /// `p` and rescales survivors by 1/(1-p); in eval mode the identity.
    pub fn dropout(&self, p: f64, rng: &mut dyn RngCore, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout probability must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mut mask = vec![0.0; self.len()];
        for m in mask.iter_mut() {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *m = if u >= p { keep_scale } else { 0.0 };
        }
        let data = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let back = Box::new(move |g: &[f64]| {
            vec![Some(
                g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect(),
            )]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            back,
        ))
    }

    /// Reorders axes. `perm[i]` names the source axis that lands at axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Parameter(format!(
                "invalid permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let inv: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let shape_for_back = out_shape.clone();
        let back = Box::new(move |g: &[f64]| {
            vec![Some(permute_data(g, &shape_for_back, &inv))]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], back))
    }

    /// Views the same elements under a new shape (copying storage).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.len() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape(),
                self.len(),
                new_shape,
                numel(new_shape)
            )));
        }
        let data = self.data().to_vec();
        let back = Box::new(move |g: &[f64]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            data,
            vec![self.clone()],
            back,
        ))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        let back = Box::new(move |g: &[f64]| vec![Some(vec![g[0]; n])]);
        Ok(Tensor::from_op(vec![], vec![s], vec![self.clone()], back))
    }

    /// Selects index `idx` along `axis`, dropping that axis.
    pub fn index_axis(&self, axis: usize, idx: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || idx >= self.shape()[axis] {
            return Err(TensorError::Parameter(format!(
                "index_axis({axis}, {idx}) out of bounds for shape {:?}",
                self.shape()
            )));
        }
        let pre: usize = self.shape()[..axis].iter().product();
        let post: usize = self.shape()[axis + 1..].iter().product();
        let dim = self.shape()[axis];
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; pre * post];
        for b in 0..pre {
            let src = (b * dim + idx) * post;
            data[b * post..(b + 1) * post].copy_from_slice(&self.data()[src..src + post]);
        }
        let full_len = self.len();
        let back = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; full_len];
            for b in 0..pre {
                let dst = (b * dim + idx) * post;
                gx[dst..dst + post].copy_from_slice(&g[b * post..(b + 1) * post]);
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], back))
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let rank = out_shape.len();
    if rank == 0 {
        out.copy_from_slice(data);
        return out;
    }
    out.par_chunks_mut(*out_shape.last().unwrap())
        .enumerate()
        .for_each(|(row, chunk)| {
            // decompose `row` over the leading output axes
            let mut src_base = 0usize;
            let mut r = row;
            for d in (0..rank - 1).rev() {
                let c = r % out_shape[d];
                r /= out_shape[d];
                src_base += c * gather[d];
            }
            let last_stride = gather[rank - 1];
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = data[src_base + j * last_stride];
            }
        });
    out
}
