//! Tensor operations: forward kernels plus their backward rules.
//!
//! Elementwise binaries broadcast with trailing-dimension rules (right-
//! aligned; a dimension must match or be 1). Matmul broadcasts leading batch
//! dimensions the same way. Backward rules sum gradients over broadcast axes.

use super::{numel_of, Result, Scalar, Tensor, TensorError};

/// Attention mask for the fused softmax: `CausalOffset(m)` lets query row `i`
/// see key columns `0..=i+m`. Masked columns get probability exactly zero and
/// receive exactly zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    CausalOffset(usize),
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = acc;
        acc *= shape[ax];
    }
    strides
}

fn unravel(mut idx: usize, shape: &[usize], coords: &mut [usize]) {
    for ax in (0..shape.len()).rev() {
        coords[ax] = idx % shape[ax];
        idx /= shape[ax];
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for r in 0..rank {
        let da = if r < a.len() { a[a.len() - 1 - r] } else { 1 };
        let db = if r < b.len() { b[b.len() - 1 - r] } else { 1 };
        out[rank - 1 - r] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides mapping an `out_shape` coordinate to a flat offset in a tensor of
/// `in_shape`; broadcast (or missing) axes get stride zero.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let natural = strides_of(in_shape);
    let mut out = vec![0; out_shape.len()];
    for r in 0..out_shape.len() {
        if r < in_shape.len() {
            let ax = in_shape.len() - 1 - r;
            if in_shape[ax] != 1 {
                out[out_shape.len() - 1 - r] = natural[ax];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

fn binary_op<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    fwd: fn(T, T) -> T,
    dfda: fn(T, T, T) -> T,
    dfdb: fn(T, T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n = numel_of(&out_shape);
    let mut data = vec![T::zero(); n];
    {
        let av = a.data();
        let bv = b.data();
        if a.shape() == b.shape() {
            for ((o, &x), &y) in data.iter_mut().zip(av.iter()).zip(bv.iter()) {
                *o = fwd(x, y);
            }
        } else if out_shape == *a.shape() && is_suffix(b.shape(), &out_shape) {
            let bl = bv.len().max(1);
            for (i, o) in data.iter_mut().enumerate() {
                *o = fwd(av[i], bv[i % bl]);
            }
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut coords = vec![0; out_shape.len()];
            for (i, o) in data.iter_mut().enumerate() {
                unravel(i, &out_shape, &mut coords);
                let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
                let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
                *o = fwd(av[ia], bv[ib]);
            }
        }
    }
    let out_shape_c = out_shape.clone();
    Tensor::from_op(
        op,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let (pa, pb) = (&parents[0], &parents[1]);
            let av = pa.data();
            let bv = pb.data();
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); bv.len()];
            if pa.shape() == pb.shape() {
                for i in 0..g.len() {
                    da[i] = dfda(g[i], av[i], bv[i]);
                    db[i] = dfdb(g[i], av[i], bv[i]);
                }
            } else {
                let sa = broadcast_strides(pa.shape(), &out_shape_c);
                let sb = broadcast_strides(pb.shape(), &out_shape_c);
                let mut coords = vec![0; out_shape_c.len()];
                for (i, &gi) in g.iter().enumerate() {
                    unravel(i, &out_shape_c, &mut coords);
                    let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
                    let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
                    da[ia] = da[ia] + dfda(gi, av[ia], bv[ib]);
                    db[ib] = db[ib] + dfdb(gi, av[ia], bv[ib]);
                }
            }
            drop(av);
            drop(bv);
            pa.accumulate_grad(&da);
            pb.accumulate_grad(&db);
        }),
    )
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

fn unary_op<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    fwd: impl Fn(T) -> T,
    // dfdx(grad_out, x, y) where y is the forward output
    dfdx: impl Fn(T, T, T) -> T + 'static,
) -> Result<Tensor<T>> {
    let data: Vec<T> = a.data().iter().map(|&x| fwd(x)).collect();
    let saved_y = data.clone();
    Tensor::from_op(
        op,
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let xv = parents[0].data();
            let mut dx = vec![T::zero(); xv.len()];
            for i in 0..xv.len() {
                dx[i] = dfdx(g[i], xv[i], saved_y[i]);
            }
            drop(xv);
            parents[0].accumulate_grad(&dx);
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op("add", self, other, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op("sub", self, other, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op(
            "mul",
            self,
            other,
            |x, y| x * y,
            |g, _, y| g * y,
            |g, x, _| g * x,
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op(
            "div",
            self,
            other,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(T::from_f64(-1.0).to_f64())
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        unary_op("scale", self, |x| x * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        unary_op("add_scalar", self, |x| x + c, |g, _, _| g)
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        unary_op("tanh", self, |x| x.tanh(), |g, _, y| g * (T::one() - y * y))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary_op(
            "sigmoid",
            self,
            |x| T::one() / (T::one() + (-x).exp()),
            |g, _, y| g * y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary_op("exp", self, |x| x.exp(), |g, _, y| g * y)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        unary_op("ln", self, |x| x.ln(), |g, x, _| g / x)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary_op(
            "relu",
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |g, x, _| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        unary_op(
            "sqrt",
            self,
            |x| x.sqrt(),
            |g, _, y| g / (T::from_f64(2.0) * y),
        )
    }

    // -----------------------------------------------------------------------
    // Matmul

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// leading dimensions broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self, other);
        if a.shape().len() < 2 || b.shape().len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ra, rb) = (a.shape().len(), b.shape().len());
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let lead_a = &a.shape()[..ra - 2];
        let lead_b = &b.shape()[..rb - 2];
        let lead = broadcast_shape("matmul", lead_a, lead_b)?;
        let batches = numel_of(&lead);
        let sa = broadcast_strides(lead_a, &lead);
        let sb = broadcast_strides(lead_b, &lead);

        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![T::zero(); batches * m * n];
        {
            let av = a.data();
            let bv = b.data();
            let mut coords = vec![0; lead.len()];
            for batch in 0..batches {
                unravel(batch, &lead, &mut coords);
                let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum::<usize>() * m * k;
                let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum::<usize>() * k * n;
                mm_nn(
                    &av[ia..ia + m * k],
                    &bv[ib..ib + k * n],
                    &mut data[batch * m * n..(batch + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let lead_c = lead.clone();
        Tensor::from_op(
            "matmul",
            out_shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g, parents| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let av = pa.data();
                let bv = pb.data();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                let mut coords = vec![0; lead_c.len()];
                for batch in 0..batches {
                    unravel(batch, &lead_c, &mut coords);
                    let ia: usize =
                        coords.iter().zip(&sa).map(|(c, s)| c * s).sum::<usize>() * m * k;
                    let ib: usize =
                        coords.iter().zip(&sb).map(|(c, s)| c * s).sum::<usize>() * k * n;
                    let gs = &g[batch * m * n..(batch + 1) * m * n];
                    // dA = G · Bᵀ, dB = Aᵀ · G; accumulation over repeated
                    // offsets realizes the sum across broadcast batches.
                    mm_nt(gs, &bv[ib..ib + k * n], &mut da[ia..ia + m * k], m, n, k);
                    mm_tn(&av[ia..ia + m * k], gs, &mut db[ib..ib + k * n], k, m, n);
                }
                drop(av);
                drop(bv);
                pa.accumulate_grad(&da);
                pb.accumulate_grad(&db);
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Shape ops

    /// Swaps two axes (with data movement).
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: ax0.max(ax1),
                rank,
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(ax0, ax1);
        let data = permute_swap(&self.data(), self.shape(), ax0, ax1);
        Tensor::from_op(
            "transpose",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut gshape = p.shape().to_vec();
                gshape.swap(ax0, ax1);
                let dg = permute_swap(g, &gshape, ax0, ax1);
                p.accumulate_grad(&dg);
            }),
        )
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(new_shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accumulate_grad(g)),
        )
    }

    /// Contiguous slice `start..start+len` along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank,
            });
        }
        let dim = self.shape()[axis];
        if start + len > dim {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                bound: dim,
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        {
            let src = self.data();
            for o in 0..outer {
                let src_base = (o * dim + start) * inner;
                let dst_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
        }
        Tensor::from_op(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut dg = vec![T::zero(); p.numel()];
                for o in 0..outer {
                    let dst_base = (o * dim + start) * inner;
                    let src_base = o * len * inner;
                    dg[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                p.accumulate_grad(&dg);
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Reductions

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        let inv = T::from_f64(1.0 / n as f64);
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        Tensor::from_op(
            "mean_all",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(&vec![g[0] * inv; n]);
            }),
        )
    }

    /// Mean over the last axis, kept as a size-1 dimension.
    pub fn mean_lastdim_keepdim(&self) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::InvalidAxis {
                op: "mean_lastdim",
                axis: 0,
                rank,
            });
        }
        let d = self.shape()[rank - 1];
        let lanes = self.numel() / d;
        let inv = T::from_f64(1.0 / d as f64);
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 1] = 1;
        let mut data = vec![T::zero(); lanes];
        {
            let src = self.data();
            for lane in 0..lanes {
                let row = &src[lane * d..(lane + 1) * d];
                data[lane] = row.iter().fold(T::zero(), |a, &v| a + v) * inv;
            }
        }
        Tensor::from_op(
            "mean_lastdim",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut dg = vec![T::zero(); p.numel()];
                for lane in 0..lanes {
                    let gv = g[lane] * inv;
                    for v in &mut dg[lane * d..(lane + 1) * d] {
                        *v = gv;
                    }
                }
                p.accumulate_grad(&dg);
            }),
        )
    }

    // -----------------------------------------------------------------------
    // Softmax family

    /// Exp-normalization along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank == 0 || axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let d = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * d * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..d {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..d {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..d {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let saved = data.clone();
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut dg = vec![T::zero(); p.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * d * inner + i;
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + g[base + j * inner] * saved[base + j * inner];
                        }
                        for j in 0..d {
                            let y = saved[base + j * inner];
                            dg[base + j * inner] = y * (g[base + j * inner] - dot);
                        }
                    }
                }
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Softmax over the last axis of `[.., rows, cols]` score matrices with an
    /// optional causal mask. Masked entries never enter max or sum, so the
    /// output there is exactly zero (no -inf sentinels in tensor data).
    pub fn masked_softmax_lastdim(&self, mask: AttnMask) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "masked_softmax",
                axis: rank,
                rank,
            });
        }
        let cols = self.shape()[rank - 1];
        let rows = self.shape()[rank - 2];
        let mats = self.numel() / (rows * cols);
        let allowed = move |row: usize| -> usize {
            match mask {
                AttnMask::Full => cols,
                AttnMask::CausalOffset(off) => cols.min(row + off + 1),
            }
        };
        let mut data = self.to_vec();
        for mtx in 0..mats {
            for r in 0..rows {
                let base = (mtx * rows + r) * cols;
                let al = allowed(r);
                let row = &mut data[base..base + cols];
                let mut mx = T::neg_infinity();
                for &v in &row[..al] {
                    mx = mx.max(v);
                }
                let mut sum = T::zero();
                for v in &mut row[..al] {
                    *v = (*v - mx).exp();
                    sum = sum + *v;
                }
                for v in &mut row[..al] {
                    *v = *v / sum;
                }
                for v in &mut row[al..] {
                    *v = T::zero();
                }
            }
        }
        let saved = data.clone();
        Tensor::from_op(
            "masked_softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut dg = vec![T::zero(); p.numel()];
                for mtx in 0..mats {
                    for r in 0..rows {
                        let base = (mtx * rows + r) * cols;
                        let al = allowed(r);
                        let mut dot = T::zero();
                        for j in 0..al {
                            dot = dot + g[base + j] * saved[base + j];
                        }
                        for j in 0..al {
                            let y = saved[base + j];
                            dg[base + j] = y * (g[base + j] - dot);
                        }
                    }
                }
                p.accumulate_grad(&dg);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Free-function ops

/// Concatenates tensors along `axis`; all other dimensions must match.
pub fn concat<T: Scalar>(axis: usize, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (ax, (&d0, &dp)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if ax != axis && d0 != dp {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        axis_total += p.shape()[axis];
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = axis_total;
    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0;
    let mut part_dims = Vec::with_capacity(parts.len());
    for p in parts {
        let dp = p.shape()[axis];
        part_dims.push(dp);
        let src = p.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * dp * inner;
            data[dst_base..dst_base + dp * inner]
                .copy_from_slice(&src[src_base..src_base + dp * inner]);
        }
        offset += dp;
    }
    Tensor::from_op(
        "concat",
        out_shape,
        data,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let mut offset = 0;
            for (p, &dp) in parents.iter().zip(&part_dims) {
                let mut dg = vec![T::zero(); p.numel()];
                for o in 0..outer {
                    let src_base = (o * axis_total + offset) * inner;
                    let dst_base = o * dp * inner;
                    dg[dst_base..dst_base + dp * inner]
                        .copy_from_slice(&g[src_base..src_base + dp * inner]);
                }
                p.accumulate_grad(&dg);
                offset += dp;
            }
        }),
    )
}

/// Row gather from an embedding table `[V, E]`; output shape is
/// `lead_shape + [E]`. Backward scatter-adds into the table rows.
pub fn embedding_lookup<T: Scalar>(
    table: &Tensor<T>,
    ids: &[u32],
    lead_shape: &[usize],
) -> Result<Tensor<T>> {
    let (v, e) = match *table.shape() {
        [v, e] => (v, e),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: table.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    if numel_of(lead_shape) != ids.len() {
        return Err(TensorError::ShapeMismatch {
            op: "embedding",
            lhs: lead_shape.to_vec(),
            rhs: vec![ids.len()],
        });
    }
    let mut data = vec![T::zero(); ids.len() * e];
    {
        let tv = table.data();
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data[row * e..(row + 1) * e].copy_from_slice(&tv[id * e..(id + 1) * e]);
        }
    }
    let mut out_shape = lead_shape.to_vec();
    out_shape.push(e);
    let ids_saved: Vec<u32> = ids.to_vec();
    Tensor::from_op(
        "embedding",
        out_shape,
        data,
        vec![table.clone()],
        Box::new(move |g, parents| {
            let p = &parents[0];
            let mut dg = vec![T::zero(); p.numel()];
            for (row, &id) in ids_saved.iter().enumerate() {
                let dst = &mut dg[id as usize * e..(id as usize + 1) * e];
                for (d, &gv) in dst.iter_mut().zip(&g[row * e..(row + 1) * e]) {
                    *d = *d + gv;
                }
            }
            p.accumulate_grad(&dg);
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    /// Mean cross entropy in nats over all `[.., V]` rows, fused with
    /// log-sum-exp. `targets` are flat row-major class ids.
    pub fn cross_entropy(&self, targets: &[u32]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::InvalidAxis {
                op: "cross_entropy",
                axis: 0,
                rank,
            });
        }
        let v = self.shape()[rank - 1];
        let rows = self.numel() / v;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = self.to_vec();
        let mut total = 0.0f64;
        for (row, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let lane = &mut probs[row * v..(row + 1) * v];
            let mut mx = T::neg_infinity();
            for &x in lane.iter() {
                mx = mx.max(x);
            }
            let mut sum = T::zero();
            for x in lane.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            // -log p[t] = log(sum) - (logit[t] - mx)
            total += (sum.ln() - lane[t].ln()).to_f64();
            for x in lane.iter_mut() {
                *x = *x / sum;
            }
        }
        let mean = T::from_f64(total / rows as f64);
        let targets_saved: Vec<u32> = targets.to_vec();
        let inv_rows = T::from_f64(1.0 / rows as f64);
        Tensor::from_op(
            "cross_entropy",
            Vec::new(),
            vec![mean],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let scale = g[0] * inv_rows;
                let mut dg = vec![T::zero(); p.numel()];
                for (row, &t) in targets_saved.iter().enumerate() {
                    let lane = &mut dg[row * v..(row + 1) * v];
                    lane.copy_from_slice(&probs[row * v..(row + 1) * v]);
                    lane[t as usize] = lane[t as usize] - T::one();
                    for x in lane.iter_mut() {
                        *x = *x * scale;
                    }
                }
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Relative-position gather for segment-recurrent attention.
    ///
    /// Input `[.., l, K]` holds per-query scores indexed by distance
    /// `d ∈ 0..K`; output `[.., l, K]` is indexed by extended key position
    /// `j`, with `out[i, j] = in[i, mem_len + i - j]` for `j <= mem_len + i`
    /// and zero for future positions (which a causal mask must cover).
    pub fn rel_gather(&self, mem_len: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "rel_gather",
                axis: rank,
                rank,
            });
        }
        let k = self.shape()[rank - 1];
        let l = self.shape()[rank - 2];
        if k != mem_len + l {
            return Err(TensorError::ShapeMismatch {
                op: "rel_gather",
                lhs: self.shape().to_vec(),
                rhs: vec![l, mem_len + l],
            });
        }
        let mats = self.numel() / (l * k);
        let mut data = vec![T::zero(); self.numel()];
        {
            let src = self.data();
            for mtx in 0..mats {
                for i in 0..l {
                    let base = (mtx * l + i) * k;
                    for j in 0..=(mem_len + i).min(k - 1) {
                        data[base + j] = src[base + (mem_len + i - j)];
                    }
                }
            }
        }
        Tensor::from_op(
            "rel_gather",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let p = &parents[0];
                let mut dg = vec![T::zero(); p.numel()];
                for mtx in 0..mats {
                    for i in 0..l {
                        let base = (mtx * l + i) * k;
                        for j in 0..=(mem_len + i).min(k - 1) {
                            let d = mem_len + i - j;
                            dg[base + d] = dg[base + d] + g[base + j];
                        }
                    }
                }
                p.accumulate_grad(&dg);
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Kernels

/// out += a · b with a `[m,k]`, b `[k,n]`.
fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out += a · bᵀ with a `[m,k]`, b `[n,k]`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out += aᵀ · b with a `[k,m]`, b `[k,n]`, out `[m,n]`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

fn permute_swap<T: Scalar>(data: &[T], shape: &[usize], ax0: usize, ax1: usize) -> Vec<T> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = strides_of(shape);
    let mut mapped = vec![0; shape.len()];
    for (i, s) in in_strides.iter().enumerate() {
        mapped[i] = *s;
    }
    mapped.swap(ax0, ax1);
    let mut out = vec![T::zero(); data.len()];
    let mut coords = vec![0; shape.len()];
    for (oi, o) in out.iter_mut().enumerate() {
        unravel(oi, &out_shape, &mut coords);
        let ii: usize = coords.iter().zip(&mapped).map(|(c, s)| c * s).sum();
        *o = data[ii];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, no_grad, SeededRng};
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        let data = (0..numel_of(shape)).map(|_| rng.normal_f64()).collect();
        Tensor::parameter(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        let x = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        assert_close(x.sigmoid().unwrap().item(), 0.5, 1e-15);
        assert_close(x.tanh().unwrap().item(), 0.0, 1e-15);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        // Backward result cross-checked against central differences.
        let x = Tensor::parameter(&[1], vec![0.0f64]).unwrap();
        let y = x.sigmoid().unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let analytic = x.grad().unwrap()[0];
        let eps = 1e-6;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let fd = (s(eps) - s(-eps)) / (2.0 * eps);
        assert_close(analytic, 0.25, 1e-12);
        assert_close(analytic, fd, 1e-9);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_gradcheck_random() {
        let mut rng = SeededRng::new(7);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        let err = grad_check(
            || a.matmul(&b)?.tanh()?.mean_all(),
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul gradcheck err {err}");
    }

    #[test]
    fn batched_matmul_broadcast_gradcheck() {
        let mut rng = SeededRng::new(8);
        let a = randn(&[2, 3, 2, 4], &mut rng);
        let b = randn(&[3, 4, 2], &mut rng); // broadcast over leading 2
        let err = grad_check(
            || a.matmul(&b)?.tanh()?.mean_all(),
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "batched matmul gradcheck err {err}");
    }

    #[test]
    fn softmax_symmetry_and_exact_thirds() {
        let x = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);

        let x = Tensor::from_vec(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        assert_close(y[0], 1.0 / 6.0, 1e-12);
        assert_close(y[1], 2.0 / 6.0, 1e-12);
        assert_close(y[2], 3.0 / 6.0, 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(&[3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let y0 = x.softmax(0).unwrap().to_vec();
        let y1 = x.add_scalar(123.456).unwrap().softmax(0).unwrap().to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn softmax_mid_axis() {
        let x = Tensor::from_vec(&[2, 2, 2], vec![0.0f64; 8]).unwrap();
        let y = x.softmax(1).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_nan_is_loud() {
        let x = Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            x.softmax(0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_prefix() {
        let mut rng = SeededRng::new(3);
        let x = randn(&[2, 4, 6], &mut rng);
        let y = no_grad(|| x.masked_softmax_lastdim(AttnMask::CausalOffset(2)).unwrap());
        let v = y.to_vec();
        for m in 0..2 {
            for r in 0..4 {
                let row = &v[(m * 4 + r) * 6..(m * 4 + r + 1) * 6];
                let al = 6.min(r + 3);
                let sum: f64 = row[..al].iter().sum();
                assert_close(sum, 1.0, 1e-9);
                assert!(row[al..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let v = 102;
        let logits = Tensor::<f64>::zeros(&[2, 3, v]);
        let ce = logits.cross_entropy(&[0u32; 6]).unwrap().item();
        assert_close(ce, (v as f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut logits = vec![0.0f64; 5];
        logits[2] = 100.0;
        let t = Tensor::from_vec(&[1, 5], logits).unwrap();
        assert!(t.cross_entropy(&[2]).unwrap().item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let t = Tensor::<f64>::zeros(&[1, 5]);
        assert!(matches!(
            t.cross_entropy(&[5]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut rng = SeededRng::new(11);
        let logits = randn(&[2, 5], &mut rng);
        let loss = logits.cross_entropy(&[1, 4]).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        // Independent route: softmax minus one-hot, scaled by 1/rows.
        let probs = no_grad(|| logits.softmax(1).unwrap()).to_vec();
        for row in 0..2 {
            let target = [1usize, 4][row];
            for j in 0..5 {
                let expect = (probs[row * 5 + j] - if j == target { 1.0 } else { 0.0 }) / 2.0;
                assert_close(g[row * 5 + j], expect, 1e-12);
            }
        }
        // And against central differences.
        let err = grad_check(|| logits.cross_entropy(&[1, 4]), &[logits.clone()], 1e-6).unwrap();
        assert!(err < 1e-8, "ce gradcheck err {err}");
    }

    #[test]
    fn embedding_lookup_rows_and_grad_accumulation() {
        let table = Tensor::parameter(&[3, 2], vec![0.0f64, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let out = embedding_lookup(&table, &[0, 2, 0], &[3]).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert_eq!(out.to_vec(), vec![0.0, 1.0, 20.0, 21.0, 0.0, 1.0]);
        let loss = out.sum_all().unwrap();
        loss.backward().unwrap();
        let g = table.grad().unwrap();
        // Row 0 used twice: gradient doubles.
        assert_eq!(g, vec![2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            embedding_lookup(&table, &[3], &[1]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn broadcast_add_bias_and_backward_reduction() {
        let x = Tensor::parameter(&[2, 3], vec![0.0f64; 6]).unwrap();
        let b = Tensor::parameter(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn broadcast_incompatible_shapes_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = SeededRng::new(21);
        let a = randn(&[2, 3], &mut rng);
        let raw = randn(&[2, 3], &mut rng);
        // Keep b away from zero so div stays well-conditioned.
        let b = Tensor::parameter(
            &[2, 3],
            raw.to_vec().iter().map(|v| v.abs() + 1.0).collect(),
        )
        .unwrap();
        let params = [a.clone(), b.clone()];
        let cases: Vec<(&str, Box<dyn Fn() -> Result<Tensor<f64>>>)> = vec![
            ("add", Box::new({
                let (a, b) = (a.clone(), b.clone());
                move || a.add(&b)?.tanh()?.mean_all()
            })),
            ("sub", Box::new({
                let (a, b) = (a.clone(), b.clone());
                move || a.sub(&b)?.tanh()?.mean_all()
            })),
            ("mul", Box::new({
                let (a, b) = (a.clone(), b.clone());
                move || a.mul(&b)?.tanh()?.mean_all()
            })),
            ("div", Box::new({
                let (a, b) = (a.clone(), b.clone());
                move || a.div(&b)?.tanh()?.mean_all()
            })),
            ("sigmoid", Box::new({
                let a = a.clone();
                move || a.sigmoid()?.mean_all()
            })),
            ("exp", Box::new({
                let a = a.clone();
                move || a.exp()?.mean_all()
            })),
            ("ln", Box::new({
                let b = b.clone();
                move || b.ln()?.mean_all()
            })),
            ("sqrt", Box::new({
                let b = b.clone();
                move || b.sqrt()?.mean_all()
            })),
            ("scale", Box::new({
                let a = a.clone();
                move || a.scale(-2.5)?.tanh()?.mean_all()
            })),
            ("softmax", Box::new({
                let a = a.clone();
                move || a.softmax(1)?.ln()?.mean_all()
            })),
        ];
        for (name, f) in cases {
            let err = grad_check(&*f, &params, 1e-6).unwrap();
            assert!(err < 1e-7, "{name} gradcheck err {err}");
        }
    }

    #[test]
    fn shape_ops_gradcheck() {
        let mut rng = SeededRng::new(22);
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 2, 4], &mut rng);
        let err = grad_check(
            || {
                let t = a.transpose(1, 2)?.reshape(&[2, 12])?;
                let n = a.narrow(1, 1, 2)?;
                let c = concat(1, &[n, b.clone()])?.reshape(&[2, 16])?;
                concat(1, &[t, c])?.tanh()?.mean_all()
            },
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "shape ops gradcheck err {err}");
    }

    #[test]
    fn masked_softmax_and_rel_gather_gradcheck() {
        let mut rng = SeededRng::new(23);
        let x = randn(&[2, 3, 5], &mut rng); // l=3, K=mem 2 + 3
        let err = grad_check(
            || {
                x.rel_gather(2)?
                    .masked_softmax_lastdim(AttnMask::CausalOffset(2))?
                    .mul(&x)?
                    .mean_all()
            },
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "rel_gather/masked_softmax gradcheck err {err}");
    }

    #[test]
    fn rel_gather_layout() {
        // l=2, mem=1, K=3: out[i][j] = in[i][1 + i - j] for j <= 1 + i.
        let x = Tensor::from_vec(&[2, 3], vec![0.0f64, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let y = x.rel_gather(1).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 0.0, 0.0, 12.0, 11.0, 10.0]);
    }

    #[test]
    fn mean_lastdim_keepdim_shapes_and_values() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = x.mean_lastdim_keepdim().unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.to_vec(), vec![2.0, 5.0]);
    }

    #[test]
    fn finite_check_catches_overflow() {
        let x = Tensor::from_vec(&[1], vec![1000.0f32]).unwrap();
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
    }
}
