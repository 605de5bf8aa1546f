//! Forward and backward rules for all tensor operations.

use super::gemm::{gemm_acc, gemm_tn_acc, transpose_into};
use super::{bump_div_guard, Axis, Shape, Tensor};
use crate::error::{HprnError, Result};
use crate::scalar::Scalar;

const DIV_GUARD: f64 = 1e-8;

fn same_shape_check<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(HprnError::dimension(
            op,
            a.shape().to_string(),
            b.shape().to_string(),
        ));
    }
    Ok(())
}

/// (outer, len, inner) decomposition of an index space around one axis.
fn lane_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, len, inner)
}

fn permute_data<T: Scalar>(data: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * dims[d + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());

    // Tight nested loops for the common ranks; the innermost source stride
    // is constant so these vectorize or at least avoid the coordinate walk.
    match rank {
        2 => {
            let (d0, d1) = (out_dims[0], out_dims[1]);
            let (s0, s1) = (out_strides[0], out_strides[1]);
            for i0 in 0..d0 {
                let base = i0 * s0;
                for i1 in 0..d1 {
                    out.push(data[base + i1 * s1]);
                }
            }
        }
        3 => {
            let (d0, d1, d2) = (out_dims[0], out_dims[1], out_dims[2]);
            let (s0, s1, s2) = (out_strides[0], out_strides[1], out_strides[2]);
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let base = i0 * s0 + i1 * s1;
                    if s2 == 1 {
                        out.extend_from_slice(&data[base..base + d2]);
                    } else {
                        for i2 in 0..d2 {
                            out.push(data[base + i2 * s2]);
                        }
                    }
                }
            }
        }
        _ => {
            // General coordinate walk.
            let mut coord = vec![0usize; rank];
            for _ in 0..data.len() {
                let mut src = 0;
                for (d, &c) in coord.iter().enumerate() {
                    src += c * out_strides[d];
                }
                out.push(data[src]);
                for d in (0..rank).rev() {
                    coord[d] += 1;
                    if coord[d] < out_dims[d] {
                        break;
                    }
                    coord[d] = 0;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape_check("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    a.accumulate_grad(g);
                }
                if b.is_tracked() {
                    b.accumulate_grad(g);
                }
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape_check("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    a.accumulate_grad(g);
                }
                if b.is_tracked() {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    b.accumulate_grad_owned(neg);
                }
            },
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape_check("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    a.accumulate_grad_owned(da);
                }
                if b.is_tracked() {
                    let db: Vec<T> = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    b.accumulate_grad_owned(db);
                }
            },
        ))
    }

    /// Elementwise division. Denominators are clamped to a 1e-8 magnitude
    /// floor; clamp events are counted (see [`super::div_guard_hits`]).
    /// Where the clamp engaged, the derivative w.r.t. the denominator is
    /// zero, matching the function actually computed.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape_check("div", self, other)?;
        let guard = T::from_f64(DIV_GUARD);
        let clamp = move |v: T| -> (T, bool) {
            if v.abs() >= guard {
                (v, false)
            } else if v >= T::zero() {
                (guard, true)
            } else {
                (-guard, true)
            }
        };
        let mut data = Vec::with_capacity(self.numel());
        for (&x, &y) in self.data().iter().zip(other.data().iter()) {
            let (d, hit) = clamp(y);
            if hit {
                bump_div_guard();
            }
            data.push(x / d);
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&gv, &bv)| gv / clamp(bv).0)
                        .collect();
                    a.accumulate_grad_owned(da);
                }
                if b.is_tracked() {
                    let db: Vec<T> = g
                        .iter()
                        .zip(a.data().iter().zip(b.data().iter()))
                        .map(|(&gv, (&av, &bv))| {
                            let (d, hit) = clamp(bv);
                            if hit {
                                T::zero()
                            } else {
                                -gv * av / (d * d)
                            }
                        })
                        .collect();
                    b.accumulate_grad_owned(db);
                }
            },
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().clone(), data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                let da: Vec<T> = g.iter().map(|&gv| gv * c).collect();
                a.accumulate_grad_owned(da);
            }
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().clone(), data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                a.accumulate_grad(g);
            }
        })
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        let a = self.clone();
        Tensor::from_op(self.shape().clone(), data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                let da: Vec<T> = g
                    .iter()
                    .zip(a.data().iter())
                    .map(|(&gv, &av)| {
                        if av > T::zero() {
                            gv
                        } else if av < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                a.accumulate_grad_owned(da);
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let y = data.clone();
        let a = self.clone();
        Tensor::from_op(self.shape().clone(), data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                let da: Vec<T> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                a.accumulate_grad_owned(da);
            }
        })
    }

    // ---------------------------------------------------------------
    // Channel broadcasts (axis 0)
    // ---------------------------------------------------------------

    /// Multiply each axis-0 slice by the matching entry of `s` (length
    /// equal to `dims[0]`, or 1 for a uniform gate).
    pub fn mul_channel(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        self.channel_broadcast("mul_channel", s, |x, sv| x * sv, true)
    }

    /// Add a per-channel offset, broadcast over the remaining axes.
    pub fn add_channel(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        self.channel_broadcast("add_channel", s, |x, sv| x + sv, false)
    }

    fn channel_broadcast(
        &self,
        op: &'static str,
        s: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        is_mul: bool,
    ) -> Result<Tensor<T>> {
        let channels = self.dims()[0];
        if s.shape().rank() != 1 || (s.numel() != channels && s.numel() != 1) {
            return Err(HprnError::dimension(
                op,
                self.shape().to_string(),
                s.shape().to_string(),
            ));
        }
        let per = self.numel() / channels;
        let uniform = s.numel() == 1;
        let mut data = Vec::with_capacity(self.numel());
        {
            let xd = self.data();
            let sd = s.data();
            for c in 0..channels {
                let sv = if uniform { sd[0] } else { sd[c] };
                for i in 0..per {
                    data.push(f(xd[c * per + i], sv));
                }
            }
        }
        let (x, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![x.clone(), sc.clone()],
            move |g| {
                if x.is_tracked() {
                    if is_mul {
                        let sd = sc.data();
                        let mut dx = vec![T::zero(); g.len()];
                        for c in 0..channels {
                            let sv = if uniform { sd[0] } else { sd[c] };
                            for i in 0..per {
                                dx[c * per + i] = g[c * per + i] * sv;
                            }
                        }
                        x.accumulate_grad_owned(dx);
                    } else {
                        x.accumulate_grad(g);
                    }
                }
                if sc.is_tracked() {
                    let xd = x.data();
                    let mut ds = vec![T::zero(); sc.numel()];
                    for c in 0..channels {
                        let mut acc = T::zero();
                        for i in 0..per {
                            let gv = g[c * per + i];
                            acc += if is_mul { gv * xd[c * per + i] } else { gv };
                        }
                        let slot = if uniform { 0 } else { c };
                        ds[slot] += acc;
                    }
                    sc.accumulate_grad_owned(ds);
                }
            },
        ))
    }

    // ---------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let a = self.clone();
        let n = self.numel();
        Tensor::from_op(Shape::of(&[1]), vec![total], vec![a.clone()], move |g| {
            if a.is_tracked() {
                a.accumulate_grad_owned(vec![g[0]; n]);
            }
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().rank() {
            return Err(HprnError::contract(
                "sum_axis",
                format!("axis {axis} out of range for shape {}", self.shape()),
            ));
        }
        let dims = self.dims().to_vec();
        let (outer, len, inner) = lane_split(&dims, axis);
        let mut out_dims: Vec<usize> = dims.clone();
        let mut out_labels: Vec<Axis> = (0..dims.len()).map(|d| self.shape().label(d)).collect();
        out_dims.remove(axis);
        out_labels.remove(axis);
        let out_shape = if out_dims.is_empty() {
            Shape::of(&[1])
        } else {
            Shape::labeled(&out_dims, &out_labels)
        };

        let mut data = vec![T::zero(); outer * inner];
        {
            let xd = self.data();
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        data[obase + i] += xd[base + i];
                    }
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(out_shape, data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                let mut dx = vec![T::zero(); a.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            dx[base + i] = g[obase + i];
                        }
                    }
                }
                a.accumulate_grad_owned(dx);
            }
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = *self
            .dims()
            .get(axis)
            .ok_or_else(|| HprnError::contract("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self
            .sum_axis(axis)?
            .scale(T::one() / T::from_f64(len as f64)))
    }

    // ---------------------------------------------------------------
    // Shape ops
    // ---------------------------------------------------------------

    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.numel() != self.numel() {
            return Err(HprnError::dimension(
                "reshape",
                self.shape().to_string(),
                shape.to_string(),
            ));
        }
        let data = self.to_vec();
        let a = self.clone();
        Ok(Tensor::from_op(shape, data, vec![a.clone()], move |g| {
            if a.is_tracked() {
                a.accumulate_grad(g);
            }
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(HprnError::contract(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        let dims = self.dims().to_vec();
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let out_labels: Vec<Axis> = perm.iter().map(|&p| self.shape().label(p)).collect();
        let data = permute_data(&self.data(), &dims, perm);
        // The inverse permutation sends gradients home.
        let mut inv = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inv[p] = d;
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            Shape::labeled(&out_dims, &out_labels),
            data,
            vec![a.clone()],
            move |g| {
                if a.is_tracked() {
                    let dx = permute_data(g, &out_dims, &inv);
                    a.accumulate_grad_owned(dx);
                }
            },
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.shape().rank() != 2 {
            return Err(HprnError::contract(
                "transpose2d",
                format!("expected rank 2, got {}", self.shape()),
            ));
        }
        self.permute(&[1, 0])
    }

    // ---------------------------------------------------------------
    // Matrix products
    // ---------------------------------------------------------------

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().rank() != 2
            || other.shape().rank() != 2
            || self.dims()[1] != other.dims()[0]
        {
            return Err(HprnError::dimension(
                "matmul",
                self.shape().to_string(),
                other.shape().to_string(),
            ));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let n = other.dims()[1];
        let mut data = vec![T::zero(); m * n];
        gemm_acc(&self.data(), &other.data(), &mut data, m, k, n);
        let out_shape = Shape::labeled(&[m, n], &[self.shape().label(0), other.shape().label(1)]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    // dA = g . B^T
                    let mut bt = Vec::new();
                    transpose_into(&b.data(), k, n, &mut bt);
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    a.accumulate_grad_owned(da);
                }
                if b.is_tracked() {
                    // dB = A^T . g
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(&a.data(), g, &mut db, m, k, n);
                    b.accumulate_grad_owned(db);
                }
            },
        ))
    }

    /// Independent matrix product per leading batch index.
    pub fn batched_matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().rank() != 3
            || other.shape().rank() != 3
            || self.dims()[0] != other.dims()[0]
            || self.dims()[2] != other.dims()[1]
        {
            return Err(HprnError::dimension(
                "batched_matmul",
                self.shape().to_string(),
                other.shape().to_string(),
            ));
        }
        let (gb, m, k) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        let n = other.dims()[2];
        let mut data = vec![T::zero(); gb * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for gi in 0..gb {
                gemm_acc(
                    &ad[gi * m * k..(gi + 1) * m * k],
                    &bd[gi * k * n..(gi + 1) * k * n],
                    &mut data[gi * m * n..(gi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out_shape = Shape::labeled(
            &[gb, m, n],
            &[Axis::Group, self.shape().label(1), other.shape().label(2)],
        );
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![a.clone(), b.clone()],
            move |g| {
                if a.is_tracked() {
                    let bd = b.data();
                    let mut bt = Vec::new();
                    let mut da = vec![T::zero(); gb * m * k];
                    for gi in 0..gb {
                        // dA_g = g_g . B_g^T
                        transpose_into(&bd[gi * k * n..(gi + 1) * k * n], k, n, &mut bt);
                        gemm_acc(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &bt,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    a.accumulate_grad_owned(da);
                }
                if b.is_tracked() {
                    let ad = a.data();
                    let mut db = vec![T::zero(); gb * k * n];
                    for gi in 0..gb {
                        gemm_tn_acc(
                            &ad[gi * m * k..(gi + 1) * m * k],
                            &g[gi * m * n..(gi + 1) * m * n],
                            &mut db[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    b.accumulate_grad_owned(db);
                }
            },
        ))
    }

    // ---------------------------------------------------------------
    // Softmax
    // ---------------------------------------------------------------

    /// Numerically stable softmax along one axis (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().rank() {
            return Err(HprnError::contract(
                "softmax",
                format!("axis {axis} out of range for shape {}", self.shape()),
            ));
        }
        let dims = self.dims().to_vec();
        let (outer, len, inner) = lane_split(&dims, axis);
        let mut data;
        {
            let xd = self.data();
            if inner == 1 {
                // Lanes are contiguous: one sequential pass, no zero fill.
                data = Vec::with_capacity(self.numel());
                for o in 0..outer {
                    let lane = &xd[o * len..(o + 1) * len];
                    let mut mx = lane[0];
                    for &v in &lane[1..] {
                        mx = mx.max(v);
                    }
                    let mut denom = T::zero();
                    for &v in lane {
                        let e = (v - mx).exp();
                        data.push(e);
                        denom += e;
                    }
                    let inv = T::one() / denom;
                    for v in &mut data[o * len..(o + 1) * len] {
                        *v *= inv;
                    }
                }
            } else {
                data = vec![T::zero(); self.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut mx = xd[at(0)];
                        for j in 1..len {
                            mx = mx.max(xd[at(j)]);
                        }
                        let mut denom = T::zero();
                        for j in 0..len {
                            let e = (xd[at(j)] - mx).exp();
                            data[at(j)] = e;
                            denom += e;
                        }
                        let inv = T::one() / denom;
                        for j in 0..len {
                            data[at(j)] *= inv;
                        }
                    }
                }
            }
        }
        let y = data.clone();
        let a = self.clone();
        Ok(Tensor::from_op(
            self.shape().clone(),
            data,
            vec![a.clone()],
            move |g| {
                if a.is_tracked() {
                    let mut dx;
                    if inner == 1 {
                        dx = Vec::with_capacity(g.len());
                        for o in 0..outer {
                            let gl = &g[o * len..(o + 1) * len];
                            let yl = &y[o * len..(o + 1) * len];
                            let mut dot = T::zero();
                            for (gv, yv) in gl.iter().zip(yl.iter()) {
                                dot += *gv * *yv;
                            }
                            for (gv, yv) in gl.iter().zip(yl.iter()) {
                                dx.push(*yv * (*gv - dot));
                            }
                        }
                    } else {
                        dx = vec![T::zero(); g.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * len + j) * inner + i;
                                let mut dot = T::zero();
                                for j in 0..len {
                                    dot += g[at(j)] * y[at(j)];
                                }
                                for j in 0..len {
                                    dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                    a.accumulate_grad_owned(dx);
                }
            },
        ))
    }

    // ---------------------------------------------------------------
    // Gather / concat
    // ---------------------------------------------------------------

    /// Select columns of a rank-2 tensor: out[r, j] = self[r, idx[j]].
    /// Indices may repeat; the backward pass scatter-adds, so repeated
    /// sources accumulate the gradients of all their slots.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if self.shape().rank() != 2 {
            return Err(HprnError::contract(
                "gather_cols",
                format!("expected rank 2, got {}", self.shape()),
            ));
        }
        let (rows, cols) = (self.dims()[0], self.dims()[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(HprnError::contract(
                "gather_cols",
                format!("index {bad} out of range for {cols} columns"),
            ));
        }
        let l = idx.len();
        let mut data = vec![T::zero(); rows * l];
        {
            let xd = self.data();
            for r in 0..rows {
                let src = &xd[r * cols..(r + 1) * cols];
                let dst = &mut data[r * l..(r + 1) * l];
                for (j, &s) in idx.iter().enumerate() {
                    dst[j] = src[s];
                }
            }
        }
        let indices = idx.to_vec();
        let a = self.clone();
        Ok(Tensor::from_op(
            Shape::labeled(&[rows, l], &[self.shape().label(0), Axis::Item]),
            data,
            vec![a.clone()],
            move |g| {
                if a.is_tracked() {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let grow = &g[r * l..(r + 1) * l];
                        let drow = &mut dx[r * cols..(r + 1) * cols];
                        for (j, &s) in indices.iter().enumerate() {
                            drow[s] += grow[j];
                        }
                    }
                    a.accumulate_grad_owned(dx);
                }
            },
        ))
    }

    /// Concatenate along axis 0. All inputs must agree on the trailing axes.
    pub fn concat_axis0(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(HprnError::contract("concat_axis0", "no inputs".to_string()));
        }
        let tail: Vec<usize> = parts[0].dims()[1..].to_vec();
        for p in parts.iter().skip(1) {
            if p.dims()[1..] != tail[..] {
                return Err(HprnError::dimension(
                    "concat_axis0",
                    parts[0].shape().to_string(),
                    p.shape().to_string(),
                ));
            }
        }
        let total0: usize = parts.iter().map(|p| p.dims()[0]).sum();
        let mut out_dims = vec![total0];
        out_dims.extend_from_slice(&tail);
        let mut labels = vec![parts[0].shape().label(0)];
        labels.extend((1..parts[0].shape().rank()).map(|d| parts[0].shape().label(d)));
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor<T>> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(
            Shape::labeled(&out_dims, &labels),
            data,
            owned.clone(),
            move |g| {
                let mut offset = 0;
                for (p, &sz) in owned.iter().zip(sizes.iter()) {
                    if p.is_tracked() {
                        p.accumulate_grad(&g[offset..offset + sz]);
                    }
                    offset += sz;
                }
            },
        ))
    }
}
