//! Neural building blocks: spatial-size-preserving 2-D convolution, PReLU,
//! local-range average pooling, fully connected layers and multi-head
//! self-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HprnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose_into, Axis, Shape, Tensor};

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count)
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect()
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

// -------------------------------------------------------------------
// Convolution
// -------------------------------------------------------------------

/// Stride-1 convolution with zero padding `(k-1)/2`, so spatial dims are
/// preserved. Kernels are 1x1 or 3x3, matching the network's usage.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(HprnError::contract(
                "Conv2d::new",
                format!("kernel must be 1 or 3, got {kernel}"),
            ));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = Tensor::parameter(
            Shape::of(&[out_channels, in_channels, kernel, kernel]),
            fan_in_uniform(rng, out_channels * fan_in, fan_in),
        )?;
        let bias = Tensor::parameter(Shape::vector(out_channels), vec![T::zero(); out_channels])?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, &self.bias, self.kernel)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

fn im2col<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k - 1) / 2;
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * k * k * hw];
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut cols[((c * k + dy) * k + dx) * hw..((c * k + dy) * k + dx + 1) * hw];
                let oy = dy as isize - pad as isize;
                let ox = dx as isize - pad as isize;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = ((w as isize - ox).min(w as isize)) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h as isize {
                    let yy = y + oy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst_base = y as usize * w;
                    let src_base = yy as usize * w;
                    let src_lo = (src_base as isize + x_lo as isize + ox) as usize;
                    let src_hi = (src_base as isize + x_hi as isize + ox) as usize;
                    row[dst_base + x_lo..dst_base + x_hi].copy_from_slice(&plane[src_lo..src_hi]);
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Scalar>(dcols: &[T], c_in: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut dx_out[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dxk in 0..k {
                let row = &dcols[((c * k + dy) * k + dxk) * hw..((c * k + dy) * k + dxk + 1) * hw];
                let oy = dy as isize - pad as isize;
                let ox = dxk as isize - pad as isize;
                for y in 0..h as isize {
                    let yy = y + oy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize - ox).min(w as isize)) as usize;
                    for xx in x_lo..x_hi {
                        plane[yy as usize * w + (xx as isize + ox) as usize] += row[y as usize * w + xx];
                    }
                }
            }
        }
    }
}

/// Same-padding cross-correlation plus bias; differentiable w.r.t. the
/// input, the weights and the bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    if x.shape().rank() != 3 {
        return Err(HprnError::contract(
            "conv2d",
            format!("expected C x H x W input, got {}", x.shape()),
        ));
    }
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let wd = weight.dims();
    if wd.len() != 4 || wd[1] != c_in || wd[2] != kernel || wd[3] != kernel {
        return Err(HprnError::dimension(
            "conv2d",
            x.shape().to_string(),
            weight.shape().to_string(),
        ));
    }
    let c_out = wd[0];
    if bias.numel() != c_out {
        return Err(HprnError::dimension(
            "conv2d",
            weight.shape().to_string(),
            bias.shape().to_string(),
        ));
    }
    let hw = h * w;
    let kk = c_in * kernel * kernel;

    // Seed the output with the bias; the GEMM accumulates on top.
    let mut out = Vec::with_capacity(c_out * hw);
    for o in 0..c_out {
        out.extend(std::iter::repeat_n(bias.data()[o], hw));
    }
    {
        let xd = x.data();
        let wdta = weight.data();
        if kernel == 1 {
            gemm_acc(&wdta, &xd, &mut out, c_out, kk, hw);
        } else {
            let cols = im2col(&xd, c_in, h, w, kernel);
            gemm_acc(&wdta, &cols, &mut out, c_out, kk, hw);
        }
    }

    let (xt, wt, bt) = (x.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        Shape::chw(c_out, h, w),
        out,
        vec![xt.clone(), wt.clone(), bt.clone()],
        move |g| {
            if bt.is_tracked() {
                let mut db = vec![T::zero(); c_out];
                for o in 0..c_out {
                    db[o] = g[o * hw..(o + 1) * hw].iter().copied().sum();
                }
                bt.accumulate_grad_owned(db);
            }
            if wt.is_tracked() {
                // dW = g . cols^T, computed as (cols . g^T)^T so the long
                // contraction stays on the contiguous axis. The column
                // matrix is rebuilt from the saved input; holding it in the
                // graph would blow the cache footprint.
                let mut gt = Vec::new();
                transpose_into(g, c_out, hw, &mut gt);
                let mut dw_t = vec![T::zero(); kk * c_out];
                if kernel == 1 {
                    gemm_acc(&xt.data(), &gt, &mut dw_t, kk, hw, c_out);
                } else {
                    let cols = im2col(&xt.data(), c_in, h, w, kernel);
                    gemm_acc(&cols, &gt, &mut dw_t, kk, hw, c_out);
                }
                let mut dw = Vec::new();
                transpose_into(&dw_t, kk, c_out, &mut dw);
                wt.accumulate_grad_owned(dw);
            }
            if xt.is_tracked() {
                let wdta = wt.data();
                let mut dcols = vec![T::zero(); kk * hw];
                gemm_tn_acc(&wdta, g, &mut dcols, c_out, kk, hw);
                if kernel == 1 {
                    xt.accumulate_grad_owned(dcols);
                } else {
                    let mut dx = vec![T::zero(); c_in * hw];
                    col2im_acc(&dcols, c_in, h, w, kernel, &mut dx);
                    xt.accumulate_grad_owned(dx);
                }
            }
        },
    ))
}

// -------------------------------------------------------------------
// PReLU
// -------------------------------------------------------------------

/// x where positive, slope*x elsewhere. The slope is learnable, one entry
/// per channel (axis 0) or a single shared entry.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let channels = x.dims()[0];
    if slope.shape().rank() != 1 || (slope.numel() != channels && slope.numel() != 1) {
        return Err(HprnError::dimension(
            "prelu",
            x.shape().to_string(),
            slope.shape().to_string(),
        ));
    }
    let per = x.numel() / channels;
    let uniform = slope.numel() == 1;
    let mut data = Vec::with_capacity(x.numel());
    {
        let xd = x.data();
        let sd = slope.data();
        for c in 0..channels {
            let a = if uniform { sd[0] } else { sd[c] };
            for i in 0..per {
                let v = xd[c * per + i];
                data.push(if v > T::zero() { v } else { a * v });
            }
        }
    }
    let (xt, st) = (x.clone(), slope.clone());
    Ok(Tensor::from_op(
        x.shape().clone(),
        data,
        vec![xt.clone(), st.clone()],
        move |g| {
            let xd = xt.data();
            if xt.is_tracked() {
                let sd = st.data();
                let mut dx = vec![T::zero(); g.len()];
                for c in 0..channels {
                    let a = if uniform { sd[0] } else { sd[c] };
                    for i in 0..per {
                        let idx = c * per + i;
                        dx[idx] = if xd[idx] > T::zero() { g[idx] } else { a * g[idx] };
                    }
                }
                xt.accumulate_grad_owned(dx);
            }
            if st.is_tracked() {
                let mut ds = vec![T::zero(); st.numel()];
                for c in 0..channels {
                    let mut acc = T::zero();
                    for i in 0..per {
                        let idx = c * per + i;
                        if xd[idx] <= T::zero() {
                            acc += g[idx] * xd[idx];
                        }
                    }
                    ds[if uniform { 0 } else { c }] += acc;
                }
                st.accumulate_grad_owned(ds);
            }
        },
    ))
}

// -------------------------------------------------------------------
// Local average pooling
// -------------------------------------------------------------------

/// Partition each channel into `gh x gw` cells (cell boundaries at
/// `floor(i*H/gh)`) and average each cell.
pub fn local_avg_pool<T: Scalar>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    if x.shape().rank() != 3 {
        return Err(HprnError::contract(
            "local_avg_pool",
            format!("expected C x H x W input, got {}", x.shape()),
        ));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(HprnError::contract(
            "local_avg_pool",
            format!("grid {gh}x{gw} invalid for {h}x{w} input"),
        ));
    }
    let row_edge = |i: usize| i * h / gh;
    let col_edge = |j: usize| j * w / gw;
    let mut data = vec![T::zero(); c * gh * gw];
    {
        let xd = x.data();
        for ci in 0..c {
            for i in 0..gh {
                for j in 0..gw {
                    let (y0, y1) = (row_edge(i), row_edge(i + 1));
                    let (x0, x1) = (col_edge(j), col_edge(j + 1));
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += xd[(ci * h + y) * w + xx];
                        }
                    }
                    let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    data[(ci * gh + i) * gw + j] = acc / count;
                }
            }
        }
    }
    let xt = x.clone();
    Ok(Tensor::from_op(
        Shape::chw(c, gh, gw),
        data,
        vec![xt.clone()],
        move |g| {
            if xt.is_tracked() {
                let mut dx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for i in 0..gh {
                        for j in 0..gw {
                            let (y0, y1) = (i * h / gh, (i + 1) * h / gh);
                            let (x0, x1) = (j * w / gw, (j + 1) * w / gw);
                            let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let share = g[(ci * gh + i) * gw + j] / count;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(ci * h + y) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                xt.accumulate_grad_owned(dx);
            }
        },
    ))
}

// -------------------------------------------------------------------
// Fully connected layer
// -------------------------------------------------------------------

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::parameter(
                Shape::of(&[out_features, in_features]),
                fan_in_uniform(rng, out_features * in_features, in_features),
            )?,
            bias: Tensor::parameter(Shape::vector(out_features), vec![T::zero(); out_features])?,
            in_features,
            out_features,
        })
    }

    /// y = x . W^T + b for x of shape [N, in].
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().rank() != 2 || x.dims()[1] != self.in_features {
            return Err(HprnError::dimension(
                "Linear::forward",
                x.shape().to_string(),
                self.weight.shape().to_string(),
            ));
        }
        let (n, fi, fo) = (x.dims()[0], self.in_features, self.out_features);
        let mut data = vec![T::zero(); n * fo];
        {
            let xd = x.data();
            let wd = self.weight.data();
            gemm_nt_acc(&xd, &wd, &mut data, n, fi, fo);
            let bd = self.bias.data();
            for r in 0..n {
                for o in 0..fo {
                    data[r * fo + o] += bd[o];
                }
            }
        }
        let (xt, wt, bt) = (x.clone(), self.weight.clone(), self.bias.clone());
        Ok(Tensor::from_op(
            Shape::of(&[n, fo]),
            data,
            vec![xt.clone(), wt.clone(), bt.clone()],
            move |g| {
                if bt.is_tracked() {
                    let mut db = vec![T::zero(); fo];
                    for r in 0..n {
                        for o in 0..fo {
                            db[o] += g[r * fo + o];
                        }
                    }
                    bt.accumulate_grad_owned(db);
                }
                if wt.is_tracked() {
                    // dW = g^T . x
                    let xd = xt.data();
                    let mut dw = vec![T::zero(); fo * fi];
                    gemm_tn_acc(g, &xd, &mut dw, n, fo, fi);
                    wt.accumulate_grad_owned(dw);
                }
                if xt.is_tracked() {
                    // dX = g . W
                    let wd = wt.data();
                    let mut dx = vec![T::zero(); n * fi];
                    gemm_acc(g, &wd, &mut dx, n, fo, fi);
                    xt.accumulate_grad_owned(dx);
                }
            },
        ))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// -------------------------------------------------------------------
// Multi-head self-attention
// -------------------------------------------------------------------

/// Standard multi-head self-attention over a `C x d` token matrix; the C
/// channels act as the token sequence. Four fully connected layers produce
/// query, key, value and output.
pub struct MultiHeadAttention<T: Scalar> {
    pub token_dim: usize,
    pub heads: usize,
    /// Apply the 1/sqrt(d/h) logit scaling.
    pub scaled: bool,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(token_dim: usize, heads: usize, scaled: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || token_dim % heads != 0 {
            return Err(HprnError::contract(
                "MultiHeadAttention::new",
                format!("token dim {token_dim} not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            token_dim,
            heads,
            scaled,
            wq: Linear::new(token_dim, token_dim, rng)?,
            wk: Linear::new(token_dim, token_dim, rng)?,
            wv: Linear::new(token_dim, token_dim, rng)?,
            wo: Linear::new(token_dim, token_dim, rng)?,
        })
    }

    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(tokens)?.0)
    }

    /// Returns (output, attention) with attention of shape [h, C, C];
    /// every attention row is a probability distribution over tokens.
    pub fn forward_with_attention(&self, tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if tokens.shape().rank() != 2 || tokens.dims()[1] != self.token_dim {
            return Err(HprnError::dimension(
                "MultiHeadAttention::forward",
                tokens.shape().to_string(),
                format!("[C, {}]", self.token_dim),
            ));
        }
        let c = tokens.dims()[0];
        let (h, dh) = (self.heads, self.token_dim / self.heads);

        let split = |t: &Tensor<T>| -> crate::error::Result<Tensor<T>> {
            t.reshape(Shape::labeled(&[c, h, dh], &[Axis::Channel, Axis::Group, Axis::Item]))?
                .permute(&[1, 0, 2])
        };
        let q = split(&self.wq.forward(tokens)?)?; // [h, C, dh]
        let k = split(&self.wk.forward(tokens)?)?;
        let v = split(&self.wv.forward(tokens)?)?;

        let kt = k.permute(&[0, 2, 1])?; // [h, dh, C]
        let mut logits = q.batched_matmul(&kt)?; // [h, C, C]
        if self.scaled {
            logits = logits.scale(T::from_f64(1.0 / (dh as f64).sqrt()));
        }
        let attn = logits.softmax(2)?;
        let ctx = attn.batched_matmul(&v)?; // [h, C, dh]
        let merged = ctx
            .permute(&[1, 0, 2])?
            .reshape(Shape::of(&[c, self.token_dim]))?;
        Ok((self.wo.forward(&merged)?, attn))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.wq.collect_params(&format!("{prefix}.wq"), out);
        self.wk.collect_params(&format!("{prefix}.wk"), out);
        self.wv.collect_params(&format!("{prefix}.wv"), out);
        self.wo.collect_params(&format!("{prefix}.wo"), out);
    }
}
