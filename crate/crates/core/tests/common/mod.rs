//! Straight-line oracles shared by the oracle-equivalence and acceptance
//! suites. Plain nested f64 loops, no engine code.

#![allow(dead_code)]

use hprn_core::data::SpectralCube;
use hprn_core::metrics::MRAE_EPS;
use hprn_core::model::Tcrm;
use hprn_core::nn::{Conv2d, MultiHeadAttention};

pub fn conv_oracle(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    co: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k as isize - 1) / 2;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = bias[o];
                for c in 0..ci {
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let (sy, sx) = (y + dy - pad, xx + dx - pad);
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                let wv = weight[((o * ci + c) * k + dy as usize) * k + dx as usize];
                                acc += wv * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(o * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

pub fn conv_layer_oracle(conv: &Conv2d<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    conv_oracle(
        x,
        (conv.in_channels, h, w),
        &conv.weight.to_vec(),
        &conv.bias.to_vec(),
        conv.out_channels,
        conv.kernel,
    )
}

pub fn linear_oracle(
    x: &[f64],
    n: usize,
    fi: usize,
    weight: &[f64],
    bias: &[f64],
    fo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * fo];
    for r in 0..n {
        for o in 0..fo {
            let mut acc = bias[o];
            for i in 0..fi {
                acc += x[r * fi + i] * weight[o * fi + i];
            }
            out[r * fo + o] = acc;
        }
    }
    out
}

pub fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

pub fn mha_oracle(tokens: &[f64], c: usize, d: usize, mha: &MultiHeadAttention<f64>) -> Vec<f64> {
    let heads = mha.heads;
    let dh = d / heads;
    let q = linear_oracle(tokens, c, d, &mha.wq.weight.to_vec(), &mha.wq.bias.to_vec(), d);
    let k = linear_oracle(tokens, c, d, &mha.wk.weight.to_vec(), &mha.wk.bias.to_vec(), d);
    let v = linear_oracle(tokens, c, d, &mha.wv.weight.to_vec(), &mha.wv.bias.to_vec(), d);
    let scale = if mha.scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let mut ctx = vec![0.0; c * d];
    for head in 0..heads {
        for i in 0..c {
            let mut logits: Vec<f64> = (0..c)
                .map(|j| {
                    (0..dh)
                        .map(|t| q[i * d + head * dh + t] * k[j * d + head * dh + t])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax_row(&mut logits);
            for t in 0..dh {
                ctx[i * d + head * dh + t] =
                    (0..c).map(|j| logits[j] * v[j * d + head * dh + t]).sum();
            }
        }
    }
    linear_oracle(&ctx, c, d, &mha.wo.weight.to_vec(), &mha.wo.bias.to_vec(), d)
}

pub fn prelu_oracle(x: &[f64], per: usize, slope: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { v } else { slope[i / per] * v })
        .collect()
}

pub fn pool_oracle(x: &[f64], c: usize, h: usize, w: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * gh * gw];
    for ci in 0..c {
        for i in 0..gh {
            for j in 0..gw {
                let (y0, y1) = (i * h / gh, (i + 1) * h / gh);
                let (x0, x1) = (j * w / gw, (j + 1) * w / gw);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[(ci * h + y) * w + xx];
                    }
                }
                out[(ci * gh + i) * gw + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn tcrm_oracle(tcrm: &Tcrm<f64>, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = tcrm.grid;
    let d = gh * gw;
    let pooled = pool_oracle(x, c, h, w, gh, gw);
    let tr = mha_oracle(&pooled, c, d, &tcrm.mha);
    let s: Vec<f64> = (0..c)
        .map(|ch| tr[ch * d..(ch + 1) * d].iter().sum::<f64>() / d as f64)
        .collect();
    let cr = tcrm.reduce.out_features;
    let reduced = linear_oracle(
        &s,
        1,
        c,
        &tcrm.reduce.weight.to_vec(),
        &tcrm.reduce.bias.to_vec(),
        cr,
    );
    let activated = prelu_oracle(&reduced, 1, &tcrm.slope.to_vec());
    let expanded = linear_oracle(
        &activated,
        1,
        cr,
        &tcrm.expand.weight.to_vec(),
        &tcrm.expand.bias.to_vec(),
        c,
    );
    let gates: Vec<f64> = expanded.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[ch * h * w + p] = gates[ch] * x[ch * h * w + p];
        }
    }
    out
}

/// Pixel order used by the grouped attention: categories ranked by first
/// raster appearance, raster order within a category.
pub fn canonical_order(labels: &[u32], hw: usize) -> Vec<usize> {
    let max = *labels.iter().max().unwrap() as usize + 1;
    let mut rank = vec![usize::MAX; max];
    let mut next = 0;
    for &l in labels {
        if rank[l as usize] == usize::MAX {
            rank[l as usize] = next;
            next += 1;
        }
    }
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by_key(|&p| rank[labels[p] as usize]);
    order
}

/// Covariance by direct centered loops.
pub fn covariance_oracle(data: &[f64], bands: usize, n: usize) -> Vec<f64> {
    let mut means = vec![0.0; bands];
    for b in 0..bands {
        means[b] = data[b * n..(b + 1) * n].iter().sum::<f64>() / n as f64;
    }
    let mut cov = vec![0.0; bands * bands];
    for i in 0..bands {
        for j in 0..bands {
            let mut acc = 0.0;
            for p in 0..n {
                acc += (data[i * n + p] - means[i]) * (data[j * n + p] - means[j]);
            }
            cov[i * bands + j] = acc / n as f64;
        }
    }
    cov
}

// ----------------------------------------------------------------
// Metric oracles
// ----------------------------------------------------------------

pub fn mrae_oracle(pred: &SpectralCube<f64>, gt: &SpectralCube<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        acc += (g - p).abs() / g.max(MRAE_EPS);
    }
    acc / gt.data.len() as f64
}

pub fn rmse_oracle(pred: &SpectralCube<f64>, gt: &SpectralCube<f64>) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        acc += (g - p) * (g - p);
    }
    (acc / gt.data.len() as f64).sqrt()
}

pub fn sam_oracle(pred: &SpectralCube<f64>, gt: &SpectralCube<f64>) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..gt.height {
        for x in 0..gt.width {
            let ps = pred.spectrum_at(y, x);
            let gs = gt.spectrum_at(y, x);
            let dot: f64 = ps.iter().zip(&gs).map(|(a, b)| a * b).sum();
            let np: f64 = ps.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng: f64 = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np == 0.0 || ng == 0.0 {
                continue;
            }
            acc += (dot / (np * ng)).clamp(-1.0, 1.0).acos();
            count += 1;
        }
    }
    acc / count as f64 * 180.0 / std::f64::consts::PI
}

pub fn psnr_oracle(pred: &SpectralCube<f64>, gt: &SpectralCube<f64>, peak: f64) -> f64 {
    let mut acc = 0.0;
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        acc += (g - p) * (g - p);
    }
    10.0 * (peak * peak / (acc / gt.data.len() as f64)).log10()
}

/// Direct nested-window SSIM (the implementation runs separable passes).
pub fn assim_oracle(pred: &SpectralCube<f64>, gt: &SpectralCube<f64>, peak: f64) -> f64 {
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let mut band_acc = 0.0;
    for b in 0..gt.bands {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..gt.height - 10 {
            for x0 in 0..gt.width - 10 {
                let (mut mp, mut mg) = (0.0, 0.0);
                let (mut epp, mut egg, mut epg) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wv = win[i][j];
                        let p = pred.at(b, y0 + i, x0 + j);
                        let g = gt.at(b, y0 + i, x0 + j);
                        mp += wv * p;
                        mg += wv * g;
                        epp += wv * p * p;
                        egg += wv * g * g;
                        epg += wv * p * g;
                    }
                }
                let (vp, vg, cov) = (epp - mp * mp, egg - mg * mg, epg - mp * mg);
                acc += ((2.0 * mp * mg + c1) * (2.0 * cov + c2))
                    / ((mp * mp + mg * mg + c1) * (vp + vg + c2));
                count += 1;
            }
        }
        band_acc += acc / count as f64;
    }
    band_acc / gt.bands as f64
}
