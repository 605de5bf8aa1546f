//! Evaluation metrics: MRAE, RMSE, SAM, PSNR and average per-band SSIM.
//! All computation is done in f64 regardless of the cube's scalar type.

use crate::data::SpectralCube;
use crate::error::{HprnError, Result};
use crate::scalar::Scalar;

/// Guard on the MRAE denominator.
pub const MRAE_EPS: f64 = 1e-6;
/// Reported PSNR when the error is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Which PSNR expression to evaluate. `Standard` is `10*log10(peak^2/MSE)`;
/// `PerPixelLog` averages `-10*log10((g-p)^2)` over pixels with each term
/// guarded at 1e-12, which diverges from the standard value when errors
/// vary strongly across pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PsnrFormula {
    #[default]
    Standard,
    PerPixelLog,
}

impl std::str::FromStr for PsnrFormula {
    type Err = HprnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(PsnrFormula::Standard),
            "per-pixel-log" | "per_pixel_log" => Ok(PsnrFormula::PerPixelLog),
            other => Err(HprnError::Config(format!(
                "unknown psnr_formula \"{other}\" (expected standard | per-pixel-log)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BandMetrics {
    pub band: usize,
    pub wavelength_nm: f64,
    pub mrae: f64,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mrae: f64,
    pub rmse: f64,
    pub sam_degrees: f64,
    pub psnr_db: f64,
    /// True when the error was exactly zero and PSNR was capped.
    pub psnr_capped: bool,
    pub assim: f64,
    /// Spatial positions excluded from SAM because one spectrum had zero norm.
    pub sam_skipped: usize,
    pub per_band: Vec<BandMetrics>,
}

fn shape_check<T: Scalar>(op: &'static str, pred: &SpectralCube<T>, gt: &SpectralCube<T>) -> Result<()> {
    if pred.bands != gt.bands || pred.height != gt.height || pred.width != gt.width {
        return Err(HprnError::dimension(
            op,
            format!("{}x{}x{}", pred.bands, pred.height, pred.width),
            format!("{}x{}x{}", gt.bands, gt.height, gt.width),
        ));
    }
    Ok(())
}

/// Mean of |gt - pred| / max(gt, 1e-6) over all entries.
pub fn mrae<T: Scalar>(pred: &SpectralCube<T>, gt: &SpectralCube<T>) -> Result<f64> {
    shape_check("mrae", pred, gt)?;
    if gt.data.iter().any(|&v| v.as_f64() < 0.0) {
        return Err(HprnError::contract(
            "mrae",
            "ground truth must be non-negative".to_string(),
        ));
    }
    let mut acc = 0.0;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let (p, g) = (p.as_f64(), g.as_f64());
        acc += (g - p).abs() / g.max(MRAE_EPS);
    }
    Ok(acc / pred.data.len() as f64)
}

pub fn rmse<T: Scalar>(pred: &SpectralCube<T>, gt: &SpectralCube<T>) -> Result<f64> {
    shape_check("rmse", pred, gt)?;
    let mut acc = 0.0;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let d = g.as_f64() - p.as_f64();
        acc += d * d;
    }
    Ok((acc / pred.data.len() as f64).sqrt())
}

/// Mean angle in degrees between per-pixel spectra; zero-norm positions are
/// skipped and counted. Errors when no position has both norms nonzero.
pub fn sam<T: Scalar>(pred: &SpectralCube<T>, gt: &SpectralCube<T>) -> Result<(f64, usize)> {
    shape_check("sam", pred, gt)?;
    let hw = pred.n_pixels();
    let bands = pred.bands;
    let mut acc = 0.0;
    let mut valid = 0usize;
    for p in 0..hw {
        let mut dot = 0.0;
        let mut np = 0.0;
        let mut ng = 0.0;
        for b in 0..bands {
            let pv = pred.data[b * hw + p].as_f64();
            let gv = gt.data[b * hw + p].as_f64();
            dot += pv * gv;
            np += pv * pv;
            ng += gv * gv;
        }
        if np == 0.0 || ng == 0.0 {
            continue;
        }
        let cosine = (dot / (np.sqrt() * ng.sqrt())).clamp(-1.0, 1.0);
        acc += cosine.acos();
        valid += 1;
    }
    if valid == 0 {
        return Err(HprnError::UndefinedMetric(
            "sam: every spatial position has a zero-norm spectrum".to_string(),
        ));
    }
    Ok((acc / valid as f64 * 180.0 / std::f64::consts::PI, hw - valid))
}

/// Returns (psnr_db, capped).
pub fn psnr<T: Scalar>(
    pred: &SpectralCube<T>,
    gt: &SpectralCube<T>,
    peak: f64,
    formula: PsnrFormula,
) -> Result<(f64, bool)> {
    shape_check("psnr", pred, gt)?;
    match formula {
        PsnrFormula::Standard => {
            let mut mse = 0.0;
            for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
                let d = g.as_f64() - p.as_f64();
                mse += d * d;
            }
            mse /= pred.data.len() as f64;
            if mse == 0.0 {
                Ok((PSNR_CAP_DB, true))
            } else {
                Ok((10.0 * (peak * peak / mse).log10(), false))
            }
        }
        PsnrFormula::PerPixelLog => {
            let mut acc = 0.0;
            for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
                let d = g.as_f64() - p.as_f64();
                acc += (d * d).max(1e-12).log10();
            }
            Ok((-10.0 * acc / pred.data.len() as f64, false))
        }
    }
}

/// 11x11 Gaussian window with sigma 1.5, normalized to unit sum.
fn ssim_window() -> [f64; 11] {
    let sigma = 1.5;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable weighted convolution; output is (h-10) x (w-10).
fn window_means(plane: &[f64], h: usize, w: usize, win: &[f64; 11]) -> Vec<f64> {
    let wo = w - 10;
    let ho = h - 10;
    // horizontal pass
    let mut horiz = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * plane[y * w + x + t];
            }
            horiz[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &wv) in win.iter().enumerate() {
                acc += wv * horiz[(y + t) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// SSIM of a single band pair (valid-mode 11x11 Gaussian window, sigma 1.5).
pub fn ssim_band(pred: &[f64], gt: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let win = ssim_window();
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let px: Vec<f64> = pred.to_vec();
    let gx: Vec<f64> = gt.to_vec();
    let pp: Vec<f64> = pred.iter().map(|v| v * v).collect();
    let gg: Vec<f64> = gt.iter().map(|v| v * v).collect();
    let pg: Vec<f64> = pred.iter().zip(gt.iter()).map(|(a, b)| a * b).collect();

    let mu_p = window_means(&px, h, w, &win);
    let mu_g = window_means(&gx, h, w, &win);
    let e_pp = window_means(&pp, h, w, &win);
    let e_gg = window_means(&gg, h, w, &win);
    let e_pg = window_means(&pg, h, w, &win);

    let mut acc = 0.0;
    for i in 0..mu_p.len() {
        let (mp, mg) = (mu_p[i], mu_g[i]);
        let vp = e_pp[i] - mp * mp;
        let vg = e_gg[i] - mg * mg;
        let cov = e_pg[i] - mp * mg;
        acc += ((2.0 * mp * mg + c1) * (2.0 * cov + c2))
            / ((mp * mp + mg * mg + c1) * (vp + vg + c2));
    }
    acc / mu_p.len() as f64
}

/// Mean over bands of per-band SSIM.
pub fn assim<T: Scalar>(pred: &SpectralCube<T>, gt: &SpectralCube<T>, peak: f64) -> Result<f64> {
    shape_check("assim", pred, gt)?;
    if pred.height < 11 || pred.width < 11 {
        return Err(HprnError::contract(
            "assim",
            format!(
                "spatial dims {}x{} smaller than the 11x11 window",
                pred.height, pred.width
            ),
        ));
    }
    let hw = pred.n_pixels();
    let mut acc = 0.0;
    for b in 0..pred.bands {
        let pb: Vec<f64> = pred.data[b * hw..(b + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let gb: Vec<f64> = gt.data[b * hw..(b + 1) * hw].iter().map(|v| v.as_f64()).collect();
        acc += ssim_band(&pb, &gb, pred.height, pred.width, peak);
    }
    Ok(acc / pred.bands as f64)
}

/// Full five-metric report with per-band breakdown.
pub fn metrics_report<T: Scalar>(
    pred: &SpectralCube<T>,
    gt: &SpectralCube<T>,
    peak: f64,
    formula: PsnrFormula,
) -> Result<MetricsReport> {
    let mrae_v = mrae(pred, gt)?;
    let rmse_v = rmse(pred, gt)?;
    let (sam_v, skipped) = sam(pred, gt)?;
    let (psnr_v, capped) = psnr(pred, gt, peak, formula)?;
    let assim_v = assim(pred, gt, peak)?;

    let hw = pred.n_pixels();
    let mut per_band = Vec::with_capacity(pred.bands);
    for b in 0..pred.bands {
        let pb: Vec<f64> = pred.data[b * hw..(b + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let gb: Vec<f64> = gt.data[b * hw..(b + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let mut mr = 0.0;
        let mut se = 0.0;
        for (&p, &g) in pb.iter().zip(gb.iter()) {
            mr += (g - p).abs() / g.max(MRAE_EPS);
            se += (g - p) * (g - p);
        }
        mr /= hw as f64;
        let band_mse = se / hw as f64;
        let band_psnr = if band_mse == 0.0 {
            PSNR_CAP_DB
        } else {
            10.0 * (peak * peak / band_mse).log10()
        };
        per_band.push(BandMetrics {
            band: b,
            wavelength_nm: *gt.wavelengths_nm.get(b).unwrap_or(&0.0),
            mrae: mr,
            rmse: band_mse.sqrt(),
            psnr_db: band_psnr,
            ssim: ssim_band(&pb, &gb, pred.height, pred.width, peak),
        });
    }

    Ok(MetricsReport {
        mrae: mrae_v,
        rmse: rmse_v,
        sam_degrees: sam_v,
        psnr_db: psnr_v,
        psnr_capped: capped,
        assim: assim_v,
        sam_skipped: skipped,
        per_band,
    })
}
