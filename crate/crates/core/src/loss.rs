//! Training objective: mean absolute reconstruction error plus a
//! second-order term that penalizes the L1 distance between the band
//! covariance matrices of prediction and ground truth, keeping band-wise
//! statistics and spectral continuity aligned.

use crate::error::{HprnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Components of one loss evaluation. The tensors stay connected to the
/// graph, so calling backward on `total` trains every contributing term.
pub struct LossBreakdown<T: Scalar> {
    pub l1: Tensor<T>,
    pub sopc: Tensor<T>,
    pub total: Tensor<T>,
    pub tau: f64,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn l1_value(&self) -> f64 {
        self.l1.item().as_f64()
    }
    pub fn sopc_value(&self) -> f64 {
        self.sopc.item().as_f64()
    }
    pub fn total_value(&self) -> f64 {
        self.total.item().as_f64()
    }
}

/// Sample covariance of the bands of a `B x H x W` cube, computed as
/// centered inner products: X[i,j] = (1/n) sum_p (v[i,p]-mean_i)(v[j,p]-mean_j)
/// with n = H*W. Differentiable; never materializes an n x n matrix.
pub fn covariance_matrix<T: Scalar>(cube: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = cube.dims();
    let (bands, n) = match dims.len() {
        3 => (dims[0], dims[1] * dims[2]),
        2 => (dims[0], dims[1]),
        _ => {
            return Err(HprnError::contract(
                "covariance_matrix",
                format!("expected B x H x W or B x n, got {}", cube.shape()),
            ));
        }
    };
    if n < 2 {
        return Err(HprnError::contract(
            "covariance_matrix",
            format!("need at least 2 samples per band, got {n}"),
        ));
    }
    let flat = cube.reshape(Shape::of(&[bands, n]))?;
    let means = flat.mean_axis(1)?; // [B]
    let centered = flat.add_channel(&means.neg())?;
    let cov = centered
        .matmul(&centered.transpose2d()?)?
        .scale(T::one() / T::from_f64(n as f64));
    Ok(cov)
}

/// Mean absolute difference between the two band covariance matrices.
pub fn sopc_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.dims() != gt.dims() {
        return Err(HprnError::dimension(
            "sopc_loss",
            pred.shape().to_string(),
            gt.shape().to_string(),
        ));
    }
    let xp = covariance_matrix(pred)?;
    let xg = covariance_matrix(gt)?;
    Ok(xp.sub(&xg)?.abs().mean_all())
}

/// Mean absolute error over all entries.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.dims() != gt.dims() {
        return Err(HprnError::dimension(
            "l1_loss",
            pred.shape().to_string(),
            gt.shape().to_string(),
        ));
    }
    Ok(pred.sub(gt)?.abs().mean_all())
}

/// total = l1 + tau * sopc. Both reductions are means, so tau's effect is
/// resolution-independent.
pub fn total_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, tau: f64) -> Result<LossBreakdown<T>> {
    if tau < 0.0 {
        return Err(HprnError::contract(
            "total_loss",
            format!("tau must be non-negative, got {tau}"),
        ));
    }
    let l1 = l1_loss(pred, gt)?;
    let sopc = sopc_loss(pred, gt)?;
    let total = l1.add(&sopc.scale(T::from_f64(tau)))?;
    Ok(LossBreakdown {
        l1,
        sopc,
        total,
        tau,
    })
}

/// Batch objective: covariance per sample, components averaged across the
/// batch, total assembled from the averaged parts.
pub fn total_loss_batch<T: Scalar>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    tau: f64,
) -> Result<LossBreakdown<T>> {
    if pairs.is_empty() {
        return Err(HprnError::contract("total_loss_batch", "empty batch".to_string()));
    }
    let inv = T::from_f64(1.0 / pairs.len() as f64);
    let mut l1_sum: Option<Tensor<T>> = None;
    let mut sopc_sum: Option<Tensor<T>> = None;
    for (pred, gt) in pairs {
        let l1 = l1_loss(pred, gt)?;
        let sopc = sopc_loss(pred, gt)?;
        l1_sum = Some(match l1_sum {
            None => l1,
            Some(acc) => acc.add(&l1)?,
        });
        sopc_sum = Some(match sopc_sum {
            None => sopc,
            Some(acc) => acc.add(&sopc)?,
        });
    }
    let l1 = l1_sum.unwrap().scale(inv);
    let sopc = sopc_sum.unwrap().scale(inv);
    let total = l1.add(&sopc.scale(T::from_f64(tau)))?;
    Ok(LossBreakdown {
        l1,
        sopc,
        total,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(b: usize, h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::chw(b, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_cube_has_zero_covariance() {
        let x = Tensor::<f64>::full(Shape::chw(3, 4, 4), 0.7);
        let cov = covariance_matrix(&x).unwrap();
        assert!(cov.to_vec().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn covariance_hand_case() {
        // B=2, n=2: [[1,2],[3,4]] -> [[0.25,0.25],[0.25,0.25]]
        let x = Tensor::<f64>::from_vec(Shape::of(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cov = covariance_matrix(&x).unwrap().to_vec();
        for &v in &cov {
            assert!((v - 0.25).abs() < 1e-14, "{cov:?}");
        }
    }

    #[test]
    fn covariance_symmetric_nonnegative_diagonal() {
        let vals: Vec<f64> = (0..4 * 9).map(|i| ((i * 37 % 19) as f64 - 9.0) / 9.0).collect();
        let x = cube(4, 3, 3, &vals);
        let cov = covariance_matrix(&x).unwrap().to_vec();
        for i in 0..4 {
            assert!(cov[i * 4 + i] >= 0.0);
            for j in 0..4 {
                assert!((cov[i * 4 + j] - cov[j * 4 + i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn covariance_needs_two_samples() {
        let x = Tensor::<f64>::from_vec(Shape::chw(2, 1, 1), vec![1.0, 2.0]).unwrap();
        assert!(covariance_matrix(&x).is_err());
    }

    #[test]
    fn sopc_zero_for_identical_and_band_shifted() {
        let vals: Vec<f64> = (0..3 * 16).map(|i| ((i * 7 % 11) as f64) / 11.0).collect();
        let gt = cube(3, 4, 4, &vals);
        assert!(sopc_loss(&gt, &gt).unwrap().item() < 1e-14);

        // Covariance is translation invariant per band.
        let shifted: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| v + (i / 16) as f64 * 0.3)
            .collect();
        let pred = cube(3, 4, 4, &shifted);
        assert!(sopc_loss(&pred, &gt).unwrap().item() < 1e-12);
    }

    #[test]
    fn total_loss_zero_iff_equal_and_tau_zero_reduces_to_l1() {
        let vals: Vec<f64> = (0..2 * 4).map(|i| i as f64 / 8.0).collect();
        let gt = cube(2, 2, 2, &vals);
        let lb = total_loss(&gt, &gt, 2.0).unwrap();
        assert_eq!(lb.total_value(), 0.0);

        let other: Vec<f64> = vals.iter().map(|&v| v * 0.5 + 0.1).collect();
        let pred = cube(2, 2, 2, &other);
        let with_tau = total_loss(&pred, &gt, 2.0).unwrap();
        assert!(
            (with_tau.total_value() - (with_tau.l1_value() + 2.0 * with_tau.sopc_value())).abs()
                < 1e-15
        );
        let no_tau = total_loss(&pred, &gt, 0.0).unwrap();
        assert_eq!(no_tau.total_value(), no_tau.l1_value());
        assert!(total_loss(&pred, &gt, -1.0).is_err());
    }

    #[test]
    fn batch_loss_averages_components() {
        let a = cube(2, 2, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let b = cube(2, 2, 2, &[0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]);
        let gt = cube(2, 2, 2, &[0.0; 8]);
        let la = total_loss(&a, &gt, 2.0).unwrap();
        let lb = total_loss(&b, &gt, 2.0).unwrap();
        let batch = total_loss_batch(&[(a, gt.clone()), (b, gt)], 2.0).unwrap();
        assert!((batch.l1_value() - (la.l1_value() + lb.l1_value()) / 2.0).abs() < 1e-14);
        assert!((batch.sopc_value() - (la.sopc_value() + lb.sopc_value()) / 2.0).abs() < 1e-14);
    }
}
