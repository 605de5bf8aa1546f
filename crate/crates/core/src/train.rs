//! Optimization loop: Adam with polynomial learning-rate decay, per-epoch
//! validation with best-checkpoint retention, bit-exact resume, and a
//! finite-difference gradient check harness.
//!
//! Every source of randomness in a step is derived from (seed, step), so a
//! resumed session regenerates exactly the batches an uninterrupted run
//! would have seen.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    entries_from_params, read_checkpoint, write_checkpoint, CheckpointEntry,
};
use crate::data::{RgbImage, SpectralCube};
use crate::error::{HprnError, Result};
use crate::loss::total_loss;
use crate::metrics::mrae;
use crate::model::{Hprn, HprnConfig};
use crate::scalar::Scalar;
use crate::slic::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = HprnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(HprnError::Config(format!(
                "unknown precision \"{other}\" (expected f32 | f64)"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_power: f64,
    pub epochs: usize,
    /// Overrides the derived steps-per-epoch when set.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.00012,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            decay_power: 1.5,
            epochs: 100,
            steps_per_epoch: None,
            batch_size: 4,
            patch_size: 64,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(HprnError::Config("lr0 must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(HprnError::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.decay_power <= 0.0 {
            return Err(HprnError::Config("decay_power must be positive".into()));
        }
        if self.epochs == 0 || self.epochs > 100 {
            return Err(HprnError::Config(format!(
                "epochs must be in 1..=100, got {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(HprnError::Config("batch_size and patch_size must be positive".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(HprnError::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// lr0 * (1 - t/T)^power, clamped to zero past the horizon.
pub fn poly_lr(t: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

// -------------------------------------------------------------------
// Adam
// -------------------------------------------------------------------

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[(String, Tensor<T>)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over all parameters.
pub fn adam_step<T: Scalar>(
    params: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(HprnError::contract(
            "adam_step",
            format!(
                "{} parameters vs state for {}",
                params.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(t));
    let bc2 = T::from_f64(1.0 - beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);

    for (i, (name, p)) in params.iter().enumerate() {
        let g = p.grad_vec();
        if g.len() != state.m[i].len() {
            return Err(HprnError::contract(
                "adam_step",
                format!("gradient shape changed for {name}"),
            ));
        }
        let mut data = p.to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
        p.set_data(&data);
    }
    Ok(())
}

// -------------------------------------------------------------------
// Training session
// -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub sopc: f64,
    pub total: f64,
    pub val_mrae: Option<f64>,
}

pub const LOG_HEADER: &str = "step,epoch,lr,l1,sopc,total,val_mrae";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let val = self.val_mrae.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.l1, self.sopc, self.total, val
        )
    }
}

pub fn rows_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub type ScenePair<T> = (SpectralCube<T>, RgbImage);

fn mix_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Owns the model, optimizer state and progress counters; supports
/// serialization of the complete state for exact resumption.
pub struct TrainSession<T: Scalar> {
    pub model: Hprn<T>,
    pub tcfg: TrainConfig,
    pub adam: AdamState<T>,
    pub next_step: usize,
    pub best_val_mrae: f64,
    best_entries: Option<Vec<CheckpointEntry>>,
    /// Whole-scene label maps, keyed by (is_val, scene index).
    label_cache: HashMap<(bool, usize), Vec<LabelMap>>,
}

impl<T: Scalar> TrainSession<T> {
    pub fn new(model_cfg: HprnConfig, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let model = Hprn::new(model_cfg, tcfg.seed)?;
        let adam = AdamState::new(&model.named_parameters());
        Ok(TrainSession {
            model,
            tcfg,
            adam,
            next_step: 0,
            best_val_mrae: f64::INFINITY,
            best_entries: None,
            label_cache: HashMap::new(),
        })
    }

    pub fn steps_per_epoch(&self, train: &[ScenePair<T>]) -> usize {
        if let Some(spe) = self.tcfg.steps_per_epoch {
            return spe.max(1);
        }
        let patches_per_scene = train
            .first()
            .map(|(c, _)| {
                ((c.height / self.tcfg.patch_size) * (c.width / self.tcfg.patch_size)).max(1)
            })
            .unwrap_or(1);
        ((train.len() * patches_per_scene).div_ceil(self.tcfg.batch_size)).max(1)
    }

    pub fn total_steps(&self, train: &[ScenePair<T>]) -> usize {
        self.tcfg.epochs * self.steps_per_epoch(train)
    }

    fn labels_for(
        &mut self,
        is_val: bool,
        scene_idx: usize,
        patch_rgb: &RgbImage,
        whole_scene: bool,
    ) -> Result<Vec<LabelMap>> {
        if self.model.ssrm.is_none() {
            return Ok(Vec::new());
        }
        if whole_scene {
            let key = (is_val, scene_idx);
            if !self.label_cache.contains_key(&key) {
                let maps = self.model.cfg.label_maps(patch_rgb)?;
                self.label_cache.insert(key, maps);
            }
            return Ok(self.label_cache[&key].clone());
        }
        self.model.cfg.label_maps(patch_rgb)
    }

    /// Mean MRAE over the validation scenes.
    pub fn validate(&mut self, val: &[ScenePair<T>]) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (cube, rgb)) in val.iter().enumerate() {
            let labels = self.labels_for(true, i, rgb, true)?;
            let pred = self.model.forward(&rgb.to_tensor::<T>(), &labels)?;
            let pred_cube = SpectralCube::from_tensor(&pred)?;
            acc += mrae(&pred_cube, cube)?;
        }
        Ok(acc / val.len() as f64)
    }

    /// Run training steps until the configured horizon (or `stop_after`
    /// steps in total, for staged runs). Validation fires at every epoch
    /// boundary; the best-MRAE parameter snapshot is retained.
    pub fn run(
        &mut self,
        train: &[ScenePair<T>],
        val: &[ScenePair<T>],
        stop_after: Option<usize>,
    ) -> Result<Vec<LogRow>> {
        if train.is_empty() {
            return Err(HprnError::contract("TrainSession::run", "empty training split".to_string()));
        }
        let patch = self.tcfg.patch_size;
        for (c, _) in train {
            if patch > c.height || patch > c.width {
                return Err(HprnError::contract(
                    "TrainSession::run",
                    format!("patch {patch} exceeds training scene {}x{}", c.height, c.width),
                ));
            }
        }
        let spe = self.steps_per_epoch(train);
        let total = self.tcfg.epochs * spe;
        let stop = stop_after.map_or(total, |s| s.min(total));
        let tau = self.model.cfg.sopc_tau;
        let mut rows = Vec::new();

        while self.next_step < stop {
            let step = self.next_step;
            let lr = poly_lr(step, total, self.tcfg.lr0, self.tcfg.decay_power);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.tcfg.seed, step as u64));

            // One sample's graph lives at a time: forward, scale by the
            // batch mean weight, backward, drop. Gradients accumulate
            // additively across the batch; the result matches a joint
            // batch graph.
            self.model.zero_grads();
            let inv_batch = 1.0 / self.tcfg.batch_size as f64;
            let (mut l1v, mut sopcv, mut totv) = (0.0, 0.0, 0.0);
            for _ in 0..self.tcfg.batch_size {
                let si = rng.random_range(0..train.len());
                let (cube, rgb) = &train[si];
                let whole = cube.height == patch && cube.width == patch;
                let (y0, x0) = if whole {
                    (0, 0)
                } else {
                    (
                        rng.random_range(0..=cube.height - patch),
                        rng.random_range(0..=cube.width - patch),
                    )
                };
                let (pc, pr) = (cube.crop(y0, x0, patch)?, rgb.crop(y0, x0, patch)?);
                let labels = self.labels_for(false, si, &pr, whole)?;
                let pred = self.model.forward(&pr.to_tensor::<T>(), &labels)?;
                let lb = total_loss(&pred, &pc.to_tensor(), tau)?;
                l1v += lb.l1_value() * inv_batch;
                sopcv += lb.sopc_value() * inv_batch;
                totv += lb.total_value() * inv_batch;
                lb.total.scale(T::from_f64(inv_batch)).backward()?;
            }
            if !totv.is_finite() {
                return Err(HprnError::TrainingAborted {
                    step,
                    msg: "non-finite loss".into(),
                    lr,
                    l1: l1v,
                    sopc: sopcv,
                    total: totv,
                });
            }
            let params = self.model.named_parameters();
            adam_step(
                &params,
                &mut self.adam,
                lr,
                self.tcfg.beta1,
                self.tcfg.beta2,
                self.tcfg.adam_eps,
            )?;
            self.next_step += 1;

            let mut val_mrae = None;
            if !val.is_empty() && (self.next_step % spe == 0 || self.next_step == total) {
                let v = self.validate(val)?;
                if v < self.best_val_mrae {
                    self.best_val_mrae = v;
                    self.best_entries = Some(self.snapshot());
                }
                val_mrae = Some(v);
            }
            rows.push(LogRow {
                step,
                epoch: step / spe,
                lr,
                l1: l1v,
                sopc: sopcv,
                total: totv,
                val_mrae,
            });
        }
        Ok(rows)
    }

    pub fn snapshot(&self) -> Vec<CheckpointEntry> {
        entries_from_params(&self.model.named_parameters())
    }

    /// Best-validation snapshot, falling back to the current parameters
    /// when no validation has run yet.
    pub fn best_snapshot(&self) -> Vec<CheckpointEntry> {
        self.best_entries.clone().unwrap_or_else(|| self.snapshot())
    }

    /// Model weights in the 32-bit interchange format.
    pub fn save_model(&self, path: &Path, best: bool) -> Result<()> {
        let entries = if best { self.best_snapshot() } else { self.snapshot() };
        write_checkpoint(&entries, path, false)
    }

    fn wide() -> bool {
        std::mem::size_of::<T>() == 8
    }

    /// Complete training state (parameters, moments, counters) at the
    /// session's native precision.
    pub fn save_resume(&self, path: &Path) -> Result<()> {
        let params = self.model.named_parameters();
        let mut entries = entries_from_params(&params);
        for (i, (name, _)) in params.iter().enumerate() {
            entries.push(CheckpointEntry {
                name: format!("adam.m.{name}"),
                dims: vec![self.adam.m[i].len()],
                values: self.adam.m[i].iter().map(|v| v.as_f64()).collect(),
            });
            entries.push(CheckpointEntry {
                name: format!("adam.v.{name}"),
                dims: vec![self.adam.v[i].len()],
                values: self.adam.v[i].iter().map(|v| v.as_f64()).collect(),
            });
        }
        entries.push(CheckpointEntry::scalar("meta.adam_step", self.adam.step as f64));
        entries.push(CheckpointEntry::scalar("meta.next_step", self.next_step as f64));
        entries.push(CheckpointEntry::scalar(
            "meta.best_val_mrae",
            self.best_val_mrae,
        ));
        write_checkpoint(&entries, path, Self::wide())
    }

    pub fn load_resume(model_cfg: HprnConfig, tcfg: TrainConfig, path: &Path) -> Result<Self> {
        let (entries, _) = read_checkpoint(path)?;
        let mut session = TrainSession::new(model_cfg, tcfg)?;
        let by_name: HashMap<&str, &CheckpointEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();

        let named: Vec<(String, Vec<f64>)> = session
            .model
            .named_parameters()
            .iter()
            .map(|(n, _)| {
                let e = by_name.get(n.as_str()).ok_or_else(|| {
                    HprnError::contract("load_resume", format!("missing parameter {n}"))
                })?;
                Ok((n.clone(), e.values.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        session.model.load_named(&named)?;

        let params = session.model.named_parameters();
        for (i, (name, _)) in params.iter().enumerate() {
            let me = by_name
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| HprnError::contract("load_resume", format!("missing adam.m.{name}")))?;
            let ve = by_name
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| HprnError::contract("load_resume", format!("missing adam.v.{name}")))?;
            session.adam.m[i] = me.values.iter().map(|&v| T::from_f64(v)).collect();
            session.adam.v[i] = ve.values.iter().map(|&v| T::from_f64(v)).collect();
        }
        let scalar = |key: &str| -> Result<f64> {
            by_name
                .get(key)
                .map(|e| e.values[0])
                .ok_or_else(|| HprnError::contract("load_resume", format!("missing {key}")))
        };
        session.adam.step = scalar("meta.adam_step")? as usize;
        session.next_step = scalar("meta.next_step")? as usize;
        session.best_val_mrae = scalar("meta.best_val_mrae")?;
        Ok(session)
    }
}

// -------------------------------------------------------------------
// Gradient check harness
// -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check: {} samples, {} skipped at non-smooth points",
            self.samples, self.skipped_nonsmooth
        )?;
        writeln!(
            f,
            "  max relative error {:.3e} (mean {:.3e}), tolerance {:.1e}",
            self.max_rel_err, self.mean_rel_err, self.tol
        )?;
        writeln!(
            f,
            "  worst parameter: {}[{}]",
            self.worst_param, self.worst_index
        )?;
        write!(f, "  verdict: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Compare analytic gradients of the full training objective against
/// central finite differences on randomly sampled parameter coordinates,
/// in 64-bit precision.
///
/// Coordinates where two finite-difference step sizes disagree are skipped
/// as non-smooth (PReLU or absolute-value kinks crossed by the probe) and
/// do not count toward `samples`.
pub fn grad_check(
    model_cfg: &HprnConfig,
    patch: usize,
    n_samples: usize,
    fd_step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = Hprn::<f64>::new(model_cfg.clone(), seed)?;
    let cube = crate::data::gen_hsi(patch, patch, model_cfg.bands, seed.wrapping_add(1));
    let phi = crate::data::gen_sensitivity(model_cfg.bands, seed.wrapping_add(2))?;
    let rgb = crate::data::project_rgb(&cube, &phi, None)?;
    let labels = if model.ssrm.is_some() {
        model.cfg.label_maps(&rgb)?
    } else {
        Vec::new()
    };
    let rgb_t = rgb.to_tensor::<f64>();
    let gt_t = cube.to_tensor();
    let tau = model_cfg.sopc_tau;

    // Analytic gradients.
    model.zero_grads();
    let lb = total_loss(&model.forward(&rgb_t, &labels)?, &gt_t, tau)?;
    lb.total.backward()?;
    let params = model.named_parameters();
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_vec()).collect();

    let eval_loss = |model: &Hprn<f64>| -> Result<f64> {
        let pred = model.forward(&rgb_t, &labels)?;
        Ok(total_loss(&pred, &gt_t, tau)?.total_value())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x47434b);
    let mut accepted = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = (String::from("-"), 0usize);

    let max_attempts = n_samples * 8;
    let mut attempts = 0;
    while accepted < n_samples && attempts < max_attempts {
        attempts += 1;
        let pi = rng.random_range(0..params.len());
        let (name, param) = &params[pi];
        let ei = rng.random_range(0..param.numel());

        let probe = |delta: f64| -> Result<f64> {
            let mut data = param.to_vec();
            let orig = data[ei];
            data[ei] = orig + delta;
            param.set_data(&data);
            let loss = eval_loss(&model);
            data[ei] = orig;
            param.set_data(&data);
            loss
        };
        let fd_at = |h: f64| -> Result<f64> { Ok((probe(h)? - probe(-h)?) / (2.0 * h)) };
        let fd1 = fd_at(fd_step)?;
        let fd2 = fd_at(fd_step / 2.0)?;

        // Two step sizes disagreeing flags a kink inside the probe window.
        let fd_spread = (fd1 - fd2).abs() / fd1.abs().max(fd2.abs()).max(1e-6);
        if fd_spread > 1e-3 {
            skipped += 1;
            continue;
        }

        let a = analytic[pi][ei];
        let rel = (a - fd2).abs() / a.abs().max(fd2.abs()).max(1e-10);
        if rel > max_rel {
            max_rel = rel;
            worst = (name.clone(), ei);
        }
        sum_rel += rel;
        accepted += 1;
    }

    Ok(GradCheckReport {
        samples: accepted,
        skipped_nonsmooth: skipped,
        max_rel_err: max_rel,
        mean_rel_err: if accepted > 0 { sum_rel / accepted as f64 } else { 0.0 },
        worst_param: worst.0,
        worst_index: worst.1,
        tol,
        passed: accepted > 0 && max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.00012, 1.5), 0.00012);
        assert_eq!(poly_lr(100, 100, 0.00012, 1.5), 0.0);
        assert_eq!(poly_lr(150, 100, 0.00012, 1.5), 0.0);
        let mid = poly_lr(50, 100, 0.00012, 1.5);
        assert!((mid - 0.00012 * 0.5f64.powf(1.5)).abs() < 1e-18);
    }

    fn one_param(v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![(
            "p".to_string(),
            Tensor::parameter(Shape::of(&[1]), vec![v]).unwrap(),
        )]
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let params = one_param(0.7);
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 0.1, 0.9, 0.99, 1e-8).unwrap();
        assert_eq!(params[0].1.to_vec(), vec![0.7]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_against_sign() {
        let params = one_param(0.0);
        let mut state = AdamState::new(&params);
        let mut prev = 0.0;
        for _ in 0..20 {
            params[0].1.accumulate_grad(&[2.5]);
            adam_step(&params, &mut state, 0.01, 0.9, 0.99, 1e-8).unwrap();
            params[0].1.zero_grad();
            let now = params[0].1.to_vec()[0];
            assert!(now < prev, "{now} not strictly below {prev}");
            prev = now;
        }
    }

    #[test]
    fn adam_three_steps_match_hand_computed_moments() {
        let params = one_param(1.0);
        let mut state = AdamState::new(&params);
        let (b1, b2, eps, lr) = (0.9, 0.99, 1e-8, 0.05);
        let grads = [0.3, -0.2, 0.7];

        // Hand recurrence.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        for &g in &grads {
            params[0].1.accumulate_grad(&[g]);
            adam_step(&params, &mut state, lr, b1, b2, eps).unwrap();
            params[0].1.zero_grad();
        }
        assert!((params[0].1.to_vec()[0] - x).abs() < 1e-12);
    }

    fn tiny_model_cfg() -> HprnConfig {
        HprnConfig {
            bands: 5,
            channels: 8,
            n_mrb: 1,
            ssrm_groups: 4,
            ssrm_scales: vec![2],
            ..Default::default()
        }
    }

    fn tiny_scenes(n: usize, size: usize, seed: u64) -> Vec<ScenePair<f64>> {
        (0..n)
            .map(|i| {
                let cube = crate::data::gen_hsi(size, size, 5, seed + i as u64);
                let phi = crate::data::gen_sensitivity(5, seed).unwrap();
                let rgb = crate::data::project_rgb(&cube, &phi, None).unwrap();
                (cube, rgb)
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let tcfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: Some(2),
            batch_size: 2,
            patch_size: 16,
            seed: 9,
            precision: Precision::F64,
            ..Default::default()
        };
        let train = tiny_scenes(2, 16, 100);
        let val = tiny_scenes(1, 16, 200);
        let run = |_: u32| -> String {
            let mut s = TrainSession::<f64>::new(tiny_model_cfg(), tcfg.clone()).unwrap();
            let rows = s.run(&train, &val, None).unwrap();
            rows_to_csv(&rows)
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bit_exactly() {
        let tcfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: Some(3),
            batch_size: 2,
            patch_size: 16,
            seed: 17,
            precision: Precision::F64,
            ..Default::default()
        };
        let train = tiny_scenes(2, 16, 300);
        let val: Vec<ScenePair<f64>> = Vec::new();

        // Uninterrupted: 3 steps.
        let mut a = TrainSession::<f64>::new(tiny_model_cfg(), tcfg.clone()).unwrap();
        a.run(&train, &val, None).unwrap();
        let want: Vec<Vec<f64>> = a
            .model
            .named_parameters()
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();

        // Interrupted after 2 steps, saved, resumed for the last step.
        let dir = std::env::temp_dir().join("hprn_resume_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resume.ckpt");
        let mut b = TrainSession::<f64>::new(tiny_model_cfg(), tcfg.clone()).unwrap();
        b.run(&train, &val, Some(2)).unwrap();
        b.save_resume(&path).unwrap();
        let mut c = TrainSession::<f64>::load_resume(tiny_model_cfg(), tcfg, &path).unwrap();
        assert_eq!(c.next_step, 2);
        c.run(&train, &val, None).unwrap();
        let got: Vec<Vec<f64>> = c
            .model
            .named_parameters()
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        assert_eq!(want, got);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let tcfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: Some(1),
            batch_size: 1,
            patch_size: 16,
            seed: 3,
            ..Default::default()
        };
        let mut s = TrainSession::<f64>::new(tiny_model_cfg(), tcfg).unwrap();
        // Poison one weight.
        let params = s.model.named_parameters();
        let (_, p) = &params[0];
        let mut d = p.to_vec();
        d[0] = f64::NAN;
        p.set_data(&d);
        let train = tiny_scenes(1, 16, 400);
        match s.run(&train, &[], None) {
            Err(HprnError::TrainingAborted { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected abort, got {:?}", other.map(|r| r.len())),
        }
    }
}
