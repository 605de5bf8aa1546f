//! The spectral super-resolution network: shallow feature conv, a stack of
//! multi-residual blocks with an embedded channel-relation module, a global
//! residual summation, the reconstruction conv, and a semantic-driven
//! spatial relation refiner operating over superpixel groups at several
//! scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HprnError, Result};
use crate::nn::{local_avg_pool, prelu, Conv2d, Linear, MultiHeadAttention, PRELU_INIT_SLOPE};
use crate::scalar::Scalar;
use crate::slic::{multiscale_labels, LabelMap, SlicParams};
use crate::tensor::{Axis, Shape, Tensor};

/// Where the channel-relation module sits inside each block: before the
/// first, second or third residual add, or at all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcrmPosition {
    First,
    Second,
    Third,
    Multi,
}

impl TcrmPosition {
    fn applies_to(self, unit_index: usize) -> bool {
        match self {
            TcrmPosition::First => unit_index == 0,
            TcrmPosition::Second => unit_index == 1,
            TcrmPosition::Third => unit_index == 2,
            TcrmPosition::Multi => true,
        }
    }
}

impl std::str::FromStr for TcrmPosition {
    type Err = HprnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(TcrmPosition::First),
            "2" => Ok(TcrmPosition::Second),
            "3" => Ok(TcrmPosition::Third),
            "multi" => Ok(TcrmPosition::Multi),
            other => Err(HprnError::Config(format!(
                "unknown tcrm_position \"{other}\" (expected 1 | 2 | 3 | multi)"
            ))),
        }
    }
}

impl std::fmt::Display for TcrmPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TcrmPosition::First => write!(f, "1"),
            TcrmPosition::Second => write!(f, "2"),
            TcrmPosition::Third => write!(f, "3"),
            TcrmPosition::Multi => write!(f, "multi"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HprnConfig {
    pub bands: usize,
    pub channels: usize,
    pub n_mrb: usize,
    pub tcrm_r: usize,
    pub tcrm_grid: (usize, usize),
    pub tcrm_position: TcrmPosition,
    pub mha_heads: usize,
    pub attention_scaling: bool,
    pub ssrm_groups: usize,
    pub ssrm_scales: Vec<usize>,
    pub ssrm_shared_embedding: bool,
    pub ssrm_residual: bool,
    pub use_tcrm: bool,
    pub use_ssrm: bool,
    pub sopc_tau: f64,
    pub slic_compactness: f64,
    pub slic_iters: usize,
}

impl Default for HprnConfig {
    fn default() -> Self {
        HprnConfig {
            bands: 31,
            channels: 200,
            n_mrb: 10,
            tcrm_r: 16,
            tcrm_grid: (4, 4),
            tcrm_position: TcrmPosition::Third,
            mha_heads: 4,
            attention_scaling: true,
            ssrm_groups: 64,
            ssrm_scales: vec![8, 12, 16, 20],
            ssrm_shared_embedding: true,
            ssrm_residual: true,
            use_tcrm: true,
            use_ssrm: true,
            sopc_tau: 2.0,
            slic_compactness: 10.0,
            slic_iters: 10,
        }
    }
}

impl HprnConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("bands", self.bands),
            ("channels", self.channels),
            ("n_mrb", self.n_mrb),
            ("tcrm_r", self.tcrm_r),
            ("tcrm_grid height", self.tcrm_grid.0),
            ("tcrm_grid width", self.tcrm_grid.1),
            ("mha_heads", self.mha_heads),
            ("ssrm_groups", self.ssrm_groups),
            ("slic_iters", self.slic_iters),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(HprnError::Config(format!("{name} must be positive")));
            }
        }
        if self.ssrm_scales.is_empty() || self.ssrm_scales.iter().any(|&s| s == 0) {
            return Err(HprnError::Config("ssrm_scales must be non-empty positives".into()));
        }
        let d = self.tcrm_grid.0 * self.tcrm_grid.1;
        if d % self.mha_heads != 0 {
            return Err(HprnError::Config(format!(
                "token dim {d} (tcrm_grid product) not divisible by mha_heads {}",
                self.mha_heads
            )));
        }
        if self.sopc_tau < 0.0 {
            return Err(HprnError::Config("sopc_tau must be non-negative".into()));
        }
        if self.slic_compactness <= 0.0 {
            return Err(HprnError::Config("slic_compactness must be positive".into()));
        }
        Ok(())
    }

    /// Reduced width of the channel-gate bottleneck.
    pub fn reduced_channels(&self) -> usize {
        (self.channels / self.tcrm_r).max(1)
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            scale: 8,
            compactness: self.slic_compactness,
            max_iters: self.slic_iters,
            use_lab: true,
        }
    }

    /// Segment an RGB input at every configured scale. The maps are treated
    /// as constants downstream; no gradient flows into segmentation.
    pub fn label_maps(&self, rgb: &crate::data::RgbImage) -> Result<Vec<LabelMap>> {
        multiscale_labels(rgb, &self.ssrm_scales, &self.slic_params())
    }
}

// -------------------------------------------------------------------
// TCRM: vector-squeeze channel attention
// -------------------------------------------------------------------

/// Channel-relation gate: each channel is squeezed to a grid-pooled vector
/// (not a scalar), the vectors interact through multi-head self-attention,
/// and a bottleneck maps the row means to per-channel sigmoid gates.
pub struct Tcrm<T: Scalar> {
    pub grid: (usize, usize),
    pub mha: MultiHeadAttention<T>,
    pub reduce: Linear<T>,
    pub slope: Tensor<T>,
    pub expand: Linear<T>,
    channels: usize,
}

impl<T: Scalar> Tcrm<T> {
    pub fn new(cfg: &HprnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.tcrm_grid.0 * cfg.tcrm_grid.1;
        let reduced = cfg.reduced_channels();
        Ok(Tcrm {
            grid: cfg.tcrm_grid,
            mha: MultiHeadAttention::new(d, cfg.mha_heads, cfg.attention_scaling, rng)?,
            reduce: Linear::new(cfg.channels, reduced, rng)?,
            slope: Tensor::parameter(
                Shape::vector(reduced),
                vec![T::from_f64(PRELU_INIT_SLOPE); reduced],
            )?,
            expand: Linear::new(reduced, cfg.channels, rng)?,
            channels: cfg.channels,
        })
    }

    /// Per-channel gates in (0,1).
    pub fn gates(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = x.dims()[0];
        if c != self.channels {
            return Err(HprnError::dimension(
                "Tcrm::gates",
                x.shape().to_string(),
                format!("[C={}]", self.channels),
            ));
        }
        let d = self.grid.0 * self.grid.1;
        let pooled = local_avg_pool(x, self.grid)?;
        let tokens = pooled.reshape(Shape::labeled(&[c, d], &[Axis::Channel, Axis::Item]))?;
        let tr = self.mha.forward(&tokens)?;
        let s = tr.mean_axis(1)?; // [C]
        let reduced = self
            .reduce
            .forward(&s.reshape(Shape::of(&[1, c]))?)?
            .reshape(Shape::vector(self.reduce.out_features))?;
        let activated = prelu(&reduced, &self.slope)?;
        let gates = self
            .expand
            .forward(&activated.reshape(Shape::of(&[1, self.reduce.out_features]))?)?
            .reshape(Shape::vector(c))?
            .sigmoid();
        Ok(gates)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gates = self.gates(x)?;
        x.mul_channel(&gates)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.mha.collect_params(&format!("{prefix}.mha"), out);
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
        out.push((format!("{prefix}.slope"), self.slope.clone()));
        self.expand.collect_params(&format!("{prefix}.expand"), out);
    }
}

// -------------------------------------------------------------------
// MRB: multi-residual block
// -------------------------------------------------------------------

struct ResidualUnit<T: Scalar> {
    conv1: Conv2d<T>,
    slope: Tensor<T>,
    conv2: Conv2d<T>,
    tcrm: Option<Tcrm<T>>,
}

impl<T: Scalar> ResidualUnit<T> {
    fn new(cfg: &HprnConfig, with_tcrm: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(ResidualUnit {
            conv1: Conv2d::new(c, c, 3, rng)?,
            slope: Tensor::parameter(Shape::vector(c), vec![T::from_f64(PRELU_INIT_SLOPE); c])?,
            conv2: Conv2d::new(c, c, 3, rng)?,
            tcrm: if with_tcrm { Some(Tcrm::new(cfg, rng)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut branch = self.conv2.forward(&prelu(&self.conv1.forward(x)?, &self.slope)?)?;
        if let Some(tcrm) = &self.tcrm {
            branch = tcrm.forward(&branch)?;
        }
        x.add(&branch)
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        out.push((format!("{prefix}.slope"), self.slope.clone()));
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        if let Some(tcrm) = &self.tcrm {
            tcrm.collect_params(&format!("{prefix}.tcrm"), out);
        }
    }
}

/// Three sequential two-conv residual units plus a block-level skip.
pub struct Mrb<T: Scalar> {
    units: Vec<ResidualUnit<T>>,
}

impl<T: Scalar> Mrb<T> {
    pub fn new(cfg: &HprnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let units = (0..3)
            .map(|i| {
                let with_tcrm = cfg.use_tcrm && cfg.tcrm_position.applies_to(i);
                ResidualUnit::new(cfg, with_tcrm, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mrb { units })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for unit in &self.units {
            y = unit.forward(&y)?;
        }
        y.add(x)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, unit) in self.units.iter().enumerate() {
            unit.collect_params(&format!("{prefix}.unit{i}"), out);
        }
    }
}

// -------------------------------------------------------------------
// Unfold / fold over superpixel groups
// -------------------------------------------------------------------

/// Record of the pixel reordering: slots list the source pixel of every
/// grouped position (mirror-filled tail slots repeat source pixels), and
/// `pixel_to_slot` points each pixel at its primary slot for exact
/// inversion.
#[derive(Clone, Debug)]
pub struct Permutation {
    pub hw: usize,
    pub groups: usize,
    pub group_len: usize,
    pub slot_to_pixel: Vec<usize>,
    pub pixel_to_slot: Vec<usize>,
}

/// Sort pixels by (category, raster order), split into `groups` chunks of
/// `ceil(HW/groups)`, mirror-reflecting the tail when the division is not
/// exact. Categories are ranked by first raster appearance, so any
/// bijective relabeling of the map produces the identical permutation.
pub fn unfold_order(labels: &LabelMap, groups: usize) -> Result<Permutation> {
    let hw = labels.height * labels.width;
    if groups == 0 || groups > hw {
        return Err(HprnError::contract(
            "unfold_order",
            format!("{groups} groups invalid for {hw} pixels"),
        ));
    }
    // Canonical category ranks, first appearance in raster order.
    let mut rank = vec![u32::MAX; labels.n_labels.max(1)];
    let mut next = 0u32;
    for &l in &labels.labels {
        let slot = &mut rank[l as usize];
        if *slot == u32::MAX {
            *slot = next;
            next += 1;
        }
    }
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by_key(|&p| rank[labels.labels[p] as usize]);

    let group_len = hw.div_ceil(groups);
    let total = groups * group_len;
    let mut slot_to_pixel = Vec::with_capacity(total);
    slot_to_pixel.extend_from_slice(&order);
    for i in 0..total - hw {
        // Mirror fill: reflect the tail of the sorted sequence.
        slot_to_pixel.push(order[hw - 1 - i]);
    }
    let mut pixel_to_slot = vec![0usize; hw];
    for (slot, &p) in order.iter().enumerate() {
        pixel_to_slot[p] = slot;
    }
    Ok(Permutation {
        hw,
        groups,
        group_len,
        slot_to_pixel,
        pixel_to_slot,
    })
}

/// Gather a `B x H x W` feature into grouped form `B x (G*N)` following the
/// permutation. Differentiable (gradients scatter-add back, fill slots
/// included).
pub fn apply_unfold<T: Scalar>(feat: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let dims = feat.dims();
    let (b, hw) = (dims[0], dims[1..].iter().product::<usize>());
    if hw != perm.hw {
        return Err(HprnError::contract(
            "apply_unfold",
            format!("feature has {hw} pixels, permutation built for {}", perm.hw),
        ));
    }
    feat.reshape(Shape::of(&[b, hw]))?
        .gather_cols(&perm.slot_to_pixel)
}

/// Inverse scatter: every pixel takes the value of its primary slot, so
/// mirror-filled duplicates are dropped. `grouped` is `B x (G*N)`.
pub fn fold_reorder<T: Scalar>(
    grouped: &Tensor<T>,
    perm: &Permutation,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let dims = grouped.dims();
    if dims.len() != 2 || dims[1] != perm.groups * perm.group_len || height * width != perm.hw {
        return Err(HprnError::contract(
            "fold_reorder",
            format!(
                "grouped shape {} does not match permutation ({} groups of {}, hw {})",
                grouped.shape(),
                perm.groups,
                perm.group_len,
                perm.hw
            ),
        ));
    }
    grouped
        .gather_cols(&perm.pixel_to_slot)?
        .reshape(Shape::chw(dims[0], height, width))
}

// -------------------------------------------------------------------
// SSRM: semantic-driven spatial relation refiner
// -------------------------------------------------------------------

pub struct Ssrm<T: Scalar> {
    pub embed: Conv2d<T>,
    /// Separate key embedding when embeddings are not shared.
    pub embed2: Option<Conv2d<T>>,
    pub value: Conv2d<T>,
    pub fusion: Conv2d<T>,
    pub groups: usize,
    pub residual: bool,
    bands: usize,
    n_scales: usize,
}

impl<T: Scalar> Ssrm<T> {
    pub fn new(cfg: &HprnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = cfg.bands;
        Ok(Ssrm {
            embed: Conv2d::new(b, b, 1, rng)?,
            embed2: if cfg.ssrm_shared_embedding {
                None
            } else {
                Some(Conv2d::new(b, b, 1, rng)?)
            },
            value: Conv2d::new(b, b, 1, rng)?,
            fusion: Conv2d::new(cfg.ssrm_scales.len() * b, b, 1, rng)?,
            groups: cfg.ssrm_groups,
            residual: cfg.ssrm_residual,
            bands: b,
            n_scales: cfg.ssrm_scales.len(),
        })
    }

    /// The row-stochastic relation matrices for one label map, shaped
    /// `G x N x N`. Diagnostic surface used by the invariant tests.
    pub fn relation_matrices(&self, coarse: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
        let dims = coarse.dims().to_vec();
        let (b, h, w) = (dims[0], dims[1], dims[2]);
        if labels.height != h || labels.width != w {
            return Err(HprnError::contract(
                "Ssrm::relation_matrices",
                format!("label map {}x{} does not match feature {h}x{w}", labels.height, labels.width),
            ));
        }
        let perm = unfold_order(labels, self.groups)?;
        let (g, n) = (perm.groups, perm.group_len);
        let d_feat = self.embed.forward(coarse)?;
        let e_feat = match &self.embed2 {
            Some(conv) => conv.forward(coarse)?,
            None => d_feat.clone(),
        };
        let grouped = |t: &Tensor<T>| -> Result<Tensor<T>> {
            apply_unfold(t, &perm)?.reshape(Shape::labeled(
                &[b, g, n],
                &[Axis::Channel, Axis::Group, Axis::Item],
            ))
        };
        let d_g = grouped(&d_feat)?.permute(&[1, 2, 0])?;
        let e_g = grouped(&e_feat)?.permute(&[1, 0, 2])?;
        d_g.batched_matmul(&e_g)?.softmax(2)
    }

    /// Relation-weighted aggregation within superpixel-ordered groups for
    /// one label map.
    pub fn forward_single_scale(&self, coarse: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
        let dims = coarse.dims().to_vec();
        let (b, h, w) = (dims[0], dims[1], dims[2]);
        if labels.height != h || labels.width != w {
            return Err(HprnError::contract(
                "Ssrm::forward_single_scale",
                format!(
                    "label map {}x{} does not match feature {}x{}",
                    labels.height, labels.width, h, w
                ),
            ));
        }
        let perm = unfold_order(labels, self.groups)?;
        let (g, n) = (perm.groups, perm.group_len);

        let d_feat = self.embed.forward(coarse)?;
        let e_feat = match &self.embed2 {
            Some(conv) => conv.forward(coarse)?,
            None => d_feat.clone(),
        };
        let y_feat = self.value.forward(coarse)?;

        let grouped = |t: &Tensor<T>| -> Result<Tensor<T>> {
            apply_unfold(t, &perm)?.reshape(Shape::labeled(
                &[b, g, n],
                &[Axis::Channel, Axis::Group, Axis::Item],
            ))
        };
        let d_g = grouped(&d_feat)?.permute(&[1, 2, 0])?; // G x N x B
        let e_g = grouped(&e_feat)?.permute(&[1, 0, 2])?; // G x B x N
        let relation = d_g.batched_matmul(&e_g)?.softmax(2)?; // G x N x N
        let y_g = grouped(&y_feat)?.permute(&[1, 2, 0])?; // G x N x B
        let aggregated = relation.batched_matmul(&y_g)?; // G x N x B
        let flat = aggregated
            .permute(&[2, 0, 1])?
            .reshape(Shape::of(&[b, g * n]))?;
        fold_reorder(&flat, &perm, h, w)
    }

    /// Per-scale outputs concatenated along channels, fused by a 1x1 conv,
    /// plus the coarse input as a residual when configured.
    pub fn forward(&self, coarse: &Tensor<T>, label_maps: &[LabelMap]) -> Result<Tensor<T>> {
        if label_maps.len() != self.n_scales {
            return Err(HprnError::contract(
                "Ssrm::forward",
                format!(
                    "{} label maps supplied, module built for {} scales",
                    label_maps.len(),
                    self.n_scales
                ),
            ));
        }
        let per_scale = label_maps
            .iter()
            .map(|lm| self.forward_single_scale(coarse, lm))
            .collect::<Result<Vec<_>>>()?;
        let stacked = Tensor::concat_axis0(&per_scale)?;
        let fused = self.fusion.forward(&stacked)?;
        if self.residual {
            fused.add(coarse)
        } else {
            Ok(fused)
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.embed.collect_params(&format!("{prefix}.embed"), out);
        if let Some(conv) = &self.embed2 {
            conv.collect_params(&format!("{prefix}.embed2"), out);
        }
        self.value.collect_params(&format!("{prefix}.value"), out);
        self.fusion.collect_params(&format!("{prefix}.fusion"), out);
    }

    pub fn bands(&self) -> usize {
        self.bands
    }
}

// -------------------------------------------------------------------
// Full network
// -------------------------------------------------------------------

pub struct Hprn<T: Scalar> {
    pub cfg: HprnConfig,
    pub sfp: Conv2d<T>,
    pub mrbs: Vec<Mrb<T>>,
    pub grs: Conv2d<T>,
    pub rec: Conv2d<T>,
    pub ssrm: Option<Ssrm<T>>,
}

impl<T: Scalar> Hprn<T> {
    pub fn new(cfg: HprnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4850524e);
        let sfp = Conv2d::new(3, cfg.channels, 3, &mut rng)?;
        let mrbs = (0..cfg.n_mrb)
            .map(|_| Mrb::new(&cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let grs = Conv2d::new(cfg.channels, cfg.channels, 3, &mut rng)?;
        let rec = Conv2d::new(cfg.channels, cfg.bands, 3, &mut rng)?;
        let ssrm = if cfg.use_ssrm {
            Some(Ssrm::new(&cfg, &mut rng)?)
        } else {
            None
        };
        Ok(Hprn {
            cfg,
            sfp,
            mrbs,
            grs,
            rec,
            ssrm,
        })
    }

    /// Full forward pass. `labels` must hold one map per configured scale
    /// when the spatial refiner is enabled (they are ignored otherwise).
    pub fn forward(&self, rgb: &Tensor<T>, labels: &[LabelMap]) -> Result<Tensor<T>> {
        if rgb.shape().rank() != 3 || rgb.dims()[0] != 3 {
            return Err(HprnError::contract(
                "Hprn::forward",
                format!("expected 3 x H x W input, got {}", rgb.shape()),
            ));
        }
        let (h, w) = (rgb.dims()[1], rgb.dims()[2]);
        if self.ssrm.is_some() {
            for lm in labels {
                if lm.height != h || lm.width != w {
                    return Err(HprnError::contract(
                        "Hprn::forward",
                        format!(
                            "label map {}x{} does not match input {h}x{w}",
                            lm.height, lm.width
                        ),
                    ));
                }
            }
        }
        let f0 = self.sfp.forward(rgb)?;
        let mut feat = f0.clone();
        for mrb in &self.mrbs {
            feat = mrb.forward(&feat)?;
        }
        let fused = self.grs.forward(&feat)?.add(&f0)?;
        let coarse = self.rec.forward(&fused)?;
        match &self.ssrm {
            Some(ssrm) => ssrm.forward(&coarse, labels),
            None => Ok(coarse),
        }
    }

    /// Parameters in a fixed construction order; names are stable and used
    /// by the checkpoint format.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.sfp.collect_params("sfp", &mut out);
        for (i, mrb) in self.mrbs.iter().enumerate() {
            mrb.collect_params(&format!("mrb{i}"), &mut out);
        }
        self.grs.collect_params("grs", &mut out);
        self.rec.collect_params("rec", &mut out);
        if let Some(ssrm) = &self.ssrm {
            ssrm.collect_params("ssrm", &mut out);
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Load values by parameter name; every model parameter must be present
    /// with the right shape.
    pub fn load_named(&self, values: &[(String, Vec<f64>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Vec<f64>> =
            values.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for (name, param) in self.named_parameters() {
            let src = lookup.get(name.as_str()).ok_or_else(|| {
                HprnError::contract("Hprn::load_named", format!("missing parameter {name}"))
            })?;
            if src.len() != param.numel() {
                return Err(HprnError::contract(
                    "Hprn::load_named",
                    format!(
                        "parameter {name}: checkpoint has {} values, model expects {}",
                        src.len(),
                        param.numel()
                    ),
                ));
            }
            let cast: Vec<T> = src.iter().map(|&v| T::from_f64(v)).collect();
            param.set_data(&cast);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> HprnConfig {
        HprnConfig {
            bands: 5,
            channels: 8,
            n_mrb: 1,
            ssrm_groups: 4,
            ssrm_scales: vec![2],
            ..Default::default()
        }
    }

    fn label_map_from(labels: Vec<u32>, h: usize, w: usize) -> LabelMap {
        LabelMap::new(h, w, labels, 2).unwrap()
    }

    #[test]
    fn mrb_with_zero_convs_doubles_input() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mrb = Mrb::<f64>::new(&cfg, &mut rng).unwrap();
        let mut params = Vec::new();
        mrb.collect_params("m", &mut params);
        for (name, p) in &params {
            if name.contains("conv") {
                p.set_data(&vec![0.0; p.numel()]);
            }
        }
        let x = Tensor::from_vec(
            Shape::chw(8, 4, 4),
            (0..8 * 16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let y = mrb.forward(&x).unwrap();
        for (yv, xv) in y.to_vec().iter().zip(x.to_vec().iter()) {
            assert!((yv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn mrb_preserves_shape() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mrb = Mrb::<f64>::new(&cfg, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::chw(8, 6, 7));
        assert_eq!(mrb.forward(&x).unwrap().dims(), &[8, 6, 7]);
    }

    #[test]
    fn tcrm_unit_gate_passes_input_through() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tcrm = Tcrm::<f64>::new(&cfg, &mut rng).unwrap();
        // Saturate the final sigmoid through its bias.
        tcrm.expand.bias.set_data(&vec![60.0; 8]);
        tcrm.expand.weight.set_data(&vec![0.0; tcrm.expand.weight.numel()]);
        let x = Tensor::from_vec(
            Shape::chw(8, 4, 4),
            (0..128).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let y = tcrm.forward(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn tcrm_gates_strictly_inside_unit_interval() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tcrm = Tcrm::<f64>::new(&cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(
            Shape::chw(8, 4, 4),
            (0..128).map(|i| ((i * 29 % 17) as f64 - 8.0) / 4.0).collect(),
        )
        .unwrap();
        let g = tcrm.gates(&x).unwrap();
        assert!(g.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn unfold_single_label_is_identity_order() {
        let lm = label_map_from(vec![0; 12], 3, 4);
        let perm = unfold_order(&lm, 3).unwrap();
        assert_eq!(perm.slot_to_pixel, (0..12).collect::<Vec<_>>());
        assert_eq!(perm.pixel_to_slot, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn unfold_two_by_two_hand_case() {
        // labels [[0,1],[0,1]], G=2: group 0 holds pixels (0,0),(1,0).
        let lm = label_map_from(vec![0, 1, 0, 1], 2, 2);
        let perm = unfold_order(&lm, 2).unwrap();
        assert_eq!(perm.group_len, 2);
        assert_eq!(perm.slot_to_pixel, vec![0, 2, 1, 3]);
    }

    #[test]
    fn unfold_mirror_fill_hand_case() {
        // HW=6, G=4 -> N=2, 8 slots, last two mirror the tail.
        let lm = label_map_from(vec![0; 6], 2, 3);
        let perm = unfold_order(&lm, 4).unwrap();
        assert_eq!(perm.group_len, 2);
        assert_eq!(perm.slot_to_pixel, vec![0, 1, 2, 3, 4, 5, 5, 4]);
        // Duplicated slots recorded; primaries stay at first occurrence.
        assert_eq!(perm.pixel_to_slot, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fold_inverts_unfold_with_and_without_fill() {
        for (labels, h, w, g) in [
            (vec![0, 1, 1, 0, 0, 1, 0, 1], 2, 4, 4),
            (vec![0, 1, 2, 0, 1, 2], 2, 3, 4), // mirror fill
        ] {
            let lm = LabelMap::new(h, w, labels, 3).unwrap();
            let perm = unfold_order(&lm, g).unwrap();
            let feat = Tensor::<f64>::from_vec(
                Shape::chw(2, h, w),
                (0..2 * h * w).map(|i| i as f64).collect(),
            )
            .unwrap();
            let grouped = apply_unfold(&feat, &perm).unwrap();
            let back = fold_reorder(&grouped, &perm, h, w).unwrap();
            assert_eq!(back.to_vec(), feat.to_vec());
        }
    }

    #[test]
    fn ssrm_relation_rows_sum_to_one_and_uniform_case_averages() {
        let mut cfg = tiny_cfg();
        cfg.ssrm_groups = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ssrm = Ssrm::<f64>::new(&cfg, &mut rng).unwrap();
        let coarse = Tensor::from_vec(
            Shape::chw(5, 2, 2),
            (0..20).map(|i| (i as f64 / 7.0).sin()).collect(),
        )
        .unwrap();
        let lm = label_map_from(vec![0, 1, 0, 1], 2, 2);

        // Force uniform attention (embed -> 0) and identity value path.
        ssrm.embed.weight.set_data(&vec![0.0; ssrm.embed.weight.numel()]);
        ssrm.embed.bias.set_data(&vec![0.0; 5]);
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        ssrm.value.weight.set_data(&eye);
        ssrm.value.bias.set_data(&vec![0.0; 5]);

        let out = ssrm.forward_single_scale(&coarse, &lm).unwrap().to_vec();
        // Groups are {(0,0),(1,0)} and {(0,1),(1,1)}; with uniform attention
        // each output pixel is its group mean.
        let cv = coarse.to_vec();
        for b in 0..5 {
            let g0 = (cv[b * 4] + cv[b * 4 + 2]) / 2.0;
            let g1 = (cv[b * 4 + 1] + cv[b * 4 + 3]) / 2.0;
            assert!((out[b * 4] - g0).abs() < 1e-12);
            assert!((out[b * 4 + 2] - g0).abs() < 1e-12);
            assert!((out[b * 4 + 1] - g1).abs() < 1e-12);
            assert!((out[b * 4 + 3] - g1).abs() < 1e-12);
        }
    }

    #[test]
    fn ssrm_multiscale_passthrough_when_fusion_identity_and_value_zero() {
        let mut cfg = tiny_cfg();
        cfg.ssrm_scales = vec![2];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ssrm = Ssrm::<f64>::new(&cfg, &mut rng).unwrap();
        // Zero the aggregation branch, make the fusion pass through, keep
        // the residual: output equals the coarse input.
        ssrm.value.weight.set_data(&vec![0.0; ssrm.value.weight.numel()]);
        ssrm.value.bias.set_data(&vec![0.0; 5]);
        let mut eye = vec![0.0; ssrm.fusion.weight.numel()];
        for i in 0..5 {
            eye[i * 5 + i] = 1.0;
        }
        ssrm.fusion.weight.set_data(&eye);
        ssrm.fusion.bias.set_data(&vec![0.0; 5]);

        let coarse = Tensor::from_vec(
            Shape::chw(5, 2, 2),
            (0..20).map(|i| i as f64 / 19.0).collect(),
        )
        .unwrap();
        let lm = label_map_from(vec![0, 1, 0, 1], 2, 2);
        let out = ssrm.forward(&coarse, &[lm]).unwrap();
        for (o, c) in out.to_vec().iter().zip(coarse.to_vec().iter()) {
            assert!((o - c).abs() < 1e-12);
        }
    }

    #[test]
    fn hprn_forward_shape_and_determinism() {
        let cfg = tiny_cfg();
        let model = Hprn::<f64>::new(cfg.clone(), 11).unwrap();
        let rgb = Tensor::from_vec(
            Shape::chw(3, 8, 8),
            (0..192).map(|i| ((i * 13 % 64) as f64) / 64.0).collect(),
        )
        .unwrap();
        let lm = LabelMap::new(8, 8, (0..64).map(|p| (p % 2) as u32).collect(), 2).unwrap();
        let y1 = model.forward(&rgb, &[lm.clone()]).unwrap();
        assert_eq!(y1.dims(), &[5, 8, 8]);
        let y2 = model.forward(&rgb, &[lm]).unwrap();
        assert_eq!(y1.to_vec(), y2.to_vec());
    }

    #[test]
    fn hprn_label_spatial_mismatch_is_error() {
        let model = Hprn::<f64>::new(tiny_cfg(), 11).unwrap();
        let rgb = Tensor::zeros(Shape::chw(3, 8, 8));
        let lm = LabelMap::new(4, 4, vec![0; 16], 2).unwrap();
        assert!(model.forward(&rgb, &[lm]).is_err());
    }

    #[test]
    fn named_parameters_are_unique_and_stable() {
        let model = Hprn::<f64>::new(tiny_cfg(), 11).unwrap();
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "duplicate parameter names");
        let again: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, again);
    }
}
