//! Flat key=value run configuration. Keys mirror the model and trainer
//! config field names exactly; command-line flags override file values.

use std::path::Path;

use crate::error::{HprnError, Result};
use crate::metrics::PsnrFormula;
use crate::model::HprnConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: HprnConfig,
    pub train: TrainConfig,
    pub psnr_formula: PsnrFormula,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(HprnError::Config(format!("{key}: expected bool, got \"{other}\""))),
    }
}

fn parse_num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse()
        .map_err(|_| HprnError::Config(format!("{key}: cannot parse \"{v}\"")))
}

fn parse_grid(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 2 {
        return Err(HprnError::Config(format!("{key}: expected HxW, got \"{v}\"")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_scales(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    pub fn apply_line(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "bands" => m.bands = parse_num(key, value)?,
            "channels" => m.channels = parse_num(key, value)?,
            "n_mrb" => m.n_mrb = parse_num(key, value)?,
            "tcrm_r" => m.tcrm_r = parse_num(key, value)?,
            "tcrm_grid" => m.tcrm_grid = parse_grid(key, value)?,
            "tcrm_position" => m.tcrm_position = value.parse()?,
            "mha_heads" => m.mha_heads = parse_num(key, value)?,
            "attention_scaling" => m.attention_scaling = parse_bool(key, value)?,
            "ssrm_groups" => m.ssrm_groups = parse_num(key, value)?,
            "ssrm_scales" => m.ssrm_scales = parse_scales(key, value)?,
            "ssrm_shared_embedding" => m.ssrm_shared_embedding = parse_bool(key, value)?,
            "ssrm_residual" => m.ssrm_residual = parse_bool(key, value)?,
            "use_tcrm" => m.use_tcrm = parse_bool(key, value)?,
            "use_ssrm" => m.use_ssrm = parse_bool(key, value)?,
            "sopc_tau" => m.sopc_tau = parse_num(key, value)?,
            "slic_compactness" => m.slic_compactness = parse_num(key, value)?,
            "slic_iters" => m.slic_iters = parse_num(key, value)?,
            "lr0" => t.lr0 = parse_num(key, value)?,
            "beta1" => t.beta1 = parse_num(key, value)?,
            "beta2" => t.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "decay_power" => t.decay_power = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "steps_per_epoch" => {
                t.steps_per_epoch = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "patch_size" => t.patch_size = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "precision" => t.precision = value.parse()?,
            "psnr_formula" => self.psnr_formula = value.parse()?,
            other => {
                return Err(HprnError::Config(format!("unknown config key \"{other}\"")));
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HprnError::Config(format!("line {}: expected key=value, got \"{line}\"", lineno + 1))
            })?;
            cfg.apply_line(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("bands", m.bands.to_string());
        push("channels", m.channels.to_string());
        push("n_mrb", m.n_mrb.to_string());
        push("tcrm_r", m.tcrm_r.to_string());
        push("tcrm_grid", format!("{}x{}", m.tcrm_grid.0, m.tcrm_grid.1));
        push("tcrm_position", m.tcrm_position.to_string());
        push("mha_heads", m.mha_heads.to_string());
        push("attention_scaling", m.attention_scaling.to_string());
        push("ssrm_groups", m.ssrm_groups.to_string());
        push(
            "ssrm_scales",
            m.ssrm_scales
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("ssrm_shared_embedding", m.ssrm_shared_embedding.to_string());
        push("ssrm_residual", m.ssrm_residual.to_string());
        push("use_tcrm", m.use_tcrm.to_string());
        push("use_ssrm", m.use_ssrm.to_string());
        push("sopc_tau", m.sopc_tau.to_string());
        push("slic_compactness", m.slic_compactness.to_string());
        push("slic_iters", m.slic_iters.to_string());
        push("lr0", t.lr0.to_string());
        push("beta1", t.beta1.to_string());
        push("beta2", t.beta2.to_string());
        push("adam_eps", t.adam_eps.to_string());
        push("decay_power", t.decay_power.to_string());
        push("epochs", t.epochs.to_string());
        push(
            "steps_per_epoch",
            t.steps_per_epoch.map_or("auto".to_string(), |v| v.to_string()),
        );
        push("batch_size", t.batch_size.to_string());
        push("patch_size", t.patch_size.to_string());
        push("seed", t.seed.to_string());
        push("precision", t.precision.to_string());
        push(
            "psnr_formula",
            match self.psnr_formula {
                PsnrFormula::Standard => "standard".to_string(),
                PsnrFormula::PerPixelLog => "per-pixel-log".to_string(),
            },
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_config_string())?)
    }
}
