//! Flat run configuration: TOML file plus `--key=value` overrides.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stcnet::metrics::Averaging;
use stcnet::nets::{Consensus, GmConfig, LmConfig};
use stcnet::synth::SynthConfig;
use stcnet::trainer::{Mode, Scheme, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // dataset
    pub videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub classes: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub separation: f64,
    pub noise: f64,
    pub prototype_overlap: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub train_fraction: f64,

    // training
    pub epochs: usize,
    pub lr: f64,
    pub e_frozen: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: usize,
    pub n_std: f64,
    pub threshold: f64,
    pub pool_k: usize,
    pub scheme: String,
    pub mode: String,
    pub use_bce: bool,
    pub use_cos: bool,
    pub use_bg: bool,
    pub lm_width: usize,
    pub lm_dilations: Vec<usize>,
    pub gm_width: usize,
    pub gm_dilations: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
    pub val_every: usize,
    pub select_best: bool,

    // evaluation
    pub consensus: String,
    pub averaging: String,
    pub diagnostics: bool,

    // ablation
    pub ablate_seeds: Vec<u64>,
    pub fixed_windows: Vec<usize>,
    pub trimmed_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            videos: s.videos,
            min_len: s.min_len,
            max_len: s.max_len,
            dim: s.dim,
            classes: s.classes,
            min_segment: s.min_segment,
            max_segment: s.max_segment,
            separation: s.separation,
            noise: s.noise,
            prototype_overlap: s.prototype_overlap,
            min_distractors: s.min_distractors,
            max_distractors: s.max_distractors,
            train_fraction: s.train_fraction,
            epochs: t.epochs,
            lr: t.lr,
            e_frozen: t.e_frozen,
            alpha: t.alpha,
            beta: t.beta,
            delta: t.delta,
            n_std: t.n_std,
            threshold: t.threshold,
            pool_k: t.gm.pool_k,
            scheme: t.scheme.to_string(),
            mode: t.mode.to_string(),
            use_bce: t.use_bce,
            use_cos: t.use_cos,
            use_bg: t.use_bg,
            lm_width: t.lm.width,
            lm_dilations: t.lm.dilations.clone(),
            gm_width: t.gm.width,
            gm_dilations: t.gm.dilations.clone(),
            kernel: t.lm.kernel,
            dropout: t.lm.dropout,
            val_every: t.val_every,
            select_best: t.select_best,
            consensus: t.consensus.to_string(),
            averaging: "macro".into(),
            diagnostics: false,
            ablate_seeds: vec![0],
            fixed_windows: vec![10, 20, 40],
            trimmed_window: 20,
        }
    }
}

/// Keys that only affect evaluation or ablation bookkeeping; they are left out
/// of the checkpoint hash so a trained model can be re-evaluated under them.
const EVAL_ONLY_KEYS: &[&str] = &[
    "consensus",
    "averaging",
    "diagnostics",
    "ablate_seeds",
    "fixed_windows",
    "trimmed_window",
    "val_every",
];

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Reads `path` (if given) and applies `overrides` on top of the defaults.
    pub fn load(path: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            table.insert(key.clone(), parse_value(raw));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.synth()?;
        cfg.train()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            videos: self.videos,
            min_len: self.min_len,
            max_len: self.max_len,
            dim: self.dim,
            classes: self.classes,
            min_segment: self.min_segment,
            max_segment: self.max_segment,
            separation: self.separation,
            noise: self.noise,
            prototype_overlap: self.prototype_overlap,
            min_distractors: self.min_distractors,
            max_distractors: self.max_distractors,
            seed: self.seed,
            train_fraction: self.train_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let averaging = match self.averaging.as_str() {
            "macro" => Averaging::Macro,
            "micro" => Averaging::Micro,
            other => bail!("unknown averaging `{other}` (macro, micro)"),
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            e_frozen: self.e_frozen,
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            n_std: self.n_std,
            threshold: self.threshold,
            scheme: self.scheme.parse::<Scheme>()?,
            mode: self.mode.parse::<Mode>()?,
            consensus: self.consensus.parse::<Consensus>()?,
            use_bce: self.use_bce,
            use_cos: self.use_cos,
            use_bg: self.use_bg,
            lm: LmConfig {
                input_dim: self.dim,
                width: self.lm_width,
                dilations: self.lm_dilations.clone(),
                kernel: self.kernel,
                dropout: self.dropout,
            },
            gm: GmConfig {
                input_dim: self.dim,
                width: self.gm_width,
                dilations: self.gm_dilations.clone(),
                kernel: self.kernel,
                dropout: self.dropout,
                classes: self.classes,
                pool_k: self.pool_k,
                background: true,
            },
            seed: self.seed,
            val_every: self.val_every,
            select_best: self.select_best,
            averaging,
        };
        cfg.validate()?;
        cfg.lm.validate()?;
        cfg.gm.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical TOML of every training-relevant key, truncated to 64 bits.
    pub fn model_hash(&self) -> Result<u64> {
        let mut table = match toml::Value::try_from(self)? {
            toml::Value::Table(t) => t,
            _ => bail!("config did not serialize to a table"),
        };
        for k in EVAL_ONLY_KEYS {
            table.remove(*k);
        }
        let text = toml::to_string(&table)?;
        let digest = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Ok(u64::from_le_bytes(bytes))
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--key=value` config overrides from the rest of the arguments.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let keys = RunConfig::keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((k, v)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if keys.iter().any(|key| key == k) && k != "seed" {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
            if !k.is_empty() && k.chars().all(|c| c.is_ascii_lowercase() || c == '_') && !CLI_FLAGS.contains(&k) {
                bail!("unknown config key `{k}`; valid keys: {}", keys.join(", "));
            }
        }
        rest.push(arg);
    }
    Ok((rest, overrides))
}

const CLI_FLAGS: &[&str] = &["seed", "config", "out", "dataset", "checkpoint", "report", "sweep"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let (rest, ov) = split_overrides(
            ["stcnet", "train", "--out", "x", "--epochs=12", "--mode=fixed_window:40", "--lm_dilations=[1,2]"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        assert_eq!(rest, ["stcnet", "train", "--out", "x"]);
        let cfg = RunConfig::load(None, &ov).unwrap();
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.mode, "fixed_window:40");
        assert_eq!(cfg.lm_dilations, vec![1, 2]);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = split_overrides(vec!["--epoch=3".into()]).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn hash_ignores_eval_keys() {
        let a = RunConfig::default();
        let b = RunConfig {
            consensus: "average".into(),
            ..a.clone()
        };
        let c = RunConfig { epochs: 3, ..a.clone() };
        assert_eq!(a.model_hash().unwrap(), b.model_hash().unwrap());
        assert_ne!(a.model_hash().unwrap(), c.model_hash().unwrap());
    }
}
