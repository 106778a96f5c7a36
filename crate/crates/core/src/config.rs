//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; a
//! repeated key is an error.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::hypergraph::CovarianceMode;
use crate::metrics::MinSelection;
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub k_samples: usize,
    /// Fraction of training windows held out for checkpoint selection.
    pub val_fraction: f64,
    pub window_stride: usize,
    pub min_selection: MinSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            lr_decay_epochs: 100,
            lr_decay_factor: 0.5,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            noise_std: 0.01,
            k_samples: 20,
            val_fraction: 0.0,
            window_stride: 1,
            min_selection: MinSelection::Independent,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected key = value, got `{body}`"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("`{key}` set twice"),
                });
            }
            let m = &mut c.model;
            match key {
                "learning_rate" => c.learning_rate = parse(line, key, v)?,
                "lr_decay_epochs" => c.lr_decay_epochs = parse(line, key, v)?,
                "lr_decay_factor" => c.lr_decay_factor = parse(line, key, v)?,
                "epochs" => c.epochs = parse(line, key, v)?,
                "batch_size" => c.batch_size = parse(line, key, v)?,
                "seed" => c.seed = parse(line, key, v)?,
                "noise_std" => c.noise_std = parse(line, key, v)?,
                "k_samples" => c.k_samples = parse(line, key, v)?,
                "val_fraction" => c.val_fraction = parse(line, key, v)?,
                "window_stride" => c.window_stride = parse(line, key, v)?,
                "min_selection" => {
                    c.min_selection = match v {
                        "independent" => MinSelection::Independent,
                        "joint" => MinSelection::Joint,
                        _ => return Err(bad(line, key, "expected independent or joint")),
                    }
                }
                "obs_len" => m.horizon.obs = parse(line, key, v)?,
                "pred_len" => m.horizon.pred = parse(line, key, v)?,
                "d_model" => m.d_model = parse(line, key, v)?,
                "d_emb" => m.d_emb = parse(line, key, v)?,
                "heads" => m.heads = parse(line, key, v)?,
                "ffn_hidden" => m.ffn_hidden = parse(line, key, v)?,
                "layers" => m.layers = parse(line, key, v)?,
                "scales" => {
                    m.scales = v
                        .split(',')
                        .map(|s| parse(line, key, s.trim()))
                        .collect::<Result<_, _>>()?
                }
                "covariance" => {
                    m.covariance = match v {
                        "sample" => CovarianceMode::Sample,
                        "identity" => CovarianceMode::Identity,
                        _ => return Err(bad(line, key, "expected sample or identity")),
                    }
                }
                "gcn_radius" => m.gcn_radius = parse(line, key, v)?,
                "temporal_bias" => m.temporal_bias = parse(line, key, v)?,
                "fusion_include_self" => m.fusion_include_self = parse(line, key, v)?,
                "d_z" => m.d_z = parse(line, key, v)?,
                "cvae_hidden" => m.cvae_hidden = parse(line, key, v)?,
                "sigma_prior" => m.sigma_prior = parse(line, key, v)?,
                "kappa1" => m.kappa[0] = parse(line, key, v)?,
                "kappa2" => m.kappa[1] = parse(line, key, v)?,
                "kappa3" => m.kappa[2] = parse(line, key, v)?,
                "kappa4" => m.kappa[3] = parse(line, key, v)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let err = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.lr_decay_factor > 0.0) {
            return err("learning_rate and lr_decay_factor must be positive");
        }
        if self.lr_decay_epochs == 0 || self.batch_size == 0 || self.k_samples == 0 || self.window_stride == 0 {
            return err("lr_decay_epochs, batch_size, k_samples and window_stride must be positive");
        }
        if !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return err("noise_std must be >= 0 and val_fraction in [0, 1)");
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("learning_rate", self.learning_rate.to_string());
        kv("lr_decay_epochs", self.lr_decay_epochs.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("noise_std", self.noise_std.to_string());
        kv("k_samples", self.k_samples.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("window_stride", self.window_stride.to_string());
        kv(
            "min_selection",
            match self.min_selection {
                MinSelection::Independent => "independent",
                MinSelection::Joint => "joint",
            }
            .into(),
        );
        kv("obs_len", m.horizon.obs.to_string());
        kv("pred_len", m.horizon.pred.to_string());
        kv("d_model", m.d_model.to_string());
        kv("d_emb", m.d_emb.to_string());
        kv("heads", m.heads.to_string());
        kv("ffn_hidden", m.ffn_hidden.to_string());
        kv("layers", m.layers.to_string());
        kv("scales", fmt_list(&m.scales));
        kv(
            "covariance",
            match m.covariance {
                CovarianceMode::Sample => "sample",
                CovarianceMode::Identity => "identity",
            }
            .into(),
        );
        kv("gcn_radius", m.gcn_radius.to_string());
        kv("temporal_bias", m.temporal_bias.to_string());
        kv("fusion_include_self", m.fusion_include_self.to_string());
        kv("d_z", m.d_z.to_string());
        kv("cvae_hidden", m.cvae_hidden.to_string());
        kv("sigma_prior", m.sigma_prior.to_string());
        for (i, k) in m.kappa.iter().enumerate() {
            kv(&format!("kappa{}", i + 1), k.to_string());
        }
        s
    }
}

fn bad(line: usize, key: &str, msg: &str) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let c = TrainConfig::parse_str("# demo\nepochs = 5\nscales = 2, 3\nkappa2=0.2\ncovariance=identity\n").unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.model.scales, vec![2, 3]);
        assert_eq!(c.model.kappa[1], 0.2);
        assert_eq!(c.model.covariance, CovarianceMode::Identity);
        assert_eq!(TrainConfig::parse_str(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse_str("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            TrainConfig::parse_str("epochz = 3"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(TrainConfig::parse_str("epochs 3"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(TrainConfig::parse_str("epochs = x"), Err(ConfigError::BadValue { .. })));
        assert!(TrainConfig::parse_str("epochs = 1\nepochs = 2").is_err());
        assert!(TrainConfig::parse_str("heads = 7").is_err());
        assert!(TrainConfig::parse_str("learning_rate = -1").is_err());
    }
}
