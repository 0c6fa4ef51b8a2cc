use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DEFAULT_ETA, DEFAULT_LAMBDA};
use crate::network::NetworkConfig;

/// Which parts of the model are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Encoders, fusion and segmentation decoder; the M5 slot is zero.
    Baseline,
    /// Adds the generator and the M5 encoder.
    FeG,
    /// Adds the correlation constraint.
    FeGCc,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Baseline, Ablation::FeG, Ablation::FeGCc];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::FeG => "fe_g",
            Ablation::FeGCc => "fe_g_cc",
        }
    }

    /// Parameter groups trained under this ablation.
    pub fn groups(self) -> Vec<&'static str> {
        let mut g = vec!["encoder.flair", "encoder.t1", "encoder.t1c", "encoder.t2", "fusion", "seg"];
        if self != Ablation::Baseline {
            g.extend(["feg", "encoder.m5"]);
        }
        if self == Ablation::FeGCc {
            g.push("cpem");
        }
        g
    }

    pub fn uses_generator(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn uses_correlation(self) -> bool {
        self == Ablation::FeGCc
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (baseline, fe_g, fe_g_cc)")))
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub lambda: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            lambda: DEFAULT_LAMBDA,
            eta: DEFAULT_ETA,
            learning_rate: 5e-4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 10,
            batch_size: 2,
            max_epochs: 50,
            train_fraction: 0.8,
            val_fraction: 0.2,
            seed: 0,
            ablation: Ablation::FeGCc,
        }
    }
}

impl RunConfig {
    /// Reads JSON or TOML, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            _ => {
                return Err(Error::Config(format!(
                    "{}: config must be .json or .toml",
                    path.display()
                )))
            }
        };
        cfg.resolved()
    }

    /// Weights forced by the ablation, after validation.
    pub fn resolved(mut self) -> Result<Self> {
        if !self.ablation.uses_generator() {
            self.lambda = 0.0;
        }
        if !self.ablation.uses_correlation() {
            self.eta = 0.0;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.eta >= 0.0 && self.lambda.is_finite() && self.eta.is_finite()) {
            return bad(format!("lambda {} and eta {} must be finite and >= 0", self.lambda, self.eta));
        }
        if !self.ablation.uses_generator() && self.lambda != 0.0 {
            return bad("baseline ablation requires lambda = 0".into());
        }
        if !self.ablation.uses_correlation() && self.eta != 0.0 {
            return bad(format!("{} ablation requires eta = 0", self.ablation));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0 && ((t + v) - 1.0).abs() < 1e-9) {
            return bad(format!("split fractions {t} + {v} must be positive and sum to 1"));
        }
        Ok(())
    }
}
