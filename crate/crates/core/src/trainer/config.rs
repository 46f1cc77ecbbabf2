use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::numerics::Precision;
use crate::scoring::ScoreConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images (feature groups) per step; every location of an image is a row.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Epochs trained on `λ1·l_g + λ2·l_mi` only.
    pub warmup_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Sub-centers per class.
    pub intra_centers: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Evaluate every this many epochs when an evaluator is supplied; 0 = never.
    pub eval_every: usize,
    /// Collapse all labels to one class (single-center baseline).
    pub single_class: bool,
    /// Keep main centers and class logits at their initial values.
    pub freeze_centers: bool,
    /// Add class log-weights to the entropy logits.
    pub entropy_uses_weights: bool,
    /// Train pyramid levels on separate threads. Results are identical to
    /// the sequential mode because every level has its own RNG streams.
    pub parallel_levels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 2e-4,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![48, 57, 88],
            lr_drop_factor: 0.1,
            warmup_epochs: 5,
            lambda1: 1.0,
            lambda2: 100.0,
            intra_centers: 10,
            seed: 0,
            precision: Precision::F32,
            clip_norm: Some(100.0),
            eval_every: 10,
            single_class: false,
            freeze_centers: false,
            entropy_uses_weights: false,
            parallel_levels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs {:?} must be strictly increasing", self.lr_drop_epochs));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("lr drop epoch {e} is not below epochs {}", self.epochs));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must be in (0, 1]".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.intra_centers == 0 {
            return bad("intra_centers must be >= 1".into());
        }
        if [self.lambda1, self.lambda2].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda1 and lambda2 must be finite and >= 0".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Prior variants of the ablation table, expressed as config overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Single center for all classes.
    #[serde(rename = "SGC")]
    Sgc,
    /// One fixed center per class.
    #[serde(rename = "FMC")]
    Fmc,
    /// Learnable inter-class mixture.
    #[serde(rename = "ICG")]
    Icg,
    /// Inter-class mixture plus the mutual-information term.
    #[serde(rename = "ICG+MIM")]
    IcgMim,
    /// Everything, including sub-centers.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Sgc, Variant::Fmc, Variant::Icg, Variant::IcgMim, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgc => "SGC",
            Variant::Fmc => "FMC",
            Variant::Icg => "ICG",
            Variant::IcgMim => "ICG+MIM",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Sgc => {
                c.single_class = true;
                c.intra_centers = 1;
            }
            Variant::Fmc => {
                c.freeze_centers = true;
                c.lambda2 = 0.0;
                c.intra_centers = 1;
            }
            Variant::Icg => {
                c.intra_centers = 1;
                c.lambda2 = 0.0;
            }
            Variant::IcgMim => c.intra_centers = 1,
            Variant::Full => {}
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Complete run configuration as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub scoring: ScoreConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.flow.clamp_alpha <= 0.0 || self.flow.scale <= 0.0 {
            return Err(Error::Config("flow clamp_alpha and scale must be positive".into()));
        }
        self.scoring.validate()
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.to_toml().as_bytes())
    }
}
