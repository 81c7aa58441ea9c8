//! Experiment configuration: one TOML file, dotted-path overrides, and the
//! resolved snapshot every run directory is keyed by.

use std::path::{Path, PathBuf};

use headpurify_core::dig::GateConfig;
use headpurify_core::domainsynth::DomainSpec;
use headpurify_core::encoder::EncoderConfig;
use headpurify_core::halora::LoraConfig;
use headpurify_core::headlab::{BernoulliConfig, DropPlan, DropStrategy};
use headpurify_core::trainer::{ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which adaptation modules are attached to the frozen encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modules {
    pub halora: bool,
    pub dig: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Self {
            halora: true,
            dig: true,
        }
    }
}

impl Modules {
    pub fn label(self) -> &'static str {
        match (self.halora, self.dig) {
            (false, false) => "none",
            (true, false) => "halora",
            (false, true) => "dig",
            (true, true) => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeaddropConfig {
    /// Held-out domain of the base run whose heads get dropped.
    pub target: usize,
    pub strategies: Vec<DropStrategy>,
    pub drop_counts: Vec<usize>,
    /// Random orderings averaged per curve.
    pub repeats: usize,
    pub bernoulli: BernoulliConfig,
}

impl Default for HeaddropConfig {
    fn default() -> Self {
        let plan = DropPlan::default();
        Self {
            target: 0,
            strategies: DropStrategy::ALL.to_vec(),
            drop_counts: plan.drop_counts,
            repeats: plan.repeats,
            bernoulli: BernoulliConfig::default(),
        }
    }
}

impl HeaddropConfig {
    pub fn plan(&self, strategy: DropStrategy) -> DropPlan {
        DropPlan {
            strategy,
            drop_counts: self.drop_counts.clone(),
            repeats: self.repeats,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Held-out domain for `train` and `dump gates`.
    pub target: usize,
    /// Held-out domains for grid commands; empty means every domain.
    pub targets: Vec<usize>,
    pub output_dir: PathBuf,
    /// `train` also writes a checkpoint after every this many epochs.
    pub checkpoint_every: usize,
    pub modules: Modules,
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub gates: GateConfig,
    pub train: TrainConfig,
    pub data: DomainSpec,
    pub headdrop: HeaddropConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            target: 0,
            targets: Vec::new(),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            modules: Modules::default(),
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            gates: GateConfig::default(),
            train: TrainConfig::default(),
            data: DomainSpec::default(),
            headdrop: HeaddropConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn field(path: &str) -> impl FnOnce(headpurify_core::Error) -> Error + '_ {
    move |e| Error::Config(format!("{path}: {e}"))
}

/// Set `a.b.c = value` inside `table`, creating intermediate tables.
/// `value` is read as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{assignment}` is not of the form dotted.path=value"
        ))
    })?;
    let path = path.trim();
    let raw = raw.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!(
            "override `{assignment}` has an empty path segment"
        )));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for (i, k) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!(
                "override `{path}`: `{}` is not a table",
                keys[..=i].join(".")
            ))
        })?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse a TOML document with overrides applied, then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // Round-trip through text so errors carry key paths and spans.
        let doc = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = toml::from_str(&doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(Error::io(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        self.encoder.validate().map_err(field("encoder"))?;
        let e = &self.encoder;
        self.lora
            .validate(e.num_layers, e.num_heads, e.head_dim)
            .map_err(field("lora"))?;
        self.gates.validate().map_err(field("gates"))?;
        self.train.validate().map_err(field("train"))?;
        self.data.validate().map_err(field("data"))?;
        if self.data.dim != e.model_dim() {
            return Err(Error::Config(format!(
                "data.dim: {} does not match the encoder width {} (num_heads × head_dim)",
                self.data.dim,
                e.model_dim()
            )));
        }
        if self.data.content_tokens != e.content_tokens() {
            return Err(Error::Config(format!(
                "data.content_tokens: {} does not match encoder.num_tokens − 1 = {}",
                self.data.content_tokens,
                e.content_tokens()
            )));
        }
        let domains = self.data.num_domains;
        if self.target >= domains {
            return Err(Error::Config(format!(
                "target: {} is not below data.num_domains = {domains}",
                self.target
            )));
        }
        if let Some(t) = self.targets.iter().find(|&&t| t >= domains) {
            return Err(Error::Config(format!(
                "targets: {t} is not below data.num_domains = {domains}"
            )));
        }
        if self.headdrop.target >= domains {
            return Err(Error::Config(format!(
                "headdrop.target: {} is out of range",
                self.headdrop.target
            )));
        }
        if self.headdrop.strategies.is_empty() {
            return Err(Error::Config("headdrop.strategies: list is empty".into()));
        }
        self.headdrop
            .plan(DropStrategy::Random)
            .validate(e.total_heads())
            .map_err(field("headdrop"))?;
        if let Some(a) = self
            .sweep
            .alpha
            .iter()
            .find(|a| !(**a >= 0.0 && a.is_finite()))
        {
            return Err(Error::Config(format!(
                "sweep.alpha: {a} is not a nonnegative real"
            )));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            lora: self.modules.halora.then(|| self.lora.clone()),
            gates: self.modules.dig.then(|| self.gates.clone()),
        }
    }

    pub fn lodo_targets(&self) -> Vec<usize> {
        if self.targets.is_empty() {
            (0..self.data.num_domains).collect()
        } else {
            self.targets.clone()
        }
    }

    /// This config narrowed to one seed, which also drives training and the
    /// Bernoulli head scorer.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c.headdrop.bernoulli.seed = seed;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// First 16 hex digits of SHA-256 over `kind` and the resolved snapshot.
pub fn run_id(kind: &str, snapshot: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(b"\n");
    h.update(snapshot.as_bytes());
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = [
            "train.alpha=0.3",
            "train.strategy=alternative",
            "seeds=[4, 5]",
            "modules.dig=false",
        ];
        let c = ExperimentConfig::from_toml("", &sets.map(String::from)).unwrap();
        assert_eq!(c.train.alpha, 0.3);
        assert_eq!(c.train.strategy.as_str(), "alternative");
        assert_eq!(c.seeds, vec![4, 5]);
        assert!(!c.modules.dig);
    }

    #[test]
    fn unknown_fields_name_the_key() {
        let err = ExperimentConfig::from_toml("[train]\nalpah = 0.1\n", &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("alpah"), "{err}");
        let err = ExperimentConfig::from_toml("", &["train.alpha=\"high\"".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("alpha"), "{err}");
    }

    #[test]
    fn cross_field_checks() {
        let err = ExperimentConfig::from_toml("", &["data.dim=16".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("data.dim"), "{err}");
        let err = ExperimentConfig::from_toml("", &["targets=[7]".into()])
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("invalid config: targets"), "{err}");
        assert!(ExperimentConfig::from_toml("", &["train.alpha".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["seeds=[]".into()]).is_err());
    }

    #[test]
    fn run_id_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.lr_gate *= 2.0;
        assert_eq!(run_id("lodo", &a.to_toml()), run_id("lodo", &a.to_toml()));
        assert_ne!(run_id("lodo", &a.to_toml()), run_id("lodo", &b.to_toml()));
        assert_ne!(run_id("lodo", &a.to_toml()), run_id("train", &a.to_toml()));
        assert_eq!(run_id("x", "y").len(), 16);
    }
}
