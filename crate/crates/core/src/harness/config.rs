use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::SynthSpec;
use crate::attack::{AlphaSchedule, AttackConfig, AttackMode, StepRule};
use crate::error::{Error, Result};
use crate::hashmodel::PretrainConfig;
use crate::saat::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
/// Environment variables `SAAT_<KEY>` override config key `<key>`.
pub const ENV_PREFIX: &str = "SAAT_";

/// A complete experiment as flat `key = value` TOML.
///
/// `version` and `seed` must be present in a config file; every other key
/// falls back to its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Binary dataset or CSV file; empty selects the synthetic benchmark.
    pub dataset_path: String,
    pub synth_classes: usize,
    pub synth_samples_per_class: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub synth_weak_separation: f64,
    pub synth_noise: f64,
    pub synth_multi_label_rate: f64,
    pub split_query: f64,
    pub split_database: f64,
    pub model_hidden: Vec<usize>,
    pub model_bits: usize,
    pub model_standardize: bool,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_momentum: f64,
    pub pretrain_quantization_weight: f64,
    pub attack_epsilon: f64,
    pub attack_step_size: f64,
    pub attack_iterations: usize,
    /// `"scheduled"` or a constant in `(0, 1]`.
    pub attack_alpha: String,
    /// `"nontargeted"` or `"targeted"`.
    pub attack_mode: String,
    pub defend_epochs: usize,
    pub defend_batch_size: usize,
    pub defend_learning_rate: f64,
    pub defend_momentum: f64,
    pub defend_epsilon: f64,
    pub defend_step_size: f64,
    pub defend_iterations: usize,
    pub defend_lambda: f64,
    pub defend_mu: f64,
    /// Retrieval cutoff; 0 means `min(database size, 5000)`.
    pub eval_top_k: usize,
    pub eval_n_grid: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let pre = PretrainConfig::default();
        let atk = AttackConfig::default();
        let tr = TrainConfig::default();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset_path: String::new(),
            synth_classes: synth.num_classes,
            synth_samples_per_class: synth.samples_per_class,
            synth_dim: synth.dim,
            synth_separation: synth.separation,
            synth_weak_separation: synth.weak_separation,
            synth_noise: synth.noise,
            synth_multi_label_rate: synth.multi_label_rate,
            split_query: synth.query_fraction,
            split_database: synth.database_fraction,
            model_hidden: vec![64],
            model_bits: 16,
            model_standardize: true,
            pretrain_epochs: pre.epochs,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.learning_rate,
            pretrain_momentum: pre.momentum,
            pretrain_quantization_weight: pre.quantization_weight,
            attack_epsilon: atk.epsilon,
            attack_step_size: atk.step_size,
            attack_iterations: atk.iterations,
            attack_alpha: "scheduled".into(),
            attack_mode: "nontargeted".into(),
            defend_epochs: tr.epochs,
            defend_batch_size: tr.batch_size,
            defend_learning_rate: tr.learning_rate,
            defend_momentum: tr.momentum,
            defend_epsilon: tr.epsilon,
            defend_step_size: tr.step_size,
            defend_iterations: tr.iterations,
            defend_lambda: tr.lambda,
            defend_mu: tr.mu,
            eval_top_k: 0,
            eval_n_grid: crate::evalkit::DEFAULT_N_GRID.to_vec(),
        }
    }
}

fn invalid(m: impl Into<String>) -> Error {
    Error::InvalidConfig(m.into())
}

pub fn parse_mode(s: &str) -> Result<AttackMode> {
    match s.trim().to_ascii_lowercase().as_str() {
        "nontargeted" | "non-targeted" => Ok(AttackMode::NonTargeted),
        "targeted" => Ok(AttackMode::Targeted),
        other => Err(invalid(format!("attack mode must be nontargeted or targeted, got `{other}`"))),
    }
}

pub fn parse_alpha(s: &str) -> Result<AlphaSchedule> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("scheduled") {
        return Ok(AlphaSchedule::Scheduled);
    }
    s.parse::<f64>()
        .map(AlphaSchedule::Fixed)
        .map_err(|_| invalid(format!("alpha must be `scheduled` or a number, got `{s}`")))
}

impl ExperimentConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Parses a config file, applying `SAAT_*` overrides from `env` before
    /// deserializing. Unknown keys in the file are rejected; unknown
    /// environment keys are ignored.
    pub fn parse(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        apply_env(&mut table, env)?;
        match table.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => return Err(invalid(format!("unsupported config version {v}"))),
            None => return Err(invalid("config must set `version`")),
        }
        if !table.contains_key("seed") {
            return Err(invalid("config must set `seed`"));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, std::env::vars())
    }

    /// Applies `SAAT_*` overrides to an existing config.
    pub fn with_env(self, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = self.to_table();
        apply_env(&mut table, env)?;
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub(crate) fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!("unsupported config version {}", self.version)));
        }
        if self.dataset_path.is_empty() {
            self.synth_spec().validate()?;
        } else if !(self.split_query > 0.0 && self.split_database > 0.0 && self.split_query + self.split_database < 1.0) {
            return Err(invalid("split fractions must be positive and leave room for train"));
        }
        if self.model_bits == 0 {
            return Err(invalid("model_bits must be >= 1"));
        }
        if self.model_hidden.contains(&0) {
            return Err(invalid("hidden layer sizes must be >= 1"));
        }
        if self.pretrain_batch_size < 2 {
            return Err(invalid("pretrain_batch_size must be >= 2"));
        }
        if !(self.pretrain_learning_rate > 0.0 && self.pretrain_learning_rate.is_finite()) {
            return Err(invalid("pretrain_learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.pretrain_momentum) || !(0.0..1.0).contains(&self.defend_momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        self.attack_config()?.validate()?;
        self.train_config().validate()?;
        if self.eval_n_grid.is_empty() || self.eval_n_grid.contains(&0) {
            return Err(invalid("eval_n_grid needs at least one positive entry"));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.synth_classes,
            samples_per_class: self.synth_samples_per_class,
            dim: self.synth_dim,
            separation: self.synth_separation,
            weak_separation: self.synth_weak_separation,
            noise: self.synth_noise,
            multi_label_rate: self.synth_multi_label_rate,
            query_fraction: self.split_query,
            database_fraction: self.split_database,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            momentum: self.pretrain_momentum,
            quantization_weight: self.pretrain_quantization_weight,
            seed: self.seed,
        }
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        Ok(AttackConfig {
            epsilon: self.attack_epsilon,
            step_size: self.attack_step_size,
            iterations: self.attack_iterations,
            alpha: parse_alpha(&self.attack_alpha)?,
            mode: parse_mode(&self.attack_mode)?,
            step_rule: StepRule::Sign,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.defend_epochs,
            batch_size: self.defend_batch_size,
            learning_rate: self.defend_learning_rate,
            momentum: self.defend_momentum,
            epsilon: self.defend_epsilon,
            step_size: self.defend_step_size,
            iterations: self.defend_iterations,
            lambda: self.defend_lambda,
            mu: self.defend_mu,
            seed: self.seed,
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let defaults = ExperimentConfig::default().to_table();
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|key| (key.to_ascii_lowercase(), v)))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let Some(template) = defaults.get(&key) else {
            log::debug!("ignoring unknown override {ENV_PREFIX}{}", key.to_ascii_uppercase());
            continue;
        };
        let value = if template.is_str() {
            toml::Value::String(raw)
        } else {
            let wrapped: toml::Table = format!("v = {raw}")
                .parse()
                .map_err(|e: toml::de::Error| invalid(format!("{ENV_PREFIX}{}: {e}", key.to_ascii_uppercase())))?;
            wrapped["v"].clone()
        };
        table.insert(key, value);
    }
    Ok(())
}
