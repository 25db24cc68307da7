//! Experiment configuration: one TOML file with `[federation]`, `[training]`
//! and `[fedgwc]` sections, optionally patched by `section.key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, FederationSpec, GroupSpec};
use crate::error::{Error, Result};
use crate::orchestrator::{default_k_min, FedGwcParams, RunSettings};
use crate::training::{Aggregator, Architecture, ModelSpec, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    pub size: usize,
    pub alpha: f64,
    #[serde(default = "default_domain")]
    pub domain: Domain,
}

fn default_domain() -> Domain {
    Domain::Clean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(rename = "K")]
    pub clients: usize,
    pub seed: u64,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_samples")]
    pub samples_per_client: usize,
    #[serde(default = "d_sep")]
    pub class_sep: f64,
    #[serde(default = "d_noise")]
    pub noise_scale: f64,
    #[serde(default = "d_blur")]
    pub blur_width: usize,
    #[serde(default = "d_test")]
    pub test_fraction: f64,
    #[serde(alias = "partition")]
    pub groups: Vec<GroupSection>,
}

fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    10
}
fn d_samples() -> usize {
    100
}
fn d_sep() -> f64 {
    3.0
}
fn d_noise() -> f64 {
    1.0
}
fn d_blur() -> usize {
    3
}
fn d_test() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorName {
    FedAvg,
    FairAvg,
    FedAvgM,
    FedProx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(rename = "T")]
    pub rounds: u64,
    /// Local iterations per round; derived from the batch layout when absent
    /// and checked against it when present.
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub local_iterations: Option<usize>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_agg")]
    pub aggregator: AggregatorName,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default = "d_momentum")]
    pub server_momentum: f64,
    #[serde(default = "d_model")]
    pub model: ModelName,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_eval")]
    pub eval_every: u64,
}

fn d_lr() -> f64 {
    0.01
}
fn d_wd() -> f64 {
    4e-4
}
fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    1
}
fn d_agg() -> AggregatorName {
    AggregatorName::FedAvg
}
fn d_momentum() -> f64 {
    0.9
}
fn d_model() -> ModelName {
    ModelName::Softmax
}
fn d_hidden() -> usize {
    32
}
fn d_eval() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedGwcSection {
    /// Defaults to `rho`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_nmax")]
    pub n_max: usize,
    /// Defaults to `ceil(3/rho)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_min: Option<usize>,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_true")]
    pub clustering: bool,
}

fn d_eps() -> f64 {
    1e-5
}
fn d_beta() -> f64 {
    0.5
}
fn d_nmax() -> usize {
    5
}
fn d_rho() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}

impl Default for FedGwcSection {
    fn default() -> Self {
        Self { alpha: None, epsilon: d_eps(), beta: d_beta(), n_max: d_nmax(), k_min: None, rho: d_rho(), clustering: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub fedgwc: FedGwcSection,
}

/// A parsed configuration with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: String,
    pub overrides: Vec<(String, String)>,
    text: String,
}

/// 1-based line of `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` (or its array tables), if present.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        if in_section && line.split('=').next().is_some_and(|k| k.trim() == key) {
            return Some(i + 1);
        }
    }
    None
}

/// Splits `section.key=value` into its path and raw value.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| Error::config(format!("override `{raw}` is not of the form section.key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if !k.contains('.') || k.starts_with('.') || k.ends_with('.') {
        return Err(Error::config(format!("override key `{k}` must be section.key")));
    }
    Ok((k.to_string(), v.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(p.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    Ok(())
}

impl LoadedConfig {
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(format!("config file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_text(&text, &path.display().to_string(), overrides)
    }

    pub fn from_text(text: &str, source: &str, overrides: &[(String, String)]) -> Result<Self> {
        let parse_err = |e: toml::de::Error, text: &str, note: &str| {
            let at = e.span().map(|s| format!("line {}: ", line_of(text, s.start))).unwrap_or_default();
            Error::Parse { path: source.to_string(), detail: format!("{at}{}{note}", e.message().trim()) }
        };
        let config = if overrides.is_empty() {
            toml::from_str::<ExperimentConfig>(text).map_err(|e| parse_err(e, text, ""))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e, text, ""))?;
            for (k, v) in overrides {
                apply_override(&mut table, k, v)?;
            }
            let patched = toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?;
            toml::from_str::<ExperimentConfig>(&patched).map_err(|e| Error::Parse {
                path: source.to_string(),
                detail: format!("{} (after applying overrides)", e.message().trim()),
            })?
        };
        let loaded = Self { config, source: source.to_string(), overrides: overrides.to_vec(), text: text.to_string() };
        loaded.validate()?;
        Ok(loaded)
    }

    fn anchored(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        let full = format!("{section}.{key}");
        let at = if self.overrides.iter().any(|(k, _)| *k == full) {
            "override: ".to_string()
        } else {
            key_line(&self.text, section, key).map(|l| format!("line {l}: ")).unwrap_or_default()
        };
        Error::Config(format!("{}: {at}{full}: {msg}", self.source))
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let spec = c.federation_spec();
        spec.validate().map_err(|e| {
            let key = match &e {
                Error::Config(m) if m.contains("group sizes") => "K",
                Error::Config(m) if m.contains("alpha") => "alpha",
                Error::Config(m) if m.contains("dimension") => "dim",
                Error::Config(m) if m.contains("blur") => "blur_width",
                Error::Config(m) if m.contains("test fraction") => "test_fraction",
                Error::Config(m) if m.contains("classes") => "classes",
                _ => "groups",
            };
            self.anchored("federation", key, e.to_string().trim_start_matches("invalid configuration: "))
        })?;
        let t = &c.training;
        let trainer = c.trainer_config();
        trainer.validate().map_err(|e| self.anchored("training", "lr", e.to_string().trim_start_matches("invalid configuration: ")))?;
        if t.model == ModelName::Mlp && t.hidden == 0 {
            return Err(self.anchored("training", "hidden", "hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&t.server_momentum) {
            return Err(self.anchored("training", "server_momentum", "momentum must lie in [0, 1)"));
        }
        let derived = trainer.iterations(c.train_samples());
        if let Some(s) = t.local_iterations {
            if s != derived {
                return Err(self.anchored(
                    "training",
                    "S",
                    format!("S = {s} but local_epochs × ceil(train samples / batch_size) = {derived}"),
                ));
            }
        }
        let g = &c.fedgwc;
        let params = c.fedgwc_params();
        params.validate().map_err(|e| {
            let m = e.to_string();
            let key = ["alpha", "rho", "epsilon", "n_max", "k_min"].into_iter().find(|k| m.contains(k)).unwrap_or("alpha");
            let key = if m.contains("step size") && g.alpha.is_none() {
                "rho"
            } else if m.contains("step size") {
                "alpha"
            } else {
                key
            };
            self.anchored("fedgwc", key, m.trim_start_matches("invalid configuration: "))
        })?;
        Ok(())
    }

    /// The effective configuration rendered back to TOML.
    pub fn effective_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }
}

impl ExperimentConfig {
    pub fn federation_spec(&self) -> FederationSpec {
        let f = &self.federation;
        FederationSpec {
            clients: f.clients,
            classes: f.classes,
            dim: f.dim,
            groups: f.groups.iter().map(|g| GroupSpec { size: g.size, alpha: g.alpha, domain: g.domain }).collect(),
            samples_per_client: f.samples_per_client,
            seed: f.seed,
            class_sep: f.class_sep,
            noise_scale: f.noise_scale,
            blur_width: f.blur_width,
            test_fraction: f.test_fraction,
        }
    }

    pub fn train_samples(&self) -> usize {
        let f = &self.federation;
        let test = (f.samples_per_client as f64 * f.test_fraction).round() as usize;
        f.samples_per_client.saturating_sub(test)
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.training;
        TrainerConfig {
            learning_rate: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            local_epochs: t.local_epochs,
            prox_mu: if t.aggregator == AggregatorName::FedProx { t.prox_mu } else { 0.0 },
        }
    }

    pub fn fedgwc_params(&self) -> FedGwcParams {
        let g = &self.fedgwc;
        FedGwcParams {
            alpha: g.alpha.unwrap_or(g.rho),
            epsilon: g.epsilon,
            beta: g.beta,
            n_max: g.n_max,
            k_min: g.k_min.unwrap_or_else(|| default_k_min(g.rho)),
            rho: g.rho,
            clustering: g.clustering,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        let t = &self.training;
        let aggregator = match t.aggregator {
            AggregatorName::FedAvg => Aggregator::FedAvg,
            AggregatorName::FairAvg => Aggregator::FairAvg,
            AggregatorName::FedAvgM => Aggregator::FedAvgM { momentum: t.server_momentum },
            AggregatorName::FedProx => Aggregator::FedProx,
        };
        let arch = match t.model {
            ModelName::Softmax => Architecture::Softmax,
            ModelName::Mlp => Architecture::Mlp { hidden: t.hidden },
        };
        RunSettings {
            rounds: t.rounds,
            seed: self.federation.seed,
            aggregator,
            trainer: self.trainer_config(),
            model: ModelSpec { arch, inputs: self.federation.dim, classes: self.federation.classes },
            eval_every: t.eval_every,
            fedgwc: self.fedgwc_params(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[federation]
K = 100
seed = 7

[[federation.groups]]
size = 50
alpha = 1000.0
domain = "clean"

[[federation.groups]]
size = 50
alpha = 1000.0
domain = "noisy"

[training]
T = 20
lr = 0.05

[fedgwc]
epsilon = 1e-4
"#;

    fn load(text: &str, overrides: &[(&str, &str)]) -> Result<LoadedConfig> {
        let o: Vec<_> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        LoadedConfig::from_text(text, "test.toml", &o)
    }

    #[test]
    fn defaults_and_derived_values() {
        let c = load(BASE, &[]).unwrap().config;
        let p = c.fedgwc_params();
        assert_eq!((p.alpha, p.rho, p.k_min, p.n_max, p.beta), (0.1, 0.1, 30, 5, 0.5));
        assert_eq!(p.epsilon, 1e-4);
        let s = c.run_settings();
        assert_eq!(s.trainer.batch_size, 64);
        assert_eq!(s.trainer.weight_decay, 4e-4);
        assert_eq!(s.trainer.iterations(c.train_samples()), 2);
        assert_eq!(c.federation_spec().groups[1].domain, Domain::Noisy);
    }

    #[test]
    fn group_sizes_must_sum_to_k() {
        let bad = BASE.replace("K = 100", "K = 90");
        let err = load(&bad, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn syntax_and_unknown_keys_are_line_anchored() {
        let err = load(&BASE.replace("lr = 0.05", "lr = = 0.05"), &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("line 18"), "{err}");
        let err = load(&BASE.replace("lr = 0.05", "learning = 0.05"), &[]).unwrap_err();
        assert!(err.to_string().contains("line 18"), "{err}");
    }

    #[test]
    fn explicit_s_is_checked() {
        assert!(load(&BASE.replace("T = 20", "T = 20\nS = 2"), &[]).is_ok());
        let err = load(&BASE.replace("T = 20", "T = 20\nS = 7"), &[]).unwrap_err();
        assert!(err.to_string().contains("training.S"), "{err}");
    }

    #[test]
    fn overrides_win_and_are_recorded() {
        let l = load(BASE, &[("training.T", "5"), ("fedgwc.rho", "0.2"), ("training.aggregator", "fedavgm")]).unwrap();
        assert_eq!(l.config.training.rounds, 5);
        assert_eq!(l.config.fedgwc_params().k_min, 15);
        assert_eq!(l.config.run_settings().aggregator, Aggregator::FedAvgM { momentum: 0.9 });
        assert_eq!(l.overrides.len(), 3);
        let err = load(BASE, &[("fedgwc.rho", "0")]).unwrap_err();
        assert!(err.to_string().contains("override"), "{err}");
        assert!(parse_override("noequals").is_err());
        assert_eq!(parse_override("a.b = c").unwrap(), ("a.b".into(), "c".into()));
    }

    #[test]
    fn effective_config_round_trips() {
        let l = load(BASE, &[]).unwrap();
        let again = load(&l.effective_toml(), &[]).unwrap();
        assert_eq!(again.config, l.config);
    }
}
