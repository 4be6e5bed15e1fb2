//! Experiment configuration and its flat config-file format.
//!
//! The file is line-oriented: `[section]` headers, `key = value` pairs, `#`
//! comments. Sections are `[dataset]`, `[train]`, `[watermark]`, `[attacks]`,
//! `[output]`. Every key is typed and known; unknown sections or keys are
//! hard errors so misspellings cannot silently fall back to defaults.

use crate::attack::{AttackConfig, QuantScheme};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::sfl::TrainConfig;
use std::path::PathBuf;

/// Training stage: which side embeds its watermark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    /// No watermarks anywhere.
    Clean,
    /// Both sides embed (the full scheme).
    Dual,
    /// Clients poison, server does not regularize.
    ClientOnly,
    /// Server regularizes, clients stay clean.
    ServerOnly,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Stage::Clean),
            "dual" => Ok(Stage::Dual),
            "c_only" => Ok(Stage::ClientOnly),
            "s_only" => Ok(Stage::ServerOnly),
            other => Err(Error::Config(format!(
                "unknown stage {other} (expected clean, dual, c_only, s_only)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Dual => "dual",
            Stage::ClientOnly => "c_only",
            Stage::ServerOnly => "s_only",
        }
    }

    pub fn client_wm(&self) -> bool {
        matches!(self, Stage::Dual | Stage::ClientOnly)
    }

    pub fn server_wm(&self) -> bool {
        matches!(self, Stage::Dual | Stage::ServerOnly)
    }
}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Train-set recipe; its `seed` field is re-derived per experiment seed.
    pub dataset: DatasetSpec,
    pub test_samples_per_class: usize,

    pub clients: usize,
    pub rounds: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub rho: f64,
    pub dp_sigma: f64,
    pub dp_clip: f64,
    /// Block after which the reference net is cut.
    pub split_after: usize,
    pub stages: Vec<Stage>,
    pub seeds: Vec<u64>,
    pub wm_per_round_only: bool,
    pub parallel: bool,

    /// Signature length N.
    pub wm_bits: usize,
    /// Ownership decision threshold on theta_B.
    pub tau: f64,
    /// Fraction of eligible test samples stamped during verification.
    pub verify_rho: f64,
    /// Trigger patch side length.
    pub trigger_patch: usize,

    pub attacks_enabled: bool,
    pub attack: AttackConfig,
    pub prune_rates: Vec<f64>,
    pub quant_schemes: Vec<QuantScheme>,
    /// Attacker's clean data budget as a fraction of the training set.
    pub attacker_fraction: f64,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: the full dual-watermark pipeline completes in
    /// minutes on one CPU core.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec {
                num_classes: 4,
                samples_per_class: 200,
                channels: 1,
                height: 16,
                width: 16,
                class_separation: 1.0,
                noise: 0.08,
                seed: 0,
            },
            test_samples_per_class: 50,
            clients: 4,
            rounds: 60,
            batch_size: 25,
            lr: 0.05,
            alpha: 0.1,
            rho: 0.1,
            dp_sigma: 0.0,
            dp_clip: 5.0,
            split_after: 2,
            stages: vec![Stage::Clean, Stage::Dual, Stage::ClientOnly, Stage::ServerOnly],
            seeds: vec![1, 2, 3, 4, 5],
            wm_per_round_only: false,
            parallel: false,
            wm_bits: 128,
            tau: 0.8,
            verify_rho: 1.0,
            trigger_patch: 3,
            attacks_enabled: false,
            attack: AttackConfig::default(),
            prune_rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            quant_schemes: vec![QuantScheme::Fp16, QuantScheme::IntK(32), QuantScheme::IntK(8)],
            attacker_fraction: 0.2,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("need at least one stage".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.verify_rho) {
            return Err(Error::Config("tau and verify_rho must lie in [0,1]".into()));
        }
        if self.prune_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("prune rates must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.attacker_fraction) {
            return Err(Error::Config("attacker_fraction must lie in [0,1]".into()));
        }
        self.attack.validate()?;
        // Cheap structural checks; the train config re-validates per stage.
        self.train_config(Stage::Dual, self.seeds[0]).validate()
    }

    /// Train configuration for one stage under one seed.
    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            clients: self.clients,
            rounds: self.rounds,
            batch_size: self.batch_size,
            lr: self.lr,
            alpha: self.alpha,
            feature_wm: stage.server_wm(),
            rho: if stage.client_wm() { self.rho } else { 0.0 },
            dp_sigma: self.dp_sigma,
            dp_clip: self.dp_clip,
            seed,
            wm_per_round_only: self.wm_per_round_only,
            parallel: self.parallel,
            passive_clients: vec![],
        }
    }

    /// Parses the flat config format, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header {line}")))?;
                if !["dataset", "train", "watermark", "attacks", "output"].contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(&section, key, value)
                .map_err(|e| at(format!("{e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn int<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected an integer, got {v}")))
        }
        fn float(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected a number, got {v}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("expected true or false, got {v}"))),
            }
        }
        fn list<T, F: Fn(&str) -> Result<T>>(v: &str, f: F) -> Result<Vec<T>> {
            v.split(',').map(|s| f(s.trim())).collect()
        }

        match (section, key) {
            ("dataset", "num_classes") => self.dataset.num_classes = int(value)?,
            ("dataset", "samples_per_class") => self.dataset.samples_per_class = int(value)?,
            ("dataset", "test_samples_per_class") => self.test_samples_per_class = int(value)?,
            ("dataset", "channels") => self.dataset.channels = int(value)?,
            ("dataset", "height") => self.dataset.height = int(value)?,
            ("dataset", "width") => self.dataset.width = int(value)?,
            ("dataset", "class_separation") => self.dataset.class_separation = float(value)?,
            ("dataset", "noise") => self.dataset.noise = float(value)?,

            ("train", "clients") => self.clients = int(value)?,
            ("train", "rounds") => self.rounds = int(value)?,
            ("train", "batch_size") => self.batch_size = int(value)?,
            ("train", "lr") => self.lr = float(value)?,
            ("train", "alpha") => self.alpha = float(value)?,
            ("train", "rho") => self.rho = float(value)?,
            ("train", "dp_sigma") => self.dp_sigma = float(value)?,
            ("train", "dp_clip") => self.dp_clip = float(value)?,
            ("train", "split_after") => self.split_after = int(value)?,
            ("train", "stages") => self.stages = list(value, Stage::parse)?,
            ("train", "seeds") => self.seeds = list(value, int::<u64>)?,
            ("train", "wm_per_round_only") => self.wm_per_round_only = boolean(value)?,
            ("train", "parallel") => self.parallel = boolean(value)?,

            ("watermark", "bits") => self.wm_bits = int(value)?,
            ("watermark", "tau") => self.tau = float(value)?,
            ("watermark", "verify_rho") => self.verify_rho = float(value)?,
            ("watermark", "trigger_patch") => self.trigger_patch = int(value)?,

            ("attacks", "enabled") => self.attacks_enabled = boolean(value)?,
            ("attacks", "finetune_epochs") => self.attack.finetune_epochs = int(value)?,
            ("attacks", "finetune_lr") => self.attack.finetune_lr = float(value)?,
            ("attacks", "prune_rates") => self.prune_rates = list(value, float)?,
            ("attacks", "quant_schemes") => {
                self.quant_schemes = list(value, QuantScheme::parse)?
            }
            ("attacks", "nc_iterations") => self.attack.nc_iterations = int(value)?,
            ("attacks", "nc_lambda") => self.attack.nc_lambda = float(value)?,
            ("attacks", "nc_step") => self.attack.nc_step = float(value)?,
            ("attacks", "nc_anomaly_threshold") => {
                self.attack.nc_anomaly_threshold = float(value)?
            }
            ("attacks", "unlearn_epochs") => self.attack.unlearn_epochs = int(value)?,
            ("attacks", "unlearn_lr") => self.attack.unlearn_lr = float(value)?,
            ("attacks", "attacker_fraction") => self.attacker_fraction = float(value)?,

            ("output", "dir") => self.output_dir = PathBuf::from(value),

            ("", k) => {
                return Err(Error::Config(format!(
                    "key {k} appears before any [section] header"
                )))
            }
            (s, k) => return Err(Error::Config(format!("unknown key {k} in section [{s}]"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = "\
# comment
[dataset]
num_classes = 4
samples_per_class = 100   # inline comment

[train]
clients = 2
rounds = 10
seeds = 7, 8
stages = clean, dual

[watermark]
bits = 64
tau = 0.75

[attacks]
enabled = true
prune_rates = 0.2, 0.4
quant_schemes = fp16, int8

[output]
dir = /tmp/runs
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset.samples_per_class, 100);
        assert_eq!(cfg.clients, 2);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.stages, vec![Stage::Clean, Stage::Dual]);
        assert_eq!(cfg.wm_bits, 64);
        assert_eq!(cfg.tau, 0.75);
        assert!(cfg.attacks_enabled);
        assert_eq!(cfg.prune_rates, vec![0.2, 0.4]);
        assert_eq!(cfg.quant_schemes, vec![QuantScheme::Fp16, QuantScheme::IntK(8)]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/runs"));
        // Untouched keys keep the desk-scale defaults.
        assert_eq!(cfg.batch_size, 25);
        assert_eq!(cfg.wm_per_round_only, false);
    }

    #[test]
    fn unknown_keys_and_sections_are_hard_errors() {
        assert!(matches!(
            ExperimentConfig::parse("[train]\nlearning_rate = 0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[general]\nx = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("x = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("[train]\nclients\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::parse("[train]\nclients = many\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }
}
