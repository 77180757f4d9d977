//! Plain-text run configuration: `[section]` headers with `key = value`
//! lines, merged with command-line overrides.
//!
//! Sections map onto the three config structs (`model`, `train`, `sim`).
//! Unknown sections or keys are rejected. Precedence, lowest to highest:
//! file values, `--seed`, explicit `--set section.key=value`.

use std::fmt::Write as _;
use std::path::Path;

use gref_core::data::SimulatorConfig;
use gref_core::model::ModelConfig;
use gref_core::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimulatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sim: SimulatorConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, optionally overlaid with a config file.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            config.merge_text(&text)?;
        }
        Ok(config)
    }

    /// Parse `[section]` / `key = value` lines over the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "train", "sim"].contains(&name) {
                    return Err(CliError::Usage(format!(
                        "config line {}: unknown section [{name}]",
                        no + 1
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {}: expected key = value, got {line:?}",
                    no + 1
                )));
            };
            let Some(section) = &section else {
                return Err(CliError::Usage(format!(
                    "config line {}: key {} appears before any [section]",
                    no + 1,
                    key.trim()
                )));
            };
            self.set(section, key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got {spec:?}"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got {spec:?}"))
        })?;
        self.set(section, key, value.trim())
            .map_err(|e| CliError::Usage(format!("--set {spec}: {e}")))
    }

    /// Route the master seed into both seeded sections.
    pub fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sim.seed = seed;
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| format!("bad value for {key}: {e}"))
        }
        match (section, key) {
            ("model", "d_model") => self.model.d_model = parse(key, value)?,
            ("model", "encoder_layers") => self.model.encoder_layers = parse(key, value)?,
            ("model", "decoder_layers") => self.model.decoder_layers = parse(key, value)?,
            ("model", "attention_heads") => self.model.attention_heads = parse(key, value)?,
            ("model", "omtp_heads") => self.model.omtp_heads = parse(key, value)?,
            ("model", "max_candidates") => self.model.max_candidates = parse(key, value)?,
            ("model", "slate_length") => self.model.slate_length = parse(key, value)?,
            ("model", "feature_dim") => self.model.feature_dim = parse(key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = parse(key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, value)?,
            ("train", "beta_dpo") => self.train.beta_dpo = parse(key, value)?,
            ("train", "lambda1") => self.train.lambda1 = parse(key, value)?,
            ("train", "lambda2") => self.train.lambda2 = parse(key, value)?,
            ("train", "order_pair_cap") => self.train.order_pair_cap = parse(key, value)?,
            ("train", "grad_clip_norm") => self.train.grad_clip_norm = parse(key, value)?,
            ("train", "epochs") => self.train.epochs = parse(key, value)?,
            ("train", "seed") => self.train.seed = parse(key, value)?,
            ("sim", "seed") => self.sim.seed = parse(key, value)?,
            ("sim", "num_sessions") => self.sim.num_sessions = parse(key, value)?,
            ("sim", "m") => self.sim.m = parse(key, value)?,
            ("sim", "n") => self.sim.n = parse(key, value)?,
            ("sim", "num_topics") => self.sim.num_topics = parse(key, value)?,
            ("sim", "topic_coherence") => self.sim.topic_coherence = parse(key, value)?,
            ("sim", "exposure_noise") => self.sim.exposure_noise = parse(key, value)?,
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }

    /// The effective configuration in the same text format; parsing the
    /// echo reproduces the config exactly.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "d_model = {}", self.model.d_model);
        let _ = writeln!(out, "encoder_layers = {}", self.model.encoder_layers);
        let _ = writeln!(out, "decoder_layers = {}", self.model.decoder_layers);
        let _ = writeln!(out, "attention_heads = {}", self.model.attention_heads);
        let _ = writeln!(out, "omtp_heads = {}", self.model.omtp_heads);
        let _ = writeln!(out, "max_candidates = {}", self.model.max_candidates);
        let _ = writeln!(out, "slate_length = {}", self.model.slate_length);
        let _ = writeln!(out, "feature_dim = {}", self.model.feature_dim);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(out, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(out, "beta_dpo = {}", self.train.beta_dpo);
        let _ = writeln!(out, "lambda1 = {}", self.train.lambda1);
        let _ = writeln!(out, "lambda2 = {}", self.train.lambda2);
        let _ = writeln!(out, "order_pair_cap = {}", self.train.order_pair_cap);
        let _ = writeln!(out, "grad_clip_norm = {}", self.train.grad_clip_norm);
        let _ = writeln!(out, "epochs = {}", self.train.epochs);
        let _ = writeln!(out, "seed = {}", self.train.seed);
        let _ = writeln!(out, "\n[sim]");
        let _ = writeln!(out, "seed = {}", self.sim.seed);
        let _ = writeln!(out, "num_sessions = {}", self.sim.num_sessions);
        let _ = writeln!(out, "m = {}", self.sim.m);
        let _ = writeln!(out, "n = {}", self.sim.n);
        let _ = writeln!(out, "num_topics = {}", self.sim.num_topics);
        let _ = writeln!(out, "topic_coherence = {}", self.sim.topic_coherence);
        let _ = writeln!(out, "exposure_noise = {}", self.sim.exposure_noise);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut config = RunConfig::default();
        config.apply_override("model.d_model=32").unwrap();
        config.apply_override("train.learning_rate=0.001").unwrap();
        config.apply_override("sim.topic_coherence=0.45").unwrap();
        let mut reparsed = RunConfig::default();
        reparsed.merge_text(&config.echo()).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut config = RunConfig::default();
        assert!(config.apply_override("model.width=3").is_err());
        assert!(config.apply_override("magic.key=3").is_err());
        assert!(config.merge_text("[model]\nbogus = 1\n").is_err());
        assert!(config.merge_text("[nope]\n").is_err());
        assert!(config.merge_text("d_model = 2\n").is_err()); // no section
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let mut config = RunConfig::default();
        config
            .merge_text("# corpus\n[sim]\nnum_sessions = 5 # short\n\n[model]\nd_model = 16\n")
            .unwrap();
        assert_eq!(config.sim.num_sessions, 5);
        assert_eq!(config.model.d_model, 16);
    }

    #[test]
    fn seed_then_set_precedence() {
        let mut config = RunConfig::default();
        config.merge_text("[train]\nseed = 1\n[sim]\nseed = 2\n").unwrap();
        config.apply_seed(9);
        assert_eq!(config.train.seed, 9);
        assert_eq!(config.sim.seed, 9);
        config.apply_override("sim.seed=4").unwrap();
        assert_eq!(config.sim.seed, 4);
        assert_eq!(config.train.seed, 9);
    }
}
