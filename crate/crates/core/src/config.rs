//! Run configuration: a TOML file of `[section]` tables with `key = value`
//! lines. Missing keys take defaults (environment defaults depend on
//! `env.kind`); the resolved form lists every key in a fixed order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::algos::PpoConfig;
use crate::envs::{EnvKind, EnvSpec};
use crate::policy::PolicyConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("invalid value for `{key}`: {msg}")]
    Range { key: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vldac,
    Rl4vlm,
    Loop,
    TdBaseline,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vldac => "vldac",
            Algorithm::Rl4vlm => "rl4vlm",
            Algorithm::Loop => "loop",
            Algorithm::TdBaseline => "td_baseline",
        }
    }

    /// Whether the algorithm trains a value head.
    pub fn has_critic(self) -> bool {
        !matches!(self, Algorithm::Loop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub total_env_steps: usize,
    pub rollout_size: usize,
    pub num_workers: usize,
    /// Evaluate every `eval_interval * rollout_size` environment steps.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// In updates; 0 disables periodic checkpoints (the final one is kept).
    pub checkpoint_interval: usize,
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub grad_accum: usize,
    /// Update rounds during which only the value head is stepped.
    pub warmup_updates: usize,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub value_hidden: usize,
    pub max_tokens: usize,
    /// Value head reads backbone features through a gradient block.
    pub stop_grad: bool,
}

impl ModelConfig {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            head_hidden: self.head_hidden,
            value_hidden: self.value_hidden,
            max_tokens: self.max_tokens,
        }
    }
}

/// Supervised warm-start on well-formed emissions before RL begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub thought_min: usize,
    pub thought_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub on_policy: bool,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub env: EnvSpec,
    pub ppo: PpoConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub format: FormatConfig,
    pub replay: ReplayConfig,
}

impl TrainConfig {
    pub fn defaults(kind: EnvKind) -> Self {
        let p = PolicyConfig::default();
        TrainConfig {
            run: RunConfig {
                name: "run".into(),
                algorithm: Algorithm::Vldac,
                seeds: vec![0],
                total_env_steps: 51_200,
                rollout_size: 256,
                num_workers: 4,
                eval_interval: 10,
                eval_episodes: 50,
                checkpoint_interval: 20,
                parallel: true,
            },
            env: EnvSpec::defaults(kind),
            ppo: PpoConfig::default(),
            optim: OptimConfig {
                lr_init: 5e-5,
                lr_final: 1e-7,
                schedule: Schedule::Cosine,
                epochs: 2,
                minibatch_size: 1,
                grad_accum: 128,
                warmup_updates: 2,
                max_grad_norm: 1.0,
            },
            model: ModelConfig {
                feature_dim: p.feature_dim,
                embed_dim: p.embed_dim,
                head_hidden: p.head_hidden,
                value_hidden: p.value_hidden,
                max_tokens: p.max_tokens,
                stop_grad: true,
            },
            format: FormatConfig {
                steps: 300,
                lr: 3e-3,
                batch: 16,
                thought_min: 1,
                thought_max: 4,
            },
            replay: ReplayConfig {
                capacity: 10_000,
                on_policy: true,
                tau: 0.05,
            },
        }
    }

    /// Parses TOML text; `overrides` are dotted `section.key` assignments
    /// applied on top of the file.
    pub fn parse_with(text: &str, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut user: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut user, k, v.clone())?;
        }
        let kind = match user.get("env").and_then(|e| e.get("kind")) {
            None => EnvKind::HallwayNav,
            Some(v) => {
                let s = v.as_str().unwrap_or_default();
                EnvKind::parse(s).ok_or_else(|| ConfigError::Range {
                    key: "env.kind".into(),
                    msg: format!("unknown environment `{s}`"),
                })?
            }
        };
        let base = Table::try_from(Self::defaults(kind)).expect("defaults serialize");
        check_keys(&base, &user, "")?;
        let mut merged = base;
        merge(&mut merged, user);
        let cfg: TrainConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Canonical text with every key materialized.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a(self.render().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &str, msg: &str| {
            Err(ConfigError::Range {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        let r = &self.run;
        if r.seeds.is_empty() {
            return range("run.seeds", "at least one seed is required");
        }
        for (k, v) in [
            ("run.total_env_steps", r.total_env_steps),
            ("run.rollout_size", r.rollout_size),
            ("run.num_workers", r.num_workers),
            ("run.eval_interval", r.eval_interval),
            ("run.eval_episodes", r.eval_episodes),
            ("optim.epochs", self.optim.epochs),
            ("optim.minibatch_size", self.optim.minibatch_size),
            ("optim.grad_accum", self.optim.grad_accum),
            ("model.feature_dim", self.model.feature_dim),
            ("model.embed_dim", self.model.embed_dim),
            ("model.head_hidden", self.model.head_hidden),
            ("model.value_hidden", self.model.value_hidden),
            ("format.batch", self.format.batch),
            ("replay.capacity", self.replay.capacity),
        ] {
            if v < 1 {
                return range(k, "must be >= 1");
            }
        }
        if r.num_workers > r.rollout_size {
            return range("run.num_workers", "must not exceed run.rollout_size");
        }
        if self.model.max_tokens < 3 {
            return range("model.max_tokens", "must be >= 3");
        }
        let o = &self.optim;
        if !(o.lr_final > 0.0 && o.lr_init >= o.lr_final && o.lr_init.is_finite()) {
            return range("optim.lr_init", "need lr_init >= lr_final > 0");
        }
        if !(o.max_grad_norm > 0.0) {
            return range("optim.max_grad_norm", "must be > 0");
        }
        let f = &self.format;
        if f.thought_min > f.thought_max || f.thought_max + 4 > self.model.max_tokens {
            return range(
                "format.thought_max",
                "need thought_min <= thought_max and thought_max + 4 <= model.max_tokens",
            );
        }
        if f.steps > 0 && !(f.lr > 0.0) {
            return range("format.lr", "must be > 0");
        }
        if !(self.replay.tau > 0.0 && self.replay.tau <= 1.0) {
            return range("replay.tau", "must lie in (0, 1]");
        }
        if let Err(e) = self.ppo.validate() {
            let msg = e.to_string();
            let key = ["clip_eps", "gamma", "gae_lambda", "thought_lambda", "loo_k", "kl_beta", "value_coef"]
                .iter()
                .find(|k| msg.contains(*k))
                .map(|k| format!("ppo.{k}"))
                .unwrap_or_else(|| "ppo".into());
            return Err(ConfigError::Range { key, msg });
        }
        if let Err(e) = self.env.validate() {
            return Err(ConfigError::Range {
                key: "env".into(),
                msg: e.to_string(),
            });
        }
        Ok(())
    }

    /// Total optimizer steps of a run with exactly `rollout_size` steps per update.
    pub fn planned_optimizer_steps(&self) -> usize {
        let updates = self.run.total_env_steps.div_ceil(self.run.rollout_size);
        let minibatches = self.run.rollout_size.div_ceil(self.optim.minibatch_size);
        updates * self.optim.epochs * minibatches.div_ceil(self.optim.grad_accum)
    }
}

/// Parses `a.b = value` style override text into a TOML value.
pub fn parse_override_value(raw: &str) -> Value {
    let doc = format!("x = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("x").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let (section, leaf) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey {
        key: key.to_string(),
        suggestion: None,
    })?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(leaf.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::Parse(format!("`{section}` is not a section"))),
    }
}

fn all_keys(base: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in base {
        let full = format!("{prefix}{k}");
        if let Value::Table(t) = v {
            all_keys(t, &format!("{full}."), out);
        } else {
            out.push(full);
        }
    }
}

fn check_keys(base: &Table, user: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let full = format!("{prefix}{k}");
        match (base.get(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => check_keys(b, u, &format!("{full}."))?,
            (Some(Value::Table(_)), _) => {
                return Err(ConfigError::Parse(format!("`{full}` must be a section")));
            }
            (Some(_), _) => {}
            (None, _) => {
                let mut keys = Vec::new();
                let root = base;
                all_keys(root, prefix, &mut keys);
                let suggestion = keys
                    .into_iter()
                    .map(|c| (strsim::levenshtein(&c, &full), c))
                    .min()
                    .map(|(_, c)| c);
                return Err(ConfigError::UnknownKey { key: full, suggestion });
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for kind in [EnvKind::HallwayNav, EnvKind::RoomsNav, EnvKind::CardPoints, EnvKind::TinyShop] {
            let c = TrainConfig::defaults(kind);
            let text = c.render();
            let back = TrainConfig::parse(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.render(), text);
        }
    }

    #[test]
    fn minimal_config_uses_kind_defaults() {
        let c = TrainConfig::parse("[env]\nkind = \"rooms_nav\"\n[run]\nalgorithm = \"loop\"\n").unwrap();
        assert_eq!(c.env.height, 7);
        assert_eq!(c.env.horizon, 40);
        assert_eq!(c.run.algorithm, Algorithm::Loop);
        assert_eq!(c.optim.grad_accum, 128);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = TrainConfig::parse("[ppo]\nclip_esp = 0.1\n").unwrap_err();
        match e {
            ConfigError::UnknownKey { key, suggestion } => {
                assert_eq!(key, "ppo.clip_esp");
                assert_eq!(suggestion.as_deref(), Some("ppo.clip_eps"));
            }
            other => panic!("unexpected {other}"),
        }
        let e = TrainConfig::parse("[optimizer]\nlr = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn range_checks() {
        let e = TrainConfig::parse("[ppo]\nclip_eps = 1.5\n").unwrap_err();
        match e {
            ConfigError::Range { key, .. } => assert_eq!(key, "ppo.clip_eps"),
            other => panic!("unexpected {other}"),
        }
        assert!(TrainConfig::parse("[optim]\nlr_init = 1e-8\n").is_err());
        assert!(TrainConfig::parse("[run]\nseeds = []\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::parse_with(
            "",
            &[
                ("ppo.thought_lambda".into(), parse_override_value("0.5")),
                ("run.algorithm".into(), parse_override_value("\"rl4vlm\"")),
            ],
        )
        .unwrap();
        assert_eq!(c.ppo.thought_lambda, 0.5);
        assert_eq!(c.run.algorithm, Algorithm::Rl4vlm);
        assert_eq!(TrainConfig::defaults(EnvKind::HallwayNav).planned_optimizer_steps(), 800);
    }
}
