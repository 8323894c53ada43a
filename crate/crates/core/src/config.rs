//! Engine configuration and its flat `key = value` file format.
//!
//! Defaults are the published long-term memory settings: duplication
//! threshold 0.95, five candidates per memory, read threshold 0.7, triplet
//! margin 0.2, and token budgets of 384 (context), 76 (user personas) and
//! 52 (bot personas). Memory capacity is unlimited unless configured.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which way round the triplet hinge is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrientation {
    /// `max(sim_neg - sim_pos + alpha, 0)`: zero once positives lead by the margin.
    #[default]
    Canonical,
    /// `max(sim_pos - sim_neg + alpha, 0)`: the formula with the opposite sign.
    AsPrinted,
}

/// Vector index behind each memory store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexBackend {
    #[default]
    Exhaustive,
    Hnsw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub dup_threshold: f64,
    pub top_k: usize,
    pub sim_threshold: f64,
    pub margin_alpha: f64,
    pub budget_context: usize,
    pub budget_user_persona: usize,
    pub budget_bot_persona: usize,
    pub capacity_limit: Option<usize>,
    pub embedding_dim: usize,
    pub loss_orientation: LossOrientation,
    pub index_backend: IndexBackend,
    /// Prefix role-token literals onto persona segments.
    pub role_tokens: bool,
    pub bot_role_token: String,
    pub user_role_token: String,
    /// Run persona extraction on the bot's own responses too.
    pub extract_bot_turns: bool,
    pub max_response_tokens: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dup_threshold: 0.95,
            top_k: 5,
            sim_threshold: 0.7,
            margin_alpha: 0.2,
            budget_context: 384,
            budget_user_persona: 76,
            budget_bot_persona: 52,
            capacity_limit: None,
            embedding_dim: 256,
            loss_orientation: LossOrientation::Canonical,
            index_backend: IndexBackend::Exhaustive,
            role_tokens: true,
            bot_role_token: "system persona:".to_string(),
            user_role_token: "user persona:".to_string(),
            extract_bot_turns: true,
            max_response_tokens: 64,
        }
    }
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [-1, 1], got {v}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold("dup_threshold", self.dup_threshold)?;
        check_threshold("sim_threshold", self.sim_threshold)?;
        if !(self.margin_alpha >= 0.0 && self.margin_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "margin_alpha must be a non-negative number, got {}",
                self.margin_alpha
            )));
        }
        check_positive("top_k", self.top_k)?;
        check_positive("budget_context", self.budget_context)?;
        check_positive("budget_user_persona", self.budget_user_persona)?;
        check_positive("budget_bot_persona", self.budget_bot_persona)?;
        check_positive("embedding_dim", self.embedding_dim)?;
        check_positive("max_response_tokens", self.max_response_tokens)?;
        if let Some(cap) = self.capacity_limit {
            check_positive("capacity_limit", cap)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_str(&text)
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn parse_bool(key: &str, v: &str) -> Result<bool> {
            match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
            }
        }
        let unquote = |v: &str| v.trim_matches('"').to_string();
        match key {
            "dup_threshold" => self.dup_threshold = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "sim_threshold" => self.sim_threshold = parse(key, value)?,
            "margin_alpha" => self.margin_alpha = parse(key, value)?,
            "budget_context" => self.budget_context = parse(key, value)?,
            "budget_user_persona" => self.budget_user_persona = parse(key, value)?,
            "budget_bot_persona" => self.budget_bot_persona = parse(key, value)?,
            "capacity_limit" => {
                self.capacity_limit = match value.to_ascii_lowercase().as_str() {
                    "" | "none" | "unlimited" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "loss_orientation" => {
                self.loss_orientation = match value {
                    "canonical" => LossOrientation::Canonical,
                    "as_printed" => LossOrientation::AsPrinted,
                    _ => return Err(Error::Config(format!("bad loss_orientation {value:?}"))),
                }
            }
            "index_backend" => {
                self.index_backend = match value {
                    "exhaustive" => IndexBackend::Exhaustive,
                    "hnsw" => IndexBackend::Hnsw,
                    _ => return Err(Error::Config(format!("bad index_backend {value:?}"))),
                }
            }
            "role_tokens" => self.role_tokens = parse_bool(key, value)?,
            "bot_role_token" => self.bot_role_token = unquote(value),
            "user_role_token" => self.user_role_token = unquote(value),
            "extract_bot_turns" => self.extract_bot_turns = parse_bool(key, value)?,
            "max_response_tokens" => self.max_response_tokens = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dup_threshold = {}", self.dup_threshold);
        let _ = writeln!(out, "top_k = {}", self.top_k);
        let _ = writeln!(out, "sim_threshold = {}", self.sim_threshold);
        let _ = writeln!(out, "margin_alpha = {}", self.margin_alpha);
        let _ = writeln!(out, "budget_context = {}", self.budget_context);
        let _ = writeln!(out, "budget_user_persona = {}", self.budget_user_persona);
        let _ = writeln!(out, "budget_bot_persona = {}", self.budget_bot_persona);
        let cap = self
            .capacity_limit
            .map_or_else(|| "none".to_string(), |c| c.to_string());
        let _ = writeln!(out, "capacity_limit = {cap}");
        let _ = writeln!(out, "embedding_dim = {}", self.embedding_dim);
        let orientation = match self.loss_orientation {
            LossOrientation::Canonical => "canonical",
            LossOrientation::AsPrinted => "as_printed",
        };
        let _ = writeln!(out, "loss_orientation = {orientation}");
        let backend = match self.index_backend {
            IndexBackend::Exhaustive => "exhaustive",
            IndexBackend::Hnsw => "hnsw",
        };
        let _ = writeln!(out, "index_backend = {backend}");
        let _ = writeln!(out, "role_tokens = {}", self.role_tokens);
        let _ = writeln!(out, "bot_role_token = \"{}\"", self.bot_role_token);
        let _ = writeln!(out, "user_role_token = \"{}\"", self.user_role_token);
        let _ = writeln!(out, "extract_bot_turns = {}", self.extract_bot_turns);
        let _ = writeln!(out, "max_response_tokens = {}", self.max_response_tokens);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.dup_threshold, 0.95);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.sim_threshold, 0.7);
        assert_eq!(cfg.margin_alpha, 0.2);
        assert_eq!(
            (cfg.budget_context, cfg.budget_user_persona, cfg.budget_bot_persona),
            (384, 76, 52)
        );
        assert_eq!(cfg.capacity_limit, None);
        cfg.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let cfg = EngineConfig {
            top_k: 7,
            capacity_limit: Some(10),
            index_backend: IndexBackend::Hnsw,
            loss_orientation: LossOrientation::AsPrinted,
            bot_role_token: "机器人:".into(),
            ..EngineConfig::default()
        };
        let parsed = EngineConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn kv_rejects_bad_input() {
        assert!(EngineConfig::from_kv_str("nope = 1").is_err());
        assert!(EngineConfig::from_kv_str("top_k 5").is_err());
        assert!(EngineConfig::from_kv_str("sim_threshold = 1.5").is_err());
        assert!(EngineConfig::from_kv_str("top_k = 0").is_err());
        assert!(EngineConfig::from_kv_str("margin_alpha = -0.1").is_err());
        let cfg = EngineConfig::from_kv_str("# comment\n\ntop_k = 3\n").unwrap();
        assert_eq!(cfg.top_k, 3);
    }
}
