use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::codec::{fit_codec, ActionCodec, CodecParams};
use crate::dynamics::{CaptionEmbedding, EnvConfig, ScenarioParams, ToyDenoiser};
use crate::error::{Error, Result};
use crate::reachability::{calibrate_beta, Calibration, TargetFnParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSet {
    Triggered,
    Untriggered,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub eta: f64,
    /// Fixed threshold; recalibrated from the environment when absent.
    pub beta: Option<f64>,
    pub calibration_samples: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            eta: 0.1,
            beta: None,
            calibration_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub action_scale: f64,
    /// Load a fitted codec instead of fitting one.
    pub path: Option<String>,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            action_scale: 0.5,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub captions: CaptionSet,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            captions: CaptionSet::Triggered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub captions: CaptionSet,
    /// Cap on the number of captions evaluated (0 means all).
    pub max_captions: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            captions: CaptionSet::Triggered,
            max_captions: 20,
            n_seeds: 5,
            base_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub points_per_axis: usize,
    pub action_levels: usize,
    /// Caption id to analyse; the first triggered caption when absent.
    pub caption: Option<String>,
    /// Extra refinement levels for the grid study (0 disables it).
    pub refine_levels: usize,
    pub warn_interpolation_error: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            points_per_axis: 41,
            action_levels: 3,
            caption: None,
            refine_levels: 0,
            warn_interpolation_error: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub scenario: ScenarioParams,
    /// Explicit environment; overrides `scenario` when present.
    pub env: Option<EnvConfig>,
    pub target: TargetSection,
    pub codec: CodecSection,
    pub agent: AgentConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0],
            scenario: ScenarioParams::default(),
            env: None,
            target: TargetSection::default(),
            codec: CodecSection::default(),
            agent: AgentConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            oracle: OracleSection::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn toml_error(origin: &str, text: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            Error::Config(format!("{origin}:{line}:{col}: {msg}"))
        }
        None => Error::Config(format!("{origin}: {msg}")),
    }
}

/// Applies `a.b.c=value` overrides. Values are parsed as TOML and fall back
/// to plain strings.
pub fn apply_overrides(doc: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override `{s}` has an empty key segment")));
        }
        let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut table = &mut *doc;
        for seg in &path[..path.len() - 1] {
            let entry = table
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{seg}` is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| toml_error(origin, text, &e))?;
        if !doc.contains_key("schema_version") {
            return Err(Error::Config(format!("{origin}: missing `schema_version`")));
        }
        apply_overrides(&mut doc, overrides)?;
        let cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?
        } else {
            // Spans would point into the merged document; report against it.
            let merged = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
            toml::from_str(&merged).map_err(|e| toml_error(&format!("{origin} (with overrides)"), &merged, &e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string(), overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.target.eta > 0.0) {
            return Err(Error::Config("target.eta must be > 0".into()));
        }
        if !(self.codec.action_scale > 0.0) {
            return Err(Error::Config("codec.action_scale must be > 0".into()));
        }
        if self.eval.n_seeds == 0 {
            return Err(Error::Config("eval.n_seeds must be >= 1".into()));
        }
        if self.oracle.points_per_axis < 2 || self.oracle.action_levels == 0 {
            return Err(Error::Config("oracle grid needs >= 2 points per axis and >= 1 action level".into()));
        }
        self.agent.validate()
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        match &self.env {
            Some(e) => {
                e.validate()?;
                Ok(e.clone())
            }
            None => self.scenario.build(),
        }
    }
}

/// Everything derived from a config before any training happens.
#[derive(Debug, Clone)]
pub struct Setup {
    pub env: ToyDenoiser,
    pub codec: CodecParams,
    pub target: TargetFnParams,
    pub calibration: Option<Calibration>,
}

impl Setup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let env = ToyDenoiser::new(cfg.env_config()?)?;
        let codec = match &cfg.codec.path {
            Some(p) => CodecParams::from_json(&std::fs::read_to_string(p)?)?,
            None => fit_codec(&env.config().captions, env.config().action_dim, cfg.codec.action_scale)?,
        };
        if codec.embed_dim() != env.config().embed_dim || codec.action_dim() != env.config().action_dim {
            return Err(Error::Checkpoint("codec dimensions do not match the environment".into()));
        }
        let (beta, calibration) = match cfg.target.beta {
            Some(b) => (b, None),
            None => {
                let cal = calibrate_beta(&env, cfg.target.calibration_samples, env.config().rng_seed)?;
                (cal.beta, Some(cal))
            }
        };
        let target = TargetFnParams {
            eta: cfg.target.eta,
            beta,
        };
        target.validate()?;
        Ok(Self {
            env,
            codec,
            target,
            calibration,
        })
    }

    pub fn captions(&self, set: CaptionSet) -> Vec<CaptionEmbedding> {
        match set {
            CaptionSet::Triggered => self.env.triggered_captions(),
            CaptionSet::Untriggered => self.env.untriggered_captions(),
            CaptionSet::All => self.env.config().captions.clone(),
        }
    }
}
