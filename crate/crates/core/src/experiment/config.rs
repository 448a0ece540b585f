//! Experiment configuration: JSON parsing, defaults, validation, hashing.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lossnet::{table1_config, LossNetParams};
use crate::two_state::TwoStateParams;

/// Bundled models with their parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelConfig {
    TwoState(TwoStateParams),
    Lossnet(LossNetParams),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::TwoState(_) => "two_state",
            ModelConfig::Lossnet(_) => "lossnet",
        }
    }

    pub fn d_box(&self) -> f64 {
        match self {
            ModelConfig::TwoState(p) => p.d_box,
            ModelConfig::Lossnet(p) => p.d_box,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Uncontrolled,
    Lqr,
    Zero,
}

/// Starting point of the fluid path.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Policy {
    FixedPoint,
    Uniform,
    Vector(Vec<f64>),
}

/// How the control-cost weight `R` is built from `α`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlWeighting {
    /// `R = α I` on the reduced control.
    Reduced,
    /// `R = α diag(multiplicity)`, i.e. `α ‖u_full‖²`.
    Multiplicity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_trials: usize,
    pub alphas: Vec<f64>,
    pub fluid_h: f64,
    pub riccati_h: f64,
    pub sde_h: f64,
    pub quad_step: f64,
    pub seed: u64,
    pub policy: PolicyKind,
    pub x0: X0Policy,
    pub sde_paths: usize,
    pub control_weighting: ControlWeighting,
    pub csv_stride: usize,
    pub preset: Option<String>,
    /// Worker threads; never part of the hash.
    #[serde(skip)]
    pub threads: usize,
    #[serde(skip)]
    pub out: PathBuf,
}

const COMMON_KEYS: &[&str] = &[
    "model",
    "preset",
    "N",
    "T",
    "n_trials",
    "alpha",
    "D",
    "lambda",
    "tau",
    "fluid_h",
    "riccati_h",
    "sde_h",
    "quad_step",
    "seed",
    "threads",
    "out",
    "policy",
    "x0",
    "sde_paths",
    "control_weighting",
    "csv_stride",
];
const LOSSNET_KEYS: &[&str] = &["capacity", "a1", "a2", "gamma"];

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn get_f64(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| field_err(key, format!("expected a number, got {v}"))),
    }
}

fn get_u64(obj: &Map<String, Value>, key: &str) -> Result<Option<u64>> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| field_err(key, format!("expected a nonnegative integer, got {v}"))),
    }
}

fn get_usize(obj: &Map<String, Value>, key: &str) -> Result<Option<usize>> {
    Ok(get_u64(obj, key)?.map(|x| x as usize))
}

fn get_u32(obj: &Map<String, Value>, key: &str) -> Result<Option<u32>> {
    get_u64(obj, key)?
        .map(|x| u32::try_from(x).map_err(|_| field_err(key, "too large")))
        .transpose()
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_str()
            .map(Some)
            .ok_or_else(|| field_err(key, format!("expected a string, got {v}"))),
    }
}

/// A number, or an array of numbers.
fn get_f64_list(obj: &Map<String, Value>, key: &str) -> Result<Option<Vec<f64>>> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| field_err(key, format!("expected numbers, got {v}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(v) => v
            .as_f64()
            .map(|x| Some(vec![x]))
            .ok_or_else(|| field_err(key, format!("expected a number or array, got {v}"))),
    }
}

/// Per-class pair; a single number applies to both classes.
fn get_pair(obj: &Map<String, Value>, key: &str) -> Result<Option<[f64; 2]>> {
    match get_f64_list(obj, key)? {
        None => Ok(None),
        Some(v) if v.len() == 1 => Ok(Some([v[0], v[0]])),
        Some(v) if v.len() == 2 => Ok(Some([v[0], v[1]])),
        Some(v) => Err(field_err(key, format!("expected 1 or 2 values, got {}", v.len()))),
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON object.
    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;

        let preset = get_str(obj, "preset")?.map(str::to_string);
        let table1 = match preset.as_deref() {
            None => None,
            Some("table1") => Some(table1_config()),
            Some(other) => return Err(field_err("preset", format!("unknown preset {other:?}"))),
        };
        let model_name = match (get_str(obj, "model")?, &table1) {
            (Some(m), _) => m.to_string(),
            (None, Some(_)) => "lossnet".to_string(),
            (None, None) => return Err(field_err("model", "missing")),
        };

        let mut unknown: Vec<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| !COMMON_KEYS.contains(k) && !LOSSNET_KEYS.contains(k))
            .collect();
        if model_name == "two_state" {
            unknown.extend(obj.keys().map(String::as_str).filter(|k| LOSSNET_KEYS.contains(k)));
        }
        if !unknown.is_empty() {
            unknown.sort_unstable();
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }

        let d_box = get_f64(obj, "D")?;
        let model = match model_name.as_str() {
            "two_state" => {
                if table1.is_some() {
                    return Err(field_err("preset", "table1 requires model lossnet"));
                }
                let mut p = TwoStateParams::default();
                if let Some(v) = get_f64(obj, "lambda")? {
                    p.lambda = v;
                }
                if let Some(v) = get_f64(obj, "tau")? {
                    p.tau = v;
                }
                if let Some(v) = d_box {
                    p.d_box = v;
                }
                if !(p.lambda > 0.0 && p.lambda.is_finite()) {
                    return Err(field_err("lambda", "must be positive"));
                }
                if !(p.tau > 0.0 && p.tau.is_finite()) {
                    return Err(field_err("tau", "must be positive"));
                }
                ModelConfig::TwoState(p)
            }
            "lossnet" => {
                let mut p = table1.as_ref().map(|t| t.params.clone()).unwrap_or_default();
                if let Some(v) = get_u32(obj, "capacity")? {
                    p.capacity = v;
                }
                if let Some(v) = get_u32(obj, "a1")? {
                    p.a1 = v;
                }
                if let Some(v) = get_u32(obj, "a2")? {
                    p.a2 = v;
                }
                if let Some(v) = get_pair(obj, "lambda")? {
                    p.lambda = v;
                }
                if let Some(v) = get_pair(obj, "tau")? {
                    p.tau = v;
                }
                if let Some(v) = get_pair(obj, "gamma")? {
                    p.gamma = v;
                }
                if let Some(v) = d_box {
                    p.d_box = v;
                }
                p.validate()
                    .map_err(|e| field_err("lossnet parameters", e))?;
                ModelConfig::Lossnet(p)
            }
            other => return Err(field_err("model", format!("unknown model {other:?}"))),
        };
        if !(model.d_box() >= 0.0 && model.d_box().is_finite()) {
            return Err(field_err("D", "must be finite and nonnegative"));
        }

        let policy = match get_str(obj, "policy")? {
            None | Some("uncontrolled") => PolicyKind::Uncontrolled,
            Some("lqr") => PolicyKind::Lqr,
            Some("zero") => PolicyKind::Zero,
            Some(other) => return Err(field_err("policy", format!("unknown policy {other:?}"))),
        };
        let x0 = match obj.get("x0") {
            None => X0Policy::FixedPoint,
            Some(Value::String(s)) if s == "fixed_point" => X0Policy::FixedPoint,
            Some(Value::String(s)) if s == "uniform" => X0Policy::Uniform,
            Some(Value::Array(_)) => X0Policy::Vector(get_f64_list(obj, "x0")?.unwrap()),
            Some(v) => return Err(field_err("x0", format!("expected fixed_point, uniform or a vector, got {v}"))),
        };
        let control_weighting = match get_str(obj, "control_weighting")? {
            None | Some("reduced") => ControlWeighting::Reduced,
            Some("multiplicity") => ControlWeighting::Multiplicity,
            Some(other) => {
                return Err(field_err("control_weighting", format!("unknown weighting {other:?}")))
            }
        };

        let cfg = Self {
            n: get_usize(obj, "N")?.or(table1.as_ref().map(|t| t.n)).unwrap_or(10_000),
            horizon: get_f64(obj, "T")?.or(table1.as_ref().map(|t| t.horizon)).unwrap_or(10.0),
            n_trials: get_usize(obj, "n_trials")?
                .or(table1.as_ref().map(|t| t.n_trials))
                .unwrap_or(128),
            alphas: get_f64_list(obj, "alpha")?
                .or(table1.as_ref().map(|t| t.alphas.clone()))
                .unwrap_or_else(|| vec![0.01]),
            fluid_h: get_f64(obj, "fluid_h")?.unwrap_or(1e-3),
            riccati_h: get_f64(obj, "riccati_h")?.unwrap_or(1e-3),
            sde_h: get_f64(obj, "sde_h")?.unwrap_or(crate::sde::DEFAULT_SDE_STEP),
            quad_step: get_f64(obj, "quad_step")?.unwrap_or(crate::ctmc::DEFAULT_QUAD_STEP),
            seed: get_u64(obj, "seed")?.unwrap_or(1),
            policy,
            x0,
            sde_paths: get_usize(obj, "sde_paths")?.unwrap_or(10_000),
            control_weighting,
            csv_stride: get_usize(obj, "csv_stride")?.unwrap_or(100),
            preset,
            threads: get_usize(obj, "threads")?.unwrap_or_else(default_threads),
            out: PathBuf::from(get_str(obj, "out")?.unwrap_or("out")),
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(field_err("N", "must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(field_err("T", "must be positive"));
        }
        if self.n_trials < 1 {
            return Err(field_err("n_trials", "must be at least 1"));
        }
        for (name, h) in [
            ("fluid_h", self.fluid_h),
            ("riccati_h", self.riccati_h),
            ("sde_h", self.sde_h),
            ("quad_step", self.quad_step),
        ] {
            if !(h > 0.0 && h.is_finite()) {
                return Err(field_err(name, "must be positive"));
            }
        }
        if self.alphas.is_empty() {
            return Err(field_err("alpha", "needs at least one value"));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(field_err("alpha", "must be finite"));
        }
        if self.policy == PolicyKind::Lqr && self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(field_err("alpha", "must be positive when policy is lqr"));
        }
        if self.preset.as_deref() == Some("table1") && self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(field_err("alpha", "must be positive for the table1 arms"));
        }
        if self.sde_paths < 2 {
            return Err(field_err("sde_paths", "must be at least 2"));
        }
        if self.threads < 1 {
            return Err(field_err("threads", "must be at least 1"));
        }
        if self.csv_stride < 1 {
            return Err(field_err("csv_stride", "must be at least 1"));
        }
        if let X0Policy::Vector(v) = &self.x0 {
            if v.iter().any(|&x| !(x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(field_err("x0", "must be a probability vector"));
            }
        }
        Ok(())
    }

    /// The control-cost weight of the first configured `α`.
    pub fn alpha(&self) -> f64 {
        self.alphas[0]
    }

    /// Canonical JSON of every field that affects results.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    ExperimentConfig::from_value(&value)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}
