//! Run configuration: a flat JSON object holding the model fields and the
//! command options side by side.
//!
//! ```json
//! {"kind": "number_conserving", "N": 7, "m": 3, "k": 2, "t": 2, "samples": 400, "seed": 1}
//! ```
//!
//! Two variants select several models at once. `verify` accepts
//! `{"grid": [spec, ...]}`; `sweep` accepts a model object in which exactly
//! one integer field is replaced by a list, e.g. `"N": [12, 24, 48, 96]`.

use std::path::PathBuf;

use clap::ValueEnum;
use egue_core::ensembles::ModelSpec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
    Both,
}

impl Format {
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

/// A model field swept over a list of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: String,
    pub values: Vec<u64>,
    template: Map<String, Value>,
}

impl Sweep {
    /// One validated spec per value, in the given order.
    pub fn specs(&self) -> Result<Vec<ModelSpec>> {
        self.values
            .iter()
            .map(|&v| {
                let mut obj = self.template.clone();
                obj.insert(self.axis.clone(), Value::from(v));
                spec_from_map(obj)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub spec: Option<ModelSpec>,
    pub grid: Option<Vec<ModelSpec>>,
    pub sweep: Option<Sweep>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub bins: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub max_dim: Option<usize>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn spec_from_map(obj: Map<String, Value>) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_value(Value::Object(obj)).map_err(|e| invalid(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn take_uint(obj: &mut Map<String, Value>, key: &str) -> Result<Option<u64>> {
    match obj.remove(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| invalid(format!("`{key}` must be a non-negative integer, got {v}"))),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text).map_err(|e| invalid(format!("malformed JSON: {e}")))?;
        RunConfig::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<RunConfig> {
        let Value::Object(mut obj) = value else {
            return Err(invalid("configuration must be a JSON object"));
        };
        let mut cfg = RunConfig {
            samples: take_uint(&mut obj, "samples")?.map(|v| v as usize),
            seed: take_uint(&mut obj, "seed")?,
            bins: take_uint(&mut obj, "bins")?.map(|v| v as usize),
            max_dim: take_uint(&mut obj, "max_dim")?.map(|v| v as usize),
            ..RunConfig::default()
        };
        if let Some(v) = obj.remove("format") {
            cfg.format = Some(serde_json::from_value(v).map_err(|e| invalid(format!("`format`: {e}")))?);
        }
        if let Some(v) = obj.remove("out") {
            let Value::String(s) = v else {
                return Err(invalid("`out` must be a string"));
            };
            cfg.out = Some(PathBuf::from(s));
        }
        if let Some(v) = obj.remove("grid") {
            if !obj.is_empty() {
                return Err(invalid("`grid` cannot be combined with top-level model fields"));
            }
            let Value::Array(items) = v else {
                return Err(invalid("`grid` must be an array of model objects"));
            };
            let grid = items
                .into_iter()
                .enumerate()
                .map(|(i, item)| match item {
                    Value::Object(o) => spec_from_map(o).map_err(|e| invalid(format!("grid[{i}]: {e}"))),
                    _ => Err(invalid(format!("grid[{i}] must be an object"))),
                })
                .collect::<Result<Vec<_>>>()?;
            cfg.grid = Some(grid);
            return Ok(cfg);
        }
        if obj.is_empty() {
            return Ok(cfg);
        }
        let arrays: Vec<String> = obj
            .iter()
            .filter(|(k, v)| v.is_array() && k.as_str() != "v_h_ij")
            .map(|(k, _)| k.clone())
            .collect();
        match arrays.as_slice() {
            [] => cfg.spec = Some(spec_from_map(obj)?),
            [axis] => {
                let Some(Value::Array(items)) = obj.remove(axis) else { unreachable!() };
                let values = items
                    .iter()
                    .map(|v| v.as_u64().ok_or_else(|| invalid(format!("`{axis}` values must be non-negative integers"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.is_empty() {
                    return Err(invalid(format!("`{axis}` sweep list is empty")));
                }
                let sweep = Sweep {
                    axis: axis.clone(),
                    values,
                    template: obj,
                };
                sweep.specs()?;
                cfg.sweep = Some(sweep);
            }
            many => return Err(invalid(format!("only one field may be a list, found {}", many.join(", ")))),
        }
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        if let Some(spec) = &self.spec {
            if let Ok(Value::Object(o)) = serde_json::to_value(spec) {
                obj.extend(o);
            }
        }
        if let Some(sweep) = &self.sweep {
            obj.extend(sweep.template.clone());
            obj.insert(sweep.axis.clone(), Value::from(sweep.values.clone()));
        }
        if let Some(grid) = &self.grid {
            obj.insert("grid".into(), serde_json::to_value(grid).unwrap_or(Value::Null));
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                obj.insert(k.into(), v);
            }
        };
        put("samples", self.samples.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("bins", self.bins.map(Value::from));
        put("max_dim", self.max_dim.map(Value::from));
        put("format", self.format.and_then(|f| serde_json::to_value(f).ok()));
        put("out", self.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        Value::Object(obj)
    }

    /// Every model the config names, in order.
    pub fn specs(&self) -> Result<Vec<ModelSpec>> {
        if let Some(grid) = &self.grid {
            return Ok(grid.clone());
        }
        if let Some(sweep) = &self.sweep {
            return sweep.specs();
        }
        Ok(self.spec.iter().cloned().collect())
    }

    /// The single model required by `moments`, `sample` and `oracle`.
    pub fn single_spec(&self) -> Result<&ModelSpec> {
        self.spec
            .as_ref()
            .ok_or_else(|| invalid("this command needs one model (kind plus its fields)"))
    }
}
