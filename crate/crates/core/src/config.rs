//! Declarative model and simulation configuration files (TOML).
//!
//! A model file names the latent-class count, the covariates entering the
//! latent weights, the conditional family with its partition or interaction
//! structure, and optional restriction rows tying the per-class parameters
//! to a common lambda:
//!
//! ```toml
//! classes = 2
//!
//! [latent]
//! covariates = ["sex"]
//!
//! [conditional]
//! family = "recursive"            # or "loglinear"
//! partition = "captured_before"   # "none" | "captured_before" | "example1" | "explicit"
//!
//! [[restriction]]
//! class = 1
//! rows = [[1, 0, 0], [1, 0, 1]]   # entries: number | "name" | "coef*name"
//!
//! [[restriction]]
//! class = 2
//! rows = [[0, 1, 0], [0, 1, 1]]
//! ```
//!
//! Without `[[restriction]]` sections each class gets its own unrestricted
//! parameter block. Explicit partitions list a class for every partial
//! history prefix: `prefix_classes = [{ prefix = "", class = 1 }, ...]`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{
    build_loglinear_design, build_recursive_design, Coef, ConditionalDesign, HistoryMatrix,
    LatentDesign, ModelSpec, PartitionMatrices, Restriction,
};
use crate::sim::{CovariateCell, SimConfig};
use crate::Scalar;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default = "default_classes")]
    classes: usize,
    latent: Option<RawLatent>,
    conditional: RawConditional,
    #[serde(default)]
    restriction: Vec<RawRestriction>,
}

fn default_classes() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLatent {
    #[serde(default)]
    covariates: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConditional {
    family: String,
    partition: Option<String>,
    prefix_classes: Option<Vec<RawPrefixClass>>,
    interactions: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrefixClass {
    prefix: String,
    class: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRestriction {
    class: usize,
    rows: Vec<Vec<toml::Value>>,
}

/// Parsed model file, not yet bound to a dataset's covariate names.
#[derive(Debug)]
pub struct ModelConfig {
    raw: RawModel,
}

impl ModelConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let raw: RawModel = toml::from_str(text).map_err(|e| Error::Config {
            message: e.to_string(),
            location: None,
        })?;
        Ok(ModelConfig { raw })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_str(&text).map_err(|e| match e {
            Error::Config { message, .. } => Error::Config {
                message,
                location: Some(path.as_ref().display().to_string()),
            },
            other => other,
        })
    }

    /// Resolve covariate names and build the model for `n_lists` lists.
    pub fn bind<T: Scalar>(&self, n_lists: usize, covariate_names: &[String]) -> Result<ModelSpec<T>> {
        let raw = &self.raw;
        let name_index: HashMap<&str, usize> = covariate_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let lookup = |name: &str| -> Result<usize> {
            name_index.get(name).copied().ok_or_else(|| {
                Error::config(format!(
                    "unknown covariate {name:?}; dataset provides {covariate_names:?}"
                ))
            })
        };

        let latent = LatentDesign {
            covariates: raw
                .latent
                .as_ref()
                .map(|l| l.covariates.iter().map(|n| lookup(n)).collect())
                .transpose()?
                .unwrap_or_default(),
        };

        let h = HistoryMatrix::build(n_lists)?;
        let conditional = match raw.conditional.family.as_str() {
            "loglinear" => {
                if raw.conditional.partition.is_some() || raw.conditional.prefix_classes.is_some()
                {
                    return Err(Error::config(
                        "partitions belong to the recursive family, not loglinear",
                    ));
                }
                let pairs: Vec<(usize, usize)> = raw
                    .conditional
                    .interactions
                    .clone()
                    .unwrap_or_default()
                    .iter()
                    .map(|&[a, b]| {
                        if a == 0 || b == 0 {
                            Err(Error::config("interaction lists are numbered from 1"))
                        } else {
                            Ok((a - 1, b - 1))
                        }
                    })
                    .collect::<Result<_>>()?;
                ConditionalDesign::LogLinear(build_loglinear_design(&h, &pairs)?)
            }
            "recursive" => {
                if raw.conditional.interactions.is_some() {
                    return Err(Error::config(
                        "interactions belong to the loglinear family, not recursive",
                    ));
                }
                let partition = match raw.conditional.partition.as_deref() {
                    Some("none") | None => PartitionMatrices::none(n_lists)?,
                    Some("captured_before") => PartitionMatrices::captured_before(n_lists)?,
                    Some("example1") => PartitionMatrices::example1(n_lists)?,
                    Some("explicit") => {
                        let table = raw.conditional.prefix_classes.as_ref().ok_or_else(|| {
                            Error::config("explicit partition needs prefix_classes entries")
                        })?;
                        build_explicit_partition(n_lists, table)?
                    }
                    Some(other) => {
                        return Err(Error::config(format!(
                            "unknown partition {other:?}; use none, captured_before, example1 \
                             or explicit"
                        )))
                    }
                };
                let design = build_recursive_design(&h, &partition)?;
                ConditionalDesign::Recursive { partition, design }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown conditional family {other:?}; use loglinear or recursive"
                )))
            }
        };

        let restriction = if raw.restriction.is_empty() {
            None
        } else {
            Some(parse_restriction(
                &raw.restriction,
                raw.classes,
                &name_index,
            )?)
        };

        ModelSpec::new(raw.classes, latent, conditional, restriction)
    }
}

fn build_explicit_partition(n_lists: usize, table: &[RawPrefixClass]) -> Result<PartitionMatrices> {
    let mut classes: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut n_parts = 0usize;
    for entry in table {
        let mut bits = Vec::with_capacity(entry.prefix.len());
        for ch in entry.prefix.chars() {
            match ch {
                '0' => bits.push(0u8),
                '1' => bits.push(1u8),
                other => {
                    return Err(Error::config(format!(
                        "prefix {:?} contains {other:?}; prefixes are 0/1 strings",
                        entry.prefix
                    )))
                }
            }
        }
        if bits.len() >= n_lists {
            return Err(Error::config(format!(
                "prefix {:?} is as long as the study; partial histories stop at {} occasions",
                entry.prefix,
                n_lists - 1
            )));
        }
        if entry.class == 0 {
            return Err(Error::config("partition classes are numbered from 1"));
        }
        n_parts = n_parts.max(entry.class);
        if classes.insert(bits, entry.class).is_some() {
            return Err(Error::config(format!(
                "prefix {:?} listed twice",
                entry.prefix
            )));
        }
    }
    // completeness check before handing the closure to the builder
    for j in 0..n_lists {
        for value in 0..(1usize << j) {
            let bits: Vec<u8> = (0..j).map(|b| ((value >> (j - 1 - b)) & 1) as u8).collect();
            if !classes.contains_key(&bits) {
                let text: String = bits.iter().map(|b| b.to_string()).collect();
                return Err(Error::config(format!(
                    "explicit partition misses prefix {text:?}"
                )));
            }
        }
    }
    PartitionMatrices::build(n_lists, n_parts, |partial| classes[partial])
}

fn parse_restriction(
    raw: &[RawRestriction],
    n_classes: usize,
    names: &HashMap<&str, usize>,
) -> Result<Restriction> {
    let mut per_class: Vec<Option<Vec<Vec<Coef>>>> = vec![None; n_classes];
    for block in raw {
        if block.class == 0 || block.class > n_classes {
            return Err(Error::config(format!(
                "restriction class {} outside 1..={n_classes}",
                block.class
            )));
        }
        let rows = block
            .rows
            .iter()
            .map(|row| row.iter().map(|cell| parse_coef(cell, names)).collect())
            .collect::<Result<Vec<Vec<Coef>>>>()?;
        if per_class[block.class - 1].replace(rows).is_some() {
            return Err(Error::config(format!(
                "restriction for class {} given twice",
                block.class
            )));
        }
    }
    let rows = per_class
        .into_iter()
        .enumerate()
        .map(|(c, rows)| {
            rows.ok_or_else(|| {
                Error::config(format!(
                    "restriction missing for class {}; give one block per class",
                    c + 1
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Restriction { rows })
}

fn parse_coef(cell: &toml::Value, names: &HashMap<&str, usize>) -> Result<Coef> {
    match cell {
        toml::Value::Integer(v) => Ok(Coef::constant(*v as f64)),
        toml::Value::Float(v) => Ok(Coef::constant(*v)),
        toml::Value::String(text) => {
            let text = text.trim();
            if let Ok(v) = text.parse::<f64>() {
                return Ok(Coef::constant(v));
            }
            let (value, name) = match text.split_once('*') {
                Some((coef, name)) => {
                    let value = coef.trim().parse::<f64>().map_err(|_| {
                        Error::config(format!("cannot parse coefficient in {text:?}"))
                    })?;
                    (value, name.trim())
                }
                None => (1.0, text),
            };
            let ix = names.get(name).copied().ok_or_else(|| {
                Error::config(format!("unknown covariate {name:?} in restriction"))
            })?;
            Ok(Coef {
                value,
                covariate: Some(ix),
            })
        }
        other => Err(Error::config(format!(
            "restriction entries are numbers or \"coef*name\" strings, got {other}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// simulation configs
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    n_true: u64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    covariate_names: Vec<String>,
    model: RawSimModel,
    params: RawSimParams,
    pool: Vec<RawPoolCell>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimModel {
    path: String,
    lists: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimParams {
    #[serde(default)]
    zeta: Vec<f64>,
    lambda: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoolCell {
    covariates: Vec<f64>,
    weight: f64,
}

/// A fully specified simulation: model, truth, covariate pool and names.
pub struct BoundSimConfig<T> {
    pub spec: ModelSpec<T>,
    pub config: SimConfig<T>,
    pub covariate_names: Vec<String>,
    pub n_lists: usize,
}

/// Parse a simulation file, loading the model inline or from `model.path`
/// (relative to the simulation file).
pub fn load_sim_config<T: Scalar>(path: impl AsRef<Path>) -> Result<BoundSimConfig<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let raw: RawSim = toml::from_str(&text).map_err(|e| Error::Config {
        message: e.to_string(),
        location: Some(path.display().to_string()),
    })?;
    if raw.model.lists == 0 {
        return Err(Error::config("model.lists must give the number of lists"));
    }
    let model_path = path.parent().unwrap_or(Path::new(".")).join(&raw.model.path);
    let model_config = ModelConfig::from_path(model_path)?;
    let spec: ModelSpec<T> = model_config.bind(raw.model.lists, &raw.covariate_names)?;

    if raw.params.zeta.len() != spec.dim_zeta() {
        return Err(Error::config(format!(
            "params.zeta has {} entries, model needs {}",
            raw.params.zeta.len(),
            spec.dim_zeta()
        )));
    }
    if raw.params.lambda.len() != spec.dim_lambda() {
        return Err(Error::config(format!(
            "params.lambda has {} entries, model needs {}",
            raw.params.lambda.len(),
            spec.dim_lambda()
        )));
    }
    let n_cov = raw.covariate_names.len();
    for cell in &raw.pool {
        if cell.covariates.len() != n_cov {
            return Err(Error::config(format!(
                "pool cell has {} covariates, covariate_names lists {n_cov}",
                cell.covariates.len()
            )));
        }
    }

    let config = SimConfig {
        n_true: raw.n_true,
        zeta: DVector::from_iterator(raw.params.zeta.len(), raw.params.zeta.iter().map(|&v| T::c(v))),
        lambda: DVector::from_iterator(
            raw.params.lambda.len(),
            raw.params.lambda.iter().map(|&v| T::c(v)),
        ),
        covariate_pool: raw
            .pool
            .iter()
            .map(|c| CovariateCell {
                x: c.covariates.iter().map(|&v| T::c(v)).collect(),
                weight: T::c(c.weight),
            })
            .collect(),
        seed: raw.seed,
    };
    Ok(BoundSimConfig {
        spec,
        config,
        covariate_names: raw.covariate_names,
        n_lists: raw.model.lists,
    })
}
