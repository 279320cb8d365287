//! Run configuration loaded from JSON.
//!
//! Unknown keys are rejected. Defaults: momentum 0.937, weight decay 0.0005,
//! learning rate 0.01, distillation weight β = 400, gate temperature τ = 1,
//! `b_min` = 2, 8 clustering restarts. The seed has no default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitsearch::{measure_distances, threshold_for_budget, BitPlan, LayerBits, SearchSettings, DEFAULT_RESTARTS};
use crate::cost::cost_report;
use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::quant::BitWidth;
use crate::scm::{DEFAULT_BETA, DEFAULT_D_EMBED, DEFAULT_TAU};
use crate::tensor::Tensor;
use crate::train::data::DatasetParams;
use crate::train::TrainConfig;

use super::read_input;

pub const SCHEMA_ID: &str = "ghost-config/v1";

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.937
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_b_min() -> u8 {
    2
}
fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}
fn default_d_embed() -> usize {
    DEFAULT_D_EMBED
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    16
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_image_size() -> usize {
    32
}
fn default_max_objects() -> usize {
    3
}
fn default_grid() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

/// Limits a searched plan must meet; the smallest threshold meeting them is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitBudget {
    /// Upper bound on the mean width of quantized layers.
    pub max_avg_bits: f64,
    /// Upper bound on non-exempt BOPs relative to 32-bit.
    #[serde(default)]
    pub max_bops_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSetting {
    Value(f64),
    Budget(BitBudget),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: StageConfig,
    pub student: StageConfig,
    pub threshold: ThresholdSetting,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_b_min")]
    pub b_min: u8,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_d_embed")]
    pub d_embed: usize,
    #[serde(default = "default_true")]
    pub exempt_first_layer: bool,
    /// Validate every this many epochs (`0`: only after the last epoch).
    #[serde(default)]
    pub eval_every: usize,
    /// Network description; defaults to the built-in detector for `dataset.classes`.
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("teacher", &self.teacher), ("student", &self.student)] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return config_err(format!("{name}.lr must be positive, got {}", s.lr));
            }
            if s.batch_size == 0 {
                return config_err(format!("{name}.batch_size must be at least 1"));
            }
        }
        if self.teacher.epochs == 0 {
            return config_err("teacher.epochs must be at least 1");
        }
        match &self.threshold {
            ThresholdSetting::Value(t) if !(t.is_finite() && *t > 0.0) => {
                return config_err(format!("threshold must be positive and finite, got {t}"));
            }
            ThresholdSetting::Budget(b) if !(b.max_avg_bits > 0.0) || b.max_bops_ratio.is_some_and(|r| !(r > 0.0)) => {
                return config_err("bit budget limits must be positive");
            }
            _ => {}
        }
        self.network_spec()?;
        self.dataset_params()
            .and_then(|p| crate::train::data::gen_synthetic_dataset(DatasetParams { n_scenes: 1, ..p }).map(|_| ()))
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        self.train_config(&self.teacher, 1.0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = self
            .network
            .clone()
            .unwrap_or_else(|| NetworkSpec::tiny_detector(self.dataset.classes));
        spec.validate().map_err(|e| Error::Config(format!("network: {e}")))?;
        if spec.num_classes != self.dataset.classes || spec.input_size != self.dataset.image_size {
            return config_err("network classes or input size differ from the dataset");
        }
        Ok(spec)
    }

    pub fn dataset_params(&self) -> Result<DatasetParams> {
        Ok(DatasetParams {
            n_scenes: self.dataset.n_scenes,
            classes: self.dataset.classes,
            seed: self.seed,
            image_size: self.dataset.image_size,
            max_objects: self.dataset.max_objects,
            grid: self.dataset.grid,
        })
    }

    pub fn search_settings(&self) -> SearchSettings {
        SearchSettings {
            b_min: self.b_min,
            restarts: self.restarts,
            seed: self.seed,
            exempt_first_layer: self.exempt_first_layer,
        }
    }

    /// Training settings of one stage with a resolved threshold.
    pub fn train_config(&self, stage: &StageConfig, threshold: f64) -> TrainConfig {
        TrainConfig {
            epochs: stage.epochs,
            batch_size: stage.batch_size,
            lr: stage.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            threshold,
            b_min: self.b_min,
            restarts: self.restarts,
            beta: self.beta,
            tau: self.tau,
            d_embed: self.d_embed,
            exempt_first_layer: self.exempt_first_layer,
            eval_every: self.eval_every,
        }
    }

    /// Turns the threshold setting into a number and builds the matching plan
    /// from `weights`, with the full `d(n)` table of every searched layer.
    pub fn resolve_plan(&self, spec: &NetworkSpec, weights: &[Tensor]) -> Result<(BitPlan, DistanceTables)> {
        let settings = self.search_settings();
        let tables = measure_distances(spec, weights, settings)?;
        let threshold = match &self.threshold {
            ThresholdSetting::Value(t) => *t,
            ThresholdSetting::Budget(b) => threshold_for_budget(&tables, |bits| {
                within_budget(spec, bits, b).unwrap_or(false)
            })
            .ok_or_else(|| Error::Config(format!("no threshold meets the bit budget {b:?}")))?,
        };
        let plan = plan_from_tables(spec, &tables, threshold, settings);
        Ok((plan, DistanceTables::new(spec, &tables)))
    }
}

/// Every layer's measured `d(n)`, keyed by layer name; exempt layers are omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceTables(pub BTreeMap<String, BTreeMap<u8, f64>>);

impl DistanceTables {
    fn new(spec: &NetworkSpec, tables: &[Option<BTreeMap<u8, f64>>]) -> Self {
        Self(
            spec.layers
                .iter()
                .zip(tables)
                .filter_map(|(l, t)| t.clone().map(|t| (l.name.clone(), t)))
                .collect(),
        )
    }
}

fn plan_with_bits(spec: &NetworkSpec, bits: &[BitWidth]) -> BitPlan {
    BitPlan {
        threshold: 0.0,
        b_min: 1,
        layers: spec
            .layers
            .iter()
            .zip(bits)
            .map(|(l, &b)| LayerBits {
                name: l.name.clone(),
                bits: b,
                exempt: b.is_full(),
                fallback: false,
                distances: BTreeMap::new(),
            })
            .collect(),
    }
}

fn within_budget(spec: &NetworkSpec, bits: &[BitWidth], budget: &BitBudget) -> Result<bool> {
    let plan = plan_with_bits(spec, bits);
    if plan.average_quantized_bits() > budget.max_avg_bits {
        return Ok(false);
    }
    match budget.max_bops_ratio {
        None => Ok(true),
        Some(r) => Ok(cost_report(spec, &plan)?.compression_vs_fp32.bops_ratio_non_exempt <= r),
    }
}

/// Same selection as `build_bit_plan`, read off precomputed tables: the
/// first `n` with `d(n) < T`, else 8. Distances are recorded up to the chosen `n`.
fn plan_from_tables(
    spec: &NetworkSpec,
    tables: &[Option<BTreeMap<u8, f64>>],
    threshold: f64,
    settings: SearchSettings,
) -> BitPlan {
    let bits = crate::bitsearch::bits_from_tables(tables, threshold);
    let layers = spec
        .layers
        .iter()
        .zip(tables)
        .zip(bits)
        .map(|((l, t), b)| {
            let distances: BTreeMap<u8, f64> = match (t, b) {
                (Some(t), BitWidth::Bits(n)) => t.range(..=n).map(|(&k, &v)| (k, v)).collect(),
                _ => BTreeMap::new(),
            };
            LayerBits {
                name: l.name.clone(),
                bits: b,
                exempt: t.is_none(),
                fallback: t.as_ref().is_some_and(|t| t.values().all(|&d| d >= threshold)),
                distances,
            }
        })
        .collect();
    BitPlan {
        threshold,
        b_min: settings.b_min,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitsearch::build_bit_plan;
    use crate::train::ModelParams;

    const MINIMAL: &str = r#"{
        "seed": 5,
        "dataset": {"n_scenes": 20, "classes": 3},
        "teacher": {"epochs": 2},
        "student": {"epochs": 1},
        "threshold": 0.001
    }"#;

    #[test]
    fn defaults_are_applied() {
        let c = Config::from_json(MINIMAL).unwrap();
        assert_eq!(c.beta, 400.0);
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.b_min, 2);
        assert_eq!(c.restarts, 8);
        assert_eq!(c.momentum, 0.937);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.teacher.lr, 0.01);
        assert!(c.exempt_first_layer);
    }

    #[test]
    fn unknown_keys_and_missing_seed_rejected() {
        let typo = MINIMAL.replace("\"threshold\"", "\"treshold\"");
        assert!(matches!(Config::from_json(&typo), Err(Error::Config(_))));
        let nested = MINIMAL.replace("{\"epochs\": 2}", "{\"epochs\": 2, \"lr_\": 1}");
        assert!(matches!(Config::from_json(&nested), Err(Error::Config(_))));
        let no_seed = MINIMAL.replace("\"seed\": 5,", "");
        assert!(matches!(Config::from_json(&no_seed), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            MINIMAL.replace("{\"epochs\": 2}", "{\"epochs\": 0}"),
            MINIMAL.replace("{\"epochs\": 1}", "{\"epochs\": 1, \"lr\": 0}"),
            MINIMAL.replace("0.001", "-1"),
            MINIMAL.replace("\"classes\": 3", "\"classes\": 1"),
        ] {
            assert!(matches!(Config::from_json(&bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn budget_form_parses() {
        let c = Config::from_json(&MINIMAL.replace("0.001", r#"{"max_avg_bits": 6, "max_bops_ratio": 0.0625}"#)).unwrap();
        assert_eq!(
            c.threshold,
            ThresholdSetting::Budget(BitBudget {
                max_avg_bits: 6.0,
                max_bops_ratio: Some(0.0625)
            })
        );
    }

    #[test]
    fn table_plan_matches_direct_search() {
        let mut c = Config::from_json(MINIMAL).unwrap();
        c.restarts = 2;
        let spec = c.network_spec().unwrap();
        let p = ModelParams::init(&spec, 1).unwrap();
        let (plan, tables) = c.resolve_plan(&spec, &p.weights).unwrap();
        let direct = build_bit_plan(&spec, &p.weights, 0.001, c.search_settings()).unwrap();
        assert_eq!(plan, direct);
        assert_eq!(tables.0.len(), 5);
    }

    #[test]
    fn budget_plan_meets_limits() {
        let mut c = Config::from_json(&MINIMAL.replace("0.001", r#"{"max_avg_bits": 4}"#)).unwrap();
        c.restarts = 2;
        let spec = c.network_spec().unwrap();
        let p = ModelParams::init(&spec, 1).unwrap();
        let (plan, _) = c.resolve_plan(&spec, &p.weights).unwrap();
        assert!(plan.average_quantized_bits() <= 4.0);
        let direct = build_bit_plan(&spec, &p.weights, plan.threshold, c.search_settings()).unwrap();
        assert_eq!(plan.bits(), direct.bits());
    }

    #[test]
    fn shipped_schema_matches_config() {
        let schema: serde_json::Value =
            serde_json::from_str(include_str!("../../schema/config.schema.json")).unwrap();
        assert_eq!(schema["$id"], SCHEMA_ID);
        let c = Config::from_json(MINIMAL).unwrap();
        let resolved = serde_json::to_value(&c).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&schema["properties"]), keys(&resolved));
        for (key, prop) in props {
            if let Some(default) = prop.get("default") {
                assert_eq!(default.as_f64().map_or(default.clone(), |d| d.into()), {
                    let v = &resolved[key];
                    v.as_f64().map_or(v.clone(), |d| d.into())
                }, "default of {key}");
            }
        }
        let stage = &schema["$defs"]["stage"]["properties"];
        assert_eq!(stage["lr"]["default"].as_f64(), Some(c.student.lr));
        assert_eq!(stage["batch_size"]["default"].as_u64(), Some(c.student.batch_size as u64));
    }
}
