//! Run configuration: built-in defaults, an optional profile, an optional JSON
//! file and `--set section.key=value` overrides, merged in that order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use eisam_core::analysis::Scope;
use eisam_core::data::{ZipfConfig, DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT};
use eisam_core::eval::{ExperimentConfig, TraceSettings};
use eisam_core::optimizers::{BaseOptimizer, Estimator, OptimizerConfig, Variant};
use eisam_core::weighting::{Normalize, WeightingScheme};
use eisam_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub weighting: WeightingSection,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `zipf` or `file`.
    pub source: String,
    /// Interaction log (`user item timestamp` per line) for `source = file`.
    pub path: Option<PathBuf>,
    pub n_items: usize,
    pub exponent: f64,
    pub n_sequences: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub affinity: f64,
    pub n_clusters: usize,
    /// Generator seed; the run seed when absent.
    pub seed: Option<u64>,
    /// Applied to file logs only; generated logs are used as is.
    pub min_count: u64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_emb: usize,
    /// Initialisation seed; the run seed when absent.
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub variant: String,
    pub rho: f64,
    pub lambda: f64,
    pub lr: f64,
    /// `adam` or `sgd`.
    pub base: String,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `unbiased` or `grouped`.
    pub estimator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingSection {
    /// `normalized`, `effective-number`, `exponential`, `identity` or `frequency`.
    pub kind: String,
    pub eps: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `none` or `mean-one`.
    pub normalize: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    /// Measure the tail-scope Hessian trace after each experiment cell.
    pub trace: bool,
    /// Run experiment cells in parallel; timings are then not comparable.
    pub concurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Radius for the item-wise sharpness table.
    pub rho: f64,
    pub probes: usize,
    pub resolution: usize,
    pub half_width: f64,
    /// `overall`, `head` or `tail`.
    pub scope: String,
    /// Cap on examples used by curvature and landscape objectives (0 = all).
    pub max_examples: usize,
    pub delta: f64,
    pub gradcheck_instances: usize,
    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            weighting: WeightingSection::default(),
            eval: EvalSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "zipf".into(),
            path: None,
            n_items: 500,
            exponent: 1.2,
            n_sequences: 20_000,
            seq_len_min: 2,
            seq_len_max: 11,
            affinity: 0.9,
            n_clusters: 100,
            seed: None,
            min_count: DEFAULT_MIN_COUNT,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_emb: 32, init_seed: None }
    }
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            variant: "EISAM".into(),
            rho: 0.05,
            lambda: 0.5,
            lr: 5e-4,
            base: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 3,
            estimator: "unbiased".into(),
        }
    }
}

impl Default for WeightingSection {
    fn default() -> Self {
        WeightingSection {
            kind: "exponential".into(),
            eps: 1e-8,
            beta: 0.999,
            gamma: 2.0,
            normalize: "mean-one".into(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 10,
            seeds: vec![0, 1, 2, 3, 4],
            variants: vec!["SAM".into(), "EISAM".into()],
            trace: false,
            concurrent: false,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            rho: 0.05,
            probes: 20,
            resolution: 21,
            half_width: 1.0,
            scope: "tail".into(),
            max_examples: 2_000,
            delta: 0.05,
            gradcheck_instances: 20,
            gradcheck_batch: 5,
            gradcheck_step: 1e-5,
        }
    }
}

/// Named overlays applied on top of the defaults.
pub fn profile(name: &str) -> anyhow::Result<Value> {
    let v = match name {
        "smoke" => serde_json::json!({
            "data": { "n_items": 50, "n_sequences": 2000, "n_clusters": 10 },
            "model": { "d_emb": 8 },
            "optimizer": { "lr": 0.01, "epochs": 2 },
            "eval": { "seeds": [0, 1] },
            "analysis": { "probes": 5, "resolution": 5, "max_examples": 500, "gradcheck_instances": 5 }
        }),
        "desk" => serde_json::json!({}),
        other => bail!(Error::InvalidConfig(format!("unknown profile {other:?}"))),
    };
    Ok(v)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `section.key=value`; the value is read as JSON when it parses and
/// as a plain string otherwise.
fn apply_set(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!(Error::InvalidConfig(format!("--set expects key=value, got {assignment:?}")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!(Error::InvalidConfig(format!("{path}: {key} is not a section")));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            break;
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub struct Overrides<'a> {
    pub profile: Option<&'a str>,
    pub file: Option<&'a Path>,
    pub sets: &'a [String],
    pub seed: Option<u64>,
    pub output_dir: Option<&'a Path>,
}

pub fn load(o: &Overrides<'_>) -> anyhow::Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = o.profile {
        merge(&mut root, profile(p)?);
    }
    if let Some(path) = o.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            bail!(Error::InvalidConfig(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut root, file);
    }
    for s in o.sets {
        apply_set(&mut root, s)?;
    }
    if let Some(seed) = o.seed {
        root["seed"] = seed.into();
    }
    if let Some(dir) = o.output_dir {
        root["output_dir"] = Value::String(dir.display().to_string());
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate().context("config validation")?;
    Ok(cfg)
}

impl RunConfig {
    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> eisam_core::Result<()> {
        match self.data.source.as_str() {
            "zipf" => {
                self.zipf().validate()?;
            }
            "file" => match &self.data.path {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::InvalidConfig(format!("data.path {} is not a file", p.display()))),
                None => return Err(Error::InvalidConfig("data.source = file needs data.path".into())),
            },
            other => return Err(Error::InvalidConfig(format!("unknown data.source {other:?}"))),
        }
        if self.model.d_emb == 0 {
            return Err(Error::InvalidConfig("model.d_emb must be >= 1".into()));
        }
        self.optimizer_config()?.validate()?;
        self.variants()?;
        self.scope()?;
        if self.eval.k == 0 {
            return Err(Error::InvalidConfig("eval.k must be >= 1".into()));
        }
        let a = &self.analysis;
        if a.probes == 0 || a.gradcheck_instances == 0 || a.gradcheck_batch == 0 {
            return Err(Error::InvalidConfig("analysis probe and gradcheck counts must be >= 1".into()));
        }
        if !(a.gradcheck_step > 0.0) || !(a.rho >= 0.0) {
            return Err(Error::InvalidConfig("analysis.gradcheck_step must be > 0 and analysis.rho >= 0".into()));
        }
        Ok(())
    }

    pub fn zipf(&self) -> ZipfConfig {
        let d = &self.data;
        ZipfConfig {
            n_items: d.n_items,
            exponent: d.exponent,
            n_sequences: d.n_sequences,
            seq_len_min: d.seq_len_min,
            seq_len_max: d.seq_len_max,
            max_len: d.max_len,
            seed: d.seed.unwrap_or(self.seed),
            affinity: d.affinity,
            n_clusters: d.n_clusters,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.seed)
    }

    pub fn scheme(&self) -> eisam_core::Result<WeightingScheme> {
        let w = &self.weighting;
        match w.kind.as_str() {
            "normalized" => WeightingScheme::normalized(w.eps),
            "effective-number" => WeightingScheme::effective_number(w.beta),
            "exponential" => WeightingScheme::exponential(w.gamma),
            "identity" => Ok(WeightingScheme::Identity),
            "frequency" => Ok(WeightingScheme::Frequency),
            other => Err(Error::InvalidConfig(format!("unknown weighting.kind {other:?}"))),
        }
    }

    pub fn normalize(&self) -> eisam_core::Result<Normalize> {
        match self.weighting.normalize.as_str() {
            "none" => Ok(Normalize::None),
            "mean-one" => Ok(Normalize::MeanOne),
            other => Err(Error::InvalidConfig(format!("unknown weighting.normalize {other:?}"))),
        }
    }

    pub fn optimizer_config(&self) -> eisam_core::Result<OptimizerConfig> {
        let o = &self.optimizer;
        let base = match o.base.as_str() {
            "sgd" => BaseOptimizer::Sgd,
            "adam" => BaseOptimizer::Adam {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.adam_eps,
            },
            other => return Err(Error::InvalidConfig(format!("unknown optimizer.base {other:?}"))),
        };
        let estimator = match o.estimator.as_str() {
            "unbiased" => Estimator::Unbiased,
            "grouped" => Estimator::Grouped,
            other => return Err(Error::InvalidConfig(format!("unknown optimizer.estimator {other:?}"))),
        };
        Ok(OptimizerConfig {
            variant: o.variant.parse()?,
            rho: o.rho,
            lambda: o.lambda,
            lr: o.lr,
            base,
            scheme: self.scheme()?,
            normalize: self.normalize()?,
            estimator,
            batch_size: o.batch_size,
        })
    }

    pub fn variants(&self) -> eisam_core::Result<Vec<Variant>> {
        self.eval.variants.iter().map(|v| v.parse()).collect()
    }

    pub fn scope(&self) -> eisam_core::Result<Scope> {
        self.analysis.scope.parse()
    }

    pub fn trace_settings(&self) -> eisam_core::Result<TraceSettings> {
        Ok(TraceSettings {
            scope: self.scope()?,
            n_probes: self.analysis.probes,
            max_examples: self.analysis.max_examples,
        })
    }

    pub fn experiment(&self) -> eisam_core::Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            variants: self.variants()?,
            seeds: self.eval.seeds.clone(),
            epochs: self.optimizer.epochs,
            d_emb: self.model.d_emb,
            k: self.eval.k,
            optimizer: self.optimizer_config()?,
            trace: if self.eval.trace { Some(self.trace_settings()?) } else { None },
            concurrent: self.eval.concurrent,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Overrides<'static> {
        Overrides {
            profile: None,
            file: None,
            sets: &[],
            seed: None,
            output_dir: None,
        }
    }

    #[test]
    fn defaults_validate() {
        let cfg = load(&none()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn set_overrides_nested_keys() {
        let sets = vec![
            "optimizer.lambda=0.25".to_string(),
            "eval.variants=[\"SAM\",\"GroupSAM\"]".to_string(),
            "weighting.kind=identity".to_string(),
        ];
        let cfg = load(&Overrides { sets: &sets, seed: Some(9), ..none() }).unwrap();
        assert_eq!(cfg.optimizer.lambda, 0.25);
        assert_eq!(cfg.variants().unwrap(), vec![Variant::Sam, Variant::GroupSAM]);
        assert_eq!(cfg.scheme().unwrap(), WeightingScheme::Identity);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.zipf().seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["optimizer.momentum=0.9", "nosuch.key=1", "eval.k=\"ten\""] {
            let sets = vec![bad.to_string()];
            assert!(load(&Overrides { sets: &sets, ..none() }).is_err(), "{bad}");
        }
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["optimizer.variant=ADAMW", "data.n_items=1", "data.source=file", "analysis.scope=middle"] {
            let sets = vec![bad.to_string()];
            let err = load(&Overrides { sets: &sets, ..none() }).unwrap_err();
            let core = err.downcast_ref::<Error>().expect("core error");
            assert!(core.is_config_error(), "{bad}: {core}");
        }
    }

    #[test]
    fn smoke_profile_shrinks_the_run() {
        let cfg = load(&Overrides { profile: Some("smoke"), ..none() }).unwrap();
        assert_eq!((cfg.data.n_items, cfg.model.d_emb, cfg.data.n_sequences), (50, 8, 2000));
        assert!(load(&Overrides { profile: Some("huge"), ..none() }).is_err());
    }
}
