//! Ranking metrics with a head/tail breakdown and the multi-seed experiment
//! driver.
//!
//! The rank of the target is taken over the whole vocabulary:
//! `rank = 1 + #{j : z_j > z_t} + #{j < t : z_j = z_t}`, i.e. ties go to the
//! smaller item id.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{hutchinson_trace, scope_examples, Objective, Scope, TraceEstimate};
use crate::data::{generate_zipf_dataset, split_8_1_1, FrequencyTable, ItemId, SequenceDataset, Split, ZipfConfig};
use crate::model::{Batch, ModelParams, Recommender};
use crate::optimizers::{train, Optimizer, OptimizerConfig, Variant};
use crate::weighting::ItemWeights;
use crate::{Error, Result};

pub const DEFAULT_K: usize = 10;
const EVAL_CHUNK: usize = 256;

/// 1-based rank of `target` under `scores`.
pub fn rank(scores: &[f64], target: ItemId) -> usize {
    let zt = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &z)| z > zt || (z == zt && j < target))
        .count()
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ScopeMetrics {
    pub ndcg_at_k: f64,
    pub hr_at_k: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub k: usize,
    pub seed: u64,
    pub overall: ScopeMetrics,
    pub head: ScopeMetrics,
    pub tail: ScopeMetrics,
}

impl MetricReport {
    pub fn scope(&self, scope: Scope) -> &ScopeMetrics {
        match scope {
            Scope::Overall => &self.overall,
            Scope::Head => &self.head,
            Scope::Tail => &self.tail,
        }
    }
}

/// Ranks of every test target, in example order.
pub fn ranks(model: &Recommender, theta: &[f64], test: &SequenceDataset) -> Result<Vec<usize>> {
    let chunks: Vec<&[crate::data::Example]> = test.examples.chunks(EVAL_CHUNK).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|c| {
            let batch = Batch::from_examples(c.iter());
            let scores = model.batch_scores(theta, &batch)?;
            Ok(scores
                .outer_iter()
                .zip(&batch.targets)
                .map(|(row, &t)| rank(row.as_slice().expect("row-major scores"), t))
                .collect::<Vec<usize>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// NDCG@K and HR@K over `test`, split by the group of each target item.
pub fn evaluate(params: &ModelParams, test: &SequenceDataset, table: &FrequencyTable, k: usize, seed: u64) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    if table.n_items() != params.n_items {
        return Err(Error::DimensionMismatch {
            expected: params.n_items,
            got: table.n_items(),
        });
    }
    let r = ranks(&params.model(), &params.params, test)?;
    let mut sums = [(0.0, 0.0, 0usize); 2];
    for (e, &rk) in test.examples.iter().zip(&r) {
        let s = &mut sums[usize::from(table.is_head(e.target))];
        s.0 += ndcg_at_k(rk, k);
        s.1 += hr_at_k(rk, k);
        s.2 += 1;
    }
    let mean = |(n, h, c): (f64, f64, usize)| ScopeMetrics {
        ndcg_at_k: if c > 0 { n / c as f64 } else { 0.0 },
        hr_at_k: if c > 0 { h / c as f64 } else { 0.0 },
        n_examples: c,
    };
    let [tail, head] = sums;
    let overall = (head.0 + tail.0, head.1 + tail.1, head.2 + tail.2);
    Ok(MetricReport {
        k,
        seed,
        overall: mean(overall),
        head: mean(head),
        tail: mean(tail),
    })
}

/// Hutchinson settings for the optional post-training curvature measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSettings {
    pub scope: Scope,
    pub n_probes: usize,
    /// Cap on the number of scope examples; larger sets are thinned with a
    /// fixed stride.
    pub max_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub d_emb: usize,
    pub k: usize,
    /// Shared settings; `variant` is overridden per cell.
    pub optimizer: OptimizerConfig,
    pub trace: Option<TraceSettings>,
    /// Run cells concurrently. Per-epoch timings are then not comparable and
    /// are flagged as such.
    pub concurrent: bool,
}

/// Train/validation/test data and the training-target frequency table.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub split: Split,
    pub table: FrequencyTable,
}

impl ExperimentData {
    pub fn from_dataset(ds: &SequenceDataset) -> Result<Self> {
        let split = split_8_1_1(ds, 0)?;
        let table = FrequencyTable::from_targets(&split.train, ds.n_items())?;
        Ok(ExperimentData { split, table })
    }

    pub fn zipf(cfg: &ZipfConfig) -> Result<Self> {
        let (_, ds, _) = generate_zipf_dataset(cfg)?;
        Self::from_dataset(&ds)
    }

    pub fn n_items(&self) -> usize {
        self.table.n_items()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub metrics: MetricReport,
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
    pub fallback_steps: usize,
    pub tail_trace: Option<TraceEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopeSummary {
    pub ndcg_at_k: MeanStd,
    pub hr_at_k: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub overall: ScopeSummary,
    pub head: ScopeSummary,
    pub tail: ScopeSummary,
    pub tail_trace: Option<MeanStd>,
}

/// `(EISAM − best baseline) / best baseline` for one scope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub ndcg_at_k: Option<f64>,
    pub hr_at_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub variants: BTreeMap<String, VariantSummary>,
    /// Empty unless EISAM and at least one baseline were run.
    pub relative_improvement: BTreeMap<String, Improvement>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub k: usize,
    pub epochs: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// `variant → seed → result`.
    pub cells: BTreeMap<String, BTreeMap<String, CellResult>>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&CellResult> {
        self.cells.get(variant.name())?.get(&seed.to_string())
    }

    /// One row per `(variant, seed, scope)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,scope,ndcg_at_k,hr_at_k,n_examples\n");
        for v in &self.variants {
            for s in &self.seeds {
                let m = &self.cell(*v, *s).expect("every cell is filled").metrics;
                for scope in [Scope::Overall, Scope::Head, Scope::Tail] {
                    let x = m.scope(scope);
                    writeln!(out, "{v},{s},{},{},{},{}", scope.name(), x.ndcg_at_k, x.hr_at_k, x.n_examples).unwrap();
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    /// Mean wall seconds per epoch, per variant.
    pub seconds_per_epoch: BTreeMap<String, f64>,
    /// Per-epoch time relative to SAM, when SAM was run.
    pub ratio_to_sam: BTreeMap<String, f64>,
    pub concurrent: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub timing: TimingReport,
    pub params: BTreeMap<(Variant, u64), ModelParams>,
}

fn thin(batch: Batch, max: usize) -> Batch {
    if max == 0 || batch.len() <= max {
        return batch;
    }
    let stride = batch.len().div_ceil(max);
    let idx: Vec<usize> = (0..batch.len()).step_by(stride).collect();
    batch.select(&idx)
}

/// Scope-restricted weighted objective used for curvature measurements.
pub fn trace_objective<'a>(
    model: &'a Recommender,
    data: &ExperimentData,
    weights: &ItemWeights,
    settings: &TraceSettings,
) -> Result<Objective<'a, Recommender>> {
    let batch = scope_examples(&data.split.train, data.table.head_mask(), settings.scope)?;
    Ok(Objective::weighted(model, thin(batch, settings.max_examples), weights))
}

struct CellRun {
    result: CellResult,
    params: ModelParams,
    epoch_seconds: Vec<f64>,
}

fn run_cell(cfg: &ExperimentConfig, data: &ExperimentData, weights: &ItemWeights, variant: Variant, seed: u64) -> Result<CellRun> {
    let n_items = data.n_items();
    let init = ModelParams::init(n_items, cfg.d_emb, seed);
    let model = init.model();
    let opt_cfg = OptimizerConfig {
        variant,
        ..cfg.optimizer.clone()
    };
    let mut opt = Optimizer::new(opt_cfg, weights.clone(), init.dim())?;
    let outcome = train(&model, &init.params, &data.split.train, &mut opt, cfg.epochs, seed)?;
    let params = ModelParams {
        params: outcome.theta,
        ..init
    };
    let metrics = evaluate(&params, &data.split.test, &data.table, cfg.k, seed)?;
    let tail_trace = match &cfg.trace {
        Some(t) => {
            let obj = trace_objective(&model, data, weights, t)?;
            Some(hutchinson_trace(&obj, &params.params, t.n_probes, seed)?)
        }
        None => None,
    };
    Ok(CellRun {
        result: CellResult {
            metrics,
            train_loss: outcome.epochs.iter().map(|e| e.mean_loss).collect(),
            fallback_steps: outcome.epochs.iter().map(|e| e.fallback_count).sum(),
            tail_trace,
        },
        params,
        epoch_seconds: outcome.epochs.iter().map(|e| e.wall_seconds).collect(),
    })
}

fn scope_summary(results: &[&CellResult], scope: Scope) -> ScopeSummary {
    let n: Vec<f64> = results.iter().map(|r| r.metrics.scope(scope).ndcg_at_k).collect();
    let h: Vec<f64> = results.iter().map(|r| r.metrics.scope(scope).hr_at_k).collect();
    ScopeSummary {
        ndcg_at_k: MeanStd::of(&n),
        hr_at_k: MeanStd::of(&h),
    }
}

fn relative(ours: f64, best: f64) -> Option<f64> {
    (best > 0.0).then(|| (ours - best) / best)
}

fn summarise(cells: &BTreeMap<String, BTreeMap<String, CellResult>>, variants: &[Variant]) -> Summary {
    let mut out = BTreeMap::new();
    for v in variants {
        let rs: Vec<&CellResult> = cells[v.name()].values().collect();
        let traces: Vec<f64> = rs.iter().filter_map(|r| r.tail_trace.as_ref().map(|t| t.estimate)).collect();
        out.insert(
            v.name().to_string(),
            VariantSummary {
                overall: scope_summary(&rs, Scope::Overall),
                head: scope_summary(&rs, Scope::Head),
                tail: scope_summary(&rs, Scope::Tail),
                tail_trace: (!traces.is_empty()).then(|| MeanStd::of(&traces)),
            },
        );
    }
    let mut improvement = BTreeMap::new();
    if let Some(ours) = out.get(Variant::Eisam.name()) {
        let baselines: Vec<&VariantSummary> = out
            .iter()
            .filter(|(k, _)| k.as_str() != Variant::Eisam.name())
            .map(|(_, v)| v)
            .collect();
        if !baselines.is_empty() {
            for scope in [Scope::Overall, Scope::Head, Scope::Tail] {
                let pick = |s: &VariantSummary| match scope {
                    Scope::Overall => s.overall.clone(),
                    Scope::Head => s.head.clone(),
                    Scope::Tail => s.tail.clone(),
                };
                let best_n = baselines.iter().map(|b| pick(b).ndcg_at_k.mean).fold(f64::NEG_INFINITY, f64::max);
                let best_h = baselines.iter().map(|b| pick(b).hr_at_k.mean).fold(f64::NEG_INFINITY, f64::max);
                let mine = pick(ours);
                improvement.insert(
                    scope.name().to_string(),
                    Improvement {
                        ndcg_at_k: relative(mine.ndcg_at_k.mean, best_n),
                        hr_at_k: relative(mine.hr_at_k.mean, best_h),
                    },
                );
            }
        }
    }
    Summary {
        variants: out,
        relative_improvement: improvement,
    }
}

/// Trains every `(variant, seed)` cell from the seed's initialisation and
/// evaluates it on the shared test split. Cells run seed by seed, cycling
/// through the variants, so timing drift affects all variants alike.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentOutcome> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("experiment needs at least one variant and one seed".into()));
    }
    let mut variants = cfg.variants.clone();
    variants.dedup();
    let weights = ItemWeights::new(cfg.optimizer.scheme, cfg.optimizer.normalize, &data.table)?;
    let order: Vec<(Variant, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (v, s)))
        .collect();
    let runs: Vec<CellRun> = if cfg.concurrent {
        order
            .par_iter()
            .map(|&(v, s)| run_cell(cfg, data, &weights, v, s))
            .collect::<Result<_>>()?
    } else {
        order
            .iter()
            .map(|&(v, s)| run_cell(cfg, data, &weights, v, s))
            .collect::<Result<_>>()?
    };

    let mut cells: BTreeMap<String, BTreeMap<String, CellResult>> = BTreeMap::new();
    let mut seconds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut params = BTreeMap::new();
    for (&(v, s), run) in order.iter().zip(runs) {
        cells.entry(v.name().into()).or_default().insert(s.to_string(), run.result);
        seconds.entry(v.name().into()).or_default().extend(run.epoch_seconds);
        params.insert((v, s), run.params);
    }
    let seconds_per_epoch: BTreeMap<String, f64> = seconds
        .into_iter()
        .map(|(k, xs)| {
            let m = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            (k, m)
        })
        .collect();
    let ratio_to_sam = match seconds_per_epoch.get(Variant::Sam.name()) {
        Some(&sam) if sam > 0.0 => seconds_per_epoch.iter().map(|(k, &t)| (k.clone(), t / sam)).collect(),
        _ => BTreeMap::new(),
    };
    let summary = summarise(&cells, &variants);
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            k: cfg.k,
            epochs: cfg.epochs,
            n_items: data.n_items(),
            n_train: data.split.train.len(),
            n_test: data.split.test.len(),
            variants,
            seeds: cfg.seeds.clone(),
            cells,
            summary,
        },
        timing: TimingReport {
            seconds_per_epoch,
            ratio_to_sam,
            concurrent: cfg.concurrent,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
        for r in 1..=10 {
            assert_eq!(hr_at_k(r, 10), 1.0);
            assert!(ndcg_at_k(r, 10) <= hr_at_k(r, 10));
        }
    }

    #[test]
    fn rank_ties_go_to_smaller_id() {
        assert_eq!(rank(&[0.0; 4], 0), 1);
        assert_eq!(rank(&[0.0; 4], 3), 4);
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.5], 2), 2);
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.5], 0), 3);
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.5], 1), 1);
    }

    fn ds(pairs: &[(Vec<usize>, usize)], n_items: usize) -> SequenceDataset {
        SequenceDataset {
            examples: pairs
                .iter()
                .map(|(p, t)| Example {
                    user: 0,
                    prefix: p.clone(),
                    target: *t,
                })
                .collect(),
            max_len: 10,
            vocab: (0..n_items as u64).collect(),
        }
    }

    #[test]
    fn zero_params_target_zero_ranks_first() {
        let p = ModelParams::zeros(4, 3);
        let table = FrequencyTable::from_counts(vec![3, 1, 1, 1]).unwrap();
        let test = ds(&[(vec![1], 0), (vec![2, 3], 0)], 4);
        let r = evaluate(&p, &test, &table, 10, 0).unwrap();
        assert_eq!(r.overall.ndcg_at_k, 1.0);
        assert_eq!(r.head.n_examples, 2);
        assert_eq!(r.tail.n_examples, 0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let p = ModelParams::zeros(4, 3);
        let table = FrequencyTable::from_counts(vec![1; 4]).unwrap();
        assert!(matches!(evaluate(&p, &ds(&[], 4), &table, 10, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }
}
