//! Subcommand implementations. Each writes its artifacts plus the resolved
//! `config.json` into its own output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use eisam_core::analysis::{
    empirical_item_sharpness, hutchinson_trace, landscape_slice, scope_examples, bound_rhs, BoundInputs,
    Objective, Scope, TraceReport,
};
use eisam_core::data::{
    build_sequences, generate_zipf_dataset, load_interactions, write_frequency_dump, write_interactions,
    write_sequences, SequenceDataset,
};
use eisam_core::eval::{evaluate, run_experiment, ExperimentData, MetricReport};
use eisam_core::model::{finite_diff_grad, loss_cap, Batch, LossModel, ModelParams};
use eisam_core::optimizers::{train, Optimizer};
use eisam_core::rng::stream_rng;
use eisam_core::weighting::{weight_profile_csv, ItemWeights};
use eisam_core::Error;

use crate::config::RunConfig;

/// Output directory of one command invocation.
pub struct Out {
    pub dir: PathBuf,
}

impl Out {
    pub fn create(cfg: &RunConfig, command: &str, tag: &str) -> Result<Self> {
        let dir = cfg.output_dir.join(command).join(tag);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let out = Out { dir };
        out.json("config.json", cfg)?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let body = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
        self.text(name, &body)
    }
}

/// Loads or generates the dataset described by `cfg.data`.
pub fn dataset(cfg: &RunConfig) -> Result<SequenceDataset> {
    Ok(match cfg.data.source.as_str() {
        "zipf" => generate_zipf_dataset(&cfg.zipf())?.1,
        _ => {
            let path = cfg.data.path.as_deref().expect("validated");
            let log = load_interactions(path)?;
            build_sequences(&log, cfg.data.max_len, cfg.data.min_count)?.0
        }
    })
}

fn experiment_data(cfg: &RunConfig) -> Result<ExperimentData> {
    Ok(ExperimentData::from_dataset(&dataset(cfg)?)?)
}

fn item_weights(cfg: &RunConfig, data: &ExperimentData) -> Result<ItemWeights> {
    Ok(ItemWeights::new(cfg.scheme()?, cfg.normalize()?, &data.table)?)
}

fn load_checkpoint(path: &Path, data: &ExperimentData) -> Result<ModelParams> {
    let params = ModelParams::load(path)?;
    if params.n_items != data.n_items() {
        bail!(Error::InvalidConfig(format!(
            "checkpoint has {} items, data has {}",
            params.n_items,
            data.n_items()
        )));
    }
    Ok(params)
}

/// Every `ceil(len/max)`-th example when the batch exceeds `max` (0 = no cap).
fn thin(batch: Batch, max: usize) -> Batch {
    if max == 0 || batch.len() <= max {
        return batch;
    }
    let stride = batch.len().div_ceil(max);
    let idx: Vec<usize> = (0..batch.len()).step_by(stride).collect();
    batch.select(&idx)
}

pub fn gen_data(cfg: &RunConfig, out: &Out) -> Result<()> {
    if cfg.data.source != "zipf" {
        bail!(Error::InvalidConfig("gen-data needs data.source = zipf".into()));
    }
    let (log, ds, table) = generate_zipf_dataset(&cfg.zipf())?;
    write_interactions(&log, &out.path("interactions.tsv"))?;
    write_sequences(&ds, &out.path("sequences.jsonl"))?;
    write_frequency_dump(&table, &out.path("frequencies.json"))?;
    println!(
        "{} interactions, {} examples, {} items ({} head) -> {}",
        log.len(),
        ds.len(),
        table.n_items(),
        table.head.len(),
        out.dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    steps: usize,
    mean_loss: f64,
    mean_weighted_loss: f64,
    wall_seconds: f64,
    clamp_count: usize,
    fallback_count: usize,
    forward_passes: u64,
    backward_evals: u64,
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    epochs: usize,
    n_train: usize,
    initial_loss: f64,
    final_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig, out: &Out) -> Result<()> {
    let data = experiment_data(cfg)?;
    let weights = item_weights(cfg, &data)?;
    let opt_cfg = cfg.optimizer_config()?;
    let init = ModelParams::init(data.n_items(), cfg.model.d_emb, cfg.init_seed());
    let model = init.model();
    let mut opt = Optimizer::new(opt_cfg.clone(), weights, init.dim())?;
    let outcome = train(&model, &init.params, &data.split.train, &mut opt, cfg.optimizer.epochs, cfg.seed)?;
    let all = Batch::from_examples(&data.split.train.examples);
    let mean_loss = |theta: &[f64]| -> Result<f64> { Ok(model.evaluate(theta, &all, &[])?.losses.mean()) };
    let summary = TrainSummary {
        variant: opt_cfg.variant.name().into(),
        epochs: cfg.optimizer.epochs,
        n_train: data.split.train.len(),
        initial_loss: mean_loss(&init.params)?,
        final_loss: mean_loss(&outcome.theta)?,
    };
    let mut log = String::new();
    for e in &outcome.epochs {
        let line = EpochLine {
            epoch: e.epoch,
            steps: e.steps,
            mean_loss: e.mean_loss,
            mean_weighted_loss: e.mean_weighted_loss,
            wall_seconds: e.wall_seconds,
            clamp_count: e.clamp_count,
            fallback_count: e.fallback_count,
            forward_passes: e.forward_passes,
            backward_evals: e.backward_evals,
        };
        writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes")).unwrap();
    }
    let params = ModelParams {
        params: outcome.theta,
        ..init
    };
    params.save(&out.path("checkpoint.json"))?;
    out.text("train_log.jsonl", &log)?;
    out.json("summary.json", &summary)?;
    println!(
        "{}: loss {:.4} -> {:.4} over {} epochs -> {}",
        summary.variant,
        summary.initial_loss,
        summary.final_loss,
        summary.epochs,
        out.dir.display()
    );
    Ok(())
}

fn metrics_csv(r: &MetricReport) -> String {
    let mut s = String::from("scope,ndcg_at_k,hr_at_k,n_examples\n");
    for scope in [Scope::Overall, Scope::Head, Scope::Tail] {
        let m = r.scope(scope);
        writeln!(s, "{},{},{},{}", scope.name(), m.ndcg_at_k, m.hr_at_k, m.n_examples).unwrap();
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig, out: &Out, checkpoint: &Path) -> Result<()> {
    let data = experiment_data(cfg)?;
    let params = load_checkpoint(checkpoint, &data)?;
    let report = evaluate(&params, &data.split.test, &data.table, cfg.eval.k, cfg.seed)?;
    out.json("metrics.json", &report)?;
    out.text("metrics.csv", &metrics_csv(&report))?;
    println!(
        "NDCG@{k} overall {:.4} head {:.4} tail {:.4}; HR@{k} overall {:.4} head {:.4} tail {:.4}",
        report.overall.ndcg_at_k,
        report.head.ndcg_at_k,
        report.tail.ndcg_at_k,
        report.overall.hr_at_k,
        report.head.hr_at_k,
        report.tail.hr_at_k,
        k = report.k
    );
    Ok(())
}

pub fn cmd_landscape(cfg: &RunConfig, out: &Out, checkpoint: &Path) -> Result<()> {
    let data = experiment_data(cfg)?;
    let params = load_checkpoint(checkpoint, &data)?;
    let scope = cfg.scope()?;
    let model = params.model();
    let batch = scope_examples(&data.split.train, data.table.head_mask(), scope)?;
    let obj = Objective::mean(&model, thin(batch, cfg.analysis.max_examples));
    let grid = landscape_slice(
        &obj,
        &params.params,
        scope,
        cfg.analysis.half_width,
        cfg.analysis.resolution,
        cfg.seed,
    )?;
    out.text("landscape.csv", &grid.to_csv())?;
    let c = cfg.analysis.resolution / 2;
    println!(
        "{} landscape {}x{}: centre loss {:.4} -> {}",
        scope.name(),
        grid.alphas.len(),
        grid.betas.len(),
        grid.values[c][c],
        out.dir.display()
    );
    Ok(())
}

pub fn cmd_trace(cfg: &RunConfig, out: &Out, checkpoint: &Path) -> Result<()> {
    let data = experiment_data(cfg)?;
    let params = load_checkpoint(checkpoint, &data)?;
    let weights = item_weights(cfg, &data)?;
    let scope = cfg.scope()?;
    let model = params.model();
    let batch = scope_examples(&data.split.train, data.table.head_mask(), scope)?;
    let obj = Objective::weighted(&model, thin(batch, cfg.analysis.max_examples), &weights);
    let t = hutchinson_trace(&obj, &params.params, cfg.analysis.probes, cfg.seed)?;
    let report = TraceReport {
        estimate: t.estimate,
        std_error: t.std_error,
        n_probes: t.n_probes,
        scope,
    };
    out.json("trace.json", &report)?;
    let is = empirical_item_sharpness(&obj, &params.params, cfg.analysis.rho)?;
    let mut csv = String::from("item_id,group,q,sharpness\n");
    for (i, s) in &is {
        let group = if data.table.is_head(*i) { "head" } else { "tail" };
        writeln!(csv, "{i},{group},{},{s}", data.table.freqs[*i]).unwrap();
    }
    out.text("item_sharpness.csv", &csv)?;
    println!(
        "tr(H^w) on {} scope: {:.6} ± {:.6} ({} probes) -> {}",
        scope.name(),
        t.estimate,
        t.std_error,
        t.n_probes,
        out.dir.display()
    );
    Ok(())
}

pub fn cmd_bound(cfg: &RunConfig, out: &Out, checkpoint: &Path) -> Result<()> {
    let data = experiment_data(cfg)?;
    let params = load_checkpoint(checkpoint, &data)?;
    let weights = item_weights(cfg, &data)?;
    let model = params.model();
    let theta = &params.params;
    let train_all = Batch::from_examples(&data.split.train.examples);
    let l_s = model.evaluate(theta, &train_all, &[])?.losses.mean();
    let rho = cfg.optimizer.rho;
    let lambda = cfg.optimizer.lambda;
    let weighted = Objective::weighted(&model, train_all, &weights);
    let sharp = empirical_item_sharpness(&weighted, theta, rho)?;
    let l_sam: f64 = sharp.iter().map(|(i, s)| weights.f[*i] * s).sum();
    let thinned = Objective::weighted(&model, thin(weighted.batch.clone(), cfg.analysis.max_examples), &weights);
    let trace = hutchinson_trace(&thinned, theta, cfg.analysis.probes, cfg.seed)?;
    let b = loss_cap(data.n_items());
    let b_w = b * weights
        .f
        .iter()
        .zip(&weights.q)
        .filter(|(_, &q)| q > 0.0)
        .map(|(f, q)| f * q)
        .sum::<f64>();
    let inputs = BoundInputs {
        rho,
        lambda,
        delta: cfg.analysis.delta,
        d: params.dim(),
        n: data.split.train.len(),
        b,
        b_w,
        theta_norm: params.norm(),
        trace_hw: trace.estimate,
        q_min: data.table.q_min(),
        n_items: data.n_items(),
        j_s: l_s + lambda * l_sam,
    };
    let report = bound_rhs(&inputs)?;
    out.json("bound.json", &report)?;
    println!(
        "bound {:.6}: empirical {:.6}, curvature {:.6}, concentration {:.6}, complexity {:.6} -> {}",
        report.total,
        report.empirical,
        report.curvature_bonus,
        report.concentration,
        report.complexity,
        out.dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    instances: usize,
    batch_size: usize,
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    per_instance: Vec<f64>,
    passed: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-3)`, maximised over coordinates.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Returns whether the check passed.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Out) -> Result<bool> {
    use rand::seq::index::sample;
    use rand::Rng;

    let data = experiment_data(cfg)?;
    let weights = item_weights(cfg, &data)?;
    let a = &cfg.analysis;
    let train_set = &data.split.train.examples;
    let bsz = a.gradcheck_batch.min(train_set.len());
    let mut per_instance = Vec::with_capacity(a.gradcheck_instances);
    for k in 0..a.gradcheck_instances as u64 {
        let params = ModelParams::init(data.n_items(), cfg.model.d_emb, cfg.init_seed().wrapping_add(k));
        let mut rng = stream_rng(cfg.seed, k);
        let idx = sample(&mut rng, train_set.len(), bsz).into_vec();
        let batch = Batch::from_examples(idx.iter().map(|&i| &train_set[i]));
        // alternate between the plain mean and random positive weights
        let w: Vec<f64> = if k % 2 == 0 {
            vec![1.0 / bsz as f64; bsz]
        } else {
            batch
                .targets
                .iter()
                .map(|&t| weights.f[t] * rng.random_range(0.5..1.5))
                .collect()
        };
        let model = params.model();
        let analytic = model.evaluate(&params.params, &batch, &[&w])?.grads.pop().expect("one gradient");
        let numeric = finite_diff_grad(&model, &params.params, &batch, &w, a.gradcheck_step)?;
        per_instance.push(max_rel_error(&analytic, &numeric));
    }
    let max = per_instance.iter().copied().fold(0.0, f64::max);
    let report = GradcheckReport {
        instances: per_instance.len(),
        batch_size: bsz,
        step: a.gradcheck_step,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error: max,
        per_instance,
        passed: max < GRADCHECK_TOLERANCE,
    };
    out.json("gradcheck.json", &report)?;
    println!(
        "max relative error {max:.3e} over {} instances: {}",
        report.instances,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(report.passed)
}

pub fn cmd_weights(cfg: &RunConfig, out: &Out) -> Result<()> {
    let data = experiment_data(cfg)?;
    let scheme = cfg.scheme()?;
    out.text("weights.csv", &weight_profile_csv(&scheme, &data.table))?;
    let w = item_weights(cfg, &data)?;
    let mut csv = String::from("item_id,group,q,f\n");
    for i in 0..w.n_items() {
        let group = if w.is_head[i] { "head" } else { "tail" };
        writeln!(csv, "{i},{group},{},{}", w.q[i], w.f[i]).unwrap();
    }
    out.text("item_weights.csv", &csv)?;
    println!("{} items weighted with {:?} -> {}", w.n_items(), scheme, out.dir.display());
    Ok(())
}

pub fn cmd_experiment(cfg: &RunConfig, out: &Out) -> Result<()> {
    let data = experiment_data(cfg)?;
    let exp = cfg.experiment()?;
    let outcome = run_experiment(&exp, &data)?;
    out.json("report.json", &outcome.report)?;
    out.text("report.csv", &outcome.report.to_csv())?;
    out.json("timing.json", &outcome.timing)?;
    let mut means = BTreeMap::new();
    for (v, s) in &outcome.report.summary.variants {
        means.insert(v.clone(), (s.overall.ndcg_at_k.mean, s.tail.ndcg_at_k.mean));
    }
    for (v, (overall, tail)) in &means {
        let ratio = outcome.timing.ratio_to_sam.get(v).copied().unwrap_or(f64::NAN);
        println!(
            "{v:>8}: NDCG@{} overall {overall:.4} tail {tail:.4}, time/epoch {ratio:.2}x SAM",
            exp.k
        );
    }
    println!("-> {}", out.dir.display());
    Ok(())
}
