//! Curvature diagnostics and the generalization-bound calculator.
//!
//! Second-order quantities come from central differences of the exact
//! gradients: `Hv ≈ (∇L(θ + hv) − ∇L(θ − hv)) / 2h`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FrequencyTable, ItemId, SequenceDataset};
use crate::model::{l2_norm, Batch, LossModel};
use crate::optimizers::epsilon_hat;
use crate::rng::{stream_rng, STREAM_LANDSCAPE, STREAM_PROBE_BASE};
use crate::weighting::{weights_for_table, ItemWeights, WeightingScheme};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Overall,
    Head,
    Tail,
}

impl Scope {
    pub fn name(&self) -> &'static str {
        match self {
            Scope::Overall => "overall",
            Scope::Head => "head",
            Scope::Tail => "tail",
        }
    }

    pub fn contains(&self, is_head: bool) -> bool {
        match self {
            Scope::Overall => true,
            Scope::Head => is_head,
            Scope::Tail => !is_head,
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(Scope::Overall),
            "head" => Ok(Scope::Head),
            "tail" => Ok(Scope::Tail),
            _ => Err(Error::InvalidConfig(format!("unknown scope {s:?}"))),
        }
    }
}

/// Examples of `ds` whose target falls in `scope`.
pub fn scope_examples(ds: &SequenceDataset, is_head: &[bool], scope: Scope) -> Result<Batch> {
    let batch = Batch::from_examples(ds.examples.iter().filter(|e| scope.contains(is_head[e.target])));
    if batch.is_empty() {
        return Err(Error::EmptyScope(scope.name().into()));
    }
    Ok(batch)
}

/// A fixed objective `Σ_k w_k ℓ_k(θ)` over a fixed set of examples.
#[derive(Debug, Clone)]
pub struct Objective<'a, M: ?Sized> {
    pub model: &'a M,
    pub batch: Batch,
    pub weights: Vec<f64>,
}

impl<'a, M: LossModel + ?Sized> Objective<'a, M> {
    pub fn new(model: &'a M, batch: Batch, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                got: weights.len(),
            });
        }
        Ok(Objective { model, batch, weights })
    }

    /// Mean loss over `batch`.
    pub fn mean(model: &'a M, batch: Batch) -> Self {
        let w = vec![1.0 / batch.len() as f64; batch.len()];
        Objective {
            model,
            batch,
            weights: w,
        }
    }

    /// `Σ_i f(q_i) L^(i)` where `L^(i)` is the mean loss over the examples of
    /// `batch` that target item `i`.
    pub fn weighted(model: &'a M, batch: Batch, weights: &ItemWeights) -> Self {
        let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        for &t in &batch.targets {
            *counts.entry(t).or_default() += 1;
        }
        let w = batch
            .targets
            .iter()
            .map(|t| weights.f[*t] / counts[t] as f64)
            .collect();
        Objective {
            model,
            batch,
            weights: w,
        }
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self
            .model
            .evaluate(theta, &self.batch, &[])?
            .losses
            .weighted_sum(&self.weights))
    }

    pub fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.model.evaluate(theta, &self.batch, &[&self.weights])?;
        Ok(e.grads.pop().expect("one gradient"))
    }
}

/// Default finite-difference step `1e-4 · max(1, ‖θ‖)`.
pub fn default_hvp_step(theta: &[f64]) -> f64 {
    1e-4 * l2_norm(theta).max(1.0)
}

/// Hessian-vector product of the objective by central differences.
pub fn hvp_fd<M: LossModel + ?Sized>(obj: &Objective<'_, M>, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain("hvp step must be finite and > 0".into()));
    }
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("hvp direction is not finite".into()));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + h * x).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - h * x).collect();
    let gp = obj.grad(&plus)?;
    let gm = obj.grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_probes: usize,
}

/// Rademacher probe `probe` under `seed`.
pub fn rademacher(dim: usize, seed: u64, probe: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, STREAM_PROBE_BASE + probe);
    (0..dim)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Hutchinson estimate of `tr(∇²obj)` with `n_probes` Rademacher probes.
/// Probes are evaluated in parallel and reduced in probe order.
pub fn hutchinson_trace<M: LossModel + ?Sized>(
    obj: &Objective<'_, M>,
    theta: &[f64],
    n_probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if n_probes == 0 {
        return Err(Error::Domain("hutchinson needs at least one probe".into()));
    }
    let h = default_hvp_step(theta);
    let samples = (0..n_probes as u64)
        .into_par_iter()
        .map(|p| {
            let v = rademacher(theta.len(), seed, p);
            let hv = hvp_fd(obj, theta, &v, h)?;
            Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = n_probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if n_probes > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        estimate: mean,
        std_error,
        n_probes,
    })
}

/// JSON trace report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_probes: usize,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub directions: [Vec<f64>; 2],
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[r][c]` is the loss at `θ + alphas[r]·d₁ + betas[c]·d₂`.
    pub values: Vec<Vec<f64>>,
    pub scope: Scope,
}

impl LandscapeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (a, row) in self.alphas.iter().zip(&self.values) {
            for (b, v) in self.betas.iter().zip(row) {
                writeln!(out, "{a},{b},{v}").unwrap();
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two seeded directions. Each block of a raw uniform direction is first
/// rescaled to the norm of the same block of `θ` (blocks where `θ` is zero are
/// left alone); the pair is then Gram-Schmidt orthonormalised.
pub fn landscape_directions(theta: &[f64], blocks: &[Range<usize>], seed: u64) -> Result<[Vec<f64>; 2]> {
    let mut rng = stream_rng(seed, STREAM_LANDSCAPE);
    let mut raw: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for d in &mut raw {
        for b in blocks {
            let target = l2_norm(&theta[b.clone()]);
            let have = l2_norm(&d[b.clone()]);
            if target > 0.0 && have > 0.0 {
                d[b.clone()].iter_mut().for_each(|x| *x *= target / have);
            }
        }
    }
    let n1 = l2_norm(&raw[0]);
    if n1 == 0.0 {
        return Err(Error::Domain("degenerate landscape direction".into()));
    }
    let d1: Vec<f64> = raw[0].iter().map(|x| x / n1).collect();
    let proj = dot(&raw[1], &d1);
    let mut d2: Vec<f64> = raw[1].iter().zip(&d1).map(|(x, y)| x - proj * y).collect();
    // second pass keeps orthogonality at round-off level
    let proj = dot(&d2, &d1);
    d2.iter_mut().zip(&d1).for_each(|(x, y)| *x -= proj * y);
    let n2 = l2_norm(&d2);
    if n2 == 0.0 {
        return Err(Error::Domain("degenerate landscape direction".into()));
    }
    d2.iter_mut().for_each(|x| *x /= n2);
    Ok([d1, d2])
}

/// `resolution` evenly spaced points on `[-half_width, half_width]`; the
/// middle point is exactly zero and the grid is exactly symmetric.
pub fn symmetric_grid(half_width: f64, resolution: usize) -> Vec<f64> {
    let m = (resolution - 1) as f64;
    (0..resolution)
        .map(|r| half_width * (2.0 * r as f64 - m) / m)
        .collect()
}

/// Loss surface of `obj` on the plane spanned by two seeded directions.
pub fn landscape_slice<M: LossModel + ?Sized>(
    obj: &Objective<'_, M>,
    theta: &[f64],
    scope: Scope,
    half_width: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::InvalidConfig("landscape resolution must be odd and >= 3".into()));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::InvalidConfig("landscape half width must be > 0".into()));
    }
    let directions = landscape_directions(theta, &obj.model.blocks(), seed)?;
    let grid = symmetric_grid(half_width, resolution);
    let [d1, d2] = &directions;
    let flat = (0..resolution * resolution)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (grid[cell / resolution], grid[cell % resolution]);
            let point: Vec<f64> = theta
                .iter()
                .zip(d1)
                .zip(d2)
                .map(|((t, x), y)| t + a * x + b * y)
                .collect();
            obj.value(&point)
        })
        .collect::<Result<Vec<f64>>>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite loss on landscape grid".into()));
    }
    Ok(LandscapeGrid {
        values: flat.chunks(resolution).map(|c| c.to_vec()).collect(),
        alphas: grid.clone(),
        betas: grid,
        directions,
        scope,
    })
}

/// Item-wise sharpness `L^(i)(θ + ε̂) − L^(i)(θ)` at the shared perturbation
/// `ε̂ = ρ ∇L^w / ‖∇L^w‖` of the weighted objective, for every target in
/// `obj.batch`.
pub fn empirical_item_sharpness<M: LossModel + ?Sized>(
    obj: &Objective<'_, M>,
    theta: &[f64],
    rho: f64,
) -> Result<BTreeMap<ItemId, f64>> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Domain("rho must be finite and >= 0".into()));
    }
    let items: std::collections::BTreeSet<ItemId> = obj.batch.targets.iter().copied().collect();
    if rho == 0.0 {
        return Ok(items.into_iter().map(|i| (i, 0.0)).collect());
    }
    let eps = epsilon_hat(&obj.grad(theta)?, rho)?;
    let shifted: Vec<f64> = theta.iter().zip(&eps).map(|(a, b)| a + b).collect();
    let before = item_means(obj, theta)?;
    let after = item_means(obj, &shifted)?;
    Ok(before
        .into_iter()
        .map(|(i, l0)| (i, after[&i] - l0))
        .collect())
}

fn item_means<M: LossModel + ?Sized>(obj: &Objective<'_, M>, theta: &[f64]) -> Result<BTreeMap<ItemId, f64>> {
    let losses = obj.model.evaluate(theta, &obj.batch, &[])?.losses;
    let mut acc: BTreeMap<ItemId, (f64, usize)> = BTreeMap::new();
    for (&t, &l) in losses.targets.iter().zip(&losses.losses) {
        let e = acc.entry(t).or_default();
        e.0 += l;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect())
}

/// `B^w = Σ_i f(q_i) q_i B`.
pub fn bw_constant(table: &FrequencyTable, scheme: &WeightingScheme, b: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain("loss bound B must be finite and > 0".into()));
    }
    let f = weights_for_table(scheme, table);
    Ok(f.iter()
        .zip(&table.freqs)
        .filter(|(_, &q)| q > 0.0)
        .map(|(w, q)| w * q * b)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub rho: f64,
    pub lambda: f64,
    pub delta: f64,
    /// Parameter count.
    pub d: usize,
    /// Training-set size.
    pub n: usize,
    /// Loss cap.
    pub b: f64,
    pub b_w: f64,
    pub theta_norm: f64,
    pub trace_hw: f64,
    pub q_min: f64,
    pub n_items: usize,
    /// `L_S + λ L^SAM_S`.
    pub j_s: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Domain(m.to_string()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta must lie in (0, 1)");
        }
        if !(self.q_min > 0.0) {
            return fail("q_min must be > 0");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return fail("rho must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be >= 0");
        }
        if self.n < 2 || self.d == 0 || self.n_items == 0 {
            return fail("need n >= 2, d >= 1 and at least one item");
        }
        let finite = [self.b, self.b_w, self.theta_norm, self.trace_hw, self.j_s];
        if finite.iter().any(|x| !x.is_finite()) || self.b <= 0.0 || self.b_w < 0.0 || self.theta_norm < 0.0 {
            return fail("B > 0, B^w >= 0, ‖θ‖ >= 0 and finite inputs required");
        }
        Ok(())
    }
}

/// The pieces of the complexity constant `C(θ, ρ, d, n, δ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityTerms {
    /// `2 + 2B^w`
    pub constant: f64,
    /// `2d ln(1 + ‖θ‖² / (dρ²))`
    pub norm: f64,
    /// `4d ln(√d + √(2 ln n))`
    pub dimension: f64,
    /// `4 ln(π² √n (1 + nB^w)² / (3δ))`
    pub confidence: f64,
    pub total: f64,
}

pub fn complexity_terms(inp: &BoundInputs) -> ComplexityTerms {
    let d = inp.d as f64;
    let n = inp.n as f64;
    let constant = 2.0 + 2.0 * inp.b_w;
    let norm = 2.0 * d * (1.0 + inp.theta_norm.powi(2) / (d * inp.rho * inp.rho)).ln();
    let dimension = 4.0 * d * (d.sqrt() + (2.0 * n.ln()).sqrt()).ln();
    let confidence = 4.0
        * (std::f64::consts::PI.powi(2) * n.sqrt() * (1.0 + n * inp.b_w).powi(2) / (3.0 * inp.delta)).ln();
    ComplexityTerms {
        constant,
        norm,
        dimension,
        confidence,
        total: constant + norm + dimension + confidence,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    /// `2 J_S / (|I| q_min)`
    pub empirical: f64,
    /// `−λρ² tr(H^w) / (2|I| q_min (√d + √(2 ln n))²)`
    pub curvature_bonus: f64,
    /// `40 (B + λB^w) ln(2/δ) / (3n |I| q_min)`
    pub concentration: f64,
    /// `λ C / (n |I| q_min)`
    pub complexity: f64,
    pub complexity_terms: ComplexityTerms,
    pub total: f64,
    /// Scale `dρ² / (√d + √(2 ln n))²` of the unevaluated little-o remainder,
    /// which is not part of `total`.
    pub remainder_scale: f64,
    pub note: String,
}

/// Right-hand side of the balanced-risk bound, term by term.
pub fn bound_rhs(inp: &BoundInputs) -> Result<BoundReport> {
    inp.validate()?;
    let d = inp.d as f64;
    let n = inp.n as f64;
    let scale = 1.0 / (inp.n_items as f64 * inp.q_min);
    let root = d.sqrt() + (2.0 * n.ln()).sqrt();
    let empirical = 2.0 * scale * inp.j_s;
    let curvature_bonus = if inp.lambda == 0.0 {
        0.0
    } else {
        -inp.lambda * inp.rho * inp.rho * inp.trace_hw * scale / (2.0 * root * root)
    };
    let concentration = scale * 40.0 * (inp.b + inp.lambda * inp.b_w) / (3.0 * n) * (2.0 / inp.delta).ln();
    let complexity_terms = complexity_terms(inp);
    let complexity = scale * inp.lambda * complexity_terms.total / n;
    Ok(BoundReport {
        inputs: inp.clone(),
        empirical,
        curvature_bonus,
        concentration,
        complexity,
        complexity_terms,
        total: empirical + curvature_bonus + concentration + complexity,
        remainder_scale: d * inp.rho * inp.rho / (root * root),
        note: "J_S uses the first-order perturbation in place of the exact inner maximum; \
               all logarithms are natural"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::{QuadraticFamily, QuadraticForm};
    use crate::weighting::Normalize;

    fn one_example() -> Batch {
        Batch::new(vec![vec![0]], vec![0])
    }

    #[test]
    fn hvp_on_diagonal_quadratic() {
        let q = QuadraticForm::diagonal(&[1.0, 2.0, 3.0]);
        let obj = Objective::mean(&q, one_example());
        let hv = hvp_fd(&obj, &[0.3, -0.2, 1.0], &[0.0, 1.0, 0.0], 1e-4).unwrap();
        for (a, b) in hv.iter().zip([0.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(hvp_fd(&obj, &[0.3, -0.2, 1.0], &[0.0; 3], 1e-4).unwrap(), vec![0.0; 3]);
        assert!(hvp_fd(&obj, &[0.0; 3], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn identity_trace_is_exact() {
        let q = QuadraticForm::diagonal(&[1.0; 7]);
        let obj = Objective::mean(&q, one_example());
        let t = hutchinson_trace(&obj, &[0.0; 7], 25, 3).unwrap();
        assert_eq!(t.estimate, 7.0);
        assert_eq!(t.std_error, 0.0);
    }

    #[test]
    fn linear_loss_has_zero_trace() {
        let q = QuadraticForm::linear(vec![1.0, -2.0, 0.5]);
        let obj = Objective::mean(&q, one_example());
        let t = hutchinson_trace(&obj, &[0.4, 0.1, -3.0], 50, 0).unwrap();
        assert!(t.estimate.abs() < 1e-6);
    }

    #[test]
    fn trace_is_deterministic_per_seed() {
        let q = QuadraticForm {
            a: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            b: vec![0.0; 2],
        };
        let obj = Objective::mean(&q, one_example());
        let a = hutchinson_trace(&obj, &[0.1, 0.2], 40, 9).unwrap();
        assert_eq!(a, hutchinson_trace(&obj, &[0.1, 0.2], 40, 9).unwrap());
        assert_ne!(a, hutchinson_trace(&obj, &[0.1, 0.2], 40, 10).unwrap());
    }

    #[test]
    fn grid_is_symmetric_with_exact_zero() {
        let g = symmetric_grid(0.7, 9);
        assert_eq!(g[4], 0.0);
        for r in 0..9 {
            assert_eq!(g[r], -g[8 - r]);
        }
        assert_eq!(g[0], -0.7);
    }

    #[test]
    fn landscape_center_and_directions() {
        let q = QuadraticFamily {
            curvature: vec![1.0, 2.0],
            centers: vec![vec![0.0, 1.0, 2.0], vec![1.0, 1.0, -1.0]],
        };
        let batch = Batch::new(vec![vec![0]; 3], vec![0, 1, 1]);
        let obj = Objective::mean(&q, batch);
        let theta = [0.5, -0.5, 0.25];
        let g = landscape_slice(&obj, &theta, Scope::Overall, 1.0, 5, 4).unwrap();
        assert_eq!(g.values[2][2], obj.value(&theta).unwrap());
        let [d1, d2] = &g.directions;
        assert!((l2_norm(d1) - 1.0).abs() < 1e-10);
        assert!((l2_norm(d2) - 1.0).abs() < 1e-10);
        assert!(dot(d1, d2).abs() < 1e-10);
        assert_eq!(g.to_csv().lines().count(), 26);
        assert!(matches!(
            landscape_slice(&obj, &theta, Scope::Overall, 1.0, 4, 4),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn scope_filtering() {
        let ds = SequenceDataset {
            examples: vec![crate::data::Example {
                user: 0,
                prefix: vec![1],
                target: 0,
            }],
            max_len: 10,
            vocab: vec![0, 1],
        };
        assert!(scope_examples(&ds, &[true, false], Scope::Head).is_ok());
        assert!(matches!(
            scope_examples(&ds, &[true, false], Scope::Tail),
            Err(Error::EmptyScope(_))
        ));
    }

    #[test]
    fn item_sharpness_scalar_example() {
        let q = QuadraticFamily::scalar_square();
        let table = FrequencyTable::from_counts(vec![1]).unwrap();
        let w = ItemWeights::new(WeightingScheme::Identity, Normalize::None, &table).unwrap();
        let obj = Objective::weighted(&q, one_example(), &w);
        let is = empirical_item_sharpness(&obj, &[1.0], 0.1).unwrap();
        assert!((is[&0] - 0.21).abs() < 1e-12);
        let zero = empirical_item_sharpness(&obj, &[1.0], 0.0).unwrap();
        assert_eq!(zero[&0], 0.0);
    }

    #[test]
    fn bw_examples() {
        let t = FrequencyTable::from_counts(vec![1, 1]).unwrap();
        assert_eq!(bw_constant(&t, &WeightingScheme::Frequency, 3.0).unwrap(), 1.5);
        assert!((bw_constant(&t, &WeightingScheme::Identity, 3.0).unwrap() - 3.0).abs() < 1e-15);
        let single = FrequencyTable::from_counts(vec![4]).unwrap();
        let s = WeightingScheme::effective_number(0.5).unwrap();
        assert_eq!(bw_constant(&single, &s, 2.0).unwrap(), 2.0 * crate::weighting::weight(&s, 1.0).unwrap());
        assert!(bw_constant(&t, &s, 0.0).is_err());
    }

    fn sample_inputs() -> BoundInputs {
        BoundInputs {
            rho: 0.05,
            lambda: 0.5,
            delta: 0.05,
            d: 16_500,
            n: 10_000,
            b: 16.2,
            b_w: 4.0,
            theta_norm: 12.0,
            trace_hw: 340.0,
            q_min: 1e-4,
            n_items: 500,
            j_s: 5.1,
        }
    }

    #[test]
    fn bound_domain_errors() {
        for bad in [
            BoundInputs { delta: 1.0, ..sample_inputs() },
            BoundInputs { delta: 0.0, ..sample_inputs() },
            BoundInputs { q_min: 0.0, ..sample_inputs() },
            BoundInputs { rho: 0.0, ..sample_inputs() },
            BoundInputs { n: 1, ..sample_inputs() },
        ] {
            assert!(matches!(bound_rhs(&bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn bound_total_is_sum_of_components() {
        let r = bound_rhs(&sample_inputs()).unwrap();
        assert_eq!(r.total, r.empirical + r.curvature_bonus + r.concentration + r.complexity);
        assert!(r.curvature_bonus < 0.0);
        let flat = bound_rhs(&BoundInputs { trace_hw: -1.0, ..sample_inputs() }).unwrap();
        assert!(flat.curvature_bonus > 0.0);
    }
}
