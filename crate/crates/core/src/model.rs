//! Mean-pooled embedding recommender with softmax cross-entropy.
//!
//! For a prefix `s` the hidden state is the mean of the prefix item embeddings,
//! `h = mean_{j in s} E_j`, and item `j` scores `z_j = <h, E_j> + b_j`. The
//! per-example loss is `-log softmax(z)[target]`, clamped to `[0, B_cap]` with
//! `B_cap = ln|I| + 10`. Embeddings are shared between input and output.
//!
//! Parameters are stored flat: the `|I| x d_emb` embedding matrix row-major,
//! followed by the `|I|` biases.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, ItemId};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::{Error, Result};

/// Headroom added to `ln|I|` for the loss cap.
pub const LOSS_CAP_MARGIN: f64 = 10.0;
pub const DEFAULT_D_EMB: usize = 32;
const INIT_SCALE: f64 = 0.1;
const CHUNK: usize = 256;

pub fn loss_cap(n_items: usize) -> f64 {
    (n_items as f64).ln() + LOSS_CAP_MARGIN
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub prefixes: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
}

impl Batch {
    pub fn new(prefixes: Vec<Vec<ItemId>>, targets: Vec<ItemId>) -> Self {
        assert_eq!(prefixes.len(), targets.len(), "prefix/target length mismatch");
        Batch { prefixes, targets }
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut b = Batch::default();
        for e in examples {
            b.prefixes.push(e.prefix.clone());
            b.targets.push(e.target);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Examples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            prefixes: idx.iter().map(|&i| self.prefixes[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleLoss {
    pub losses: Vec<f64>,
    pub targets: Vec<ItemId>,
    /// Number of examples whose loss hit the cap.
    pub clamped: usize,
}

impl PerExampleLoss {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn weighted_sum(&self, weights: &[f64]) -> f64 {
        self.losses.iter().zip(weights).map(|(l, w)| l * w).sum()
    }
}

/// Losses from one forward pass plus one gradient per requested weight set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: PerExampleLoss,
    /// `grads[s] = ∇ Σ_k weight_sets[s][k] · ℓ_k`.
    pub grads: Vec<Vec<f64>>,
}

/// Anything that yields per-example losses and weighted gradients over a flat
/// parameter vector. The optimizers and curvature tools are written against
/// this trait so they can be checked on closed-form surrogates.
pub trait LossModel: Sync {
    fn dim(&self) -> usize;

    /// One forward pass over `batch`, then one backward accumulation per
    /// weight set. An empty `weight_sets` is a forward-only evaluation.
    fn evaluate(&self, theta: &[f64], batch: &Batch, weight_sets: &[&[f64]]) -> Result<Evaluation>;

    /// Parameter blocks used for landscape direction normalisation.
    fn blocks(&self) -> Vec<Range<usize>> {
        vec![0..self.dim()]
    }
}

fn check_weights(weight_sets: &[&[f64]], n: usize) -> Result<()> {
    for w in weight_sets {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
            });
        }
        if let Some(index) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteWeight { index });
        }
    }
    Ok(())
}

/// Shape of the recommender; implements [`LossModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommender {
    pub n_items: usize,
    pub d_emb: usize,
}

impl Recommender {
    pub fn new(n_items: usize, d_emb: usize) -> Self {
        Recommender { n_items, d_emb }
    }

    pub fn emb_len(&self) -> usize {
        self.n_items * self.d_emb
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for (prefix, &t) in batch.prefixes.iter().zip(&batch.targets) {
            if prefix.is_empty() {
                return Err(Error::Domain("empty prefix".into()));
            }
            for &id in prefix.iter().chain([&t]) {
                if id >= self.n_items {
                    return Err(Error::IdOutOfRange {
                        id,
                        n_items: self.n_items,
                    });
                }
            }
        }
        Ok(())
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (emb, bias) = theta.split_at(self.emb_len());
        (
            ArrayView2::from_shape((self.n_items, self.d_emb), emb).expect("embedding shape"),
            ArrayView1::from(bias),
        )
    }

    fn hidden(&self, emb: &ArrayView2<f64>, prefixes: &[Vec<ItemId>]) -> Array2<f64> {
        let mut h = Array2::<f64>::zeros((prefixes.len(), self.d_emb));
        for (mut row, prefix) in h.axis_iter_mut(Axis(0)).zip(prefixes) {
            for &s in prefix {
                row += &emb.row(s);
            }
            row /= prefix.len() as f64;
        }
        h
    }

    /// Logits for every item given `prefix`.
    pub fn scores(&self, theta: &[f64], prefix: &[ItemId]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Domain("empty prefix".into()));
        }
        if let Some(&id) = prefix.iter().find(|&&id| id >= self.n_items) {
            return Err(Error::IdOutOfRange {
                id,
                n_items: self.n_items,
            });
        }
        let (emb, bias) = self.split(theta);
        let h = self.hidden(&emb, &[prefix.to_vec()]);
        let z = emb.dot(&h.row(0)) + bias;
        Ok(z.to_vec())
    }

    /// Logits for a whole batch, `B x |I|` row-major.
    pub fn batch_scores(&self, theta: &[f64], batch: &Batch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let (emb, bias) = self.split(theta);
        let h = self.hidden(&emb, &batch.prefixes);
        Ok(h.dot(&emb.t()) + bias)
    }

    fn evaluate_chunk(
        &self,
        theta: &[f64],
        prefixes: &[Vec<ItemId>],
        targets: &[ItemId],
        weight_sets: &[&[f64]],
        losses: &mut Vec<f64>,
        grads: &mut [Vec<f64>],
    ) -> usize {
        let cap = loss_cap(self.n_items);
        let (emb, bias) = self.split(theta);
        let h = self.hidden(&emb, prefixes);
        // softmax in place: z -> p - onehot(target)
        let mut dz = h.dot(&emb.t()) + bias;
        let mut clamped = 0;
        for (mut row, &t) in dz.axis_iter_mut(Axis(0)).zip(targets) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            let loss = (lse - row[t]).max(0.0);
            if loss > cap {
                losses.push(cap);
                clamped += 1;
                row.fill(0.0);
                continue;
            }
            losses.push(loss);
            row.mapv_inplace(|z| (z - lse).exp());
            row[t] -= 1.0;
        }
        if weight_sets.is_empty() {
            return clamped;
        }
        // input side: dL/dh_k = Σ_j dz_kj E_j, shared by every weight set
        let dh = dz.dot(&emb);
        let offset = losses.len() - targets.len();
        for (ws, grad) in weight_sets.iter().zip(grads.iter_mut()) {
            let w = &ws[offset..offset + targets.len()];
            let mut scaled = dz.clone();
            for (mut row, &wk) in scaled.axis_iter_mut(Axis(0)).zip(w) {
                row *= wk;
            }
            let (g_emb, g_bias) = grad.split_at_mut(self.emb_len());
            let mut g_emb =
                ndarray::ArrayViewMut2::from_shape((self.n_items, self.d_emb), g_emb).expect("shape");
            // output side: Σ_k w_k dz_kj h_k
            ndarray::linalg::general_mat_mul(1.0, &scaled.t(), &h, 1.0, &mut g_emb);
            for (gb, col) in g_bias.iter_mut().zip(scaled.axis_iter(Axis(1))) {
                *gb += col.sum();
            }
            for ((prefix, dh_k), &wk) in prefixes.iter().zip(dh.axis_iter(Axis(0))).zip(w) {
                if wk == 0.0 {
                    continue;
                }
                let c = wk / prefix.len() as f64;
                for &s in prefix {
                    g_emb.row_mut(s).scaled_add(c, &dh_k);
                }
            }
        }
        clamped
    }
}

impl LossModel for Recommender {
    fn dim(&self) -> usize {
        self.emb_len() + self.n_items
    }

    fn evaluate(&self, theta: &[f64], batch: &Batch, weight_sets: &[&[f64]]) -> Result<Evaluation> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        self.check_batch(batch)?;
        check_weights(weight_sets, batch.len())?;
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = vec![vec![0.0; self.dim()]; weight_sets.len()];
        let mut clamped = 0;
        for start in (0..batch.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(batch.len());
            clamped += self.evaluate_chunk(
                theta,
                &batch.prefixes[start..end],
                &batch.targets[start..end],
                weight_sets,
                &mut losses,
                &mut grads,
            );
        }
        Ok(Evaluation {
            losses: PerExampleLoss {
                losses,
                targets: batch.targets.clone(),
                clamped,
            },
            grads,
        })
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        let mut b: Vec<Range<usize>> = (0..self.n_items)
            .map(|i| i * self.d_emb..(i + 1) * self.d_emb)
            .collect();
        b.push(self.emb_len()..self.dim());
        b
    }
}

/// Recommender parameters together with the seed they were initialised from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_items: usize,
    pub d_emb: usize,
    pub init_seed: u64,
    pub params: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_items: usize, d_emb: usize) -> Self {
        let shape = Recommender::new(n_items, d_emb);
        ModelParams {
            n_items,
            d_emb,
            init_seed: 0,
            params: vec![0.0; shape.dim()],
        }
    }

    /// Embeddings uniform in `(-0.1, 0.1)`, biases zero.
    pub fn init(n_items: usize, d_emb: usize, seed: u64) -> Self {
        let mut p = Self::zeros(n_items, d_emb);
        p.init_seed = seed;
        let mut rng = stream_rng(seed, STREAM_INIT);
        let emb_len = n_items * d_emb;
        for x in &mut p.params[..emb_len] {
            *x = rng.random_range(-INIT_SCALE..INIT_SCALE);
        }
        p
    }

    /// Wraps a flat vector; fails if its length does not match the shape.
    pub fn from_flat(n_items: usize, d_emb: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Recommender::new(n_items, d_emb).dim();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(ModelParams {
            n_items,
            d_emb,
            init_seed: 0,
            params,
        })
    }

    pub fn model(&self) -> Recommender {
        Recommender::new(self.n_items, self.d_emb)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn flatten(&self) -> &[f64] {
        &self.params
    }

    pub fn embedding(&self, item: ItemId) -> &[f64] {
        &self.params[item * self.d_emb..(item + 1) * self.d_emb]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.n_items * self.d_emb..]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let start = self.n_items * self.d_emb;
        &mut self.params[start..]
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.params)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("params serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: ModelParams = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_flat(p.n_items, p.d_emb, p.params).map(|q| ModelParams {
            init_seed: p.init_seed,
            ..q
        })
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-example losses at `params`.
pub fn forward_losses(params: &ModelParams, batch: &Batch) -> Result<PerExampleLoss> {
    Ok(params.model().evaluate(&params.params, batch, &[])?.losses)
}

/// Logits over the full vocabulary for one prefix.
pub fn score_all(params: &ModelParams, prefix: &[ItemId]) -> Result<Vec<f64>> {
    params.model().scores(&params.params, prefix)
}

/// `∇ Σ_k w_k ℓ_k` in closed form.
pub fn grad(params: &ModelParams, batch: &Batch, sample_weights: &[f64]) -> Result<Vec<f64>> {
    let mut eval = params.model().evaluate(&params.params, batch, &[sample_weights])?;
    Ok(eval.grads.pop().expect("one gradient requested"))
}

/// Central-difference gradient of `Σ_k w_k ℓ_k`, one coordinate at a time.
pub fn finite_diff_grad<M: LossModel + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &Batch,
    sample_weights: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Domain("finite-difference step must be > 0".into()));
    }
    let value = |t: &[f64]| -> Result<f64> {
        Ok(model.evaluate(t, batch, &[])?.losses.weighted_sum(sample_weights))
    };
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        probe[j] = theta[j] + step;
        let plus = value(&probe)?;
        probe[j] = theta[j] - step;
        let minus = value(&probe)?;
        probe[j] = theta[j];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `params + delta` as a new parameter set.
pub fn perturb(params: &ModelParams, delta: &[f64]) -> Result<ModelParams> {
    if delta.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: delta.len(),
        });
    }
    let mut out = params.clone();
    for (p, d) in out.params.iter_mut().zip(delta) {
        *p += d;
    }
    Ok(out)
}

/// Closed-form reference objectives.
pub mod toy {
    use super::*;

    /// `ℓ(θ; s, i) = a_i ‖θ - c_i‖²`: every item has its own curvature and
    /// centre, prefixes are ignored. With one item, `a = 1` and `c = 0` this
    /// is the scalar `θ²`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct QuadraticFamily {
        pub curvature: Vec<f64>,
        pub centers: Vec<Vec<f64>>,
    }

    impl QuadraticFamily {
        pub fn scalar_square() -> Self {
            QuadraticFamily {
                curvature: vec![1.0],
                centers: vec![vec![0.0]],
            }
        }
    }

    /// `ℓ(θ) = ½ θᵀAθ + bᵀθ` for every example, `A` symmetric and dense.
    #[derive(Debug, Clone, PartialEq)]
    pub struct QuadraticForm {
        pub a: Vec<Vec<f64>>,
        pub b: Vec<f64>,
    }

    impl QuadraticForm {
        pub fn diagonal(diag: &[f64]) -> Self {
            let n = diag.len();
            let a = (0..n)
                .map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
                .collect();
            QuadraticForm { a, b: vec![0.0; n] }
        }

        pub fn linear(b: Vec<f64>) -> Self {
            let n = b.len();
            QuadraticForm {
                a: vec![vec![0.0; n]; n],
                b,
            }
        }

        fn grad_at(&self, theta: &[f64]) -> Vec<f64> {
            self.a
                .iter()
                .zip(&self.b)
                .map(|(row, bi)| row.iter().zip(theta).map(|(x, y)| x * y).sum::<f64>() + bi)
                .collect()
        }
    }

    impl LossModel for QuadraticForm {
        fn dim(&self) -> usize {
            self.b.len()
        }

        fn evaluate(&self, theta: &[f64], batch: &Batch, weight_sets: &[&[f64]]) -> Result<Evaluation> {
            if theta.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: theta.len(),
                });
            }
            check_weights(weight_sets, batch.len())?;
            let g = self.grad_at(theta);
            let value: f64 = theta
                .iter()
                .zip(&g)
                .zip(&self.b)
                .map(|((t, gi), bi)| 0.5 * t * (gi - bi) + bi * t)
                .sum();
            let grads = weight_sets
                .iter()
                .map(|w| {
                    let s: f64 = w.iter().sum();
                    g.iter().map(|x| s * x).collect()
                })
                .collect();
            Ok(Evaluation {
                losses: PerExampleLoss {
                    losses: vec![value; batch.len()],
                    targets: batch.targets.clone(),
                    clamped: 0,
                },
                grads,
            })
        }
    }

    impl LossModel for QuadraticFamily {
        fn dim(&self) -> usize {
            self.centers[0].len()
        }

        fn evaluate(&self, theta: &[f64], batch: &Batch, weight_sets: &[&[f64]]) -> Result<Evaluation> {
            check_weights(weight_sets, batch.len())?;
            let n_items = self.curvature.len();
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = vec![vec![0.0; self.dim()]; weight_sets.len()];
            for (k, &t) in batch.targets.iter().enumerate() {
                if t >= n_items {
                    return Err(Error::IdOutOfRange { id: t, n_items });
                }
                let a = self.curvature[t];
                let c = &self.centers[t];
                losses.push(a * theta.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
                for (ws, g) in weight_sets.iter().zip(grads.iter_mut()) {
                    for ((gj, x), y) in g.iter_mut().zip(theta).zip(c) {
                        *gj += ws[k] * 2.0 * a * (x - y);
                    }
                }
            }
            Ok(Evaluation {
                losses: PerExampleLoss {
                    losses,
                    targets: batch.targets.clone(),
                    clamped: 0,
                },
                grads,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(n_items: usize, d_emb: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(n_items, d_emb);
        for x in &mut p.params {
            *x = rng.random_range(-1.0..1.0);
        }
        p
    }

    fn random_batch(n_items: usize, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut batch = Batch::default();
        for _ in 0..b {
            let len = rng.random_range(1..=4);
            batch
                .prefixes
                .push((0..len).map(|_| rng.random_range(0..n_items)).collect());
            batch.targets.push(rng.random_range(0..n_items));
        }
        batch
    }

    /// Straight loops over the forward formula, no shared code with the model.
    fn reference_loss(p: &ModelParams, prefix: &[usize], target: usize) -> f64 {
        let d = p.d_emb;
        let mut h = vec![0.0; d];
        for &s in prefix {
            for k in 0..d {
                h[k] += p.params[s * d + k] / prefix.len() as f64;
            }
        }
        let logits: Vec<f64> = (0..p.n_items)
            .map(|j| (0..d).map(|k| h[k] * p.params[j * d + k]).sum::<f64>() + p.bias()[j])
            .collect();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        -(logits[target].exp() / denom).ln()
    }

    #[test]
    fn single_item_loss_is_zero() {
        let p = random_params(1, 3, 1);
        let l = forward_losses(&p, &Batch::new(vec![vec![0]], vec![0])).unwrap();
        assert_eq!(l.losses, vec![0.0]);
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let p = ModelParams::zeros(4, 5);
        let l = forward_losses(&p, &random_batch(4, 6, 2)).unwrap();
        for x in l.losses {
            assert_relative_eq!(x, 4f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_matches_reference() {
        let p = random_params(6, 4, 3);
        let batch = random_batch(6, 8, 3);
        let l = forward_losses(&p, &batch).unwrap();
        for k in 0..batch.len() {
            let r = reference_loss(&p, &batch.prefixes[k], batch.targets[k]);
            assert!((l.losses[k] - r).abs() < 1e-12, "{} vs {}", l.losses[k], r);
        }
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let p = ModelParams::zeros(3, 2);
        assert!(matches!(
            forward_losses(&p, &Batch::new(vec![vec![5]], vec![0])),
            Err(Error::IdOutOfRange { id: 5, .. })
        ));
        assert!(matches!(score_all(&p, &[3]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn non_finite_weight_rejected() {
        let p = ModelParams::zeros(3, 2);
        let b = Batch::new(vec![vec![0]], vec![1]);
        assert!(matches!(grad(&p, &b, &[f64::NAN]), Err(Error::NonFiniteWeight { index: 0 })));
    }

    #[test]
    fn zero_params_rank_by_id_and_bias_orders() {
        let mut p = ModelParams::zeros(5, 3);
        assert_eq!(score_all(&p, &[1]).unwrap(), vec![0.0; 5]);
        for (j, b) in p.bias_mut().iter_mut().enumerate() {
            *b = j as f64;
        }
        let s = score_all(&p, &[1]).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn argmax_score_is_argmin_loss() {
        for seed in 0..5 {
            let p = random_params(10, 4, seed);
            let prefix = vec![1, 7, 3];
            let scores = score_all(&p, &prefix).unwrap();
            let batch = Batch::new(vec![prefix.clone(); 10], (0..10).collect());
            let losses = forward_losses(&p, &batch).unwrap().losses;
            let argmax = (0..10).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            let argmin = (0..10).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
            assert_eq!(argmax, argmin);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = random_params(20, 8, seed);
            let batch = random_batch(20, 5, seed);
            let w = [0.3, 1.0, 0.7, 2.0, 0.1];
            let g = grad(&p, &batch, &w).unwrap();
            let fd = finite_diff_grad(&p.model(), &p.params, &batch, &w, 1e-5).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient_and_doubling_doubles() {
        let p = random_params(7, 3, 9);
        let batch = random_batch(7, 4, 9);
        assert!(grad(&p, &batch, &[0.0; 4]).unwrap().iter().all(|&x| x == 0.0));
        let g1 = grad(&p, &batch, &[0.5, 1.0, 1.5, 2.0]).unwrap();
        let g2 = grad(&p, &batch, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn finite_diff_on_closed_forms() {
        let q = toy::QuadraticFamily {
            curvature: vec![0.5],
            centers: vec![vec![0.0; 4]],
        };
        let batch = Batch::new(vec![vec![0]], vec![0]);
        let fd = finite_diff_grad(&q, &[1.0; 4], &batch, &[1.0], 1e-5).unwrap();
        for x in fd {
            assert!((x - 1.0).abs() < 1e-8);
        }
        let fd2 = finite_diff_grad(&q, &[1.0; 4], &batch, &[2.0], 1e-5).unwrap();
        assert!(fd2.iter().all(|x| (x - 2.0).abs() < 1e-8));
        assert!(finite_diff_grad(&q, &[1.0; 4], &batch, &[1.0], 0.0).is_err());
    }

    #[test]
    fn perturb_roundtrip_and_norm() {
        let p = random_params(4, 2, 5);
        let delta: Vec<f64> = (0..p.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(perturb(&p, &vec![0.0; p.dim()]).unwrap(), p);
        let q = perturb(&p, &delta).unwrap();
        let diff: Vec<f64> = q.params.iter().zip(&p.params).map(|(a, b)| a - b).collect();
        assert!((l2_norm(&diff) - l2_norm(&delta)).abs() < 1e-12);
        let neg: Vec<f64> = delta.iter().map(|x| -x).collect();
        let back = perturb(&q, &neg).unwrap();
        for (a, b) in back.params.iter().zip(&p.params) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(perturb(&p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let p = ModelParams::init(13, 4, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(10, 4, 3);
        assert_eq!(a, ModelParams::init(10, 4, 3));
        assert_ne!(a, ModelParams::init(10, 4, 4));
        assert!(a.params[..40].iter().all(|x| x.abs() < 0.1));
        assert!(a.bias().iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(seed in 0u64..1000) {
            let p = random_params(9, 3, seed);
            let s = score_all(&p, &[seed as usize % 9, 2]).unwrap();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            let total: f64 = s.iter().map(|x| (x - m).exp() / z).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gradient_is_linear_in_weights(seed in 0u64..1000) {
            let p = random_params(8, 3, seed);
            let batch = random_batch(8, 3, seed);
            let w1 = [0.2, -1.0, 0.5];
            let w2 = [1.1, 0.3, -0.4];
            let w12: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let g1 = grad(&p, &batch, &w1).unwrap();
            let g2 = grad(&p, &batch, &w2).unwrap();
            let g12 = grad(&p, &batch, &w12).unwrap();
            for ((a, b), c) in g1.iter().zip(&g2).zip(&g12) {
                prop_assert!((a + b - c).abs() < 1e-10);
            }
        }

        #[test]
        fn losses_within_cap(seed in 0u64..1000) {
            let p = random_params(6, 2, seed);
            let l = forward_losses(&p, &random_batch(6, 5, seed)).unwrap();
            prop_assert!(l.losses.iter().all(|&x| (0.0..=loss_cap(6)).contains(&x)));
        }

        #[test]
        fn ranking_invariant_to_bias_shift(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let p = random_params(7, 3, seed);
            let mut q = p.clone();
            q.bias_mut().iter_mut().for_each(|b| *b += shift);
            let order = |s: Vec<f64>| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(score_all(&p, &[0, 1]).unwrap()), order(score_all(&q, &[0, 1]).unwrap()));
        }
    }
}
