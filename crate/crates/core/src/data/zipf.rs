//! Seeded synthetic logs with a Zipf item-popularity law.
//!
//! Item `r` (0-based) has probability proportional to `(r + 1)^(-α)`, so id 0
//! is the most popular item. The first item of each sequence is drawn from
//! that law. Each later item is, with probability `affinity`, drawn from the
//! law restricted to the previous item's cluster (`item % n_clusters`) and
//! otherwise from the full law. The law is stationary for that chain, so every
//! position has the Zipf marginal; `affinity = 0` gives i.i.d. draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_sequences, FrequencyTable, Interaction, InteractionLog, SequenceDataset};
use crate::rng::{stream_rng, STREAM_ZIPF};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZipfConfig {
    pub n_items: usize,
    pub exponent: f64,
    pub n_sequences: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Prefix length cap used when building sequences.
    pub max_len: usize,
    pub seed: u64,
    /// Probability of staying in the previous item's cluster.
    pub affinity: f64,
    pub n_clusters: usize,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        ZipfConfig {
            n_items: 50,
            exponent: 1.2,
            n_sequences: 2_000,
            seq_len_min: 2,
            seq_len_max: 11,
            max_len: super::DEFAULT_MAX_LEN,
            seed: 0,
            affinity: 0.0,
            n_clusters: 1,
        }
    }
}

impl ZipfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_items < 2 {
            return bad("zipf n_items must be >= 2");
        }
        if !(self.exponent.is_finite() && self.exponent >= 0.0) {
            return bad("zipf exponent must be finite and >= 0");
        }
        if self.seq_len_min < 1 || self.seq_len_min > self.seq_len_max {
            return bad("zipf sequence lengths need 1 <= min <= max");
        }
        if self.max_len == 0 || self.seq_len_max > self.max_len + 1 {
            return bad("zipf seq_len_max must be <= max_len + 1");
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return bad("zipf affinity must lie in [0, 1]");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return bad("zipf n_clusters must lie in 1..=n_items");
        }
        Ok(())
    }
}

/// Normalised Zipf probabilities for ranks `1..=n_items`.
pub fn zipf_probabilities(n_items: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n_items).map(|r| (r as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn cdf_of(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    let total = acc;
    for c in &mut cdf {
        *c /= total;
    }
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Inverse-CDF sampler for the (clustered) Zipf chain.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    global: Vec<f64>,
    clusters: Vec<(Vec<usize>, Vec<f64>)>,
    affinity: f64,
}

impl ZipfSampler {
    pub fn new(cfg: &ZipfConfig) -> Result<Self> {
        cfg.validate()?;
        let p = zipf_probabilities(cfg.n_items, cfg.exponent);
        let clusters = (0..cfg.n_clusters)
            .map(|c| {
                let members: Vec<usize> = (c..cfg.n_items).step_by(cfg.n_clusters).collect();
                let cdf = cdf_of(members.iter().map(|&i| p[i]));
                (members, cdf)
            })
            .collect();
        Ok(ZipfSampler {
            global: cdf_of(p.into_iter()),
            clusters,
            affinity: cfg.affinity,
        })
    }

    pub fn sample_marginal(&self, rng: &mut impl Rng) -> usize {
        draw(&self.global, rng.random())
    }

    pub fn sample_next(&self, prev: usize, rng: &mut impl Rng) -> usize {
        if self.affinity > 0.0 && rng.random::<f64>() < self.affinity {
            let (members, cdf) = &self.clusters[prev % self.clusters.len()];
            members[draw(cdf, rng.random())]
        } else {
            self.sample_marginal(rng)
        }
    }
}

/// Generates a synthetic log (user = sequence index, timestamp = position)
/// and builds sequences from it without count filtering.
pub fn generate_zipf_dataset(
    cfg: &ZipfConfig,
) -> Result<(InteractionLog, SequenceDataset, FrequencyTable)> {
    let sampler = ZipfSampler::new(cfg)?;
    let mut rng = stream_rng(cfg.seed, STREAM_ZIPF);
    let mut records = Vec::new();
    for user in 0..cfg.n_sequences {
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut item = sampler.sample_marginal(&mut rng);
        for t in 0..len {
            if t > 0 {
                item = sampler.sample_next(item, &mut rng);
            }
            records.push(Interaction {
                user: user as u64,
                item: item as u64,
                timestamp: t as i64,
            });
        }
    }
    let log = InteractionLog { records };
    let (ds, table) = build_sequences(&log, cfg.max_len, 0)?;
    Ok((log, ds, table))
}
