//! Frequency-dependent item weights `f(q)`.
//!
//! Three decreasing forms are provided (normalised inverse frequency,
//! effective number, exponential attenuation) plus two reference forms:
//! `Identity` (`f ≡ 1`) and `Frequency` (`f(q) = q`, under which the weighted
//! loss coincides with the plain empirical loss).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FrequencyTable, ItemId};
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingScheme {
    /// `1 / (q + ε)`
    Normalized { eps: f64 },
    /// `(1 - β) / (1 - β^q)`; `q` is the frequency, not the raw count.
    EffectiveNumber { beta: f64 },
    /// `(1 - q)^γ`
    Exponential { gamma: f64 },
    Identity,
    Frequency,
}

impl WeightingScheme {
    pub fn normalized(eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidConfig("normalized weighting needs eps > 0".into()));
        }
        Ok(WeightingScheme::Normalized { eps })
    }

    pub fn effective_number(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig("effective-number weighting needs beta in [0, 1)".into()));
        }
        Ok(WeightingScheme::EffectiveNumber { beta })
    }

    pub fn exponential(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidConfig("exponential weighting needs gamma > 0".into()));
        }
        Ok(WeightingScheme::Exponential { gamma })
    }

    /// True for the three decreasing forms.
    pub fn is_decreasing(&self) -> bool {
        !matches!(self, WeightingScheme::Identity | WeightingScheme::Frequency)
    }
}

/// `f(q)` for `q ∈ [0, 1]`. `EffectiveNumber` has a pole at `q = 0` and
/// returns `+∞` there.
pub fn weight(scheme: &WeightingScheme, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("frequency {q} outside [0, 1]")));
    }
    Ok(match *scheme {
        WeightingScheme::Normalized { eps } => 1.0 / (q + eps),
        WeightingScheme::EffectiveNumber { beta } => (1.0 - beta) / (1.0 - beta.powf(q)),
        WeightingScheme::Exponential { gamma } => (1.0 - q).powf(gamma),
        WeightingScheme::Identity => 1.0,
        WeightingScheme::Frequency => q,
    })
}

/// `f(q_i)` for every vocabulary item.
pub fn weights_for_table(scheme: &WeightingScheme, table: &FrequencyTable) -> Vec<f64> {
    table
        .freqs
        .iter()
        .map(|&q| weight(scheme, q).expect("table frequencies lie in [0, 1]"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    #[default]
    None,
    /// Rescale `f` so the average per-example estimator weight `f(q)/q` over
    /// the training targets is one, i.e. `Σ_{i: q_i > 0} f(q_i) = 1`. The
    /// weighted loss is then a convex combination of item-wise losses, on the
    /// same scale as the plain loss.
    MeanOne,
}

/// Precomputed per-item frequencies, weights and group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemWeights {
    pub q: Vec<f64>,
    pub f: Vec<f64>,
    pub is_head: Vec<bool>,
    pub scheme: WeightingScheme,
    pub normalize: Normalize,
}

impl ItemWeights {
    pub fn new(scheme: WeightingScheme, normalize: Normalize, table: &FrequencyTable) -> Result<Self> {
        let mut f = weights_for_table(&scheme, table);
        if normalize == Normalize::MeanOne {
            let total: f64 = f
                .iter()
                .zip(&table.freqs)
                .filter(|(_, &q)| q > 0.0)
                .map(|(w, _)| w)
                .sum();
            if !(total.is_finite() && total > 0.0) {
                return Err(Error::Domain("cannot normalise weights: sum is not positive".into()));
            }
            f.iter_mut().for_each(|w| *w /= total);
        }
        Ok(ItemWeights {
            q: table.freqs.clone(),
            f,
            is_head: table.head_mask().to_vec(),
            scheme,
            normalize,
        })
    }

    pub fn n_items(&self) -> usize {
        self.q.len()
    }

    /// Importance weight `f(q_i)/q_i` of one example with target `item`.
    pub fn estimator_weight(&self, item: ItemId) -> Result<f64> {
        let q = self.q[item];
        if q <= 0.0 {
            return Err(Error::ZeroFrequencyTarget { item });
        }
        Ok(self.f[item] / q)
    }

    /// The same weights with `f` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        ItemWeights {
            f: self.f.iter().map(|w| w * c).collect(),
            ..self.clone()
        }
    }
}

/// CSV `rank,item_id,q,weight`, items by descending frequency (ties by id).
pub fn weight_profile_csv(scheme: &WeightingScheme, table: &FrequencyTable) -> String {
    let w = weights_for_table(scheme, table);
    let mut order: Vec<ItemId> = (0..table.n_items()).collect();
    order.sort_by(|&a, &b| table.counts[b].cmp(&table.counts[a]).then(a.cmp(&b)));
    let mut out = String::from("rank,item_id,q,weight\n");
    for (rank, &i) in order.iter().enumerate() {
        writeln!(out, "{},{},{},{}", rank + 1, i, table.freqs[i], w[i]).unwrap();
    }
    out
}

pub fn emit_weight_profile(scheme: &WeightingScheme, table: &FrequencyTable, path: &Path) -> Result<()> {
    std::fs::write(path, weight_profile_csv(scheme, table)).map_err(|e| Error::io(path, e))
}
