//! Interaction logs, next-item sequences and item frequency statistics.
//!
//! Raw item ids from a log are remapped to a dense vocabulary `0..n_items`
//! (ascending raw id) once low-count items have been filtered out. Everything
//! downstream (model, metrics, weights) works on dense ids; the raw ids are kept
//! in [`SequenceDataset::vocab`].

mod io;
mod zipf;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{
    load_frequency_dump, load_interactions, load_sequences, write_frequency_dump,
    write_interactions, write_sequences, FrequencyDump,
};
pub use zipf::{generate_zipf_dataset, zipf_probabilities, ZipfConfig, ZipfSampler};

/// Dense item index into the post-filter vocabulary.
pub type ItemId = usize;

/// Default cap on prefix length.
pub const DEFAULT_MAX_LEN: usize = 10;
/// Default minimum interaction count for an item to survive filtering.
pub const DEFAULT_MIN_COUNT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user histories sorted by `(timestamp, item)`, users ascending.
    pub fn histories(&self) -> BTreeMap<u64, Vec<Interaction>> {
        let mut by_user: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
        for r in &self.records {
            by_user.entry(r.user).or_default().push(*r);
        }
        for h in by_user.values_mut() {
            h.sort_by_key(|r| (r.timestamp, r.item));
        }
        by_user
    }

    /// Drops every record whose item has fewer than `min_count` interactions.
    pub fn filter_min_count(&self, min_count: u64) -> InteractionLog {
        let mut counts: HashMap<u64, u64> = HashMap::new();
        for r in &self.records {
            *counts.entry(r.item).or_default() += 1;
        }
        InteractionLog {
            records: self
                .records
                .iter()
                .filter(|r| counts[&r.item] >= min_count)
                .copied()
                .collect(),
        }
    }
}

/// One next-item prediction instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: u64,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    pub examples: Vec<Example>,
    pub max_len: usize,
    /// `vocab[dense_id]` is the raw item id from the source log.
    pub vocab: Vec<u64>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    /// Sub-dataset of the examples selected by `keep`, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&Example) -> bool) -> SequenceDataset {
        SequenceDataset {
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            max_len: self.max_len,
            vocab: self.vocab.clone(),
        }
    }
}

/// Target counts, frequencies and the head/tail partition over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub total: u64,
    pub freqs: Vec<f64>,
    pub head: Vec<ItemId>,
    pub tail: Vec<ItemId>,
    is_head: Vec<bool>,
}

impl FrequencyTable {
    /// Builds the table from raw counts and computes the Pareto split.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let freqs = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let n = counts.len();
        let table = FrequencyTable {
            counts,
            total,
            freqs,
            head: Vec::new(),
            tail: Vec::new(),
            is_head: vec![false; n],
        };
        pareto_split(table)
    }

    /// Counts the targets of `ds` over a vocabulary of `n_items`.
    pub fn from_targets(ds: &SequenceDataset, n_items: usize) -> Result<Self> {
        let mut counts = vec![0u64; n_items];
        for e in &ds.examples {
            if e.target >= n_items {
                return Err(Error::IdOutOfRange { id: e.target, n_items });
            }
            counts[e.target] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn is_head(&self, item: ItemId) -> bool {
        self.is_head[item]
    }

    pub fn head_mask(&self) -> &[bool] {
        &self.is_head
    }

    /// Smallest frequency among items with a positive count.
    pub fn q_min(&self) -> f64 {
        self.counts
            .iter()
            .zip(&self.freqs)
            .filter(|(&n, _)| n > 0)
            .map(|(_, &q)| q)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Number of head slots for a vocabulary of `n` items: `ceil(n / 5)`.
pub fn head_size(n: usize) -> usize {
    n.div_ceil(5)
}

/// Assigns the `ceil(0.2·|I|)` most frequent items to the head, breaking
/// count ties by smaller item id.
pub fn pareto_split(mut table: FrequencyTable) -> Result<FrequencyTable> {
    if table.total == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = table.counts.len();
    let mut order: Vec<ItemId> = (0..n).collect();
    order.sort_by(|&a, &b| table.counts[b].cmp(&table.counts[a]).then(a.cmp(&b)));
    let k = head_size(n);
    let mut head = order[..k].to_vec();
    let mut tail = order[k..].to_vec();
    head.sort_unstable();
    tail.sort_unstable();
    table.is_head = vec![false; n];
    for &i in &head {
        table.is_head[i] = true;
    }
    table.head = head;
    table.tail = tail;
    Ok(table)
}

/// Filters items with fewer than `min_count` interactions, then emits one
/// example per position `t >= 2` of every user history. The frequency table
/// counts the targets of the emitted examples.
pub fn build_sequences(
    log: &InteractionLog,
    max_len: usize,
    min_count: u64,
) -> Result<(SequenceDataset, FrequencyTable)> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max sequence length must be >= 1".into()));
    }
    let filtered = log.filter_min_count(min_count);
    let mut raw: Vec<u64> = filtered.records.iter().map(|r| r.item).collect();
    raw.sort_unstable();
    raw.dedup();
    let dense: HashMap<u64, ItemId> = raw.iter().enumerate().map(|(i, &r)| (r, i)).collect();

    let mut examples = Vec::new();
    for (user, history) in filtered.histories() {
        let items: Vec<ItemId> = history.iter().map(|r| dense[&r.item]).collect();
        for t in 1..items.len() {
            let start = t.saturating_sub(max_len);
            examples.push(Example {
                user,
                prefix: items[start..t].to_vec(),
                target: items[t],
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ds = SequenceDataset {
        examples,
        max_len,
        vocab: raw,
    };
    let table = FrequencyTable::from_targets(&ds, ds.n_items())?;
    Ok((ds, table))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub test: SequenceDataset,
}

/// Per-user chronological 8:1:1 split.
///
/// For a user with `m` examples the last `round(m/10)` go to test, the
/// `round(m/10)` before them to validation and the rest to train. The split
/// is a pure function of the dataset; `_seed` is accepted for interface
/// stability only.
pub fn split_8_1_1(ds: &SequenceDataset, _seed: u64) -> Result<Split> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut start = 0;
    while start < ds.examples.len() {
        let user = ds.examples[start].user;
        let mut end = start;
        while end < ds.examples.len() && ds.examples[end].user == user {
            end += 1;
        }
        let m = end - start;
        let k = (m + 5) / 10;
        let n_train = m - 2 * k;
        let user_examples = &ds.examples[start..end];
        train.extend_from_slice(&user_examples[..n_train]);
        val.extend_from_slice(&user_examples[n_train..n_train + k]);
        test.extend_from_slice(&user_examples[n_train + k..]);
        start = end;
    }
    if val.is_empty() || test.is_empty() {
        return Err(Error::DatasetTooSmall {
            needed: 5,
            got: ds.examples.len(),
        });
    }
    let wrap = |examples| SequenceDataset {
        examples,
        max_len: ds.max_len,
        vocab: ds.vocab.clone(),
    };
    Ok(Split {
        train: wrap(train),
        val: wrap(val),
        test: wrap(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(rows: &[(u64, u64, i64)]) -> InteractionLog {
        InteractionLog {
            records: rows
                .iter()
                .map(|&(user, item, timestamp)| Interaction { user, item, timestamp })
                .collect(),
        }
    }

    fn single_user(items: &[u64]) -> InteractionLog {
        log_of(
            &items
                .iter()
                .enumerate()
                .map(|(t, &i)| (1, i, t as i64))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn three_item_history_gives_two_examples() {
        let (ds, _) = build_sequences(&single_user(&[10, 20, 30]), 10, 0).unwrap();
        let pairs: Vec<_> = ds.examples.iter().map(|e| (e.prefix.clone(), e.target)).collect();
        assert_eq!(pairs, vec![(vec![0], 1), (vec![0, 1], 2)]);
    }

    #[test]
    fn prefixes_are_truncated_to_max_len() {
        let (ds, _) = build_sequences(&single_user(&[0, 1, 2, 3]), 2, 0).unwrap();
        assert_eq!(ds.examples[2].prefix, vec![1, 2]);
        assert_eq!(ds.examples[2].target, 3);
        assert!(ds.examples.iter().all(|e| e.prefix.len() <= 2));
    }

    #[test]
    fn frequencies_count_targets_only() {
        let table = FrequencyTable::from_counts(vec![0, 2, 1, 1]).unwrap();
        assert_eq!(table.total, 4);
        assert_eq!(table.freqs, vec![0.0, 0.5, 0.25, 0.25]);
        assert_eq!(table.q_min(), 0.25);
    }

    #[test]
    fn timestamp_ties_break_by_item() {
        let log = log_of(&[(1, 9, 5), (1, 3, 5), (1, 4, 1)]);
        let (ds, _) = build_sequences(&log, 10, 0).unwrap();
        // chronological order is 4, 3, 9 -> dense 1, 0, 2
        assert_eq!(ds.examples[0].prefix, vec![1]);
        assert_eq!(ds.examples[0].target, 0);
        assert_eq!(ds.examples[1].target, 2);
    }

    #[test]
    fn min_count_filter_removes_rare_items() {
        let log = single_user(&[1, 2, 1, 2, 3]);
        let (ds, table) = build_sequences(&log, 10, 2).unwrap();
        assert_eq!(ds.vocab, vec![1, 2]);
        assert_eq!(table.n_items(), 2);
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn empty_after_filter_is_an_error() {
        let log = single_user(&[1, 2]);
        assert!(matches!(build_sequences(&log, 10, 5), Err(Error::EmptyDataset)));
    }

    #[test]
    fn pareto_split_examples() {
        let t = FrequencyTable::from_counts(vec![10, 5, 3, 2, 1]).unwrap();
        assert_eq!(t.head, vec![0]);
        assert_eq!(t.tail, vec![1, 2, 3, 4]);

        let t = FrequencyTable::from_counts(vec![7]).unwrap();
        assert_eq!(t.head, vec![0]);
        assert!(t.tail.is_empty());

        let t = FrequencyTable::from_counts(vec![1, 4, 4]).unwrap();
        assert_eq!(t.head, vec![1]);
    }

    #[test]
    fn pareto_split_requires_positive_count() {
        assert!(FrequencyTable::from_counts(vec![0, 0]).is_err());
    }

    fn one_user_dataset(m: usize) -> SequenceDataset {
        let items: Vec<u64> = (0..=m as u64).collect();
        build_sequences(&single_user(&items), 10, 0).unwrap().0
    }

    #[test]
    fn split_ratios() {
        let s = split_8_1_1(&one_user_dataset(10), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_8_1_1(&one_user_dataset(9), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 1));
        // test holds the latest example
        assert_eq!(s.test.examples[0].target, 9);
        assert_eq!(s.val.examples[0].target, 8);
    }

    #[test]
    fn split_is_deterministic() {
        let ds = one_user_dataset(30);
        assert_eq!(split_8_1_1(&ds, 1).unwrap(), split_8_1_1(&ds, 1).unwrap());
    }

    #[test]
    fn split_too_small() {
        assert!(matches!(
            split_8_1_1(&one_user_dataset(3), 0),
            Err(Error::DatasetTooSmall { .. })
        ));
    }
}
