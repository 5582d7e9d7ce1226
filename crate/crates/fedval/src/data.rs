//! Dataset representation, Uniform/PowerLaw partitioning across learners,
//! stratified train/validation splitting, synthetic blob generation, and
//! CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix (row-major) plus one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    num_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        num_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("dataset must contain at least one example".into()));
        }
        if num_features == 0 || features.len() != labels.len() * num_features {
            return Err(Error::InvalidInput(format!(
                "feature matrix has {} values for {} rows x {} cols",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range [0, {num_classes})"
            )));
        }
        Ok(Self { features, num_features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self { features, num_features: self.num_features, labels, num_classes: self.num_classes }
    }

    /// Replace the labels wholesale (used by the attack injectors).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), self.num_features, labels, self.num_classes)
    }

    /// Row indices grouped by class, in original row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero datasets".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_features != first.num_features || p.num_classes != first.num_classes {
                return Err(Error::InvalidInput("datasets have mismatched shapes".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, first.num_features, labels, first.num_classes)
    }
}

/// Explicit per-learner example counts, e.g. a published skewed
/// distribution to be reproduced bit-for-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub counts: Vec<usize>,
}

/// One learner's private data after the train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerShard {
    pub learner_id: usize,
    pub train: LabeledDataset,
    pub validation: Option<LabeledDataset>,
}

impl LearnerShard {
    pub fn total_examples(&self) -> usize {
        self.train.len() + self.validation.as_ref().map_or(0, |v| v.len())
    }
}

/// Largest-remainder rounding of `weights` (up to scale) onto `total` units.
/// Ties go to the lowest index. Order-stable and exact by construction.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    let mut rems: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let share = w / sum * total as f64;
        let base = share.floor() as usize;
        counts.push(base);
        assigned += base;
        rems.push((i, share - base as f64));
    }
    rems.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in rems.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Allocate each class's examples across learners so that learner totals hit
/// `quotas` exactly while per-class counts stay proportional.
///
/// Classes are processed in order; each class is split by largest-remainder
/// against the learners' remaining quotas. Remainder units among tied
/// learners are spread at even id intervals, which keeps the class mix
/// balanced in fully symmetric cases instead of piling onto low ids.
fn stratified_allocation(class_sizes: &[usize], quotas: &[usize]) -> Vec<Vec<usize>> {
    let n_learners = quotas.len();
    let mut remaining_quota = quotas.to_vec();
    let mut remaining_total: usize = quotas.iter().sum();
    let mut alloc = vec![vec![0usize; n_learners]; class_sizes.len()];

    for (c, &n_c) in class_sizes.iter().enumerate() {
        let mut given = 0usize;
        // integer remainders share the denominator remaining_total, so they
        // compare exactly
        let mut rems: Vec<(usize, usize)> = Vec::with_capacity(n_learners);
        for k in 0..n_learners {
            let num = remaining_quota[k] * n_c;
            let base = num / remaining_total;
            alloc[c][k] = base;
            given += base;
            rems.push((k, num % remaining_total));
        }
        let mut need = n_c - given;
        if need > 0 {
            rems.retain(|&(k, r)| r > 0 && alloc[c][k] < remaining_quota[k]);
            rems.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            // take strictly-larger remainders first, then spread the final
            // tie group at even intervals
            let mut i = 0usize;
            while need > 0 && i < rems.len() {
                let tie_end = rems[i..]
                    .iter()
                    .position(|&(_, r)| r != rems[i].1)
                    .map_or(rems.len(), |p| i + p);
                let group = &rems[i..tie_end];
                if group.len() <= need {
                    for &(k, _) in group {
                        alloc[c][k] += 1;
                    }
                    need -= group.len();
                } else {
                    let mut by_id: Vec<usize> = group.iter().map(|&(k, _)| k).collect();
                    by_id.sort_unstable();
                    for j in 0..need {
                        alloc[c][by_id[j * by_id.len() / need]] += 1;
                    }
                    need = 0;
                }
                i = tie_end;
            }
            debug_assert_eq!(need, 0);
        }
        for k in 0..n_learners {
            remaining_quota[k] -= alloc[c][k];
        }
        remaining_total -= n_c;
    }
    alloc
}

fn partition_by_quotas(
    data: &LabeledDataset,
    quotas: &[usize],
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let total: usize = quotas.iter().sum();
    if total > data.len() {
        return Err(Error::InvalidInput(format!(
            "partition requests {total} examples but dataset has {}",
            data.len()
        )));
    }
    if quotas.contains(&0) {
        return Err(Error::InvalidInput("every learner must receive at least one example".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = data.class_indices();
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
    }

    // When the plan does not cover the whole dataset, subsample each class
    // proportionally so the assigned portion stays stratified.
    let class_sizes: Vec<usize> = if total == data.len() {
        groups.iter().map(|g| g.len()).collect()
    } else {
        let weights: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
        largest_remainder(&weights, total)
    };

    let alloc = stratified_allocation(&class_sizes, quotas);
    let mut shard_indices: Vec<Vec<usize>> = vec![Vec::new(); quotas.len()];
    for (c, group) in groups.iter().enumerate() {
        let mut cursor = 0usize;
        for (k, taken) in alloc[c].iter().enumerate() {
            shard_indices[k].extend_from_slice(&group[cursor..cursor + taken]);
            cursor += taken;
        }
    }
    Ok(shard_indices.iter().map(|idx| data.subset(idx)).collect())
}

/// Equal-size IID split: each learner gets `floor(n/N)` examples (remainder
/// to the lowest ids) with per-class counts within one of `n_c/N`.
pub fn partition_uniform(
    data: &LabeledDataset,
    n_learners: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if n_learners == 0 {
        return Err(Error::InvalidInput("n_learners must be positive".into()));
    }
    if data.len() < n_learners {
        return Err(Error::InvalidInput(format!(
            "{} examples cannot stock {} learners",
            data.len(),
            n_learners
        )));
    }
    let base = data.len() / n_learners;
    let rem = data.len() % n_learners;
    let quotas: Vec<usize> = (0..n_learners).map(|k| base + usize::from(k < rem)).collect();
    partition_by_quotas(data, &quotas, seed)
}

/// Rightly-skewed IID split: learner k's share is proportional to
/// `decay^k`, rounded by largest remainder, unless an explicit plan
/// overrides the counts.
pub fn partition_powerlaw(
    data: &LabeledDataset,
    n_learners: usize,
    decay: f64,
    plan: Option<&PartitionPlan>,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let quotas = match plan {
        Some(p) => {
            if p.counts.len() != n_learners {
                return Err(Error::InvalidInput(format!(
                    "plan lists {} learners, expected {n_learners}",
                    p.counts.len()
                )));
            }
            p.counts.clone()
        }
        None => {
            if !(decay > 0.0 && decay < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "powerlaw decay must lie in (0, 1), got {decay}"
                )));
            }
            let weights: Vec<f64> = (0..n_learners).map(|k| decay.powi(k as i32)).collect();
            largest_remainder(&weights, data.len())
        }
    };
    if quotas.contains(&0) {
        return Err(Error::InvalidInput(
            "powerlaw allocation left a learner with zero examples".into(),
        ));
    }
    partition_by_quotas(data, &quotas, seed)
}

/// Split a shard into disjoint train/validation sets, taking
/// `round(fraction * m_c)` validation examples from each class (at least one
/// when the class has two or more examples). A singleton class stays whole
/// in train and a warning is logged.
pub fn stratified_split(
    shard: &LabeledDataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (c, group) in shard.class_indices().iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let m = group.len();
        let mut take = (validation_fraction * m as f64).round() as usize;
        if take == 0 && m >= 2 {
            take = 1;
        }
        if take >= m {
            take = m - 1;
        }
        if m == 1 {
            log::warn!("class {c} has a single example; it stays in the training split");
        }
        let mut shuffled = group.clone();
        shuffled.shuffle(&mut rng);
        let (val, train) = shuffled.split_at(take);
        val_idx.extend_from_slice(val);
        train_idx.extend_from_slice(train);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    if val_idx.is_empty() {
        return Err(Error::InvalidInput(
            "split produced an empty validation set (all classes are singletons)".into(),
        ));
    }
    Ok((shard.subset(&train_idx), shard.subset(&val_idx)))
}

/// Balanced Gaussian blobs: one unit-direction centroid per class scaled by
/// `class_separation`, unit-variance noise, labels interleaved round-robin.
pub fn generate_synthetic(
    n: usize,
    num_features: usize,
    num_classes: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n < num_classes || num_features < 2 || num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need n >= C and d >= 2, got n={n}, d={num_features}, C={num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut centroids = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let g: Vec<f64> = (0..num_features).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        centroids.push(g.into_iter().map(|v| v / norm * class_separation).collect::<Vec<_>>());
    }
    let mut features = Vec::with_capacity(n * num_features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &mu in &centroids[c] {
            features.push(mu + std_normal.sample(&mut rng));
        }
        labels.push(c);
    }
    LabeledDataset::new(features, num_features, labels, num_classes)
}

/// Schema for CSV ingestion: which column holds the label, and the class
/// count labels are validated against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub num_classes: usize,
}

/// Load a comma-separated file with a header row. Feature columns are every
/// column except the label column, in header order; row order is preserved.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?;
    let headers =
        reader.headers().map_err(|e| Error::Ingestion { row: 0, message: e.to_string() })?.clone();
    let label_col =
        headers.iter().position(|h| h == schema.label_column).ok_or_else(|| Error::Ingestion {
            row: 0,
            message: format!("label column '{}' not found in header", schema.label_column),
        })?;

    let num_features = headers.len() - 1;
    if num_features == 0 {
        return Err(Error::Ingestion { row: 0, message: "no feature columns".into() });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Ingestion { row, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Ingestion {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_col {
                let label: usize = field.trim().parse().map_err(|_| Error::Ingestion {
                    row,
                    message: format!("label '{field}' is not a non-negative integer"),
                })?;
                if label >= schema.num_classes {
                    return Err(Error::Ingestion {
                        row,
                        message: format!("label {label} out of range [0, {})", schema.num_classes),
                    });
                }
                labels.push(label);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Ingestion {
                    row,
                    message: format!("feature '{field}' is not numeric"),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Ingestion { row: 0, message: "file contains no data rows".into() });
    }
    LabeledDataset::new(features, num_features, labels, schema.num_classes)
}

/// Multiset of (feature row, label) pairs, for partition-completeness checks.
pub fn row_multiset(data: &LabeledDataset) -> BTreeMap<(Vec<u64>, usize), usize> {
    let mut set = BTreeMap::new();
    for i in 0..data.len() {
        let key: Vec<u64> = data.row(i).iter().map(|v| v.to_bits()).collect();
        *set.entry((key, data.labels()[i])).or_insert(0) += 1;
    }
    set
}
