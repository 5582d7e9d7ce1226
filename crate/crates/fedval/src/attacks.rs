//! Data-poisoning injectors. Attacks touch only labels, are applied once
//! before round 0, and poison both the training and the validation split of
//! every corrupted learner.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, LearnerShard};
use crate::error::{Error, Result};
use crate::federation::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    UniformShuffle,
    TargetedFlip,
}

/// Which learners get poisoned and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub kind: AttackKind,
    #[serde(default)]
    pub corrupted_learner_ids: BTreeSet<usize>,
    #[serde(default)]
    pub source_class: usize,
    #[serde(default)]
    pub target_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AttackPlan {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            corrupted_learner_ids: BTreeSet::new(),
            source_class: 0,
            target_class: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, n_learners: usize, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.corrupted_learner_ids.iter().find(|&&id| id >= n_learners) {
            return Err(Error::InvalidInput(format!(
                "corrupted learner id {bad} out of range [0, {n_learners})"
            )));
        }
        if self.kind == AttackKind::TargetedFlip {
            if self.source_class == self.target_class {
                return Err(Error::InvalidInput("source and target class must differ".into()));
            }
            if self.source_class >= num_classes || self.target_class >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "flip classes {} -> {} out of range [0, {num_classes})",
                    self.source_class, self.target_class
                )));
            }
        }
        Ok(())
    }
}

fn resample_labels(data: &LabeledDataset, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let c = data.num_classes();
    let labels = data.labels().iter().map(|_| rng.gen_range(0..c)).collect();
    data.with_labels(labels).expect("resampled labels are in range")
}

/// Resample every label (train and validation) i.i.d. from U{0..C-1}.
/// Features are untouched; a label may map to itself.
pub fn apply_uniform_shuffle(shard: &LearnerShard, seed: u64) -> LearnerShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = resample_labels(&shard.train, &mut rng);
    let validation = shard.validation.as_ref().map(|v| resample_labels(v, &mut rng));
    LearnerShard { learner_id: shard.learner_id, train, validation }
}

fn flip_labels(data: &LabeledDataset, source: usize, target: usize) -> LabeledDataset {
    let labels = data.labels().iter().map(|&l| if l == source { target } else { l }).collect();
    data.with_labels(labels).expect("flipped labels are in range")
}

/// Relabel every source-class example (train and validation) to the target
/// class. All other labels and all features are unchanged.
pub fn apply_targeted_flip(shard: &LearnerShard, source: usize, target: usize) -> LearnerShard {
    LearnerShard {
        learner_id: shard.learner_id,
        train: flip_labels(&shard.train, source, target),
        validation: shard.validation.as_ref().map(|v| flip_labels(v, source, target)),
    }
}

/// Apply the plan to the designated learners, leaving everyone else's shard
/// untouched. Per-learner shuffle seeds derive from the plan seed so the
/// attack is reproducible regardless of iteration order.
pub fn apply_plan(plan: &AttackPlan, shards: &[LearnerShard]) -> Result<Vec<LearnerShard>> {
    let num_classes = shards
        .first()
        .map(|s| s.train.num_classes())
        .ok_or_else(|| Error::InvalidInput("no shards to attack".into()))?;
    plan.validate(shards.len(), num_classes)?;
    Ok(shards
        .iter()
        .map(|shard| {
            if !plan.corrupted_learner_ids.contains(&shard.learner_id) {
                return shard.clone();
            }
            match plan.kind {
                AttackKind::None => shard.clone(),
                AttackKind::UniformShuffle => {
                    apply_uniform_shuffle(shard, derive_seed(plan.seed, shard.learner_id as u64, 0))
                }
                AttackKind::TargetedFlip => {
                    apply_targeted_flip(shard, plan.source_class, plan.target_class)
                }
            }
        })
        .collect())
}

/// How much of the data an attack plan corrupts, measured on the pre-attack
/// shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStats {
    pub total_examples: usize,
    pub corrupted_examples: usize,
    /// corrupted examples / all examples across the federation
    pub total_ratio: f64,
    /// flipped source examples / all source examples (targeted flip only)
    pub class_level_ratio: Option<f64>,
    pub source_examples_total: Option<usize>,
    pub source_examples_corrupted: Option<usize>,
}

pub fn corruption_report(plan: &AttackPlan, shards: &[LearnerShard]) -> Result<CorruptionStats> {
    let num_classes = shards
        .first()
        .map(|s| s.train.num_classes())
        .ok_or_else(|| Error::InvalidInput("no shards to report on".into()))?;
    plan.validate(shards.len(), num_classes)?;

    let total_examples: usize = shards.iter().map(|s| s.total_examples()).sum();
    let count_source = |s: &LearnerShard| -> usize {
        let in_set =
            |d: &LabeledDataset| d.labels().iter().filter(|&&l| l == plan.source_class).count();
        in_set(&s.train) + s.validation.as_ref().map_or(0, in_set)
    };

    let stats = match plan.kind {
        AttackKind::None => CorruptionStats {
            total_examples,
            corrupted_examples: 0,
            total_ratio: 0.0,
            class_level_ratio: None,
            source_examples_total: None,
            source_examples_corrupted: None,
        },
        AttackKind::UniformShuffle => {
            let corrupted: usize = shards
                .iter()
                .filter(|s| plan.corrupted_learner_ids.contains(&s.learner_id))
                .map(|s| s.total_examples())
                .sum();
            CorruptionStats {
                total_examples,
                corrupted_examples: corrupted,
                total_ratio: corrupted as f64 / total_examples as f64,
                class_level_ratio: None,
                source_examples_total: None,
                source_examples_corrupted: None,
            }
        }
        AttackKind::TargetedFlip => {
            let source_total: usize = shards.iter().map(&count_source).sum();
            let flipped: usize = shards
                .iter()
                .filter(|s| plan.corrupted_learner_ids.contains(&s.learner_id))
                .map(&count_source)
                .sum();
            CorruptionStats {
                total_examples,
                corrupted_examples: flipped,
                total_ratio: flipped as f64 / total_examples as f64,
                class_level_ratio: Some(flipped as f64 / source_total as f64),
                source_examples_total: Some(source_total),
                source_examples_corrupted: Some(flipped),
            }
        }
    };
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_uniform, stratified_split};

    fn shard_from(data: LabeledDataset, id: usize, split: bool) -> LearnerShard {
        if split {
            let (train, val) = stratified_split(&data, 0.05, 7).unwrap();
            LearnerShard { learner_id: id, train, validation: Some(val) }
        } else {
            LearnerShard { learner_id: id, train: data, validation: None }
        }
    }

    fn uniform_shards(n: usize, learners: usize, c: usize) -> Vec<LearnerShard> {
        let data = generate_synthetic(n, 4, c, 3.0, 13).unwrap();
        partition_uniform(&data, learners, 5)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(id, d)| shard_from(d, id, true))
            .collect()
    }

    #[test]
    fn shuffle_hits_binomial_class_counts() {
        let data = generate_synthetic(5000, 4, 10, 3.0, 1).unwrap();
        let shard = shard_from(data, 0, false);
        let shuffled = apply_uniform_shuffle(&shard, 99);
        let counts = shuffled.train.class_counts();
        // binomial(5000, 0.1): mean 500, sigma ~= 21.2; allow 5 sigma
        for &c in &counts {
            assert!((c as f64 - 500.0).abs() < 5.0 * 21.3, "count {c}");
        }
        assert_eq!(shuffled.train.features(), shard.train.features());
        assert_eq!(apply_uniform_shuffle(&shard, 99), shuffled);
    }

    #[test]
    fn single_class_shuffle_is_identity() {
        let data = LabeledDataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, vec![0, 0], 1).unwrap();
        let shard = shard_from(data, 0, false);
        let out = apply_uniform_shuffle(&shard, 3);
        assert_eq!(out.train.labels(), shard.train.labels());
    }

    #[test]
    fn targeted_flip_moves_all_source_examples() {
        let data = generate_synthetic(1000, 4, 4, 3.0, 2).unwrap(); // 250 per class
        let shard = shard_from(data, 0, false);
        let before = shard.train.class_counts();
        let flipped = apply_targeted_flip(&shard, 0, 2);
        let after = flipped.train.class_counts();
        assert_eq!(after[0], 0);
        assert_eq!(after[2], before[0] + before[2]);
        assert_eq!(after[1], before[1]);
        // idempotent
        assert_eq!(apply_targeted_flip(&flipped, 0, 2), flipped);
    }

    #[test]
    fn flip_without_source_examples_is_identity() {
        let data = LabeledDataset::new(vec![0.0; 6], 2, vec![1, 1, 2], 3).unwrap();
        let shard = shard_from(data, 0, false);
        assert_eq!(apply_targeted_flip(&shard, 0, 2), shard);
    }

    #[test]
    fn plan_only_touches_corrupted_learners() {
        let shards = uniform_shards(2000, 4, 5);
        let plan = AttackPlan {
            kind: AttackKind::UniformShuffle,
            corrupted_learner_ids: [1, 3].into_iter().collect(),
            seed: 11,
            ..AttackPlan::none()
        };
        let out = apply_plan(&plan, &shards).unwrap();
        assert_eq!(out[0], shards[0]);
        assert_eq!(out[2], shards[2]);
        assert_ne!(out[1].train.labels(), shards[1].train.labels());
        // validation is poisoned too
        assert_ne!(
            out[1].validation.as_ref().unwrap().labels(),
            shards[1].validation.as_ref().unwrap().labels()
        );
        for (a, b) in out.iter().zip(&shards) {
            assert_eq!(a.train.features(), b.train.features());
            assert_eq!(a.total_examples(), b.total_examples());
        }
    }

    #[test]
    fn corruption_report_uniform_flip_paper_numbers() {
        let shards = uniform_shards(50_000, 10, 10);
        let plan = AttackPlan {
            kind: AttackKind::TargetedFlip,
            corrupted_learner_ids: [0, 1, 2].into_iter().collect(),
            source_class: 0,
            target_class: 2,
            seed: 0,
        };
        let stats = corruption_report(&plan, &shards).unwrap();
        assert_eq!(stats.source_examples_corrupted, Some(1500));
        assert_eq!(stats.class_level_ratio, Some(0.30));
        assert_eq!(stats.total_ratio, 0.03);
    }

    #[test]
    fn plan_validation_errors() {
        let shards = uniform_shards(200, 2, 4);
        let bad_id = AttackPlan {
            kind: AttackKind::UniformShuffle,
            corrupted_learner_ids: [5].into_iter().collect(),
            ..AttackPlan::none()
        };
        assert!(apply_plan(&bad_id, &shards).is_err());
        let bad_flip = AttackPlan {
            kind: AttackKind::TargetedFlip,
            corrupted_learner_ids: [0].into_iter().collect(),
            source_class: 1,
            target_class: 1,
            seed: 0,
        };
        assert!(apply_plan(&bad_flip, &shards).is_err());
    }
}
