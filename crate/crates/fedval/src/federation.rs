//! Synchronous federation engine: the round loop, local training
//! (ClientOpt), the evaluation fan-out over every learner's validation set,
//! and the community-model update, plus the corrupted-learner exclusion
//! baseline.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{fedavg_weights, performance_weights, weighted_average, WeightVector};
use crate::data::{LabeledDataset, LearnerShard};
use crate::error::{Error, Result};
use crate::metrics::{accumulate, evaluate, ConfusionMatrix, ScoreKind};
use crate::nn::{init_params, loss_and_grad, sgd_step, Architecture, Batch, ModelParams};

/// Aggregation scheme for the community update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fedavg,
    DvwMicro,
    DvwMacro,
    DvwGmean,
}

impl Scheme {
    pub fn is_performance_weighted(&self) -> bool {
        !matches!(self, Scheme::Fedavg)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Fedavg => "fedavg",
            Scheme::DvwMicro => "dvw_micro",
            Scheme::DvwMacro => "dvw_macro",
            Scheme::DvwGmean => "dvw_gmean",
        }
    }
}

fn default_scheme() -> Scheme {
    Scheme::Fedavg
}
fn default_local_epochs() -> usize {
    4
}
fn default_batch_size() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_gmean_epsilon() -> f64 {
    0.001
}
fn default_validation_fraction() -> f64 {
    0.05
}

/// Everything the engine needs for one federation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_learners: usize,
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_gmean_epsilon")]
    pub gmean_epsilon: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Hidden layer widths; empty means softmax regression.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Learners removed for the exclusion baseline.
    #[serde(default)]
    pub exclusion_ids: BTreeSet<usize>,
    pub master_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 || self.rounds == 0 {
            return Err(Error::Config("n_learners and rounds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(&bad) = self.exclusion_ids.iter().find(|&&id| id >= self.n_learners) {
            return Err(Error::Config(format!(
                "exclusion id {bad} out of range [0, {})",
                self.n_learners
            )));
        }
        Ok(())
    }

    pub fn score_kind(&self) -> Option<ScoreKind> {
        match self.scheme {
            Scheme::Fedavg => None,
            Scheme::DvwMicro => Some(ScoreKind::Micro),
            Scheme::DvwMacro => Some(ScoreKind::Macro),
            Scheme::DvwGmean => Some(ScoreKind::Gmean { epsilon: self.gmean_epsilon }),
        }
    }
}

/// Per-round results: what the paper plots per figure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Active learner ids, ascending; all per-learner vectors align to this.
    pub learner_ids: Vec<usize>,
    /// Top-1 accuracy of the community model on the held-out test set.
    pub community_test_accuracy: f64,
    /// Raw contribution values p_k.
    pub per_learner_scores: Vec<f64>,
    /// Normalized weights p_k / P.
    pub per_learner_weights: Vec<f64>,
    /// Community model per-class accuracy on the test set.
    pub community_per_class: Vec<f64>,
    /// Each local model's per-class accuracy: from its cumulative validation
    /// matrix under performance weighting, from the test set under FedAvg.
    pub per_learner_per_class: Vec<Vec<f64>>,
    /// Community model's confusion matrix on the test set.
    pub community_test_cm: ConfusionMatrix,
}

/// Deterministic per-(master, learner, round) seed, splitmix64-style mixing
/// so trajectories do not depend on learner iteration order.
pub fn derive_seed(master: u64, learner: u64, round: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ learner) ^ round)
}

/// Local SGD: `epochs` passes over the shard's training set, reshuffled each
/// epoch, in batches of `beta` (final short batch kept).
pub fn client_opt(
    start: &ModelParams,
    shard: &LearnerShard,
    epochs: usize,
    beta: usize,
    eta: f64,
    seed: u64,
) -> Result<ModelParams> {
    let train = &shard.train;
    if train.is_empty() {
        return Err(Error::InvalidInput(format!(
            "learner {} has an empty training set",
            shard.learner_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let d = train.num_features();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(beta) {
            let mut features = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                features.extend_from_slice(train.row(i));
                labels.push(train.labels()[i]);
            }
            let batch = Batch::new(features, labels, d)?;
            let (_, grad) = loss_and_grad(&params, &batch)?;
            params = sgd_step(&params, &grad, eta)?;
        }
    }
    Ok(params)
}

/// Evaluate one model against every learner's validation set, accumulate the
/// confusion matrices, and score the cumulative matrix.
pub fn eval_fanout(
    model: &ModelParams,
    validation_sets: &[&LabeledDataset],
    score: ScoreKind,
) -> Result<(f64, ConfusionMatrix)> {
    if validation_sets.is_empty() || validation_sets.iter().all(|v| v.is_empty()) {
        return Err(Error::Config("every validation set is empty".into()));
    }
    let cms: Vec<ConfusionMatrix> = validation_sets
        .iter()
        .map(|v| {
            if v.is_empty() {
                Ok(ConfusionMatrix::zero(model.arch.num_classes))
            } else {
                evaluate(model, v)
            }
        })
        .collect::<Result<_>>()?;
    let cumulative = accumulate(&cms)?;
    let s = score.apply(&cumulative)?;
    Ok((s, cumulative))
}

fn architecture_for(config: &FederationConfig, data: &LabeledDataset) -> Result<Architecture> {
    Architecture::new(data.num_features(), config.hidden.clone(), data.num_classes())
}

/// Run the full synchronous federation and return one record per round.
///
/// Round t: every non-excluded learner trains from the current community
/// model; under performance weighting each local model is scored over all
/// active learners' validation sets; weights are computed and the community
/// model is the weighted average. Round 0 starts from
/// `init_params(master_seed)`.
pub fn run_federation(
    config: &FederationConfig,
    shards: &[LearnerShard],
    test_set: &LabeledDataset,
) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    if shards.len() != config.n_learners {
        return Err(Error::Config(format!(
            "{} shards supplied for {} learners",
            shards.len(),
            config.n_learners
        )));
    }
    let active: Vec<&LearnerShard> =
        shards.iter().filter(|s| !config.exclusion_ids.contains(&s.learner_id)).collect();
    if active.is_empty() {
        return Err(Error::Config("all learners are excluded".into()));
    }
    let arch = architecture_for(config, test_set)?;
    let score_kind = config.score_kind();
    if score_kind.is_some()
        && active.iter().all(|s| s.validation.as_ref().is_none_or(|v| v.is_empty()))
    {
        return Err(Error::Config(
            "performance weighting requires nonempty validation sets".into(),
        ));
    }

    let mut community = init_params(&arch, config.master_seed);
    let mut records = Vec::with_capacity(config.rounds);
    let validation_sets: Vec<&LabeledDataset> =
        active.iter().filter_map(|s| s.validation.as_ref()).collect();

    for round in 0..config.rounds {
        let locals: Vec<ModelParams> = active
            .iter()
            .map(|s| {
                client_opt(
                    &community,
                    s,
                    config.local_epochs,
                    config.batch_size,
                    config.learning_rate,
                    derive_seed(config.master_seed, s.learner_id as u64, round as u64),
                )
            })
            .collect::<Result<_>>()?;

        let (weights, per_learner_per_class): (WeightVector, Vec<Vec<f64>>) = match score_kind {
            None => {
                let sizes: Vec<usize> = active.iter().map(|s| s.train.len()).collect();
                let per_class = locals
                    .iter()
                    .map(|m| Ok(evaluate(m, test_set)?.per_class_accuracy()))
                    .collect::<Result<_>>()?;
                (fedavg_weights(&sizes)?, per_class)
            }
            Some(kind) => {
                let mut scores = Vec::with_capacity(locals.len());
                let mut per_class = Vec::with_capacity(locals.len());
                for local in &locals {
                    let (score, cm) = eval_fanout(local, &validation_sets, kind)?;
                    scores.push(score);
                    per_class.push(cm.per_class_accuracy());
                }
                let weights = performance_weights(&scores).map_err(|e| match e {
                    Error::DegenerateWeights { .. } => Error::DegenerateWeights { round },
                    other => other,
                })?;
                (weights, per_class)
            }
        };

        community = weighted_average(&locals, &weights)?;
        let test_cm = evaluate(&community, test_set)?;
        records.push(RoundRecord {
            round,
            learner_ids: active.iter().map(|s| s.learner_id).collect(),
            community_test_accuracy: test_cm.trace() as f64 / test_cm.total() as f64,
            per_learner_scores: weights.raw.clone(),
            per_learner_weights: weights.normalized.clone(),
            community_per_class: test_cm.per_class_accuracy(),
            per_learner_per_class,
            community_test_cm: test_cm,
        });
    }
    Ok(records)
}

/// FedAvg over only the non-excluded learners, each training on its full
/// shard (validation merged back into train). Models perfect detection and
/// removal of the corrupted learners.
pub fn run_exclusion_baseline(
    config: &FederationConfig,
    shards: &[LearnerShard],
    test_set: &LabeledDataset,
) -> Result<(Vec<usize>, Vec<RoundRecord>)> {
    if config.exclusion_ids.is_empty() {
        return Err(Error::Config("exclusion baseline requires nonempty exclusion_ids".into()));
    }
    config.validate()?;
    let kept: Vec<&LearnerShard> =
        shards.iter().filter(|s| !config.exclusion_ids.contains(&s.learner_id)).collect();
    if kept.is_empty() {
        return Err(Error::Config("all learners are excluded".into()));
    }
    // Reindex to a reduced federation so seeds match a from-scratch run on
    // the honest learners alone.
    let kept_ids: Vec<usize> = kept.iter().map(|s| s.learner_id).collect();
    let reduced: Vec<LearnerShard> = kept
        .iter()
        .enumerate()
        .map(|(new_id, s)| {
            let train = match &s.validation {
                Some(v) if !v.is_empty() => LabeledDataset::concat(&[&s.train, v])?,
                _ => s.train.clone(),
            };
            Ok(LearnerShard { learner_id: new_id, train, validation: None })
        })
        .collect::<Result<_>>()?;
    let reduced_config = FederationConfig {
        n_learners: reduced.len(),
        scheme: Scheme::Fedavg,
        exclusion_ids: BTreeSet::new(),
        ..config.clone()
    };
    Ok((kept_ids, run_federation(&reduced_config, &reduced, test_set)?))
}
