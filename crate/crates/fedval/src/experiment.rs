//! Experiment runner: parse a TOML spec, build and poison the data once,
//! run every requested scheme and baseline on byte-identical shards, and
//! emit CSV results plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attacks::{apply_plan, corruption_report, AttackKind, AttackPlan, CorruptionStats};
use crate::data::{
    generate_synthetic, load_csv, partition_powerlaw, partition_uniform, stratified_split,
    CsvSchema, LabeledDataset, LearnerShard, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::federation::{
    derive_seed, run_exclusion_baseline, run_federation, FederationConfig, RoundRecord, Scheme,
};
use crate::transport::run_distributed;

/// Where the training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        num_features: usize,
        num_classes: usize,
        class_separation: f64,
        #[serde(default = "default_test_examples")]
        test_examples: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        num_classes: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_examples() -> usize {
    2000
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_decay() -> f64 {
    2.0 / 3.0
}

/// How the pool is divided across learners.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Uniform,
    Powerlaw {
        #[serde(default = "default_decay")]
        decay: f64,
    },
    Explicit {
        counts: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineFlags {
    #[serde(default)]
    pub no_corruption: bool,
    #[serde(default)]
    pub exclusion: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    pub endpoints: Vec<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

/// The whole experiment: data, partition, attack, schemes, baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    #[serde(default = "AttackPlan::none")]
    pub attack: AttackPlan,
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub baselines: BaselineFlags,
    pub federation: FederationConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub transport: Option<TransportSpec>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("schemes must be nonempty".into()));
        }
        self.federation.validate()?;
        if let Some(t) = &self.transport {
            if self.schemes.len() != 1 {
                return Err(Error::Config(
                    "distributed mode runs exactly one scheme per experiment".into(),
                ));
            }
            if t.endpoints.len() != self.federation.n_learners {
                return Err(Error::Config(format!(
                    "{} endpoints for {} learners",
                    t.endpoints.len(),
                    self.federation.n_learners
                )));
            }
        }
        Ok(())
    }
}

/// Every seed needed to replay the run exactly. All derive from the
/// federation master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedManifest {
    pub master_seed: u64,
    pub data_seed: u64,
    pub partition_seed: u64,
    pub split_seed_base: u64,
    pub attack_seed: u64,
}

impl SeedManifest {
    fn from_master(master: u64) -> Self {
        Self {
            master_seed: master,
            data_seed: derive_seed(master, 1, 0),
            partition_seed: derive_seed(master, 2, 0),
            split_seed_base: derive_seed(master, 3, 0),
            attack_seed: derive_seed(master, 4, 0),
        }
    }
}

/// The shared data pipeline output: identical for every scheme in one
/// experiment, so outcome differences are attributable to aggregation alone.
pub struct PreparedData {
    pub seeds: SeedManifest,
    pub test_set: LabeledDataset,
    /// Shards before the attack, train/validation split applied.
    pub clean_shards: Vec<LearnerShard>,
    /// Shards after the attack.
    pub attacked_shards: Vec<LearnerShard>,
    pub corruption: CorruptionStats,
}

fn merge_validation(shards: &[LearnerShard]) -> Result<Vec<LearnerShard>> {
    shards
        .iter()
        .map(|s| {
            let train = match &s.validation {
                Some(v) if !v.is_empty() => LabeledDataset::concat(&[&s.train, v])?,
                _ => s.train.clone(),
            };
            Ok(LearnerShard { learner_id: s.learner_id, train, validation: None })
        })
        .collect()
}

/// Shards as a given scheme sees them: FedAvg trains with all available
/// examples (no validation holdout), performance weighting keeps the split.
pub fn shards_for_scheme(scheme: Scheme, attacked: &[LearnerShard]) -> Result<Vec<LearnerShard>> {
    if scheme.is_performance_weighted() {
        Ok(attacked.to_vec())
    } else {
        merge_validation(attacked)
    }
}

/// Build, partition, split, and poison the data.
pub fn prepare(spec: &ExperimentSpec) -> Result<PreparedData> {
    let seeds = SeedManifest::from_master(spec.federation.master_seed);

    let (pool, test_set) = match &spec.dataset {
        DatasetSpec::Synthetic {
            n,
            num_features,
            num_classes,
            class_separation,
            test_examples,
        } => {
            let total = n + test_examples;
            let data = generate_synthetic(
                total,
                *num_features,
                *num_classes,
                *class_separation,
                seeds.data_seed,
            )?;
            let fraction = *test_examples as f64 / total as f64;
            let (pool, test) =
                stratified_split(&data, fraction, derive_seed(seeds.data_seed, 5, 0))?;
            (pool, test)
        }
        DatasetSpec::Csv { path, label_column, num_classes, test_fraction } => {
            let data = load_csv(
                path,
                &CsvSchema { label_column: label_column.clone(), num_classes: *num_classes },
            )?;
            let (pool, test) =
                stratified_split(&data, *test_fraction, derive_seed(seeds.data_seed, 5, 0))?;
            (pool, test)
        }
    };

    let n_learners = spec.federation.n_learners;
    let parts = match &spec.partition {
        PartitionSpec::Uniform => partition_uniform(&pool, n_learners, seeds.partition_seed)?,
        PartitionSpec::Powerlaw { decay } => {
            partition_powerlaw(&pool, n_learners, *decay, None, seeds.partition_seed)?
        }
        PartitionSpec::Explicit { counts } => {
            let plan = PartitionPlan { counts: counts.clone() };
            partition_powerlaw(&pool, n_learners, 0.5, Some(&plan), seeds.partition_seed)?
        }
    };

    let clean_shards: Vec<LearnerShard> = parts
        .into_iter()
        .enumerate()
        .map(|(id, d)| {
            let (train, validation) = stratified_split(
                &d,
                spec.federation.validation_fraction,
                derive_seed(seeds.split_seed_base, id as u64, 0),
            )?;
            Ok(LearnerShard { learner_id: id, train, validation: Some(validation) })
        })
        .collect::<Result<_>>()?;

    let mut attack = spec.attack.clone();
    if attack.seed == 0 {
        attack.seed = seeds.attack_seed;
    }
    let corruption = corruption_report(&attack, &clean_shards)?;
    let attacked_shards = apply_plan(&attack, &clean_shards)?;

    Ok(PreparedData { seeds, test_set, clean_shards, attacked_shards, corruption })
}

/// One labelled federation run inside a bundle. `learner_ids` carry the
/// original ids (the exclusion baseline drops some).
pub struct LabelledRun {
    pub label: String,
    pub learner_ids: Vec<usize>,
    pub records: Vec<RoundRecord>,
}

pub struct ResultBundle {
    pub runs: Vec<LabelledRun>,
    pub corruption: CorruptionStats,
    pub seeds: SeedManifest,
    pub num_classes: usize,
    pub elapsed: Duration,
}

/// Run every scheme and baseline on the shared prepared data.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultBundle> {
    spec.validate()?;
    let started = Instant::now();
    let prepared = prepare(spec)?;
    let mut runs = Vec::new();

    for &scheme in &spec.schemes {
        let shards = shards_for_scheme(scheme, &prepared.attacked_shards)?;
        let config = FederationConfig { scheme, ..spec.federation.clone() };
        let records = match &spec.transport {
            Some(t) => run_distributed(
                &config,
                &shards,
                &prepared.test_set,
                &t.endpoints,
                Duration::from_secs(t.timeout_secs),
            )?,
            None => run_federation(&config, &shards, &prepared.test_set)?,
        };
        runs.push(LabelledRun {
            label: scheme.label().to_string(),
            learner_ids: (0..spec.federation.n_learners).collect(),
            records,
        });
    }

    if spec.baselines.no_corruption {
        let shards = merge_validation(&prepared.clean_shards)?;
        let config = FederationConfig { scheme: Scheme::Fedavg, ..spec.federation.clone() };
        let records = run_federation(&config, &shards, &prepared.test_set)?;
        runs.push(LabelledRun {
            label: "fedavg_no_corruption".to_string(),
            learner_ids: (0..spec.federation.n_learners).collect(),
            records,
        });
    }

    if spec.baselines.exclusion {
        if spec.attack.corrupted_learner_ids.is_empty() {
            return Err(Error::Config(
                "exclusion baseline needs a nonempty set of corrupted learners".into(),
            ));
        }
        let config = FederationConfig {
            scheme: Scheme::Fedavg,
            exclusion_ids: spec.attack.corrupted_learner_ids.clone(),
            ..spec.federation.clone()
        };
        let (kept_ids, records) =
            run_exclusion_baseline(&config, &prepared.attacked_shards, &prepared.test_set)?;
        runs.push(LabelledRun {
            label: "fedavg_exclusion".to_string(),
            learner_ids: kept_ids,
            records,
        });
    }

    Ok(ResultBundle {
        runs,
        corruption: prepared.corruption,
        seeds: prepared.seeds,
        num_classes: prepared.test_set.num_classes(),
        elapsed: started.elapsed(),
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a ExperimentSpec,
    seeds: &'a SeedManifest,
    corruption: &'a CorruptionStats,
    runs: Vec<&'a str>,
    wall_clock_ms: u128,
}

/// Write `rounds.csv`, `weights.csv`, `per_class.csv`, and `manifest.json`
/// into `out_dir`. The CSVs are byte-deterministic for a fixed spec; the
/// manifest carries the wall clock and is not.
pub fn write_bundle(spec: &ExperimentSpec, bundle: &ResultBundle, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;

    let mut rounds = csv::Writer::from_path(out_dir.join("rounds.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    rounds
        .write_record(["round", "scheme", "test_accuracy"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for run in &bundle.runs {
        for r in &run.records {
            rounds
                .write_record([
                    r.round.to_string(),
                    run.label.clone(),
                    r.community_test_accuracy.to_string(),
                ])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    rounds.flush()?;

    let mut weights = csv::Writer::from_path(out_dir.join("weights.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    weights
        .write_record(["round", "scheme", "learner", "raw_score", "normalized_weight"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for run in &bundle.runs {
        for r in &run.records {
            for (slot, &id) in run.learner_ids.iter().enumerate() {
                weights
                    .write_record([
                        r.round.to_string(),
                        run.label.clone(),
                        format!("L{}", id + 1),
                        r.per_learner_scores[slot].to_string(),
                        r.per_learner_weights[slot].to_string(),
                    ])
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            }
        }
    }
    weights.flush()?;

    let mut per_class = csv::Writer::from_path(out_dir.join("per_class.csv"))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["scheme".to_string(), "model".to_string()];
    header.extend((0..bundle.num_classes).map(|c| format!("class_{c}")));
    per_class.write_record(&header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for run in &bundle.runs {
        let last = match run.records.last() {
            Some(r) => r,
            None => continue,
        };
        let mut row = vec![run.label.clone(), "community".to_string()];
        row.extend(last.community_per_class.iter().map(|a| a.to_string()));
        per_class.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (slot, &id) in run.learner_ids.iter().enumerate() {
            let mut row = vec![run.label.clone(), format!("L{}", id + 1)];
            row.extend(last.per_learner_per_class[slot].iter().map(|a| a.to_string()));
            per_class.write_record(&row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    per_class.flush()?;

    let manifest = Manifest {
        spec,
        seeds: &bundle.seeds,
        corruption: &bundle.corruption,
        runs: bundle.runs.iter().map(|r| r.label.as_str()).collect(),
        wall_clock_ms: bundle.elapsed.as_millis(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

/// Run one experiment per corruption count, corrupting the lowest learner
/// ids first, and write each bundle to `output_dir/corrupted_<m>/`.
pub fn sweep(spec: &ExperimentSpec, corrupted_counts: &[usize]) -> Result<Vec<ResultBundle>> {
    if corrupted_counts.iter().any(|&m| m > spec.federation.n_learners) {
        return Err(Error::Config("corrupted count exceeds the number of learners".into()));
    }
    let mut bundles = Vec::with_capacity(corrupted_counts.len());
    for &m in corrupted_counts {
        let mut item = spec.clone();
        item.attack.corrupted_learner_ids = (0..m).collect();
        if m == 0 {
            item.attack.kind = AttackKind::None;
            item.baselines.exclusion = false;
        }
        item.output_dir = spec.output_dir.join(format!("corrupted_{m}"));
        let bundle = run_experiment(&item)?;
        write_bundle(&item, &bundle, &item.output_dir)?;
        bundles.push(bundle);
    }
    Ok(bundles)
}
