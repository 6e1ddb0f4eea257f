//! Cross-population protocol: stratified splits, per-regime training and the
//! accuracy matrix.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lcpred_core::features::Sample;
use lcpred_core::{Label, Normalizer};
use lcpred_model::train::EpochRecord;
use lcpred_model::{evaluate, train, ModelConfig, ModelParams, TrainConfig};

use crate::config::ExperimentPlan;
use crate::ExperimentError;

pub const JOINT: &str = "joint";

/// SplitMix64 finalizer over `a` and `b`; decorrelates derived seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stratified partition: per class, a seeded shuffle puts
/// `floor(n * fraction)` samples in the first part and the rest in the second.
/// Both parts keep input order.
pub fn stratified_partition<T: Clone>(
    samples: &[Sample<T>],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>), ExperimentError> {
    let mut first = vec![false; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let k = (n as f64 * fraction).floor() as usize;
        if k == 0 || k == n {
            let tag = samples[idx[0]].dataset_tag.clone();
            return Err(ExperimentError::InsufficientClass { population: tag, label, available: n, fraction });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            first[i] = true;
        }
    }
    let (a, b): (Vec<_>, Vec<_>) = samples.iter().zip(&first).partition(|(_, f)| **f);
    Ok((a.into_iter().map(|(s, _)| s.clone()).collect(), b.into_iter().map(|(s, _)| s.clone()).collect()))
}

/// Train/test split of one population's balanced set.
pub fn make_splits<T: Clone>(
    samples: &[Sample<T>],
    split_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>), ExperimentError> {
    stratified_partition(samples, split_fraction, seed)
}

/// Regime names: one per population, then the joint regime when enabled and
/// more than one population exists.
pub fn regimes(populations: &[String], joint: bool) -> Vec<String> {
    let mut out: Vec<String> = populations.to_vec();
    if joint && populations.len() > 1 {
        out.push(JOINT.to_string());
    }
    out
}

pub fn regime_populations<'a>(regime: &'a str, populations: &'a [String]) -> Vec<&'a str> {
    if regime == JOINT {
        populations.iter().map(String::as_str).collect()
    } else {
        vec![regime]
    }
}

/// Hex SHA-256 over the sorted sample ids, one per line.
pub fn id_digest<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let sorted: BTreeSet<&String> = ids.into_iter().collect();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Which samples each phase touched, as digests, and whether any test id leaked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseAudit {
    pub normalizer_ids: String,
    pub train_ids: String,
    pub validation_ids: String,
    pub test_ids: BTreeMap<String, String>,
    pub normalizer_count: usize,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_counts: BTreeMap<String, usize>,
    /// No test id appears among normalizer, training or validation ids.
    pub disjoint: bool,
}

/// The data of one (regime, seed) run after splitting.
pub struct RunData<T> {
    pub regime: String,
    pub seed: u64,
    pub train: Vec<Sample<T>>,
    pub validation: Vec<Sample<T>>,
    pub tests: BTreeMap<String, Vec<Sample<T>>>,
}

/// Splits every population with `seed`, assembles each regime's training
/// data (the joint regime takes the union of the per-population training
/// parts) and carves a stratified validation part out of it.
pub fn prepare_runs<T: Clone>(
    populations: &BTreeMap<String, Vec<Sample<T>>>,
    plan: &ExperimentPlan,
    base_seed: u64,
    seed: u64,
) -> Result<Vec<RunData<T>>, ExperimentError> {
    let tags: Vec<String> = populations.keys().cloned().collect();
    let split_seed = mix_seed(base_seed, seed);
    let mut trains = BTreeMap::new();
    let mut tests = BTreeMap::new();
    for (tag, samples) in populations {
        let (tr, te) = make_splits(samples, plan.split_fraction, split_seed)?;
        trains.insert(tag.clone(), tr);
        tests.insert(tag.clone(), te);
    }
    regimes(&tags, plan.joint)
        .into_iter()
        .map(|regime| {
            let pool: Vec<Sample<T>> = regime_populations(&regime, &tags)
                .into_iter()
                .flat_map(|p| trains[p].iter().cloned())
                .collect();
            let (fit, val) = stratified_partition(&pool, 1.0 - plan.validation_fraction, mix_seed(split_seed, 1))?;
            Ok(RunData { regime, seed, train: fit, validation: val, tests: tests.clone() })
        })
        .collect()
}

impl<T: lcpred_core::Scalar> RunData<T> {
    /// Normalizer over the run's training data: the training and validation parts.
    pub fn fit_normalizer(&self) -> Result<Normalizer, ExperimentError> {
        let pool: Vec<Sample<T>> = self.train.iter().chain(&self.validation).cloned().collect();
        Normalizer::fit(&pool).map_err(|e| ExperimentError::Data { stage: "train", message: e.to_string() })
    }

    pub fn audit(&self) -> PhaseAudit {
        let ids = |s: &[Sample<T>]| s.iter().map(Sample::id).collect::<Vec<_>>();
        let train = ids(&self.train);
        let val = ids(&self.validation);
        let normalizer: Vec<String> = train.iter().chain(&val).cloned().collect();
        let seen: BTreeSet<&String> = normalizer.iter().collect();
        let mut disjoint = true;
        let mut test_ids = BTreeMap::new();
        let mut test_counts = BTreeMap::new();
        for (tag, set) in &self.tests {
            let t = ids(set);
            disjoint &= t.iter().all(|id| !seen.contains(id));
            test_ids.insert(tag.clone(), id_digest(&t));
            test_counts.insert(tag.clone(), t.len());
        }
        PhaseAudit {
            normalizer_ids: id_digest(&normalizer),
            train_ids: id_digest(&train),
            validation_ids: id_digest(&val),
            test_ids,
            normalizer_count: normalizer.len(),
            train_count: train.len(),
            validation_count: val.len(),
            test_counts,
            disjoint,
        }
    }
}

/// FNV-1a of a tag, for deriving per-tag seeds.
pub fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Seeds for model initialization and training of one run.
pub fn run_seeds(base_seed: u64, regime: &str, seed: u64) -> (u64, u64) {
    let s = mix_seed(mix_seed(base_seed, seed), tag_hash(regime));
    (s, mix_seed(s, 2))
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub regime: String,
    pub seed: u64,
    pub params: ModelParams<f32>,
    pub normalizer: Normalizer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub audit: PhaseAudit,
}

/// Normalizes, initializes and trains one run. Fails if the audit finds a
/// test id among the fitting phases.
pub fn train_run(data: &RunData<f32>, model: &ModelConfig, train_cfg: &TrainConfig, base_seed: u64) -> Result<TrainedRun, ExperimentError> {
    let audit = data.audit();
    if !audit.disjoint {
        return Err(ExperimentError::Data {
            stage: "train",
            message: format!("regime {} seed {}: test samples leaked into training", data.regime, data.seed),
        });
    }
    let normalizer = data.fit_normalizer()?;
    let train_set: Vec<Sample<f32>> = data.train.iter().map(|s| normalizer.apply(s)).collect();
    let val_set: Vec<Sample<f32>> = data.validation.iter().map(|s| normalizer.apply(s)).collect();
    let (init_seed, train_seed) = run_seeds(base_seed, &data.regime, data.seed);
    let init = ModelParams::<f32>::init(&ModelConfig { seed: init_seed, ..model.clone() })?;
    let out = train(init, &train_set, &val_set, &TrainConfig { seed: train_seed, ..train_cfg.clone() })?;
    if !out.params.is_finite() {
        return Err(ExperimentError::Data { stage: "train", message: format!("regime {} seed {}: non-finite parameters", data.regime, data.seed) });
    }
    log::info!(
        "regime {} seed {}: best epoch {} of {}, val accuracy {:.4}",
        data.regime,
        data.seed,
        out.best_epoch,
        out.history.len(),
        out.history.get(out.best_epoch.saturating_sub(1)).map_or(0.0, |h| h.val_accuracy)
    );
    Ok(TrainedRun {
        regime: data.regime.clone(),
        seed: data.seed,
        params: out.params,
        normalizer,
        history: out.history,
        best_epoch: out.best_epoch,
        audit,
    })
}

/// Per-sample outcome on one test population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub regime: String,
    pub population: String,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: [[usize; 3]; 3],
    pub predictions: Vec<Prediction>,
}

pub fn evaluate_run(
    params: &ModelParams<f32>,
    normalizer: &Normalizer,
    regime: &str,
    seed: u64,
    population: &str,
    test: &[Sample<f32>],
    batch_size: usize,
) -> Result<CellResult, ExperimentError> {
    let normalized: Vec<Sample<f32>> = test.iter().map(|s| normalizer.apply(s)).collect();
    let eval = evaluate(params, &normalized, batch_size)?;
    let predictions = test
        .iter()
        .zip(eval.predictions.iter().zip(&eval.probabilities))
        .map(|(s, (&p, probs))| Prediction { sample_id: s.id(), label: s.label.index(), predicted: p, probabilities: *probs })
        .collect();
    Ok(CellResult {
        regime: regime.to_string(),
        population: population.to_string(),
        seed,
        accuracy: eval.accuracy,
        loss: eval.loss,
        confusion: eval.confusion,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
    /// Summed over seeds, `[true][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

/// Rows are training regimes, columns test populations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub regimes: Vec<String>,
    pub populations: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Vec<MatrixCell>>,
}

impl AccuracyMatrix {
    /// Aggregates cell results; every (regime, population, seed) must be present once.
    pub fn from_results(regimes: &[String], populations: &[String], seeds: &[u64], results: &[CellResult]) -> Result<Self, ExperimentError> {
        let mut by_key: BTreeMap<(&str, &str, u64), &CellResult> = BTreeMap::new();
        for r in results {
            if by_key.insert((&r.regime, &r.population, r.seed), r).is_some() {
                return Err(ExperimentError::Data { stage: "report", message: format!("duplicate result {} {} {}", r.regime, r.population, r.seed) });
            }
        }
        let cells = regimes
            .iter()
            .map(|reg| {
                populations
                    .iter()
                    .map(|pop| {
                        let mut per_seed = Vec::new();
                        let mut confusion = [[0usize; 3]; 3];
                        for &s in seeds {
                            let r = by_key.get(&(reg.as_str(), pop.as_str(), s)).ok_or_else(|| ExperimentError::Data {
                                stage: "report",
                                message: format!("missing result for regime {reg}, population {pop}, seed {s}"),
                            })?;
                            per_seed.push(r.accuracy);
                            for (acc, row) in confusion.iter_mut().zip(&r.confusion) {
                                for (a, v) in acc.iter_mut().zip(row) {
                                    *a += v;
                                }
                            }
                        }
                        Ok(cell_stats(per_seed, confusion))
                    })
                    .collect::<Result<Vec<_>, ExperimentError>>()
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(Self { regimes: regimes.to_vec(), populations: populations.to_vec(), seeds: seeds.to_vec(), cells })
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty() || self.populations.is_empty()
    }

    pub fn cell(&self, regime: &str, population: &str) -> Option<&MatrixCell> {
        let r = self.regimes.iter().position(|x| x == regime)?;
        let p = self.populations.iter().position(|x| x == population)?;
        Some(&self.cells[r][p])
    }
}

fn cell_stats(per_seed: Vec<f64>, confusion: [[usize; 3]; 3]) -> MatrixCell {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let std = if per_seed.len() > 1 {
        (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MatrixCell { mean, std, per_seed, confusion }
}

/// Everything produced by [`run_protocol`].
pub struct ProtocolOutput {
    pub matrix: AccuracyMatrix,
    pub runs: Vec<TrainedRun>,
    pub results: Vec<CellResult>,
}

/// Trains every regime for every seed (runs in parallel) and evaluates each
/// on every population's test part.
pub fn run_protocol(
    populations: &BTreeMap<String, Vec<Sample<f32>>>,
    plan: &ExperimentPlan,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    base_seed: u64,
) -> Result<ProtocolOutput, ExperimentError> {
    let tags: Vec<String> = populations.keys().cloned().collect();
    let mut data = Vec::new();
    for &seed in &plan.seeds {
        data.extend(prepare_runs(populations, plan, base_seed, seed)?);
    }
    let runs: Vec<TrainedRun> = data.par_iter().map(|d| train_run(d, model, train_cfg, base_seed)).collect::<Result<_, _>>()?;
    let mut results = Vec::new();
    for (d, run) in data.iter().zip(&runs) {
        for (pop, test) in &d.tests {
            results.push(evaluate_run(&run.params, &run.normalizer, &run.regime, run.seed, pop, test, plan.eval_batch_size)?);
        }
    }
    let matrix = AccuracyMatrix::from_results(&regimes(&tags, plan.joint), &tags, &plan.seeds, &results)?;
    Ok(ProtocolOutput { matrix, runs, results })
}
