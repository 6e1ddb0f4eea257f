//! Adam training with seeded shuffling, early stopping and best-validation retention.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lcpred_core::features::Sample;

use crate::tape::Float;
use crate::transformer::{batch_matrix, logits, loss_and_grads, predict_row, ModelError, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 64, max_epochs: 100, patience: 15, stop_at_accuracy: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("lr must be non-negative and batch_size at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<F> {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ModelParams<F>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub probabilities: Vec<[f64; 3]>,
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

pub struct Adam<F> {
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    step: i32,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros = || params.tensors.iter().map(|t| Array2::zeros(t.value.dim())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &[Array2<F>], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let c1 = F::one() - F::lit(cfg.beta1.powi(self.step));
        let c2 = F::one() - F::lit(cfg.beta2.powi(self.step));
        let (lr, eps) = (F::lit(cfg.lr), F::lit(cfg.eps));
        for (i, t) in params.tensors.iter_mut().enumerate() {
            ndarray::Zip::from(&mut t.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Eval-mode predictions, loss and confusion over `samples`.
pub fn evaluate<F: Float>(params: &ModelParams<F>, samples: &[Sample<F>], batch_size: usize) -> Result<Evaluation, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut probabilities = Vec::with_capacity(samples.len());
    let mut confusion = [[0usize; 3]; 3];
    let mut loss = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<F>> = chunk.iter().collect();
        let l = logits(params, batch_matrix(&refs))?;
        for (row, s) in l.rows().into_iter().zip(chunk) {
            let (class, probs) = predict_row(&row.to_vec());
            let y = s.label.index();
            loss -= probs[y].as_f64().max(f64::MIN_POSITIVE).ln();
            confusion[y][class] += 1;
            predictions.push(class);
            probabilities.push([probs[0].as_f64(), probs[1].as_f64(), probs[2].as_f64()]);
        }
    }
    let correct = (0..3).map(|c| confusion[c][c]).sum::<usize>();
    Ok(Evaluation {
        accuracy: correct as f64 / samples.len() as f64,
        loss: loss / samples.len() as f64,
        predictions,
        probabilities,
        confusion,
    })
}

/// Trains from `init`. Each epoch shuffles the training set with a seeded
/// generator, takes one Adam step per mini-batch and evaluates on `val`.
pub fn train<F: Float>(
    init: ModelParams<F>,
    train_set: &[Sample<F>],
    val_set: &[Sample<F>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<F>> = idx.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
            let (loss, grads) = loss_and_grads(&params, batch_matrix(&batch), &labels, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(ModelError::InvalidConfig(format!("non-finite training loss at epoch {epoch}")));
            }
            total += loss.as_f64() * idx.len() as f64;
            adam.update(&mut params, &grads, cfg);
        }
        let eval = evaluate(&params, val_set, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        };
        log::debug!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy
        );
        history.push(record);
        if eval.accuracy > best.0 {
            best = (eval.accuracy, epoch, params.clone());
            if cfg.stop_at_accuracy.is_some_and(|t| eval.accuracy >= t) {
                break;
            }
        } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { params: best.2, history, best_epoch: best.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use lcpred_core::features::{Provenance, N_STEPS};
    use lcpred_core::segment::Label;
    use rand::Rng;

    fn data(n: usize) -> Vec<Sample<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|k| {
                let label = Label::from_index(k % 3).unwrap();
                Sample {
                    rows: (0..N_STEPS)
                        .map(|_| std::array::from_fn(|c| rng.random_range(-1.0..1.0) + if c == 2 { label.index() as f32 } else { 0.0 }))
                        .collect(),
                    label,
                    dataset_tag: "t".into(),
                    provenance: Provenance { track_id: k as u32, start_frame: 0, end_frame: 49 },
                }
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let init = ModelParams::<f32>::init(&small()).unwrap();
        let d = data(12);
        let cfg = TrainConfig { lr: 0.0, max_epochs: 3, patience: 0, batch_size: 5, ..Default::default() };
        let out = train(init.clone(), &d, &d, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let d = data(24);
        let cfg = TrainConfig { max_epochs: 4, batch_size: 8, seed: 3, ..Default::default() };
        let run = || train(ModelParams::<f32>::init(&small()).unwrap(), &d, &d, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn learns_an_easy_signal() {
        let d = data(60);
        let cfg = TrainConfig { max_epochs: 30, batch_size: 16, lr: 3e-3, ..Default::default() };
        let out = train(ModelParams::<f32>::init(&small()).unwrap(), &d, &d, &cfg).unwrap();
        assert!(out.history[out.best_epoch - 1].val_accuracy > 0.9);
        let eval = evaluate(&out.params, &d, 7).unwrap();
        assert_eq!(eval.confusion.iter().flatten().sum::<usize>(), 60);
        let recount = eval.predictions.iter().zip(&d).filter(|(p, s)| **p == s.label.index()).count();
        assert_eq!(recount as f64 / 60.0, eval.accuracy);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let init = ModelParams::<f32>::init(&small()).unwrap();
        assert!(matches!(train(init, &[], &data(3), &TrainConfig::default()), Err(ModelError::EmptySet)));
    }
}
