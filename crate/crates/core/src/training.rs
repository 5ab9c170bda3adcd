//! End-to-end optimization: hybrid MSE/MAE loss, AdamW with decoupled weight
//! decay, global-norm gradient clipping, reduce-on-plateau LR scheduling and
//! deterministic stratified splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::reconstruct::ModelInput;
use crate::util::derive_stream_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("prediction/target length mismatch: {preds} vs {targets}")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("non-finite value in {what}")]
    NonFiniteValue { what: &'static str },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteAbort { epoch: usize, batch: usize },
    #[error("dataset too small: the {which} split would be empty")]
    TooSmall { which: &'static str },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Plateau scheduler knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Multiplier applied to the LR after a plateau.
    pub factor: f64,
    /// Consecutive non-improving epochs before a reduction.
    pub patience: usize,
    /// Minimum absolute improvement of the validation loss.
    pub min_improve: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            min_improve: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hybrid loss weight: λ·MSE + (1−λ)·MAE.
    pub lambda: f64,
    /// Initial learning rate η₀.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global L2 clipping threshold.
    pub clip_max_norm: f64,
    pub scheduler: SchedulerConfig,
    /// train/val/test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 100,
            clip_max_norm: 1.0,
            scheduler: SchedulerConfig::default(),
            split_ratios: [0.70, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::LambdaOutOfRange(self.lambda));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::BadRatios(self.split_ratios));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 || self.clip_max_norm <= 0.0 {
            return Err(TrainError::NonFiniteValue {
                what: "train config",
            });
        }
        Ok(())
    }
}

/// L = λ·(1/n)·Σ(ŷ−y)² + (1−λ)·(1/n)·Σ|ŷ−y|.
pub fn hybrid_loss(predictions: &[f64], targets: &[f64], lambda: f64) -> Result<f64, TrainError> {
    if predictions.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if predictions.len() != targets.len() {
        return Err(TrainError::LengthMismatch {
            preds: predictions.len(),
            targets: targets.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::LambdaOutOfRange(lambda));
    }
    let n = predictions.len() as f64;
    let (mut sq, mut abs) = (0.0f64, 0.0f64);
    for (&p, &t) in predictions.iter().zip(targets.iter()) {
        let r = p - t;
        sq += r * r;
        abs += r.abs();
    }
    Ok(lambda * sq / n + (1.0 - lambda) * abs / n)
}

/// Scale gradients so the global L2 norm does not exceed `max_norm`.
///
/// Returns the pre-clipping norm.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> Result<f64, TrainError> {
    let norm_sq: f64 = grads.iter().map(|g| g * g).sum();
    if !norm_sq.is_finite() {
        return Err(TrainError::NonFiniteValue { what: "gradients" });
    }
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    Ok(norm)
}

/// AdamW moment accumulators; shapes mirror the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Step counter t (bias correction).
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g         v ← β₂·v + (1−β₂)·g²
/// p ← p − lr·( m̂/(√v̂ + ε) + wd·p )
/// ```
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::LengthMismatch {
            preds: params.len(),
            targets: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(TrainError::NonFiniteValue { what: "gradients" });
        }
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + weight_decay * params[i]);
    }
    Ok(())
}

/// Reduce-on-plateau state machine.
///
/// An epoch improves when its validation loss is below (best − ε). After
/// `patience` consecutive non-improving epochs the LR is multiplied by
/// `factor` and the stagnation counter resets; the best loss is retained
/// across reductions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub lr: f64,
    pub best_val_loss: f64,
    pub stagnant_epochs: usize,
}

impl SchedulerState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            lr: initial_lr,
            best_val_loss: f64::INFINITY,
            stagnant_epochs: 0,
        }
    }
}

pub fn scheduler_step(state: &mut SchedulerState, val_loss: f64, cfg: &SchedulerConfig) {
    if val_loss < state.best_val_loss - cfg.min_improve {
        state.best_val_loss = val_loss;
        state.stagnant_epochs = 0;
    } else {
        state.stagnant_epochs += 1;
        if state.stagnant_epochs >= cfg.patience {
            state.lr *= cfg.factor;
            state.stagnant_epochs = 0;
        }
    }
}

/// Index sets of a deterministic stratified split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic stratified split over depth labels.
///
/// Global sizes are ⌊r_train·n⌋ and ⌊r_val·n⌋ with the remainder assigned to
/// test. Per-class counts follow the same floors, with the global shortfall
/// distributed by largest fractional remainder (ties broken by class order),
/// so every class appears in every split when sizes allow.
pub fn split_dataset(
    labels: &[f64],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitIndices, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadRatios(ratios));
    }
    let n = labels.len();
    let n_train = (ratios[0] * n as f64).floor() as usize;
    let n_val = (ratios[1] * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 {
        return Err(TrainError::TooSmall { which: "train" });
    }
    if n_val == 0 {
        return Err(TrainError::TooSmall { which: "val" });
    }
    if n_test == 0 {
        return Err(TrainError::TooSmall { which: "test" });
    }

    // Classes ordered by ascending label value.
    let mut class_labels: Vec<f64> = Vec::new();
    for &l in labels {
        if !class_labels.contains(&l) {
            class_labels.push(l);
        }
    }
    class_labels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        let c = class_labels.iter().position(|&x| x == l).unwrap();
        members[c].push(i);
    }

    // Per-class shuffle from one seeded stream, classes in fixed order.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, 0x5917, 0));
    for m in members.iter_mut() {
        // Fisher–Yates.
        for i in (1..m.len()).rev() {
            let j = rng.random_range(0..=i);
            m.swap(i, j);
        }
    }

    // Largest-remainder allocation of a global quota across classes.
    let allocate = |quota: usize, avail: &[usize], ratio: f64| -> Vec<usize> {
        let mut counts: Vec<usize> = avail
            .iter()
            .map(|&a| ((ratio * a as f64).floor() as usize).min(a))
            .collect();
        let mut fracs: Vec<(usize, f64)> = avail
            .iter()
            .enumerate()
            .map(|(c, &a)| (c, ratio * a as f64 - (ratio * a as f64).floor()))
            .collect();
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut assigned: usize = counts.iter().sum();
        let mut cursor = 0;
        while assigned < quota {
            let (c, _) = fracs[cursor % fracs.len()];
            if counts[c] < avail[c] {
                counts[c] += 1;
                assigned += 1;
            }
            cursor += 1;
            if cursor > fracs.len() * (quota + 1) {
                break; // avail exhausted; cannot happen with valid ratios
            }
        }
        while assigned > quota {
            let (c, _) = fracs[cursor % fracs.len()];
            if counts[c] > 0 {
                counts[c] -= 1;
                assigned -= 1;
            }
            cursor += 1;
        }
        counts
    };

    let class_sizes: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let train_counts = allocate(n_train, &class_sizes, ratios[0]);
    let after_train: Vec<usize> = class_sizes
        .iter()
        .zip(train_counts.iter())
        .map(|(&a, &t)| a - t)
        .collect();
    let val_counts = allocate(n_val, &after_train, ratios[1] / (ratios[1] + ratios[2]));
    let test_counts: Vec<usize> = class_sizes
        .iter()
        .zip(train_counts.iter().zip(val_counts.iter()))
        .map(|(&a, (&t, &v))| a - t - v)
        .collect();
    let mut counts = [train_counts, val_counts, test_counts];
    ensure_class_coverage(&mut counts, &class_sizes);

    let mut split = SplitIndices {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::with_capacity(n_test),
    };
    for (c, m) in members.iter().enumerate() {
        let t = counts[0][c];
        let v = counts[1][c];
        split.train.extend_from_slice(&m[..t]);
        split.val.extend_from_slice(&m[t..t + v]);
        split.test.extend_from_slice(&m[t + v..]);
    }
    debug_assert_eq!(split.train.len(), n_train);
    debug_assert_eq!(split.val.len(), n_val);
    debug_assert_eq!(split.test.len(), n_test);
    Ok(split)
}

/// Repair classes that ended up absent from one split: move a member into
/// the empty slot from the class's best-populated split, compensating
/// through a donor class so the global split sizes stay exact. Classes with
/// fewer than three members cannot cover all three splits and are left as
/// allocated.
fn ensure_class_coverage(counts: &mut [Vec<usize>; 3], class_sizes: &[usize]) {
    let n_classes = class_sizes.len();
    for c in 0..n_classes {
        if class_sizes[c] < 3 {
            continue;
        }
        for kind in 0..3 {
            if counts[kind][c] > 0 {
                continue;
            }
            // Take one from this class's fullest split (keeping it ≥ 1).
            let source = (0..3)
                .filter(|&s| s != kind)
                .max_by_key(|&s| counts[s][c])
                .unwrap();
            if counts[source][c] < 2 {
                continue;
            }
            // Donor: another class that can spare one of `kind` and absorb
            // one of `source`.
            let donor = (0..n_classes)
                .filter(|&d| d != c && counts[kind][d] >= 2)
                .max_by_key(|&d| counts[kind][d]);
            let Some(d) = donor else { continue };
            counts[source][c] -= 1;
            counts[kind][c] += 1;
            counts[kind][d] -= 1;
            counts[source][d] += 1;
        }
    }
}

/// One supervised example.
///
/// Labels are in mm: the regressor works in the unit the depth tables are
/// reported in, which also keeps the hybrid loss terms on comparable
/// scales. Simulator labels (m) are converted when samples are assembled.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ModelInput,
    /// Defect depth, mm.
    pub label: f64,
}

/// Per-epoch record of the training run (the loss-curve artifact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub type LossHistory = Vec<EpochRecord>;

/// Render the loss history as `epoch,train_loss,val_loss,lr` CSV.
pub fn loss_history_csv(history: &LossHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best_params: ModelParams,
    /// Parameters after the final epoch.
    pub final_params: ModelParams,
    pub history: LossHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub split: SplitIndices,
}

fn eval_loss(
    params: &ModelParams,
    samples: &[TrainSample],
    indices: &[usize],
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        preds.push(model::predict(params, &samples[i].input)?);
        targets.push(samples[i].label);
    }
    hybrid_loss(&preds, &targets, lambda)
}

/// Full training loop: stratified split, AdamW over shuffled minibatches,
/// gradient clipping, plateau scheduling, best-validation checkpointing.
///
/// Deterministic: identical (config, dataset) pairs produce identical
/// histories and parameters.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[TrainSample],
) -> Result<TrainOutcome, TrainError> {
    train_observed(model_cfg, cfg, samples, |_| {})
}

/// [`train`] with a per-epoch observer (progress reporting; the observer
/// cannot influence the run).
pub fn train_observed(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[TrainSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let split = split_dataset(&labels, cfg.split_ratios, cfg.seed)?;

    let label_mean =
        split.train.iter().map(|&i| samples[i].label).sum::<f64>() / split.train.len() as f64;
    let mut params = model::init_params(model_cfg, derive_stream_seed(cfg.seed, 1, 0), Some(label_mean))?;
    let mut flat = params.flatten();
    let mut opt = OptimizerState::new(flat.len());
    let mut sched = SchedulerState::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(cfg.seed, 2, 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(cfg.seed, 3, 0));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut order: Vec<usize> = split.train.clone();

    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr_used = sched.lr;
        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&ModelInput, f64)> = chunk
                .iter()
                .map(|&i| (&samples[i].input, samples[i].label))
                .collect();
            let (loss, grads, _masks) = model::gradients(&params, &batch, cfg.lambda, &mut dropout_rng)
                .map_err(|e| match e {
                    ModelError::NonFinite { .. } => TrainError::NonFiniteAbort {
                        epoch,
                        batch: batch_idx,
                    },
                    other => TrainError::Model(other),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteAbort {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss * chunk.len() as f64;

            let mut g = grads.flatten();
            let abort = |_| TrainError::NonFiniteAbort {
                epoch,
                batch: batch_idx,
            };
            clip_gradients(&mut g, cfg.clip_max_norm).map_err(abort)?;
            adamw_step(&mut flat, &g, &mut opt, lr_used, cfg.weight_decay).map_err(abort)?;
            params.assign_from_flat(&flat)?;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = eval_loss(&params, samples, &split.val, cfg.lambda)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteAbort { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
        };
        on_epoch(&record);
        history.push(record);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        scheduler_step(&mut sched, val_loss, &cfg.scheduler);
    }

    Ok(TrainOutcome {
        best_params,
        final_params: params,
        history,
        best_epoch,
        best_val_loss: best_val,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn hybrid_loss_examples() {
        assert_eq!(hybrid_loss(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        let v = hybrid_loss(&[2.0], &[1.0], 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(matches!(
            hybrid_loss(&[], &[], 0.5),
            Err(TrainError::EmptyBatch)
        ));
        assert!(matches!(
            hybrid_loss(&[1.0], &[1.0], 1.5),
            Err(TrainError::LambdaOutOfRange(_))
        ));
    }

    #[test]
    fn hybrid_loss_matches_independent_mse_and_mae() {
        // Independent oracles written directly from the definitions.
        let mse = |p: &[f64], t: &[f64]| -> f64 {
            p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
        };
        let mae = |p: &[f64], t: &[f64]| -> f64 {
            p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
        };
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert!((hybrid_loss(&p, &t, 1.0).unwrap() - mse(&p, &t)).abs() < 1e-12);
            assert!((hybrid_loss(&p, &t, 0.0).unwrap() - mae(&p, &t)).abs() < 1e-12);
            let lambda = rng.random::<f64>();
            let expect = lambda * mse(&p, &t) + (1.0 - lambda) * mae(&p, &t);
            assert!((hybrid_loss(&p, &t, lambda).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_halves_overlong_gradients() {
        let mut g = vec![2.0 / 3f64.sqrt(); 3]; // norm 2
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-12);
        let new_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
        for x in &g {
            assert!((x - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_leaves_short_gradients_alone() {
        let mut g = vec![0.3, 0.4]; // norm 0.5
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g, vec![0.3, 0.4]);

        let mut zero = vec![0.0; 4];
        clip_gradients(&mut zero, 1.0).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));

        let mut bad = vec![f64::NAN];
        assert!(clip_gradients(&mut bad, 1.0).is_err());
    }

    #[test]
    fn clipped_norm_never_exceeds_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(1..64);
            let mut g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            clip_gradients(&mut g, 1.0).unwrap();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-12, "norm {norm}");
        }
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut state = OptimizerState::new(3);
        adamw_step(&mut p, &g, &mut state, 1e-3, 1e-4).unwrap();
        let decay: f64 = 1.0 - 1e-3 * 1e-4;
        assert!((decay - 0.999_999_9).abs() < 1e-12);
        assert_eq!(p, vec![1.0 * decay, -2.0 * decay, 0.5 * decay]);
    }

    #[test]
    fn adamw_first_step_is_signed_unit_step() {
        // wd = 0, constant gradient g: after bias correction at t=1 the
        // update is lr·g/(|g| + ε) ≈ lr·sign(g).
        let mut p = vec![0.7, -0.3];
        let g = vec![0.02, -5.0];
        let mut state = OptimizerState::new(2);
        adamw_step(&mut p, &g, &mut state, 1e-3, 0.0).unwrap();
        for (i, (&orig, &grad)) in [0.7, -0.3].iter().zip(g.iter()).enumerate() {
            let expected = orig - 1e-3 * grad / (grad.abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15, "{} vs {expected}", p[i]);
            let signed = orig - 1e-3 * grad.signum();
            assert!((p[i] - signed).abs() < 1e-9);
        }
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut state = OptimizerState::new(3);
            for step in 0..10 {
                let g: Vec<f64> = (0..3).map(|i| ((step * 3 + i) as f64 * 0.07).sin()).collect();
                adamw_step(&mut p, &g, &mut state, 1e-3, 1e-4).unwrap();
            }
            (p, state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn scheduler_keeps_lr_while_improving() {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(1e-3);
        for loss in [1.0, 0.9, 0.8] {
            scheduler_step(&mut s, loss, &cfg);
        }
        assert_eq!(s.lr, 1e-3);
    }

    #[test]
    fn scheduler_halves_after_five_stagnant_epochs() {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(1e-3);
        scheduler_step(&mut s, 1.0, &cfg);
        assert_eq!(s.lr, 1e-3);
        for i in 0..5 {
            scheduler_step(&mut s, 1.0, &cfg);
            if i < 4 {
                assert_eq!(s.lr, 1e-3, "reduced too early at stagnant epoch {}", i + 1);
            }
        }
        assert_eq!(s.lr, 5e-4);
        assert_eq!(s.stagnant_epochs, 0);
        assert_eq!(s.best_val_loss, 1.0);
    }

    #[test]
    fn scheduler_improvement_resets_the_counter() {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(1e-3);
        scheduler_step(&mut s, 1.0, &cfg);
        scheduler_step(&mut s, 0.99, &cfg); // improvement, counter resets
        for _ in 0..4 {
            scheduler_step(&mut s, 0.99, &cfg);
            assert_eq!(s.lr, 1e-3);
        }
        scheduler_step(&mut s, 0.99, &cfg); // fifth stagnant epoch
        assert_eq!(s.lr, 5e-4);
    }

    fn labels_9x197() -> Vec<f64> {
        let mut labels = Vec::new();
        for d in 0..9 {
            for _ in 0..197 {
                labels.push((240 + 160 * d) as f64 * 1e-6);
            }
        }
        labels
    }

    #[test]
    fn split_1773_gives_expected_sizes_stratified() {
        let labels = labels_9x197();
        let split = split_dataset(&labels, [0.70, 0.15, 0.15], 9).unwrap();
        assert_eq!(split.train.len(), 1241);
        assert_eq!(split.val.len(), 265);
        assert_eq!(split.test.len(), 267);

        // Every depth appears in every split.
        for part in [&split.train, &split.val, &split.test] {
            let mut seen = std::collections::BTreeSet::new();
            for &i in part.iter() {
                seen.insert((labels[i] * 1e9) as i64);
            }
            assert_eq!(seen.len(), 9);
        }

        // No index appears twice.
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1773);
    }

    #[test]
    fn split_20_gives_14_3_3() {
        let labels: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let split = split_dataset(&labels, [0.70, 0.15, 0.15], 3).unwrap();
        assert_eq!(split.train.len(), 14);
        assert_eq!(split.val.len(), 3);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let labels = labels_9x197();
        let a = split_dataset(&labels, [0.70, 0.15, 0.15], 42).unwrap();
        let b = split_dataset(&labels, [0.70, 0.15, 0.15], 42).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&labels, [0.70, 0.15, 0.15], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_covers_every_class_even_for_small_classes() {
        // 9 classes × 5 members: naive floor allocation would leave some
        // classes without test members.
        let mut labels = Vec::new();
        for d in 0..9 {
            for _ in 0..5 {
                labels.push(d as f64);
            }
        }
        let split = split_dataset(&labels, [0.70, 0.15, 0.15], 4).unwrap();
        assert_eq!(split.train.len(), 31);
        assert_eq!(split.val.len(), 6);
        assert_eq!(split.test.len(), 8);
        for part in [&split.val, &split.test] {
            let mut seen: Vec<i64> = part.iter().map(|&i| labels[i] as i64).collect();
            seen.sort_unstable();
            seen.dedup();
            // 6 val slots cannot cover 9 classes; the guarantee is that no
            // class is starved when capacity allows. Test (8 slots) must
            // cover at least 8 distinct classes.
            assert!(seen.len() >= part.len().min(9) - 1, "{seen:?}");
        }
        // With 7 members per class the test split covers all nine.
        let mut labels7 = Vec::new();
        for d in 0..9 {
            for _ in 0..7 {
                labels7.push(d as f64);
            }
        }
        let split7 = split_dataset(&labels7, [0.70, 0.15, 0.15], 4).unwrap();
        let mut test_classes: Vec<i64> = split7.test.iter().map(|&i| labels7[i] as i64).collect();
        test_classes.sort_unstable();
        test_classes.dedup();
        assert_eq!(test_classes.len(), 9);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let labels = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            split_dataset(&labels, [0.70, 0.15, 0.15], 0),
            Err(TrainError::TooSmall { .. })
        ));
    }

    fn toy_samples(n: usize) -> Vec<TrainSample> {
        // Depth encoded directly in the input intensity so the task is
        // learnable by a tiny model in a few epochs. Labels in mm.
        (0..n)
            .map(|i| {
                let depth_mm = (240 + 160 * (i % 9)) as f64 * 1e-3;
                let level = depth_mm / 1.52 * 2.0 - 1.0;
                TrainSample {
                    input: ModelInput {
                        side: 8,
                        values: vec![level; 64],
                    },
                    label: depth_mm,
                }
            })
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            channels: [2, 4, 8],
            se_reduction: 2,
            rrh_hidden: 4,
            dropout: 0.1,
            head: HeadKind::Rrh,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_empty_history() {
        let samples = toy_samples(27);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &samples).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_params, out.final_params);
    }

    #[test]
    fn training_reduces_loss_on_small_dataset() {
        let samples = toy_samples(27);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &samples).unwrap();
        assert_eq!(out.history.len(), 50);
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(27);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let a = train(&tiny_model(), &cfg, &samples).unwrap();
        let b = train(&tiny_model(), &cfg, &samples).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn lr_sequence_is_power_of_factor_and_best_val_is_minimum() {
        let samples = toy_samples(36);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 4,
            seed: 31,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &samples).unwrap();
        let mut prev = f64::INFINITY;
        for r in &out.history {
            assert!(r.lr <= prev);
            prev = r.lr;
            let k = (cfg.learning_rate / r.lr).log2();
            assert!((k - k.round()).abs() < 1e-9, "lr {} is not η₀·0.5^k", r.lr);
            assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
        }
        let min_val = out
            .history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min_val);
        // The returned parameters reproduce that minimum exactly.
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let split = split_dataset(&labels, cfg.split_ratios, cfg.seed).unwrap();
        let recomputed = eval_loss(&out.best_params, &samples, &split.val, cfg.lambda).unwrap();
        assert_eq!(recomputed, min_val);
    }

    #[test]
    fn loss_history_csv_has_header_and_rows() {
        let history = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.6,
                lr: 1e-3,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.4,
                val_loss: 0.55,
                lr: 1e-3,
            },
        ];
        let csv = loss_history_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,lr"));
        assert_eq!(lines.next(), Some("1,0.5,0.6,0.001"));
        assert_eq!(lines.next(), Some("2,0.4,0.55,0.001"));
    }
}
