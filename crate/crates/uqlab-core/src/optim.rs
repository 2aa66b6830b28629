//! Adam and the deterministic training loop.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::graph::{backward, Node};
use crate::losses::{self, LossValue};
use crate::model::{HeadOutput, ModelInput, StochasticModel};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> AdamState {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_model(model: &StochasticModel, lr: f64) -> AdamState {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        AdamState::new(&shapes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update: m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², bias-corrected,
/// θ ← θ − lr·m̂/(√v̂ + ε). Parameter `names` is used only for error
/// reporting on non-finite gradients.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[&str],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step arity mismatch: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::Training {
                epoch: 0,
                step: state.t as usize,
                message: format!("non-finite gradient for parameter {}", names[i]),
            });
        }
        if g.shape() != params[i].shape() {
            return Err(Error::dimension("adam_step", params[i].shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Which objective drives training; the model head must match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GaussianNll,
    CrossEntropy,
    McSoftmaxNll,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// 0 means one full pass over the training set per epoch.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Inner sample count for [`LossKind::McSoftmaxNll`].
    pub k_samples: usize,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.loss == LossKind::McSoftmaxNll && self.k_samples < 1 {
            return Err(Error::Config("k_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy for classification losses, else None.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

fn data_loss(
    output: &HeadOutput,
    targets: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossValue> {
    match cfg.loss {
        LossKind::Mse => {
            let y = targets.real_targets_at(idx)?;
            match output {
                HeadOutput::Plain(node) => losses::mse_loss(node, &y),
                HeadOutput::Hetero(_) => Err(Error::Contract(
                    "mse loss requires a plain head".into(),
                )),
            }
        }
        LossKind::GaussianNll => {
            let y = targets.real_targets_at(idx)?;
            match output {
                HeadOutput::Hetero(h) => losses::gaussian_nll(h, &y),
                HeadOutput::Plain(_) => Err(Error::Contract(
                    "gaussian_nll requires a hetero head".into(),
                )),
            }
        }
        LossKind::CrossEntropy => {
            let labels = targets.label_targets_at(idx)?;
            match output {
                HeadOutput::Plain(node) => losses::cross_entropy(node, &labels),
                HeadOutput::Hetero(_) => Err(Error::Contract(
                    "cross_entropy requires a plain head".into(),
                )),
            }
        }
        LossKind::McSoftmaxNll => {
            let labels = targets.label_targets_at(idx)?;
            match output {
                HeadOutput::Hetero(h) => {
                    losses::mc_softmax_nll(h, &labels, cfg.k_samples, rng)
                }
                HeadOutput::Plain(_) => Err(Error::Contract(
                    "mc_softmax_nll requires a hetero head".into(),
                )),
            }
        }
    }
}

/// Number of pinned stochastic passes averaged into the validation loss.
const VAL_PASSES: u64 = 10;

/// Evaluation of the configured loss over a whole split. The loss keeps
/// dropout live (averaged over pinned masks) so it measures the same
/// objective training optimizes; accuracy uses the deterministic pass.
/// Pure function of (model, data).
pub fn evaluate_loss(
    model: &StochasticModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, Option<f64>)> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let input = dataset.model_input_at(&idx)?;
    let pass = model.forward_deterministic(&input)?;
    let mut loss_sum = 0.0;
    for p in 0..VAL_PASSES {
        let mut rng = ChaCha8Rng::seed_from_u64(p);
        let stochastic = model.forward_stochastic(&input, &mut rng)?;
        loss_sum += data_loss(&stochastic.output, dataset, &idx, cfg, &mut rng)?.value();
    }
    let loss = loss_sum / VAL_PASSES as f64;
    let accuracy = match cfg.loss {
        LossKind::CrossEntropy | LossKind::McSoftmaxNll => {
            let labels = dataset.label_targets_at(&idx)?;
            let logits = match &pass.output {
                HeadOutput::Plain(n) => n.value(),
                HeadOutput::Hetero(h) => h.mu.value(),
            };
            let (n, c) = (logits.rows(), logits.cols());
            let correct = (0..n)
                .filter(|&i| {
                    let pred = (0..c)
                        .max_by(|&a, &b| {
                            logits.get2(i, a).partial_cmp(&logits.get2(i, b)).unwrap()
                        })
                        .unwrap();
                    pred == labels[i]
                })
                .count();
            Some(correct as f64 / n as f64)
        }
        _ => None,
    };
    Ok((loss, accuracy))
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Mini-batch training with seeded shuffling, L2 weight decay in the loss,
/// gradient clipping at global norm 5, and best-validation-epoch selection
/// (ties keep the earlier epoch). The model is left holding the best
/// parameters. Pure function of (model, data, config).
pub fn train(
    model: &mut StochasticModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if train_set.len() == 0 && cfg.epochs > 0 {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let mut adam = AdamState::for_model(model, cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut trace = TrainTrace {
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best_score = f64::INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;

    for epoch in 0..cfg.epochs {
        let mut epoch_batches = batches(train_set, cfg.batch_size, &mut shuffle_rng)?;
        if cfg.steps_per_epoch > 0 {
            epoch_batches.truncate(cfg.steps_per_epoch);
        }
        let mut epoch_loss = 0.0;
        let mut examples = 0usize;
        for (step, idx) in epoch_batches.iter().enumerate() {
            let input = train_set.model_input_at(idx)?;
            let pass = model.forward_stochastic(&input, &mut noise_rng)?;
            let loss = data_loss(&pass.output, train_set, idx, cfg, &mut noise_rng)?;
            let penalty = losses::l2_penalty(model, &pass, cfg.weight_decay)?;
            let objective = loss.scalar.add(&penalty.scalar)?;
            let value = objective.value().data()[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("loss diverged to {value}"),
                });
            }
            backward(&objective)?;
            let mut grads: Vec<Tensor> =
                pass.param_nodes.iter().map(Node::grad).collect();
            clip_gradients(&mut grads, GRAD_CLIP_NORM);
            let mut values: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| p.value.clone())
                .collect();
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            adam_step(&mut adam, &mut values, &grads, &name_refs).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training {
                    epoch,
                    step,
                    message,
                },
                other => other,
            })?;
            for (p, v) in model.params_mut().iter_mut().zip(values) {
                p.value = v;
            }
            epoch_loss += loss.value() * idx.len() as f64;
            examples += idx.len();
        }
        let train_loss = epoch_loss / examples.max(1) as f64;
        let (val_loss, val_accuracy) = evaluate_loss(model, val_set, cfg)?;
        trace.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        // classification selects on accuracy (higher better), regression on loss
        let score = match val_accuracy {
            Some(acc) => -acc,
            None => val_loss,
        };
        if score < best_score {
            best_score = score;
            trace.best_epoch = Some(epoch);
            best_params = Some(model.params().iter().map(|p| p.value.clone()).collect());
        }
    }
    if let Some(best) = best_params {
        for (p, v) in model.params_mut().iter_mut().zip(best) {
            p.value = v;
        }
    }
    Ok(trace)
}

/// Convenience for tests: deterministic predictions of a plain-head model.
pub fn predict_deterministic(model: &StochasticModel, input: &ModelInput) -> Result<Tensor> {
    let pass = model.forward_deterministic(input)?;
    Ok(pass.plain_output()?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Split};
    use crate::model::{Activation, Head, InputSpec, ModelSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut state = AdamState::new(&[vec![2]], 1e-3);
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![0.0, 0.0])];
        adam_step(&mut state, &mut params, &grads, &["w"]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut state = AdamState::new(&[vec![1]], 1e-3);
        let mut params = vec![Tensor::vector(vec![0.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        adam_step(&mut state, &mut params, &grads, &["w"]).unwrap();
        // Δθ = −lr · 1/(1 + ε)
        assert_abs_diff_eq!(params[0].data()[0], -1e-3 / (1.0 + 1e-8), epsilon = 1e-18);
    }

    #[test]
    fn adam_equal_gradients_equal_updates() {
        let mut state = AdamState::new(&[vec![2]], 1e-2);
        let mut params = vec![Tensor::vector(vec![0.5, 0.5])];
        let grads = vec![Tensor::vector(vec![0.7, 0.7])];
        adam_step(&mut state, &mut params, &grads, &["w"]).unwrap();
        assert_eq!(params[0].data()[0], params[0].data()[1]);
    }

    #[test]
    fn adam_nonfinite_gradient_names_parameter() {
        let mut state = AdamState::new(&[vec![1]], 1e-3);
        let mut params = vec![Tensor::vector(vec![0.0])];
        let grads = vec![Tensor::vector(vec![f64::NAN])];
        let err = adam_step(&mut state, &mut params, &grads, &["trunk0.w"]).unwrap_err();
        assert!(err.to_string().contains("trunk0.w"));
    }

    fn linear_dataset(n: usize, split: Split) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 0.5).collect();
        Dataset::from_dense(
            Tensor::matrix(n, 1, xs).unwrap(),
            Tensor::vector(ys),
            split,
        )
        .unwrap()
    }

    fn plain_model() -> StochasticModel {
        let mut m = StochasticModel::new(ModelSpec {
            input: InputSpec::Dense { dim: 1 },
            hidden: vec![],
            activation: Activation::Tanh,
            dropout_rates: vec![],
            head: Head::RegressionPlain,
        })
        .unwrap();
        m.init_params(1);
        m
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            steps_per_epoch: 0,
            lr,
            weight_decay: 0.0,
            seed: 7,
            loss: LossKind::Mse,
            k_samples: 1,
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut model = plain_model();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let ds = linear_dataset(16, Split::Train);
        let val = linear_dataset(8, Split::Val);
        let trace = train(&mut model, &ds, &val, &cfg(0, 1e-2)).unwrap();
        assert!(trace.epochs.is_empty());
        for (p, b) in model.params().iter().zip(before) {
            assert_eq!(p.value, b);
        }
    }

    #[test]
    fn lr_zero_never_changes_params() {
        let mut model = plain_model();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let ds = linear_dataset(16, Split::Train);
        let val = linear_dataset(8, Split::Val);
        train(&mut model, &ds, &val, &cfg(3, 0.0)).unwrap();
        for (p, b) in model.params().iter().zip(before) {
            assert_eq!(p.value, b);
        }
    }

    #[test]
    fn linear_model_fits_linear_data() {
        let mut model = plain_model();
        let ds = linear_dataset(64, Split::Train);
        let val = linear_dataset(16, Split::Val);
        // 500 steps at 8 batches/epoch
        let trace = train(&mut model, &ds, &val, &cfg(63, 0.05)).unwrap();
        let final_loss = trace.epochs.last().unwrap().train_loss;
        assert!(final_loss < 1e-3, "train MSE {final_loss}");
    }

    #[test]
    fn training_is_deterministic_given_config_and_seed() {
        let run = || {
            let mut model = plain_model();
            let ds = linear_dataset(32, Split::Train);
            let val = linear_dataset(8, Split::Val);
            let trace = train(&mut model, &ds, &val, &cfg(5, 1e-2)).unwrap();
            let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
            (trace.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), params)
        };
        let (t1, p1) = run();
        let (t2, p2) = run();
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn smoothed_loss_is_nonincreasing_on_default_config() {
        let mut model = plain_model();
        let ds = linear_dataset(64, Split::Train);
        let val = linear_dataset(16, Split::Val);
        let trace = train(&mut model, &ds, &val, &cfg(30, 1e-2)).unwrap();
        let losses: Vec<f64> = trace.epochs.iter().map(|e| e.train_loss).collect();
        let smooth: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "smoothed loss increased: {w:?}");
        }
    }
}
