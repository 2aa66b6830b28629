//! Experiment driver: flat-text config, dataset generation, variant
//! training, MC evaluation with a fixed predictions schema, uncertainty
//! analyses, and the four-variant ablation grid. Everything is a pure
//! function of (config, seed); wall-clock time is the only field excluded
//! from that guarantee.

use crate::data::{
    generate_regression, generate_token_task, Dataset, NoisePreset, Provenance,
    RegressionTaskSpec, Split, TokenTaskSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    self, correlate, uncertainty_vs_difficulty, CorrelationResult, GroupMetric, GroupRow,
};
use crate::model::{
    Activation, Head, InputSpec, ModelInput, ModelSpec, StochasticModel,
};
use crate::optim::{train, LossKind, TrainConfig, TrainTrace};
use crate::tensor::Tensor;
use crate::uncertainty::{
    mc_predict_classification, mc_predict_plain_classification,
    mc_predict_plain_regression, mc_predict_regression, ClassificationPrediction,
    HomoscedasticNoise, UncertaintyReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    TokenClassification,
}

/// Ablation rows: plain baseline, model uncertainty only, data uncertainty
/// only, or both estimators together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Mu,
    Du,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Mu, Variant::Du, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mu => "mu",
            Variant::Du => "du",
            Variant::Both => "both",
        }
    }

    /// Whether the model carries a learned log-variance head.
    fn uses_hetero_head(self) -> bool {
        matches!(self, Variant::Du | Variant::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    /// Override for the last dropout site, the one feeding the head.
    /// When unset every site uses `dropout_rate`.
    pub head_dropout_rate: Option<f64>,
    /// Stochastic forward passes at evaluation.
    pub m_passes: usize,
    /// Logit draws per pass (classification).
    pub k_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Homoscedastic observation noise assumed by the mu-only regression
    /// variant, which has no learned noise head.
    pub sigma_sq: f64,
    // regression task
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub noise_a: f64,
    pub noise_b: f64,
    // token task
    pub token_types: usize,
    pub classes: usize,
    pub train_per_type: usize,
    pub val_per_type: usize,
    pub test_per_type: usize,
    pub embedding_dim: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Regression,
            variant: Variant::Both,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            dropout_rate: 0.1,
            head_dropout_rate: None,
            m_passes: 10,
            k_samples: 10,
            lr: 0.01,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 60,
            steps_per_epoch: 0,
            seed: 0,
            sigma_sq: 0.01,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            x_min: 0.0,
            x_max: 1.0,
            noise_a: 0.1,
            noise_b: 0.4,
            token_types: 50,
            classes: 5,
            train_per_type: 40,
            val_per_type: 10,
            test_per_type: 10,
            embedding_dim: 16,
        }
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value {value:?} for key {key:?}"))
}

impl ExperimentConfig {
    /// Parse the flat `key = value` format. Blank lines and lines starting
    /// with `#` are ignored; unknown keys are errors.
    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| bad_value(key, value))
        }
        match key {
            "task" => {
                self.task = match value {
                    "regression" => Task::Regression,
                    "token_classification" => Task::TokenClassification,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "variant" => {
                self.variant = match value {
                    "baseline" => Variant::Baseline,
                    "mu" => Variant::Mu,
                    "du" => Variant::Du,
                    "both" => Variant::Both,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad_value(key, value))?
            }
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "head_dropout_rate" => self.head_dropout_rate = Some(num(key, value)?),
            "m_passes" => self.m_passes = num(key, value)?,
            "k_samples" => self.k_samples = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sigma_sq" => self.sigma_sq = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "x_min" => self.x_min = num(key, value)?,
            "x_max" => self.x_max = num(key, value)?,
            "noise_a" => self.noise_a = num(key, value)?,
            "noise_b" => self.noise_b = num(key, value)?,
            "token_types" => self.token_types = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "train_per_type" => self.train_per_type = num(key, value)?,
            "val_per_type" => self.val_per_type = num(key, value)?,
            "test_per_type" => self.test_per_type = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(rate) = self.head_dropout_rate {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "head_dropout_rate must be in [0, 1), got {rate}"
                )));
            }
        }
        if self.m_passes < 1 || self.k_samples < 1 {
            return Err(Error::Config("m_passes and k_samples must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden must list nonzero layer widths".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.sigma_sq < 0.0 || !self.sigma_sq.is_finite() {
            return Err(Error::Config(format!("bad sigma_sq {}", self.sigma_sq)));
        }
        if self.task == Task::TokenClassification && self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let input = match self.task {
            Task::Regression => InputSpec::Dense { dim: 1 },
            Task::TokenClassification => InputSpec::Tokens {
                vocab: self.token_types,
                embedding_dim: self.embedding_dim,
            },
        };
        let head = match (self.task, self.variant.uses_hetero_head()) {
            (Task::Regression, false) => Head::RegressionPlain,
            (Task::Regression, true) => Head::RegressionHetero,
            (Task::TokenClassification, false) => Head::ClassificationPlain {
                classes: self.classes,
            },
            (Task::TokenClassification, true) => Head::ClassificationHetero {
                classes: self.classes,
            },
        };
        let mut dropout_rates = vec![self.dropout_rate; self.hidden.len()];
        if let (Some(rate), Some(last)) = (self.head_dropout_rate, dropout_rates.last_mut()) {
            *last = rate;
        }
        ModelSpec {
            input,
            hidden: self.hidden.clone(),
            activation: self.activation,
            dropout_rates,
            head,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match (self.task, self.variant.uses_hetero_head()) {
            (Task::Regression, false) => LossKind::Mse,
            (Task::Regression, true) => LossKind::GaussianNll,
            (Task::TokenClassification, false) => LossKind::CrossEntropy,
            (Task::TokenClassification, true) => LossKind::McSoftmaxNll,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            loss: self.loss_kind(),
            k_samples: self.k_samples,
        }
    }

    fn regression_spec(&self) -> RegressionTaskSpec {
        RegressionTaskSpec {
            noise: NoisePreset {
                a: self.noise_a,
                b: self.noise_b,
            },
            x_min: self.x_min,
            x_max: self.x_max,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn token_spec(&self) -> TokenTaskSpec {
        TokenTaskSpec {
            token_types: self.token_types,
            classes: self.classes,
            train_per_type: self.train_per_type,
            val_per_type: self.val_per_type,
            test_per_type: self.test_per_type,
            seed: self.seed,
        }
    }
}

// ---- generate ----

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Write train/val/test files plus a provenance record (and, for the token
/// task, the per-type entropy table) into `out`.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let (train, val, test, provenance) = match cfg.task {
        Task::Regression => {
            let d = generate_regression(&cfg.regression_spec())?;
            (d.train, d.val, d.test, Provenance::Regression(d.spec))
        }
        Task::TokenClassification => {
            let d = generate_token_task(&cfg.token_spec())?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("entropy.csv"))?);
            writeln!(f, "token,entropy")?;
            for (t, h) in d.entropy_table.iter().enumerate() {
                writeln!(f, "{t},{h:?}")?;
            }
            (d.train, d.val, d.test, Provenance::Token(d.spec))
        }
    };
    train.export(&out.join("train.csv"))?;
    val.export(&out.join("val.csv"))?;
    test.export(&out.join("test.csv"))?;
    let prov = serde_json::to_string_pretty(&provenance)
        .map_err(|e| Error::Evaluation(format!("provenance serialization: {e}")))?;
    std::fs::write(out.join("provenance.json"), prov + "\n")?;
    Ok(GenerateSummary {
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}

// ---- train ----

#[derive(Debug, Clone, Serialize)]
pub struct RunReport<'a> {
    pub config: &'a ExperimentConfig,
    pub trace: &'a TrainTrace,
    pub wall_clock_seconds: f64,
}

/// Train the configured variant on the dataset files in `out`, saving the
/// best-validation checkpoint and a JSON report.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let train_set = Dataset::import(&out.join("train.csv"), Split::Train)?;
    let val_set = Dataset::import(&out.join("val.csv"), Split::Val)?;
    let mut model = StochasticModel::new(cfg.model_spec())?;
    model.init_params(cfg.seed);
    let trace = train(&mut model, &train_set, &val_set, &cfg.train_config())?;
    model.save(&out.join("checkpoint.txt"))?;
    let report = RunReport {
        config: cfg,
        trace: &trace,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Evaluation(format!("report serialization: {e}")))?;
    std::fs::write(out.join("report.json"), json + "\n")?;
    Ok(trace)
}

// ---- evaluate ----

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: Option<f64>,
    /// Single deterministic pass of the same checkpoint (no MC averaging).
    pub mse_deterministic: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_u_model: Option<f64>,
    pub mean_u_data: Option<f64>,
}

fn eval_rng(seed: u64) -> ChaCha8Rng {
    // streams 1-3 belong to data generation
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    rng
}

/// Copy of `model` with every dropout site set to one rate; parameters
/// shared by value. Used to evaluate non-MC variants deterministically.
fn with_dropout_rate(model: &StochasticModel, rate: f64) -> Result<StochasticModel> {
    let mut spec = model.spec().clone();
    spec.uniform_dropout(rate);
    let mut copy = StochasticModel::new(spec)?;
    for (dst, src) in copy.params_mut().iter_mut().zip(model.params()) {
        dst.value = src.value.clone();
    }
    Ok(copy)
}

fn tensor_mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len().max(1) as f64
}

struct PredictionTable {
    header: &'static str,
    rows: Vec<String>,
    report: Option<UncertaintyReport>,
}

const FULL_HEADER: &str = "id,gold,mean,u_model,u_data,u_total";

fn full_rows(gold: &[String], report: &UncertaintyReport, mean: &[f64]) -> Vec<String> {
    (0..gold.len())
        .map(|i| {
            format!(
                "{},{},{:?},{:?},{:?},{:?}",
                i,
                gold[i],
                mean[i],
                report.u_model.data()[i],
                report.u_data.data()[i],
                report.u_total.data()[i]
            )
        })
        .collect()
}

fn evaluate_regression(
    cfg: &ExperimentConfig,
    model: &StochasticModel,
    input: &ModelInput,
    gold: &Tensor,
) -> Result<(PredictionTable, EvalMetrics)> {
    let mut rng = eval_rng(cfg.seed);
    let det_model = with_dropout_rate(model, 0.0)?;
    let det_mean: Vec<f64> = match cfg.variant.uses_hetero_head() {
        false => det_model
            .forward_deterministic(input)?
            .plain_output()?
            .value()
            .data()
            .to_vec(),
        true => det_model
            .forward_hetero(input, None)?
            .0
            .prediction()
            .mu
            .data()
            .to_vec(),
    };
    let gold_strs: Vec<String> = gold.data().iter().map(|v| format!("{v:?}")).collect();
    let table = match cfg.variant {
        Variant::Baseline => PredictionTable {
            header: "id,gold,mean",
            rows: (0..gold.len())
                .map(|i| format!("{},{},{:?}", i, gold_strs[i], det_mean[i]))
                .collect(),
            report: None,
        },
        Variant::Mu => {
            let noise = HomoscedasticNoise::new(cfg.sigma_sq)?;
            let r =
                mc_predict_plain_regression(model, input, cfg.m_passes, &mut rng, noise)?;
            PredictionTable {
                header: FULL_HEADER,
                rows: full_rows(&gold_strs, &r, r.mean.data()),
                report: Some(r),
            }
        }
        Variant::Du => {
            let pred = det_model.forward_hetero(input, None)?.0.prediction();
            let n = pred.mu.len();
            let u_data: Vec<f64> = pred.log_var.data().iter().map(|v| v.exp()).collect();
            let r = UncertaintyReport {
                mean: Tensor::vector(pred.mu.data().to_vec()),
                u_model: Tensor::zeros(&[n]),
                u_data: Tensor::vector(u_data.clone()),
                u_total: Tensor::vector(u_data),
                m_samples: 1,
            };
            PredictionTable {
                header: FULL_HEADER,
                rows: full_rows(&gold_strs, &r, r.mean.data()),
                report: Some(r),
            }
        }
        Variant::Both => {
            let r = mc_predict_regression(model, input, cfg.m_passes, &mut rng)?;
            PredictionTable {
                header: FULL_HEADER,
                rows: full_rows(&gold_strs, &r, r.mean.data()),
                report: Some(r),
            }
        }
    };
    let mean: Vec<f64> = match &table.report {
        Some(r) => r.mean.data().to_vec(),
        None => det_mean.clone(),
    };
    let metrics = EvalMetrics {
        mse: Some(metrics::mse(gold.data(), &mean)?),
        mse_deterministic: Some(metrics::mse(gold.data(), &det_mean)?),
        mean_u_model: table.report.as_ref().map(|r| tensor_mean(&r.u_model)),
        mean_u_data: table.report.as_ref().map(|r| tensor_mean(&r.u_data)),
        ..EvalMetrics::default()
    };
    Ok((table, metrics))
}

fn classification_metrics(
    probabilities: &Tensor,
    gold: &[usize],
    predicted: &[usize],
) -> Result<EvalMetrics> {
    let accuracy = metrics::accuracy(gold, predicted)?;
    let classes = probabilities.cols();
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| **g == c && **p == c)
            .count();
        let fp = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| **g != c && **p == c)
            .count();
        let fn_ = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| **g == c && **p != c)
            .count();
        f1_sum += metrics::f1(tp, fp, fn_);
    }
    let nll: f64 = gold
        .iter()
        .enumerate()
        .map(|(i, &g)| -probabilities.get2(i, g).max(1e-300).ln())
        .sum::<f64>()
        / gold.len() as f64;
    Ok(EvalMetrics {
        accuracy: Some(accuracy),
        macro_f1: Some(f1_sum / classes as f64),
        perplexity: Some(metrics::perplexity(nll)),
        ..EvalMetrics::default()
    })
}

fn evaluate_classification(
    cfg: &ExperimentConfig,
    model: &StochasticModel,
    input: &ModelInput,
    gold: &[usize],
) -> Result<(PredictionTable, EvalMetrics)> {
    let mut rng = eval_rng(cfg.seed);
    let det_model = with_dropout_rate(model, 0.0)?;
    let prediction: Option<ClassificationPrediction> = match cfg.variant {
        Variant::Baseline => None,
        Variant::Mu => Some(mc_predict_plain_classification(
            model,
            input,
            cfg.m_passes,
            &mut rng,
        )?),
        Variant::Du => Some(mc_predict_classification(
            &det_model,
            input,
            1,
            cfg.k_samples,
            &mut rng,
        )?),
        Variant::Both => Some(mc_predict_classification(
            model,
            input,
            cfg.m_passes,
            cfg.k_samples,
            &mut rng,
        )?),
    };
    let gold_strs: Vec<String> = gold.iter().map(|g| g.to_string()).collect();
    let (table, metrics) = match prediction {
        None => {
            // deterministic softmax over the plain logits
            let logits = det_model
                .forward_deterministic(input)?
                .plain_output()?
                .value();
            let (n, c) = (logits.rows(), logits.cols());
            let mut probs = Tensor::zeros(&[n, c]);
            for i in 0..n {
                let mx = (0..c).map(|j| logits.get2(i, j)).fold(f64::MIN, f64::max);
                let z: f64 = (0..c).map(|j| (logits.get2(i, j) - mx).exp()).sum();
                for j in 0..c {
                    probs.set2(i, j, (logits.get2(i, j) - mx).exp() / z);
                }
            }
            let predicted: Vec<usize> = (0..n)
                .map(|i| {
                    (0..c)
                        .max_by(|&a, &b| {
                            probs.get2(i, a).partial_cmp(&probs.get2(i, b)).unwrap()
                        })
                        .unwrap()
                })
                .collect();
            let m = classification_metrics(&probs, gold, &predicted)?;
            let table = PredictionTable {
                header: "id,gold,mean",
                rows: (0..n)
                    .map(|i| format!("{},{},{}", i, gold_strs[i], predicted[i]))
                    .collect(),
                report: None,
            };
            (table, m)
        }
        Some(pred) => {
            let predicted = pred.predicted_labels();
            let mut m = classification_metrics(&pred.probabilities, gold, &predicted)?;
            m.mean_u_model = Some(tensor_mean(&pred.report.u_model));
            m.mean_u_data = Some(tensor_mean(&pred.report.u_data));
            let rows = (0..gold.len())
                .map(|i| {
                    format!(
                        "{},{},{},{:?},{:?},{:?}",
                        i,
                        gold_strs[i],
                        predicted[i],
                        pred.report.u_model.data()[i],
                        pred.report.u_data.data()[i],
                        pred.report.u_total.data()[i]
                    )
                })
                .collect();
            let table = PredictionTable {
                header: FULL_HEADER,
                rows,
                report: Some(pred.report),
            };
            (table, m)
        }
    };
    Ok((table, metrics))
}

/// Evaluate the checkpoint in `out` on the test split, writing
/// `predictions.csv` (aggregate metrics appended as `#` comment lines) and
/// `metrics.json`.
pub fn run_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<EvalMetrics> {
    cfg.validate()?;
    let model = StochasticModel::load(&out.join("checkpoint.txt"))?;
    if model.spec().head != cfg.model_spec().head {
        return Err(Error::Contract(format!(
            "checkpoint head {:?} does not match variant {}",
            model.spec().head,
            cfg.variant.name()
        )));
    }
    let test = Dataset::import(&out.join("test.csv"), Split::Test)?;
    if test.is_empty() {
        return Err(Error::Input("test split is empty".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let input = test.model_input_at(&idx)?;
    let (table, metrics) = match cfg.task {
        Task::Regression => {
            let gold = test.real_targets_at(&idx)?;
            evaluate_regression(cfg, &model, &input, &gold)?
        }
        Task::TokenClassification => {
            let gold = test.label_targets_at(&idx)?;
            evaluate_classification(cfg, &model, &input, &gold)?
        }
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("predictions.csv"))?);
    writeln!(f, "{}", table.header)?;
    for row in &table.rows {
        writeln!(f, "{row}")?;
    }
    let metric_pairs = [
        ("mse", metrics.mse),
        ("mse_deterministic", metrics.mse_deterministic),
        ("accuracy", metrics.accuracy),
        ("macro_f1", metrics.macro_f1),
        ("perplexity", metrics.perplexity),
        ("mean_u_model", metrics.mean_u_model),
        ("mean_u_data", metrics.mean_u_data),
    ];
    for (name, value) in metric_pairs {
        if let Some(v) = value {
            writeln!(f, "# {name},{v:?}")?;
        }
    }
    drop(f);
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Evaluation(format!("metrics serialization: {e}")))?;
    std::fs::write(out.join("metrics.json"), json + "\n")?;
    Ok(metrics)
}

// ---- analyze ----

/// Parsed `predictions.csv`.
pub struct PredictionRows {
    pub gold: Vec<f64>,
    pub mean: Vec<f64>,
    pub u_model: Option<Vec<f64>>,
    pub u_data: Option<Vec<f64>>,
    pub u_total: Option<Vec<f64>>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionRows> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?;
    let header = header.map_err(Error::Io)?;
    let full = header == FULL_HEADER;
    if !full && header != "id,gold,mean" {
        return Err(Error::Input(format!(
            "{}: unrecognized header {header:?}",
            path.display()
        )));
    }
    let mut rows = PredictionRows {
        gold: Vec::new(),
        mean: Vec::new(),
        u_model: full.then(Vec::new),
        u_data: full.then(Vec::new),
        u_total: full.then(Vec::new),
    };
    for (lineno, line) in lines {
        let line = line.map_err(Error::Io)?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Input(format!("{}:{}: bad value", path.display(), lineno + 1)))?;
        let expect = if full { 6 } else { 3 };
        if vals.len() != expect {
            return Err(Error::Input(format!(
                "{}:{}: expected {expect} columns",
                path.display(),
                lineno + 1
            )));
        }
        rows.gold.push(vals[1]);
        rows.mean.push(vals[2]);
        if full {
            rows.u_model.as_mut().unwrap().push(vals[3]);
            rows.u_data.as_mut().unwrap().push(vals[4]);
            rows.u_total.as_mut().unwrap().push(vals[5]);
        }
    }
    if rows.gold.is_empty() {
        return Err(Error::Input(format!(
            "{}: no prediction rows",
            path.display()
        )));
    }
    Ok(rows)
}

fn read_entropy_table(path: &Path) -> Result<Vec<f64>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let (token, h) = line.split_once(',').ok_or_else(|| {
            Error::Input(format!("{}:{}: bad row", path.display(), lineno + 1))
        })?;
        let t: usize = token.parse().map_err(|_| {
            Error::Input(format!("{}:{}: bad token id", path.display(), lineno + 1))
        })?;
        if t != out.len() {
            return Err(Error::Input(format!(
                "{}:{}: token ids must be consecutive from 0",
                path.display(),
                lineno + 1
            )));
        }
        out.push(h.parse().map_err(|_| {
            Error::Input(format!("{}:{}: bad entropy", path.display(), lineno + 1))
        })?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "{}: empty entropy table",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    /// Per-type label entropy vs mean predicted data uncertainty.
    /// None when the correlation is degenerate (constant input).
    pub entropy_u_data: Option<CorrelationResult>,
    /// Per-class F1 vs mean data uncertainty (expected negative).
    pub class_f1_u_data: Option<CorrelationResult>,
    /// Input-bin difficulty (MSE) vs mean data uncertainty.
    pub group_u_data: Option<CorrelationResult>,
}

/// Tables are still emitted when a correlation is degenerate; only the
/// summary entry goes missing.
fn correlation_or_none(r: Result<CorrelationResult>) -> Result<Option<CorrelationResult>> {
    match r {
        Ok(c) => Ok(Some(c)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn write_group_rows(path: &Path, header: &str, rows: &[GroupRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(
            f,
            "{},{:?},{:?},{}",
            r.group, r.mean_u_data, r.metric, r.count
        )?;
    }
    Ok(())
}

/// Join `predictions.csv` against the test split (and the entropy table
/// for the token task) and emit uncertainty-vs-difficulty analyses.
pub fn run_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<AnalyzeSummary> {
    cfg.validate()?;
    let preds = read_predictions(&out.join("predictions.csv"))?;
    let u_data = preds.u_data.as_ref().ok_or_else(|| {
        Error::Input(format!(
            "variant {} emits no uncertainty columns to analyze",
            cfg.variant.name()
        ))
    })?;
    let test = Dataset::import(&out.join("test.csv"), Split::Test)?;
    if test.len() != preds.gold.len() {
        return Err(Error::Input(format!(
            "predictions rows ({}) do not match test rows ({})",
            preds.gold.len(),
            test.len()
        )));
    }
    let mut summary = AnalyzeSummary {
        entropy_u_data: None,
        class_f1_u_data: None,
        group_u_data: None,
    };
    match cfg.task {
        Task::TokenClassification => {
            let idx: Vec<usize> = (0..test.len()).collect();
            let gold = test.label_targets_at(&idx)?;
            let predicted: Vec<usize> = preds.mean.iter().map(|&v| v as usize).collect();
            let tokens: Vec<usize> = match test.model_input_at(&idx)? {
                ModelInput::Tokens(lists) => lists.iter().map(|l| l[0] as usize).collect(),
                ModelInput::Dense(_) => {
                    return Err(Error::Input(
                        "token analysis needs a token test file".into(),
                    ))
                }
            };
            let entropies = read_entropy_table(&out.join("entropy.csv"))?;
            let missing: Vec<usize> = tokens
                .iter()
                .copied()
                .filter(|&t| t >= entropies.len())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Input(format!(
                    "token ids missing from entropy table: {missing:?}"
                )));
            }
            // per-type mean u_data against label entropy
            let groups: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
            let by_type =
                uncertainty_vs_difficulty(&groups, u_data, &gold, &predicted, GroupMetric::Accuracy)?;
            let mut f =
                std::io::BufWriter::new(std::fs::File::create(out.join("analysis_entropy.csv"))?);
            writeln!(f, "token,entropy,mean_u_data,accuracy,count")?;
            let mut hs = Vec::new();
            let mut us = Vec::new();
            for r in &by_type.rows {
                let t: usize = r.group.parse().expect("numeric token group");
                writeln!(
                    f,
                    "{},{:?},{:?},{:?},{}",
                    t, entropies[t], r.mean_u_data, r.metric, r.count
                )?;
                hs.push(entropies[t]);
                us.push(r.mean_u_data);
            }
            drop(f);
            summary.entropy_u_data = correlation_or_none(correlate(&hs, &us))?;
            // per-class one-vs-rest F1 against mean u_data
            let class_groups: Vec<String> = gold.iter().map(|g| g.to_string()).collect();
            let by_class = uncertainty_vs_difficulty(
                &class_groups,
                u_data,
                &gold,
                &predicted,
                GroupMetric::F1OneVsRest,
            )?;
            write_group_rows(
                &out.join("analysis_classes.csv"),
                "class,mean_u_data,f1,count",
                &by_class.rows,
            )?;
            summary.class_f1_u_data = correlation_or_none(by_class.correlation)?;
        }
        Task::Regression => {
            let idx: Vec<usize> = (0..test.len()).collect();
            let xs = match test.model_input_at(&idx)? {
                ModelInput::Dense(t) => t,
                ModelInput::Tokens(_) => {
                    return Err(Error::Input(
                        "regression analysis needs a dense test file".into(),
                    ))
                }
            };
            // five equal-width x bins; difficulty = squared residual
            let (lo, hi) = xs
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            let width = (hi - lo).max(f64::MIN_POSITIVE) / 5.0;
            let mut bins = vec![(0.0f64, 0.0f64, 0usize); 5];
            for i in 0..test.len() {
                let b = (((xs.get2(i, 0) - lo) / width) as usize).min(4);
                let resid = preds.gold[i] - preds.mean[i];
                bins[b].0 += u_data[i];
                bins[b].1 += resid * resid;
                bins[b].2 += 1;
            }
            let mut f =
                std::io::BufWriter::new(std::fs::File::create(out.join("analysis_groups.csv"))?);
            writeln!(f, "bin,x_lo,x_hi,mean_u_data,mse,count")?;
            let mut us = Vec::new();
            let mut ms = Vec::new();
            for (b, (u_sum, sq_sum, count)) in bins.iter().enumerate() {
                if *count == 0 {
                    continue;
                }
                let mu = u_sum / *count as f64;
                let mse = sq_sum / *count as f64;
                writeln!(
                    f,
                    "{},{:?},{:?},{:?},{:?},{}",
                    b,
                    lo + b as f64 * width,
                    lo + (b + 1) as f64 * width,
                    mu,
                    mse,
                    count
                )?;
                us.push(mu);
                ms.push(mse);
            }
            drop(f);
            summary.group_u_data = correlation_or_none(correlate(&us, &ms))?;
        }
    }
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Evaluation(format!("analysis serialization: {e}")))?;
    std::fs::write(out.join("analysis.json"), json + "\n")?;
    Ok(summary)
}

// ---- ablate ----

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: EvalMetrics,
}

/// Run all four variants end to end in subdirectories of `out` and emit a
/// single comparison table.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let sub = out.join(variant.name());
        run_generate(&vcfg, &sub)?;
        run_train(&vcfg, &sub)?;
        let metrics = run_evaluate(&vcfg, &sub)?;
        if variant != Variant::Baseline {
            run_analyze(&vcfg, &sub)?;
        }
        rows.push(AblationRow { variant, metrics });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("ablation.csv"))?);
    writeln!(
        f,
        "variant,mse,accuracy,macro_f1,perplexity,mean_u_model,mean_u_data"
    )?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for row in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            row.variant.name(),
            cell(row.metrics.mse),
            cell(row.metrics.accuracy),
            cell(row.metrics.macro_f1),
            cell(row.metrics.perplexity),
            cell(row.metrics.mean_u_model),
            cell(row.metrics.mean_u_data),
        )?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_regression(variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            variant,
            hidden: vec![8],
            n_train: 120,
            n_val: 40,
            n_test: 40,
            epochs: 3,
            batch_size: 32,
            m_passes: 4,
            ..ExperimentConfig::default()
        }
    }

    fn tiny_token(variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            task: Task::TokenClassification,
            variant,
            hidden: vec![8],
            token_types: 6,
            classes: 3,
            train_per_type: 10,
            val_per_type: 4,
            test_per_type: 4,
            embedding_dim: 4,
            epochs: 2,
            batch_size: 16,
            m_passes: 4,
            k_samples: 4,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_parse_roundtrip_and_unknown_key() {
        let text = "task = regression\nvariant = mu\nhidden = 8,4\nseed = 7\n# comment\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.variant, Variant::Mu);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.seed, 7);
        let err = ExperimentConfig::parse_str("frobnicate = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        assert!(ExperimentConfig::parse_str("dropout_rate = 1.0\n").is_err());
        assert!(ExperimentConfig::parse_str("m_passes = 0\n").is_err());
        assert!(ExperimentConfig::parse_str("lr = -1\n").is_err());
    }

    #[test]
    fn generate_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Both);
        let s = run_generate(&cfg, dir.path()).unwrap();
        assert_eq!((s.n_train, s.n_val, s.n_test), (120, 40, 40));
        for f in ["train.csv", "val.csv", "test.csv", "provenance.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let tcfg = tiny_token(Variant::Both);
        let tdir = tempfile::tempdir().unwrap();
        run_generate(&tcfg, tdir.path()).unwrap();
        let entropy = std::fs::read_to_string(tdir.path().join("entropy.csv")).unwrap();
        assert_eq!(entropy.lines().count(), 1 + tcfg.token_types);
    }

    #[test]
    fn generate_same_seed_is_byte_identical() {
        let cfg = tiny_regression(Variant::Both);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_generate(&cfg, a.path()).unwrap();
        run_generate(&cfg, b.path()).unwrap();
        for f in ["train.csv", "val.csv", "test.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn train_missing_files_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Both);
        assert!(run_train(&cfg, dir.path()).is_err());
    }

    #[test]
    fn full_pipeline_regression_all_variants() {
        for variant in Variant::ALL {
            let dir = tempfile::tempdir().unwrap();
            let cfg = tiny_regression(variant);
            run_generate(&cfg, dir.path()).unwrap();
            run_train(&cfg, dir.path()).unwrap();
            let m = run_evaluate(&cfg, dir.path()).unwrap();
            assert!(m.mse.unwrap().is_finite());
            let preds = read_predictions(&dir.path().join("predictions.csv")).unwrap();
            assert_eq!(preds.gold.len(), cfg.n_test);
            if variant == Variant::Baseline {
                assert!(preds.u_data.is_none());
            } else {
                // decomposition identity holds rowwise in the emitted file
                let (um, ud, ut) = (
                    preds.u_model.as_ref().unwrap(),
                    preds.u_data.as_ref().unwrap(),
                    preds.u_total.as_ref().unwrap(),
                );
                for i in 0..um.len() {
                    assert!((um[i] + ud[i] - ut[i]).abs() <= 1e-12);
                }
                run_analyze(&cfg, dir.path()).unwrap();
                assert!(dir.path().join("analysis.json").exists());
            }
        }
    }

    #[test]
    fn full_pipeline_token_all_variants() {
        for variant in Variant::ALL {
            let dir = tempfile::tempdir().unwrap();
            let cfg = tiny_token(variant);
            run_generate(&cfg, dir.path()).unwrap();
            run_train(&cfg, dir.path()).unwrap();
            let m = run_evaluate(&cfg, dir.path()).unwrap();
            assert!(m.accuracy.unwrap() >= 0.0);
            if variant != Variant::Baseline {
                let summary = run_analyze(&cfg, dir.path()).unwrap();
                if variant == Variant::Both {
                    assert!(summary.entropy_u_data.is_some());
                }
            }
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Both);
        run_generate(&cfg, dir.path()).unwrap();
        run_train(&cfg, dir.path()).unwrap();
        run_evaluate(&cfg, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("predictions.csv")).unwrap();
        run_evaluate(&cfg, dir.path()).unwrap();
        let second = std::fs::read(dir.path().join("predictions.csv")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn evaluate_head_mismatch_is_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Baseline);
        run_generate(&cfg, dir.path()).unwrap();
        run_train(&cfg, dir.path()).unwrap();
        let mut wrong = cfg.clone();
        wrong.variant = Variant::Both;
        assert!(matches!(
            run_evaluate(&wrong, dir.path()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn analyze_without_uncertainty_columns_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Baseline);
        run_generate(&cfg, dir.path()).unwrap();
        run_train(&cfg, dir.path()).unwrap();
        run_evaluate(&cfg, dir.path()).unwrap();
        assert!(matches!(
            run_analyze(&cfg, dir.path()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn analyze_empty_predictions_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Both);
        run_generate(&cfg, dir.path()).unwrap();
        std::fs::write(dir.path().join("predictions.csv"), "id,gold,mean\n").unwrap();
        assert!(matches!(
            run_analyze(&cfg, dir.path()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ablation_writes_comparison_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_regression(Variant::Both);
        let rows = run_ablate(&cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 4);
        let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(table.lines().count(), 5);
        for v in Variant::ALL {
            assert!(dir.path().join(v.name()).join("report.json").exists());
        }
    }
}
