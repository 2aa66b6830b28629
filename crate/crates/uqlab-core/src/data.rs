//! Synthetic datasets with known ground truth, plus delimited-text
//! import/export. Generation is a pure function of (spec, seed); the three
//! splits draw from disjoint rng substreams.

use crate::error::{Error, Result};
use crate::metrics::entropy;
use crate::model::ModelInput;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Named mean-function presets. Changing a preset is a breaking change to
/// the acceptance tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanPreset {
    /// sin(2πx)
    Sine,
}

impl MeanPreset {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            MeanPreset::Sine => (2.0 * std::f64::consts::PI * x).sin(),
        }
    }
}

/// Linear noise level σ*(x) = a + b·x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePreset {
    pub a: f64,
    pub b: f64,
}

impl NoisePreset {
    pub fn eval(self, x: f64) -> f64 {
        self.a + self.b * x
    }
}

impl Default for NoisePreset {
    fn default() -> Self {
        NoisePreset { a: 0.1, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTaskSpec {
    pub mean: MeanPreset,
    pub noise: NoisePreset,
    pub x_min: f64,
    pub x_max: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for RegressionTaskSpec {
    fn default() -> Self {
        RegressionTaskSpec {
            mean: MeanPreset::Sine,
            noise: NoisePreset::default(),
            x_min: 0.0,
            x_max: 1.0,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            seed: 0,
        }
    }
}

/// Token-classification task: each example is a bare token id whose label
/// is drawn from a per-type distribution with a controlled entropy spread.
/// Half the types are deterministic (entropy 0); the other half sweep
/// entropies up to log C by mixing a point mass with the uniform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTaskSpec {
    pub token_types: usize,
    pub classes: usize,
    pub train_per_type: usize,
    pub val_per_type: usize,
    pub test_per_type: usize,
    pub seed: u64,
}

impl Default for TokenTaskSpec {
    fn default() -> Self {
        TokenTaskSpec {
            token_types: 50,
            classes: 5,
            train_per_type: 40,
            val_per_type: 10,
            test_per_type: 10,
            seed: 0,
        }
    }
}

impl TokenTaskSpec {
    /// The per-type label distribution p_t, each row summing to 1.
    pub fn label_distributions(&self) -> Result<Vec<Vec<f64>>> {
        if self.classes < 2 || self.token_types < 2 {
            return Err(Error::Config(
                "token task needs >= 2 classes and >= 2 token types".into(),
            ));
        }
        let c = self.classes;
        let deterministic = self.token_types / 2;
        let noisy = self.token_types - deterministic;
        let mut rows = Vec::with_capacity(self.token_types);
        for t in 0..self.token_types {
            let anchor = t % c;
            let lambda = if t < deterministic {
                0.0
            } else {
                (t - deterministic + 1) as f64 / noisy as f64
            };
            let mut p = vec![lambda / c as f64; c];
            p[anchor] += 1.0 - lambda;
            rows.push(p);
        }
        Ok(rows)
    }

    /// Entropy H(p_t) in nats per token type.
    pub fn entropy_table(&self) -> Result<Vec<f64>> {
        self.label_distributions()?
            .iter()
            .map(|p| entropy(p))
            .collect()
    }
}

/// Record sufficient to regenerate a dataset bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum Provenance {
    Regression(RegressionTaskSpec),
    Token(TokenTaskSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataInputs {
    Dense(Tensor),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataTargets {
    Real(Tensor),
    Labels(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DataInputs,
    pub targets: DataTargets,
    pub split: Split,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn from_dense(inputs: Tensor, targets: Tensor, split: Split) -> Result<Dataset> {
        if inputs.rows() != targets.len() {
            return Err(Error::Contract(format!(
                "{} inputs vs {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Dataset {
            inputs: DataInputs::Dense(inputs),
            targets: DataTargets::Real(targets),
            split,
            provenance: None,
        })
    }

    pub fn from_tokens(tokens: Vec<u32>, labels: Vec<usize>, split: Split) -> Result<Dataset> {
        if tokens.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} tokens vs {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            inputs: DataInputs::Tokens(tokens),
            targets: DataTargets::Labels(labels),
            split,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        match &self.inputs {
            DataInputs::Dense(t) => t.rows(),
            DataInputs::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assemble the model input for a set of example indices.
    pub fn model_input_at(&self, idx: &[usize]) -> Result<ModelInput> {
        match &self.inputs {
            DataInputs::Dense(t) => {
                let cols = t.cols();
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in idx {
                    for j in 0..cols {
                        data.push(t.get2(i, j));
                    }
                }
                Ok(ModelInput::Dense(Tensor::matrix(idx.len(), cols, data)?))
            }
            DataInputs::Tokens(v) => Ok(ModelInput::Tokens(
                idx.iter().map(|&i| vec![v[i]]).collect(),
            )),
        }
    }

    pub fn real_targets_at(&self, idx: &[usize]) -> Result<Tensor> {
        match &self.targets {
            DataTargets::Real(t) => Ok(Tensor::vector(
                idx.iter().map(|&i| t.data()[i]).collect(),
            )),
            DataTargets::Labels(_) => Err(Error::Contract(
                "dataset carries labels, not real targets".into(),
            )),
        }
    }

    pub fn label_targets_at(&self, idx: &[usize]) -> Result<Vec<usize>> {
        match &self.targets {
            DataTargets::Labels(l) => Ok(idx.iter().map(|&i| l[i]).collect()),
            DataTargets::Real(_) => Err(Error::Contract(
                "dataset carries real targets, not labels".into(),
            )),
        }
    }

    // ---- delimited text round trip ----

    /// Export as comma-delimited text: a header line, one example per row.
    /// Reals use the shortest representation that round-trips exactly.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match (&self.inputs, &self.targets) {
            (DataInputs::Dense(x), DataTargets::Real(y)) => {
                let cols = x.cols();
                let header: Vec<String> = (0..cols)
                    .map(|j| format!("x{j}"))
                    .chain(std::iter::once("y".to_string()))
                    .collect();
                writeln!(f, "{}", header.join(","))?;
                for i in 0..self.len() {
                    let mut row: Vec<String> =
                        (0..cols).map(|j| format!("{:?}", x.get2(i, j))).collect();
                    row.push(format!("{:?}", y.data()[i]));
                    writeln!(f, "{}", row.join(","))?;
                }
            }
            (DataInputs::Tokens(tokens), DataTargets::Labels(labels)) => {
                writeln!(f, "token,label")?;
                for (t, l) in tokens.iter().zip(labels) {
                    writeln!(f, "{t},{l}")?;
                }
            }
            _ => {
                return Err(Error::Contract(
                    "mismatched input/target kinds in dataset".into(),
                ))
            }
        }
        Ok(())
    }

    /// Import a file written by [`export`]. Reports the offending line
    /// number on parse failure.
    pub fn import(path: &Path, split: Split) -> Result<Dataset> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))?;
        let header = header.map_err(Error::Io)?;
        let cols: Vec<&str> = header.split(',').collect();
        let parse_err = |lineno: usize, what: &str| {
            Error::Input(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        if cols.last() == Some(&"label") {
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            for (lineno, line) in lines {
                let line = line.map_err(Error::Io)?;
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut it = line.split(',');
                let t: u32 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(lineno, "bad token id"))?;
                let l: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err(lineno, "bad label"))?;
                tokens.push(t);
                labels.push(l);
            }
            Dataset::from_tokens(tokens, labels, split)
        } else if cols.last() == Some(&"y") {
            let dim = cols.len() - 1;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut rows = 0usize;
            for (lineno, line) in lines {
                let line = line.map_err(Error::Io)?;
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let vals: Vec<f64> = line
                    .split(',')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(lineno, "bad real value"))?;
                if vals.len() != dim + 1 {
                    return Err(parse_err(lineno, "wrong column count"));
                }
                xs.extend_from_slice(&vals[..dim]);
                ys.push(vals[dim]);
                rows += 1;
            }
            Dataset::from_dense(Tensor::matrix(rows, dim, xs)?, Tensor::vector(ys), split)
        } else {
            Err(Error::Input(format!(
                "{}: unrecognized header {header:?}",
                path.display()
            )))
        }
    }
}

pub struct RegressionData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub spec: RegressionTaskSpec,
}

impl RegressionData {
    pub fn mu_star(&self, x: f64) -> f64 {
        self.spec.mean.eval(x)
    }

    pub fn sigma_star(&self, x: f64) -> f64 {
        self.spec.noise.eval(x)
    }
}

/// x ~ U(range), y = μ*(x) + σ*(x)·ε. The ground-truth functions stay on
/// the returned handle for evaluation only; training never sees them.
pub fn generate_regression(spec: &RegressionTaskSpec) -> Result<RegressionData> {
    if !(spec.x_min < spec.x_max) {
        return Err(Error::Config(format!(
            "bad input range [{}, {}]",
            spec.x_min, spec.x_max
        )));
    }
    let make_split = |split: Split, n: usize| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(split.stream());
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.gen_range(spec.x_min..spec.x_max);
            let sigma = spec.noise.eval(x);
            if sigma <= 0.0 {
                return Err(Error::Config(format!(
                    "noise preset gives sigma {sigma} <= 0 at x = {x}"
                )));
            }
            let eps: f64 = StandardNormal.sample(&mut rng);
            xs.push(x);
            ys.push(spec.mean.eval(x) + sigma * eps);
        }
        let mut ds = Dataset::from_dense(
            Tensor::matrix(n, 1, xs)?,
            Tensor::vector(ys),
            split,
        )?;
        ds.provenance = Some(Provenance::Regression(*spec));
        Ok(ds)
    };
    Ok(RegressionData {
        train: make_split(Split::Train, spec.n_train)?,
        val: make_split(Split::Val, spec.n_val)?,
        test: make_split(Split::Test, spec.n_test)?,
        spec: *spec,
    })
}

pub struct TokenData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub entropy_table: Vec<f64>,
    pub distributions: Vec<Vec<f64>>,
    pub spec: TokenTaskSpec,
}

/// Each example is (token id, label ~ Categorical(p_t)).
pub fn generate_token_task(spec: &TokenTaskSpec) -> Result<TokenData> {
    let distributions = spec.label_distributions()?;
    for (t, p) in distributions.iter().enumerate() {
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "label distribution for type {t} sums to {total}"
            )));
        }
    }
    let entropy_table = spec.entropy_table()?;
    let make_split = |split: Split, per_type: usize| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(split.stream());
        let mut tokens = Vec::with_capacity(spec.token_types * per_type);
        let mut labels = Vec::with_capacity(spec.token_types * per_type);
        for (t, p) in distributions.iter().enumerate() {
            for _ in 0..per_type {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut label = p.len() - 1;
                for (c, &pc) in p.iter().enumerate() {
                    acc += pc;
                    if u < acc {
                        label = c;
                        break;
                    }
                }
                tokens.push(t as u32);
                labels.push(label);
            }
        }
        let mut ds = Dataset::from_tokens(tokens, labels, split)?;
        ds.provenance = Some(Provenance::Token(*spec));
        Ok(ds)
    };
    Ok(TokenData {
        train: make_split(Split::Train, spec.train_per_type)?,
        val: make_split(Split::Val, spec.val_per_type)?,
        test: make_split(Split::Test, spec.test_per_type)?,
        entropy_table,
        distributions,
        spec: *spec,
    })
}

/// Seeded shuffle into mini-batches of indices; the final short batch is
/// included.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}
