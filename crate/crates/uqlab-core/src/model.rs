//! Small feedforward networks with dropout between nonlinear layers.
//!
//! A [`StochasticModel`] owns its parameter tensors; every forward pass
//! builds a fresh autodiff graph over leaf nodes for those parameters, so
//! gradients start at zero each step. With dropout active, mask sampling
//! realizes draws from the approximate posterior over weights.

use crate::error::{Error, Result};
use crate::graph::Node;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    RegressionPlain,
    RegressionHetero,
    ClassificationPlain { classes: usize },
    ClassificationHetero { classes: usize },
}

impl Head {
    pub fn is_hetero(&self) -> bool {
        matches!(self, Head::RegressionHetero | Head::ClassificationHetero { .. })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Head::RegressionPlain | Head::RegressionHetero => 1,
            Head::ClassificationPlain { classes } | Head::ClassificationHetero { classes } => {
                *classes
            }
        }
    }
}

/// How inputs enter the trunk: dense feature rows, or token-id lists
/// mean-pooled through an embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    Dense { dim: usize },
    Tokens { vocab: usize, embedding_dim: usize },
}

impl InputSpec {
    fn trunk_input_dim(&self) -> usize {
        match self {
            InputSpec::Dense { dim } => *dim,
            InputSpec::Tokens { embedding_dim, .. } => *embedding_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// One rate per dropout site; site i follows hidden activation i, so
    /// the last site feeds the head. Length must equal `hidden.len()`.
    pub dropout_rates: Vec<f64>,
    pub head: Head,
}

impl ModelSpec {
    /// The same rate at every dropout site.
    pub fn uniform_dropout(&mut self, rate: f64) {
        self.dropout_rates = vec![rate; self.hidden.len()];
    }

    /// True when every site is inactive.
    pub fn dropout_free(&self) -> bool {
        self.dropout_rates.iter().all(|&r| r == 0.0)
    }
}

/// Per-input batch matching the model's input spec.
#[derive(Debug, Clone)]
pub enum ModelInput {
    Dense(Tensor),
    Tokens(Vec<Vec<u32>>),
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Dense(t) => t.rows(),
            ModelInput::Tokens(lists) => lists.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether the tensor participates in the L2 weight-decay penalty.
    pub decay: bool,
}

/// Per-input pair (μ(x), log σ²(x)) as graph nodes from the two-headed model.
#[derive(Clone)]
pub struct HeteroOutput {
    pub mu: Node,
    pub log_var: Node,
}

impl HeteroOutput {
    pub fn prediction(&self) -> HeteroPrediction {
        HeteroPrediction {
            mu: self.mu.value(),
            log_var: self.log_var.value(),
        }
    }
}

/// Evaluated (μ, log σ²) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroPrediction {
    pub mu: Tensor,
    pub log_var: Tensor,
}

#[derive(Clone)]
pub enum HeadOutput {
    Plain(Node),
    Hetero(HeteroOutput),
}

/// Result of one forward pass: the head output plus the parameter leaf
/// nodes (aligned with `StochasticModel::params`) whose grads the
/// optimizer reads after backward.
pub struct ForwardPass {
    pub output: HeadOutput,
    pub param_nodes: Vec<Node>,
}

impl ForwardPass {
    pub fn plain_output(&self) -> Result<&Node> {
        match &self.output {
            HeadOutput::Plain(n) => Ok(n),
            HeadOutput::Hetero(_) => Err(Error::Contract(
                "expected plain head output, model has a hetero head".into(),
            )),
        }
    }

    pub fn hetero_output(&self) -> Result<&HeteroOutput> {
        match &self.output {
            HeadOutput::Hetero(h) => Ok(h),
            HeadOutput::Plain(_) => Err(Error::Contract(
                "expected hetero head output, model has a plain head".into(),
            )),
        }
    }
}

pub struct StochasticModel {
    spec: ModelSpec,
    params: Vec<Param>,
}

impl StochasticModel {
    /// Build a model with zero parameters; call [`init_params`] or load a
    /// checkpoint before use.
    pub fn new(spec: ModelSpec) -> Result<StochasticModel> {
        if spec.dropout_rates.len() != spec.hidden.len() {
            return Err(Error::Config(format!(
                "need one dropout rate per site: {} hidden layers, {} rates",
                spec.hidden.len(),
                spec.dropout_rates.len()
            )));
        }
        if let Some(rate) = spec.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let mut params = Vec::new();
        if let InputSpec::Tokens {
            vocab,
            embedding_dim,
        } = spec.input
        {
            params.push(Param {
                name: "embed.w".into(),
                value: Tensor::zeros(&[vocab, embedding_dim]),
                decay: true,
            });
        }
        let mut in_dim = spec.input.trunk_input_dim();
        for (i, &h) in spec.hidden.iter().enumerate() {
            params.push(Param {
                name: format!("trunk{i}.w"),
                value: Tensor::zeros(&[in_dim, h]),
                decay: true,
            });
            params.push(Param {
                name: format!("trunk{i}.b"),
                value: Tensor::zeros(&[h]),
                decay: false,
            });
            in_dim = h;
        }
        let out = spec.head.output_dim();
        if spec.head.is_hetero() {
            for head in ["mu_head", "logvar_head"] {
                params.push(Param {
                    name: format!("{head}.w"),
                    value: Tensor::zeros(&[in_dim, out]),
                    decay: true,
                });
                params.push(Param {
                    name: format!("{head}.b"),
                    value: Tensor::zeros(&[out]),
                    decay: false,
                });
            }
        } else {
            params.push(Param {
                name: "head.w".into(),
                value: Tensor::zeros(&[in_dim, out]),
                decay: true,
            });
            params.push(Param {
                name: "head.b".into(),
                value: Tensor::zeros(&[out]),
                decay: false,
            });
        }
        Ok(StochasticModel { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), biases zero.
    /// The log-variance head starts at zero (weights and bias) so the
    /// initial predicted variance is exactly 1 for every input.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.name.starts_with("logvar_head") || p.name.ends_with(".b") {
                p.value.fill(0.0);
                continue;
            }
            let shape = p.value.shape().to_vec();
            let (fan_in, fan_out) = match shape.len() {
                2 => (shape[0], shape[1]),
                _ => (shape[0], shape[0]),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p.value.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        match (&self.spec.input, input) {
            (InputSpec::Dense { dim }, ModelInput::Dense(x)) => {
                if x.rank() != 2 || x.shape()[1] != *dim {
                    return Err(Error::dimension("model input", x.shape(), &[0, *dim]));
                }
                Ok(())
            }
            (InputSpec::Tokens { .. }, ModelInput::Tokens(_)) => Ok(()),
            _ => Err(Error::Contract(
                "input kind does not match the model's input spec".into(),
            )),
        }
    }

    fn forward_inner(
        &self,
        input: &ModelInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let param_nodes: Vec<Node> = self
            .params
            .iter()
            .map(|p| Node::leaf(p.value.clone()))
            .collect();
        let by_name = |name: &str| -> &Node {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .expect("parameter exists");
            &param_nodes[idx]
        };

        let mut h = match input {
            ModelInput::Dense(x) => Node::leaf(x.clone()),
            ModelInput::Tokens(lists) => by_name("embed.w").embedding_bag(lists)?,
        };
        for i in 0..self.spec.hidden.len() {
            let lin = h
                .matmul(by_name(&format!("trunk{i}.w")))?
                .add_row(by_name(&format!("trunk{i}.b")))?;
            h = match self.spec.activation {
                Activation::Tanh => lin.tanh(),
                Activation::Relu => lin.relu(),
            };
            if let Some(rng) = rng.as_deref_mut() {
                h = h.dropout(self.spec.dropout_rates[i], rng, true)?;
            }
        }
        let output = if self.spec.head.is_hetero() {
            let mu = h
                .matmul(by_name("mu_head.w"))?
                .add_row(by_name("mu_head.b"))?;
            // clamp before anything downstream exponentiates
            let log_var = h
                .matmul(by_name("logvar_head.w"))?
                .add_row(by_name("logvar_head.b"))?
                .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
            HeadOutput::Hetero(HeteroOutput { mu, log_var })
        } else {
            HeadOutput::Plain(
                h.matmul(by_name("head.w"))?.add_row(by_name("head.b"))?,
            )
        };
        Ok(ForwardPass {
            output,
            param_nodes,
        })
    }

    /// Forward with dropout sites acting as the identity.
    pub fn forward_deterministic(&self, input: &ModelInput) -> Result<ForwardPass> {
        self.forward_inner(input, None)
    }

    /// Forward with fresh dropout masks sampled from `rng` at every site.
    pub fn forward_stochastic(
        &self,
        input: &ModelInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        self.forward_inner(input, Some(rng))
    }

    /// Hetero-head forward; contract error on plain heads.
    pub fn forward_hetero(
        &self,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(HeteroOutput, ForwardPass)> {
        if !self.spec.head.is_hetero() {
            return Err(Error::Contract(
                "forward_hetero requires a hetero head".into(),
            ));
        }
        let pass = self.forward_inner(input, rng)?;
        let out = pass.hetero_output()?.clone();
        Ok((out, pass))
    }

    // ---- checkpoint round trip ----

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "uqlab-checkpoint v1")?;
        writeln!(
            f,
            "spec {}",
            serde_json::to_string(&self.spec).map_err(|e| Error::Io(e.into()))?
        )?;
        writeln!(f, "params {}", self.params.len())?;
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(f, "{} {} {}", p.name, p.value.shape().len(), dims.join(" "))?;
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{}", vals.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<StochasticModel> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Input("truncated checkpoint".into()))?
                .map_err(Error::Io)
        };
        let magic = next()?;
        if magic != "uqlab-checkpoint v1" {
            return Err(Error::Input(format!("bad checkpoint magic: {magic}")));
        }
        let spec_line = next()?;
        let spec_json = spec_line
            .strip_prefix("spec ")
            .ok_or_else(|| Error::Input("missing spec line".into()))?;
        let spec: ModelSpec = serde_json::from_str(spec_json)
            .map_err(|e| Error::Input(format!("bad model spec: {e}")))?;
        let count_line = next()?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Input("bad params count line".into()))?;
        let mut model = StochasticModel::new(spec)?;
        if model.params.len() != count {
            return Err(Error::Input(format!(
                "checkpoint has {count} params, model expects {}",
                model.params.len()
            )));
        }
        for i in 0..count {
            let header = next()?;
            let mut it = header.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::Input("empty param header".into()))?
                .to_string();
            let rank: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input("bad param rank".into()))?;
            let shape: Vec<usize> = it
                .take(rank)
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Input(format!("bad extent in {name}")))
                })
                .collect::<Result<_>>()?;
            let data_line = next()?;
            let data: Vec<f64> = data_line
                .split_whitespace()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Input(format!("bad value in {name}")))
                })
                .collect::<Result<_>>()?;
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Input(format!("param {name}: {e}")))?;
            if model.params[i].name != name || model.params[i].value.shape() != tensor.shape() {
                return Err(Error::Input(format!(
                    "checkpoint param {name} does not match model layout"
                )));
            }
            model.params[i].value = tensor;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph;
    use approx::assert_abs_diff_eq;

    fn dense_spec(head: Head) -> ModelSpec {
        ModelSpec {
            input: InputSpec::Dense { dim: 2 },
            hidden: vec![2],
            activation: Activation::Tanh,
            dropout_rates: vec![0.0],
            head,
        }
    }

    fn batch(rows: usize, cols: usize, data: Vec<f64>) -> ModelInput {
        ModelInput::Dense(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let model = StochasticModel::new(dense_spec(Head::RegressionPlain)).unwrap();
        let pass = model
            .forward_deterministic(&batch(3, 2, vec![1.0, -2.0, 0.5, 4.0, 9.0, -1.0]))
            .unwrap();
        assert_eq!(
            pass.plain_output().unwrap().value(),
            Tensor::zeros(&[3, 1])
        );
    }

    #[test]
    fn single_linear_layer_is_matmul_plus_bias() {
        let mut model = StochasticModel::new(ModelSpec {
            input: InputSpec::Dense { dim: 2 },
            hidden: vec![],
            activation: Activation::Tanh,
            dropout_rates: vec![],
            head: Head::RegressionPlain,
        })
        .unwrap();
        model.params_mut()[0].value = Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap();
        model.params_mut()[1].value = Tensor::vector(vec![0.5]);
        let pass = model
            .forward_deterministic(&batch(2, 2, vec![1.0, 1.0, 3.0, 0.0]))
            .unwrap();
        assert_eq!(pass.plain_output().unwrap().value().data(), &[1.5, 6.5]);
    }

    #[test]
    fn hand_set_2_2_1_network_forward() {
        let mut model = StochasticModel::new(dense_spec(Head::RegressionPlain)).unwrap();
        // trunk0.w = [[1,0],[0,1]], trunk0.b = [0,0], head.w = [[1],[1]], head.b = [0]
        model.params_mut()[0].value = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        model.params_mut()[2].value = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let pass = model
            .forward_deterministic(&batch(1, 2, vec![0.5, -0.25]))
            .unwrap();
        let expected = 0.5f64.tanh() + (-0.25f64).tanh();
        assert_abs_diff_eq!(
            pass.plain_output().unwrap().value().data()[0],
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = StochasticModel::new(dense_spec(Head::RegressionPlain)).unwrap();
        assert!(model
            .forward_deterministic(&batch(1, 3, vec![0.0; 3]))
            .is_err());
    }

    #[test]
    fn stochastic_rate_zero_equals_deterministic() {
        let mut model = StochasticModel::new(dense_spec(Head::RegressionPlain)).unwrap();
        model.init_params(3);
        let x = batch(4, 2, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.0, 2.0]);
        let det = model.forward_deterministic(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sto = model.forward_stochastic(&x, &mut rng).unwrap();
        assert_eq!(
            det.plain_output().unwrap().value(),
            sto.plain_output().unwrap().value()
        );
    }

    #[test]
    fn same_seed_reproduces_stochastic_forward() {
        let mut spec = dense_spec(Head::RegressionPlain);
        spec.uniform_dropout(0.5);
        let mut model = StochasticModel::new(spec).unwrap();
        model.init_params(5);
        let x = batch(2, 2, vec![0.3, 0.7, -0.2, 0.9]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model
                .forward_stochastic(&x, &mut rng)
                .unwrap()
                .plain_output()
                .unwrap()
                .value()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn different_seeds_differ_on_nontrivial_model() {
        let mut spec = dense_spec(Head::RegressionPlain);
        spec.hidden = vec![8];
        spec.uniform_dropout(0.5);
        let mut model = StochasticModel::new(spec).unwrap();
        model.init_params(5);
        let x = batch(2, 2, vec![0.3, 0.7, -0.2, 0.9]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model
                .forward_stochastic(&x, &mut rng)
                .unwrap()
                .plain_output()
                .unwrap()
                .value()
        };
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn hetero_initial_variance_is_unit() {
        let mut model = StochasticModel::new(dense_spec(Head::RegressionHetero)).unwrap();
        model.init_params(7);
        let (out, _) = model
            .forward_hetero(&batch(5, 2, (0..10).map(|i| i as f64 * 0.3).collect()), None)
            .unwrap();
        let pred = out.prediction();
        assert_eq!(pred.mu.shape(), &[5, 1]);
        assert_eq!(pred.log_var.shape(), &[5, 1]);
        for &lv in pred.log_var.data() {
            assert_eq!(lv, 0.0);
            assert_eq!(lv.exp(), 1.0);
        }
    }

    #[test]
    fn hetero_classification_shapes() {
        let mut model = StochasticModel::new(dense_spec(Head::ClassificationHetero {
            classes: 3,
        }))
        .unwrap();
        model.init_params(7);
        let (out, _) = model
            .forward_hetero(&batch(2, 2, vec![0.0, 1.0, 1.0, 0.0]), None)
            .unwrap();
        assert_eq!(out.mu.shape(), vec![2, 3]);
        assert_eq!(out.log_var.shape(), vec![2, 3]);
    }

    #[test]
    fn forward_hetero_rejects_plain_head() {
        let model = StochasticModel::new(dense_spec(Head::RegressionPlain)).unwrap();
        assert!(model
            .forward_hetero(&batch(1, 2, vec![0.0, 0.0]), None)
            .is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = dense_spec(Head::RegressionPlain);
        let mut a = StochasticModel::new(spec.clone()).unwrap();
        let mut b = StochasticModel::new(spec).unwrap();
        a.init_params(11);
        b.init_params(11);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
            if pa.name.ends_with(".b") {
                assert!(pa.value.data().iter().all(|&v| v == 0.0));
            } else {
                let shape = pa.value.shape();
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                assert!(pa.value.data().iter().all(|&v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn head_separation_mu_vs_logvar() {
        let mut model = StochasticModel::new(dense_spec(Head::RegressionHetero)).unwrap();
        model.init_params(13);
        let x = batch(3, 2, vec![0.1, 0.9, -0.4, 0.2, 0.5, 0.5]);
        let base = model.forward_hetero(&x, None).unwrap().0.prediction();
        // perturb mu head: log_var must not move
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == "mu_head.w")
            .unwrap();
        model.params_mut()[idx].value.data_mut()[0] += 0.37;
        let after = model.forward_hetero(&x, None).unwrap().0.prediction();
        assert_eq!(base.log_var, after.log_var);
        assert_ne!(base.mu, after.mu);
        // perturb logvar head: mu must not move
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == "logvar_head.w")
            .unwrap();
        model.params_mut()[idx].value.data_mut()[0] += 0.41;
        let last = model.forward_hetero(&x, None).unwrap().0.prediction();
        assert_eq!(after.mu, last.mu);
        assert_ne!(after.log_var, last.log_var);
    }

    #[test]
    fn forward_is_finite_on_finite_inputs() {
        let mut spec = dense_spec(Head::RegressionHetero);
        spec.hidden = vec![16, 8];
        spec.uniform_dropout(0.5);
        let mut model = StochasticModel::new(spec).unwrap();
        model.init_params(17);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = batch(3, 2, vec![100.0, -100.0, 0.0, 1e6, -1e6, 3.0]);
        let (out, _) = model.forward_hetero(&x, Some(&mut rng)).unwrap();
        assert!(out.mu.value().all_finite());
        assert!(out.log_var.value().all_finite());
    }

    #[test]
    fn embedding_model_forward_and_grads() {
        let mut model = StochasticModel::new(ModelSpec {
            input: InputSpec::Tokens {
                vocab: 6,
                embedding_dim: 4,
            },
            hidden: vec![3],
            activation: Activation::Tanh,
            dropout_rates: vec![0.0],
            head: Head::ClassificationPlain { classes: 2 },
        })
        .unwrap();
        model.init_params(23);
        let input = ModelInput::Tokens(vec![vec![0], vec![5], vec![1, 2]]);
        let pass = model.forward_deterministic(&input).unwrap();
        let out = pass.plain_output().unwrap();
        assert_eq!(out.shape(), vec![3, 2]);
        graph::backward(&out.sum()).unwrap();
        // embedding rows for unused tokens get zero grad
        let ge = pass.param_nodes[0].grad();
        assert!(ge.data()[3 * 4..4 * 4].iter().all(|&v| v == 0.0));
        assert!(ge.data()[0..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn token_id_out_of_vocab_rejected() {
        let model = StochasticModel::new(ModelSpec {
            input: InputSpec::Tokens {
                vocab: 4,
                embedding_dim: 2,
            },
            hidden: vec![],
            activation: Activation::Tanh,
            dropout_rates: vec![],
            head: Head::ClassificationPlain { classes: 2 },
        })
        .unwrap();
        assert!(model
            .forward_deterministic(&ModelInput::Tokens(vec![vec![4]]))
            .is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut spec = dense_spec(Head::RegressionHetero);
        spec.uniform_dropout(0.25);
        let mut model = StochasticModel::new(spec).unwrap();
        model.init_params(31);
        model.save(&path).unwrap();
        let loaded = StochasticModel::load(&path).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.decay, b.decay);
        }
    }
}
