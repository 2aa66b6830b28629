//! Training objectives: MSE and cross-entropy baselines plus the two
//! attenuated losses that learn an input-dependent noise level.

use crate::error::{Error, Result};
use crate::graph::Node;
use crate::model::{ForwardPass, HeteroOutput, StochasticModel};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const HALF_LN_2PI: f64 = 0.9189385332046727; // ½ ln 2π

/// A differentiable scalar objective plus its per-example contributions.
/// The scalar always equals the mean of the per-example values.
pub struct LossValue {
    pub scalar: Node,
    pub per_example: Tensor,
}

impl LossValue {
    pub fn value(&self) -> f64 {
        self.scalar.value().data()[0]
    }
}

fn flatten_to_vector(n: &Node, context: &str) -> Result<(Node, usize)> {
    let shape = n.shape();
    match shape.len() {
        1 => Ok((n.clone(), shape[0])),
        2 if shape[1] == 1 => Ok((n.clone(), shape[0])),
        _ => Err(Error::dimension(context, &shape, &[shape[0], 1])),
    }
}

/// Mean of squared residuals.
pub fn mse_loss(pred: &Node, target: &Tensor) -> Result<LossValue> {
    let (pred, n) = flatten_to_vector(pred, "mse_loss prediction")?;
    if target.len() != n || n == 0 {
        return Err(Error::Contract(format!(
            "mse_loss needs matching nonempty pred/target, got {} vs {}",
            n,
            target.len()
        )));
    }
    let t = Node::leaf(Tensor::new(pred.shape(), target.data().to_vec())?);
    let sq = pred.sub(&t)?.square();
    let per_example = sq.value();
    Ok(LossValue {
        scalar: sq.mean(),
        per_example: Tensor::vector(per_example.data().to_vec()),
    })
}

/// Gaussian negative log-likelihood with a learned log-variance:
/// mean over the batch of ½((y−μ)/σ)² + ½ log σ² + ½ log 2π.
pub fn gaussian_nll(pred: &HeteroOutput, target: &Tensor) -> Result<LossValue> {
    let mu_shape = pred.mu.shape();
    if pred.log_var.shape() != mu_shape {
        return Err(Error::dimension(
            "gaussian_nll heads",
            &mu_shape,
            &pred.log_var.shape(),
        ));
    }
    if !pred.log_var.value().all_finite() {
        return Err(Error::Evaluation("non-finite log_var".into()));
    }
    let n: usize = mu_shape.iter().product();
    if target.len() != n {
        return Err(Error::dimension("gaussian_nll target", &mu_shape, target.shape()));
    }
    let t = Node::leaf(Tensor::new(mu_shape.clone(), target.data().to_vec())?);
    let resid_sq = pred.mu.sub(&t)?.square();
    let inv_var = pred.log_var.neg().exp();
    let nll = resid_sq
        .mul(&inv_var)?
        .add(&pred.log_var)?
        .scale(0.5)
        .add_scalar(HALF_LN_2PI);
    let per_example = Tensor::vector(nll.value().data().to_vec());
    Ok(LossValue {
        scalar: nll.mean(),
        per_example,
    })
}

/// Softmax cross-entropy from logits: mean of lse(logits_i) − logits_i[y_i].
pub fn cross_entropy(logits: &Node, labels: &[usize]) -> Result<LossValue> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "cross_entropy needs n×C logits with n = labels ({}), got {:?}",
            labels.len(),
            shape
        )));
    }
    let lse = logits.log_sum_exp()?;
    let picked = logits.select_columns(labels)?;
    let nll = lse.sub(&picked)?;
    let per_example = nll.value();
    Ok(LossValue {
        scalar: nll.mean(),
        per_example,
    })
}

/// Per-example log-probabilities ℓ_k = u[label] − lse(u) for one logit draw.
fn sample_log_prob(u: &Node, labels: &[usize]) -> Result<Node> {
    u.select_columns(labels)?.sub(&u.log_sum_exp()?)
}

/// Monte Carlo softmax NLL with reparameterized logit draws u = μ + σ⊙ε.
/// Per example: −(log Σ_k exp ℓ_k − log K), averaged over the batch. With
/// identical samples the −log K cancels and this reduces to cross-entropy.
pub fn mc_softmax_nll_with_eps(
    pred: &HeteroOutput,
    labels: &[usize],
    eps: &[Tensor],
) -> Result<LossValue> {
    if eps.is_empty() {
        return Err(Error::Config("mc_softmax_nll requires K >= 1".into()));
    }
    let shape = pred.mu.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "mc_softmax_nll needs n×C mean logits with n = labels ({}), got {:?}",
            labels.len(),
            shape
        )));
    }
    let sigma = pred.log_var.scale(0.5).exp();
    let mut log_probs = Vec::with_capacity(eps.len());
    for e in eps {
        if e.shape() != shape.as_slice() {
            return Err(Error::dimension("mc_softmax_nll eps", &shape, e.shape()));
        }
        let u = pred.mu.add(&sigma.mul(&Node::leaf(e.clone()))?)?;
        log_probs.push(sample_log_prob(&u, labels)?);
    }
    let stacked = Node::stack_columns(&log_probs)?; // n×K
    let log_mean = stacked
        .log_sum_exp()?
        .add_scalar(-(eps.len() as f64).ln());
    let nll = log_mean.neg();
    let per_example = nll.value();
    Ok(LossValue {
        scalar: nll.mean(),
        per_example,
    })
}

/// Fresh standard-normal ε per draw (training path).
pub fn mc_softmax_nll(
    pred: &HeteroOutput,
    labels: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossValue> {
    if k < 1 {
        return Err(Error::Config("mc_softmax_nll requires K >= 1".into()));
    }
    let shape = pred.mu.shape();
    let eps: Vec<Tensor> = (0..k)
        .map(|_| {
            let mut t = Tensor::zeros(&shape);
            for v in t.data_mut() {
                *v = StandardNormal.sample(rng);
            }
            t
        })
        .collect();
    mc_softmax_nll_with_eps(pred, labels, &eps)
}

/// coefficient × Σ over weight tensors of the sum of squares; biases are
/// excluded via the per-parameter decay flag.
pub fn l2_penalty(
    model: &StochasticModel,
    pass: &ForwardPass,
    coefficient: f64,
) -> Result<LossValue> {
    if coefficient < 0.0 {
        return Err(Error::Config(format!(
            "l2 coefficient must be >= 0, got {coefficient}"
        )));
    }
    let mut total: Option<Node> = None;
    for (param, node) in model.params().iter().zip(&pass.param_nodes) {
        if !param.decay {
            continue;
        }
        let sq = node.square().sum();
        total = Some(match total {
            None => sq,
            Some(acc) => acc.add(&sq)?,
        });
    }
    let scalar = match total {
        None => Node::leaf(Tensor::scalar(0.0)),
        Some(acc) => acc.scale(coefficient),
    };
    let per_example = Tensor::vector(vec![scalar.value().data()[0]]);
    Ok(LossValue {
        scalar,
        per_example,
    })
}
