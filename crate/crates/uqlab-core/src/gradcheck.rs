//! Catalog of finite-difference gradient checks covering every
//! differentiable layer and loss, run over a fixed set of seeds. The CLI
//! `gradcheck` subcommand prints one line per entry.

use crate::error::Result;
use crate::graph::{grad_check, sample_dropout_mask, Node};
use crate::losses;
use crate::model::HeteroOutput;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 10;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Max relative error over all seeds and coordinates.
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

/// Uniform values bounded away from zero, so kinked ops (relu, clamp) are
/// never probed at their non-differentiable points.
fn rand_tensor_away_from(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    kinks: &[f64],
) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        loop {
            let x = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|&k| (x - k).abs() > 0.05) {
                *v = x;
                break;
            }
        }
    }
    t
}

fn selector(rows: usize, offset: usize, cols: usize) -> Node {
    let mut s = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        s.set2(offset + j, j, 1.0);
    }
    Node::leaf(s)
}

type CheckFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn catalog() -> Vec<(&'static str, CheckFn)> {
    let mut entries: Vec<(&'static str, CheckFn)> = Vec::new();
    let mut push = |name: &'static str, f: CheckFn| entries.push((name, f));

    push(
        "add",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            let c = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(|t| Ok(t.add(&Node::leaf(c.clone()))?.mean()), &theta, STEP)
        }),
    );
    push(
        "sub",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            let c = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(
                |t| Ok(t.sub(&Node::leaf(c.clone()))?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "mul",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            let c = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(|t| Ok(t.mul(&Node::leaf(c.clone()))?.mean()), &theta, STEP)
        }),
    );
    push(
        "exp",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -1.5, 1.5);
            grad_check(|t| Ok(t.exp().mean()), &theta, STEP)
        }),
    );
    push(
        "log",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, 0.5, 3.0);
            grad_check(|t| Ok(t.log()?.mean()), &theta, STEP)
        }),
    );
    push(
        "tanh",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(|t| Ok(t.tanh().mean()), &theta, STEP)
        }),
    );
    push(
        "relu",
        Box::new(|rng| {
            let theta = rand_tensor_away_from(&[6], rng, &[0.0]);
            grad_check(|t| Ok(t.relu().square().mean()), &theta, STEP)
        }),
    );
    push(
        "square",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(|t| Ok(t.square().mean()), &theta, STEP)
        }),
    );
    push(
        "neg_scale_add_scalar",
        Box::new(|rng| {
            let theta = rand_tensor(&[5], rng, -2.0, 2.0);
            grad_check(
                |t| Ok(t.neg().scale(1.7).add_scalar(0.3).square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "clamp",
        Box::new(|rng| {
            let theta = rand_tensor_away_from(&[6], rng, &[-1.0, 1.0]);
            grad_check(|t| Ok(t.clamp(-1.0, 1.0).square().mean()), &theta, STEP)
        }),
    );
    push(
        "matmul_left",
        Box::new(|rng| {
            let theta = rand_tensor(&[2, 3], rng, -1.0, 1.0);
            let c = rand_tensor(&[3, 2], rng, -1.0, 1.0);
            grad_check(
                |t| Ok(t.matmul(&Node::leaf(c.clone()))?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "matmul_right",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 2], rng, -1.0, 1.0);
            let c = rand_tensor(&[2, 3], rng, -1.0, 1.0);
            grad_check(
                |t| Ok(Node::leaf(c.clone()).matmul(t)?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "add_row_bias",
        Box::new(|rng| {
            let theta = rand_tensor(&[3], rng, -1.0, 1.0);
            let x = rand_tensor(&[4, 3], rng, -1.0, 1.0);
            grad_check(
                |t| Ok(Node::leaf(x.clone()).add_row(t)?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "add_row_input",
        Box::new(|rng| {
            let theta = rand_tensor(&[4, 3], rng, -1.0, 1.0);
            let b = rand_tensor(&[3], rng, -1.0, 1.0);
            grad_check(
                |t| Ok(t.add_row(&Node::leaf(b.clone()))?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "sum_mean",
        Box::new(|rng| {
            let theta = rand_tensor(&[2, 3], rng, -1.0, 1.0);
            grad_check(
                |t| Ok(t.square().sum().add(&t.mean())?),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "sum_axis",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 4], rng, -1.0, 1.0);
            grad_check(|t| Ok(t.sum_axis(0)?.square().mean()), &theta, STEP)
        }),
    );
    push(
        "mean_axis",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 4], rng, -1.0, 1.0);
            grad_check(|t| Ok(t.mean_axis(1)?.square().mean()), &theta, STEP)
        }),
    );
    push(
        "log_sum_exp",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 4], rng, -2.0, 2.0);
            grad_check(|t| Ok(t.log_sum_exp()?.mean()), &theta, STEP)
        }),
    );
    push(
        "select_columns",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 4], rng, -2.0, 2.0);
            let labels = vec![rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)];
            grad_check(
                |t| Ok(t.select_columns(&labels)?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "stack_columns",
        Box::new(|rng| {
            let theta = rand_tensor(&[4], rng, -1.5, 1.5);
            grad_check(
                |t| {
                    let cols = [t.clone(), t.square(), t.tanh()];
                    Ok(Node::stack_columns(&cols)?.log_sum_exp()?.mean())
                },
                &theta,
                STEP,
            )
        }),
    );
    push(
        "embedding_bag",
        Box::new(|rng| {
            let theta = rand_tensor(&[5, 3], rng, -1.0, 1.0);
            let tokens = vec![vec![0, 2], vec![4], vec![1, 3, 3]];
            grad_check(
                |t| Ok(t.embedding_bag(&tokens)?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "dropout_pinned_mask",
        Box::new(|rng| {
            let theta = rand_tensor(&[4, 3], rng, -1.0, 1.0);
            let mask = sample_dropout_mask(&[4, 3], 0.5, rng);
            grad_check(
                |t| Ok(t.dropout_with_mask(&mask)?.square().mean()),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "mse_loss",
        Box::new(|rng| {
            let theta = rand_tensor(&[4], rng, -1.5, 1.5);
            let target = rand_tensor(&[4], rng, -1.5, 1.5);
            grad_check(
                |t| Ok(losses::mse_loss(t, &target)?.scalar),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "gaussian_nll",
        Box::new(|rng| {
            // θ is a 1×6 row packing [μ₁ μ₂ μ₃ lv₁ lv₂ lv₃]
            let theta = rand_tensor(&[1, 6], rng, -1.0, 1.0);
            let target = Tensor::new(vec![1, 3], rand_tensor(&[3], rng, -1.5, 1.5).data().to_vec())
                .expect("shape");
            grad_check(
                |t| {
                    let pred = HeteroOutput {
                        mu: t.matmul(&selector(6, 0, 3))?,
                        log_var: t.matmul(&selector(6, 3, 3))?,
                    };
                    Ok(losses::gaussian_nll(&pred, &target)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );
    push(
        "cross_entropy",
        Box::new(|rng| {
            let theta = rand_tensor(&[3, 4], rng, -2.0, 2.0);
            let labels = vec![rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..4)];
            grad_check(
                |t| Ok(losses::cross_entropy(t, &labels)?.scalar),
                &theta,
                STEP,
            )
        }),
    );
    push(
        "mc_softmax_nll_pinned_eps",
        Box::new(|rng| {
            // one example, 3 classes: θ packs [μ | log_var] as a 1×6 row
            let theta = rand_tensor(&[1, 6], rng, -1.0, 1.0);
            let label = rng.gen_range(0..3);
            let eps: Vec<Tensor> = (0..4)
                .map(|_| rand_tensor(&[1, 3], rng, -1.5, 1.5))
                .collect();
            grad_check(
                |t| {
                    let pred = HeteroOutput {
                        mu: t.matmul(&selector(6, 0, 3))?,
                        log_var: t.matmul(&selector(6, 3, 3))?,
                    };
                    Ok(losses::mc_softmax_nll_with_eps(&pred, &[label], &eps)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );

    // end-to-end: every loss through a hand-built 2-layer trunk, checking
    // the gradient w.r.t. the first-layer weights
    push(
        "two_layer_mse",
        Box::new(|rng| {
            let theta = rand_tensor(&[1, 4], rng, -1.0, 1.0);
            let x = rand_tensor(&[5, 1], rng, -1.0, 1.0);
            let b1 = rand_tensor(&[4], rng, -0.5, 0.5);
            let w2 = rand_tensor(&[4, 1], rng, -1.0, 1.0);
            let target = rand_tensor(&[5], rng, -1.0, 1.0);
            grad_check(
                |t| {
                    let h = Node::leaf(x.clone())
                        .matmul(t)?
                        .add_row(&Node::leaf(b1.clone()))?
                        .tanh();
                    let out = h.matmul(&Node::leaf(w2.clone()))?;
                    Ok(losses::mse_loss(&out, &target)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );
    push(
        "two_layer_gaussian_nll",
        Box::new(|rng| {
            let theta = rand_tensor(&[1, 4], rng, -1.0, 1.0);
            let x = rand_tensor(&[5, 1], rng, -1.0, 1.0);
            let b1 = rand_tensor(&[4], rng, -0.5, 0.5);
            let w_mu = rand_tensor(&[4, 1], rng, -1.0, 1.0);
            let w_lv = rand_tensor(&[4, 1], rng, -1.0, 1.0);
            let target = rand_tensor(&[5], rng, -1.0, 1.0);
            grad_check(
                |t| {
                    let h = Node::leaf(x.clone())
                        .matmul(t)?
                        .add_row(&Node::leaf(b1.clone()))?
                        .tanh();
                    let pred = HeteroOutput {
                        mu: h.matmul(&Node::leaf(w_mu.clone()))?,
                        log_var: h.matmul(&Node::leaf(w_lv.clone()))?,
                    };
                    Ok(losses::gaussian_nll(&pred, &target)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );
    push(
        "two_layer_cross_entropy",
        Box::new(|rng| {
            let theta = rand_tensor(&[2, 4], rng, -1.0, 1.0);
            let x = rand_tensor(&[5, 2], rng, -1.0, 1.0);
            let b1 = rand_tensor(&[4], rng, -0.5, 0.5);
            let w2 = rand_tensor(&[4, 3], rng, -1.0, 1.0);
            let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            grad_check(
                |t| {
                    let h = Node::leaf(x.clone())
                        .matmul(t)?
                        .add_row(&Node::leaf(b1.clone()))?
                        .tanh();
                    let logits = h.matmul(&Node::leaf(w2.clone()))?;
                    Ok(losses::cross_entropy(&logits, &labels)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );
    push(
        "two_layer_mc_softmax_nll",
        Box::new(|rng| {
            let theta = rand_tensor(&[2, 4], rng, -1.0, 1.0);
            let x = rand_tensor(&[3, 2], rng, -1.0, 1.0);
            let b1 = rand_tensor(&[4], rng, -0.5, 0.5);
            let w_mu = rand_tensor(&[4, 3], rng, -1.0, 1.0);
            let w_lv = rand_tensor(&[4, 3], rng, -0.5, 0.5);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
            let eps: Vec<Tensor> = (0..4)
                .map(|_| rand_tensor(&[3, 3], rng, -1.5, 1.5))
                .collect();
            grad_check(
                |t| {
                    let h = Node::leaf(x.clone())
                        .matmul(t)?
                        .add_row(&Node::leaf(b1.clone()))?
                        .tanh();
                    let pred = HeteroOutput {
                        mu: h.matmul(&Node::leaf(w_mu.clone()))?,
                        log_var: h.matmul(&Node::leaf(w_lv.clone()))?,
                    };
                    Ok(losses::mc_softmax_nll_with_eps(&pred, &labels, &eps)?.scalar)
                },
                &theta,
                STEP,
            )
        }),
    );

    entries
}

/// Run every catalog entry over [`GRADCHECK_SEEDS`] seeds, reporting the
/// worst relative error per entry. The entry order and names are stable.
pub fn run_catalog() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, check) in catalog() {
        let mut worst = 0.0f64;
        for seed in 0..GRADCHECK_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            worst = worst.max(check(&mut rng)?);
        }
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: worst,
            pass: worst < GRADCHECK_TOLERANCE,
        });
    }
    Ok(out)
}
