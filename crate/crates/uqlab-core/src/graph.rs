//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Node`] wraps a value, a gradient accumulator, and the local backward
//! rule that scatters an upstream gradient into its parents. Graphs are
//! acyclic by construction (ops only reference already-built nodes) and are
//! confined to a single thread.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&Tensor)>;

struct NodeData {
    value: Tensor,
    grad: Tensor,
    parents: Vec<Node>,
    backward: Option<BackwardFn>,
}

/// A value in the computation graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Node {
    inner: Rc<RefCell<NodeData>>,
}

impl Node {
    /// Leaf node with no parents. Parameters and constants enter here.
    pub fn leaf(value: Tensor) -> Node {
        let grad = Tensor::zeros(value.shape());
        Node {
            inner: Rc::new(RefCell::new(NodeData {
                value,
                grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    fn from_op(value: Tensor, parents: Vec<Node>, backward: BackwardFn) -> Node {
        let grad = Tensor::zeros(value.shape());
        Node {
            inner: Rc::new(RefCell::new(NodeData {
                value,
                grad,
                parents,
                backward: Some(backward),
            })),
        }
    }

    /// Test-only escape hatch for wiring custom (possibly wrong) backward
    /// rules, used by the gradcheck negative control.
    #[doc(hidden)]
    pub fn from_raw_op(value: Tensor, parents: Vec<Node>, backward: BackwardFn) -> Node {
        Node::from_op(value, parents, backward)
    }

    pub fn value(&self) -> Tensor {
        self.inner.borrow().value.clone()
    }

    pub fn grad(&self) -> Tensor {
        self.inner.borrow().grad.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.fill(0.0);
    }

    pub(crate) fn accumulate_grad(&self, g: &Tensor) {
        self.inner
            .borrow_mut()
            .grad
            .add_assign(g)
            .expect("gradient shape matches value shape");
    }

    fn ptr(&self) -> *const RefCell<NodeData> {
        Rc::as_ptr(&self.inner)
    }

    // ---- elementwise ----

    fn binary(
        &self,
        other: &Node,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        // gradients of the output wrt (lhs, rhs) at each element
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Node> {
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(Error::dimension(name, av.shape(), bv.shape()));
        }
        let value = av.zip(&bv, f)?;
        let (a, b) = (self.clone(), other.clone());
        let back = move |g: &Tensor| {
            let mut ga = Tensor::zeros(av.shape());
            let mut gb = Tensor::zeros(bv.shape());
            for i in 0..g.len() {
                let (da, db) = df(av.data()[i], bv.data()[i]);
                ga.data_mut()[i] = g.data()[i] * da;
                gb.data_mut()[i] = g.data()[i] * db;
            }
            a.accumulate_grad(&ga);
            b.accumulate_grad(&gb);
        };
        Ok(Node::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(back),
        ))
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Node {
        let av = self.value();
        let value = av.map(f);
        let a = self.clone();
        let back = move |g: &Tensor| {
            let mut ga = Tensor::zeros(av.shape());
            for i in 0..g.len() {
                ga.data_mut()[i] = g.data()[i] * df(av.data()[i]);
            }
            a.accumulate_grad(&ga);
        };
        Node::from_op(value, vec![self.clone()], Box::new(back))
    }

    pub fn add(&self, other: &Node) -> Result<Node> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Node) -> Result<Node> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Node) -> Result<Node> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn exp(&self) -> Node {
        self.unary(f64::exp, f64::exp)
    }

    pub fn log(&self) -> Result<Node> {
        let v = self.value();
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(
                "log requires strictly positive inputs".into(),
            ));
        }
        Ok(self.unary(f64::ln, |x| 1.0 / x))
    }

    pub fn tanh(&self) -> Node {
        self.unary(f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    /// relu; derivative at exactly 0 is defined as 0.
    pub fn relu(&self) -> Node {
        self.unary(
            |x| if x > 0.0 { x } else { 0.0 },
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn square(&self) -> Node {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn neg(&self) -> Node {
        self.unary(|x| -x, |_| -1.0)
    }

    pub fn scale(&self, c: f64) -> Node {
        self.unary(move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Node {
        self.unary(move |x| x + c, |_| 1.0)
    }

    /// Elementwise clamp; gradient passes through where the value was inside
    /// the range and is zero where the clamp was active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Node {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Node) -> Result<Node> {
        let (av, bv) = (self.value(), other.value());
        let value = av.matmul(&bv)?;
        let (a, b) = (self.clone(), other.clone());
        let back = move |g: &Tensor| {
            // a.grad += g · bᵀ ; b.grad += aᵀ · g
            let gb_t = bv.transpose().unwrap();
            a.accumulate_grad(&g.matmul(&gb_t).unwrap());
            let a_t = av.transpose().unwrap();
            b.accumulate_grad(&a_t.matmul(g).unwrap());
        };
        Ok(Node::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(back),
        ))
    }

    /// Broadcast a rank-1 bias of length n over the rows of an m×n matrix.
    pub fn add_row(&self, bias: &Node) -> Result<Node> {
        let (av, bv) = (self.value(), bias.value());
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dimension("add_row", av.shape(), bv.shape()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = av.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.get2(i, j) + bv.data()[j];
                out.set2(i, j, v);
            }
        }
        let (a, b) = (self.clone(), bias.clone());
        let back = move |g: &Tensor| {
            a.accumulate_grad(g);
            let mut gb = Tensor::zeros(&[n]);
            for i in 0..m {
                for j in 0..n {
                    gb.data_mut()[j] += g.get2(i, j);
                }
            }
            b.accumulate_grad(&gb);
        };
        Ok(Node::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(back),
        ))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Node {
        let av = self.value();
        let value = Tensor::scalar(av.sum());
        let a = self.clone();
        let shape = av.shape().to_vec();
        let back = move |g: &Tensor| {
            let gi = g.data()[0];
            a.accumulate_grad(&Tensor::ones(&shape).map(|x| x * gi));
        };
        Node::from_op(value, vec![self.clone()], Box::new(back))
    }

    pub fn mean(&self) -> Node {
        let av = self.value();
        let count = av.len() as f64;
        let value = Tensor::scalar(av.mean());
        let a = self.clone();
        let shape = av.shape().to_vec();
        let back = move |g: &Tensor| {
            let gi = g.data()[0] / count;
            a.accumulate_grad(&Tensor::ones(&shape).map(|x| x * gi));
        };
        Node::from_op(value, vec![self.clone()], Box::new(back))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Node> {
        let av = self.value();
        if av.rank() != 2 || axis > 1 {
            return Err(Error::dimension(
                "reduce axis must be < rank 2",
                av.shape(),
                &[axis],
            ));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let (out_len, count) = if axis == 0 { (n, m) } else { (m, n) };
        let mut out = Tensor::zeros(&[out_len]);
        for i in 0..m {
            for j in 0..n {
                let k = if axis == 0 { j } else { i };
                out.data_mut()[k] += av.get2(i, j);
            }
        }
        if mean {
            out = out.map(|x| x / count as f64);
        }
        let a = self.clone();
        let back = move |g: &Tensor| {
            let mut ga = Tensor::zeros(&[m, n]);
            let scale = if mean { 1.0 / count as f64 } else { 1.0 };
            for i in 0..m {
                for j in 0..n {
                    let k = if axis == 0 { j } else { i };
                    ga.set2(i, j, g.data()[k] * scale);
                }
            }
            a.accumulate_grad(&ga);
        };
        Ok(Node::from_op(out, vec![self.clone()], Box::new(back)))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Node> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Node> {
        self.reduce_axis(axis, true)
    }

    /// Numerically stable log-sum-exp over the last axis. An n×c input
    /// yields a length-n vector; a rank-1 input is treated as one row.
    pub fn log_sum_exp(&self) -> Result<Node> {
        let av = self.value();
        let (m, n) = (av.rows(), av.cols());
        if n == 0 {
            return Err(Error::Contract("log_sum_exp over empty axis".into()));
        }
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            out.data_mut()[i] = mx + s.ln();
        }
        let a = self.clone();
        let shape = av.shape().to_vec();
        let lse = out.clone();
        let back = move |g: &Tensor| {
            let mut ga = Tensor::zeros(&shape);
            for i in 0..m {
                for j in 0..n {
                    // softmax of the row times upstream gradient
                    let p = (av.data()[i * n + j] - lse.data()[i]).exp();
                    ga.data_mut()[i * n + j] = g.data()[i] * p;
                }
            }
            a.accumulate_grad(&ga);
        };
        Ok(Node::from_op(out, vec![self.clone()], Box::new(back)))
    }

    // ---- structural ops ----

    /// Pick element `labels[i]` from row i of an n×C matrix.
    pub fn select_columns(&self, labels: &[usize]) -> Result<Node> {
        let av = self.value();
        if av.rank() != 2 || av.shape()[0] != labels.len() {
            return Err(Error::dimension(
                "select_columns",
                av.shape(),
                &[labels.len()],
            ));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            out.data_mut()[i] = av.get2(i, labels[i]);
        }
        let a = self.clone();
        let labels = labels.to_vec();
        let back = move |g: &Tensor| {
            let mut ga = Tensor::zeros(&[m, n]);
            for i in 0..m {
                ga.set2(i, labels[i], g.data()[i]);
            }
            a.accumulate_grad(&ga);
        };
        Ok(Node::from_op(out, vec![self.clone()], Box::new(back)))
    }

    /// Stack K length-n vectors as the columns of an n×K matrix.
    pub fn stack_columns(columns: &[Node]) -> Result<Node> {
        if columns.is_empty() {
            return Err(Error::Contract("stack_columns of zero columns".into()));
        }
        let n = columns[0].value().len();
        for c in columns {
            let v = c.value();
            if v.rank() != 1 || v.len() != n {
                return Err(Error::dimension("stack_columns", &[n], v.shape()));
            }
        }
        let k = columns.len();
        let mut out = Tensor::zeros(&[n, k]);
        for (j, c) in columns.iter().enumerate() {
            let v = c.value();
            for i in 0..n {
                out.set2(i, j, v.data()[i]);
            }
        }
        let parents: Vec<Node> = columns.to_vec();
        let cols = columns.to_vec();
        let back = move |g: &Tensor| {
            for (j, c) in cols.iter().enumerate() {
                let mut gc = Tensor::zeros(&[n]);
                for i in 0..n {
                    gc.data_mut()[i] = g.get2(i, j);
                }
                c.accumulate_grad(&gc);
            }
        };
        Ok(Node::from_op(out, parents, Box::new(back)))
    }

    /// Mean-pool embedding rows for each token-id list.
    pub fn embedding_bag(&self, token_lists: &[Vec<u32>]) -> Result<Node> {
        let ev = self.value();
        if ev.rank() != 2 {
            return Err(Error::Contract("embedding matrix must be rank 2".into()));
        }
        let (vocab, dim) = (ev.shape()[0], ev.shape()[1]);
        for list in token_lists {
            if list.is_empty() {
                return Err(Error::Contract("empty token list".into()));
            }
            if let Some(&bad) = list.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Contract(format!(
                    "token id {bad} exceeds vocabulary size {vocab}"
                )));
            }
        }
        let n = token_lists.len();
        let mut out = Tensor::zeros(&[n, dim]);
        for (i, list) in token_lists.iter().enumerate() {
            let inv = 1.0 / list.len() as f64;
            for &t in list {
                for j in 0..dim {
                    let v = out.get2(i, j) + ev.get2(t as usize, j) * inv;
                    out.set2(i, j, v);
                }
            }
        }
        let e = self.clone();
        let lists = token_lists.to_vec();
        let back = move |g: &Tensor| {
            let mut ge = Tensor::zeros(&[vocab, dim]);
            for (i, list) in lists.iter().enumerate() {
                let inv = 1.0 / list.len() as f64;
                for &t in list {
                    for j in 0..dim {
                        let v = ge.get2(t as usize, j) + g.get2(i, j) * inv;
                        ge.set2(t as usize, j, v);
                    }
                }
            }
            e.accumulate_grad(&ge);
        };
        Ok(Node::from_op(out, vec![self.clone()], Box::new(back)))
    }

    // ---- dropout ----

    /// Inverted dropout with an explicit pre-sampled mask of keep indicators.
    /// Survivors are scaled by 1/(1-rate) inside the mask already.
    pub fn dropout_with_mask(&self, mask: &Tensor) -> Result<Node> {
        let av = self.value();
        if av.shape() != mask.shape() {
            return Err(Error::dimension("dropout mask", av.shape(), mask.shape()));
        }
        let value = av.zip(mask, |a, m| a * m)?;
        let a = self.clone();
        let mask = mask.clone();
        let back = move |g: &Tensor| {
            a.accumulate_grad(&g.zip(&mask, |gi, m| gi * m).unwrap());
        };
        Ok(Node::from_op(value, vec![self.clone()], Box::new(back)))
    }

    /// Inverted dropout. In stochastic mode each element is zeroed with
    /// probability `rate` and survivors scaled by 1/(1-rate); otherwise the
    /// node is returned unchanged (identity). Rate 0 is always the identity.
    pub fn dropout(
        &self,
        rate: f64,
        rng: &mut ChaCha8Rng,
        stochastic: bool,
    ) -> Result<Node> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !stochastic || rate == 0.0 {
            return Ok(self.clone());
        }
        let mask = sample_dropout_mask(&self.shape(), rate, rng);
        self.dropout_with_mask(&mask)
    }
}

/// Sample a keep mask with survivor scaling 1/(1-rate) baked in.
pub fn sample_dropout_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep_scale = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(shape);
    for v in mask.data_mut() {
        *v = if rng.gen::<f64>() < rate { 0.0 } else { keep_scale };
    }
    mask
}

/// Reverse-topological gradient accumulation from a scalar root.
///
/// Leaf gradients accumulate additively: calling `backward` twice without
/// resetting grads doubles them. Interior-node grads are scratch space and
/// are reset on every call. Training code creates fresh leaves per step;
/// `zero_grad` is available where a graph is reused.
pub fn backward(root: &Node) -> Result<()> {
    if !root.value().is_scalar() {
        return Err(Error::Contract(format!(
            "backward root must be scalar, got shape {:?}",
            root.shape()
        )));
    }
    let order = topo_order(root);
    for node in &order {
        let interior = node.inner.borrow().backward.is_some();
        if interior {
            node.zero_grad();
        }
    }
    root.accumulate_grad(&Tensor::ones(&root.shape()));
    for node in order.iter().rev() {
        let g = node.grad();
        let data = node.inner.borrow();
        if let Some(back) = &data.backward {
            back(&g);
        }
    }
    Ok(())
}

fn topo_order(root: &Node) -> Vec<Node> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const RefCell<NodeData>> = HashSet::new();
    // iterative DFS; second stack frame marks post-order emission
    let mut stack: Vec<(Node, bool)> = vec![(root.clone(), false)];
    while let Some((node, emit)) = stack.pop() {
        if emit {
            order.push(node);
            continue;
        }
        if !visited.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.inner.borrow().parents.iter() {
            if !visited.contains(&p.ptr()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Central-difference gradient check for a scalar function of a parameter
/// tensor. Returns the max over coordinates of
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Node) -> Result<Node>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("step h={h} outside [1e-6, 1e-3]")));
    }
    let leaf = Node::leaf(theta.clone());
    let root = f(&leaf)?;
    let root_value = root.value().scalar_value()?;
    if !root_value.is_finite() {
        return Err(Error::Evaluation("non-finite function value".into()));
    }
    backward(&root)?;
    let analytic = leaf.grad();

    let eval = |t: &Tensor| -> Result<f64> {
        let leaf = Node::leaf(t.clone());
        let v = f(&leaf)?.value().scalar_value()?;
        if !v.is_finite() {
            return Err(Error::Evaluation("non-finite function value".into()));
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
