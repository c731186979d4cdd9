//! Wengert-tape reverse-mode automatic differentiation.
//!
//! Ops are recorded in topological order during the forward pass and
//! replayed in reverse to accumulate adjoints. The op catalog is closed:
//! it is exactly the set needed for MLP forward passes and the adversarial
//! objective (matmul, bias broadcast, tanh, softplus, square, scale,
//! elementwise add/mul, reduce mean/sum).
//!
//! Every forward op validates the output for non-finite values; NaN/Inf is
//! an error state, not a silent poison.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Mean(NodeId),
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    is_param: bool,
}

/// Numerically stable softplus: log(1 + e^v) = log1p(e^{-|v|}) + max(v, 0).
pub fn softplus_scalar(v: f64) -> f64 {
    (-v.abs()).exp().ln_1p() + v.max(0.0)
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient from `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, is_param: bool) -> NodeId {
        self.nodes.push(Node { value, op, is_param });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name, node: self.nodes.len() });
        }
        Ok(self.push_unchecked(value, op, false))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = self.value(a).dims2()?;
        let (kb, m) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("[{}, {}] x [{}, {}]", n, ka, kb, m),
            });
        }
        let mut out = Tensor::zeros(vec![n, m]);
        dgemm(n, ka, m, 1.0, self.value(a).data(), self.value(b).data(), 0.0, out.data_mut());
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Adds a length-m bias row to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(bias).shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                details: format!("matrix [{}, {}] vs bias {:?}", n, m, self.value(bias).shape()),
            });
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..n {
            for c in 0..m {
                out.data_mut()[r * m + c] += b[c];
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, f64::tanh);
        self.push("tanh", out, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, softplus_scalar);
        self.push("softplus", out, Op::Softplus(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, |v| v * v);
        self.push("square", out, Op::Square(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.map_unary(x, |v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    fn zip_binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar output. Returns one gradient tensor per
    /// node, populated only for nodes marked as parameters.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(grad) = adjoints[i].take() else { continue };
            let keep = self.nodes[i].is_param;
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(a).dims2()?;
                    let (_, m) = self.value(b).dims2()?;
                    // dA = dC * B^T
                    let mut da = Tensor::zeros(vec![n, k]);
                    dgemm_bt(n, m, k, grad.data(), self.value(b).data(), da.data_mut());
                    // dB = A^T * dC
                    let mut db = Tensor::zeros(vec![k, m]);
                    dgemm_at(k, n, m, self.value(a).data(), grad.data(), db.data_mut());
                    accumulate(&mut adjoints[a.0], da);
                    accumulate(&mut adjoints[b.0], db);
                }
                Op::AddBias(x, bias) => {
                    let (n, m) = self.value(x).dims2()?;
                    let mut db = Tensor::zeros(vec![m]);
                    for r in 0..n {
                        for c in 0..m {
                            db.data_mut()[c] += grad.data()[r * m + c];
                        }
                    }
                    accumulate(&mut adjoints[x.0], grad.clone());
                    accumulate(&mut adjoints[bias.0], db);
                }
                Op::Tanh(x) => {
                    // d tanh = 1 - tanh^2, using the saved forward output
                    let y = &self.nodes[i].value;
                    let dx = zip_with(&grad, y, |g, y| g * (1.0 - y * y));
                    accumulate(&mut adjoints[x.0], dx);
                }
                Op::Softplus(x) => {
                    let dx = zip_with(&grad, self.value(x), |g, v| g * sigmoid_scalar(v));
                    accumulate(&mut adjoints[x.0], dx);
                }
                Op::Square(x) => {
                    let dx = zip_with(&grad, self.value(x), |g, v| g * 2.0 * v);
                    accumulate(&mut adjoints[x.0], dx);
                }
                Op::Scale(x, s) => {
                    let dx = map_with(&grad, |g| g * s);
                    accumulate(&mut adjoints[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints[a.0], grad.clone());
                    accumulate(&mut adjoints[b.0], grad.clone());
                }
                Op::Mul(a, b) => {
                    let da = zip_with(&grad, self.value(b), |g, v| g * v);
                    let db = zip_with(&grad, self.value(a), |g, v| g * v);
                    accumulate(&mut adjoints[a.0], da);
                    accumulate(&mut adjoints[b.0], db);
                }
                Op::Mean(x) => {
                    let n = self.value(x).len() as f64;
                    let g = grad.scalar_value() / n;
                    let dx = Tensor::new(
                        self.value(x).shape().to_vec(),
                        vec![g; self.value(x).len()],
                    )?;
                    accumulate(&mut adjoints[x.0], dx);
                }
                Op::Sum(x) => {
                    let g = grad.scalar_value();
                    let dx = Tensor::new(
                        self.value(x).shape().to_vec(),
                        vec![g; self.value(x).len()],
                    )?;
                    accumulate(&mut adjoints[x.0], dx);
                }
            }
            if keep {
                adjoints[i] = Some(grad);
            }
        }

        let mut grads = Gradients { by_node: vec![None; self.nodes.len()] };
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = adjoints[i].take().unwrap_or_else(|| Tensor::zeros_like(&node.value));
                grads.by_node[i] = Some(g);
            }
        }
        Ok(grads)
    }
}

pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. the given parameter node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.index()).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Tensor>, incoming: Tensor) {
    match slot {
        Some(existing) => {
            for (e, i) in existing.data_mut().iter_mut().zip(incoming.data()) {
                *e += i;
            }
        }
        None => *slot = Some(incoming),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map_with(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// C = alpha * A(n x k) * B(k x m) + beta * C.
fn dgemm(n: usize, k: usize, m: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), m as isize, 1,
            beta,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// C(n x k) = G(n x m) * B(k x m)^T.
fn dgemm_bt(n: usize, m: usize, k: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            g.as_ptr(), m as isize, 1,
            b.as_ptr(), 1, m as isize,
            0.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// C(k x m) = A(n x k)^T * G(n x m).
fn dgemm_at(k: usize, n: usize, m: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            k, n, m, 1.0,
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), m as isize, 1,
            0.0,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, over every entry of every parameter.
///
/// `build` must construct the same scalar program on any tape given leaf
/// nodes for the parameters; it is re-run at perturbed parameter values.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step h must be positive".into()));
    }
    for p in params {
        if !p.all_finite() {
            return Err(Error::InvalidArgument("grad_check params must be finite".into()));
        }
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let v = tape.value(out).scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check_eval", node: out.index() });
        }
        Ok(v)
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("param gradient").clone();
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_analytic_values() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // no overflow in the stable form
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus_scalar(-745.0) >= 0.0);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::matrix(3, 3, vec![
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
        ]).unwrap());
        let a = Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap();
        let an = tape.leaf(a.clone());
        let out = tape.matmul(eye, an).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softplus_gradient_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_square_gradient() {
        // grad of mean(x^2) at (1, 2, 3) is (2/3, 4/3, 2)
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.square(x).unwrap();
        let m = tape.mean(sq).unwrap();
        let grads = tape.backward(m).unwrap();
        let g = grads.get(x).unwrap().data();
        for (got, want) in g.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1e308));
        let b = tape.leaf(Tensor::scalar(1e308));
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let params = [Tensor::vector(vec![0.3, -1.2, 2.5])];
        let err = grad_check(
            |tape, ids| {
                let s = tape.scale(ids[0], 3.0)?;
                tape.sum(s)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "linear grad_check error {}", err);
    }

    #[test]
    fn grad_check_softplus_chain() {
        let params = [Tensor::vector(vec![0.4, -0.7, 1.1, 0.0])];
        let err = grad_check(
            |tape, ids| {
                let a = tape.softplus(ids[0])?;
                let b = tape.softplus(a)?;
                let c = tape.softplus(b)?;
                tape.mean(c)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softplus chain grad_check error {}", err);
    }

    #[test]
    fn grad_check_catches_wrong_rule() {
        // Negative control: pretend d/dx x^2 = x by building x*stop(x)
        // via a deliberately mismatched program pair. Here we check the
        // checker itself: compare square's analytic grad against a
        // finite-difference of a DIFFERENT function (cube).
        let params = [Tensor::vector(vec![1.5, -0.8])];
        // analytic path: mean(square(x)); perturbed path re-runs the same
        // build, so to fake a wrong rule we check cube vs square manually.
        let mut tape = Tape::new();
        let x = tape.param(params[0].clone());
        let sq = tape.square(x).unwrap();
        let m = tape.mean(sq).unwrap();
        let grads = tape.backward(m).unwrap();
        let analytic = grads.get(x).unwrap().data().to_vec();

        let h = 1e-5;
        let cube_loss = |v: &[f64]| v.iter().map(|x| x * x * x).sum::<f64>() / v.len() as f64;
        let mut max_rel = 0.0_f64;
        let mut vals = params[0].data().to_vec();
        for i in 0..vals.len() {
            let orig = vals[i];
            vals[i] = orig + h;
            let fp = cube_loss(&vals);
            vals[i] = orig - h;
            let fm = cube_loss(&vals);
            vals[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel > 1e-2, "negative control should disagree, got {}", max_rel);
    }

    #[test]
    fn backward_linearity() {
        // backward of (f + g) equals backward(f) + backward(g)
        let x0 = Tensor::vector(vec![0.5, -1.0, 2.0]);

        let grad_of = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.param(x0.clone());
            let out = match which {
                0 => {
                    let sq = tape.square(x).unwrap();
                    tape.mean(sq).unwrap()
                }
                1 => {
                    let th = tape.tanh(x).unwrap();
                    tape.sum(th).unwrap()
                }
                _ => {
                    let sq = tape.square(x).unwrap();
                    let m = tape.mean(sq).unwrap();
                    let th = tape.tanh(x).unwrap();
                    let s = tape.sum(th).unwrap();
                    tape.add(m, s).unwrap()
                }
            };
            let grads = tape.backward(out).unwrap();
            grads.get(x).unwrap().data().to_vec()
        };

        let gf = grad_of(0);
        let gg = grad_of(1);
        let gsum = grad_of(2);
        for i in 0..3 {
            assert!((gf[i] + gg[i] - gsum[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let t = tape.tanh(x).unwrap();
            let s = tape.softplus(t).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
