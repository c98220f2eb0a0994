//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough information to
//! push gradients back to its inputs. Nodes are only ever appended, so the tape
//! order is a valid topological order and `backward` is a single reverse sweep.

use super::tensor::{matmul_raw, Tensor};
use super::scan::sigmoid;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation whose vector-Jacobian product is supplied by the caller.
pub trait CustomOp: Send + Sync {
    /// Returns one gradient buffer per input, each matching that input's length.
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// Multiply every element by a one-element tensor.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    LogSoftmaxRows(Var),
    /// `v / ||v||`
    Normalize(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul(a, b))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "add_row width");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(rv.data()).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::AddRow(a, row))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        assert_eq!(self.value(s).len(), 1);
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale(a, c))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Contiguous range `[start, start + len)` of the flat buffer. Keeps rank:
    /// a `[1, n]` input yields `[1, len]`, anything else yields `[len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let data = av.data()[start..start + len].to_vec();
        let shape = if av.shape().len() == 2 && av.rows() == 1 { vec![1, len] } else { vec![len] };
        let t = Tensor::new(shape, data).unwrap();
        self.push(t, Op::Slice(a, start))
    }

    /// Row `i` of a matrix as a `[1, n]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let av = self.value(a);
        let data = av.row(i).to_vec();
        let t = Tensor::new(vec![1, data.len()], data).unwrap();
        self.push(t, Op::Row(a, i))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let n = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let rv = self.value(r);
            assert_eq!(rv.len(), n, "stack_rows width");
            data.extend_from_slice(rv.data());
        }
        let t = Tensor::new(vec![rows.len(), n], data).unwrap();
        self.push(t, Op::StackRows(rows.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Dot product with a constant vector.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Var {
        let w = self.leaf(Tensor::new(self.value(a).shape().to_vec(), weights.to_vec()).expect("dot_const shape"));
        let m = self.mul(a, w);
        self.sum(m)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let lse = super::scan::logsumexp_nonempty(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norm = av.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let data = av.data().iter().map(|x| x / norm).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, Op::Normalize(a))
    }

    /// Records an operation whose output was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        self.push(output, Op::Custom(op, inputs.to_vec()))
    }

    /// Gradients of the one-element node `loss` with respect to all nodes.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        da[i * k + p] = g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av_ip = av.data()[i * k + p];
                        if av_ip == 0.0 {
                            continue;
                        }
                        db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, x)| *d += av_ip * x);
                    }
                }
                add_into(&mut grads[a.0], &da);
                add_into(&mut grads[b.0], &db);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &da);
                add_into(&mut grads[b.0], &db);
            }
            Op::AddRow(a, r) => {
                add_into(&mut grads[a.0], g);
                let n = self.value(*r).len();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                add_into(&mut grads[r.0], &dr);
            }
            Op::MulScalar(a, s) => {
                let sv = self.item(*s);
                let da: Vec<f64> = g.iter().map(|x| x * sv).collect();
                let ds: f64 = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).sum();
                add_into(&mut grads[a.0], &da);
                add_into(&mut grads[s.0], &[ds]);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(x, y)| if *y > 0.0 { *x } else if *y < 0.0 { -*x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Slice(a, start) => {
                let dst = grads[a.0].get_or_insert_with(|| vec![0.0; self.value(*a).len()]);
                dst[*start..*start + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Row(a, i) => {
                let n = g.len();
                let dst = grads[a.0].get_or_insert_with(|| vec![0.0; self.value(*a).len()]);
                dst[i * n..(i + 1) * n].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (i, r) in rows.iter().enumerate() {
                    add_into(&mut grads[r.0], &g[i * n..(i + 1) * n]);
                }
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                add_into(&mut grads[a.0], &da);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut da = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(out.data().chunks(n)) {
                    let gs: f64 = grow.iter().sum();
                    da.extend(grow.iter().zip(yrow).map(|(x, y)| x - y.exp() * gs));
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::Normalize(a) => {
                let av = self.data(*a);
                let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                let y = out.data();
                let yg: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                let da: Vec<f64> = g.iter().zip(y).map(|(x, yy)| (x - yy * yg) / norm).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = op.backward(g, &ins, out);
                for (v, d) in inputs.iter().zip(dins) {
                    add_into(&mut grads[v.0], &d);
                }
            }
        }
    }
}
