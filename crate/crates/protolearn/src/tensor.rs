//! Minimal dense f64 tensors with tape-based reverse-mode differentiation.
//! Exactly the operations the classifier needs: matrix-vector products,
//! elementwise arithmetic, tanh/sigmoid, child summation, concatenation,
//! softmax, and cross-entropy. Every forward op adds to a deterministic
//! arithmetic-operation counter, which the linear-time-inference check
//! relies on.

use rand::Rng;

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Glorot-uniform initialization for a rows x cols weight matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Standard-normal vector scaled by sigma (Box-Muller, two uniforms).
pub fn normal<R: Rng>(len: usize, sigma: f64, rng: &mut R) -> Tensor {
    let data = (0..len)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::vector(data)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matvec(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    SumList(Vec<usize>),
    Concat(Vec<usize>),
    Softmax(usize),
    CrossEntropy(usize, usize),
    MeanList(Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// One forward computation graph. Construction order is topological, so the
/// backward pass is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    ops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            ops: 0,
        }
    }

    /// Arithmetic operations executed so far (multiply-add pairs count 2).
    pub fn op_count(&self) -> u64 {
        self.ops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// w: [n, m], x: [m] -> [n]
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wt, xt) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert_eq!(wt.shape.len(), 2, "matvec weight must be 2-d");
        let (n, m) = (wt.shape[0], wt.shape[1]);
        assert_eq!(xt.shape, vec![m], "matvec shape mismatch");
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &wt.data[i * m..(i + 1) * m];
            out[i] = row.iter().zip(&xt.data).map(|(a, b)| a * b).sum();
        }
        self.ops += (2 * n * m) as u64;
        self.push(Op::Matvec(w.0, x.0), Tensor::vector(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(at.shape, bt.shape, "add shape mismatch");
        let out = at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect();
        self.ops += at.len() as u64;
        self.push(Op::Add(a.0, b.0), Tensor::new(at.shape.clone(), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(at.shape, bt.shape, "mul shape mismatch");
        let out = at.data.iter().zip(&bt.data).map(|(x, y)| x * y).collect();
        self.ops += at.len() as u64;
        self.push(Op::Mul(a.0, b.0), Tensor::new(at.shape.clone(), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let at = &self.nodes[a.0].value;
        let out = at.data.iter().map(|x| x.tanh()).collect();
        self.ops += at.len() as u64;
        self.push(Op::Tanh(a.0), Tensor::new(at.shape.clone(), out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let at = &self.nodes[a.0].value;
        let out = at.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        self.ops += at.len() as u64;
        self.push(Op::Sigmoid(a.0), Tensor::new(at.shape.clone(), out))
    }

    /// Elementwise sum over any number of same-shaped vectors; the empty
    /// list is not allowed (callers pass an explicit zero leaf instead).
    pub fn sum_list(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "sum_list of nothing");
        let shape = self.nodes[items[0].0].value.shape.clone();
        let mut out = vec![0.0; self.nodes[items[0].0].value.len()];
        for v in items {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape, shape, "sum_list shape mismatch");
            for (o, x) in out.iter_mut().zip(&t.data) {
                *o += x;
            }
        }
        self.ops += (out.len() * items.len()) as u64;
        let ids = items.iter().map(|v| v.0).collect();
        self.push(Op::SumList(ids), Tensor::new(shape, out))
    }

    pub fn concat(&mut self, items: &[Var]) -> Var {
        let mut out = Vec::new();
        for v in items {
            out.extend_from_slice(&self.nodes[v.0].value.data);
        }
        self.ops += out.len() as u64;
        let ids = items.iter().map(|v| v.0).collect();
        self.push(Op::Concat(ids), Tensor::vector(out))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let at = &self.nodes[a.0].value;
        let max = at.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = at.data.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = exps.iter().map(|e| e / z).collect();
        self.ops += (3 * at.len()) as u64;
        self.push(Op::Softmax(a.0), Tensor::new(at.shape.clone(), out))
    }

    /// Negative log-likelihood of `label` under a probability vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Var {
        let pt = &self.nodes[probs.0].value;
        assert!(label < pt.len(), "label out of range");
        let p = pt.data[label].max(1e-12);
        self.ops += 1;
        self.push(
            Op::CrossEntropy(probs.0, label),
            Tensor::vector(vec![-p.ln()]),
        )
    }

    pub fn mean_list(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "mean of nothing");
        let sum: f64 = items.iter().map(|v| self.nodes[v.0].value.data[0]).sum();
        self.ops += items.len() as u64 + 1;
        let ids = items.iter().map(|v| v.0).collect();
        self.push(
            Op::MeanList(ids),
            Tensor::vector(vec![sum / items.len() as f64]),
        )
    }

    /// Reverse accumulation from a scalar root; returns one gradient buffer
    /// per node, indexable through [`Tape::grad`] by Var.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = grads[i].clone();
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matvec(w, x) => {
                    let wt = &self.nodes[*w].value;
                    let xt = &self.nodes[*x].value;
                    let (n, m) = (wt.shape[0], wt.shape[1]);
                    for r in 0..n {
                        for c in 0..m {
                            grads[*w][r * m + c] += g[r] * xt.data[c];
                        }
                    }
                    for c in 0..m {
                        let mut acc = 0.0;
                        for r in 0..n {
                            acc += wt.data[r * m + c] * g[r];
                        }
                        grads[*x][c] += acc;
                    }
                }
                Op::Add(a, b) => {
                    for (k, gv) in g.iter().enumerate() {
                        grads[*a][k] += gv;
                        grads[*b][k] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let at = self.nodes[*a].value.data.clone();
                    let bt = self.nodes[*b].value.data.clone();
                    for (k, gv) in g.iter().enumerate() {
                        grads[*a][k] += gv * bt[k];
                        grads[*b][k] += gv * at[k];
                    }
                }
                Op::Tanh(a) => {
                    let yt = &self.nodes[i].value;
                    for (k, gv) in g.iter().enumerate() {
                        grads[*a][k] += gv * (1.0 - yt.data[k] * yt.data[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let yt = &self.nodes[i].value;
                    for (k, gv) in g.iter().enumerate() {
                        grads[*a][k] += gv * yt.data[k] * (1.0 - yt.data[k]);
                    }
                }
                Op::SumList(items) => {
                    for a in items {
                        for (k, gv) in g.iter().enumerate() {
                            grads[*a][k] += gv;
                        }
                    }
                }
                Op::Concat(items) => {
                    let mut off = 0;
                    for a in items {
                        let len = self.nodes[*a].value.len();
                        for k in 0..len {
                            grads[*a][k] += g[off + k];
                        }
                        off += len;
                    }
                }
                Op::Softmax(a) => {
                    let p = &self.nodes[i].value.data;
                    let dot: f64 = g.iter().zip(p.iter()).map(|(gv, pv)| gv * pv).sum();
                    for (k, pv) in p.iter().enumerate() {
                        grads[*a][k] += pv * (g[k] - dot);
                    }
                }
                Op::CrossEntropy(a, label) => {
                    let p = self.nodes[*a].value.data[*label].max(1e-12);
                    grads[*a][*label] += -g[0] / p;
                }
                Op::MeanList(items) => {
                    let scale = g[0] / items.len() as f64;
                    for a in items {
                        grads[*a][0] += scale;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

/// One RMSprop update: v <- decay v + (1-decay) g^2; p <- p - lr g/(sqrt(v)+eps).
pub fn rmsprop_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut [f64],
    lr: f64,
    decay: f64,
    eps: f64,
) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), state.len());
    for ((p, g), v) in param.iter_mut().zip(grad).zip(state.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
}
