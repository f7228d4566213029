//! Reverse-mode autodiff tape.
//!
//! The tape records every operation as a node whose parents always have
//! smaller indices, so backward accumulation is a single reverse sweep.
//! Gradients are accumulated only for paths reaching [`TapeEngine::leaf`]
//! tensors; constants terminate the sweep.

use std::cell::RefCell;

use ndarray::Array2;

use super::{kernels, Engine};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    SumAll(usize),
    Abs(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct TapeEngine {
    nodes: RefCell<Vec<Node>>,
}

impl TapeEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a trainable tensor.
    pub fn leaf(&self, v: Array2<f64>) -> Var {
        self.push(v, Op::Leaf)
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn val(&self, i: usize) -> Array2<f64> {
        self.nodes.borrow()[i].value.clone()
    }

    /// Reverse sweep from `root`, which is seeded with a gradient of ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let consts: Vec<bool> = nodes.iter().map(|n| matches!(n.op, Op::Const)).collect();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array2::ones(nodes[root.0].value.dim()));

        for i in (0..=root.0).rev() {
            if matches!(nodes[i].op, Op::Const | Op::Leaf) {
                continue; // leaf grads stay in place for callers to read
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].op {
                Op::Const | Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, &consts,*a, g.clone());
                    acc(&mut grads, &consts,*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &consts,*a, g.clone());
                    acc(&mut grads, &consts,*b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, &consts,*a, &g * &nodes[*b].value);
                    acc(&mut grads, &consts,*b, &g * &nodes[*a].value);
                }
                Op::Scale(a, k) => acc(&mut grads, &consts,*a, g.mapv(|x| x * k)),
                Op::MatMul(a, b) => {
                    acc(&mut grads, &consts,*a, g.dot(&nodes[*b].value.t()));
                    acc(&mut grads, &consts,*b, nodes[*a].value.t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, &consts,*a, g.t().to_owned()),
                Op::Sigmoid(a) => {
                    let y = &nodes[i].value;
                    acc(&mut grads, &consts,*a, &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::SoftmaxRows(a) => {
                    let y = &nodes[i].value;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(yv, gv)| yv * gv)
                            .sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, &consts,*a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    for (k, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(k);
                    }
                    acc(&mut grads, &consts,*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = nodes[p].value.nrows();
                        let gp = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                        acc(&mut grads, &consts,p, gp);
                        at += rows;
                    }
                }
                Op::SumAll(a) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, &consts,*a, Array2::from_elem(nodes[*a].value.dim(), gv));
                }
                Op::Abs(a) => {
                    let sign = nodes[*a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, &consts,*a, &g * &sign);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], consts: &[bool], i: usize, delta: Array2<f64>) {
    if consts[i] {
        return;
    }
    match &mut grads[i] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros shape is unknown here,
    /// so an untouched tensor returns `None`.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Engine for TapeEngine {
    type T = Var;

    fn constant(&self, v: Array2<f64>) -> Var {
        self.push(v, Op::Const)
    }

    fn value(&self, t: &Var) -> Array2<f64> {
        self.val(t.0)
    }

    fn dims(&self, t: &Var) -> (usize, usize) {
        self.nodes.borrow()[t.0].value.dim()
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        let v = kernels::add(&self.val(a.0), &self.val(b.0));
        self.push(v, Op::Add(a.0, b.0))
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        let v = kernels::sub(&self.val(a.0), &self.val(b.0));
        self.push(v, Op::Sub(a.0, b.0))
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        let v = kernels::mul(&self.val(a.0), &self.val(b.0));
        self.push(v, Op::Mul(a.0, b.0))
    }

    fn scale(&self, a: &Var, k: f64) -> Var {
        let v = kernels::scale(&self.val(a.0), k);
        self.push(v, Op::Scale(a.0, k))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        let v = kernels::matmul(&self.val(a.0), &self.val(b.0));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    fn transpose(&self, a: &Var) -> Var {
        let v = kernels::transpose(&self.val(a.0));
        self.push(v, Op::Transpose(a.0))
    }

    fn sigmoid(&self, a: &Var) -> Var {
        let v = kernels::sigmoid(&self.val(a.0));
        self.push(v, Op::Sigmoid(a.0))
    }

    fn softmax_rows(&self, a: &Var) -> Var {
        let v = kernels::softmax_rows(&self.val(a.0));
        self.push(v, Op::SoftmaxRows(a.0))
    }

    fn select_rows(&self, a: &Var, idx: &[usize]) -> Var {
        let v = kernels::select_rows(&self.val(a.0), idx);
        self.push(v, Op::SelectRows(a.0, idx.to_vec()))
    }

    fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<Array2<f64>> = parts.iter().map(|p| self.val(p.0)).collect();
        let refs: Vec<&Array2<f64>> = vals.iter().collect();
        let v = kernels::concat_rows(&refs);
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    fn sum_all(&self, a: &Var) -> Var {
        let v = Array2::from_elem((1, 1), kernels::sum_all(&self.val(a.0)));
        self.push(v, Op::SumAll(a.0))
    }

    fn abs(&self, a: &Var) -> Var {
        let v = kernels::abs(&self.val(a.0));
        self.push(v, Op::Abs(a.0))
    }
}
