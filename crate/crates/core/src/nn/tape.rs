//! Reverse-mode autodiff over the generator's layer vocabulary.
//!
//! The tape is append-only; every value is kept until [`Tape::backward`]
//! has run, which makes it suitable for training passes. Inference goes
//! through the eager backend instead.

use ndarray::{s, Array1, Array5, ArrayD, ArrayView1, ArrayView4, ArrayView5, Axis, Ix1, Ix4, Ix5};

use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    AvgPool {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by a backward sweep.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn v4(&self, v: Var) -> ArrayView4<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("rank-4 activation")
    }

    fn v5(&self, v: Var) -> ArrayView5<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix5>()
            .expect("rank-5 weight")
    }

    fn v1(&self, v: Var) -> ArrayView1<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 bias")
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let y = ops::conv3d(self.v4(x), self.v5(w), b.map(|b| self.v1(b)), stride);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(y.into_dyn(), Op::Conv { x, w, b, stride }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = ops::leaky_relu(self.v4(x), slope);
        let rg = self.rg(x);
        self.push(y.into_dyn(), Op::LeakyRelu { x, slope }, rg)
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (y, inv_std) = ops::instance_norm(self.v4(x));
        let rg = self.rg(x);
        self.push(y.into_dyn(), Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn avg_pool(&mut self, x: Var) -> Var {
        let y = ops::avg_pool2(self.v4(x));
        let rg = self.rg(x);
        self.push(y.into_dyn(), Op::AvgPool { x }, rg)
    }

    pub fn upsample(&mut self, x: Var) -> Var {
        let y = ops::upsample2(self.v4(x));
        let rg = self.rg(x);
        self.push(y.into_dyn(), Op::Upsample { x }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let y = ndarray::concatenate(Axis(0), &[self.v4(a), self.v4(b)]).expect("concat shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(y.into_dyn(), Op::Concat { a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    /// Propagate `seed` (shaped like `root`'s value) back to every leaf that
    /// requires a gradient.
    pub fn backward(&self, root: Var, seed: ArrayD<f64>) -> Grads {
        assert_eq!(seed.shape(), self.nodes[root.0].value.shape(), "seed shape");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g4 = || g.view().into_dimensionality::<Ix4>().expect("rank-4 gradient");
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, stride } => {
                    let xv = self.v4(*x);
                    let wv = self.v5(*w);
                    let k = wv.dim().2;
                    if self.rg(*w) {
                        let dw: Array5<f64> = ops::conv3d_grad_weight(xv, g4(), k, *stride);
                        accumulate(&mut grads, *w, dw.into_dyn());
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let db: Array1<f64> = ops::channel_sum(g4());
                        accumulate(&mut grads, b, db.into_dyn());
                    }
                    if self.rg(*x) {
                        let (_, a, bb, c) = xv.dim();
                        let dx = ops::conv3d_grad_input(g4(), wv, [a, bb, c], *stride);
                        accumulate(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = ops::leaky_relu_grad(self.v4(*x), g4(), *slope);
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = node.value.view().into_dimensionality::<Ix4>().expect("rank-4");
                    let dx = ops::instance_norm_grad(y, inv_std, g4());
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::AvgPool { x } => {
                    accumulate(&mut grads, *x, ops::avg_pool2_grad(g4()).into_dyn());
                }
                Op::Upsample { x } => {
                    accumulate(&mut grads, *x, ops::upsample2_grad(g4()).into_dyn());
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[a.0].value.shape()[0];
                    let gv = g4();
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, gv.slice(s![..ca, .., .., ..]).to_owned().into_dyn());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, gv.slice(s![ca.., .., .., ..]).to_owned().into_dyn());
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
            }
        }
        Grads { grads }
    }
}
