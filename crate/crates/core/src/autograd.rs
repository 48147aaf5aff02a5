//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every variable that transitively depends on a parameter or
//! a leaf created with [`Graph::leaf`].

use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeom, DeformGeom, DeformGrads};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Deform { x: Var, w: Var, b: Option<Var>, offsets: Var, mask: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Silu(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    DiffX(Var),
    DiffY(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    params: BTreeMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), store: None, params: BTreeMap::new() }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph { nodes: Vec::new(), store: Some(store), params: BTreeMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            Op::Conv { x, w, b, .. } => self.any_tracked(&[*x, *w]) || b.is_some_and(|b| self.tracked(b)),
            Op::Deform { x, w, b, offsets, mask } => {
                self.any_tracked(&[*x, *w, *offsets, *mask]) || b.is_some_and(|b| self.tracked(b))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.any_tracked(&[*a, *b]),
            Op::Concat(parts) => self.any_tracked(parts),
            Op::Scale(a, _)
            | Op::Narrow { x: a, .. }
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Upsample2x(a)
            | Op::Abs(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::DiffX(a)
            | Op::DiffY(a) => self.tracked(*a),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.tracked(*v))
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Named parameter from the attached store. Repeated lookups of the same
    /// name return the same variable so shared weights accumulate gradients.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(ws.c, xs.c, "conv weight expects {} input channels, got {}", ws.c, xs.c);
        assert_eq!(ws.h, ws.w, "square kernels only");
        let geom = ConvGeom { c: xs.c, h: xs.h, w: xs.w, k: ws.h, stride, pad };
        let (ho, wo) = geom.out_hw();
        let o = ws.n;
        let mut out = Tensor::zeros(Shape::new(xs.n, o, ho, wo));
        let mut scratch = Vec::new();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..xs.n {
            let xn = self.value(x).sample(n);
            let wt = self.value(w).data();
            kernels::conv_forward(xn, &geom, wt, bias.as_deref(), o, out.sample_mut(n), &mut scratch);
        }
        self.push(out, Op::Conv { x, w, b, stride, pad })
    }

    /// Stride-1 modulated deformable convolution with "same" zero padding.
    /// `offsets` is `(N, 2K, H, W)` holding `(dy, dx)` pairs per tap and
    /// `mask` is `(N, K, H, W)`.
    pub fn deform_conv(&mut self, x: Var, w: Var, b: Option<Var>, offsets: Var, mask: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let geom = DeformGeom { c: xs.c, h: xs.h, w: xs.w, k: ws.h };
        let kk = geom.taps();
        assert_eq!(ws.c, xs.c, "deform weight expects {} input channels, got {}", ws.c, xs.c);
        assert_eq!(self.shape(offsets), Shape::new(xs.n, 2 * kk, xs.h, xs.w), "offset shape");
        assert_eq!(self.shape(mask), Shape::new(xs.n, kk, xs.h, xs.w), "modulation shape");
        let o = ws.n;
        let mut out = Tensor::zeros(Shape::new(xs.n, o, xs.h, xs.w));
        let mut scratch = Vec::new();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..xs.n {
            kernels::deform_forward(
                self.value(x).sample(n),
                self.value(offsets).sample(n),
                self.value(mask).sample(n),
                &geom,
                self.value(w).data(),
                bias.as_deref(),
                o,
                out.sample_mut(n),
                &mut scratch,
            );
        }
        self.push(out, Op::Deform { x, w, b, offsets, mask })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_channels(&tensors).expect("concat shape mismatch");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).narrow_channels(start, len).expect("narrow out of range");
        self.push(v, Op::Narrow { x, start })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        self.push(v, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w));
        kernels::upsample2x_forward(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        self.push(out, Op::Upsample2x(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn diff_x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Tensor::zeros(s);
        kernels::diff_x(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        self.push(out, Op::DiffX(x))
    }

    pub fn diff_y(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Tensor::zeros(s);
        kernels::diff_y(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        self.push(out, Op::DiffY(x))
    }

    /// Mean absolute difference, the L1 reconstruction loss.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let geom = ConvGeom { c: xs.c, h: xs.h, w: xs.w, k: ws.h, stride: *stride, pad: *pad };
                let o = ws.n;
                let mut dw = self.tracked(*w).then(|| Tensor::zeros(ws));
                let mut db = b.filter(|b| self.tracked(*b)).map(|b| Tensor::zeros(self.shape(b)));
                let mut dx = self.tracked(*x).then(|| Tensor::zeros(xs));
                let mut scratch = Vec::new();
                for n in 0..xs.n {
                    kernels::conv_backward(
                        xv.sample(n),
                        &geom,
                        wv.data(),
                        o,
                        g.sample(n),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.sample_mut(n)),
                        &mut scratch,
                    );
                }
                if let Some(t) = dw {
                    acc(*w, t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    acc(*b, t);
                }
                if let Some(t) = dx {
                    acc(*x, t);
                }
            }
            Op::Deform { x, w, b, offsets, mask } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let geom = DeformGeom { c: xs.c, h: xs.h, w: xs.w, k: ws.h };
                let o = ws.n;
                let mut dw = self.tracked(*w).then(|| Tensor::zeros(ws));
                let mut db = b.filter(|b| self.tracked(*b)).map(|b| Tensor::zeros(self.shape(b)));
                let mut dx = self.tracked(*x).then(|| Tensor::zeros(xs));
                let mut doff = self.tracked(*offsets).then(|| Tensor::zeros(self.shape(*offsets)));
                let mut dmask = self.tracked(*mask).then(|| Tensor::zeros(self.shape(*mask)));
                let mut scratch = Vec::new();
                for n in 0..xs.n {
                    kernels::deform_backward(
                        xv.sample(n),
                        self.value(*offsets).sample(n),
                        self.value(*mask).sample(n),
                        &geom,
                        wv.data(),
                        o,
                        g.sample(n),
                        DeformGrads {
                            dw: dw.as_mut().map(|t| t.data_mut()),
                            db: db.as_mut().map(|t| t.data_mut()),
                            dx: dx.as_mut().map(|t| t.sample_mut(n)),
                            doffsets: doff.as_mut().map(|t| t.sample_mut(n)),
                            dmask: dmask.as_mut().map(|t| t.sample_mut(n)),
                        },
                        &mut scratch,
                    );
                }
                if let Some(t) = dw {
                    acc(*w, t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    acc(*b, t);
                }
                if let Some(t) = dx {
                    acc(*x, t);
                }
                if let Some(t) = doff {
                    acc(*offsets, t);
                }
                if let Some(t) = dmask {
                    acc(*mask, t);
                }
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.clone());
                }
                if self.tracked(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.clone());
                }
                if self.tracked(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.tracked(*b) {
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p).c;
                    if self.tracked(*p) {
                        acc(*p, g.narrow_channels(start, c).expect("concat grad split"));
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let len = g.shape().c;
                let mut dx = Tensor::zeros(xs);
                let p = xs.plane();
                for n in 0..xs.n {
                    let dst = &mut dx.sample_mut(n)[start * p..(start + len) * p];
                    dst.copy_from_slice(g.sample(n));
                }
                acc(*x, dx);
            }
            Op::Silu(x) => {
                let d = g.zip_map(self.value(*x), |gv, z| {
                    let s = sigmoid(z);
                    gv * (s + z * s * (1.0 - s))
                });
                acc(*x, d);
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                kernels::upsample2x_backward(g.data(), xs.n * xs.c, xs.h, xs.w, dx.data_mut());
                acc(*x, dx);
            }
            Op::Abs(x) => acc(*x, g.zip_map(self.value(*x), |gv, z| gv * sign(z))),
            Op::Mean(x) => {
                let xs = self.shape(*x);
                acc(*x, Tensor::full(xs, g.data()[0] / xs.numel() as f64));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0])),
            Op::DiffX(x) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s);
                kernels::diff_x_backward(g.data(), s.n * s.c, s.h, s.w, dx.data_mut());
                acc(*x, dx);
            }
            Op::DiffY(x) => {
                let s = self.shape(*x);
                let mut dx = Tensor::zeros(s);
                kernels::diff_y_backward(g.data(), s.n * s.c, s.h, s.w, dx.data_mut());
                acc(*x, dx);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through tracked operations.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every named parameter used in `graph`, zero-filled for
    /// parameters that did not reach the root.
    pub fn params(&self, graph: &Graph<'_>) -> BTreeMap<String, Tensor> {
        graph
            .param_vars()
            .iter()
            .map(|(name, &v)| {
                let t = self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name.clone(), t)
            })
            .collect()
    }
}
