//! Training losses.
//!
//! Gradient maps are forward differences, `gx(y, x) = I(y, x+1) - I(y, x)` and
//! `gy(y, x) = I(y+1, x) - I(y, x)`, with zeros in the last column (`gx`) and
//! last row (`gy`). Every term is a mean absolute difference over all
//! elements.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientMaps {
    pub gx: Tensor,
    pub gy: Tensor,
}

pub fn spatial_gradients(image: &Tensor) -> GradientMaps {
    let s = image.shape();
    let mut gx = Tensor::zeros(s);
    let mut gy = Tensor::zeros(s);
    kernels::diff_x(image.data(), s.n * s.c, s.h, s.w, gx.data_mut());
    kernels::diff_y(image.data(), s.n * s.c, s.h, s.w, gy.data_mut());
    GradientMaps { gx, gy }
}

/// A loss and its parts; `total` is the sum of the parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub grad_x: f64,
    pub grad_y: f64,
}

/// The loss parts as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub grad_x: Option<Var>,
    pub grad_y: Option<Var>,
}

impl LossVars {
    pub fn value(&self, g: &Graph<'_>) -> LossValue {
        let s = |v: Var| g.value(v).data()[0];
        LossValue {
            total: s(self.total),
            l1: s(self.l1),
            grad_x: self.grad_x.map_or(0.0, s),
            grad_y: self.grad_y.map_or(0.0, s),
        }
    }
}

/// `|gt - pred| + |Gx(gt) - Gx(pred)| + |Gy(gt) - Gy(pred)|`, each mean-reduced.
pub fn branch_loss_var(g: &mut Graph<'_>, pred: Var, gt: Var) -> LossVars {
    let l1 = g.l1(gt, pred);
    let (gx_t, gx_p) = (g.diff_x(gt), g.diff_x(pred));
    let grad_x = g.l1(gx_t, gx_p);
    let (gy_t, gy_p) = (g.diff_y(gt), g.diff_y(pred));
    let grad_y = g.l1(gy_t, gy_p);
    let partial = g.add(l1, grad_x);
    let total = g.add(partial, grad_y);
    LossVars { total, l1, grad_x: Some(grad_x), grad_y: Some(grad_y) }
}

/// Mean `|gt - pred|` only.
pub fn combine_loss_var(g: &mut Graph<'_>, pred: Var, gt: Var) -> LossVars {
    let l1 = g.l1(gt, pred);
    LossVars { total: l1, l1, grad_x: None, grad_y: None }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!("prediction {} and ground truth {} differ in shape", pred.shape(), gt.shape())));
    }
    Ok(())
}

pub fn branch_loss(pred: &Tensor, gt: &Tensor) -> Result<LossValue> {
    check_pair(pred, gt)?;
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(gt.clone()));
    Ok(branch_loss_var(&mut g, p, t).value(&g))
}

pub fn combine_loss(pred: &Tensor, gt: &Tensor) -> Result<LossValue> {
    check_pair(pred, gt)?;
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(gt.clone()));
    Ok(combine_loss_var(&mut g, p, t).value(&g))
}
