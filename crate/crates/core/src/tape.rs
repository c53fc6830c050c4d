//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A forward pass records one node per primitive application; nodes are
//! append-only, so index order is a topological order and the backward sweep
//! visits each node exactly once in reverse. The tape is confined to one
//! logical training context (it is deliberately `!Sync`); kernels may still
//! parallelise internally over disjoint output regions.
//!
//! Ops that need custom kernels (convolution, norms, attention, wavelets,
//! projection) add their own `impl Tape` blocks next to their kernels.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::tensor::{ShapeError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) idx: usize,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

pub(crate) fn boxed_backward(
    f: impl Fn(&Tensor, &mut dyn FnMut(usize, Tensor)) + 'static,
) -> BackwardFn {
    Box::new(f)
}

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of primitive applications plus everything needed to
/// differentiate them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.idx).and_then(|o| o.as_ref())
    }

    /// L2 norm of the gradient of `v`, 0 when absent. f64 accumulation.
    pub fn norm(&self, v: Var) -> f64 {
        match self.get(v) {
            None => 0.0,
            Some(t) => crate::fmath::sqrt64(t.data().iter().map(|&x| (x as f64) * (x as f64)).sum()),
        }
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        None => *slot = Some(contrib),
        Some(g) => {
            let dst = g.data_mut();
            for (d, s) in dst.iter_mut().zip(contrib.data()) {
                *d += s;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            inputs,
            backward,
        });
        Var { idx: nodes.len() - 1 }
    }

    /// Registers a leaf value. Gradients are collected only for leaves with
    /// `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Vec::new(), None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.idx].requires_grad
    }

    /// Re-registers the current value of `v` as a gradient-stopping constant.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub(crate) fn any_requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.idx].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`, populating gradients for every
    /// `requires_grad` leaf that feeds it. Nodes are visited in reverse
    /// topological order exactly once; intermediate gradient buffers are
    /// released as soon as they have been consumed.
    pub fn backward(&self, loss: Var) -> Result<Grads, ShapeError> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`] but only propagates along paths that can reach
    /// one of `targets`; everything else is pruned. Used to read per-task
    /// gradient norms at a shared layer without paying for a full sweep.
    pub fn backward_scoped(&self, loss: Var, targets: &[Var]) -> Result<Grads, ShapeError> {
        let nodes = self.nodes.borrow();
        let mut toward = vec![false; nodes.len()];
        for t in targets {
            toward[t.idx] = true;
        }
        for i in 0..nodes.len() {
            if !toward[i] {
                toward[i] = nodes[i].inputs.iter().any(|&j| toward[j]);
            }
        }
        drop(nodes);
        self.backward_impl(loss, Some(toward))
    }

    fn backward_impl(&self, loss: Var, toward: Option<Vec<bool>>) -> Result<Grads, ShapeError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.len() != 1 {
            return Err(crate::tensor::constraint(
                "backward",
                alloc::format!("loss must be scalar, got shape {:?}", nodes[loss.idx].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let seed_shape = nodes[loss.idx].value.shape().to_vec();
        grads[loss.idx] = Some(Tensor::full(&seed_shape, 1.0));

        for i in (0..=loss.idx).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if let Some(t) = &toward {
                if !t[i] {
                    grads[i] = None;
                    continue;
                }
            }
            if nodes[i].backward.is_none() {
                continue; // leaf: retain its gradient
            }
            let g = grads[i].take().unwrap();
            let node = &nodes[i];
            let bw = node.backward.as_ref().unwrap();
            bw(&g, &mut |j: usize, contrib: Tensor| {
                debug_assert!(j < i, "backward contribution must flow to earlier nodes");
                if nodes[j].requires_grad {
                    let keep = match &toward {
                        Some(t) => t[j],
                        None => true,
                    };
                    if keep {
                        debug_assert_eq!(contrib.shape(), nodes[j].value.shape());
                        accumulate(&mut grads[j], contrib);
                    }
                }
            });
        }
        Ok(Grads { g: grads })
    }

    // ----- elementwise primitives -------------------------------------------

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        // df returns (da, db) factors applied to the upstream gradient
        df: impl Fn(f32, f32) -> (f32, f32) + 'static,
    ) -> Result<Var, ShapeError> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.idx].value.clone(), nodes[b.idx].value.clone())
        };
        let out = va.zip(&vb, op, f)?;
        let requires = self.any_requires(&[a, b]);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let backward: Option<BackwardFn> = if requires {
            let (ia, ib) = (a.idx, b.idx);
            Some(Box::new(move |g, emit| {
                if na {
                    let da = Tensor::from_vec(
                        va.shape(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&go, (&x, &y))| go * df(x, y).0)
                            .collect(),
                    )
                    .unwrap();
                    emit(ia, da);
                }
                if nb {
                    let db = Tensor::from_vec(
                        vb.shape(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&go, (&x, &y))| go * df(x, y).1)
                            .collect(),
                    )
                    .unwrap();
                    emit(ib, db);
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, requires, vec![a.idx, b.idx], backward))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32) -> f32 + 'static,
    ) -> Var {
        let vx = self.value(x);
        let out = vx.map(&f);
        let requires = self.requires_grad(x);
        let backward: Option<BackwardFn> = if requires {
            let ix = x.idx;
            Some(Box::new(move |g, emit| {
                let dx = Tensor::from_vec(
                    vx.shape(),
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&go, &v)| go * df(v))
                        .collect(),
                )
                .unwrap();
                emit(ix, dx);
            }))
        } else {
            None
        };
        self.push(out, requires, vec![x.idx], backward)
    }

    pub fn scale(&self, x: Var, c: f32) -> Var {
        self.unary(x, move |v| v * c, move |_| c)
    }

    pub fn add_scalar(&self, x: Var, c: f32) -> Var {
        self.unary(x, move |v| v + c, |_| 1.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |v| if v > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| 1.0 / (1.0 + crate::fmath::exp(-v)),
            |v| {
                let s = 1.0 / (1.0 + crate::fmath::exp(-v));
                s * (1.0 - s)
            },
        )
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, crate::fmath::sin, crate::fmath::cos)
    }

    /// Full reduction to a scalar (fixed-order f64 accumulation).
    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum64() as f32;
        let requires = self.requires_grad(x);
        let shape = vx.shape().to_vec();
        let backward: Option<BackwardFn> = if requires {
            let ix = x.idx;
            Some(Box::new(move |g, emit| {
                let go = g.data()[0];
                emit(ix, Tensor::full(&shape, go));
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(s), requires, vec![x.idx], backward)
    }

    /// Mean over all elements.
    pub fn mean(&self, x: Var) -> Var {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[x.idx].value.len()
        };
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_grad_is_x() {
        // loss = sum(x^2)/2  =>  dloss/dx = x
        let tape = Tape::new();
        let xt = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = tape.leaf(xt.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g.data(), xt.data());
    }

    #[test]
    fn constant_loss_has_no_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let c = tape.constant(Tensor::scalar(7.0));
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.norm(x), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap(), true);
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn scoped_backward_prunes_other_branches() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), true);
        let pa = tape.mul(a, a).unwrap();
        let pb = tape.mul(b, b).unwrap();
        let sum = tape.add(pa, pb).unwrap();
        let loss = tape.sum(sum);
        let grads = tape.backward_scoped(loss, &[a]).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
        // scoped gradient must equal the full gradient for the target
        let full = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), full.get(a).unwrap().data());
    }

    #[test]
    fn mse_matches_hand_rolled() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let loss = tape.mse(a, b).unwrap();
        assert!((tape.value(loss).data()[0] - 2.5).abs() < 1e-6);
        let grads = tape.backward(loss).unwrap();
        // d/da mean((a-b)^2) = 2(a-b)/N
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
    }
}
