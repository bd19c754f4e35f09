//! Eager tape-based reverse-mode differentiation.
//!
//! Every op evaluates immediately and, when any input requires gradients,
//! records a node. [`Tape::backward`] walks the nodes in reverse; topological
//! order holds by construction because a node can only read vars that already
//! exist. Gradients accumulate, so repeated backward calls without a fresh
//! tape sum their results.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dCfg, GroupSplit};
use crate::parallel::map_slice;
use crate::tensor::{Scalar, Shape, TensorData};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Node {
    Conv2d { x: Var, w: Var, bias: Option<Var>, out: Var, cfg: Conv2dCfg },
    TemporalConv { x: Var, k: Var, out: Var, causal: bool },
    ShiftFixed { x: Var, out: Var, split: GroupSplit },
    Resize { x: Var, out: Var },
    Gram { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Tanh { x: Var, out: Var },
    Relu { x: Var, out: Var },
    LeakyRelu { x: Var, out: Var, slope: f64 },
    Abs { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Affine { x: Var, out: Var, scale: f64 },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
}

impl Node {
    fn out(&self) -> Var {
        match *self {
            Node::Conv2d { out, .. }
            | Node::TemporalConv { out, .. }
            | Node::ShiftFixed { out, .. }
            | Node::Resize { out, .. }
            | Node::Gram { out, .. }
            | Node::Sigmoid { out, .. }
            | Node::Tanh { out, .. }
            | Node::Relu { out, .. }
            | Node::LeakyRelu { out, .. }
            | Node::Abs { out, .. }
            | Node::Add { out, .. }
            | Node::Sub { out, .. }
            | Node::Mul { out, .. }
            | Node::Affine { out, .. }
            | Node::Sum { out, .. }
            | Node::Mean { out, .. } => out,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Node::Conv2d { .. } => "conv2d",
            Node::TemporalConv { .. } => "temporal_conv",
            Node::ShiftFixed { .. } => "shift_fixed",
            Node::Resize { .. } => "resize",
            Node::Gram { .. } => "gram",
            Node::Sigmoid { .. } => "sigmoid",
            Node::Tanh { .. } => "tanh",
            Node::Relu { .. } => "relu",
            Node::LeakyRelu { .. } => "leaky_relu",
            Node::Abs { .. } => "abs",
            Node::Add { .. } => "add",
            Node::Sub { .. } => "sub",
            Node::Mul { .. } => "mul",
            Node::Affine { .. } => "affine",
            Node::Sum { .. } => "sum",
            Node::Mean { .. } => "mean",
        }
    }
}

pub struct Tape<T: Scalar> {
    vals: Vec<TensorData<T>>,
    grads: Vec<Option<TensorData<T>>>,
    requires: Vec<bool>,
    nodes: Vec<Node>,
    /// Verification mode: assert no NaN/Inf after every op.
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: vec![], grads: vec![], requires: vec![], nodes: vec![], check_finite: false }
    }

    /// Tape that checks every op output for NaN/Inf.
    pub fn verifying() -> Self {
        Tape { check_finite: true, ..Self::new() }
    }

    /// Register an input that does not need gradients.
    pub fn leaf(&mut self, value: TensorData<T>) -> Var {
        self.push(value, false)
    }

    /// Register a trainable input; backward will populate its gradient.
    pub fn param(&mut self, value: TensorData<T>) -> Var {
        self.push(value, true)
    }

    fn push(&mut self, value: TensorData<T>, requires: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        Var(id)
    }

    pub fn val(&self, v: Var) -> &TensorData<T> {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&TensorData<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a var, taking ownership (leaves None behind).
    pub fn take_grad(&mut self, v: Var) -> Option<TensorData<T>> {
        self.grads[v.0].take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.vals[v.0].item()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn record(&mut self, out_val: TensorData<T>, requires: bool, node: impl FnOnce(Var) -> Node) -> Result<Var> {
        let out = self.push(out_val, requires);
        if requires {
            self.nodes.push(node(out));
        }
        if self.check_finite {
            if !self.vals[out.0].all_finite() {
                let name = self.nodes.last().map(|n| n.name()).unwrap_or("leaf");
                return Err(Error::numeric(format!("non-finite value produced by {name}")));
            }
        }
        Ok(out)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ---- ops ------------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, cfg: &Conv2dCfg) -> Result<Var> {
        let out = kernels::conv2d_forward(
            &self.vals[x.0],
            &self.vals[w.0],
            bias.map(|b| &self.vals[b.0]),
            cfg,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let req = self.any_requires(&inputs);
        let cfg = *cfg;
        self.record(out, req, |o| Node::Conv2d { x, w, bias, out: o, cfg })
    }

    pub fn temporal_conv(&mut self, x: Var, k: Var, causal: bool) -> Result<Var> {
        let out = kernels::temporal_conv_forward(&self.vals[x.0], &self.vals[k.0], causal)?;
        let req = self.any_requires(&[x, k]);
        self.record(out, req, |o| Node::TemporalConv { x, k, out: o, causal })
    }

    pub fn shift_fixed(&mut self, x: Var, split: GroupSplit) -> Result<Var> {
        let out = kernels::shift_fixed_forward(&self.vals[x.0], split)?;
        let req = self.requires[x.0];
        self.record(out, req, |o| Node::ShiftFixed { x, out: o, split })
    }

    pub fn resize_bilinear(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let out = kernels::resize_forward(&self.vals[x.0], h2, w2)?;
        let req = self.requires[x.0];
        self.record(out, req, |o| Node::Resize { x, out: o })
    }

    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gram_forward(&self.vals[x.0])?;
        let req = self.requires[x.0];
        self.record(out, req, |o| Node::Gram { x, out: o })
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T + Sync, node: impl FnOnce(Var) -> Node) -> Result<Var> {
        let data = map_slice(self.vals[x.0].data(), |&v| f(v));
        let out = TensorData::from_vec(self.vals[x.0].shape().clone(), data)?;
        let req = self.requires[x.0];
        self.record(out, req, node)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = T::one();
        self.unary(x, |v| one / (one + (-v).exp()), |o| Node::Sigmoid { x, out: o })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), |o| Node::Tanh { x, out: o })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let zero = T::zero();
        self.unary(x, |v| v.max(zero), |o| Node::Relu { x, out: o })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let zero = T::zero();
        self.unary(
            x,
            |v| if v > zero { v } else { v * s },
            |o| Node::LeakyRelu { x, out: o, slope },
        )
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), |o| Node::Abs { x, out: o })
    }

    /// scale * x + shift, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let s = T::from_f64(scale);
        let c = T::from_f64(shift);
        self.unary(x, |v| v * s + c, |o| Node::Affine { x, out: o, scale })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: impl FnOnce(Var) -> Node,
    ) -> Result<Var> {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {} and {}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = TensorData::from_vec(va.shape().clone(), data)?;
        let req = self.any_requires(&[a, b]);
        self.record(out, req, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |o| Node::Add { a, b, out: o })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |o| Node::Sub { a, b, out: o })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |o| Node::Mul { a, b, out: o })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let req = self.requires[x.0];
        self.record(TensorData::scalar(acc), req, |o| Node::Sum { x, out: o })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let mut acc = T::zero();
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let out = acc / T::from_f64(n as f64);
        let req = self.requires[x.0];
        self.record(TensorData::scalar(out), req, |o| Node::Mean { x, out: o })
    }

    // ---- backward --------------------------------------------------------

    /// Seed d(loss)/d(loss) = 1 and propagate to every requires-grad var.
    /// Gradients of intermediate (non-leaf) vars are consumed during the
    /// sweep; leaf/param gradients persist and accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {}",
                self.vals[loss.0].shape()
            )));
        }
        if !self.requires[loss.0] {
            return Err(Error::shape(
                "backward on a var with no gradient path (nothing requires grad)",
            ));
        }
        accumulate(
            &mut self.grads[loss.0],
            TensorData::full(self.vals[loss.0].shape().clone(), T::one()),
        );

        for idx in (0..self.nodes.len()).rev() {
            let node = self.nodes[idx].clone();
            let out = node.out();
            let Some(gout) = self.grads[out.0].take() else {
                continue;
            };
            self.backprop_node(&node, &gout)?;
        }
        Ok(())
    }

    fn acc_into(&mut self, v: Var, delta: TensorData<T>) {
        if self.requires[v.0] {
            accumulate(&mut self.grads[v.0], delta);
        }
    }

    fn backprop_node(&mut self, node: &Node, gout: &TensorData<T>) -> Result<()> {
        match *node {
            Node::Conv2d { x, w, bias, cfg, .. } => {
                let need_dx = self.requires[x.0];
                let need_dw = self.requires[w.0];
                let need_db = bias.map(|b| self.requires[b.0]).unwrap_or(false);
                let (dx, dw, db) = kernels::conv2d_backward(
                    &self.vals[x.0],
                    &self.vals[w.0],
                    gout,
                    &cfg,
                    need_dx,
                    need_dw,
                    need_db,
                )?;
                if let Some(dx) = dx {
                    self.acc_into(x, dx);
                }
                if let Some(dw) = dw {
                    self.acc_into(w, dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    self.acc_into(b, db);
                }
            }
            Node::TemporalConv { x, k, causal, .. } => {
                let (dx, dk) = kernels::temporal_conv_backward(
                    &self.vals[x.0],
                    &self.vals[k.0],
                    gout,
                    causal,
                    self.requires[x.0],
                    self.requires[k.0],
                )?;
                if let Some(dx) = dx {
                    self.acc_into(x, dx);
                }
                if let Some(dk) = dk {
                    self.acc_into(k, dk);
                }
            }
            Node::ShiftFixed { x, split, .. } => {
                let dx = kernels::shift_fixed_backward(gout, split)?;
                self.acc_into(x, dx);
            }
            Node::Resize { x, .. } => {
                let [_, _, _, h, w] = self.vals[x.0].shape().dims5()?;
                let dx = kernels::resize_backward(gout, h, w)?;
                self.acc_into(x, dx);
            }
            Node::Gram { x, .. } => {
                let dx = kernels::gram_backward(&self.vals[x.0], gout)?;
                self.acc_into(x, dx);
            }
            Node::Sigmoid { x, out } => {
                let one = T::one();
                let dx = zip_map(gout, &self.vals[out.0], |g, y| g * y * (one - y));
                self.acc_into(x, dx);
            }
            Node::Tanh { x, out } => {
                let one = T::one();
                let dx = zip_map(gout, &self.vals[out.0], |g, y| g * (one - y * y));
                self.acc_into(x, dx);
            }
            Node::Relu { x, .. } => {
                let zero = T::zero();
                let dx = zip_map(gout, &self.vals[x.0], |g, v| if v > zero { g } else { zero });
                self.acc_into(x, dx);
            }
            Node::LeakyRelu { x, slope, .. } => {
                let s = T::from_f64(slope);
                let zero = T::zero();
                let dx = zip_map(gout, &self.vals[x.0], |g, v| if v > zero { g } else { g * s });
                self.acc_into(x, dx);
            }
            Node::Abs { x, .. } => {
                let zero = T::zero();
                let dx = zip_map(gout, &self.vals[x.0], |g, v| {
                    if v > zero {
                        g
                    } else if v < zero {
                        -g
                    } else {
                        zero
                    }
                });
                self.acc_into(x, dx);
            }
            Node::Add { a, b, .. } => {
                self.acc_into(a, gout.clone());
                self.acc_into(b, gout.clone());
            }
            Node::Sub { a, b, .. } => {
                self.acc_into(a, gout.clone());
                self.acc_into(b, gout.map(|g| -g));
            }
            Node::Mul { a, b, .. } => {
                let da = zip_map(gout, &self.vals[b.0], |g, v| g * v);
                let db = zip_map(gout, &self.vals[a.0], |g, v| g * v);
                self.acc_into(a, da);
                self.acc_into(b, db);
            }
            Node::Affine { x, scale, .. } => {
                let s = T::from_f64(scale);
                self.acc_into(x, gout.map(|g| g * s));
            }
            Node::Sum { x, .. } => {
                let g = gout.item()?;
                self.acc_into(x, TensorData::full(self.vals[x.0].shape().clone(), g));
            }
            Node::Mean { x, .. } => {
                let n = self.vals[x.0].numel();
                let g = gout.item()? / T::from_f64(n as f64);
                self.acc_into(x, TensorData::full(self.vals[x.0].shape().clone(), g));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<TensorData<T>>, delta: TensorData<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn zip_map<T: Scalar>(
    g: &TensorData<T>,
    v: &TensorData<T>,
    f: impl Fn(T, T) -> T,
) -> TensorData<T> {
    let data: Vec<T> = g.data().iter().zip(v.data()).map(|(&a, &b)| f(a, b)).collect();
    TensorData::from_vec(g.shape().clone(), data).expect("zip_map shapes match")
}

/// Convenience for building leaf tensors with a given shape from a closure.
pub fn tensor_from_fn<T: Scalar>(shape: impl Into<Shape>, f: impl FnMut(usize) -> T) -> TensorData<T> {
    let shape = shape.into();
    let n = shape.numel();
    let mut f = f;
    TensorData::from_vec(shape, (0..n).map(&mut f).collect()).expect("sized by shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(TensorData::from_vec([2, 3], (0..6).map(|i| i as f64).collect()).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn product_backward_swaps_factors() {
        let mut tape = Tape::<f64>::new();
        let xv = TensorData::from_vec([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let yv = TensorData::from_vec([4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let x = tape.param(xv);
        let y = tape.param(yv.clone());
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), yv.data());
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(TensorData::full([3], 1.0));
        let y = tape.abs(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(TensorData::full([2], 3.0));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 0.5);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 0.0);
    }

    #[test]
    fn no_nodes_recorded_without_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::full([2, 2], 1.5));
        let y = tape.tanh(x).unwrap();
        let _ = tape.mean(y).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn verifying_tape_flags_non_finite() {
        let mut tape = Tape::<f64>::verifying();
        let x = tape.param(TensorData::scalar(1e308));
        let y = tape.affine(x, 10.0, 0.0); // overflows to inf
        assert!(y.is_err());
    }
}
