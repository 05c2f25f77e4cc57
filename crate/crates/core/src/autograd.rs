//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every op appends a node holding its output value; nodes only ever point
//! at earlier nodes, so walking the tape backwards is a valid topological
//! order and visits each node once. Gradients accumulate with `+=` across
//! fan-out. A node requires a gradient iff any of its parents does, so
//! frozen leaves and everything computed purely from them get no buffer.

use crate::error::{Error, Result};
use crate::kernels::{col2im, conv_out_size, im2col, ConvGeometry};
use crate::tensor::{same_shape, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward runs outside the graph and whose vector-Jacobian
/// product is supplied by the implementor.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    /// Gradients for each input; only entries with `needs_grad[i]` are used.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    ClampMax { input: Var, caps: Vec<T> },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    SigmoidCe { logits: Var, labels: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape for one forward/backward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf; `requires_grad` marks it trainable.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` for frozen nodes or before `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        let (out_h, out_w) = match (
            conv_out_size(h, kh, stride, padding),
            conv_out_size(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"
                )))
            }
        };
        let g = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let keep_cols = self.requires_grad(weight);
        let (out, cols) = conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            cout,
            &g,
            keep_cols,
        );
        let out = Tensor::new(vec![n, cout, out_h, out_w], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry: g,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulScalar(x, s), rg, "mul_scalar")
    }

    /// `min(x, cap)`; gradient 1 below the cap and 0 at or above it.
    pub fn clamp_max(&mut self, x: Var, cap: T) -> Result<Var> {
        let n = self.value(x).numel();
        self.clamp_max_blocks(x, vec![cap], n)
    }

    /// `min(x, caps[i])` with one cap per sample along the leading axis.
    pub fn clamp_max_per_sample(&mut self, x: Var, caps: Vec<T>) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.first() != Some(&caps.len()) {
            return Err(Error::Dimension(format!(
                "clamp_max_per_sample: {} caps for shape {:?}",
                caps.len(),
                shape
            )));
        }
        let block = self.value(x).numel() / caps.len().max(1);
        self.clamp_max_blocks(x, caps, block)
    }

    fn clamp_max_blocks(&mut self, x: Var, caps: Vec<T>, block: usize) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let cap = caps[i / block.max(1)];
                if v >= cap {
                    cap
                } else {
                    v
                }
            })
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampMax { input: x, caps }, rg, "clamp_max")
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::Dimension("global_avg_pool on an empty map".into()));
        }
        let hw = h * w;
        let scale = T::one() / T::from_f64(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::from_f64(n as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg, "mean")
    }

    /// Multi-label sigmoid cross-entropy averaged over classes and batch.
    ///
    /// Uses `max(z,0) - z*y + ln(1 + e^-|z|)`, which stays finite for any
    /// finite logit.
    pub fn sigmoid_ce(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        same_shape(self.value(logits), labels, "sigmoid_ce")?;
        if labels
            .data()
            .iter()
            .any(|&y| y != T::zero() && y != T::one())
        {
            return Err(Error::Contract("sigmoid_ce: labels must be 0 or 1".into()));
        }
        let z = self.value(logits).data();
        if z.is_empty() {
            return Err(Error::Dimension("sigmoid_ce on empty logits".into()));
        }
        let total: T = z
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::from_f64(z.len() as f64));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::SigmoidCe {
                logits,
                labels: labels.data().to_vec(),
            },
            rg,
            "sigmoid_ce",
        )
    }

    /// Record an externally computed op with its own backward.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let rg = self.rg(&inputs);
        let name = op.name();
        self.push(output, Op::Custom { inputs, op }, rg, name)
    }

    /// Accumulate `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?;
        accumulate(&mut self.grads[loss.0], seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.vjp(idx, &gout)?;
            self.grads[idx] = Some(gout);
            for (var, g) in contributions {
                if self.nodes[var.0].requires_grad {
                    g.check_finite("backward")?;
                    accumulate(&mut self.grads[var.0], g);
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let g = geometry;
                let n = self.value(*input).shape()[0];
                let w = self.value(*weight);
                let cout = w.shape()[0];
                let (k, p) = (g.rows(), g.cols());
                let dy = gout.data();
                if self.requires_grad(*input) {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    let plane = g.channels * g.height * g.width;
                    let mut dcols = vec![T::zero(); k * p];
                    for s in 0..n {
                        let dys = &dy[s * cout * p..(s + 1) * cout * p];
                        T::gemm(true, false, k, cout, p, T::one(), w.data(), dys, T::zero(), &mut dcols);
                        col2im(&dcols, g, &mut dx.data_mut()[s * plane..(s + 1) * plane]);
                    }
                    out.push((*input, dx));
                }
                if self.requires_grad(*weight) {
                    let cols = cols
                        .as_ref()
                        .ok_or_else(|| Error::Contract("conv2d: columns were not saved".into()))?;
                    let mut dw = Tensor::zeros(w.shape());
                    for s in 0..n {
                        let dys = &dy[s * cout * p..(s + 1) * cout * p];
                        let cs = &cols[s * k * p..(s + 1) * k * p];
                        T::gemm(false, true, cout, p, k, T::one(), dys, cs, T::one(), dw.data_mut());
                    }
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let mut db = Tensor::zeros(&[cout]);
                        for (i, chunk) in dy.chunks(p).enumerate() {
                            let slot = &mut db.data_mut()[i % cout];
                            *slot = *slot + chunk.iter().copied().sum::<T>();
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = gout
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(gout.shape().to_vec(), data)?));
            }
            Op::Sigmoid(x) => {
                let data = gout
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                out.push((*x, Tensor::new(gout.shape().to_vec(), data)?));
            }
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = gout.data().iter().zip(bv).map(|(&g, &v)| g * v).collect();
                let gb = gout.data().iter().zip(av).map(|(&g, &v)| g * v).collect();
                out.push((*a, Tensor::new(gout.shape().to_vec(), ga)?));
                out.push((*b, Tensor::new(gout.shape().to_vec(), gb)?));
            }
            Op::MulScalar(x, s) => out.push((*x, gout.map(|g| g * *s))),
            Op::ClampMax { input, caps } => {
                let xv = self.value(*input).data();
                let block = xv.len() / caps.len().max(1);
                let data = gout
                    .data()
                    .iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(i, (&g, &v))| if v < caps[i / block.max(1)] { g } else { T::zero() })
                    .collect();
                out.push((*input, Tensor::new(gout.shape().to_vec(), data)?));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let scale = T::one() / T::from_f64(hw as f64);
                let mut dx = Tensor::zeros(shape);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(gout.data()) {
                    plane.fill(g * scale);
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), gout.item())));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let g = gout.item() / T::from_f64(v.numel() as f64);
                out.push((*x, Tensor::full(v.shape(), g)));
            }
            Op::SigmoidCe { logits, labels } => {
                let z = self.value(*logits);
                let scale = gout.item() / T::from_f64(z.numel() as f64);
                let data = z
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                out.push((*logits, Tensor::new(z.shape().to_vec(), data)?));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad(*v)).collect();
                let grads = op.backward(&values, &node.value, gout, &needs)?;
                for ((v, g), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(g), true) = (g, need) {
                        same_shape(self.value(*v), &g, op.name())?;
                        out.push((*v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Batched convolution forward; returns the output buffer and, when asked,
/// the unfolded columns of every sample for the weight gradient.
pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    cout: usize,
    g: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (k, p) = (g.rows(), g.cols());
    let plane = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); n * cout * p];
    let mut saved = keep_cols.then(|| vec![T::zero(); n * k * p]);
    let mut scratch = vec![T::zero(); k * p];
    for s in 0..n {
        let cols: &mut [T] = match saved.as_mut() {
            Some(buf) => &mut buf[s * k * p..(s + 1) * k * p],
            None => &mut scratch,
        };
        im2col(&x[s * plane..(s + 1) * plane], g, cols);
        let dst = &mut out[s * cout * p..(s + 1) * cout * p];
        T::gemm(false, false, cout, k, p, T::one(), weight, cols, T::zero(), dst);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }
    (out, saved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut g = Graph::<f32>::new();
        let data = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f32 * 0.37).sin());
        let x = g.constant(data.clone()).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), &data);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Dimension(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 5, 5])).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[1, 1, 3, 2], 5.0)).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
        let m = g
            .param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let p = g.global_avg_pool(m).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(m).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap())
            .unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let c = g
            .constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap())
            .unwrap();
        let cl = g.clamp_max(c, 1.5).unwrap();
        assert_eq!(g.value(cl).data(), &[1.0, 1.5]);
    }

    #[test]
    fn clamp_max_gradient_is_zero_at_cap() {
        let mut g = Graph::<f64>::new();
        let x = g
            .param(Tensor::new(vec![3], vec![1.0, 1.5, 2.0]).unwrap())
            .unwrap();
        let c = g.clamp_max(x, 1.5).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_frozen() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        let frozen = g.constant(Tensor::full(&[2], 3.0)).unwrap();
        let y = g.mul(x, frozen).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn empty_graph_backward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let v = Var(0);
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 2.0)).unwrap();
        let a = g.add(x, x).unwrap();
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn sigmoid_ce_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let l = g
            .sigmoid_ce(z, &Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let z = g.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let l = g
            .sigmoid_ce(z, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut g32 = Graph::<f32>::new();
        let z = g32.param(Tensor::new(vec![1, 1], vec![40.0]).unwrap()).unwrap();
        let l = g32
            .sigmoid_ce(z, &Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        let v = g32.value(l).item();
        assert!(v.is_finite() && v < 1e-12);

        let z = g.param(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let bad = g.sigmoid_ce(z, &Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1], f32::MAX)).unwrap();
        assert!(matches!(g.mul_scalar(x, 10.0), Err(Error::Numeric(_))));
    }
}
