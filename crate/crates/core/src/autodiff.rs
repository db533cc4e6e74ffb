//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Tape`] appends a node holding its value and enough
//! context to push gradients back to its inputs. [`Tape::backward`] walks the
//! tape once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::perturb::{adain_patches_backward, apply_adain_patches, patch_statistics, AdainTarget};
use crate::tensor::{self, ElementwiseOp, Operand, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LogSoftmax(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
    JsRows {
        p: Var,
        q: Var,
    },
    SumAll(Var),
    MeanAll(Var),
    Adain {
        x: Var,
        target: Box<AdainTarget<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradients keyed by parameter. Every parameter registered on the tape has
/// an entry, zero when the loss does not depend on it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult<T: Scalar = f32> {
    pub grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradResult<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// An untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A tracked parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, id: ParamId, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let operand = match b {
            Some(b) => Operand::Tensor(&self.nodes[b.0].value),
            None => Operand::None,
        };
        let value = tensor::elementwise(op, &self.nodes[a.0].value, operand)?;
        let b_shape = b.map(|b| self.value(b).shape().to_vec());
        let channel = b_shape.as_deref().is_some_and(|s| s != self.value(a).shape());
        let node = match (op, b) {
            (ElementwiseOp::Add, Some(b)) if channel => Op::AddChannel(a, b),
            (ElementwiseOp::Mul, Some(b)) if channel => Op::MulChannel(a, b),
            (ElementwiseOp::Add, Some(b)) => Op::Add(a, b),
            (ElementwiseOp::Sub, Some(b)) if !channel => Op::Sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => Op::Mul(a, b),
            (ElementwiseOp::Div, Some(b)) if !channel => Op::Div(a, b),
            (ElementwiseOp::Relu, None) => Op::Relu(a),
            (ElementwiseOp::Exp, None) => Op::Exp(a),
            (ElementwiseOp::Log, None) => Op::Log(a),
            _ => return Err(Error::invalid(format!("unsupported tracked elementwise form {op:?}"))),
        };
        Ok(self.push(value, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Div, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Log, a, None)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Log-softmax over the last axis of an `N × K` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid(format!("log_softmax expects N×K, got {:?}", t.shape())));
        }
        let value = tensor::log_softmax(t, 1)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let logp = self.log_softmax(x)?;
        self.exp(logp)
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        let &[n, k] = t.shape() else {
            return Err(Error::invalid(format!("nll expects N×K, got {:?}", t.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape("nll labels", t.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let total: T = labels.iter().enumerate().map(|(i, &y)| -t.data()[i * k + y]).sum();
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        Ok(self.push(
            value,
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Row-wise Jensen-Shannon divergence between two `N × K` probability
    /// tensors, in nats. Output shape `[N]`.
    pub fn js_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pt, qt) = (self.value(p), self.value(q));
        let &[n, k] = pt.shape() else {
            return Err(Error::invalid(format!("js_rows expects N×K, got {:?}", pt.shape())));
        };
        if pt.shape() != qt.shape() {
            return Err(Error::shape("js_rows", pt.shape(), qt.shape()));
        }
        let rows: Vec<T> = (0..n)
            .map(|i| {
                let r = i * k..(i + 1) * k;
                T::from_f64(js_terms(&pt.data()[r.clone()], &qt.data()[r]))
            })
            .collect();
        let value = Tensor::from_vec(&[n], rows)?;
        Ok(self.push(value, Op::JsRows { p, q }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push(value, Op::MeanAll(x))
    }

    /// Patch-wise AdaIN toward fixed target statistics. The source statistics
    /// are recomputed from `x` and differentiated; the targets are constants.
    pub fn adain(&mut self, x: Var, target: AdainTarget<T>) -> Result<Var> {
        let xv = self.value(x);
        let orig = patch_statistics(xv, &target.partition, target.target.eps)?;
        let value = apply_adain_patches(xv, &target.partition, &orig, &target.target)?;
        Ok(self.push(
            value,
            Op::Adain {
                x,
                target: Box::new(target),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<GradResult<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &g)?;
            for (v, dg) in contributions {
                accumulate(&mut grads[v.0], dg);
            }
            grads[i] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(&id) {
                    None => {
                        out.insert(id, g);
                    }
                    Some(existing) => {
                        let sum = existing.add(&g)?;
                        *existing = sum;
                    }
                }
            }
        }
        Ok(GradResult { grads: out })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.div(bv)?;
                let db = Tensor::from_vec(
                    bv.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect(),
                )?;
                vec![(*a, da), (*b, db)]
            }
            Op::AddChannel(a, b) => vec![(*a, g.clone()), (*b, channel_sum(g, val(*b).len()))],
            Op::MulChannel(a, b) => {
                let da = g.mul(val(*b))?;
                let db = channel_sum(&g.mul(val(*a))?, val(*b).len());
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => {
                let av = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_vec(av.shape(), d)?)]
            }
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Log(a) => vec![(*a, g.div(val(*a))?)],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = tensor::conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (gi, &src) in g.data().iter().zip(argmax) {
                    d[src] = d[src] + *gi;
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi * inv, h * w))
                    .collect();
                vec![(*x, Tensor::from_vec(val(*x).shape(), d)?)]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                let mut dx = vec![T::zero(); n * d];
                tensor::matmul(g.data(), false, wv.data(), false, n, k, d, &mut dx, false);
                let mut dw = vec![T::zero(); k * d];
                tensor::matmul(g.data(), true, xv.data(), false, k, n, d, &mut dw, false);
                let mut db = vec![T::zero(); k];
                for row in g.data().chunks(k) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![
                    (*x, Tensor::from_vec(xv.shape(), dx)?),
                    (*w, Tensor::from_vec(wv.shape(), dw)?),
                    (*b, Tensor::from_vec(&[k], db)?),
                ]
            }
            Op::LogSoftmax(x) => {
                let k = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (grow, lrow) in g.data().chunks(k).zip(node.value.data().chunks(k)) {
                    let gsum: T = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(lrow).map(|(&gi, &li)| gi - li.exp() * gsum));
                }
                vec![(*x, Tensor::from_vec(node.value.shape(), d)?)]
            }
            Op::Nll { logp, labels } => {
                let shape = val(*logp).shape();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item() / T::from_f64(n as f64);
                let mut d = Tensor::zeros(shape);
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * k + y] = -scale;
                }
                vec![(*logp, d)]
            }
            Op::JsRows { p, q } => {
                let (pv, qv) = (val(*p), val(*q));
                let k = pv.shape()[1];
                let mut dp = Vec::with_capacity(pv.len());
                let mut dq = Vec::with_capacity(qv.len());
                for (i, &gi) in g.data().iter().enumerate() {
                    for j in i * k..(i + 1) * k {
                        let (a, b) = (pv.data()[j].as_f64(), qv.data()[j].as_f64());
                        let m = 0.5 * (a + b);
                        let (ga, gb) = js_partials(a, b, m);
                        dp.push(gi * T::from_f64(ga));
                        dq.push(gi * T::from_f64(gb));
                    }
                }
                vec![
                    (*p, Tensor::from_vec(pv.shape(), dp)?),
                    (*q, Tensor::from_vec(qv.shape(), dq)?),
                ]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::MeanAll(x) => {
                let n = T::from_f64(val(*x).len() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::Adain { x, target } => {
                let xv = val(*x);
                let orig = patch_statistics(xv, &target.partition, target.target.eps)?;
                let dx = adain_patches_backward(xv, &target.partition, &orig, &target.target, g)?;
                vec![(*x, dx)]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

/// Sums a gradient over every axis except the channel axis.
fn channel_sum<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let inner: usize = g.shape()[2..].iter().product();
    let mut out = vec![T::zero(); channels];
    for (i, chunk) in g.data().chunks(inner).enumerate() {
        let c = i % channels;
        out[c] = out[c] + chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[channels], out).expect("channel count")
}

/// `½·Σ p·ln(p/m) + ½·Σ q·ln(q/m)` with `m = (p+q)/2` and `0·ln 0 = 0`.
pub(crate) fn js_terms<T: Scalar>(p: &[T], q: &[T]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            let m = 0.5 * (a + b);
            0.5 * xlogy_ratio(a, m) + 0.5 * xlogy_ratio(b, m)
        })
        .sum::<f64>()
        .max(0.0)
}

fn xlogy_ratio(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).ln()
    } else {
        0.0
    }
}

/// Partial derivatives of one JS term with respect to `p` and `q`.
fn js_partials(p: f64, q: f64, m: f64) -> (f64, f64) {
    if m <= 0.0 {
        return (0.0, 0.0);
    }
    let tiny = f64::MIN_POSITIVE;
    (0.5 * (p.max(tiny) / m).ln(), 0.5 * (q.max(tiny) / m).ln())
}
