//! A plain convolutional classifier with feature-perturbation insertion points.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::perturb::FeaturePerturbation;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// The output of block `k` (1-based), after its pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InsertionPoint(pub usize);

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "after_block_{}", self.0)
    }
}

impl FromStr for InsertionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("after_block_")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(InsertionPoint)
            .ok_or_else(|| Error::Config(format!("bad insertion point {s:?}; expected after_block_<k>")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    /// `[channels, height, width]` of the input.
    pub input: [usize; 3],
    pub insertion: BTreeSet<InsertionPoint>,
}

impl CnnConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            channels: vec![32, 64, 128],
            kernel: 3,
            classes,
            input: [3, 32, 32],
            insertion: BTreeSet::from([InsertionPoint(2)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "block widths must be a non-empty list of positive values, got {:?}",
                self.channels
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if let Some(p) = self.insertion.iter().find(|p| p.0 == 0 || p.0 > self.channels.len()) {
            return Err(Error::Config(format!(
                "{p} refers to a missing block ({} blocks)",
                self.channels.len()
            )));
        }
        let [c, h, w] = self.input;
        let shrink = 1usize << self.channels.len();
        if c == 0 || h < shrink || w < shrink {
            return Err(Error::Config(format!(
                "input {c}×{h}×{w} too small for {} pooling stages",
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of the output of block `k` (1-based).
    pub fn block_output_size(&self, k: usize) -> (usize, usize) {
        (self.input[1] >> k, self.input[2] >> k)
    }
}

/// Trainable tensors in a fixed order: per block a conv weight and bias,
/// then the classifier weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks names and shapes against `cfg`.
    pub fn check(&self, cfg: &CnnConfig) -> Result<()> {
        let expected = param_layout(cfg);
        if self.tensors.len() != expected.len() || self.names.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn param_layout(cfg: &CnnConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = cfg.input[0];
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        out.push((
            format!("conv{}.weight", i + 1),
            vec![c_out, c_in, cfg.kernel, cfg.kernel],
        ));
        out.push((format!("conv{}.bias", i + 1), vec![c_out]));
        c_in = c_out;
    }
    out.push(("fc.weight".into(), vec![cfg.classes, c_in]));
    out.push(("fc.bias".into(), vec![cfg.classes]));
    out
}

/// He-normal weights, zero biases.
pub fn init_params<T: Scalar>(cfg: &CnnConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in param_layout(cfg) {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            rng.normal::<T>(&shape).scale(T::from_f64(std))
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams { names, tensors })
}

/// Registers every parameter on `tape`, in order.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t.clone()))
        .collect()
}

fn check_input<T: Scalar>(x: &Tensor<T>, cfg: &CnnConfig) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if [c, h, w] != cfg.input {
        return Err(Error::shape("model input", &x.shape()[1..], &cfg.input));
    }
    Ok(())
}

/// Logits for input `x` on `tape`, using parameter handles from [`register`].
/// The perturbation runs only when `training` is set.
pub fn forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    x: Var,
    cfg: &CnnConfig,
    mut perturb: Option<&mut dyn FeaturePerturbation<T>>,
    training: bool,
) -> Result<Var> {
    check_input(tape.value(x), cfg)?;
    if vars.len() != 2 * cfg.blocks() + 2 {
        return Err(Error::invalid(format!(
            "expected {} parameter handles, got {}",
            2 * cfg.blocks() + 2,
            vars.len()
        )));
    }
    let pad = cfg.kernel / 2;
    let mut h = x;
    for k in 1..=cfg.blocks() {
        h = tape.conv2d(h, vars[2 * k - 2], vars[2 * k - 1], 1, pad)?;
        h = tape.relu(h);
        h = tape.max_pool2(h)?;
        if training && cfg.insertion.contains(&InsertionPoint(k)) {
            if let Some(hook) = perturb.as_deref_mut() {
                if let Some(target) = hook.plan(tape.value(h), k)? {
                    h = tape.adain(h, target)?;
                }
            }
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let n = vars.len();
    tape.linear(pooled, vars[n - 2], vars[n - 1])
}

/// Logits as a plain tensor.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &CnnConfig,
    perturb: Option<&mut dyn FeaturePerturbation<T>>,
    training: bool,
) -> Result<Tensor<T>> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let xv = tape.constant(x.clone());
    let logits = forward_on(&mut tape, &vars, xv, cfg, perturb, training)?;
    Ok(tape.value(logits).clone())
}

/// Pre-activation output of the first convolution.
pub fn first_conv<T: Scalar>(x: &Tensor<T>, params: &ModelParams<T>, cfg: &CnnConfig) -> Result<Tensor<T>> {
    params.check(cfg)?;
    check_input(x, cfg)?;
    crate::tensor::conv2d(x, &params.tensors[0], &params.tensors[1], 1, cfg.kernel / 2)
}
