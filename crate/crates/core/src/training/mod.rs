//! The four-route objective, the optimization loop and evaluation.

mod losses;
mod optim;

use std::fmt::Write as _;

pub use losses::{
    classification_loss, consistency_loss, js_divergence, loss_on_tape, mean_prediction, total_loss, LossBreakdown,
    Route, RouteMask, RoutePredictions, TapeLoss,
};
pub use optim::{cosine_lr, sgd_step, SgdConfig, SgdState};

use crate::augment::{augment_batch, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, forward_on, init_params, register, CnnConfig, ModelParams};
use crate::perturb::{feature_hook, FeatureMethod, PerturbConfig};
use crate::rng::Rng;
use crate::tensor::{softmax, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub perturb: PerturbConfig,
    pub method: FeatureMethod,
    pub augment: AugmentConfig,
    pub routes: RouteMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            sgd: SgdConfig::default(),
            epochs: 30,
            batch_size: 32,
            lambda: 5.0,
            seed: 0,
            perturb: PerturbConfig::default(),
            method: FeatureMethod::MixPatch,
            augment: AugmentConfig::default(),
            routes: RouteMask::all(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1) and weight_decay non-negative, got {} and {}",
                self.sgd.momentum, self.sgd.weight_decay
            )));
        }
        self.perturb.validate()?;
        self.augment.validate()
    }
}

/// Logits of every enabled route for one batch. The I and IF routes share a
/// single augmented view; F and IF each get their own perturbation stream.
/// Randomness is drawn only for the routes that need it.
pub fn route_logits_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    x: &Tensor<T>,
    model: &CnnConfig,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<(Route, Var)>> {
    let xo = tape.constant(x.clone());
    let xi = if cfg.routes.needs_augmentation() {
        let mut aug_rng = rng.split();
        if cfg.augment.is_identity() {
            xo
        } else {
            let aug = augment_batch(x, &mut aug_rng, &cfg.augment)?;
            tape.constant(aug)
        }
    } else {
        xo
    };
    let mut out = Vec::with_capacity(cfg.routes.len());
    for route in cfg.routes.iter() {
        let input = if route.uses_augmentation() { xi } else { xo };
        let logits = if route.uses_feature_perturbation() {
            let mut hook = feature_hook::<T>(cfg.method, &cfg.perturb, rng.split());
            forward_on(tape, vars, input, model, Some(hook.as_mut()), true)?
        } else {
            forward_on(tape, vars, input, model, None, true)?
        };
        out.push((route, logits));
    }
    Ok(out)
}

/// Softmax predictions of every enabled route.
pub fn four_route_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &ModelParams<T>,
    model: &CnnConfig,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<RoutePredictions<T>> {
    params.check(model)?;
    if x.shape().first() == Some(&0) {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let logits = route_logits_on(&mut tape, &vars, x, model, cfg, rng)?;
    let routes = logits
        .into_iter()
        .map(|(r, z)| Ok((r, softmax(tape.value(z), 1)?)))
        .collect::<Result<_>>()?;
    RoutePredictions::new(routes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub l_cls: f64,
    pub l_cons: f64,
    pub total: f64,
    /// Accuracy of the first enabled route on the training batches, before each update.
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,l_cls,l_cons,total,train_acc";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:.8e},{:.8},{:.8},{:.8},{:.6}",
                e.epoch, e.step, e.lr, e.l_cls, e.l_cons, e.total, e.train_acc
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn check_dataset(data: &Dataset, model: &CnnConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if data.image_shape() != model.input {
        return Err(Error::shape("dataset images", &data.image_shape(), &model.input));
    }
    if data.classes != model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.classes, model.classes
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
///
/// Stream order: parameter init draws from the first child stream; each epoch
/// then draws one permutation of the samples, and each step draws the
/// augmentation and feature-perturbation streams of the enabled routes.
pub fn fit(data: &Dataset, model: &CnnConfig, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    model.validate()?;
    check_dataset(data, model)?;
    let mut rng = Rng::new(cfg.seed);
    let mut params: ModelParams = init_params(model, &mut rng.split())?;
    let mut state = SgdState::new(&params);
    let batches = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = rng.permutation(data.len())?;
        let (mut cls, mut cons, mut tot, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = cfg.lr0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(idx)?;
            let mut tape = Tape::new();
            let vars = register(&mut tape, &params);
            let logits = route_logits_on(&mut tape, &vars, &x, model, cfg, &mut rng)?;
            let loss = loss_on_tape(&mut tape, &logits, &labels, cfg.lambda)?;
            let b = loss.breakdown(&tape, cfg.lambda);
            if !b.total.is_finite() {
                return Err(Error::Domain {
                    op: "fit",
                    detail: format!("non-finite loss at epoch {epoch}, step {step}"),
                });
            }
            let w = idx.len() as f64;
            cls += b.l_cls * w;
            cons += b.l_cons * w;
            tot += b.total * w;
            correct += argmax_rows(tape.value(logits[0].1))
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = tape.backward(loss.total)?;
            lr = cosine_lr(step, total_steps, cfg.lr0);
            sgd_step(&mut params, &grads, &mut state, lr, &cfg.sgd)?;
            step += 1;
        }
        let n = data.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            step,
            lr,
            l_cls: cls / n,
            l_cons: cons / n,
            total: tot / n,
            train_acc: correct as f64 / n,
        });
    }
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `(correct, count)` per class.
    pub per_class: Vec<(usize, usize)>,
}

impl EvalResult {
    pub fn class_accuracy(&self, k: usize) -> Option<f64> {
        let (c, n) = self.per_class[k];
        (n > 0).then(|| c as f64 / n as f64)
    }
}

const EVAL_CHUNK: usize = 256;

/// Arg-max predictions with every perturbation off.
pub fn predict(params: &ModelParams, model: &CnnConfig, data: &Dataset) -> Result<Vec<usize>> {
    check_dataset(data, model)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        out.extend(argmax_rows(&forward(&x, params, model, None, false)?));
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, model: &CnnConfig, data: &Dataset) -> Result<EvalResult> {
    let preds = predict(params, model, data)?;
    Ok(score(&preds, &data.labels, data.classes))
}

pub fn score(preds: &[usize], labels: &[usize], classes: usize) -> EvalResult {
    let mut per_class = vec![(0, 0); classes];
    for (&p, &y) in preds.iter().zip(labels) {
        per_class[y].1 += 1;
        if p == y {
            per_class[y].0 += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.0).sum();
    EvalResult {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class,
    }
}
