//! Route predictions, classification and consistency losses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{js_terms, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One view of a batch passed through the shared network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Route {
    /// Original input.
    O,
    /// Image-level perturbation.
    I,
    /// Feature-level perturbation.
    F,
    /// Both.
    IF,
}

impl Route {
    pub const ALL: [Route; 4] = [Route::O, Route::I, Route::F, Route::IF];

    pub fn uses_augmentation(self) -> bool {
        matches!(self, Route::I | Route::IF)
    }

    pub fn uses_feature_perturbation(self) -> bool {
        matches!(self, Route::F | Route::IF)
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::O => "O",
            Route::I => "I",
            Route::F => "F",
            Route::IF => "IF",
        })
    }
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "O" => Ok(Route::O),
            "I" => Ok(Route::I),
            "F" => Ok(Route::F),
            "IF" => Ok(Route::IF),
            _ => Err(Error::Config(format!("unknown route {s:?}; valid: O, I, F, IF"))),
        }
    }
}

/// A non-empty set of enabled routes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteMask(BTreeSet<Route>);

impl RouteMask {
    pub fn new(routes: impl IntoIterator<Item = Route>) -> Result<Self> {
        let set: BTreeSet<Route> = routes.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("route mask must enable at least one route".into()));
        }
        Ok(Self(set))
    }

    pub fn all() -> Self {
        Self(Route::ALL.into_iter().collect())
    }

    pub fn only_original() -> Self {
        Self(BTreeSet::from([Route::O]))
    }

    pub fn contains(&self, r: Route) -> bool {
        self.0.contains(&r)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Enabled routes in the fixed order O, I, F, IF.
    pub fn iter(&self) -> impl Iterator<Item = Route> + '_ {
        self.0.iter().copied()
    }

    pub fn needs_augmentation(&self) -> bool {
        self.iter().any(Route::uses_augmentation)
    }
}

impl Default for RouteMask {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for RouteMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|r| r.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for RouteMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let routes = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Route>>>()?;
        RouteMask::new(routes)
    }
}

/// Softmax probabilities `N × K` for each enabled route.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutePredictions<T: Scalar = f32> {
    pub routes: BTreeMap<Route, Tensor<T>>,
}

impl<T: Scalar> RoutePredictions<T> {
    pub fn new(routes: BTreeMap<Route, Tensor<T>>) -> Result<Self> {
        let mut shape: Option<&[usize]> = None;
        for t in routes.values() {
            if t.rank() != 2 {
                return Err(Error::invalid(format!(
                    "route predictions must be N×K, got {:?}",
                    t.shape()
                )));
            }
            match shape {
                Some(s) if s != t.shape() => return Err(Error::shape("route predictions", s, t.shape())),
                _ => shape = Some(t.shape()),
            }
        }
        Ok(Self { routes })
    }

    pub fn get(&self, r: Route) -> Option<&Tensor<T>> {
        self.routes.get(&r)
    }

    pub fn mask(&self) -> Vec<Route> {
        self.routes.keys().copied().collect()
    }
}

/// Arithmetic mean of the enabled routes' probabilities.
pub fn mean_prediction<T: Scalar>(preds: &RoutePredictions<T>) -> Result<Tensor<T>> {
    let mut it = preds.routes.values();
    let first = it.next().ok_or_else(|| Error::invalid("mean of an empty route set"))?;
    let mut acc = first.clone();
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(T::from_f64(1.0 / preds.routes.len() as f64)))
}

const NORMALIZATION_TOL: f64 = 1e-4;

fn check_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|v| !(v.as_f64() >= 0.0)) {
        return Err(Error::Domain {
            op: "js_divergence",
            detail: format!("not a distribution (sum {sum})"),
        });
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("js_divergence", &[p.len()], &[q.len()]));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(js_terms(p, q))
}

/// Batch-mean cross-entropy of each route, and their sum.
pub fn classification_loss<T: Scalar>(
    preds: &RoutePredictions<T>,
    labels: &[usize],
) -> Result<(f64, BTreeMap<Route, f64>)> {
    let mut per_route = BTreeMap::new();
    for (&r, p) in &preds.routes {
        let &[n, k] = p.shape() else { unreachable!() };
        if labels.len() != n {
            return Err(Error::shape("classification labels", &[n], &[labels.len()]));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
            }
            total -= p.data()[i * k + y].as_f64().ln();
        }
        per_route.insert(r, total / n as f64);
    }
    Ok((per_route.values().sum(), per_route))
}

/// Batch mean of the summed divergences between each route and the mean prediction.
pub fn consistency_loss<T: Scalar>(preds: &RoutePredictions<T>) -> Result<f64> {
    if preds.routes.len() < 2 {
        return Ok(0.0);
    }
    let mean = mean_prediction(preds)?;
    let &[n, k] = mean.shape() else { unreachable!() };
    let mut total = 0.0;
    for p in preds.routes.values() {
        for i in 0..n {
            let r = i * k..(i + 1) * k;
            total += js_terms(&mean.data()[r.clone()], &p.data()[r]);
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_cons: f64,
    pub total: f64,
    pub per_route_cls: BTreeMap<Route, f64>,
}

pub fn total_loss(l_cls: f64, l_cons: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_cls,
        l_cons,
        total: l_cls + lambda * l_cons,
        per_route_cls: BTreeMap::new(),
    }
}

/// Loss nodes built on a tape from per-route logits.
pub struct TapeLoss {
    pub total: Var,
    pub l_cls: Var,
    pub l_cons: Option<Var>,
    pub per_route_cls: Vec<(Route, Var)>,
}

/// Summed route cross-entropy plus `lambda` times the consistency term. The
/// consistency term is left off the tape when `lambda` is zero or only one
/// route is present.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[(Route, Var)],
    labels: &[usize],
    lambda: f64,
) -> Result<TapeLoss> {
    if logits.is_empty() {
        return Err(Error::invalid("no routes to score"));
    }
    let mut per_route_cls = Vec::with_capacity(logits.len());
    for &(r, z) in logits {
        let logp = tape.log_softmax(z)?;
        per_route_cls.push((r, tape.nll(logp, labels)?));
    }
    let mut l_cls = per_route_cls[0].1;
    for &(_, v) in &per_route_cls[1..] {
        l_cls = tape.add(l_cls, v)?;
    }
    if lambda == 0.0 || logits.len() < 2 {
        return Ok(TapeLoss {
            total: l_cls,
            l_cls,
            l_cons: None,
            per_route_cls,
        });
    }
    let probs = logits
        .iter()
        .map(|&(_, z)| tape.softmax(z))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = probs[0];
    for &p in &probs[1..] {
        sum = tape.add(sum, p)?;
    }
    let mean = tape.scale(sum, T::from_f64(1.0 / probs.len() as f64));
    let mut js = tape.js_rows(mean, probs[0])?;
    for &p in &probs[1..] {
        let d = tape.js_rows(mean, p)?;
        js = tape.add(js, d)?;
    }
    let l_cons = tape.mean(js);
    let weighted = tape.scale(l_cons, T::from_f64(lambda));
    let total = tape.add(l_cls, weighted)?;
    Ok(TapeLoss {
        total,
        l_cls,
        l_cons: Some(l_cons),
        per_route_cls,
    })
}

impl TapeLoss {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>, lambda: f64) -> LossBreakdown {
        let l_cls = tape.value(self.l_cls).item().as_f64();
        let l_cons = self.l_cons.map_or(0.0, |v| tape.value(v).item().as_f64());
        let mut b = total_loss(l_cls, l_cons, lambda);
        b.per_route_cls = self
            .per_route_cls
            .iter()
            .map(|&(r, v)| (r, tape.value(v).item().as_f64()))
            .collect();
        b
    }
}
