//! Instance-level baselines: DSU-style uncertainty noise and MixStyle mixing.
//! Both renormalize whole channels, i.e. a single-patch partition.

use crate::error::{Error, Result};
use crate::perturb::partition::PatchPartition;
use crate::perturb::stats::{apply_adain_patches, draw_noise, patch_statistics, AdainTarget, PatchStats};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

fn instance_stats<T: Scalar>(f: &Tensor<T>, eps: f64, op: &str) -> Result<(PatchPartition, PatchStats<T>)> {
    let (n, _, h, w) = f.dims4()?;
    if n < 2 {
        return Err(Error::invalid(format!("{op} needs a batch of at least 2, got {n}")));
    }
    let part = PatchPartition::whole(h, w);
    let stats = patch_statistics(f, &part, eps)?;
    Ok((part, stats))
}

/// Population std over the batch of each channel's statistic.
fn batch_spread<T: Scalar>(values: &[T], batch: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            let col: Vec<f64> = (0..batch).map(|n| values[n * channels + c].as_f64()).collect();
            let mean = col.iter().sum::<f64>() / batch as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / batch as f64).sqrt()
        })
        .collect()
}

/// DSU target: instance statistics shifted by Gaussian noise scaled with the
/// across-batch spread of those statistics.
pub fn dsu_target<T: Scalar>(f: &Tensor<T>, rng: &mut Rng, eps: f64, clamp_floor: f64) -> Result<AdainTarget<T>> {
    let (partition, stats) = instance_stats(f, eps, "DSU")?;
    let (n, c) = (stats.batch, stats.channels);
    let spread_mu = batch_spread(&stats.mu, n, c);
    let spread_sigma = batch_spread(&stats.sigma, n, c);
    let draws = draw_noise(n * c, rng);
    let mut target = stats.clone();
    for i in 0..n * c {
        let ch = i % c;
        target.mu[i] = T::from_f64(stats.mu[i].as_f64() + draws.eps_mu[i] * spread_mu[ch]);
        let s = stats.sigma[i].as_f64() + draws.eps_sigma[i] * spread_sigma[ch];
        target.sigma[i] = T::from_f64(s.max(clamp_floor));
    }
    Ok(AdainTarget { partition, target })
}

pub fn dsu_perturb<T: Scalar>(f: &Tensor<T>, rng: &mut Rng, eps: f64) -> Result<Tensor<T>> {
    let t = dsu_target(f, rng, eps, crate::perturb::DEFAULT_CLAMP_FLOOR)?;
    let orig = patch_statistics(f, &t.partition, eps)?;
    apply_adain_patches(f, &t.partition, &orig, &t.target)
}

/// MixStyle target from explicit per-instance mixing weights and partner
/// permutation: `λ·stat[n] + (1 − λ)·stat[perm[n]]`.
pub fn mixstyle_with<T: Scalar>(f: &Tensor<T>, lambdas: &[f64], perm: &[usize], eps: f64) -> Result<AdainTarget<T>> {
    let (partition, stats) = instance_stats(f, eps, "MixStyle")?;
    let (n, c) = (stats.batch, stats.channels);
    if lambdas.len() != n || perm.len() != n || perm.iter().any(|&p| p >= n) {
        return Err(Error::invalid("MixStyle weights or permutation do not match the batch"));
    }
    let mut target = stats.clone();
    for ni in 0..n {
        let (l, partner) = (lambdas[ni], perm[ni]);
        for ci in 0..c {
            let (i, j) = (ni * c + ci, partner * c + ci);
            target.mu[i] = T::from_f64(l * stats.mu[i].as_f64() + (1.0 - l) * stats.mu[j].as_f64());
            target.sigma[i] = T::from_f64(l * stats.sigma[i].as_f64() + (1.0 - l) * stats.sigma[j].as_f64());
        }
    }
    Ok(AdainTarget { partition, target })
}

/// Draws `N` Beta(α, α) weights, then the partner permutation.
pub fn mixstyle_target<T: Scalar>(f: &Tensor<T>, rng: &mut Rng, alpha: f64, eps: f64) -> Result<AdainTarget<T>> {
    let (n, ..) = f.dims4()?;
    if n < 2 {
        return Err(Error::invalid(format!("MixStyle needs a batch of at least 2, got {n}")));
    }
    let lambdas = (0..n).map(|_| rng.beta(alpha)).collect::<Result<Vec<_>>>()?;
    let perm = rng.permutation(n)?;
    mixstyle_with(f, &lambdas, &perm, eps)
}

pub fn mixstyle_perturb<T: Scalar>(f: &Tensor<T>, rng: &mut Rng, alpha: f64) -> Result<Tensor<T>> {
    let eps = crate::perturb::DEFAULT_EPS;
    let t = mixstyle_target(f, rng, alpha, eps)?;
    let orig = patch_statistics(f, &t.partition, eps)?;
    apply_adain_patches(f, &t.partition, &orig, &t.target)
}
