//! Per-patch feature statistics and the AdaIN renormalization built on them.

use crate::error::{Error, Result};
use crate::perturb::partition::PatchPartition;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Per-instance, per-patch, per-channel mean and standard deviation.
///
/// Entries are stored flat in `(instance, patch, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStats<T = f32> {
    pub batch: usize,
    pub patches: usize,
    pub channels: usize,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> PatchStats<T> {
    pub fn index(&self, n: usize, p: usize, c: usize) -> usize {
        (n * self.patches + p) * self.channels + c
    }

    pub fn mu_at(&self, n: usize, p: usize, c: usize) -> T {
        self.mu[self.index(n, p, c)]
    }

    pub fn sigma_at(&self, n: usize, p: usize, c: usize) -> T {
        self.sigma[self.index(n, p, c)]
    }

    /// The `(μ, σ)` pairs of one instance's channel, in patch order.
    pub fn channel_pairs(&self, n: usize, c: usize) -> Vec<(T, T)> {
        (0..self.patches)
            .map(|p| (self.mu_at(n, p, c), self.sigma_at(n, p, c)))
            .collect()
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.batch == other.batch && self.patches == other.patches && self.channels == other.channels
    }
}

/// Per-instance, per-channel spread of patch statistics (`Σ_μ̄`, `Σ_σ̄`),
/// stored flat in `(instance, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyStats<T = f32> {
    pub batch: usize,
    pub channels: usize,
    pub sigma_mu: Vec<T>,
    pub sigma_sigma: Vec<T>,
}

/// The per-(instance, channel) permutations applied by [`shuffle_stats`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleRecord {
    pub batch: usize,
    pub channels: usize,
    /// `perms[n * channels + c][p]` is the source patch for destination `p`.
    pub perms: Vec<Vec<usize>>,
}

/// Standard-normal draws used by [`perturb_stats`], in `(instance, patch,
/// channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
}

fn check_partition<T: Scalar>(f: &Tensor<T>, part: &PatchPartition) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = f.dims4()?;
    if h != part.height || w != part.width {
        return Err(Error::shape("patch partition", f.shape(), &[part.height, part.width]));
    }
    Ok((n, c, h, w))
}

pub fn patch_statistics<T: Scalar>(f: &Tensor<T>, part: &PatchPartition, eps: f64) -> Result<PatchStats<T>> {
    let (n, c, h, w) = check_partition(f, part)?;
    let np = part.len();
    let mut mu = Vec::with_capacity(n * np * c);
    let mut sigma = Vec::with_capacity(n * np * c);
    let data = f.data();
    for ni in 0..n {
        for b in &part.patches {
            let area = b.area() as f64;
            for ci in 0..c {
                let plane = &data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let rows = || (b.h0..b.h1).flat_map(|y| plane[y * w + b.w0..y * w + b.w1].iter());
                let mean = rows().map(|v| v.as_f64()).sum::<f64>() / area;
                let var = rows().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / area;
                mu.push(T::from_f64(mean));
                sigma.push(T::from_f64((var + eps).sqrt()));
            }
        }
    }
    Ok(PatchStats {
        batch: n,
        patches: np,
        channels: c,
        mu,
        sigma,
        eps,
    })
}

/// Reorders each channel's `(μ, σ)` pairs by a fresh permutation per
/// instance and channel.
pub fn shuffle_stats<T: Scalar>(stats: &PatchStats<T>, rng: &mut Rng) -> Result<(PatchStats<T>, ShuffleRecord)> {
    let mut perms = Vec::with_capacity(stats.batch * stats.channels);
    for _ in 0..stats.batch * stats.channels {
        perms.push(rng.permutation(stats.patches)?);
    }
    let record = ShuffleRecord {
        batch: stats.batch,
        channels: stats.channels,
        perms,
    };
    Ok((apply_shuffle(stats, &record)?, record))
}

/// Replays a recorded shuffle.
pub fn apply_shuffle<T: Scalar>(stats: &PatchStats<T>, record: &ShuffleRecord) -> Result<PatchStats<T>> {
    if record.batch != stats.batch
        || record.channels != stats.channels
        || record.perms.iter().any(|p| p.len() != stats.patches)
    {
        return Err(Error::invalid("shuffle record does not match the statistics layout"));
    }
    let mut out = stats.clone();
    for n in 0..stats.batch {
        for c in 0..stats.channels {
            let perm = &record.perms[n * stats.channels + c];
            for (dst, &src) in perm.iter().enumerate() {
                let (i, j) = (stats.index(n, dst, c), stats.index(n, src, c));
                out.mu[i] = stats.mu[j];
                out.sigma[i] = stats.sigma[j];
            }
        }
    }
    Ok(out)
}

/// Population standard deviation across patches of each channel's means and stds.
pub fn stats_uncertainty<T: Scalar>(stats: &PatchStats<T>) -> UncertaintyStats<T> {
    let mut sigma_mu = Vec::with_capacity(stats.batch * stats.channels);
    let mut sigma_sigma = Vec::with_capacity(stats.batch * stats.channels);
    let p = stats.patches as f64;
    let spread = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = values.collect();
        let mean = v.iter().sum::<f64>() / p;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p).sqrt()
    };
    for n in 0..stats.batch {
        for c in 0..stats.channels {
            let mut mus = (0..stats.patches).map(|pi| stats.mu_at(n, pi, c).as_f64());
            let mut sigmas = (0..stats.patches).map(|pi| stats.sigma_at(n, pi, c).as_f64());
            sigma_mu.push(T::from_f64(spread(&mut mus)));
            sigma_sigma.push(T::from_f64(spread(&mut sigmas)));
        }
    }
    UncertaintyStats {
        batch: stats.batch,
        channels: stats.channels,
        sigma_mu,
        sigma_sigma,
    }
}

pub fn draw_noise(len: usize, rng: &mut Rng) -> NoiseDraws {
    let eps_mu = (0..len).map(|_| rng.standard_normal()).collect();
    let eps_sigma = (0..len).map(|_| rng.standard_normal()).collect();
    NoiseDraws { eps_mu, eps_sigma }
}

/// `μ̃ = μ̄ + ε_μ·Σ_μ̄`, `σ̃ = max(σ̄ + ε_σ·Σ_σ̄, clamp_floor)` with fresh draws
/// per instance, patch and channel.
pub fn perturb_stats<T: Scalar>(
    shuffled: &PatchStats<T>,
    unc: &UncertaintyStats<T>,
    rng: &mut Rng,
    clamp_floor: f64,
) -> Result<PatchStats<T>> {
    let draws = draw_noise(shuffled.mu.len(), rng);
    perturb_stats_with(shuffled, unc, &draws, clamp_floor)
}

/// [`perturb_stats`] with explicit noise draws.
pub fn perturb_stats_with<T: Scalar>(
    shuffled: &PatchStats<T>,
    unc: &UncertaintyStats<T>,
    draws: &NoiseDraws,
    clamp_floor: f64,
) -> Result<PatchStats<T>> {
    if unc.batch != shuffled.batch
        || unc.channels != shuffled.channels
        || draws.eps_mu.len() != shuffled.mu.len()
        || draws.eps_sigma.len() != shuffled.sigma.len()
    {
        return Err(Error::invalid(
            "uncertainty or noise draws do not match the statistics layout",
        ));
    }
    let floor = T::from_f64(clamp_floor);
    let mut out = shuffled.clone();
    for n in 0..shuffled.batch {
        for p in 0..shuffled.patches {
            for c in 0..shuffled.channels {
                let i = shuffled.index(n, p, c);
                let u = n * unc.channels + c;
                out.mu[i] = shuffled.mu[i] + T::from_f64(draws.eps_mu[i]) * unc.sigma_mu[u];
                let s = shuffled.sigma[i] + T::from_f64(draws.eps_sigma[i]) * unc.sigma_sigma[u];
                out.sigma[i] = if s < floor { floor } else { s };
            }
        }
    }
    Ok(out)
}

/// Target statistics for an AdaIN renormalization, together with the
/// partition they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct AdainTarget<T = f32> {
    pub partition: PatchPartition,
    pub target: PatchStats<T>,
}

/// Per patch and channel: `σ̃·(f − μ)/σ + μ̃`.
pub fn apply_adain_patches<T: Scalar>(
    f: &Tensor<T>,
    part: &PatchPartition,
    orig: &PatchStats<T>,
    target: &PatchStats<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_partition(f, part)?;
    if orig.batch != n || orig.channels != c || orig.patches != part.len() || !orig.same_layout(target) {
        return Err(Error::invalid("statistics do not match the feature map and partition"));
    }
    let owner = part.pixel_owner();
    let mut out = f.clone();
    let data = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for (px, &p) in owner.iter().enumerate() {
                let i = orig.index(ni, p, ci);
                let v = data[base + px];
                data[base + px] = target.sigma[i] * ((v - orig.mu[i]) / orig.sigma[i]) + target.mu[i];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`apply_adain_patches`] with respect to `f`, where `orig` is a
/// function of `f` (computed with `eps`) and `target` is held constant.
pub(crate) fn adain_patches_backward<T: Scalar>(
    f: &Tensor<T>,
    part: &PatchPartition,
    orig: &PatchStats<T>,
    target: &PatchStats<T>,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_partition(f, part)?;
    let mut dx = Tensor::zeros(f.shape());
    let x = f.data();
    let dy = dout.data();
    let dxd = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for (p, b) in part.patches.iter().enumerate() {
                let i = orig.index(ni, p, ci);
                let (mu, sigma, gain) = (orig.mu[i].as_f64(), orig.sigma[i].as_f64(), target.sigma[i].as_f64());
                let area = b.area() as f64;
                let idx = || (b.h0..b.h1).flat_map(move |y| (b.w0..b.w1).map(move |xx| base + y * w + xx));
                let (mut g_mean, mut gx_mean) = (0.0, 0.0);
                for j in idx() {
                    let g = gain * dy[j].as_f64();
                    g_mean += g;
                    gx_mean += g * (x[j].as_f64() - mu) / sigma;
                }
                g_mean /= area;
                gx_mean /= area;
                for j in idx() {
                    let g = gain * dy[j].as_f64();
                    let xhat = (x[j].as_f64() - mu) / sigma;
                    dxd[j] = T::from_f64((g - g_mean - xhat * gx_mean) / sigma);
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::partition::{make_partition, PatchBounds, SplitScheme};
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn split_rows(h: usize, w: usize, s: usize) -> PatchPartition {
        PatchPartition {
            scheme: Some(SplitScheme::P2UdRandom),
            height: h,
            width: w,
            patches: vec![
                PatchBounds {
                    h0: 0,
                    h1: s,
                    w0: 0,
                    w1: w,
                },
                PatchBounds {
                    h0: s,
                    h1: h,
                    w0: 0,
                    w1: w,
                },
            ],
        }
    }

    /// Direct double loop over every pixel of every patch.
    fn naive_stats(f: &Tensor<f64>, part: &PatchPartition, eps: f64) -> Vec<(f64, f64)> {
        let (n, c, h, w) = f.dims4().unwrap();
        let mut out = Vec::new();
        for ni in 0..n {
            for b in &part.patches {
                for ci in 0..c {
                    let mut vals = Vec::new();
                    for y in b.h0..b.h1 {
                        for x in b.w0..b.w1 {
                            vals.push(f.data()[((ni * c + ci) * h + y) * w + x]);
                        }
                    }
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                    out.push((m, (v + eps).sqrt()));
                }
            }
        }
        out
    }

    #[test]
    fn hand_computed_patch_stats() {
        let f = Tensor::<f64>::from_f64_slice(&[1, 1, 4, 2], &[1., 1., 1., 1., 3., 3., 5., 5.]).unwrap();
        let s = patch_statistics(&f, &split_rows(4, 2, 2), 0.0).unwrap();
        assert_eq!(s.channel_pairs(0, 0), vec![(1.0, 0.0), (4.0, 1.0)]);
    }

    #[test]
    fn constant_map_stats() {
        let f = Tensor::<f64>::full(&[2, 3, 6, 6], 2.5);
        let part = make_partition(6, 6, SplitScheme::P4Equal, &mut Rng::new(0)).unwrap();
        let s = patch_statistics(&f, &part, 1e-6).unwrap();
        assert!(s.mu.iter().all(|&m| m == 2.5));
        assert!(s.sigma.iter().all(|&v| (v - 1e-3).abs() < 1e-12));
    }

    #[test]
    fn stats_match_naive_loops() {
        let mut rng = Rng::new(21);
        let f: Tensor<f64> = rng.normal(&[2, 3, 8, 8]);
        let part = make_partition(8, 8, SplitScheme::P2LrRandom, &mut rng).unwrap();
        let s = patch_statistics(&f, &part, 1e-6).unwrap();
        let naive = naive_stats(&f, &part, 1e-6);
        for (i, (m, sd)) in naive.iter().enumerate() {
            assert!((s.mu[i] - m).abs() < 1e-5 && (s.sigma[i] - sd).abs() < 1e-5);
        }
    }

    #[test]
    fn swap_and_identity_shuffle() {
        let stats = PatchStats::<f64> {
            batch: 1,
            patches: 2,
            channels: 1,
            mu: vec![1.0, 4.0],
            sigma: vec![0.5, 1.0],
            eps: 0.0,
        };
        let swap = ShuffleRecord {
            batch: 1,
            channels: 1,
            perms: vec![vec![1, 0]],
        };
        let out = apply_shuffle(&stats, &swap).unwrap();
        assert_eq!(out.channel_pairs(0, 0), vec![(4.0, 1.0), (1.0, 0.5)]);
        let ident = ShuffleRecord {
            batch: 1,
            channels: 1,
            perms: vec![vec![0, 1]],
        };
        assert_eq!(apply_shuffle(&stats, &ident).unwrap(), stats);
    }

    #[test]
    fn uncertainty_examples() {
        let stats = PatchStats::<f64> {
            batch: 1,
            patches: 2,
            channels: 1,
            mu: vec![1.0, 3.0],
            sigma: vec![2.0, 2.0],
            eps: 0.0,
        };
        let u = stats_uncertainty(&stats);
        assert_eq!(u.sigma_mu, vec![1.0]);
        assert_eq!(u.sigma_sigma, vec![0.0]);
    }

    #[test]
    fn uncertainty_matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let f: Tensor<f64> = rng.normal(&[3, 2, 6, 6]);
        let part = make_partition(6, 6, SplitScheme::P4Random, &mut rng).unwrap();
        let s = patch_statistics(&f, &part, 1e-6).unwrap();
        let u = stats_uncertainty(&s);
        for n in 0..3 {
            for c in 0..2 {
                let mus: Vec<f64> = (0..4).map(|p| s.mu_at(n, p, c)).collect();
                let m = mus.iter().sum::<f64>() / 4.0;
                let var = mus.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
                assert!((u.sigma_mu[n * 2 + c] - var.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn perturb_examples() {
        let stats = PatchStats::<f64> {
            batch: 1,
            patches: 1,
            channels: 1,
            mu: vec![4.0],
            sigma: vec![0.1],
            eps: 0.0,
        };
        let zero = UncertaintyStats {
            batch: 1,
            channels: 1,
            sigma_mu: vec![0.0],
            sigma_sigma: vec![0.0],
        };
        assert_eq!(perturb_stats(&stats, &zero, &mut Rng::new(3), 1e-4).unwrap(), stats);

        let unc = UncertaintyStats {
            batch: 1,
            channels: 1,
            sigma_mu: vec![1.0],
            sigma_sigma: vec![10.0],
        };
        let draws = NoiseDraws {
            eps_mu: vec![1.0],
            eps_sigma: vec![-1.0],
        };
        let out = perturb_stats_with(&stats, &unc, &draws, 1e-3).unwrap();
        assert_eq!(out.mu, vec![5.0]);
        assert_eq!(out.sigma, vec![1e-3]);

        // Replaying the draws of a seeded stream reproduces perturb_stats.
        let random = perturb_stats(&stats, &unc, &mut Rng::new(17), 1e-3).unwrap();
        let replay = perturb_stats_with(&stats, &unc, &draw_noise(1, &mut Rng::new(17)), 1e-3).unwrap();
        assert_eq!(random, replay);
    }

    #[test]
    fn adain_hand_example() {
        let f = Tensor::<f64>::from_f64_slice(&[1, 1, 2, 2], &[3., 3., 5., 5.]).unwrap();
        let part = PatchPartition::whole(2, 2);
        let orig = patch_statistics(&f, &part, 0.0).unwrap();
        assert_eq!((orig.mu[0], orig.sigma[0]), (4.0, 1.0));
        let target = PatchStats {
            mu: vec![0.0],
            sigma: vec![2.0],
            ..orig.clone()
        };
        let out = apply_adain_patches(&f, &part, &orig, &target).unwrap();
        assert_eq!(out.data(), &[-2.0, -2.0, 2.0, 2.0]);
    }

    #[test]
    fn adain_identity_target() {
        let mut rng = Rng::new(2);
        let f: Tensor<f32> = rng.normal(&[2, 3, 6, 6]);
        let part = make_partition(6, 6, SplitScheme::P2UdRandom, &mut rng).unwrap();
        let orig = patch_statistics(&f, &part, 1e-6).unwrap();
        let out = apply_adain_patches(&f, &part, &orig, &orig).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-5);
    }

    #[test]
    fn adain_partition_mismatch() {
        let f = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let part = PatchPartition::whole(4, 4);
        let orig = patch_statistics(&f, &part, 1e-6).unwrap();
        let g = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(apply_adain_patches(&g, &part, &orig, &orig).is_err());
        assert!(patch_statistics(&g, &part, 1e-6).is_err());
    }

    #[test]
    fn adain_backward_matches_finite_differences() {
        let mut rng = Rng::new(99);
        let f: Tensor<f64> = rng.normal(&[1, 2, 5, 4]);
        let part = make_partition(5, 4, SplitScheme::P2UdRandom, &mut rng).unwrap();
        let eps = 1e-6;
        let orig = patch_statistics(&f, &part, eps).unwrap();
        let target = PatchStats {
            mu: orig.mu.iter().map(|m| m + 0.3).collect(),
            sigma: orig.sigma.iter().map(|s| s * 1.7).collect(),
            ..orig.clone()
        };
        let weights: Tensor<f64> = rng.normal(f.shape());
        let objective = |x: &Tensor<f64>| -> f64 {
            let o = patch_statistics(x, &part, eps).unwrap();
            let y = apply_adain_patches(x, &part, &o, &target).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let grad = adain_patches_backward(&f, &part, &orig, &target, &weights).unwrap();
        let h = 1e-5;
        for j in 0..f.len() {
            let mut plus = f.clone();
            plus.data_mut()[j] += h;
            let mut minus = f.clone();
            minus.data_mut()[j] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert_relative_eq!(grad.data()[j], fd, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn shuffle_preserves_pair_multiset(seed in any::<u64>(), idx in 0usize..7) {
            let mut rng = Rng::new(seed);
            let f: Tensor<f64> = rng.normal(&[2, 3, 9, 9]);
            let part = make_partition(9, 9, SplitScheme::ALL[idx], &mut rng).unwrap();
            let s = patch_statistics(&f, &part, 1e-6).unwrap();
            let (sh, _) = shuffle_stats(&s, &mut rng).unwrap();
            for n in 0..2 {
                for c in 0..3 {
                    let key = |v: Vec<(f64, f64)>| {
                        let mut v = v;
                        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        v
                    };
                    prop_assert_eq!(key(s.channel_pairs(n, c)), key(sh.channel_pairs(n, c)));
                }
            }
        }

        #[test]
        fn adain_transfers_moments(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let f: Tensor<f64> = rng.normal(&[2, 2, 7, 6]);
            let part = make_partition(7, 6, SplitScheme::P4Random, &mut rng).unwrap();
            let orig = patch_statistics(&f, &part, 0.0).unwrap();
            let target = PatchStats {
                mu: orig.mu.iter().map(|_| rng.uniform_scalar(-3.0, 3.0).unwrap()).collect(),
                sigma: orig.sigma.iter().map(|_| rng.uniform_scalar(0.1, 4.0).unwrap()).collect(),
                ..orig.clone()
            };
            let out = apply_adain_patches(&f, &part, &orig, &target).unwrap();
            let got = patch_statistics(&out, &part, 0.0).unwrap();
            for i in 0..got.mu.len() {
                prop_assert!((got.mu[i] - target.mu[i]).abs() < 1e-4);
                prop_assert!((got.sigma[i] - target.sigma[i]).abs() < 1e-4);
            }
        }
    }
}
