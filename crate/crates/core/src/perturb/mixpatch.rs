use crate::error::Result;
use crate::perturb::partition::make_partition;
use crate::perturb::stats::{
    apply_adain_patches, patch_statistics, perturb_stats, shuffle_stats, stats_uncertainty, AdainTarget, PatchStats,
};
use crate::perturb::PerturbConfig;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Draws a MixPatch target for `f`, or `None` when the batch is skipped.
///
/// Stream order: the apply coin, the partition split, the shuffle
/// permutations, then the Gaussian noise. Returns the target together with the
/// original patch statistics.
pub fn mixpatch_target<T: Scalar>(
    f: &Tensor<T>,
    cfg: &PerturbConfig,
    rng: &mut Rng,
) -> Result<Option<(AdainTarget<T>, PatchStats<T>)>> {
    cfg.validate()?;
    let (_, _, h, w) = f.dims4()?;
    if !rng.bernoulli(cfg.apply_probability)? {
        return Ok(None);
    }
    let partition = make_partition(h, w, cfg.scheme, rng)?;
    let stats = patch_statistics(f, &partition, cfg.eps)?;
    let shuffled = if cfg.shuffle_enabled {
        shuffle_stats(&stats, rng)?.0
    } else {
        stats.clone()
    };
    let target = if cfg.noise_enabled {
        let unc = stats_uncertainty(&shuffled);
        perturb_stats(&shuffled, &unc, rng, cfg.clamp_floor)?
    } else {
        shuffled
    };
    Ok(Some((AdainTarget { partition, target }, stats)))
}

/// MixPatch on a plain tensor. At inference (`training == false`) the input is
/// returned unchanged.
pub fn mixpatch<T: Scalar>(f: &Tensor<T>, cfg: &PerturbConfig, rng: &mut Rng, training: bool) -> Result<Tensor<T>> {
    if !training {
        return Ok(f.clone());
    }
    match mixpatch_target(f, cfg, rng)? {
        Some((t, orig)) => apply_adain_patches(f, &t.partition, &orig, &t.target),
        None => Ok(f.clone()),
    }
}
