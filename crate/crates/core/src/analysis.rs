//! Spread of first-layer feature statistics under the four input pipelines.

use std::fmt::Write as _;

use crate::augment::{augment_batch, AugmentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{first_conv, CnnConfig, ModelParams};
use crate::perturb::{apply_adain_patches, feature_hook, patch_statistics, FeatureMethod, PerturbConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::Route;

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub images: usize,
    pub method: FeatureMethod,
    /// Used with its apply probability forced to 1.
    pub perturb: PerturbConfig,
    pub augment: AugmentConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            images: 128,
            method: FeatureMethod::MixPatch,
            perturb: PerturbConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

/// Across-image summaries of one channel's spatial mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpread {
    pub pipeline: Route,
    pub channel: usize,
    pub mean_of_means: f64,
    pub var_of_means: f64,
    pub mean_of_vars: f64,
    pub var_of_vars: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub rows: Vec<ChannelSpread>,
}

impl StatsReport {
    pub const CSV_HEADER: &'static str = "pipeline,channel,mean_of_means,var_of_means,mean_of_vars,var_of_vars";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.8e},{:.8e},{:.8e},{:.8e}",
                r.pipeline, r.channel, r.mean_of_means, r.var_of_means, r.mean_of_vars, r.var_of_vars
            );
        }
        s
    }

    pub fn pipeline(&self, p: Route) -> Vec<&ChannelSpread> {
        self.rows.iter().filter(|r| r.pipeline == p).collect()
    }

    /// Fraction of channels where `f(a) >= f(b)`.
    pub fn fraction_at_least(&self, a: Route, b: Route, f: impl Fn(&ChannelSpread) -> f64) -> f64 {
        let (ra, rb) = (self.pipeline(a), self.pipeline(b));
        let hits = ra.iter().zip(&rb).filter(|(x, y)| f(x) >= f(y)).count();
        hits as f64 / ra.len().max(1) as f64
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

fn spread(f: &Tensor<f32>, pipeline: Route) -> Result<Vec<ChannelSpread>> {
    let (n, c, h, w) = f.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let (means, vars): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let start = (i * c + ch) * hw;
                let vals: Vec<f64> = f.data()[start..start + hw].iter().map(|&v| v as f64).collect();
                mean_var(&vals)
            })
            .unzip();
        let (mean_of_means, var_of_means) = mean_var(&means);
        let (mean_of_vars, var_of_vars) = mean_var(&vars);
        out.push(ChannelSpread {
            pipeline,
            channel: ch,
            mean_of_means,
            var_of_means,
            mean_of_vars,
            var_of_vars,
        });
    }
    Ok(out)
}

/// Passes the first `cfg.images` samples through the first convolution under
/// the O, I, F and IF pipelines and summarizes per-channel statistics.
pub fn analyze_stats(
    data: &Dataset,
    params: &ModelParams,
    model: &CnnConfig,
    cfg: &AnalysisConfig,
    rng: &mut Rng,
) -> Result<StatsReport> {
    if cfg.images == 0 || cfg.images > data.len() {
        return Err(Error::invalid(format!(
            "requested {} images from a dataset of {}",
            cfg.images,
            data.len()
        )));
    }
    let perturb = PerturbConfig {
        apply_probability: 1.0,
        ..cfg.perturb.clone()
    };
    perturb.validate()?;
    let idx: Vec<usize> = (0..cfg.images).collect();
    let (x, _) = data.batch(&idx)?;
    let x_aug = augment_batch(&x, &mut rng.split(), &cfg.augment)?;
    let perturbed = |f: &Tensor<f32>, rng: Rng| -> Result<Tensor<f32>> {
        let mut hook = feature_hook::<f32>(cfg.method, &perturb, rng);
        match hook.plan(f, 0)? {
            Some(t) => {
                let orig = patch_statistics(f, &t.partition, t.target.eps)?;
                apply_adain_patches(f, &t.partition, &orig, &t.target)
            }
            None => Ok(f.clone()),
        }
    };
    let fo = first_conv(&x, params, model)?;
    let fi = first_conv(&x_aug, params, model)?;
    let ff = perturbed(&fo, rng.split())?;
    let fif = perturbed(&fi, rng.split())?;
    let mut rows = Vec::new();
    for (route, f) in [(Route::O, &fo), (Route::I, &fi), (Route::F, &ff), (Route::IF, &fif)] {
        rows.extend(spread(f, route)?);
    }
    Ok(StatsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain_dataset, DomainSpec};
    use crate::model::init_params;

    fn setup() -> (Dataset, ModelParams, CnnConfig) {
        let spec: DomainSpec = "plain".parse().unwrap();
        let data = gen_domain_dataset(&spec, 8, 4, 16, &mut Rng::new(1)).unwrap();
        let model = CnnConfig {
            channels: vec![8, 8],
            input: [3, 16, 16],
            ..CnnConfig::new(4)
        };
        let params = init_params(&model, &mut Rng::new(2)).unwrap();
        (data, params, model)
    }

    #[test]
    fn schema_and_identity() {
        let (data, params, model) = setup();
        let cfg = AnalysisConfig {
            images: 16,
            perturb: PerturbConfig {
                noise_enabled: false,
                shuffle_enabled: false,
                ..Default::default()
            },
            augment: AugmentConfig::disabled(),
            ..Default::default()
        };
        let report = analyze_stats(&data, &params, &model, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(report.rows.len(), 4 * 8);
        let o = report.pipeline(Route::O);
        for p in [Route::I, Route::F, Route::IF] {
            for (a, b) in report.pipeline(p).iter().zip(&o) {
                assert_eq!(
                    (a.mean_of_means, a.var_of_means, a.mean_of_vars, a.var_of_vars),
                    (b.mean_of_means, b.var_of_means, b.mean_of_vars, b.var_of_vars)
                );
            }
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 33);
        assert!(csv.starts_with(StatsReport::CSV_HEADER));
    }

    #[test]
    fn too_many_images_rejected() {
        let (data, params, model) = setup();
        let cfg = AnalysisConfig {
            images: 33,
            ..Default::default()
        };
        assert!(analyze_stats(&data, &params, &model, &cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn hand_spread() {
        let f = Tensor::from_vec(&[2, 1, 1, 2], vec![0.0f32, 2.0, 4.0, 4.0]).unwrap();
        let s = &spread(&f, Route::O).unwrap()[0];
        // means 1, 4; vars 1, 0
        assert_eq!((s.mean_of_means, s.var_of_means), (2.5, 2.25));
        assert_eq!((s.mean_of_vars, s.var_of_vars), (0.5, 0.25));
    }
}
