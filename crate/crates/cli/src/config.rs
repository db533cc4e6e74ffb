//! Key=value run configuration: defaults, then a config file, then flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cperb::analysis::AnalysisConfig;
use cperb::augment::AugmentConfig;
use cperb::data::{CorruptionKind, DomainSpec};
use cperb::model::{CnnConfig, InsertionPoint};
use cperb::perturb::{FeatureMethod, PerturbConfig, SplitScheme};
use cperb::training::{RouteMask, SgdConfig, TrainConfig};

use crate::CliError;

/// Every recognized key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // data generation
    ("domains", "plain"),
    ("per_class", "100"),
    ("classes", "5"),
    ("size", "32"),
    // model
    ("channels", "32,64,128"),
    ("kernel", "3"),
    ("insertion", "after_block_2"),
    // optimization
    ("lr", "0.1"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0005"),
    ("epochs", "30"),
    ("batch_size", "32"),
    ("lambda", "5"),
    ("routes", "O,I,F,IF"),
    ("method", "mixpatch"),
    // feature perturbation
    ("perturb_scheme", "P2-UD-random"),
    ("perturb_eps", "1e-6"),
    ("perturb_probability", "0.5"),
    ("perturb_noise", "true"),
    ("perturb_shuffle", "true"),
    ("perturb_clamp_floor", "1e-4"),
    // image perturbation
    ("flip_probability", "0.5"),
    ("brightness", "0.4"),
    ("contrast", "0.4"),
    ("saturation", "0.4"),
    ("grayscale_probability", "0.1"),
    // analysis, evaluation, ablation
    ("images", "128"),
    (
        "corruptions",
        "gaussian_noise,gaussian_blur,contrast,brightness,pixelate",
    ),
    ("severities", "1,2,3,4,5"),
    ("seeds", "3"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        match self.values.get_mut(&key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    /// The effective configuration in `key=value` form.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| usage(format!("bad value for {key}: {raw:?} ({e})")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| usage(format!("bad entry {s:?} for {key}: {e}"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn domains(&self) -> Result<Vec<DomainSpec>, CliError> {
        let d: Vec<DomainSpec> = self.list("domains")?;
        if d.is_empty() {
            return Err(usage("no domains requested"));
        }
        Ok(d)
    }

    pub fn per_class(&self) -> Result<usize, CliError> {
        self.parse("per_class")
    }

    pub fn classes(&self) -> Result<usize, CliError> {
        self.parse("classes")
    }

    pub fn size(&self) -> Result<usize, CliError> {
        self.parse("size")
    }

    pub fn images(&self) -> Result<usize, CliError> {
        self.parse("images")
    }

    pub fn seeds(&self) -> Result<usize, CliError> {
        let r: usize = self.parse("seeds")?;
        if r == 0 {
            return Err(usage("seeds must be at least 1"));
        }
        Ok(r)
    }

    /// Empty when `corruptions=none`.
    pub fn corruptions(&self) -> Result<Vec<CorruptionKind>, CliError> {
        if self.get("corruptions").trim() == "none" {
            return Ok(Vec::new());
        }
        self.list("corruptions")
    }

    pub fn severities(&self) -> Result<Vec<u8>, CliError> {
        let s: Vec<u8> = self.list("severities")?;
        if let Some(bad) = s.iter().find(|v| !(1..=5).contains(*v)) {
            return Err(usage(format!("severity {bad} outside 1..=5")));
        }
        Ok(s)
    }

    pub fn perturb(&self) -> Result<PerturbConfig, CliError> {
        let cfg = PerturbConfig {
            scheme: self.parse::<SplitScheme>("perturb_scheme")?,
            eps: self.parse("perturb_eps")?,
            apply_probability: self.parse("perturb_probability")?,
            noise_enabled: self.parse("perturb_noise")?,
            shuffle_enabled: self.parse("perturb_shuffle")?,
            clamp_floor: self.parse("perturb_clamp_floor")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self) -> Result<AugmentConfig, CliError> {
        let cfg = AugmentConfig {
            flip_probability: self.parse("flip_probability")?,
            brightness: self.parse("brightness")?,
            contrast: self.parse("contrast")?,
            saturation: self.parse("saturation")?,
            grayscale_probability: self.parse("grayscale_probability")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lr0: self.parse("lr")?,
            sgd: SgdConfig {
                momentum: self.parse("momentum")?,
                weight_decay: self.parse("weight_decay")?,
            },
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lambda: self.parse("lambda")?,
            seed: self.seed()?,
            perturb: self.perturb()?,
            method: self.parse::<FeatureMethod>("method")?,
            augment: self.augment()?,
            routes: self.parse::<RouteMask>("routes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture for `classes` classes and inputs of `input` shape.
    pub fn model(&self, classes: usize, input: [usize; 3]) -> Result<CnnConfig, CliError> {
        let cfg = CnnConfig {
            channels: self.list("channels")?,
            kernel: self.parse("kernel")?,
            classes,
            input,
            insertion: self
                .list::<InsertionPoint>("insertion")?
                .into_iter()
                .collect::<BTreeSet<_>>(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn analysis(&self) -> Result<AnalysisConfig, CliError> {
        Ok(AnalysisConfig {
            images: self.images()?,
            method: self.parse("method")?,
            perturb: self.perturb()?,
            augment: self.augment()?,
        })
    }

    /// Parses every key so that bad values surface before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.domains()?;
        self.per_class()?;
        self.classes()?;
        self.size()?;
        self.images()?;
        self.seeds()?;
        self.corruptions()?;
        self.severities()?;
        self.train()?;
        self.analysis()?;
        let size = self.size()?;
        self.model(self.classes()?, [3, size, size])?;
        Ok(())
    }
}
