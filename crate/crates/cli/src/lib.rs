//! The `cperb` command line: dataset generation, training, evaluation,
//! statistics analysis and the ablation grid.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 2.
    Usage(String),
    /// Anything that fails after validation. Exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<cperb::Error> for CliError {
    fn from(e: cperb::Error) -> Self {
        match e {
            cperb::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

macro_rules! key_flags {
    ($($field:ident),* $(,)?) => {
        /// One optional flag per config key; a given flag wins over the config file.
        #[derive(Args, Debug, Default, Clone)]
        pub struct KeyFlags {
            $(
                #[arg(long, value_name = "VALUE", help_heading = "Config overrides")]
                pub $field: Option<String>,
            )*
        }

        impl KeyFlags {
            pub fn pairs(&self) -> Vec<(&'static str, Option<&str>)> {
                vec![$((stringify!($field), self.$field.as_deref())),*]
            }
        }
    };
}

key_flags!(
    seed,
    domains,
    per_class,
    classes,
    size,
    channels,
    kernel,
    insertion,
    lr,
    momentum,
    weight_decay,
    epochs,
    batch_size,
    lambda,
    routes,
    method,
    perturb_scheme,
    perturb_eps,
    perturb_probability,
    perturb_noise,
    perturb_shuffle,
    perturb_clamp_floor,
    flip_probability,
    brightness,
    contrast,
    saturation,
    grayscale_probability,
    images,
    corruptions,
    severities,
    seeds,
);

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file applied before flag overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: KeyFlags,
}

impl Common {
    /// Defaults, then the config file, then flags; fully validated.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.keys.pairs() {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "cperb", version, about = "Cross-perturbation training on synthetic domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render one dataset container per domain plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a source container; writes checkpoint, log and config.
    Train {
        /// Source-domain container.
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clean and corrupted accuracy of a checkpoint on target containers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated target containers.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// First-layer feature statistics under the four pipelines.
    AnalyzeStats {
        #[arg(long)]
        data: PathBuf,
        /// Use trained weights instead of a seeded untrained network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Route-mask and consistency grid over several seeds.
    Ablate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
