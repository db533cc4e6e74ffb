use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;

use cperb::analysis::analyze_stats;
use cperb::data::{
    corrupt_dataset, gen_domain_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint,
    CorruptionSpec, Dataset, DomainSpec,
};
use cperb::model::init_params;
use cperb::training::{evaluate, fit, Route, RouteMask, TrainConfig};
use cperb::Rng;

use crate::{CliError, Command, Common, RunConfig};

pub const MANIFEST: &str = "manifest.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT: &str = "checkpoint.cptn";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.csv";
pub const STATS: &str = "stats.csv";
pub const STATS_META: &str = "stats_meta.txt";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { common } => gen_data(common),
        Command::Train { source, common } => train(source, common),
        Command::Eval {
            checkpoint,
            targets,
            common,
        } => eval(checkpoint, targets, common),
        Command::AnalyzeStats {
            data,
            checkpoint,
            common,
        } => analyze(data, checkpoint.as_deref(), common),
        Command::Ablate {
            source,
            targets,
            common,
        } => ablate(source, targets, common),
    }
}

/// Validates the configuration, creates the output directory and echoes the
/// effective configuration into it.
fn prepare(common: &Common) -> Result<RunConfig, CliError> {
    let cfg = common.run_config()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write(&common.out.join(CONFIG_ECHO), &cfg.echo())?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?)
}

fn domain_name(data: &Dataset, path: &Path) -> String {
    data.meta.get("domain").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    })
}

/// Seed of each builtin domain, independent of which domains are requested.
fn domain_rng(seed: u64, spec: &DomainSpec) -> Rng {
    let mut master = Rng::new(seed);
    let children: Vec<Rng> = DomainSpec::builtin().iter().map(|_| master.split()).collect();
    let idx = DomainSpec::builtin()
        .iter()
        .position(|d| d.name == spec.name)
        .unwrap_or(0);
    children.into_iter().nth(idx).expect("builtin domain index")
}

fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let (seed, per_class, classes, size) = (cfg.seed()?, cfg.per_class()?, cfg.classes()?, cfg.size()?);
    let mut manifest = String::from("file,domain,seed,samples,classes,size\n");
    for spec in cfg.domains()? {
        let mut rng = domain_rng(seed, &spec);
        let domain_seed = rng.seed();
        let data = gen_domain_dataset(&spec, per_class, classes, size, &mut rng)?;
        let file = format!("{}.cptn", spec.name);
        save_dataset(common.out.join(&file), &data)?;
        let _ = writeln!(
            manifest,
            "{file},{},{domain_seed},{},{classes},{size}",
            spec.name,
            data.len()
        );
    }
    write(&common.out.join(MANIFEST), &manifest)
}

fn train(source: &Path, common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let data = load(source)?;
    let model = cfg.model(data.classes, data.image_shape())?;
    let tc = cfg.train()?;
    let (params, log) = fit(&data, &model, &tc)?;
    let meta = BTreeMap::from([
        ("seed".to_string(), tc.seed.to_string()),
        ("source".to_string(), domain_name(&data, source)),
        ("routes".to_string(), tc.routes.to_string()),
        ("lambda".to_string(), cfg.get("lambda").to_string()),
        ("method".to_string(), tc.method.to_string()),
    ]);
    save_checkpoint(common.out.join(CHECKPOINT), &Checkpoint { model, params, meta })?;
    write(&common.out.join(TRAIN_LOG), &log.to_csv())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn eval(checkpoint: &Path, targets: &[PathBuf], common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let (kinds, severities) = (cfg.corruptions()?, cfg.severities()?);
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut rng = Rng::new(cfg.seed()?);
    let mut csv = String::from("domain,corruption,severity,accuracy\n");
    let (mut clean_all, mut corrupt_all) = (Vec::new(), Vec::new());
    for path in targets {
        let data = load(path)?;
        let name = domain_name(&data, path);
        let clean = evaluate(&ck.params, &ck.model, &data)?.accuracy;
        clean_all.push(clean);
        let _ = writeln!(csv, "{name},none,0,{clean:.6}");
        let mut corrupted = Vec::new();
        for &kind in &kinds {
            for &s in &severities {
                let spec = CorruptionSpec::new(kind, s)?;
                let shifted = corrupt_dataset(&data, spec, &mut rng.split())?;
                let acc = evaluate(&ck.params, &ck.model, &shifted)?.accuracy;
                corrupted.push(acc);
                let _ = writeln!(csv, "{name},{kind},{s},{acc:.6}");
            }
        }
        if !corrupted.is_empty() {
            let _ = writeln!(csv, "{name},mean,mean,{:.6}", mean(&corrupted));
            corrupt_all.extend(corrupted);
        }
    }
    let _ = writeln!(csv, "mean,none,0,{:.6}", mean(&clean_all));
    if !corrupt_all.is_empty() {
        let _ = writeln!(csv, "mean,mean,mean,{:.6}", mean(&corrupt_all));
    }
    write(&common.out.join(METRICS), &csv)
}

fn analyze(data_path: &Path, checkpoint: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let acfg = cfg.analysis()?;
    let data = load(data_path)?;
    if acfg.images > data.len() {
        return Err(CliError::Usage(format!(
            "images={} exceeds the {} samples in {}",
            acfg.images,
            data.len(),
            data_path.display()
        )));
    }
    let mut rng = Rng::new(cfg.seed()?);
    let init_rng = rng.split();
    let (model, params, extractor) = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            (
                ck.model,
                ck.params,
                format!("first convolution of checkpoint {}", p.display()),
            )
        }
        None => {
            let model = cfg.model(data.classes, data.image_shape())?;
            let params = init_params(&model, &mut init_rng.clone())?;
            let note = "first convolution of a seeded untrained network (He-normal weights, zero bias); \
                        a pretrained extractor is not available, so only relative spreads are meaningful";
            (model, params, note.to_string())
        }
    };
    let report = analyze_stats(&data, &params, &model, &acfg, &mut rng)?;
    write(&common.out.join(STATS), &report.to_csv())?;
    let meta = format!(
        "feature_extractor={extractor}\nstatistics=per-image per-channel spatial mean and variance of the pre-activation output\n\
         images={}\nmethod={}\nfeature_perturbation_probability=1 (forced)\n",
        acfg.images, acfg.method
    );
    write(&common.out.join(STATS_META), &meta)
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub routes: RouteMask,
    pub consistency: bool,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let mut s = self.routes.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("+");
        if self.consistency {
            s.push_str("+cons");
        }
        s
    }
}

/// The twelve route-mask and consistency combinations, the original route
/// always present.
pub fn ablation_grid() -> Vec<AblationCell> {
    use Route::*;
    let rows: [(&[Route], bool); 12] = [
        (&[O], false),
        (&[O, F], false),
        (&[O, I], false),
        (&[O, IF], false),
        (&[O, I, F], false),
        (&[O, I, F], true),
        (&[O, I, IF], false),
        (&[O, I, IF], true),
        (&[O, IF, F], false),
        (&[O, IF, F], true),
        (&[O, I, IF, F], false),
        (&[O, I, IF, F], true),
    ];
    rows.iter()
        .map(|(r, c)| AblationCell {
            routes: RouteMask::new(r.iter().copied()).expect("non-empty grid row"),
            consistency: *c,
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn ablate(source: &Path, targets: &[PathBuf], common: &Common) -> Result<(), CliError> {
    let cfg = prepare(common)?;
    let base = cfg.train()?;
    let seeds: Vec<u64> = (0..cfg.seeds()? as u64).map(|i| base.seed.wrapping_add(i)).collect();
    let data = load(source)?;
    let target_sets: Vec<(String, Dataset)> = targets
        .iter()
        .map(|p| load(p).map(|d| (domain_name(&d, p), d)))
        .collect::<Result<_, _>>()?;
    let model = cfg.model(data.classes, data.image_shape())?;
    let grid = ablation_grid();
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(c, seed)| -> Result<Vec<f64>, CliError> {
            let cell = &grid[c];
            let tc = TrainConfig {
                routes: cell.routes.clone(),
                lambda: if cell.consistency { base.lambda } else { 0.0 },
                seed,
                ..base.clone()
            };
            let (params, _) = fit(&data, &model, &tc)?;
            target_sets
                .iter()
                .map(|(_, d)| Ok(evaluate(&params, &model, d)?.accuracy))
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut runs = String::from("cell,seed,target,accuracy\n");
    let mut table = String::from("cell,I,IF,F,cons,mean_acc,std_acc,seeds\n");
    for (c, cell) in grid.iter().enumerate() {
        let mut per_seed = Vec::new();
        for ((_, seed), accs) in jobs.iter().zip(&results).filter(|((jc, _), _)| *jc == c) {
            for ((name, _), a) in target_sets.iter().zip(accs) {
                let _ = writeln!(runs, "{},{seed},{name},{a:.6}", cell.label());
            }
            per_seed.push(mean(accs));
        }
        let (m, s) = mean_std(&per_seed);
        let flag = |r: Route| u8::from(cell.routes.contains(r));
        let _ = writeln!(
            table,
            "{},{},{},{},{},{m:.6},{s:.6},{}",
            cell.label(),
            flag(Route::I),
            flag(Route::IF),
            flag(Route::F),
            u8::from(cell.consistency),
            per_seed.len()
        );
    }
    write(&common.out.join(ABLATION_RUNS), &runs)?;
    write(&common.out.join(ABLATION), &table)
}
