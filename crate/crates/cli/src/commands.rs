//! Subcommand implementations. Each writes its artifacts under `cfg.out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use omitopics::dataio::{apply_scenario_mask, load_dataset, load_scenario, save_dataset, TruthStore};
use omitopics::decoder::impute_domain;
use omitopics::evalsuite::{evaluate_model, infer_dataset, write_embedding_tsv};
use omitopics::params::{check_schema, init_params, load_checkpoint, save_checkpoint};
use omitopics::synthgen::{generate, save_synth, SynthSpec, PRESETS};
use omitopics::trainer::{run_gradcheck, train_from, GradcheckSetup};
use omitopics::{Dataset, Error, ModelHyper, ModelParams, PoeMode};

use crate::args::{Cli, Command};
use crate::config::{manifest_path, RunConfig};
use crate::{CliError, CliResult};

/// Gradcheck errors above this fail the command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn create_out(cfg: &RunConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    Ok(&cfg.out)
}

/// Loads the dataset and masks the configured scenario, if any.
fn load_inputs(cfg: &RunConfig) -> CliResult<(Dataset, TruthStore, Option<String>)> {
    let dataset = load_dataset(manifest_path(cfg.require("dataset", &cfg.dataset)?))?;
    match &cfg.scenario {
        Some(p) => {
            let scenario = load_scenario(p)?;
            let (masked, truth) = apply_scenario_mask(&dataset, &scenario)?;
            Ok((masked, truth, Some(scenario.name)))
        }
        None => Ok((dataset, TruthStore::default(), None)),
    }
}

fn load_model(cfg: &RunConfig, dataset: &Dataset) -> CliResult<(ModelParams, ModelHyper)> {
    let (params, mut hyper) = load_checkpoint(cfg.require("checkpoint", &cfg.checkpoint)?)?;
    check_schema(&params, &dataset.schema()).map_err(Error::from)?;
    if let Some(mode) = cfg.overrides.poe_mode {
        hyper.poe_mode = mode;
    }
    Ok((params, hyper))
}

/// Writes a synthetic dataset (`data/`, `truth/`, true parameters).
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let spec = match (&cfg.spec, &cfg.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let mut spec: SynthSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad spec {}: {e}", path.display())))?;
            if let Some(seed) = cfg.overrides.seed {
                spec.seed = seed;
            }
            spec
        }
        (None, Some(name)) => SynthSpec::preset(name, cfg.model.seed).ok_or_else(|| {
            CliError::Usage(format!("unknown preset {name}; expected one of {}", PRESETS.join(", ")))
        })?,
        (None, None) => return Err(CliError::Usage("simulate needs --preset or --spec".into())),
    };
    let out = generate(&spec)?;
    let dir = create_out(cfg)?;
    save_synth(&out, dir)?;
    info!("wrote synthetic dataset {} to {}", spec.name, dir.display());
    Ok(dir.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Held-out matrices when a scenario was applied.
    pub truth: Option<PathBuf>,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainArtifacts> {
    let (dataset, truth, _) = load_inputs(cfg)?;
    let dir = create_out(cfg)?.to_path_buf();
    let params = init_params(&cfg.model, &dataset.schema())?;
    let hyper = &cfg.model;
    let snapshots = dir.join("checkpoints");
    let (params, log) = train_from(&dataset, hyper, &cfg.train, params, |epoch, p| {
        if let Some(every) = cfg.checkpoint_every {
            if epoch % every == 0 {
                fs::create_dir_all(&snapshots).map_err(|e| Error::Io { path: snapshots.clone(), source: e })?;
                save_checkpoint(p, hyper, snapshots.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
        Ok(())
    })?;

    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&params, hyper, &checkpoint)?;
    let log_path = dir.join("train_log.ndjson");
    fs::write(&log_path, log.to_ndjson()).map_err(|e| io_err(&log_path, e))?;
    let resolved = dir.join("run_config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&resolved, json).map_err(|e| io_err(&resolved, e))?;
    let truth_dir = if truth.is_empty() {
        None
    } else {
        Some(save_dataset(&truth.to_dataset(&dataset)?, dir.join("truth"))?)
    };
    if let Some(last) = log.epochs.last() {
        info!("final epoch mean loss {:.4}", last.mean.total);
    }
    Ok(TrainArtifacts { checkpoint, log: log_path, truth: truth_dir })
}

pub fn cmd_embed(cfg: &RunConfig) -> CliResult<PathBuf> {
    let (dataset, _, _) = load_inputs(cfg)?;
    let (params, hyper) = load_model(cfg, &dataset)?;
    let topics = infer_dataset(&params, &hyper, &dataset, cfg.train.transform)?;
    let z: Vec<_> = topics.into_iter().map(|t| t.z).collect();
    let path = create_out(cfg)?.join("embedding.tsv");
    write_embedding_tsv(&dataset, &z, &path)?;
    Ok(path)
}

pub fn cmd_impute(cfg: &RunConfig, domain: &str, modality: &str) -> CliResult<PathBuf> {
    let (dataset, _, _) = load_inputs(cfg)?;
    let (params, hyper) = load_model(cfg, &dataset)?;
    let d = dataset
        .domain_index(domain)
        .ok_or_else(|| CliError::Usage(format!("unknown domain {domain}")))?;
    let m = dataset
        .modality_index(modality)
        .ok_or_else(|| CliError::Usage(format!("unknown modality {modality}")))?;
    let topics = infer_dataset(&params, &hyper, &dataset, cfg.train.transform)?;
    let rates = impute_domain(&params, d, m, &topics[d].theta)?;

    let mut tsv = String::from("cell_id");
    for f in &dataset.catalog[m].feature_ids {
        write!(tsv, "\t{f}").expect("string write");
    }
    tsv.push('\n');
    for (cell, row) in dataset.domains[d].cell_ids.iter().zip(rates.rows()) {
        tsv.push_str(cell);
        for x in row {
            write!(tsv, "\t{x}").expect("string write");
        }
        tsv.push('\n');
    }
    let path = create_out(cfg)?.join(format!("imputed_{domain}_{modality}.tsv"));
    fs::write(&path, tsv).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<PathBuf> {
    let (dataset, mut truth, scenario) = load_inputs(cfg)?;
    if let Some(p) = &cfg.truth {
        truth.entries.extend(TruthStore::from_dataset(&load_dataset(manifest_path(p))?).entries);
    }
    let (params, hyper) = load_model(cfg, &dataset)?;
    let name = scenario.unwrap_or_else(|| if truth.is_empty() { "none" } else { "external" }.to_string());
    let report = evaluate_model(&params, &hyper, &dataset, &truth, &name, cfg.train.transform, cfg.model.seed)?;
    let path = create_out(cfg)?.join("eval_report.json");
    fs::write(&path, report.to_json()).map_err(|e| io_err(&path, e))?;
    info!("mean ARI {:?}, mean accuracy {:?}", report.mean_ari, report.mean_accuracy);
    Ok(path)
}

/// Runs the configured gradcheck for the selected fusion mode, or for both
/// when none was chosen on the command line.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<Vec<(PoeMode, f64)>> {
    let modes = match cfg.overrides.poe_mode {
        Some(m) => vec![m],
        None => vec![PoeMode::PrecisionWeighted, PoeMode::PaperLiteral],
    };
    modes
        .into_iter()
        .map(|poe_mode| {
            let setup = GradcheckSetup { poe_mode, ..cfg.gradcheck.clone() };
            Ok((poe_mode, run_gradcheck(&setup)?))
        })
        .collect()
}

/// Resolves the configuration and dispatches one parsed invocation.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(&cli.global)?;
    match &cli.command {
        Command::Simulate { preset, spec } => {
            if preset.is_some() || spec.is_some() {
                cfg.preset = preset.clone();
                cfg.spec = spec.clone();
            }
            cfg.check_paths()?;
            let dir = cmd_simulate(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train { dataset, epochs } => {
            if let Some(d) = dataset {
                cfg.dataset = Some(d.clone());
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.check_paths()?;
            let art = cmd_train(&cfg)?;
            println!("{}", art.checkpoint.display());
        }
        Command::Embed { checkpoint, dataset } => {
            set_inputs(&mut cfg, checkpoint, dataset)?;
            println!("{}", cmd_embed(&cfg)?.display());
        }
        Command::Impute { checkpoint, dataset, domain, modality } => {
            set_inputs(&mut cfg, checkpoint, dataset)?;
            println!("{}", cmd_impute(&cfg, domain, modality)?.display());
        }
        Command::Eval { checkpoint, dataset, truth } => {
            if let Some(t) = truth {
                cfg.truth = Some(t.clone());
            }
            set_inputs(&mut cfg, checkpoint, dataset)?;
            println!("{}", cmd_eval(&cfg)?.display());
        }
        Command::Gradcheck => {
            let results = cmd_gradcheck(&cfg)?;
            let mut worst: f64 = 0.0;
            for (mode, err) in &results {
                let name = serde_json::to_value(mode).expect("mode serializes");
                println!("{}\t{err:e}", name.as_str().unwrap_or("?"));
                worst = worst.max(*err);
            }
            if !(worst < GRADCHECK_TOLERANCE) {
                warn!("gradcheck error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}");
                return Err(CliError::Core(Error::Validation(format!(
                    "gradcheck error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
                ))));
            }
        }
    }
    Ok(())
}

fn set_inputs(cfg: &mut RunConfig, checkpoint: &Option<PathBuf>, dataset: &Option<PathBuf>) -> CliResult<()> {
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(d) = dataset {
        cfg.dataset = Some(d.clone());
    }
    cfg.check_paths()
}
