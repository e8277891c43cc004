//! Run configuration: one JSON document, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use omitopics::trainer::{GradcheckSetup, TrainConfig};
use omitopics::{ModelHyper, PoeMode};

use crate::args::GlobalArgs;
use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelHyper,
    pub train: TrainConfig,
    pub gradcheck: GradcheckSetup,
    /// Dataset manifest, or a directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    /// Held-out matrices for evaluation, same layout as `dataset`.
    pub truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out: PathBuf,
    /// Write `checkpoints/epoch_NNNN.ckpt` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Synthetic spec for `simulate`.
    pub spec: Option<PathBuf>,
    pub preset: Option<String>,
    /// Flags that also override values stored in input files.
    #[serde(skip)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub poe_mode: Option<PoeMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelHyper::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckSetup::default(),
            dataset: None,
            truth: None,
            checkpoint: None,
            scenario: None,
            out: PathBuf::from("out"),
            checkpoint_every: None,
            spec: None,
            preset: None,
            overrides: Overrides::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.truth, &mut cfg.checkpoint, &mut cfg.scenario, &mut cfg.spec]
            .into_iter()
            .flatten()
        {
            *p = rebase(base, p);
        }
        cfg.out = rebase(base, &cfg.out);
        Ok(cfg)
    }

    /// Config from `--config` (or defaults) with the global flags applied.
    pub fn resolve(global: &GlobalArgs) -> CliResult<Self> {
        let mut cfg = match &global.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(global);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, global: &GlobalArgs) {
        self.overrides = Overrides {
            seed: global.seed,
            poe_mode: global.poe_mode.map(Into::into),
        };
        if let Some(seed) = global.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.gradcheck.seed = seed;
        }
        if let Some(out) = &global.out {
            self.out = out.clone();
        }
        if let Some(s) = &global.scenario {
            self.scenario = Some(s.clone());
        }
        if let Some(mode) = global.poe_mode {
            self.model.poe_mode = mode.into();
            self.gradcheck.poe_mode = mode.into();
        }
        if global.no_ncl {
            self.train.ncl_enabled = false;
            self.gradcheck.ncl_enabled = false;
        }
    }

    /// Every input path that is set must exist.
    pub fn check_paths(&self) -> CliResult<()> {
        let inputs = [
            ("dataset", &self.dataset),
            ("truth", &self.truth),
            ("checkpoint", &self.checkpoint),
            ("scenario", &self.scenario),
            ("spec", &self.spec),
        ];
        for (name, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(CliError::Usage(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(CliError::Usage("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, path: &'a Option<PathBuf>) -> CliResult<&'a Path> {
        path.as_deref().ok_or_else(|| CliError::Usage(format!("missing {name}: pass --{name} or set it in the config")))
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Accepts either a manifest file or the directory containing it.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}
