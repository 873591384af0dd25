//! Run configuration shared by the pipeline stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::extraction::{Backend, BackendConfig};
use crate::postprocess::PostprocessConfig;
use crate::schema::{ClinicId, FormatRegistry};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw CSV export per clinic id.
    pub inputs: BTreeMap<ClinicId, PathBuf>,
    /// Directory of format TOML files; the built-in formats when absent.
    pub format_dir: Option<PathBuf>,
    pub backend: Backend,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub ground_truth: Option<PathBuf>,
    /// Drug norm table (the `norms.json` layout) used for imputation in
    /// place of one built from the extracted records.
    pub norms: Option<PathBuf>,
    /// Re-extract records the remote backend returned invalid output for
    /// with the rule backend.
    pub fallback_on_invalid: bool,
    pub remote: BackendConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: BTreeMap::new(),
            format_dir: None,
            backend: Backend::Rules,
            workers: 1,
            out_dir: PathBuf::from("out"),
            ground_truth: None,
            norms: None,
            fallback_on_invalid: false,
            remote: BackendConfig::default(),
            postprocess: PostprocessConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.inputs.values_mut() {
            fix(p);
        }
        if let Some(p) = self.format_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.ground_truth.as_mut() {
            fix(p);
        }
        if let Some(p) = self.norms.as_mut() {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    /// Config for a generated corpus directory: every `raw/<clinic>.csv`
    /// becomes an input and `ground_truth.csv` is used when present.
    pub fn for_corpus(dir: &Path) -> Result<Self> {
        let raw = dir.join("raw");
        let mut cfg = RunConfig::default();
        let entries = std::fs::read_dir(&raw).map_err(|e| Error::io(&raw, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&raw, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            cfg.inputs.insert(ClinicId::new(stem)?, path);
        }
        let gt = dir.join("ground_truth.csv");
        if gt.is_file() {
            cfg.ground_truth = Some(gt);
        }
        cfg.out_dir = dir.join("out");
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serializable")
    }

    /// Checks settings and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.eval.tolerance.is_finite() && self.eval.tolerance >= 0.0) {
            return Err(Error::Config("eval.tolerance must be a non-negative number".into()));
        }
        let p = &self.postprocess;
        if !(p.plausibility_cap.is_finite() && p.plausibility_cap > 0.0) {
            return Err(Error::Config("postprocess.plausibility_cap must be positive".into()));
        }
        if p.year_pivot > 99 {
            return Err(Error::Config("postprocess.year_pivot must lie in 0..=99".into()));
        }
        if !(p.max_duration_days.is_finite() && p.max_duration_days > 0.0) {
            return Err(Error::Config("postprocess.max_duration_days must be positive".into()));
        }
        if !(p.injectable_agreement_days.is_finite() && p.injectable_agreement_days >= 0.0) {
            return Err(Error::Config("postprocess.injectable_agreement_days must be non-negative".into()));
        }
        if self.backend == Backend::Remote {
            self.remote.validate()?;
        }
        for (clinic, path) in &self.inputs {
            if !path.is_file() {
                return Err(Error::Config(format!("input for `{clinic}` not found: {}", path.display())));
            }
        }
        if let Some(dir) = &self.format_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("format directory not found: {}", dir.display())));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if !gt.is_file() {
                return Err(Error::Config(format!("ground truth not found: {}", gt.display())));
            }
        }
        if let Some(n) = &self.norms {
            if !n.is_file() {
                return Err(Error::Config(format!("norm table not found: {}", n.display())));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<FormatRegistry> {
        match &self.format_dir {
            Some(dir) => FormatRegistry::from_dir(dir),
            None => Ok(FormatRegistry::builtin().clone()),
        }
    }

    /// Writes the fully defaulted config into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
