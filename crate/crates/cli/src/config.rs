//! Pipeline configuration: one JSON file, with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mas_core::phantom::CohortConfig;
use mas_core::registration::RegistrationConfig;
use mas_core::similarity::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    /// Majority voting.
    Mv,
    /// Weights from agreement with the target's gold label. Test-only upper
    /// bound: it reads the answer.
    LwfOracle,
    /// Weights predicted by a trained similarity model.
    LwfLearned,
    /// Weights from patch mutual information between warped atlas and target images.
    LwfMi,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] = [FusionMethod::Mv, FusionMethod::LwfOracle, FusionMethod::LwfLearned, FusionMethod::LwfMi];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Mv => "mv",
            FusionMethod::LwfOracle => "lwf-oracle",
            FusionMethod::LwfLearned => "lwf-learned",
            FusionMethod::LwfMi => "lwf-mi",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown fusion method `{s}` (expected mv, lwf-oracle, lwf-learned or lwf-mi)")))
    }
}

/// Image and label volume of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPaths {
    pub image: PathBuf,
    /// Atlas label, or the target's gold label. Registration optimizes label
    /// overlap, so targets need one too.
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub atlases: Vec<SubjectPaths>,
    pub targets: Vec<SubjectPaths>,
    /// Target indices used only to train the similarity model; fusion,
    /// evaluation and sweeps skip them.
    pub training_targets: Vec<usize>,
    pub registration: RegistrationConfig,
    /// Translate each atlas so its foreground centroid matches the target's
    /// before registering.
    pub center_align: bool,
    pub fusion: FusionMethod,
    pub similarity_model: Option<PathBuf>,
    pub similarity_training: TrainConfig,
    /// Patch radius of the ground-truth similarity (1 → 3³).
    pub patch_radius: usize,
    /// Patch radius of the MI weights (3 → 7³).
    pub mi_patch_radius: usize,
    pub mi_bins: usize,
    /// Atlas counts evaluated by `sweep`; empty means 1..=N.
    pub sweep: Vec<usize>,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub seed: u64,
    /// Cohort written by `phantom`.
    pub cohort: CohortConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            atlases: Vec::new(),
            targets: Vec::new(),
            training_targets: Vec::new(),
            registration: RegistrationConfig::default(),
            center_align: true,
            fusion: FusionMethod::Mv,
            similarity_model: None,
            similarity_training: TrainConfig::default(),
            patch_radius: 1,
            mi_patch_radius: 3,
            mi_bins: 16,
            sweep: Vec::new(),
            out_dir: PathBuf::from("out"),
            jobs: 1,
            seed: 0,
            cohort: CohortConfig::default(),
        }
    }
}

/// Command-line values that replace config entries when given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub fusion: Option<FusionMethod>,
    pub patch: Option<usize>,
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in self.atlases.iter_mut().chain(self.targets.iter_mut()) {
            fix(&mut s.image);
            fix(&mut s.label);
        }
        if let Some(m) = self.similarity_model.as_mut() {
            fix(m);
        }
        fix(&mut self.out_dir);
    }

    /// Copy with paths under `out_dir` made relative to it, so the same run
    /// in another directory records the same config.
    pub fn portable(&self) -> Self {
        let mut cfg = self.clone();
        let root = self.out_dir.clone();
        let fix = |p: &mut PathBuf| {
            if let Ok(rel) = p.strip_prefix(&root) {
                *p = if rel.as_os_str().is_empty() { PathBuf::from(".") } else { rel.to_path_buf() };
            }
        };
        for s in cfg.atlases.iter_mut().chain(cfg.targets.iter_mut()) {
            fix(&mut s.image);
            fix(&mut s.label);
        }
        if let Some(m) = cfg.similarity_model.as_mut() {
            fix(m);
        }
        cfg.out_dir = PathBuf::from(".");
        cfg
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.cohort.seed = s;
            self.registration.seed = s;
        }
        if let Some(l) = o.lambda {
            self.registration.lambda = l;
        }
        if let Some(f) = o.fusion {
            self.fusion = f;
        }
        if let Some(p) = o.patch {
            self.patch_radius = p;
        }
    }

    /// Checks shared by every command that consumes atlases.
    pub fn validate(&self) -> Result<()> {
        if self.atlases.is_empty() {
            return Err(CliError::Config("at least one atlas is required".into()));
        }
        if self.targets.is_empty() {
            return Err(CliError::Config("at least one target is required".into()));
        }
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if self.fusion == FusionMethod::LwfLearned && self.similarity_model.is_none() {
            return Err(CliError::Config("fusion method lwf-learned requires similarity_model".into()));
        }
        if self.mi_bins < 2 {
            return Err(CliError::Config("mi_bins must be at least 2".into()));
        }
        if let Some(&t) = self.training_targets.iter().find(|&&t| t >= self.targets.len()) {
            return Err(CliError::Config(format!("training target {t} outside {} targets", self.targets.len())));
        }
        if let Some(&n) = self.sweep.iter().find(|&&n| n == 0 || n > self.atlases.len()) {
            return Err(CliError::Config(format!("sweep count {n} outside 1..={}", self.atlases.len())));
        }
        self.registration.validate().map_err(CliError::Core)
    }

    /// Targets that fusion and evaluation report on.
    pub fn evaluation_targets(&self) -> Vec<usize> {
        (0..self.targets.len()).filter(|t| !self.training_targets.contains(t)).collect()
    }

    pub fn sweep_counts(&self) -> Vec<usize> {
        if self.sweep.is_empty() {
            (1..=self.atlases.len()).collect()
        } else {
            self.sweep.clone()
        }
    }

    /// Canonical JSON used for hashing and for the manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
