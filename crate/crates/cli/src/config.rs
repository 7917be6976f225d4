use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvp_core::detector::{DEFAULT_BRIDGE_TIMEOUT, DEFAULT_SCORE_FLOOR};
use mvp_core::mvstream::FuturePolicy;
use mvp_core::propagate::MvpConfig;
use mvp_core::scheduler::PropagationMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Mvp,
    Frozen,
    /// Detector on every frame.
    Framewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorConfig {
    /// Detections read from a JSONL file. Scene inputs carry their own.
    Precomputed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default = "default_floor")]
        score_floor: f64,
    },
    Bridge {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_floor")]
        score_floor: f64,
    },
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Precomputed {
            path: None,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

fn default_floor() -> f64 {
    DEFAULT_SCORE_FLOOR
}

fn default_timeout() -> f64 {
    DEFAULT_BRIDGE_TIMEOUT.as_secs_f64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputConfig {
    /// A synthetic scene description, generated in memory.
    Scene { scene: PathBuf },
    Video {
        video: String,
        mv_dump: PathBuf,
        frames: u32,
        width: u32,
        height: u32,
        #[serde(default = "default_pattern")]
        image_pattern: String,
    },
}

fn default_pattern() -> String {
    "frames/{video}/{frame:06}.jpg".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FutureMvs {
    #[default]
    Drop,
    Keep,
    Invert,
}

impl From<FutureMvs> for FuturePolicy {
    fn from(f: FutureMvs) -> Self {
        match f {
            FutureMvs::Drop => FuturePolicy::Drop,
            FutureMvs::Keep => FuturePolicy::Keep,
            FutureMvs::Invert => FuturePolicy::Invert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Prompt set C. Defaults to the labels found in the detections.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<String>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub class_agnostic: bool,
    #[serde(default)]
    pub future_mvs: FutureMvs,
    #[serde(default)]
    pub mvp: MvpConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    pub inputs: Vec<InputConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("mvp-out")
}

impl RunConfig {
    /// Load a TOML config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let Some(gt) = &mut self.ground_truth {
            fix(gt);
        }
        if let DetectorConfig::Precomputed { path: Some(p), .. } = &mut self.detector {
            fix(p);
        }
        for input in &mut self.inputs {
            match input {
                InputConfig::Scene { scene } => fix(scene),
                InputConfig::Video { mv_dump, .. } => fix(mv_dump),
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            bail!("config lists no inputs");
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        self.mvp.validate().map_err(anyhow::Error::msg)?;
        Ok(())
    }

    /// Propagation mode and effective MVP settings for the configured mode.
    pub fn effective(&self) -> (PropagationMode, MvpConfig) {
        match self.mode {
            Mode::Mvp => (PropagationMode::Mvp, self.mvp.clone()),
            Mode::Frozen => (PropagationMode::Frozen, self.mvp.clone()),
            Mode::Framewise => (
                PropagationMode::Mvp,
                MvpConfig {
                    keyframe_interval: 1,
                    ..self.mvp.clone()
                },
            ),
        }
    }
}

/// Command-line overrides, named after the config fields they replace.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, env = "MVP_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub keyframe_interval: Option<u32>,
    #[arg(long)]
    pub tau_tr: Option<f64>,
    #[arg(long)]
    pub tau_sc: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub growth_ratio: Option<f64>,
    #[arg(long)]
    pub growth_window: Option<u32>,
    #[arg(long)]
    pub tau_cls: Option<f64>,
    #[arg(long)]
    pub miss_limit: Option<u32>,
    #[arg(long)]
    pub no_grid: bool,
    #[arg(long)]
    pub no_growth_check: bool,
    #[arg(long)]
    pub no_single_class: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut cfg.mode, &self.mode);
        set(&mut cfg.output, &self.output);
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if self.ground_truth.is_some() {
            cfg.ground_truth = self.ground_truth.clone();
        }
        let m = &mut cfg.mvp;
        set(&mut m.keyframe_interval, &self.keyframe_interval);
        set(&mut m.tau_tr, &self.tau_tr);
        set(&mut m.tau_sc, &self.tau_sc);
        set(&mut m.epsilon, &self.epsilon);
        set(&mut m.growth_ratio, &self.growth_ratio);
        set(&mut m.growth_window, &self.growth_window);
        set(&mut m.tau_cls, &self.tau_cls);
        set(&mut m.miss_limit, &self.miss_limit);
        m.grid_enabled &= !self.no_grid;
        m.growth_check_enabled &= !self.no_growth_check;
        m.single_class_enabled &= !self.no_single_class;
    }
}
