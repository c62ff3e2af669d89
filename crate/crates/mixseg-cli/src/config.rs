//! Experiment configuration file (JSON) and stable config hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mixseg::ingest::PerturbConfig;
use mixseg::nn::UNetConfig;
use mixseg::teacher::TeacherVariant;
use mixseg::train::TrainConfig;
use mixseg::util::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentSupervision {
    /// Strong set plus teacher-annotated weak set.
    #[default]
    Mixed,
    /// Strong set only; the teacher and annotate stages are skipped.
    StrongOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Teacher attention wiring.
    #[serde(default)]
    pub attention: TeacherVariant,
    /// Train the student with the localization branch.
    #[serde(default = "default_true")]
    pub loc_branch: bool,
    /// Student training mixture.
    #[serde(default)]
    pub student_supervision: StudentSupervision,
    /// Perturb the training boxes (strong and weak) before every stage.
    #[serde(default)]
    pub perturb_boxes: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            attention: TeacherVariant::Full,
            loc_branch: true,
            student_supervision: StudentSupervision::Mixed,
            perturb_boxes: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Percent shares (strong, weak, validation); must sum to 100.
    pub ratio: (u32, u32, u32),
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default = "TrainConfig::teacher_default")]
    pub teacher: TrainConfig,
    #[serde(default = "TrainConfig::student_default")]
    pub student: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub perturb: PerturbConfig,
}

impl ExperimentConfig {
    pub fn defaults(dataset_root: PathBuf, output_dir: PathBuf) -> Self {
        ExperimentConfig {
            dataset_root,
            output_dir,
            seed: 0,
            ratio: (30, 60, 10),
            unet: UNetConfig::default(),
            teacher: TrainConfig::teacher_default(),
            student: TrainConfig::student_default(),
            ablation: AblationConfig::default(),
            perturb: PerturbConfig::default(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let (s, w, v) = self.ratio;
        if s + w + v != 100 {
            anyhow::bail!("ratio {:?} does not sum to 100", self.ratio);
        }
        if !self.dataset_root.exists() {
            anyhow::bail!("dataset root {} does not exist", self.dataset_root.display());
        }
        self.unet.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    /// Reduced preset: 64x64 planes, base width 8, shortened schedules.
    pub fn apply_desk_scale(&mut self) {
        self.unet.base_channels = 8;
        self.teacher = self.teacher.clone().desk_scale();
        self.student = self.student.clone().desk_scale();
    }

    /// Stable fingerprint of the experiment inputs (everything except the
    /// output directory).
    pub fn config_hash(&self) -> u64 {
        let mut probe = self.clone();
        probe.output_dir = PathBuf::new();
        fnv1a64(serde_json::to_string(&probe).expect("config serializes").as_bytes())
    }
}
