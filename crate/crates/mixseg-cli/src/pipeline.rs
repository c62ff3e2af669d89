//! Five-stage pipeline: split -> train teacher -> annotate -> train
//! student -> evaluate. Every stage writes its artifacts plus a stage
//! record carrying the hashes of its inputs; re-running with unchanged
//! inputs is a no-op, and mismatched hashes abort instead of mixing
//! artifacts from different configurations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mixseg::data::store::{self, CaseData};
use mixseg::data::{split_dataset, Split};
use mixseg::eval::{postprocess, MetricsReport};
use mixseg::ingest::{perturb_boxes, truncate_hu};
use mixseg::nn::{load_checkpoint, save_checkpoint, CheckpointManifest};
use mixseg::student::{sweep_infer_student, StudentNet};
use mixseg::teacher::{generate_pseudo_labels, trace_to_csv, train_teacher, TeacherNet};
use mixseg::train::{train_student, Role};
use mixseg::util::{derive_rng, fnv1a64};

use crate::config::{ExperimentConfig, StudentSupervision};

/// Exclusive ownership of an output directory for the duration of a run.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        fs::remove_file(&self.path).ok();
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StageRecord {
    stage: String,
    /// Hash of everything this stage's outputs depend on.
    inputs_hash: String,
    done: bool,
}

fn stage_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("stage_{stage}.json"))
}

/// Returns true when the stage already completed with identical inputs;
/// errors when it completed under different inputs.
fn stage_is_done(out: &Path, stage: &str, inputs_hash: u64) -> Result<bool> {
    let path = stage_path(out, stage);
    if !path.exists() {
        return Ok(false);
    }
    let rec: StageRecord = serde_json::from_reader(fs::File::open(&path)?)?;
    let want = StageRecord {
        stage: stage.to_string(),
        inputs_hash: format!("{inputs_hash:016x}"),
        done: true,
    };
    if rec == want {
        return Ok(true);
    }
    bail!(
        "stage {stage} in {} was produced under a different configuration \
         (recorded inputs {}, current {}); refusing to mix artifacts",
        out.display(),
        rec.inputs_hash,
        want.inputs_hash
    )
}

fn mark_done(out: &Path, stage: &str, inputs_hash: u64) -> Result<()> {
    let rec = StageRecord {
        stage: stage.to_string(),
        inputs_hash: format!("{inputs_hash:016x}"),
        done: true,
    };
    serde_json::to_writer_pretty(fs::File::create(stage_path(out, stage))?, &rec)?;
    Ok(())
}

pub fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&fs::read(path)?))
}

/// Everything the pipeline stages share.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub config_hash: u64,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let config_hash = cfg.config_hash();
        fs::create_dir_all(&cfg.output_dir)?;
        Ok(Pipeline { cfg, config_hash })
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// Inputs shared by every training stage: data location, seed, and
    /// network shape.
    fn common_scope(&self) -> String {
        format!(
            "{}/{}/{}",
            self.cfg.dataset_root.display(),
            self.cfg.seed,
            serde_json::to_string(&self.cfg.unet).unwrap()
        )
    }

    fn perturb_scope(&self) -> String {
        if self.cfg.ablation.perturb_boxes {
            format!("perturbed/{}", serde_json::to_string(&self.cfg.perturb).unwrap())
        } else {
            "unperturbed".to_string()
        }
    }

    // ---- split ----------------------------------------------------------

    pub fn split(&self) -> Result<Split> {
        let cases = store::list_cases(&self.cfg.dataset_root)?;
        if cases.is_empty() {
            bail!("no cases found under {}", self.cfg.dataset_root.display());
        }
        let inputs = fnv1a64(format!("{cases:?}/{:?}/{}", self.cfg.ratio, self.cfg.seed).as_bytes());
        let path = self.out().join("split.json");
        if stage_is_done(self.out(), "split", inputs)? {
            return Ok(serde_json::from_reader(fs::File::open(&path)?)?);
        }
        let split = split_dataset(&cases, self.cfg.ratio, self.cfg.seed)?;
        serde_json::to_writer_pretty(fs::File::create(&path)?, &split)?;
        mark_done(self.out(), "split", inputs)?;
        Ok(split)
    }

    // ---- case loading ---------------------------------------------------

    /// Load cases, truncate HU, and apply the configured box perturbation
    /// to training annotations (never to validation cases).
    pub fn load_cases(&self, ids: &[String], perturb: bool) -> Result<Vec<CaseData>> {
        ids.iter()
            .map(|id| {
                let mut case = store::read_case(&self.cfg.dataset_root, id)
                    .with_context(|| format!("loading case {id}"))?;
                case.volume = truncate_hu(&case.volume);
                if perturb && self.cfg.ablation.perturb_boxes {
                    let (_, h, w) = case.volume.shape();
                    let mut rng = derive_rng(self.cfg.seed, &format!("perturb/{id}"));
                    case.boxes = perturb_boxes(&case.boxes, &self.cfg.perturb, (h, w), &mut rng);
                }
                Ok(case)
            })
            .collect()
    }

    // ---- teacher --------------------------------------------------------

    pub fn teacher_ckpt_path(&self) -> PathBuf {
        self.out().join("teacher").join("checkpoint.ckpt")
    }

    fn teacher_inputs_hash(&self, split: &Split) -> u64 {
        fnv1a64(
            format!(
                "{}/{:?}/{:?}/{:?}/{}/{}",
                self.common_scope(),
                split.strong,
                split.val,
                self.cfg.ablation.attention,
                self.perturb_scope(),
                serde_json::to_string(&self.cfg.teacher).unwrap()
            )
            .as_bytes(),
        )
    }

    fn uses_pseudo_labels(&self, split: &Split) -> bool {
        !split.weak.is_empty()
            && self.cfg.ablation.student_supervision == StudentSupervision::Mixed
    }

    pub fn train_teacher_stage(&self, split: &Split) -> Result<()> {
        if !self.uses_pseudo_labels(split) {
            // strong-only or full-supervision run: no pseudo labels needed
            return Ok(());
        }
        let inputs = self.teacher_inputs_hash(split);
        if stage_is_done(self.out(), "teacher", inputs)? {
            eprintln!("teacher stage already complete, skipping");
            return Ok(());
        }
        let strong = self.load_cases(&split.strong, true)?;
        let val = self.load_cases(&split.val, false)?;
        let mut tcfg = self.cfg.teacher.clone();
        tcfg.seed = self.cfg.seed;
        tcfg.role = Role::Teacher;
        let run = train_teacher(&strong, &val, &self.cfg.unet, self.cfg.ablation.attention, &tcfg)
            .map_err(|e| anyhow!("teacher training failed: {e}"))?;
        let dir = self.out().join("teacher");
        fs::create_dir_all(&dir)?;
        let manifest = CheckpointManifest {
            config: serde_json::json!({
                "unet": self.cfg.unet,
                "variant": self.cfg.ablation.attention,
                "config_hash": format!("{:016x}", self.config_hash),
            }),
            epoch: run.best_epoch,
            seed: self.cfg.seed,
            has_loc_branch: false,
        };
        let mut net = run.net;
        save_checkpoint(&self.teacher_ckpt_path(), &manifest, &mut net)?;
        fs::write(dir.join("trace.csv"), trace_to_csv(&run.trace))?;
        mark_done(self.out(), "teacher", inputs)?;
        Ok(())
    }

    pub fn load_teacher(&self) -> Result<TeacherNet<f32>> {
        let mut net = TeacherNet::<f32>::new(
            &self.cfg.unet,
            self.cfg.ablation.attention,
            &mut derive_rng(self.cfg.seed, "teacher-init"),
        );
        load_checkpoint(&self.teacher_ckpt_path(), &mut net)
            .map_err(|e| anyhow!("loading teacher checkpoint: {e}"))?;
        Ok(net)
    }

    // ---- annotate (pseudo labels) ----------------------------------------

    pub fn pseudo_dir(&self) -> PathBuf {
        self.out().join("pseudo")
    }

    pub fn annotate_stage(&self, split: &Split) -> Result<()> {
        if !self.uses_pseudo_labels(split) {
            return Ok(());
        }
        let ckpt_hash = file_hash(&self.teacher_ckpt_path())?;
        let inputs = fnv1a64(
            format!("{}/{:?}/{}/{ckpt_hash:016x}", self.common_scope(), split.weak, self.perturb_scope())
                .as_bytes(),
        );
        if stage_is_done(self.out(), "annotate", inputs)? {
            eprintln!("annotate stage already complete, skipping");
            return Ok(());
        }
        let weak = self.load_cases(&split.weak, true)?;
        let mut net = self.load_teacher()?;
        let soft = generate_pseudo_labels(&mut net, &weak);
        for (case_id, soft_label) in &soft {
            let dir = self.pseudo_dir().join(case_id);
            fs::create_dir_all(&dir)?;
            store::write_soft_label(&dir, soft_label)?;
            let provenance = serde_json::json!({
                "teacher_checkpoint_hash": format!("{ckpt_hash:016x}"),
                "config_hash": format!("{:016x}", self.config_hash),
                "date": chrono_date(),
            });
            serde_json::to_writer_pretty(
                fs::File::create(dir.join("provenance.json"))?,
                &provenance,
            )?;
        }
        mark_done(self.out(), "annotate", inputs)?;
        Ok(())
    }

    // ---- student ---------------------------------------------------------

    pub fn student_ckpt_path(&self) -> PathBuf {
        self.out().join("student").join("checkpoint.ckpt")
    }

    fn student_inputs_hash(&self, split: &Split, pseudo_hash: u64) -> u64 {
        fnv1a64(
            format!(
                "{}/{:?}/{:?}/{pseudo_hash:016x}/{}/{:?}/{}/{}",
                self.common_scope(),
                split.strong,
                split.val,
                self.cfg.ablation.loc_branch,
                self.cfg.ablation.student_supervision,
                self.perturb_scope(),
                serde_json::to_string(&self.cfg.student).unwrap()
            )
            .as_bytes(),
        )
    }

    pub fn train_student_stage(&self, split: &Split) -> Result<()> {
        let pseudo_hash = if !self.uses_pseudo_labels(split) {
            0
        } else {
            let mut h = 0u64;
            for id in &split.weak {
                h ^= file_hash(&self.pseudo_dir().join(id).join("soft_label.raw"))?;
            }
            h
        };
        let inputs = self.student_inputs_hash(split, pseudo_hash);
        if stage_is_done(self.out(), "student", inputs)? {
            eprintln!("student stage already complete, skipping");
            return Ok(());
        }
        let strong = self.load_cases(&split.strong, true)?;
        let val = self.load_cases(&split.val, false)?;
        let mut pseudo = if !self.uses_pseudo_labels(split) {
            Vec::new()
        } else {
            self.load_cases(&split.weak, true)?
        };
        for case in &mut pseudo {
            let (d, h, w) = case.volume.shape();
            let dir = self.pseudo_dir().join(&case.volume.case_id);
            case.soft_label = Some(store::read_soft_label(&dir, d, h, w)?);
            // the weak set never exposes its dense labels to training
            case.mask = None;
        }
        let mut scfg = self.cfg.student.clone();
        scfg.seed = self.cfg.seed;
        scfg.role = Role::Student;
        let run = train_student(
            &strong,
            &pseudo,
            &val,
            &self.cfg.unet,
            self.cfg.ablation.loc_branch,
            &scfg,
        )
        .map_err(|e| anyhow!("student training failed: {e}"))?;
        let dir = self.out().join("student");
        fs::create_dir_all(&dir)?;
        let manifest = CheckpointManifest {
            config: serde_json::json!({
                "unet": self.cfg.unet,
                "config_hash": format!("{:016x}", self.config_hash),
            }),
            epoch: run.best_epoch,
            seed: self.cfg.seed,
            has_loc_branch: self.cfg.ablation.loc_branch,
        };
        let mut net = run.net;
        save_checkpoint(&self.student_ckpt_path(), &manifest, &mut net)?;
        fs::write(dir.join("trace.csv"), trace_to_csv(&run.trace))?;
        mark_done(self.out(), "student", inputs)?;
        Ok(())
    }

    /// Load the student checkpoint into an inference-only network (the
    /// localization branch, if stored, is simply not loaded).
    pub fn load_student_infer(&self) -> Result<StudentNet<f32>> {
        let mut net = StudentNet::<f32>::new(
            &self.cfg.unet,
            false,
            &mut derive_rng(self.cfg.seed, "student-init"),
        );
        load_checkpoint(&self.student_ckpt_path(), &mut net)
            .map_err(|e| anyhow!("loading student checkpoint: {e}"))?;
        Ok(net)
    }

    // ---- evaluate ---------------------------------------------------------

    pub fn evaluate_stage(&self, split: &Split) -> Result<MetricsReport> {
        let ckpt_hash = file_hash(&self.student_ckpt_path())?;
        let inputs = fnv1a64(
            format!("{}/{:?}/{ckpt_hash:016x}", self.common_scope(), split.val).as_bytes(),
        );
        let report_path = self.out().join("report").join("metrics.json");
        if stage_is_done(self.out(), "evaluate", inputs)? {
            return Ok(serde_json::from_reader(fs::File::open(&report_path)?)?);
        }
        let val = self.load_cases(&split.val, false)?;
        let mut net = self.load_student_infer()?;
        let preds: Vec<_> = val
            .iter()
            .map(|c| postprocess(&sweep_infer_student(&mut net, &c.volume, 4)))
            .collect();
        let pairs: Vec<_> = preds
            .iter()
            .zip(val.iter())
            .map(|(p, c)| (p, c.mask.as_ref().expect("validation case needs a mask")))
            .collect();
        let report = MetricsReport::from_cases(&pairs)?;
        let dir = self.out().join("report");
        fs::create_dir_all(&dir)?;
        serde_json::to_writer_pretty(fs::File::create(&report_path)?, &report)?;
        fs::write(dir.join("per_case.csv"), report.to_csv())?;
        mark_done(self.out(), "evaluate", inputs)?;
        Ok(report)
    }

    /// The whole pipeline; each completed stage is skipped on resume.
    pub fn run(&self) -> Result<MetricsReport> {
        let _lock = DirLock::acquire(self.out())?;
        let manifest_path = self.out().join("manifest.json");
        serde_json::to_writer_pretty(
            fs::File::create(&manifest_path)?,
            &serde_json::json!({
                "config_hash": format!("{:016x}", self.config_hash),
                "seed": self.cfg.seed,
                "config": self.cfg,
            }),
        )?;
        let split = self.split().context("stage split")?;
        self.train_teacher_stage(&split).context("stage teacher")?;
        self.annotate_stage(&split).context("stage annotate")?;
        self.train_student_stage(&split).context("stage student")?;
        self.evaluate_stage(&split).context("stage evaluate")
    }
}

/// ISO date without pulling in a clock crate; provenance metadata only.
fn chrono_date() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = secs / 86_400;
    // civil date from the day count (Howard Hinnant's algorithm)
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

/// Strip localization parameters from a checkpoint, producing the
/// deployment-style backbone-only file.
pub fn export_checkpoint(src: &Path, dst: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut full = StudentNet::<f32>::new(&cfg.unet, true, &mut derive_rng(0, "export"));
    let manifest = match load_checkpoint(src, &mut full) {
        Ok(m) => m,
        Err(_) => {
            // checkpoint may already be backbone-only
            let mut bare = StudentNet::<f32>::new(&cfg.unet, false, &mut derive_rng(0, "export"));
            let m = load_checkpoint(src, &mut bare)?;
            let out = CheckpointManifest { has_loc_branch: false, ..m };
            save_checkpoint(dst, &out, &mut bare)?;
            return Ok(());
        }
    };
    full.strip_loc();
    let out = CheckpointManifest { has_loc_branch: false, ..manifest };
    save_checkpoint(dst, &out, &mut full)?;
    Ok(())
}
