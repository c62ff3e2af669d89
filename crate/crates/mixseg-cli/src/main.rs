//! Experiment orchestration for the teacher-student mixed-supervision
//! segmentation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mixseg::data::store;
use mixseg::phantom::{gen_corpus, PhantomConfig};

use mixseg_cli::config::ExperimentConfig;
use mixseg_cli::pipeline::{self, Pipeline};
use mixseg_cli::{nifti, sweep};

#[derive(Parser)]
#[command(name = "mixseg", about = "Teacher-student mixed-supervision segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply the reduced desk-scale preset (64x64, base width 8, short
    /// schedules).
    #[arg(long, default_value_t = false)]
    desk_scale: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.desk_scale {
            cfg.apply_desk_scale();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus in the canonical layout.
    PhantomGen {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Number of cases.
        #[arg(long, default_value_t = 60)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume shape as D,H,W.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        shape: Option<Vec<usize>>,
        /// Corpus profile: "default" or "desk" (larger, guaranteed lesions).
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Import a NIfTI scan (and optional label volume) into the dataset.
    Import {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        case_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and persist the strong/weak/validation split.
    Split(ConfigArgs),
    /// Train the box-guided teacher annotator on the strong set.
    TrainTeacher(ConfigArgs),
    /// Produce soft pseudo-labels for the weak set with the trained teacher.
    Annotate(ConfigArgs),
    /// Train the student segmentor on the strong + pseudo mixture.
    TrainStudent(ConfigArgs),
    /// Sweep the student over the validation volumes and write predicted
    /// masks (no metrics).
    Infer(ConfigArgs),
    /// Sweep, postprocess, and score the validation volumes.
    Evaluate(ConfigArgs),
    /// Run the whole pipeline (split through evaluate), resuming completed
    /// stages.
    Run(ConfigArgs),
    /// Run the pipeline once per strong:weak ratio and plot Dice curves.
    SweepRatio {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated ratios, e.g. "10:80:10,30:60:10,50:40:10,70:20:10".
        #[arg(long, default_value = "10:80:10,30:60:10,50:40:10,70:20:10")]
        ratios: String,
    },
    /// Paired unperturbed/perturbed-box runs with Dice deltas.
    PerturbStudy(ConfigArgs),
    /// Strip localization parameters from a student checkpoint.
    ExportCheckpoint {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse_ratios(text: &str) -> Result<Vec<(u32, u32, u32)>> {
    text.split(',')
        .map(|part| {
            let nums: Vec<u32> = part
                .trim()
                .split(':')
                .map(|v| v.parse::<u32>().map_err(|e| anyhow!("ratio '{part}': {e}")))
                .collect::<Result<_>>()?;
            if nums.len() != 3 {
                bail!("ratio '{part}' must have three parts");
            }
            Ok((nums[0], nums[1], nums[2]))
        })
        .collect()
}

/// Error class drives the exit code: 2 for configuration problems, 3 for
/// stage failures.
enum CliFailure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

fn run() -> Result<(), CliFailure> {
    let cli = Cli::parse();
    match cli.command {
        Command::PhantomGen { out, cases, seed, shape, profile } => {
            let mut cfg = match profile.as_str() {
                "desk" => PhantomConfig::desk_corpus(),
                "default" => PhantomConfig::default(),
                other => {
                    return Err(CliFailure::Config(anyhow!("unknown phantom profile '{other}'")))
                }
            };
            if let Some(s) = shape {
                cfg.shape = (s[0], s[1], s[2]);
            }
            let ids = gen_corpus(&out, cases, &cfg, seed).map_err(|e| CliFailure::Stage(e.into()))?;
            println!("generated {} phantom cases under {}", ids.len(), out.display());
            Ok(())
        }
        Command::Import { volume, mask, case_id, out } => {
            let vol = nifti::load_volume(&volume, &case_id).map_err(CliFailure::Stage)?;
            let seg = mask
                .map(|m| nifti::load_mask(&m, &case_id))
                .transpose()
                .map_err(CliFailure::Stage)?;
            store::write_case(&out, &vol, seg.as_ref(), None)
                .map_err(|e| CliFailure::Stage(e.into()))?;
            println!("imported case {case_id} into {}", out.display());
            Ok(())
        }
        Command::Split(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            println!(
                "split: {} strong, {} weak, {} validation",
                split.strong.len(),
                split.weak.len(),
                split.val.len()
            );
            Ok(())
        }
        Command::TrainTeacher(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            pipe.train_teacher_stage(&split).map_err(CliFailure::Stage)?;
            println!("teacher checkpoint at {}", pipe.teacher_ckpt_path().display());
            Ok(())
        }
        Command::Annotate(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            pipe.annotate_stage(&split).map_err(CliFailure::Stage)?;
            println!("pseudo labels under {}", pipe.pseudo_dir().display());
            Ok(())
        }
        Command::TrainStudent(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            pipe.train_student_stage(&split).map_err(CliFailure::Stage)?;
            println!("student checkpoint at {}", pipe.student_ckpt_path().display());
            Ok(())
        }
        Command::Infer(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            infer_masks(&pipe, &split).map_err(CliFailure::Stage)
        }
        Command::Evaluate(args) => {
            let pipe = pipeline_for(&args)?;
            let split = pipe.split().map_err(CliFailure::Stage)?;
            let report = pipe.evaluate_stage(&split).map_err(CliFailure::Stage)?;
            print!("{report}");
            Ok(())
        }
        Command::Run(args) => {
            let pipe = pipeline_for(&args)?;
            let report = pipe.run().map_err(CliFailure::Stage)?;
            print!("{report}");
            Ok(())
        }
        Command::SweepRatio { config, ratios } => {
            let cfg = config.load().map_err(CliFailure::Config)?;
            let ratios = parse_ratios(&ratios).map_err(CliFailure::Config)?;
            let points = sweep::sweep_ratio(&cfg, &ratios).map_err(CliFailure::Stage)?;
            for p in &points {
                println!(
                    "ratio {:>2}:{:<2} liver {:.4}/{:.4} lesion {:.4}/{:.4}",
                    p.ratio.0,
                    p.ratio.1,
                    p.report.dice_global_liver,
                    p.report.dice_per_case_liver,
                    p.report.dice_global_lesion,
                    p.report.dice_per_case_lesion
                );
            }
            println!("curve data under {}", cfg.output_dir.display());
            Ok(())
        }
        Command::PerturbStudy(args) => {
            let cfg = args.load().map_err(CliFailure::Config)?;
            let study = sweep::perturb_study(&cfg).map_err(CliFailure::Stage)?;
            println!(
                "dice deltas (perturbed - baseline): liver {:+.4}/{:+.4} lesion {:+.4}/{:+.4}",
                study.delta_dice_global_liver,
                study.delta_dice_per_case_liver,
                study.delta_dice_global_lesion,
                study.delta_dice_per_case_lesion
            );
            Ok(())
        }
        Command::ExportCheckpoint { config, input, output } => {
            let cfg = config.load().map_err(CliFailure::Config)?;
            pipeline::export_checkpoint(&input, &output, &cfg).map_err(CliFailure::Stage)?;
            println!("wrote backbone-only checkpoint to {}", output.display());
            Ok(())
        }
    }
}

fn pipeline_for(args: &ConfigArgs) -> Result<Pipeline, CliFailure> {
    let cfg = args.load().map_err(CliFailure::Config)?;
    Pipeline::new(cfg).map_err(CliFailure::Config)
}

fn infer_masks(pipe: &Pipeline, split: &mixseg::data::Split) -> Result<()> {
    let val = pipe.load_cases(&split.val, false)?;
    let mut net = pipe.load_student_infer()?;
    let dir = pipe.cfg.output_dir.join("report");
    std::fs::create_dir_all(&dir)?;
    for case in &val {
        let pred = mixseg::eval::postprocess(&mixseg::student::sweep_infer_student(
            &mut net,
            &case.volume,
            4,
        ));
        let path = dir.join(format!("pred_{}.raw", case.volume.case_id));
        std::fs::write(&path, pred.labels.as_slice().ok_or_else(|| anyhow!("non-contiguous"))?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} predicted masks under {}", val.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliFailure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliFailure::Stage(e)) => {
            eprintln!("stage failure: {e:#}");
            ExitCode::from(3)
        }
    }
}
