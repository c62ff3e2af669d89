//! Ratio sweeps and the box-perturbation study: repeated pipeline runs
//! against a shared held-out split, with curve/report emission.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mixseg::eval::MetricsReport;

use crate::config::ExperimentConfig;
use crate::pipeline::Pipeline;
use crate::plot::{line_chart, Series};

#[derive(Debug, Serialize)]
pub struct RatioPoint {
    pub ratio: (u32, u32, u32),
    pub report: MetricsReport,
}

/// Run the full pipeline once per ratio, sharing the validation split
/// (the split construction holds the tail share fixed), then emit
/// `curve.csv` and a Dice-vs-ratio plot.
pub fn sweep_ratio(base: &ExperimentConfig, ratios: &[(u32, u32, u32)]) -> Result<Vec<RatioPoint>> {
    let mut points = Vec::new();
    let mut failures = Vec::new();
    let mut shared_val: Option<Vec<String>> = None;
    for &ratio in ratios {
        let mut cfg = base.clone();
        cfg.ratio = ratio;
        cfg.output_dir = base.output_dir.join(format!("ratio_{}_{}_{}", ratio.0, ratio.1, ratio.2));
        let mut run = || -> Result<RatioPoint> {
            let pipe = Pipeline::new(cfg.clone())?;
            let report = pipe.run()?;
            let split = pipe.split()?;
            match &shared_val {
                Some(v) if *v != split.val => {
                    bail!("validation split diverged across ratios: {:?} vs {:?}", v, split.val)
                }
                _ => {}
            }
            shared_val = Some(split.val.clone());
            Ok(RatioPoint { ratio, report })
        };
        match run() {
            Ok(p) => points.push(p),
            Err(e) => {
                eprintln!("ratio {ratio:?} failed: {e:#}");
                failures.push((ratio, format!("{e:#}")));
            }
        }
    }
    emit_curve(&base.output_dir, &points).context("writing sweep outputs")?;
    if !failures.is_empty() {
        bail!("{} of {} sweep points failed; partial results kept", failures.len(), ratios.len());
    }
    Ok(points)
}

fn emit_curve(out: &Path, points: &[RatioPoint]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut csv = String::from(
        "strong_pct,weak_pct,val_pct,dice_global_liver,dice_per_case_liver,dice_global_lesion,dice_per_case_lesion,tumor_burden_rmse\n",
    );
    for p in points {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            p.ratio.0,
            p.ratio.1,
            p.ratio.2,
            p.report.dice_global_liver,
            p.report.dice_per_case_liver,
            p.report.dice_global_lesion,
            p.report.dice_per_case_lesion,
            p.report.tumor_burden_rmse
        ));
    }
    fs::write(out.join("curve.csv"), csv)?;
    type Getter = fn(&MetricsReport) -> f64;
    let getters: [(&str, Getter); 4] = [
        ("liver Dice global", |r| r.dice_global_liver),
        ("liver Dice per case", |r| r.dice_per_case_liver),
        ("lesion Dice global", |r| r.dice_global_lesion),
        ("lesion Dice per case", |r| r.dice_per_case_lesion),
    ];
    let series = getters.map(|(name, f)| Series {
        name: name.to_string(),
        points: points.iter().map(|p| (p.ratio.0 as f64, f(&p.report))).collect(),
    });
    line_chart(
        &out.join("dice_vs_ratio.svg"),
        "Held-out Dice vs strong-set share",
        "strong share (%)",
        "Dice",
        &series,
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PerturbStudy {
    pub baseline: MetricsReport,
    pub perturbed: MetricsReport,
    pub delta_dice_global_liver: f64,
    pub delta_dice_per_case_liver: f64,
    pub delta_dice_global_lesion: f64,
    pub delta_dice_per_case_lesion: f64,
}

/// Rerun teacher and student with perturbed training boxes and report
/// Dice deltas against the unperturbed run. Dense labels are untouched.
pub fn perturb_study(base: &ExperimentConfig) -> Result<PerturbStudy> {
    let mut base_cfg = base.clone();
    base_cfg.ablation.perturb_boxes = false;
    base_cfg.output_dir = base.output_dir.join("baseline");
    let baseline = Pipeline::new(base_cfg)?.run().context("baseline run")?;

    let mut pert_cfg = base.clone();
    pert_cfg.ablation.perturb_boxes = true;
    pert_cfg.output_dir = base.output_dir.join("perturbed");
    let perturbed = Pipeline::new(pert_cfg)?.run().context("perturbed run")?;

    let study = PerturbStudy {
        delta_dice_global_liver: perturbed.dice_global_liver - baseline.dice_global_liver,
        delta_dice_per_case_liver: perturbed.dice_per_case_liver - baseline.dice_per_case_liver,
        delta_dice_global_lesion: perturbed.dice_global_lesion - baseline.dice_global_lesion,
        delta_dice_per_case_lesion: perturbed.dice_per_case_lesion - baseline.dice_per_case_lesion,
        baseline,
        perturbed,
    };
    fs::create_dir_all(&base.output_dir)?;
    serde_json::to_writer_pretty(
        fs::File::create(base.output_dir.join("perturb_study.json"))?,
        &study,
    )?;
    Ok(study)
}
