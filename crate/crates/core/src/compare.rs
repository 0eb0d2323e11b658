//! Trains and evaluates every variant over a list of seeds and summarises
//! parameters, throughput and median mAP.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{median, throughput_bench, Throughput};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, load_dataset, Scenario, Split};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{ap_delta_csv, ap_delta_report, evaluate, ApDelta, EvalReport};
use crate::fusion::Variant;
use crate::optim::Adam;
use crate::train::{train, EpochLog, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub train_log: TrainLog,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub params: usize,
    pub img_per_sec: f64,
    /// Median over seeds.
    pub map50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResult {
    pub runs: Vec<VariantRun>,
    pub throughput: Vec<Throughput>,
    pub summary: Vec<SummaryRow>,
    /// Seed whose reasoner2 mAP is the median; the AP deltas come from it.
    pub median_seed: u64,
    pub ap_delta: Vec<ApDelta>,
}

impl CompareResult {
    pub fn run(&self, variant: Variant, seed: u64) -> Option<&VariantRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn summary_row(&self, variant: Variant) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,params,img_per_sec,map50\n");
        for r in &self.summary {
            let _ = writeln!(out, "{},{},{:.2},{:.6}", r.variant, r.params, r.img_per_sec, r.map50);
        }
        out
    }
}

/// Progress events emitted while comparing.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Epoch {
        variant: Variant,
        seed: u64,
        log: &'a EpochLog,
    },
    Evaluated {
        variant: Variant,
        seed: u64,
        report: &'a EvalReport,
    },
}

/// Datasets for one seed: the configured files if present, otherwise
/// freshly generated train/val splits from the seed.
pub fn datasets_for_seed(cfg: &RunConfig, seed: u64) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let train_set = match &cfg.data.train {
        Some(p) => load_dataset(p)?,
        None => generate(seed, cfg.n_train, &cfg.dataset.with_split(Split::Train))?,
    };
    let val = match &cfg.data.val {
        Some(p) => load_dataset(p)?,
        None => generate(seed, cfg.n_val, &cfg.dataset.with_split(Split::Val))?,
    };
    Ok((train_set, val))
}

/// Runs the full comparison. With `out_dir` set, each run's checkpoint,
/// train log and report are written under `out_dir/runs/`.
pub fn run_compare(cfg: &RunConfig, out_dir: Option<&Path>, mut progress: impl FnMut(Progress<'_>)) -> Result<CompareResult> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let mut runs = Vec::new();
    let mut last_models: Vec<Detector<f32>> = Vec::new();
    let mut bench_images = Vec::new();
    for &seed in &cfg.seeds {
        let (train_set, val) = datasets_for_seed(cfg, seed)?;
        last_models.clear();
        for variant in Variant::ALL {
            let mut model = Detector::<f32>::new(cfg.model.with_variant(variant), seed)?;
            let mut adam = Adam::new(cfg.train.adam, model.store());
            let tc = TrainConfig { seed, ..cfg.train };
            let log = train(&mut model, &mut adam, &train_set, &tc, |e| {
                progress(Progress::Epoch { variant, seed, log: e })
            })?;
            let report = evaluate(&model, &val, &cfg.eval, seed)?;
            progress(Progress::Evaluated {
                variant,
                seed,
                report: &report,
            });
            let mut log = log;
            if let Some(dir) = out_dir {
                let run_dir = dir.join("runs").join(format!("{variant}_seed{seed}"));
                fs::create_dir_all(&run_dir)?;
                let ck = run_dir.join("checkpoint.grsn");
                save_checkpoint(&ck, &model, Some(&adam), seed)?;
                log.checkpoint = Some(ck.display().to_string());
                fs::write(run_dir.join("train_log.csv"), log.to_csv())?;
                fs::write(run_dir.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
            }
            runs.push(VariantRun {
                variant,
                seed,
                params: model.param_count(),
                train_log: log,
                report,
            });
            last_models.push(model);
        }
        bench_images = val;
    }

    let bench_models: Vec<&Detector<f32>> = last_models.iter().collect();
    let throughput = throughput_bench(&bench_models, &bench_images, &cfg.bench)?;

    let summary = Variant::ALL
        .iter()
        .zip(&throughput)
        .map(|(&variant, tp)| {
            let maps: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.report.map50).collect();
            SummaryRow {
                variant,
                params: tp.params,
                img_per_sec: tp.median,
                map50: median(&maps),
            }
        })
        .collect();

    let mut r2: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == Variant::Reasoner2).collect();
    r2.sort_by(|a, b| a.report.map50.total_cmp(&b.report.map50).then(a.seed.cmp(&b.seed)));
    let median_seed = r2[(r2.len() - 1) / 2].seed;
    let find = |v: Variant| {
        runs.iter()
            .find(|r| r.variant == v && r.seed == median_seed)
            .ok_or_else(|| Error::Usage(format!("missing {v} run for seed {median_seed}")))
    };
    let ap_delta = ap_delta_report(&find(Variant::Baseline)?.report, &find(Variant::Reasoner2)?.report)?;

    let result = CompareResult {
        runs,
        throughput,
        summary,
        median_seed,
        ap_delta,
    };
    if let Some(dir) = out_dir {
        write_compare_outputs(dir, &result)?;
    }
    Ok(result)
}

pub fn write_compare_outputs(dir: &Path, result: &CompareResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), result.summary_csv())?;
    fs::write(dir.join("ap_delta.csv"), ap_delta_csv(&result.ap_delta))?;
    fs::write(dir.join("compare.json"), serde_json::to_string_pretty(result)?)?;
    Ok(())
}
