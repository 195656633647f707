//! Command dispatch and run-directory management.
//!
//! Every run first turns its config into a typed [`Plan`] (so all validation
//! happens up front), then creates `out/<run_id>/`, snapshots the config there,
//! executes, and finally writes `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use sane_core::contrastive::{Similarity, SimilaritySign};
use sane_core::numerics::{singular_values, SeededRng};
use sane_core::refinery::{sane_step, RefineryConfig, SaneConfig, SaneState, StepReport};
use sane_core::shallow_net::{Activation, ShallowNet};
use sane_core::synthdata::{corrupt_labels, generate_dataset, DatasetParams};
use sane_core::theory::{
    bimodality_from_spectrum, network_covariance, recovery_data, run_gap_cell, run_recovery, support_projector,
    AlphaSchedule, GapConfig, GapReport, RecoveryConfig,
};

use crate::config::{Command, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::formats;
use crate::records::{self, write_file, RunManifest};

/// Where runs go and how many cells may run at once.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub data: DatasetParams,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub sane: SaneConfig,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SpectrumPlan {
    pub data: DatasetParams,
    pub hidden: usize,
    pub activation: Activation,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GapPlan {
    pub config: GapConfig,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// A fully validated unit of work.
#[derive(Debug, Clone)]
pub enum Plan {
    GenData { data: DatasetParams, rho: f64, seed: u64 },
    Recovery(RecoveryConfig),
    TrainSane(TrainPlan),
    AnalyzeJacobian(SpectrumPlan),
    Gap(GapPlan),
    Sweep(Vec<(ExperimentConfig, Plan)>),
}

fn data_params(c: &ExperimentConfig) -> Result<DatasetParams> {
    let params = DatasetParams {
        centers: c.count("data.centers")?,
        classes: c.count("data.classes")?,
        dim: c.count("data.dim")?,
        n: c.count("data.n")?,
        epsilon: c.real("data.epsilon")?,
        delta: c.real("data.delta")?,
        c_lower: c.real("data.c_lower")?,
        c_upper: c.real("data.c_upper")?,
    };
    params.validate().map_err(LabError::invalid_config)?;
    Ok(params)
}

fn rho(c: &ExperimentConfig) -> Result<f64> {
    let rho = c.real("data.rho")?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(LabError::Config(format!("key `data.rho`: must lie in [0, 1], got {rho}")));
    }
    Ok(rho)
}

fn similarity(c: &ExperimentConfig) -> Result<Similarity> {
    let sign = if c.flag("contrastive.paper_sign")? {
        SimilaritySign::Negated
    } else {
        SimilaritySign::Agreement
    };
    Ok(Similarity::new(c.real("contrastive.tau")?)
        .map_err(|e| LabError::Config(format!("key `contrastive.tau`: {e}")))?
        .with_sign(sign))
}

fn encoder_widths(c: &ExperimentConfig) -> Result<Vec<usize>> {
    let widths = vec![c.count("encoder.hidden")?, c.count("encoder.feature")?];
    if widths.contains(&0) {
        return Err(LabError::Config("encoder widths must be positive".into()));
    }
    Ok(widths)
}

/// Validates a config into a plan without touching the filesystem.
pub fn plan(c: &ExperimentConfig) -> Result<Plan> {
    match c.command() {
        Command::GenData => Ok(Plan::GenData {
            data: data_params(c)?,
            rho: rho(c)?,
            seed: c.seed()?,
        }),
        Command::Recovery => {
            let alpha = match c.text("alpha.schedule")? {
                "constant" => AlphaSchedule::Constant(c.real("alpha.value")?),
                _ => AlphaSchedule::Ramp {
                    max: c.real("alpha.max")?,
                    ramp_len: c.count("alpha.ramp_len")?,
                },
            };
            let config = RecoveryConfig {
                data: data_params(c)?,
                rho: rho(c)?,
                hidden: c.count("net.hidden")?,
                activation: c.activation("net.activation")?,
                eta: c.real("recovery.eta")?,
                iterations: c.count("recovery.iterations")?,
                alpha,
                fresh_per_center: c.count("recovery.fresh_per_center")?,
                seed: c.seed()?,
            };
            config.validate().map_err(LabError::invalid_config)?;
            Ok(Plan::Recovery(config))
        }
        Command::TrainSane => {
            let steps = c.count("train.steps")?;
            let sane = SaneConfig {
                similarity: similarity(c)?,
                refinery: RefineryConfig {
                    tau_prime: c.real("refinery.tau_prime")?,
                    m1: c.real("refinery.m1")?,
                    m2: c.real("refinery.m2")?,
                    kappa: c.real("refinery.kappa")?,
                    lambda: c.real("refinery.lambda")?,
                    total_iters: steps,
                },
                momentum: c.real("contrastive.momentum")?,
                learning_rate: c.real("contrastive.lr")?,
                batch: c.count("contrastive.batch")?,
                queue: c.count("contrastive.queue")?,
            };
            sane.validate().map_err(LabError::invalid_config)?;
            Ok(Plan::TrainSane(TrainPlan {
                data: data_params(c)?,
                widths: encoder_widths(c)?,
                activation: c.activation("encoder.activation")?,
                sane,
                steps,
                seed: c.seed()?,
            }))
        }
        Command::AnalyzeJacobian => {
            let plan = SpectrumPlan {
                data: data_params(c)?,
                hidden: c.count("net.hidden")?,
                activation: c.activation("net.activation")?,
                samples: c.count("covariance.samples")?,
                seed: c.seed()?,
            };
            if plan.hidden < 2 || plan.hidden % 2 != 0 {
                return Err(LabError::Config("key `net.hidden`: must be even and at least 2".into()));
            }
            if plan.samples < sane_core::theory::MIN_MC_SAMPLES {
                return Err(LabError::Config(format!(
                    "key `covariance.samples`: need at least {}",
                    sane_core::theory::MIN_MC_SAMPLES
                )));
            }
            Ok(Plan::AnalyzeJacobian(plan))
        }
        Command::Gap => {
            let config = GapConfig {
                data: data_params(c)?,
                widths: encoder_widths(c)?,
                activation: c.activation("encoder.activation")?,
                similarity: similarity(c)?,
                batch: c.count("contrastive.batch")?,
                queue: c.count("contrastive.queue")?,
                momentum: c.real("contrastive.momentum")?,
                learning_rate: c.real("contrastive.lr")?,
                steps: c.count("gap.steps")?,
            };
            config.validate().map_err(LabError::invalid_config)?;
            let rhos = c.reals("gap.rhos")?.to_vec();
            if rhos.is_empty() || rhos.windows(2).any(|w| !(w[0] < w[1])) || rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(LabError::Config(
                    "key `gap.rhos`: must be a nonempty ascending list in [0, 1]".into(),
                ));
            }
            let count = c.int("gap.seeds")?;
            if count < 3 {
                return Err(LabError::Config("key `gap.seeds`: need at least 3 seeds".into()));
            }
            let base = c.seed()?;
            let seeds = (0..count)
                .map(|i| base.checked_add(i))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| LabError::Config("key `seed`: seed range overflows".into()))?;
            Ok(Plan::Gap(GapPlan { config, rhos, seeds }))
        }
        Command::Sweep => c
            .expand()
            .into_iter()
            .map(|cell| plan(&cell).map(|p| (cell, p)))
            .collect::<Result<Vec<_>>>()
            .map(Plan::Sweep),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summaries serialize") + "\n"
}

#[derive(Serialize)]
struct RecoveryJson {
    final_frac_label_correct: f64,
    final_frac_pred_correct: f64,
    fresh_frac_correct: f64,
    corrupted_fit: Option<f64>,
    final_pred_err: f64,
    zeta: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct SpectrumJson {
    top: Vec<f64>,
    ratio: f64,
    relative_tail: f64,
    lambda: f64,
    zeta: f64,
}

#[derive(Serialize)]
struct GapJson {
    rhos: Vec<f64>,
    mean_label_err: Vec<f64>,
    mean_train_risk: Vec<f64>,
    mean_heldout_risk: Vec<f64>,
    mean_gap: Vec<f64>,
    spearman: Option<f64>,
    smallest_gap_rho: Option<f64>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct TrainJson {
    steps: usize,
    final_loss: Option<f64>,
    final_onehot_loss: Option<f64>,
    final_mixup_loss: Option<f64>,
}

/// Runs the gap grid with at most `jobs` cells in flight.
pub fn run_gap(plan: &GapPlan, jobs: usize) -> Result<GapReport> {
    let cells: Vec<(f64, u64)> = plan
        .rhos
        .iter()
        .flat_map(|&r| plan.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LabError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results = pool.install(|| {
        cells
            .par_iter()
            .map(|&(r, s)| run_gap_cell(&plan.config, r, s))
            .collect::<Vec<_>>()
    });
    let cells = results.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GapReport::from_cells(&plan.rhos, cells)?)
}

/// Trains SANE for the planned number of steps, returning the final state
/// and one report per step.
pub fn train_sane(plan: &TrainPlan) -> Result<(SaneState, Vec<StepReport>)> {
    let root = SeededRng::new(plan.seed, "train-sane");
    let (_, data) = generate_dataset(&plan.data, &mut root.substream("data"))?;
    let mut widths = vec![plan.data.dim];
    widths.extend_from_slice(&plan.widths);
    let mut state = SaneState::init(&widths, plan.activation, &plan.sane, &mut root.substream("init"))?;
    let mut rng = root.substream("steps");
    let mut reports = Vec::with_capacity(plan.steps);
    for _ in 0..plan.steps {
        let (next, report) = sane_step(&state, &data, &plan.sane, &mut rng)?;
        state = next;
        reports.push(report);
    }
    Ok((state, reports))
}

fn execute(plan: &Plan, dir: &Path, jobs: usize) -> Result<()> {
    match plan {
        Plan::GenData { data, rho, seed } => {
            let root = SeededRng::new(*seed, "gen-data");
            let (centers, clean) = generate_dataset(data, &mut root.substream("data"))?;
            let set = corrupt_labels(&clean, *rho, &mut root.substream("corrupt"))?;
            write_file(&dir.join("dataset.txt"), &formats::write_dataset(&centers, &set, data.delta))
        }
        Plan::Recovery(config) => {
            let record = run_recovery(config)?;
            let (centers, data, _) = recovery_data(config)?;
            write_file(&dir.join("dataset.txt"), &formats::write_dataset(&centers, &data, config.data.delta))?;
            write_file(&dir.join("metrics.csv"), &records::recovery_csv(&record.rows))?;
            write_file(&dir.join("network.txt"), &formats::write_shallow_net(&record.net))?;
            let s = &record.summary;
            write_file(
                &dir.join("summary.json"),
                &to_json(&RecoveryJson {
                    final_frac_label_correct: s.frac_label_correct,
                    final_frac_pred_correct: s.frac_pred_correct,
                    fresh_frac_correct: s.fresh_frac_correct,
                    corrupted_fit: s.corrupted_fit,
                    final_pred_err: s.pred_err,
                    zeta: s.zeta,
                    iterations: config.iterations,
                }),
            )
        }
        Plan::TrainSane(plan) => {
            let (state, reports) = train_sane(plan)?;
            write_file(&dir.join("train.csv"), &records::train_csv(&reports))?;
            write_file(&dir.join("encoder_online.txt"), &formats::write_encoder(&state.pair.online))?;
            write_file(&dir.join("encoder_target.txt"), &formats::write_encoder(&state.pair.target))?;
            let last = reports.last();
            write_file(
                &dir.join("summary.json"),
                &to_json(&TrainJson {
                    steps: plan.steps,
                    final_loss: last.map(|r| r.loss),
                    final_onehot_loss: last.map(|r| r.onehot_loss),
                    final_mixup_loss: last.map(|r| r.mixup_loss),
                }),
            )
        }
        Plan::AnalyzeJacobian(plan) => {
            let root = SeededRng::new(plan.seed, "spectrum");
            let (centers, data) = generate_dataset(&plan.data, &mut root.substream("data"))?;
            let net = ShallowNet::init_gaussian(plan.hidden, plan.data.dim, plan.activation, &mut root.substream("net"))?;
            let spectrum = singular_values(&net.jacobian(&data.crops)?)?;
            let report = bimodality_from_spectrum(&spectrum, plan.data.centers)?;
            let cov = network_covariance(
                &centers.centers,
                plan.activation,
                plan.samples,
                &mut root.substream("covariance"),
            )?;
            let (_, zeta) = support_projector(&data.center_of)?;
            write_file(&dir.join("spectrum.csv"), &records::spectrum_csv(&spectrum))?;
            write_file(
                &dir.join("summary.json"),
                &to_json(&SpectrumJson {
                    top: report.top,
                    ratio: report.ratio,
                    relative_tail: report.relative_tail,
                    lambda: cov.lambda,
                    zeta,
                }),
            )
        }
        Plan::Gap(plan) => {
            let report = run_gap(plan, jobs)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            write_file(&dir.join("gap.csv"), &records::gap_csv(&report.cells))?;
            write_file(
                &dir.join("summary.json"),
                &to_json(&GapJson {
                    smallest_gap_rho: report.argmin_gap().map(|i| report.rhos[i]),
                    rhos: report.rhos,
                    mean_label_err: report.mean_label_err,
                    mean_train_risk: report.mean_train_risk,
                    mean_heldout_risk: report.mean_heldout_risk,
                    mean_gap: report.mean_gap,
                    spearman: report.spearman,
                    warnings: report.warnings,
                }),
            )
        }
        Plan::Sweep(cells) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| LabError::Config(format!("cannot start {jobs} workers: {e}")))?;
            let width = cells.len().saturating_sub(1).to_string().len().max(3);
            let results: Vec<Result<()>> = pool.install(|| {
                cells
                    .par_iter()
                    .enumerate()
                    .map(|(i, (config, plan))| {
                        let cell_dir = dir.join(format!("cell-{i:0width$}"));
                        std::fs::create_dir(&cell_dir).map_err(|e| LabError::io(&cell_dir, e))?;
                        let started = Instant::now();
                        write_file(&cell_dir.join("config.cfg"), &config.to_text())?;
                        execute(plan, &cell_dir, 1)?;
                        records::write_manifest(
                            &cell_dir,
                            &format!("cell-{i:0width$}"),
                            config.command().name(),
                            config.seed()?,
                            started.elapsed().as_secs_f64(),
                        )?;
                        Ok(())
                    })
                    .collect()
            });
            results.into_iter().collect()
        }
    }
}

/// Validates, creates the run directory, executes and writes the manifest.
pub fn run_command(config: &ExperimentConfig, options: &RunOptions) -> Result<RunManifest> {
    let plan = plan(config)?;
    let seed = config.seeds().first().copied().unwrap_or(0);
    let epoch = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let (run_id, dir) = records::create_run_dir(&options.out, &format!("{epoch}-s{seed}"))?;
    // the snapshot doubles as the writability probe before any computation
    write_file(&dir.join("config.cfg"), &config.to_text())?;
    let started = Instant::now();
    execute(&plan, &dir, options.jobs)?;
    records::write_manifest(
        &dir,
        &run_id,
        config.command().name(),
        seed,
        started.elapsed().as_secs_f64(),
    )
}
