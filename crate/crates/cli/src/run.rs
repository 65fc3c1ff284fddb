//! Command execution and output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use reslab::data::{gen_separated_dataset, load_idx, normalize_features};
use reslab::grad::loss;
use reslab::model::{forward, init_network};
use reslab::spectral::PowerIterOptions;
use reslab::tensor::random_unit_vector;
use reslab::theory::calibration::{
    DRIFT, GRADIENT_LOWER, GRADIENT_UPPER, PERTURBATION, SEMISMOOTH, SEPARATENESS,
};
use reslab::theory::{
    check_layer_norms, check_spectral_product, estimate_explosion, gradient_bound_ratios,
    gradient_lower_ratio, perturbation_report, run_trials, semismooth_residual, separateness_check,
    worst_case, write_reports_csv, write_reports_json, BoundReport, PerturbationConstants,
    PerturbationSpec,
};
use reslab::trainer::{drift_check, train, DriftConstants, TrainingLog};
use reslab::{Data, Network, NetworkConfig, SeedSpec};

use crate::config::{Command, DataSource, ExperimentConfig, TauMode, CHECK_NAMES};

pub const DEFAULT_SPECTRAL_C: f64 = 1.0;
pub const DEFAULT_NORM_C: f64 = 0.2;

/// Files written by a run and the checks that failed.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub failed: Vec<String>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.failed.is_empty()
    }

    fn record(&mut self, report: &BoundReport) {
        if report.verdict.is_failure() {
            self.failed.push(report.check_name.clone());
        }
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    files: Vec<String>,
    command: Command,
    master_seed: u64,
    cell_index: usize,
    seed: SeedSpec,
    network: &'a NetworkConfig,
    config: &'a ExperimentConfig,
}

/// One `(L, m, τ)` point with its seed.
#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    pub tau_mode: TauMode,
    pub network: NetworkConfig,
    pub seed: SeedSpec,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    match cfg.command {
        Command::Train => run_train(cfg),
        Command::Verify => run_verify(cfg),
        Command::Explosion => run_explosion(cfg),
        Command::Spectral => run_spectral(cfg),
        Command::Sweep => run_sweep(cfg),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_sidecar(cfg: &ExperimentConfig, cell: &Cell, stem: &Path, files: &[&Path]) -> Result<PathBuf> {
    let path = stem.with_extension("meta.json");
    let names = files
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let side = Sidecar {
        files: names,
        command: cfg.command,
        master_seed: cfg.seed,
        cell_index: cell.index,
        seed: cell.seed.clone(),
        network: &cell.network,
        config: cfg,
    };
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &side)?;
    writeln!(w)?;
    w.flush()?;
    Ok(path)
}

/// The single cell described by the `network` section.
pub fn base_cell(cfg: &ExperimentConfig) -> Result<Cell> {
    let network = effective_network(cfg, cfg.network.network_config()?)?;
    Ok(Cell {
        index: 0,
        tau_mode: cfg.network.tau_mode,
        network,
        seed: cfg.cell_seed(0),
    })
}

/// Sweep cells in `depth`, `width`, `tau_mode` order.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &depth in &cfg.sweep.depths {
        for &width in &cfg.sweep.widths {
            for &tau_mode in &cfg.sweep.tau_modes {
                let index = cells.len();
                let network = effective_network(cfg, cfg.network.resolve(depth, width, tau_mode)?)?;
                cells.push(Cell {
                    index,
                    tau_mode,
                    network,
                    seed: cfg.cell_seed(index),
                });
            }
        }
    }
    Ok(cells)
}

/// IDX data fixes the input dimension (after constant pixels are dropped).
fn effective_network(cfg: &ExperimentConfig, mut network: NetworkConfig) -> Result<NetworkConfig> {
    if let DataSource::Idx { .. } = cfg.data {
        network.input_dim = load_data(cfg, &SeedSpec::new(cfg.seed))?.input_dim();
    }
    Ok(network)
}

fn load_data(cfg: &ExperimentConfig, seed: &SeedSpec) -> reslab::Result<Data> {
    let d = cfg.network.output_dim;
    match &cfg.data {
        DataSource::Synthetic {
            n,
            delta,
            target_scale,
        } => gen_separated_dataset(*n, cfg.network.input_dim, d, *delta, *target_scale, seed),
        DataSource::Idx {
            images,
            labels,
            subset_n,
        } => {
            let raw = load_idx(images, labels)?.take(*subset_n);
            Ok(normalize_features(&raw, d)?.dataset)
        }
    }
}

/// Data from `seed.child(0)`, weights from `seed.child(1)`.
fn setup(cfg: &ExperimentConfig, network: &NetworkConfig, seed: &SeedSpec) -> reslab::Result<(Network, Data)> {
    let data = load_data(cfg, &seed.child(0))?;
    let params = init_network(network, &seed.child(1))?;
    Ok((params, data))
}

fn train_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<TrainingLog> {
    let (params, data) = setup(cfg, &cell.network, &cell.seed)?;
    let f0 = loss(&params, &data)?.total;
    let out = train(&params, &data, &cfg.train.train_config(f0, cell.seed.child(2)))?;
    Ok(out.log)
}

fn run_train(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cell = base_cell(cfg)?;
    let log = train_cell(cfg, &cell)?;
    let path = cfg.out_dir.join("train.csv");
    let mut w = create(&path)?;
    log.write_csv(&mut w)?;
    w.flush()?;
    let side = write_sidecar(cfg, &cell, &path, &[&path])?;
    Ok(RunSummary {
        files: vec![path, side],
        failed: Vec::new(),
    })
}

fn constant(cfg: &ExperimentConfig, name: &str, frozen: f64, upper: bool) -> f64 {
    cfg.verify.constants.get(name).copied().unwrap_or(if upper {
        frozen * cfg.verify.factor
    } else {
        frozen / cfg.verify.factor
    })
}

fn perturbation_constants(cfg: &ExperimentConfig) -> PerturbationConstants {
    match cfg.verify.constants.get("perturbation") {
        Some(&c) => PerturbationConstants {
            hidden: c,
            flips: c,
            top: c,
            top_flips: c,
        },
        None => {
            let k = cfg.verify.factor;
            PerturbationConstants {
                hidden: PERTURBATION.hidden * k,
                flips: PERTURBATION.flips * k,
                top: PERTURBATION.top * k,
                top_flips: PERTURBATION.top_flips * k,
            }
        }
    }
}

fn drift_constants(cfg: &ExperimentConfig) -> DriftConstants {
    match cfg.verify.constants.get("drift") {
        Some(&c) => DriftConstants { top: c, residual: c },
        None => DriftConstants {
            top: DRIFT.top * cfg.verify.factor,
            residual: DRIFT.residual * cfg.verify.factor,
        },
    }
}

fn probe(params: &Network, seed: &SeedSpec) -> Vec<f64> {
    random_unit_vector(params.config.input_dim, &seed.child(3))
}

/// Masked chain `(a, b)` at a random unit input; `b = None` means `L − 1`.
fn spectral_trial(
    network: &NetworkConfig,
    a: usize,
    b: Option<usize>,
    c: f64,
    tol: f64,
    seed: &SeedSpec,
) -> reslab::Result<BoundReport> {
    let params: Network = init_network(network, &seed.child(1))?;
    let trace = forward(&params, &probe(&params, seed))?;
    let opts = PowerIterOptions {
        tol,
        seed: seed.child(4),
        ..PowerIterOptions::default()
    };
    let b = b.unwrap_or(network.depth - 1);
    Ok(check_spectral_product(&params, &trace.masks, a, b, c, &opts)?.with_seed(seed))
}

/// One check over `verify.trials` seeds, reduced to its worst case.
fn verify_check(cfg: &ExperimentConfig, cell: &Cell, name: &str, seed: &SeedSpec) -> Result<BoundReport> {
    let net = &cell.network;
    let trials = cfg.verify.trials;
    let omega = cfg.verify.omega;
    let reports = match name {
        "spectral_product" => {
            let c = cfg.verify.constants.get(name).copied().unwrap_or(DEFAULT_SPECTRAL_C);
            run_trials(trials, seed, |s| spectral_trial(net, 1, None, c, cfg.spectral.tol, s))?
        }
        "layer_norms" => {
            let c = cfg.verify.constants.get(name).copied().unwrap_or(DEFAULT_NORM_C);
            run_trials(trials, seed, |s| {
                let params: Network = init_network(net, &s.child(1))?;
                Ok(check_layer_norms(&forward(&params, &probe(&params, s))?, c).with_seed(s))
            })?
        }
        "explosion" => vec![estimate_explosion(net, trials.max(30), seed)?],
        "gradient_upper" => {
            let c = constant(cfg, name, GRADIENT_UPPER, true);
            run_trials(trials, seed, |s| {
                let (p, d) = setup(cfg, net, s)?;
                Ok(gradient_bound_ratios(&p, &d, c)?.with_seed(s))
            })?
        }
        "gradient_lower" => {
            let c = constant(cfg, name, GRADIENT_LOWER, false);
            run_trials(trials, seed, |s| {
                let (p, d) = setup(cfg, net, s)?;
                Ok(gradient_lower_ratio(&p, &d, c)?.with_seed(s))
            })?
        }
        "perturbation" => {
            let consts = perturbation_constants(cfg);
            run_trials(trials, seed, |s| {
                let params: Network = init_network(net, &s.child(1))?;
                let w = PerturbationSpec::seeded(omega, &s.child(2)).build(&params)?;
                Ok(perturbation_report(&params, &w, &probe(&params, s), &consts)?.with_seed(s))
            })?
        }
        "separateness" => {
            let c = constant(cfg, name, SEPARATENESS, false);
            run_trials(trials, seed, |s| {
                let (p, d) = setup(cfg, net, s)?;
                let traces = d
                    .features()
                    .iter()
                    .map(|x| forward(&p, x))
                    .collect::<reslab::Result<Vec<_>>>()?;
                Ok(separateness_check(&traces, d.delta(), c)?.with_seed(s))
            })?
        }
        "semismooth" => {
            let c = constant(cfg, name, SEMISMOOTH, true);
            run_trials(trials, seed, |s| {
                let (p, d) = setup(cfg, net, s)?;
                let w = PerturbationSpec::seeded(omega, &s.child(2)).build(&p)?;
                Ok(semismooth_residual(&p, &w, &d, c, c)?.with_seed(s))
            })?
        }
        "drift" => {
            let consts = drift_constants(cfg);
            run_trials(trials, seed, |s| {
                let (p, d) = setup(cfg, net, s)?;
                let f0 = loss(&p, &d)?.total;
                let out = train(&p, &d, &cfg.train.train_config(f0, s.child(2)))?;
                let r = drift_check(&out.log, net, d.len(), d.output_dim(), d.delta(), &consts)?;
                Ok(r.with_seed(s))
            })?
        }
        other => anyhow::bail!("unknown check {other}"),
    };
    worst_case(name, &reports).context("no trials")
}

fn write_reports(
    cfg: &ExperimentConfig,
    cell: &Cell,
    stem: &str,
    reports: &[BoundReport],
    summary: &mut RunSummary,
) -> Result<()> {
    let json = cfg.out_dir.join(format!("{stem}.json"));
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    let mut w = create(&json)?;
    write_reports_json(reports, &mut w)?;
    writeln!(w)?;
    w.flush()?;
    let mut w = create(&csv)?;
    write_reports_csv(reports, &mut w)?;
    w.flush()?;
    let side = write_sidecar(cfg, cell, &cfg.out_dir.join(stem), &[&json, &csv])?;
    summary.files.extend([json, csv, side]);
    Ok(())
}

fn run_verify(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cell = base_cell(cfg)?;
    let mut summary = RunSummary::default();
    let mut reports = Vec::new();
    for name in &cfg.verify.checks {
        let idx = CHECK_NAMES.iter().position(|c| c == name).unwrap_or(CHECK_NAMES.len());
        let r = verify_check(cfg, &cell, name, &cell.seed.child(10 + idx as u64))
            .with_context(|| format!("check {name}"))?;
        summary.record(&r);
        reports.push(r);
    }
    write_reports(cfg, &cell, "verify", &reports, &mut summary)?;
    Ok(summary)
}

fn run_explosion(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cell = base_cell(cfg)?;
    let r = estimate_explosion(&cell.network, cfg.explosion_trials, &cell.seed)?.with_seed(&cell.seed);
    let mut summary = RunSummary::default();
    summary.record(&r);
    write_reports(cfg, &cell, "explosion", &[r], &mut summary)?;
    Ok(summary)
}

fn run_spectral(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cell = base_cell(cfg)?;
    let sp = &cfg.spectral;
    let mut reports = run_trials(sp.seeds, &cell.seed, |s| {
        spectral_trial(&cell.network, sp.a, sp.b, sp.c, sp.tol, s)
    })?;
    let worst = worst_case("spectral_product_worst", &reports).context("no seeds")?;
    let mut summary = RunSummary::default();
    summary.record(&worst);
    reports.push(worst);
    write_reports(cfg, &cell, "spectral", &reports, &mut summary)?;
    Ok(summary)
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "cell",
    "L",
    "m",
    "tau_mode",
    "tau",
    "seed",
    "initial_loss",
    "final_loss",
    "steps",
    "reached_target_at",
    "diverged_at",
    "file",
];

fn run_sweep(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let cells = sweep_cells(cfg)?;
    let dir = cfg.out_dir.join("cells");
    fs::create_dir_all(&dir)?;
    let logs: Vec<TrainingLog> = cells
        .par_iter()
        .map(|c| train_cell(cfg, c).with_context(|| format!("cell {}", c.index)))
        .collect::<Result<_>>()?;

    let mut summary = RunSummary::default();
    let path = cfg.out_dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(SUMMARY_HEADER)?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for (cell, log) in cells.iter().zip(&logs) {
        let name = format!("cell_{:03}.csv", cell.index);
        let file = dir.join(&name);
        let mut cw = create(&file)?;
        log.write_csv(&mut cw)?;
        cw.flush()?;
        let side = write_sidecar(cfg, cell, &file, &[&file])?;
        summary.files.extend([file, side]);
        w.write_record([
            cell.index.to_string(),
            cell.network.depth.to_string(),
            cell.network.width.to_string(),
            cell.tau_mode.to_string(),
            cell.network.tau.to_string(),
            cfg.seed.wrapping_add(cell.index as u64).to_string(),
            log.initial_loss.to_string(),
            log.final_loss().to_string(),
            log.final_record().step.to_string(),
            opt(log.reached_target_at),
            opt(log.diverged_at),
            format!("cells/{name}"),
        ])?;
    }
    w.flush()?;
    drop(w);
    let side = write_sidecar(cfg, &base_cell(cfg)?, &path, &[&path])?;
    summary.files.extend([path, side]);
    Ok(summary)
}
