mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use intercept::dataset::{build_dataset, export_csv, read_dataset, write_dataset, Dataset};
use intercept::guidance::{LawKind, MpcConfig};
use intercept::maneuver::generate_flights;
use intercept::predictor::train::train_with;
use intercept::predictor::{load_model, save_model, Architecture, EncoderDecoder, SizePreset};
use intercept::rng;
use intercept::sim::{monte_carlo, run_engagement, write_summary, RunSummary, SummaryFile, SUMMARY_FORMAT};

use config::RunConfig;

/// Exit code when a guidance law fails on more than 10% of Monte-Carlo runs.
const EXIT_UNRELIABLE: u8 = 2;

#[derive(Parser)]
#[command(name = "intercept", version, about = "Missile-target interception lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate target flights and build the windowed dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        flights: Option<usize>,
        /// Also export the dataset as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Train a predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long)]
        size: Option<SizePreset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a trained predictor on the test partition.
    EvalPredictor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fly single engagements on the benchmark scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated laws: pn, apn, nmpc (unknown accelerations), nmpc-tap.
        #[arg(long, value_delimiter = ',')]
        law: Vec<LawKind>,
        /// Prediction horizon (the control horizon is set equal).
        #[arg(long)]
        np: Option<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Paired-seed Monte-Carlo batch.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        np: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        laws: Vec<LawKind>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        noise: Option<f64>,
        /// Draw a random maneuver script per run instead of the benchmark one.
        #[arg(long)]
        randomize_maneuver: bool,
    },
}

fn setup(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_predictor(path: Option<&Path>) -> Result<Option<Arc<EncoderDecoder>>> {
    path.map(|p| load_model(p).with_context(|| format!("reading model {}", p.display())).map(Arc::new)).transpose()
}

fn gen_data(mut cfg: RunConfig, flights: Option<usize>, csv: bool) -> Result<()> {
    if let Some(n) = flights {
        cfg.data.flights = n;
    }
    cfg.data.csv |= csv;
    cfg.data.dataset.seed = cfg.seed;
    cfg.echo("gen-data")?;
    let t0 = Instant::now();
    let d = &cfg.data;
    let trajectories = generate_flights(d.flights, &d.limits, d.duration_s, d.dt, cfg.seed, cfg.mc.exec)?;
    let ds = build_dataset(&trajectories, &d.dataset, &mut rng::stream(cfg.seed, 1))?;
    let path = cfg.output_dir.join("dataset.icds");
    write_dataset(&ds, &path)?;
    if d.csv {
        export_csv(&ds, &cfg.output_dir.join("dataset.csv"))?;
    }
    let labels: Vec<f64> = ds.train.iter().flat_map(|s| s.future_accel.iter().copied()).collect();
    let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
    println!("flights          {}", d.flights);
    println!("windows          train {} / val {} / test {}", ds.train.len(), ds.val.len(), ds.test.len());
    println!("feature min      {:?}", ds.scaler.min);
    println!("feature max      {:?}", ds.scaler.max);
    println!("label mean       {mean:.4}");
    println!("written          {} ({:.1} s)", path.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    format: &'static str,
    arch: Architecture,
    size: SizePreset,
    hidden: usize,
    epochs: usize,
    best_epoch: usize,
    best_val_mse: f64,
    test_mse: f64,
    test_class_accuracy: Option<f64>,
}

fn model_stem(arch: Architecture, size: SizePreset) -> String {
    format!("{}-{}", arch.name(), format!("{size:?}").to_lowercase())
}

fn train_cmd(
    mut cfg: RunConfig,
    arch: Option<Architecture>,
    size: Option<SizePreset>,
    epochs: Option<usize>,
    dataset: Option<PathBuf>,
) -> Result<()> {
    if let Some(a) = arch {
        cfg.train.arch = a;
    }
    if let Some(s) = size {
        cfg.train.size = s;
    }
    if let Some(e) = epochs {
        cfg.train.optimizer.epochs = e;
    }
    if dataset.is_some() {
        cfg.train.dataset = dataset;
    }
    cfg.train.optimizer.seed = cfg.seed;
    cfg.echo("train")?;
    let ds = load_dataset(&cfg.dataset_path())?;
    let t = &cfg.train;
    let mut model = EncoderDecoder::new(
        t.arch,
        t.size.hidden(),
        ds.window.clone(),
        ds.scaler.clone(),
        ds.accel,
        &mut rng::stream(cfg.seed, 2),
    );
    model.recurrent_dropout = t.recurrent_dropout;
    model.dense_dropout = t.dense_dropout;
    let t0 = Instant::now();
    let report = train_with(&mut model, &ds, &t.optimizer, |r| {
        eprintln!(
            "epoch {:4}  train {:.5}  val {:.5}  ({:.0} s)",
            r.epoch,
            r.train_mse,
            r.val_mse,
            t0.elapsed().as_secs_f64()
        );
    })?;
    let stem = model_stem(t.arch, t.size);
    save_model(&model, &cfg.output_dir.join(format!("{stem}.icm")))?;
    report.write_csv(&cfg.output_dir.join(format!("{stem}.loss.csv")), t.arch == Architecture::MLstm)?;
    let (test_mse, acc) = model.evaluate(&ds.test);
    let summary = TrainSummary {
        format: "intercept-train/1",
        arch: t.arch,
        size: t.size,
        hidden: model.hidden(),
        epochs: t.optimizer.epochs,
        best_epoch: report.best_epoch,
        best_val_mse: report.best_val_mse,
        test_mse,
        test_class_accuracy: acc,
    };
    write_json(&cfg.output_dir.join(format!("{stem}.report.json")), &summary)?;
    println!("{stem}: best epoch {} val {:.5} test {:.5}", report.best_epoch, report.best_val_mse, test_mse);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    format: &'static str,
    model: PathBuf,
    dataset: PathBuf,
    n_test: usize,
    test_mse: f64,
    test_class_accuracy: Option<f64>,
    /// MSE at each forecast step.
    per_step_mse: Vec<f64>,
}

fn eval_cmd(cfg: RunConfig, model: PathBuf, dataset: Option<PathBuf>) -> Result<()> {
    let ds_path = dataset.unwrap_or_else(|| cfg.dataset_path());
    let ds = load_dataset(&ds_path)?;
    let m = load_model(&model).with_context(|| format!("reading model {}", model.display()))?;
    if m.window != ds.window {
        bail!("model window {:?} does not match dataset window {:?}", m.window, ds.window);
    }
    let (test_mse, acc) = m.evaluate(&ds.test);
    let per_step_mse = m.per_step_mse(&ds.test);
    let summary = EvalSummary {
        format: "intercept-eval/1",
        model,
        dataset: ds_path,
        n_test: ds.test.len(),
        test_mse,
        test_class_accuracy: acc,
        per_step_mse,
    };
    write_json(&cfg.output_dir.join("eval.json"), &summary)?;
    println!("test mse {test_mse:.5}");
    if let Some(a) = acc {
        println!("maneuver class accuracy {a:.3}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SimMetrics {
    law: LawKind,
    n_p: usize,
    miss_distance: f64,
    interception_time: f64,
    air: f64,
    termination: intercept::sim::Termination,
    steps: usize,
    max_abs_u: f64,
    max_abs_du: f64,
    qp_failures: usize,
    qp_iterations_total: usize,
    qp_iterations_max: usize,
}

#[derive(Serialize)]
struct SimFile {
    format: &'static str,
    seed: u64,
    runs: Vec<SimMetrics>,
}

fn apply_horizon(cfg: &mut RunConfig, np: Option<usize>) {
    if let Some(n) = np {
        let keep = cfg.sim.guidance.mpc.clone();
        cfg.sim.guidance.mpc = MpcConfig { n_p: n, n_c: n, ..keep };
    }
}

fn simulate_cmd(
    mut cfg: RunConfig,
    laws: Vec<LawKind>,
    np: Option<usize>,
    model: Option<PathBuf>,
    noise: Option<f64>,
) -> Result<()> {
    if !laws.is_empty() {
        cfg.sim.laws = laws;
    }
    apply_horizon(&mut cfg, np);
    if model.is_some() {
        cfg.sim.model = model;
    }
    if let Some(n) = noise {
        cfg.sim.noise = n;
    }
    if cfg.sim.laws.contains(&LawKind::NmpcTap) && cfg.sim.model.is_none() {
        bail!("nmpc-tap needs --model");
    }
    cfg.echo("simulate")?;
    let predictor = load_predictor(cfg.sim.model.as_deref())?;
    let scenario = cfg.sim.scenario(cfg.seed);
    let mut runs = Vec::new();
    for &law in &cfg.sim.laws {
        let rec = run_engagement(&scenario, law, &cfg.sim.guidance, predictor.clone())
            .with_context(|| format!("{} engagement", law.name()))?;
        rec.write_csv(&cfg.output_dir.join(format!("sim-{}.csv", law.name())))?;
        let s = RunSummary::from(&rec);
        println!(
            "{:13} miss {:8.3} m  t {:5.2} s  AIR {:6.3}  {:?}",
            law.name(),
            rec.miss_distance,
            rec.interception_time,
            s.air,
            rec.termination
        );
        runs.push(SimMetrics {
            law,
            n_p: cfg.sim.guidance.mpc.n_p,
            miss_distance: rec.miss_distance,
            interception_time: rec.interception_time,
            air: s.air,
            termination: rec.termination,
            steps: rec.steps.len(),
            max_abs_u: s.max_abs_u,
            max_abs_du: s.max_abs_du,
            qp_failures: rec.qp_failures,
            qp_iterations_total: rec.steps.iter().map(|x| x.qp_iterations).sum(),
            qp_iterations_max: rec.steps.iter().map(|x| x.qp_iterations).max().unwrap_or(0),
        });
    }
    write_json(&cfg.output_dir.join("sim-metrics.json"), &SimFile { format: "intercept-sim/1", seed: cfg.seed, runs })?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn montecarlo_cmd(
    mut cfg: RunConfig,
    runs: Option<usize>,
    np: Vec<usize>,
    laws: Vec<LawKind>,
    model: Option<PathBuf>,
    noise: Option<f64>,
    randomize: bool,
) -> Result<bool> {
    if let Some(n) = runs {
        cfg.mc.n_runs = n;
    }
    if !np.is_empty() {
        cfg.mc.horizons = np;
    }
    if !laws.is_empty() {
        cfg.mc.laws = laws;
    }
    if model.is_some() {
        cfg.sim.model = model;
    }
    if let Some(n) = noise {
        cfg.sim.noise = n;
    }
    cfg.mc.randomize_maneuver |= randomize;
    cfg.mc.base_seed = cfg.seed;
    cfg.echo("montecarlo")?;
    let predictor = load_predictor(cfg.sim.model.as_deref())?;
    let template = cfg.sim.scenario(cfg.seed);
    let t0 = Instant::now();
    let summaries = monte_carlo(&template, &cfg.sim.guidance, &cfg.mc, predictor)?;
    eprintln!("{} runs per cell in {:.1} s", cfg.mc.n_runs, t0.elapsed().as_secs_f64());

    let mut table = String::from("law,n_p,md_mean,md_std,it_mean,air,n_runs,n_failed\n");
    println!("{:13} {:>4} {:>9} {:>9} {:>7} {:>7} {:>7}", "law", "N_p", "MD_mean", "MD_STD", "IT", "AIR", "failed");
    let mut reliable = true;
    for s in &summaries {
        let np = if s.law.is_predictive() { s.n_p.to_string() } else { "-".into() };
        println!(
            "{:13} {:>4} {:>9.3} {:>9.3} {:>7.3} {:>7.3} {:>4}/{}",
            s.law.name(),
            np,
            s.md_mean,
            s.md_std,
            s.it_mean,
            s.air,
            s.n_failed,
            s.n_runs
        );
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.law.name(),
            np,
            s.md_mean,
            s.md_std,
            s.it_mean,
            s.air,
            s.n_runs,
            s.n_failed
        ));
        if s.n_failed * 10 > s.n_runs {
            eprintln!("{} (N_p {}) failed {} of {} runs", s.law.name(), s.n_p, s.n_failed, s.n_runs);
            reliable = false;
        }
    }
    std::fs::write(cfg.output_dir.join("mc-table.csv"), table)?;
    let file = SummaryFile {
        format: SUMMARY_FORMAT.into(),
        scenario: template,
        law_config: cfg.sim.guidance.clone(),
        mc: cfg.mc.clone(),
        summaries,
    };
    write_summary(&cfg.output_dir.join("mc-summary.json"), &file)?;
    Ok(reliable)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common, flights, csv } => gen_data(setup(&common)?, flights, csv)?,
        Command::Train { common, arch, size, epochs, dataset } => train_cmd(setup(&common)?, arch, size, epochs, dataset)?,
        Command::EvalPredictor { common, model, dataset } => eval_cmd(setup(&common)?, model, dataset)?,
        Command::Simulate { common, law, np, model, noise } => simulate_cmd(setup(&common)?, law, np, model, noise)?,
        Command::Montecarlo { common, runs, np, laws, model, noise, randomize_maneuver } => {
            if !montecarlo_cmd(setup(&common)?, runs, np, laws, model, noise, randomize_maneuver)? {
                return Ok(ExitCode::from(EXIT_UNRELIABLE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
