//! `twtoa`: campaigns, single estimates, CRLB and flop models for two-way TOA
//! localization and synchronization.

mod input;
mod output;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use twtoa::analysis::{flops_cftwlas, flops_iterative_per_iter};
use twtoa::montecarlo::{
    run_campaign_with_threads, run_inputs, timing_report, CampaignConfig, CampaignStats, FULL_RUNS,
};
use twtoa::scenario::build_square_scenario;
use twtoa::{estimate, EstimatorOptions};

use input::{MeasurementFile, SigmaSpec, TruthFile};

#[derive(Parser)]
#[command(name = "twtoa", version, about = "Two-way TOA localization and synchronization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo campaign and emit CSV rows plus an optional JSON summary.
    Simulate(SimulateArgs),
    /// Estimate one UD state from a measurement file.
    Estimate(EstimateArgs),
    /// Evaluate the CRLB at the `truth` of a scenario file.
    Crlb {
        #[arg(long)]
        input: PathBuf,
    },
    /// Print the flop models of the closed-form estimator and of one Gauss-Newton iteration.
    Flops {
        #[arg(long, default_value_t = 2)]
        dims: u64,
        #[arg(long, default_value_t = 8)]
        anchors: u64,
    },
    /// Write a measurement file for one run of a campaign configuration.
    Synth(SynthArgs),
    /// Time the closed-form estimator against fixed-iteration Gauss-Newton.
    Timing(TimingArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Campaign configuration (JSON).
    #[arg(long, conflicts_with_all = ["paper_defaults", "anchor_ablation"])]
    config: Option<PathBuf>,
    /// Default protocol: 8 ANs, SNR 10-50 dB, closed form and Gauss-Newton (50 m, 200 m).
    #[arg(long, conflicts_with = "anchor_ablation")]
    paper_defaults: bool,
    /// Anchor-count protocol: 4/5/8 ANs at 30 dB, closed form, 10 000 runs.
    #[arg(long)]
    anchor_ablation: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<CampaignConfig> {
        let mut cfg = match (&self.config, self.paper_defaults, self.anchor_ablation) {
            (Some(path), _, _) => load_config(path)?,
            (None, true, _) => CampaignConfig::paper_defaults(),
            (None, false, true) => CampaignConfig::anchor_ablation(),
            (None, false, false) => bail!("give one of --config FILE, --paper-defaults or --anchor-ablation"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Override the run count per cell.
    #[arg(long, conflicts_with = "full")]
    runs: Option<usize>,
    /// Use the full 10 000 runs per cell.
    #[arg(long)]
    full: bool,
    /// Replace the SNR sweep by a single noise-free cell.
    #[arg(long)]
    noise_free: bool,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON summary destination.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Fill the `wall_s` column. Makes the output run-dependent.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Zero-based index of the differencing reference anchor.
    #[arg(long, default_value_t = 0)]
    reference: usize,
    #[arg(long, default_value_t = 1)]
    refine_steps: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Anchor layout (defaults to the first in the configuration).
    #[arg(long)]
    an_count: Option<usize>,
    /// SNR in dB (defaults to the first in the configuration).
    #[arg(long, conflicts_with = "noise_free")]
    snr_db: Option<f64>,
    #[arg(long)]
    noise_free: bool,
    /// Run index within the campaign.
    #[arg(long, default_value_t = 0)]
    run: u64,
    /// Destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long)]
    runs: Option<usize>,
    /// Fixed Gauss-Newton iteration counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = [3, 5])]
    iterations: Vec<usize>,
}

fn load_config(path: &Path) -> Result<CampaignConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let cfg: CampaignConfig =
        serde_json::from_str(&text).with_context(|| format!("invalid configuration {}", path.display()))?;
    Ok(cfg)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    #[serde(flatten)]
    stats: &'a CampaignStats,
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = args.source.resolve()?;
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if args.full {
        cfg.runs = FULL_RUNS;
    }
    if args.noise_free {
        cfg.noise_free = true;
    }
    cfg.record_timing |= args.timing;
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let stats = run_campaign_with_threads(&cfg, threads)?;

    let mut out = sink(args.csv.as_deref())?;
    output::write_csv(&stats, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.json {
        write_json(&Summary { seed: cfg.seed, stats: &stats }, Some(path))?;
    }
    Ok(())
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let file = MeasurementFile::load(&args.input)?;
    let anchors = file.anchors()?;
    let meas = file.measurements(&anchors)?;
    let noise = file.noise(&anchors)?;
    let truth = file.truth_state()?;
    let opts = EstimatorOptions { reference: args.reference, refine_steps: args.refine_steps };
    let report = estimate(&meas, &anchors, &noise, &opts)?;
    write_json(&output::EstimateOut::new(&report, truth.as_ref()), None)
}

fn run_crlb(input: &Path) -> Result<()> {
    let file = MeasurementFile::load(input)?;
    let anchors = file.anchors()?;
    let truth = file.truth_state()?.context("missing field `truth`")?;
    let noise = file.noise(&anchors)?;
    write_json(&output::crlb_out(&truth, &anchors, &noise)?, None)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.source.resolve()?;
    cfg.validate()?;
    let an_count = args.an_count.unwrap_or(cfg.an_counts[0]);
    let anchors = build_square_scenario(cfg.side_len_m, an_count)?;
    let snr = if args.noise_free || (cfg.noise_free && args.snr_db.is_none()) {
        None
    } else {
        Some(args.snr_db.or(cfg.snr_db.first().copied()).context("no SNR given")?)
    };
    let x = run_inputs(&cfg, &anchors, snr, args.run)?;
    let file = MeasurementFile {
        anchors_m: anchors.positions().iter().map(|q| q.as_slice().to_vec()).collect(),
        schedule_s: Some(anchors.schedule().to_vec()),
        rho_m: Some(x.meas.rho.clone()),
        tau_m: Some(x.meas.tau.clone()),
        sigma_req_m: Some(SigmaSpec::PerAnchor(x.noise.sigma_req.clone())),
        sigma_resp_m: Some(x.noise.sigma_resp),
        snr_db: None,
        truth: Some(TruthFile::from_state(&x.truth)),
    };
    write_json(&file, args.output.as_deref())
}

fn timing(args: &TimingArgs) -> Result<()> {
    let mut cfg = args.source.resolve()?;
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    write_json(&timing_report(&cfg, &args.iterations)?, None)
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Estimate(args) => run_estimate(args),
        Command::Crlb { input } => run_crlb(input),
        Command::Flops { dims, anchors } => {
            if *dims < 1 || *anchors < dims + 2 {
                bail!("flop models need dims >= 1 and anchors >= dims + 2");
            }
            println!("cftwlas {}", flops_cftwlas(*dims, *anchors));
            println!("iterative_per_iter {}", flops_iterative_per_iter(*dims, *anchors));
            Ok(())
        }
        Command::Synth(args) => synth(args),
        Command::Timing(args) => timing(args),
    }
}
