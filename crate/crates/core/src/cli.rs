// SPDX-License-Identifier: Apache-2.0

//! Command-line front end. `main.rs` only forwards to [`main_from_env`].

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::calibration::{read_profile_csv, Calibration};
use crate::error::{Error, Result};
use crate::latency::TileConfig;
use crate::metrics::{self, MetricsReport};
use crate::power::PowerParams;
use crate::scenario::{Scenario, SweepOutcome};
use crate::types::FrequencyLadder;
use crate::workload::{generate_in, summarize, write_trace, WorkloadSpec};

const ABOUT: &str =
    "Simulate prefill/decode-disaggregated LLM serving under SLO-aware GPU frequency control.";

const LONG_ABOUT: &str = "\
Simulate prefill/decode-disaggregated LLM serving under SLO-aware GPU frequency control.

Reproducibility: every subcommand is deterministic. A run is fully determined by
the config file, the calibration it references and the seed. --seed replaces both
the workload seed and the execution-noise seed from the config; identical inputs
produce byte-identical outputs regardless of --jobs.

Environment: PDSIM_OUT and PDSIM_JOBS may stand in for --out and --jobs. No other
setting can be changed from the environment.";

#[derive(Debug, Parser)]
#[command(name = "pdsim", version, about = ABOUT, long_about = LONG_ABOUT)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario; writes report.json and report_timeseries.csv.
    Simulate(RunArgs),
    /// Run every sweep level as a static frequency; writes energy_vs_freq.csv.
    Sweep(RunArgs),
    /// Run static-min, static-max, adaptive+round-robin and adaptive+state-space
    /// on one workload; writes comparison.csv.
    Compare(RunArgs),
    /// Fit a calibration file from profiling samples.
    Fit(FitArgs),
    /// Generate a JSONL request trace from a workload spec.
    GenWorkload(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, env = "PDSIM_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the workload and noise seeds in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum simulations run in parallel.
    #[arg(long, env = "PDSIM_JOBS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Profile CSV with header phase,freq_mhz,n_bt,n_req,n_kv,latency_ms.
    #[arg(long)]
    pub profile: PathBuf,
    /// Ladder JSON: either a list of MHz values or an object with `ladder`
    /// and optional `tile` and `power`.
    #[arg(long)]
    pub ladder: PathBuf,
    /// Calibration file to write.
    #[arg(long, env = "PDSIM_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Workload spec (JSON), or a scenario config whose workload is used.
    #[arg(long)]
    pub config: PathBuf,
    /// Trace file to write (JSONL).
    #[arg(long, env = "PDSIM_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

pub fn main_from_env() -> ExitCode {
    main_with(std::env::args_os())
}

/// Parses `args` (including the program name) and runs the command.
/// Exit codes: 0 success, 2 usage or validation error, 1 anything else.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. } | Error::Config(_) | Error::Ingest { .. } | Error::Json { .. } => {
            2
        }
        _ => 1,
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::Fit(a) => fit(a),
        Command::GenWorkload(a) => gen_workload(a),
    }
}

fn load_scenario(args: &RunArgs) -> Result<Scenario> {
    let s = Scenario::load(&args.config)?;
    Ok(match args.seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_text(&dir.join(format!("{stem}.json")), &metrics::to_json(report))?;
    let ts = dir.join(format!("{stem}_timeseries.csv"));
    metrics::write_time_series_csv(create(&ts)?, report).map_err(|e| csv_err(&ts, e))
}

fn print_row(name: &str, r: &MetricsReport) {
    println!(
        "{name:<24} tsar={:>6.2}% isar={:>6.2}% energy={:>12.1} J (prefill {:.1}, decode {:.1}) tput={:.1} tok/s",
        r.tsar * 100.0,
        r.isar * 100.0,
        r.energy.total_j,
        r.energy.prefill_j,
        r.energy.decode_j,
        r.throughput_tps,
    );
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn simulate(args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let outcome = scenario.run()?;
    ensure_dir(&args.out)?;
    write_report(&args.out, "report", &outcome.report)?;
    print_row("simulate", &outcome.report);
    Ok(())
}

pub const SWEEP_HEADER: &str =
    "freq_mhz,energy_j,prefill_energy_j,decode_energy_j,tsar,isar,horizon_ms";

pub fn write_sweep_csv<W: Write>(w: W, sweep: &SweepOutcome) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SWEEP_HEADER.split(','))?;
    for p in &sweep.points {
        wtr.write_record([
            p.freq_mhz.to_string(),
            format!("{:.3}", p.energy_j),
            format!("{:.3}", p.prefill_energy_j),
            format!("{:.3}", p.decode_energy_j),
            format!("{:.6}", p.tsar),
            format!("{:.6}", p.isar),
            format!("{:.3}", p.horizon_ms),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let outcome = scenario.sweep(args.jobs as usize)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("energy_vs_freq.csv");
    write_sweep_csv(create(&path)?, &outcome).map_err(|e| csv_err(&path, e))?;
    let json = serde_json::to_string_pretty(&outcome).expect("sweep serializes");
    write_text(&args.out.join("sweep.json"), &json)?;
    for p in &outcome.points {
        println!(
            "{:>5} MHz  energy={:>12.1} J  tsar={:>6.2}%  isar={:>6.2}%",
            p.freq_mhz,
            p.energy_j,
            p.tsar * 100.0,
            p.isar * 100.0
        );
    }
    match outcome.min_freq_mhz {
        Some(f) => println!("minimum at {f} MHz, interior: {}", outcome.interior_minimum),
        None => println!("no unique minimum, interior: false"),
    }
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let scenario = load_scenario(args)?;
    let outcome = scenario.compare(args.jobs as usize)?;
    ensure_dir(&args.out)?;
    let rows: Vec<(String, &MetricsReport)> = outcome
        .arms
        .iter()
        .map(|(n, o)| (n.clone(), &o.report))
        .collect();
    let path = args.out.join("comparison.csv");
    metrics::write_summary_csv(create(&path)?, &rows).map_err(|e| csv_err(&path, e))?;
    for (name, o) in &outcome.arms {
        write_report(&args.out, &format!("report_{name}"), &o.report)?;
        print_row(name, &o.report);
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LadderFile {
    Bare(FrequencyLadder),
    Full {
        ladder: FrequencyLadder,
        #[serde(default)]
        tile: TileConfig,
        #[serde(default)]
        power: Option<PowerParams>,
    },
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    refuse_overwrite(&args.out, args.force)?;
    let text = fs::read_to_string(&args.ladder).map_err(|e| Error::io(&args.ladder, e))?;
    let spec: LadderFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(args.ladder.display().to_string(), e))?;
    let (ladder, tile, power) = match spec {
        LadderFile::Bare(l) => (l, TileConfig::default(), None),
        LadderFile::Full {
            ladder,
            tile,
            power,
        } => (ladder, tile, power),
    };
    tile.validate()?;
    let power = power.unwrap_or_else(|| Calibration::default().power);
    power.validate()?;
    let samples = read_profile_csv(&args.profile)?;
    let (cal, warnings) = Calibration::fit(&samples, &ladder, &tile, power)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    cal.save(&args.out)?;
    for f in ladder.levels() {
        let mae = cal
            .ttft
            .mae(*f)
            .map_or("n/a".into(), |m| format!("{m:.3} ms"));
        println!("{f:>5} MHz  ttft residual MAE {mae}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn gen_workload(args: &GenArgs) -> Result<()> {
    refuse_overwrite(&args.out, args.force)?;
    let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let origin = args.config.display().to_string();
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(origin, e))?;
    // a full scenario config is accepted too; its workload section is used
    let (value, prefix) = match value.get_mut("workload") {
        Some(w) if w.is_object() => (w.take(), "workload."),
        _ => (value, ""),
    };
    let mut spec: WorkloadSpec = serde_path_to_error::deserialize(value)
        .map_err(|e| Error::validation(format!("{prefix}{}", e.path()), e.inner().to_string()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let requests = generate_in(&spec, base)?;
    write_trace(create(&args.out)?, &requests).map_err(|e| Error::io(&args.out, e))?;
    let s = summarize(&requests);
    println!(
        "requests={} input mean={:.2} std={:.2} output mean={:.2} std={:.2}",
        s.count, s.input_mean, s.input_std, s.output_mean, s.output_std
    );
    Ok(())
}
