use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tddc_cli::experiments as ex;
use tddc_cli::{CliError, ExperimentConfig};
use tddc_core::CalibrationKind;

#[derive(Parser)]
#[command(name = "tddc", version, about = "Time-domain resistance sensing simulator and decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the node for a number of cycles and emit trace, events and beacon log
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        r_ohm: f64,
        #[arg(long, default_value_t = 1)]
        cycles: usize,
        /// Output directory; the beacon log goes to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the configured resistance sweep
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Calibration file; a proportional self-fit is used when omitted
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component tolerance study
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Directory for trials.csv and error_quantiles.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a beacon log (hex) or count CSV into resistance estimates
    Estimate {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a calibration from a CSV with r_true_ohm and n_m columns
    Calibrate {
        input: PathBuf,
        #[arg(long, default_value = "proportional")]
        kind: CalibrationKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Capacitor sizing and resistance validity range
    Size {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_input(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate { common, r_ohm, cycles, out } => {
            let cfg = load_config(&common)?;
            let sim = ex::run_simulation(&cfg, r_ohm, cycles)?;
            match &out {
                Some(dir) => sim.write_dir(dir)?,
                None => {
                    let mut w = BufWriter::new(io::stdout().lock());
                    sim.write_log(&mut w)?;
                    w.flush()?;
                }
            }
            eprintln!(
                "beacons={} delivered={} n_m={} n_h={}",
                sim.run.beacons.len(),
                sim.delivered.len(),
                sim.run.counters.n_m,
                sim.run.counters.n_h
            );
            if let Some(e) = sim.termination() {
                return Err(e);
            }
        }
        Cmd::Sweep { common, calibration, out } => {
            let cfg = load_config(&common)?;
            let cal = calibration.as_deref().map(ex::load_calibration).transpose()?;
            let res = ex::run_sweep(&cfg.node, &cfg.decode, &cfg.sweep, cal.as_ref())?;
            let mut w = sink(&out)?;
            ex::write_sweep_csv(&res.rows, &mut w)?;
            w.flush()?;
            if let Some(c) = res.calibration {
                eprintln!("slope={} r_squared={}", c.slope, c.r_squared);
            }
        }
        Cmd::Montecarlo { common, trials, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = trials {
                cfg.montecarlo.n_trials = n;
                cfg.validate()?;
            }
            let s = ex::run_montecarlo(&cfg)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
                ex::write_trials_csv(&s, BufWriter::new(fs::File::create(dir.join("trials.csv"))?))?;
                ex::write_quantiles_csv(
                    &s,
                    BufWriter::new(fs::File::create(dir.join("error_quantiles.csv"))?),
                )?;
            }
            print!("{}", ex::montecarlo_summary_text(&s));
        }
        Cmd::Estimate { common, input, calibration, out } => {
            let cfg = load_config(&common)?;
            let cal = calibration.as_deref().map(ex::load_calibration).transpose()?;
            let text = read_input(&input)?;
            let res = ex::run_estimate(&text, &cfg, cal.as_ref())?;
            for d in &res.diagnostics {
                eprintln!("line {}: {}", d.line, d.message);
            }
            let mut w = sink(&out)?;
            ex::write_estimates(&res, &mut w)?;
            w.flush()?;
            eprintln!(
                "reports={} rejected={} duplicates={}",
                res.reports.len(),
                res.rejected,
                res.duplicates
            );
            if res.reports.is_empty() && res.rejected > 0 {
                eprintln!("warning: every frame was rejected");
            }
        }
        Cmd::Calibrate { input, kind, out } => {
            let text = read_input(&input)?;
            let m = ex::run_calibrate(text.as_bytes(), kind)?;
            let mut w = sink(&out)?;
            w.write_all(m.to_kv_string().as_bytes())?;
            w.flush()?;
        }
        Cmd::Size { common, out } => {
            let cfg = load_config(&common)?;
            let s = ex::run_size(&cfg)?;
            let mut w = sink(&out)?;
            ex::write_size_csv(&s, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tddc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
