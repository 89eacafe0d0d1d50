//! Sweep, Monte Carlo, simulation, estimation, calibration and sizing runs.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tddc_core::node::{RunStatus, SimRun};
use tddc_core::station::write_reports_csv;
use tddc_core::wire::{write_log, FRAME_LEN};
use tddc_core::{
    channel_pass, fit_calibration, ingest_csv, ingest_log, measurement_energy,
    min_storage_capacitance, resistance_from_count, run_cycles, run_measurement, validity_range,
    CalibrationKind, CalibrationModel, IngestOutcome, NodeError, NodeParams,
};

use crate::{CliError, ExperimentConfig};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for `index` within `stream`, derived from the master seed.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ splitmix64(index)))
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r_true: f64,
    /// `None` when the discharge stalled.
    pub n_m: Option<u64>,
    pub r_est_model: Option<f64>,
    pub r_est_calibrated: Option<f64>,
}

impl SweepRow {
    pub fn stalled(&self) -> bool {
        self.n_m.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// The calibration used for the calibrated column, if any.
    pub calibration: Option<CalibrationModel>,
}

/// Measures every resistance in `r_values`. Without an explicit calibration
/// a proportional fit over the non-stalled rows is used.
pub fn run_sweep(
    node: &NodeParams,
    decode: &tddc_core::DecodeParams,
    r_values: &[f64],
    calibration: Option<&CalibrationModel>,
) -> Result<SweepResult, CliError> {
    let mut rows = Vec::with_capacity(r_values.len());
    for &r in r_values {
        match run_measurement(node, r) {
            Ok(m) => rows.push(SweepRow {
                r_true: r,
                n_m: Some(m.n_m.count),
                r_est_model: Some(resistance_from_count(m.n_m.count, decode)),
                r_est_calibrated: None,
            }),
            Err(NodeError::Stall { .. }) => rows.push(SweepRow {
                r_true: r,
                n_m: None,
                r_est_model: None,
                r_est_calibrated: None,
            }),
            Err(e) => return Err(e.into()),
        }
    }
    let calibration = match calibration {
        Some(c) => Some(*c),
        None => {
            let pts = calibration_points(&rows);
            fit_calibration(&pts, CalibrationKind::Proportional).ok()
        }
    };
    if let Some(cal) = &calibration {
        for row in &mut rows {
            row.r_est_calibrated = row
                .n_m
                .map(|n| tddc_core::apply_calibration(cal, n as f64));
        }
    }
    Ok(SweepResult { rows, calibration })
}

fn calibration_points(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| r.n_m.map(|n| (r.r_true, n as f64)))
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns `r_true_ohm,n_m,r_est_model_ohm,r_est_calibrated_ohm,stalled`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["r_true_ohm", "n_m", "r_est_model_ohm", "r_est_calibrated_ohm", "stalled"])?;
    for r in rows {
        out.write_record([
            r.r_true.to_string(),
            opt(r.n_m),
            opt(r.r_est_model),
            opt(r.r_est_calibrated),
            r.stalled().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------- monte carlo

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub c_stor: f64,
    pub v_h: f64,
    pub v_l_r: f64,
    pub f_clk: f64,
    pub r_gpio: f64,
    /// Proportional count-per-ohm slope; `None` if every point stalled.
    pub slope: Option<f64>,
    /// Model-decoded relative error per sweep point, `None` on stall.
    pub rel_errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorQuantiles {
    pub r_true: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub trials: Vec<TrialResult>,
    pub slope_samples: Vec<f64>,
    pub slope_min: f64,
    pub slope_max: f64,
    pub slope_mean: f64,
    pub error_quantiles: Vec<ErrorQuantiles>,
}

impl MonteCarloSummary {
    pub fn slope_interval_contains(&self, slope: f64) -> bool {
        self.slope_min <= slope && slope <= self.slope_max
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn run_trial(cfg: &ExperimentConfig, index: usize) -> Result<TrialResult, CliError> {
    let mc = &cfg.montecarlo;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2, index as u64));
    let mut node = cfg.node.clone();
    let e = &mut node.electrical;
    e.c_stor *= 1.0 + uniform(&mut rng, -mc.c_tol, mc.c_tol);
    e.v_h += uniform(&mut rng, -mc.v_thresh_tol, mc.v_thresh_tol);
    e.v_l_r += uniform(&mut rng, -mc.v_thresh_tol, mc.v_thresh_tol);
    e.r_gpio = uniform(&mut rng, mc.r_gpio_range.0, mc.r_gpio_range.1);
    node.f_clk_error = uniform(&mut rng, -mc.clk_tol, mc.clk_tol);
    let node = node.with_default_send_energy();

    let mut pts = Vec::with_capacity(cfg.sweep.len());
    let mut rel_errors = Vec::with_capacity(cfg.sweep.len());
    for &r in &cfg.sweep {
        match run_measurement(&node, r) {
            Ok(m) => {
                pts.push((r, m.n_m.count as f64));
                let est = resistance_from_count(m.n_m.count, &cfg.decode);
                rel_errors.push(Some((est - r) / r));
            }
            Err(NodeError::Stall { .. }) => rel_errors.push(None),
            Err(e) => return Err(e.into()),
        }
    }
    let slope = fit_calibration(&pts, CalibrationKind::Proportional)
        .ok()
        .map(|m| m.slope);
    Ok(TrialResult {
        index,
        c_stor: node.electrical.c_stor,
        v_h: node.electrical.v_h,
        v_l_r: node.electrical.v_l_r,
        f_clk: node.f_clk_actual(),
        r_gpio: node.electrical.r_gpio,
        slope,
        rel_errors,
    })
}

/// Tolerance study: each trial draws component values uniformly within the
/// configured tolerances, sweeps the configured resistances and fits a
/// proportional slope. Results depend only on the seed, not on thread count.
pub fn run_montecarlo(cfg: &ExperimentConfig) -> Result<MonteCarloSummary, CliError> {
    let trials = (0..cfg.montecarlo.n_trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    let slope_samples: Vec<f64> = trials.iter().filter_map(|t| t.slope).collect();
    if slope_samples.is_empty() {
        return Err(CliError::Physics("every Monte Carlo trial stalled".into()));
    }
    let slope_min = slope_samples.iter().copied().fold(f64::INFINITY, f64::min);
    let slope_max = slope_samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slope_mean = slope_samples.iter().sum::<f64>() / slope_samples.len() as f64;
    let error_quantiles = cfg
        .sweep
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let mut errs: Vec<f64> = trials.iter().filter_map(|t| t.rel_errors[k]).collect();
            errs.sort_by(f64::total_cmp);
            ErrorQuantiles {
                r_true: r,
                q05: quantile(&errs, 0.05),
                q50: quantile(&errs, 0.50),
                q95: quantile(&errs, 0.95),
            }
        })
        .collect();
    Ok(MonteCarloSummary {
        trials,
        slope_samples,
        slope_min,
        slope_max,
        slope_mean,
        error_quantiles,
    })
}

/// Columns `trial,c_stor_f,v_h_v,v_l_r_v,f_clk_hz,r_gpio_ohm,slope_per_ohm`.
pub fn write_trials_csv<W: Write>(s: &MonteCarloSummary, w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["trial", "c_stor_f", "v_h_v", "v_l_r_v", "f_clk_hz", "r_gpio_ohm", "slope_per_ohm"])?;
    for t in &s.trials {
        out.write_record([
            t.index.to_string(),
            t.c_stor.to_string(),
            t.v_h.to_string(),
            t.v_l_r.to_string(),
            t.f_clk.to_string(),
            t.r_gpio.to_string(),
            opt(t.slope),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `r_true_ohm,rel_err_q05,rel_err_q50,rel_err_q95`.
pub fn write_quantiles_csv<W: Write>(s: &MonteCarloSummary, w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["r_true_ohm", "rel_err_q05", "rel_err_q50", "rel_err_q95"])?;
    for q in &s.error_quantiles {
        out.write_record([
            q.r_true.to_string(),
            q.q05.to_string(),
            q.q50.to_string(),
            q.q95.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn montecarlo_summary_text(s: &MonteCarloSummary) -> String {
    format!(
        "trials={}\nfitted={}\nslope_min={}\nslope_mean={}\nslope_max={}\n",
        s.trials.len(),
        s.slope_samples.len(),
        s.slope_min,
        s.slope_mean,
        s.slope_max
    )
}

// ----------------------------------------------------------- simulation

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub run: SimRun<f64>,
    /// Frames after the broadcast channel.
    pub delivered: Vec<[u8; FRAME_LEN]>,
}

pub fn run_simulation(cfg: &ExperimentConfig, r_m: f64, cycles: usize) -> Result<Simulation, CliError> {
    let run = run_cycles(&cfg.node, r_m, cycles, sub_seed(cfg.seed, 0, 0))?;
    let delivered = channel_pass(&run.frames, &cfg.channel, sub_seed(cfg.seed, 1, 0))?;
    Ok(Simulation { run, delivered })
}

impl Simulation {
    pub fn write_log<W: Write>(&self, w: W) -> Result<(), CliError> {
        write_log(w, &self.delivered)?;
        Ok(())
    }

    /// Writes `trace.csv`, `events.csv` and `beacons.log` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        self.run
            .trace
            .write_samples_csv(fs::File::create(dir.join("trace.csv"))?)?;
        self.run
            .trace
            .write_events_csv(fs::File::create(dir.join("events.csv"))?)?;
        self.write_log(std::io::BufWriter::new(fs::File::create(dir.join("beacons.log"))?))
    }

    /// Physics termination, if the run ended early.
    pub fn termination(&self) -> Option<CliError> {
        match self.run.status {
            RunStatus::Completed => None,
            RunStatus::Stalled => Some(CliError::Physics(
                "measurement stalled before reaching the lower threshold".into(),
            )),
            RunStatus::NoNetHarvest => Some(CliError::Physics(
                "harvested power does not exceed quiescent draw".into(),
            )),
        }
    }
}

// ------------------------------------------------------------- estimate

/// True when the first non-blank line looks like a CSV header.
pub fn looks_like_csv(text: &str) -> bool {
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .is_some_and(|l| l.starts_with("node_id"))
}

pub fn run_estimate(
    text: &str,
    cfg: &ExperimentConfig,
    calibration: Option<&CalibrationModel>,
) -> Result<IngestOutcome<f64>, CliError> {
    let out = if looks_like_csv(text) {
        ingest_csv(text.as_bytes(), &cfg.decode, calibration, cfg.margin)
    } else {
        ingest_log(text.as_bytes(), &cfg.decode, calibration, cfg.margin)
    };
    out.map_err(|e| CliError::Data(e.to_string()))
}

pub fn write_estimates<W: Write>(out: &IngestOutcome<f64>, w: W) -> Result<(), CliError> {
    write_reports_csv(&out.reports, w)?;
    Ok(())
}

pub fn load_calibration(path: &Path) -> Result<CalibrationModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(CalibrationModel::parse_kv(&text)?)
}

// ------------------------------------------------------------ calibrate

/// Reads `(r_true_ohm, n_m)` pairs from CSV. Extra columns are ignored and
/// rows with an empty `n_m` (stalled sweep points) are skipped.
pub fn read_calibration_points<R: Read>(input: R) -> Result<Vec<(f64, f64)>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("missing column '{name}'")))
    };
    let (c_r, c_n) = (col("r_true_ohm")?, col("n_m")?);
    let mut pts = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        if field(c_n).is_empty() {
            continue;
        }
        let parse = |c: usize, name: &str| {
            field(c)
                .parse::<f64>()
                .map_err(|_| CliError::Data(format!("line {}: bad {name} '{}'", i + 2, field(c))))
        };
        pts.push((parse(c_r, "r_true_ohm")?, parse(c_n, "n_m")?));
    }
    Ok(pts)
}

pub fn run_calibrate<R: Read>(input: R, kind: CalibrationKind) -> Result<CalibrationModel, CliError> {
    let pts = read_calibration_points(input)?;
    Ok(fit_calibration(&pts, kind)?)
}

// ----------------------------------------------------------------- size

#[derive(Debug, Clone, PartialEq)]
pub struct SizingReport {
    pub e_m: f64,
    pub e_act_send: f64,
    pub e_act_max: f64,
    pub c_stor_min: f64,
    pub slope: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub r_max_hard: f64,
}

pub fn run_size(cfg: &ExperimentConfig) -> Result<SizingReport, CliError> {
    let node = &cfg.node;
    let e = node.effective_electrical();
    let e_m = measurement_energy(&e);
    let e_act_max = cfg.e_act_max.unwrap_or(e_m.max(node.e_act_send));
    let c_stor_min = min_storage_capacitance(e_act_max, e.v_h, e.v_l_min)?;
    let range = validity_range(&e, node.f_clk_nominal, cfg.margin)?;
    Ok(SizingReport {
        e_m,
        e_act_send: node.e_act_send,
        e_act_max,
        c_stor_min,
        slope: cfg.decode.model_slope(),
        r_min: range.r_min,
        r_max: range.r_max,
        r_max_hard: range.r_max_hard,
    })
}

/// Columns `quantity,value`.
pub fn write_size_csv<W: Write>(s: &SizingReport, w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["quantity", "value"])?;
    for (k, v) in [
        ("e_m_j", s.e_m),
        ("e_act_send_j", s.e_act_send),
        ("e_act_max_j", s.e_act_max),
        ("c_stor_min_f", s.c_stor_min),
        ("slope_per_ohm", s.slope),
        ("r_min_ohm", s.r_min),
        ("r_max_ohm", s.r_max),
        ("r_max_hard_ohm", s.r_max_hard),
    ] {
        out.write_record([k.to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads all of `input` into a string, mapping failures to I/O errors.
pub fn read_all<R: BufRead>(mut input: R) -> Result<String, CliError> {
    let mut s = String::new();
    input.read_to_string(&mut s)?;
    Ok(s)
}
