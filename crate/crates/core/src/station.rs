//! Base-station side: turn received counts back into physical quantities.
//!
//! The model path inverts the RC decay, `R = N_m / (f_clk·C·ln(V_H/V_L,R))`,
//! and recovers the harvested power from the recharge count,
//! `P_geh = E_act·f_clk / N_h + P_q`. The calibrated path replaces the model
//! slope with a least-squares fit against known resistors, which absorbs
//! constant multiplicative errors (capacitor tolerance, clock offset).

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::node::NodeParams;
use crate::physics::measurement_energy;
use crate::wire::{self, decode_beacon, Beacon, BeaconFlags};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StationError {
    #[error("invalid decode parameters: {0}")]
    InvalidParams(String),
    #[error("harvest count is zero")]
    ZeroCount,
    #[error("insufficient points: {kind} fit needs {needed}, got {got}")]
    InsufficientPoints {
        kind: CalibrationKind,
        needed: usize,
        got: usize,
    },
    #[error("degenerate inputs: {0}")]
    DegenerateInputs(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calibration file: {0}")]
    CalibrationFormat(String),
}

/// What the station knows (or believes) about the node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams<T> {
    pub f_clk: T,
    pub c_stor: T,
    pub v_h: T,
    pub v_l_r: T,
    pub p_q: T,
    /// Energy of the active phase preceding the harvest that `N_h` timed (J).
    pub e_act: T,
}

impl<T: Scalar> DecodeParams<T> {
    /// Decoding parameters matching [`NodeParams::nominal`]. `e_act` is the
    /// measurement energy, since the reported `N_h` times the recharge after
    /// a measurement.
    pub fn nominal() -> Self {
        Self::from_node(&NodeParams::nominal())
    }

    /// Uses the node's nominal clock (the station cannot see clock error).
    pub fn from_node(node: &NodeParams<T>) -> Self {
        let e = node.effective_electrical();
        Self {
            f_clk: node.f_clk_nominal,
            c_stor: e.c_stor,
            v_h: e.v_h,
            v_l_r: e.v_l_r,
            p_q: e.p_q,
            e_act: measurement_energy(&e),
        }
    }

    pub fn validate(&self) -> Result<(), StationError> {
        let vals = [self.f_clk, self.c_stor, self.v_h, self.v_l_r, self.p_q, self.e_act];
        if vals.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(StationError::InvalidParams(
                "f_clk, c_stor, v_h, v_l_r, p_q and e_act must be positive and finite".into(),
            ));
        }
        if !(self.v_h > self.v_l_r) {
            return Err(StationError::InvalidParams(format!(
                "v_h must exceed v_l_r, got {} / {}",
                self.v_h, self.v_l_r
            )));
        }
        Ok(())
    }

    /// Pulses per ohm of the uncalibrated model.
    pub fn model_slope(&self) -> T {
        self.f_clk * self.c_stor * (self.v_h / self.v_l_r).ln()
    }

    /// Two counts' worth of resistance.
    pub fn r_min(&self) -> T {
        T::two() / self.model_slope()
    }
}

impl<T: Scalar> Default for DecodeParams<T> {
    fn default() -> Self {
        Self::nominal()
    }
}

pub fn resistance_from_count<T: Scalar>(n_m: u64, p: &DecodeParams<T>) -> T {
    T::lit(n_m as f64) / p.model_slope()
}

pub fn power_from_harvest_count<T: Scalar>(n_h: u64, p: &DecodeParams<T>) -> Result<T, StationError> {
    if n_h == 0 {
        return Err(StationError::ZeroCount);
    }
    Ok(p.e_act * p.f_clk / T::lit(n_h as f64) + p.p_q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CalibrationKind {
    /// `n = slope·r`
    #[default]
    Proportional,
    /// `n = slope·r + intercept`
    Affine,
}

impl CalibrationKind {
    fn min_points(self) -> usize {
        match self {
            CalibrationKind::Proportional => 1,
            CalibrationKind::Affine => 2,
        }
    }
}

impl fmt::Display for CalibrationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationKind::Proportional => "proportional",
            CalibrationKind::Affine => "affine",
        })
    }
}

impl FromStr for CalibrationKind {
    type Err = StationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "proportional" => Ok(CalibrationKind::Proportional),
            "affine" => Ok(CalibrationKind::Affine),
            other => Err(StationError::InvalidArgument(format!(
                "unknown calibration kind '{other}'"
            ))),
        }
    }
}

/// Fitted linear response of count versus resistance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationModel<T> {
    pub kind: CalibrationKind,
    /// Pulses per ohm.
    pub slope: T,
    /// Pulses; zero for proportional fits.
    pub intercept: T,
    pub r_squared: T,
    pub n_points: usize,
}

impl<T: Scalar> CalibrationModel<T> {
    /// `key=value` lines: kind, slope, intercept, r_squared, n_points.
    pub fn to_kv_string(&self) -> String {
        format!(
            "kind={}\nslope={}\nintercept={}\nr_squared={}\nn_points={}\n",
            self.kind, self.slope, self.intercept, self.r_squared, self.n_points
        )
    }

    pub fn parse_kv(text: &str) -> Result<Self, StationError> {
        let bad = |m: String| StationError::CalibrationFormat(m);
        let mut kind = None;
        let mut slope = None;
        let mut intercept = None;
        let mut r_squared = None;
        let mut n_points = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<T>()
                    .map_err(|_| bad(format!("line {}: '{v}' is not a number", i + 1)))
            };
            match k {
                "kind" => kind = Some(v.parse::<CalibrationKind>().map_err(|e| bad(e.to_string()))?),
                "slope" => slope = Some(num(v)?),
                "intercept" => intercept = Some(num(v)?),
                "r_squared" => r_squared = Some(num(v)?),
                "n_points" => {
                    n_points = Some(
                        v.parse::<usize>()
                            .map_err(|_| bad(format!("line {}: bad n_points '{v}'", i + 1)))?,
                    )
                }
                other => return Err(bad(format!("line {}: unknown key '{other}'", i + 1))),
            }
        }
        let missing = |k: &str| bad(format!("missing key '{k}'"));
        let model = Self {
            kind: kind.ok_or_else(|| missing("kind"))?,
            slope: slope.ok_or_else(|| missing("slope"))?,
            intercept: intercept.unwrap_or_else(T::zero),
            r_squared: r_squared.ok_or_else(|| missing("r_squared"))?,
            n_points: n_points.ok_or_else(|| missing("n_points"))?,
        };
        if !(model.slope > T::zero()) || !model.slope.is_finite() {
            return Err(bad(format!("slope must be positive, got {}", model.slope)));
        }
        Ok(model)
    }
}

/// Coefficient of determination of `predicted` against `observed`, with the
/// total sum of squares taken about the mean of `observed`.
pub fn r_squared<T: Scalar>(observed: &[T], predicted: &[T]) -> T {
    let n = T::lit(observed.len() as f64);
    let mean = observed.iter().fold(T::zero(), |a, &y| a + y) / n;
    let (ss_res, ss_tot) = observed
        .iter()
        .zip(predicted)
        .fold((T::zero(), T::zero()), |(res, tot), (&y, &yh)| {
            (res + (y - yh) * (y - yh), tot + (y - mean) * (y - mean))
        });
    if ss_tot == T::zero() {
        return if ss_res == T::zero() { T::one() } else { T::zero() };
    }
    T::one() - ss_res / ss_tot
}

/// Least-squares fit of count against resistance. `points` are
/// `(r_true, n_m)` pairs.
pub fn fit_calibration<T: Scalar>(
    points: &[(T, T)],
    kind: CalibrationKind,
) -> Result<CalibrationModel<T>, StationError> {
    let needed = kind.min_points();
    if points.len() < needed {
        return Err(StationError::InsufficientPoints {
            kind,
            needed,
            got: points.len(),
        });
    }
    if points.iter().any(|(r, n)| !r.is_finite() || !n.is_finite()) {
        return Err(StationError::DegenerateInputs("non-finite point".into()));
    }
    let n = T::lit(points.len() as f64);
    let (slope, intercept) = match kind {
        CalibrationKind::Proportional => {
            let (srn, srr) = points
                .iter()
                .fold((T::zero(), T::zero()), |(a, b), &(r, y)| (a + r * y, b + r * r));
            if srr == T::zero() {
                return Err(StationError::DegenerateInputs("all resistances are zero".into()));
            }
            (srn / srr, T::zero())
        }
        CalibrationKind::Affine => {
            let mean_r = points.iter().fold(T::zero(), |a, p| a + p.0) / n;
            let mean_n = points.iter().fold(T::zero(), |a, p| a + p.1) / n;
            let (sxy, sxx) = points.iter().fold((T::zero(), T::zero()), |(a, b), &(r, y)| {
                let dx = r - mean_r;
                (a + dx * (y - mean_n), b + dx * dx)
            });
            if sxx == T::zero() {
                return Err(StationError::DegenerateInputs(
                    "resistance values are all identical".into(),
                ));
            }
            let slope = sxy / sxx;
            (slope, mean_n - slope * mean_r)
        }
    };
    if !(slope > T::zero()) || !slope.is_finite() {
        return Err(StationError::DegenerateInputs(format!(
            "fitted slope {slope} is not positive"
        )));
    }
    let observed: Vec<T> = points.iter().map(|p| p.1).collect();
    let predicted: Vec<T> = points.iter().map(|p| slope * p.0 + intercept).collect();
    Ok(CalibrationModel {
        kind,
        slope,
        intercept,
        r_squared: r_squared(&observed, &predicted),
        n_points: points.len(),
    })
}

pub fn apply_calibration<T: Scalar>(m: &CalibrationModel<T>, n_m: T) -> T {
    (n_m - m.intercept) / m.slope
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMetrics<T> {
    /// `(r_est - r_true) / r_true` per pair.
    pub relative_errors: Vec<T>,
    pub max_abs_relative: T,
    /// Estimates against the identity line, about the mean of the estimates.
    pub r_squared: T,
}

/// Error statistics of `(r_true, r_est)` pairs.
pub fn error_metrics<T: Scalar>(pairs: &[(T, T)]) -> Result<ErrorMetrics<T>, StationError> {
    if pairs.is_empty() {
        return Err(StationError::EmptyInput);
    }
    if let Some((r, _)) = pairs.iter().find(|(r, _)| !(*r > T::zero())) {
        return Err(StationError::InvalidArgument(format!(
            "r_true must be positive, got {r}"
        )));
    }
    let relative_errors: Vec<T> = pairs.iter().map(|&(r, e)| (e - r) / r).collect();
    let max_abs_relative = relative_errors
        .iter()
        .fold(T::zero(), |m, e| m.max(e.abs()));
    let est: Vec<T> = pairs.iter().map(|p| p.1).collect();
    let truth: Vec<T> = pairs.iter().map(|p| p.0).collect();
    Ok(ErrorMetrics {
        relative_errors,
        max_abs_relative,
        r_squared: r_squared(&est, &truth),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimateSource {
    Model,
    Calibrated,
}

impl fmt::Display for EstimateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimateSource::Model => "model",
            EstimateSource::Calibrated => "calibrated",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub node_id: u16,
    pub seq: u8,
    pub n_m: u64,
    pub n_h: u64,
    pub r_m_est: T,
    /// Harvested power decoded from `n_h`; `None` when `n_h = 0`.
    pub p_geh_est: Option<T>,
    /// Load-to-harvest power ratio at `v_l_r`; `None` without a power estimate.
    pub margin_ratio: Option<T>,
    pub in_range: bool,
    pub source: EstimateSource,
    pub flags: BeaconFlags,
}

impl<T> EstimateReport<T> {
    pub fn beacon_ref(&self) -> (u16, u8) {
        (self.node_id, self.seq)
    }
}

/// Per-node record of the last 128 accepted sequence numbers.
#[derive(Debug, Default)]
pub struct SeqWindow {
    nodes: HashMap<u16, NodeSeqs>,
}

#[derive(Debug)]
struct NodeSeqs {
    order: VecDeque<u8>,
    seen: [bool; 256],
}

impl SeqWindow {
    pub const WIDTH: usize = 128;

    /// Returns true if `(node_id, seq)` is new and records it.
    pub fn accept(&mut self, node_id: u16, seq: u8) -> bool {
        let node = self.nodes.entry(node_id).or_insert_with(|| NodeSeqs {
            order: VecDeque::with_capacity(Self::WIDTH + 1),
            seen: [false; 256],
        });
        if node.seen[seq as usize] {
            return false;
        }
        node.seen[seq as usize] = true;
        node.order.push_back(seq);
        if node.order.len() > Self::WIDTH {
            let old = node.order.pop_front().expect("window not empty");
            node.seen[old as usize] = false;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// 1-based input line.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestOutcome<T> {
    pub reports: Vec<EstimateReport<T>>,
    pub diagnostics: Vec<Diagnostic>,
    /// Lines that did not decode to a beacon.
    pub rejected: usize,
    pub duplicates: usize,
}

/// Report builder shared by both input formats.
struct Estimator<'a, T> {
    params: &'a DecodeParams<T>,
    calibration: Option<&'a CalibrationModel<T>>,
    margin: T,
    window: SeqWindow,
}

impl<T: Scalar> Estimator<'_, T> {
    fn report(&self, b: &Beacon) -> EstimateReport<T> {
        let n_m = b.n_m as u64;
        let n_h = b.n_h as u64;
        let (r_m_est, source) = match self.calibration {
            Some(cal) => (apply_calibration(cal, T::lit(n_m as f64)), EstimateSource::Calibrated),
            None => (resistance_from_count(n_m, self.params), EstimateSource::Model),
        };
        let p_geh_est = power_from_harvest_count(n_h, self.params).ok();
        let margin_ratio = p_geh_est.and_then(|p_geh| {
            if !(r_m_est > T::zero()) {
                return None;
            }
            let dp = (p_geh - self.params.p_q).abs();
            let load = self.params.v_l_r * self.params.v_l_r / r_m_est;
            Some(if dp == T::zero() { T::infinity() } else { load / dp })
        });
        let in_range = r_m_est > self.params.r_min()
            && margin_ratio.is_some_and(|m| m >= self.margin);
        EstimateReport {
            node_id: b.node_id,
            seq: b.seq,
            n_m,
            n_h,
            r_m_est,
            p_geh_est,
            margin_ratio,
            in_range,
            source,
            flags: b.flags,
        }
    }

    fn push(&mut self, out: &mut IngestOutcome<T>, b: Beacon) {
        if !self.window.accept(b.node_id, b.seq) {
            out.duplicates += 1;
            return;
        }
        out.reports.push(self.report(&b));
    }
}

/// Decodes a hex beacon log into estimate reports. Undecodable lines are
/// counted and described in the diagnostics; repeated `(node_id, seq)` pairs
/// keep the first occurrence. `margin` is the minimum acceptable
/// load-to-harvest ratio for `in_range`.
pub fn ingest_log<T: Scalar, R: BufRead>(
    lines: R,
    p: &DecodeParams<T>,
    cal: Option<&CalibrationModel<T>>,
    margin: T,
) -> io::Result<IngestOutcome<T>> {
    let mut est = Estimator {
        params: p,
        calibration: cal,
        margin,
        window: SeqWindow::default(),
    };
    let mut out = IngestOutcome::default();
    for (line, parsed) in wire::read_log(lines)? {
        match parsed.and_then(|bytes| decode_beacon(&bytes)) {
            Ok(b) => est.push(&mut out, b),
            Err(e) => {
                out.rejected += 1;
                out.diagnostics.push(Diagnostic {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Same as [`ingest_log`] for CSV input with columns `node_id,seq,n_m,n_h`.
/// Beacon flags are not carried in this format and are assumed valid.
pub fn ingest_csv<T: Scalar, R: Read>(
    input: R,
    p: &DecodeParams<T>,
    cal: Option<&CalibrationModel<T>>,
    margin: T,
) -> io::Result<IngestOutcome<T>> {
    let mut est = Estimator {
        params: p,
        calibration: cal,
        margin,
        window: SeqWindow::default(),
    };
    let mut out = IngestOutcome::default();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(io::Error::other)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("missing column '{name}'"))
        })
    };
    let (c_id, c_seq, c_nm, c_nh) = (col("node_id")?, col("seq")?, col("n_m")?, col("n_h")?);
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let parsed = rec.map_err(|e| e.to_string()).and_then(|r| {
            let field = |i: usize| r.get(i).unwrap_or("").to_string();
            let id = field(c_id).parse::<u16>().map_err(|e| format!("node_id: {e}"))?;
            let seq = field(c_seq).parse::<u8>().map_err(|e| format!("seq: {e}"))?;
            let n_m = field(c_nm).parse::<u32>().map_err(|e| format!("n_m: {e}"))?;
            let n_h = field(c_nh).parse::<u32>().map_err(|e| format!("n_h: {e}"))?;
            Ok(Beacon::new(id, seq, n_m, n_h, BeaconFlags::N_M_VALID))
        });
        match parsed {
            Ok(b) => est.push(&mut out, b),
            Err(message) => {
                out.rejected += 1;
                out.diagnostics.push(Diagnostic { line, message });
            }
        }
    }
    Ok(out)
}

/// Columns `node_id,seq,n_m,r_est_ohm,in_range,margin_ratio,source`.
pub fn write_reports_csv<T: Scalar, W: Write>(reports: &[EstimateReport<T>], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "node_id",
        "seq",
        "n_m",
        "r_est_ohm",
        "in_range",
        "margin_ratio",
        "source",
    ])?;
    for r in reports {
        out.write_record([
            r.node_id.to_string(),
            r.seq.to_string(),
            r.n_m.to_string(),
            r.r_m_est.to_string(),
            r.in_range.to_string(),
            r.margin_ratio.map(|m| m.to_string()).unwrap_or_default(),
            r.source.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::{quantize_count, run_measurement, DischargeMode};
    use crate::wire::{encode_beacon, frame_to_hex};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sweep() -> Vec<f64> {
        (1..=16).map(|k| 50.0 * k as f64).collect()
    }

    fn ideal_node(c_scale: f64) -> NodeParams<f64> {
        let mut n = NodeParams::nominal();
        n.electrical.c_stor *= c_scale;
        n.discharge_mode = DischargeMode::ClosedForm;
        n.with_default_send_energy()
    }

    fn counts(node: &NodeParams<f64>, rs: &[f64]) -> Vec<(f64, f64)> {
        rs.iter()
            .map(|&r| (r, run_measurement(node, r).unwrap().n_m.count as f64))
            .collect()
    }

    // Brute-force reference: SSE minimum over a dense slope grid.
    fn grid_argmin(points: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
        let sse = |k: f64| points.iter().map(|(r, n)| (n - k * r).powi(2)).sum::<f64>();
        let mut best = (lo, f64::INFINITY);
        let steps = 200_000;
        for i in 0..=steps {
            let k = lo + (hi - lo) * i as f64 / steps as f64;
            let s = sse(k);
            if s < best.1 {
                best = (k, s);
            }
        }
        best.0
    }

    #[test]
    fn model_slope_and_decode() {
        let p = DecodeParams::<f64>::nominal();
        assert_relative_eq!(p.model_slope(), 1.629, epsilon = 1e-3);
        assert_relative_eq!(resistance_from_count(1629, &p), 999.8, epsilon = 0.1);
        assert_eq!(resistance_from_count(0, &p), 0.0);
        assert_relative_eq!(p.r_min(), 1.2275, epsilon = 1e-3);
    }

    #[test]
    fn harvest_power_decode() {
        let p = DecodeParams::<f64>::nominal();
        assert_relative_eq!(p.e_act, 396e-6, max_relative = 1e-9);
        let pw = power_from_harvest_count(1_953_600, &p).unwrap();
        assert_relative_eq!(pw, 10e-6, max_relative = 1e-9);
        let far = power_from_harvest_count(u32::MAX as u64, &p).unwrap();
        assert!(far > p.p_q && far - p.p_q < 1e-8);
        let half = power_from_harvest_count(976_800, &p).unwrap();
        assert_relative_eq!(half - p.p_q, 2.0 * (pw - p.p_q), max_relative = 1e-12);
        assert_eq!(power_from_harvest_count(0, &p), Err(StationError::ZeroCount));
    }

    #[test]
    fn fit_exact_line() {
        let pts: Vec<_> = sweep().into_iter().map(|r| (r, 1.629 * r)).collect();
        let m = fit_calibration(&pts, CalibrationKind::Proportional).unwrap();
        assert_relative_eq!(m.slope, 1.629, max_relative = 1e-12);
        assert_relative_eq!(m.r_squared, 1.0, epsilon = 1e-12);
        assert_eq!(m.n_points, 16);
        assert_relative_eq!(apply_calibration(&m, 1629.0), 1000.0, max_relative = 1e-12);
    }

    #[test]
    fn fit_quantized_slope() {
        let pts: Vec<_> = sweep().into_iter().map(|r| (r, (1.169 * r).floor())).collect();
        let m = fit_calibration(&pts, CalibrationKind::Proportional).unwrap();
        assert!((m.slope - 1.169).abs() <= 0.01, "{}", m.slope);
        assert!(m.r_squared >= 0.999);
        assert_relative_eq!(m.slope, grid_argmin(&pts, 1.0, 1.3), epsilon = 2e-6);
    }

    #[test]
    fn fit_affine_recovers_offset() {
        let pts: Vec<_> = sweep().into_iter().map(|r| (r, 1.5 * r + 12.0)).collect();
        let m = fit_calibration(&pts, CalibrationKind::Affine).unwrap();
        assert_relative_eq!(m.slope, 1.5, max_relative = 1e-12);
        assert_relative_eq!(m.intercept, 12.0, max_relative = 1e-9);
        assert_eq!(apply_calibration(&m, m.intercept), 0.0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_calibration(&[(100.0, 150.0), (100.0, 160.0)], CalibrationKind::Affine),
            Err(StationError::DegenerateInputs(_))
        ));
        assert!(matches!(
            fit_calibration(&[(100.0, 150.0)], CalibrationKind::Affine),
            Err(StationError::InsufficientPoints { needed: 2, got: 1, .. })
        ));
        assert!(matches!(
            fit_calibration::<f64>(&[], CalibrationKind::Proportional),
            Err(StationError::InsufficientPoints { needed: 1, got: 0, .. })
        ));
        let one = fit_calibration(&[(100.0, 150.0)], CalibrationKind::Proportional).unwrap();
        assert_relative_eq!(one.slope, 1.5);
        assert!(fit_calibration(&[(0.0, 1.0)], CalibrationKind::Proportional).is_err());
        assert!(fit_calibration(&[(10.0, -1.0)], CalibrationKind::Proportional).is_err());
    }

    #[test]
    fn proportional_apply_is_linear() {
        let m = fit_calibration(&[(100.0, 163.0)], CalibrationKind::Proportional).unwrap();
        assert_relative_eq!(apply_calibration(&m, 2000.0), 2.0 * apply_calibration(&m, 1000.0));
    }

    #[test]
    fn calibration_file_roundtrip() {
        let m = fit_calibration(
            &[(100.0, 117.0), (200.0, 233.0), (300.0, 351.0)],
            CalibrationKind::Affine,
        )
        .unwrap();
        let text = m.to_kv_string();
        assert!(text.starts_with("kind=affine\nslope="));
        assert_eq!(CalibrationModel::<f64>::parse_kv(&text).unwrap(), m);
        assert!(CalibrationModel::<f64>::parse_kv("kind=affine\n").is_err());
        assert!(CalibrationModel::<f64>::parse_kv("slope=1\nbogus=2\n").is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = error_metrics(&[(100.0, 100.0), (200.0, 200.0), (300.0, 300.0)]).unwrap();
        assert!(m.relative_errors.iter().all(|&e| e == 0.0));
        assert_eq!(m.r_squared, 1.0);
        let m = error_metrics(&[(100.0, 112.0)]).unwrap();
        assert_relative_eq!(m.relative_errors[0], 0.12, epsilon = 1e-12);
        assert_relative_eq!(m.max_abs_relative, 0.12, epsilon = 1e-12);
        assert_eq!(error_metrics::<f64>(&[]), Err(StationError::EmptyInput));
        assert!(error_metrics(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn misdeclared_capacitor_bias_and_calibration() {
        let rs = sweep();
        let pts = counts(&ideal_node(1.0), &rs);
        let mut declared = DecodeParams::<f64>::nominal();
        declared.c_stor *= 0.718;
        let model: Vec<_> = pts
            .iter()
            .map(|&(r, n)| (r, resistance_from_count(n as u64, &declared)))
            .collect();
        let cal = fit_calibration(&pts, CalibrationKind::Proportional).unwrap();
        let calibrated: Vec<_> = pts.iter().map(|&(r, n)| (r, apply_calibration(&cal, n))).collect();
        let em = error_metrics(&model).unwrap();
        let ec = error_metrics(&calibrated).unwrap();
        let expected = 1.0 / 0.718 - 1.0;
        for e in &em.relative_errors {
            assert!((e - expected).abs() < 0.01, "{e}");
        }
        assert!(ec.max_abs_relative < 0.01);
        assert!(ec.r_squared > em.r_squared);
    }

    #[test]
    fn seq_window_dedup_and_wrap() {
        let mut w = SeqWindow::default();
        assert!(w.accept(1, 5));
        assert!(!w.accept(1, 5));
        assert!(w.accept(2, 5));
        // After 128 newer sequence numbers, seq 5 leaves the window.
        for s in 6..=133u8 {
            assert!(w.accept(1, s));
        }
        assert!(w.accept(1, 5));
        // A full wrap of 256 beacons is accepted in order.
        let mut w = SeqWindow::default();
        for _ in 0..3 {
            for s in 0..=255u8 {
                assert!(w.accept(9, s));
            }
        }
    }

    fn log_of(beacons: &[Beacon]) -> String {
        beacons
            .iter()
            .map(|b| frame_to_hex(&encode_beacon(b).unwrap()) + "\n")
            .collect()
    }

    #[test]
    fn ingest_empty_duplicate_and_corrupt() {
        let p = DecodeParams::<f64>::nominal();
        let out = ingest_log("".as_bytes(), &p, None, 10.0).unwrap();
        assert!(out.reports.is_empty() && out.diagnostics.is_empty());

        let b = Beacon::new(3, 0, 1629, 1_953_600, BeaconFlags::N_M_VALID);
        let text = log_of(&[b, b]);
        let out = ingest_log(text.as_bytes(), &p, None, 10.0).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.duplicates, 1);

        let good = encode_beacon(&b).unwrap();
        let mut flipped = encode_beacon(&Beacon { seq: 1, ..b }).unwrap();
        flipped[6] ^= 0x10;
        let text = format!("{}\n{}\n", frame_to_hex(&good), frame_to_hex(&flipped));
        let out = ingest_log(text.as_bytes(), &p, None, 10.0).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.rejected, 1);
        assert_eq!(out.diagnostics[0].line, 2);
        assert!(out.diagnostics[0].message.contains("crc"));
    }

    #[test]
    fn ingest_report_fields() {
        let p = DecodeParams::<f64>::nominal();
        let b = Beacon::new(3, 4, 1629, 1_953_600, BeaconFlags::N_M_VALID);
        let out = ingest_log(log_of(&[b]).as_bytes(), &p, None, 10.0).unwrap();
        let r = &out.reports[0];
        assert_eq!(r.beacon_ref(), (3, 4));
        assert_eq!(r.source, EstimateSource::Model);
        assert_relative_eq!(r.r_m_est, 999.8, epsilon = 0.1);
        assert_relative_eq!(r.p_geh_est.unwrap(), 10e-6, max_relative = 1e-9);
        // load power at V_L,R over the 7.5 µW net harvest
        assert_relative_eq!(
            r.margin_ratio.unwrap(),
            2.85 * 2.85 / r.r_m_est / 7.5e-6,
            max_relative = 1e-9
        );
        assert!(r.in_range);

        let weak = Beacon::new(3, 5, 1629, 0, BeaconFlags::N_M_VALID);
        let out = ingest_log(log_of(&[weak]).as_bytes(), &p, None, 10.0).unwrap();
        assert_eq!(out.reports[0].margin_ratio, None);
        assert!(!out.reports[0].in_range);

        let cal = CalibrationModel {
            kind: CalibrationKind::Proportional,
            slope: 1.169,
            intercept: 0.0,
            r_squared: 1.0,
            n_points: 2,
        };
        let out = ingest_log(log_of(&[b]).as_bytes(), &p, Some(&cal), 10.0).unwrap();
        assert_eq!(out.reports[0].source, EstimateSource::Calibrated);
        assert_relative_eq!(out.reports[0].r_m_est, 1629.0 / 1.169, max_relative = 1e-12);
    }

    #[test]
    fn ingest_csv_format() {
        let p = DecodeParams::<f64>::nominal();
        let text = "node_id,seq,n_m,n_h\n1,0,1629,1953600\n1,0,1629,1953600\n1,1,x,5\n";
        let out = ingest_csv(text.as_bytes(), &p, None, 10.0).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.rejected, 1);
        assert_eq!(out.diagnostics[0].line, 4);
        assert!(ingest_csv("a,b\n".as_bytes(), &p, None, 10.0).is_err());
    }

    #[test]
    fn reports_csv_header() {
        let p = DecodeParams::<f64>::nominal();
        let b = Beacon::new(3, 4, 1629, 0, BeaconFlags::N_M_VALID);
        let out = ingest_log(log_of(&[b]).as_bytes(), &p, None, 10.0).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&out.reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "node_id,seq,n_m,r_est_ohm,in_range,margin_ratio,source"
        );
        assert!(lines.next().unwrap().ends_with(",false,,model"));
    }

    proptest! {
        #[test]
        fn decode_inverse_bound(r in 2.0f64..5000.0) {
            let node = ideal_node(1.0);
            let p = DecodeParams::from_node(&node);
            let n = run_measurement(&node, r).unwrap().n_m.count;
            let est = resistance_from_count(n, &p);
            let step = 1.0 / p.model_slope();
            prop_assert!(est <= r * (1.0 + 1e-12) && est >= r - step, "r={r} est={est}");
        }

        #[test]
        fn calibration_absorbs_capacitor_scale(s in 0.5f64..2.0) {
            let rs = sweep();
            let pts = counts(&ideal_node(s), &rs);
            let cal = fit_calibration(&pts, CalibrationKind::Proportional).unwrap();
            let step = 1.0 / cal.slope;
            for (r, n) in pts {
                let est = apply_calibration(&cal, n);
                prop_assert!((est - r).abs() <= step, "s={s} r={r} est={est} step={step}");
            }
        }

        #[test]
        fn proportional_fit_exact_on_clean_data(k in 0.1f64..10.0) {
            let pts: Vec<_> = sweep().into_iter().map(|r| (r, k * r)).collect();
            let m = fit_calibration(&pts, CalibrationKind::Proportional).unwrap();
            prop_assert!(((m.slope - k) / k).abs() <= 1e-9);
        }

        #[test]
        fn harvest_roundtrip(p_geh in 5e-6f64..5e-3) {
            let mut node = NodeParams::<f64>::nominal();
            node.electrical.p_geh = p_geh;
            let p = DecodeParams::from_node(&node);
            let n_h = crate::node::run_harvest(&node, p.e_act).unwrap().n_h.count;
            let est = power_from_harvest_count(n_h, &p).unwrap();
            // one count of timing error shifts the estimate by at most ΔP/(n_h - 1)
            let dp = p_geh - node.electrical.p_q;
            prop_assert!(est >= p_geh - 1e-18 && est - p_geh <= dp / (n_h as f64 - 1.0) + 1e-18);
            prop_assert_eq!(quantize_count(p.e_act / dp, node.f_clk_nominal).count, n_h);
        }
    }
}
