//! Event-level model of the node firmware.
//!
//! A work cycle alternates a harvesting phase (charge `C_stor` up to `V_H`,
//! counting timer pulses `N_h`) with one active phase from the schedule:
//!
//! - **measure**: the sensor resistor is switched onto `C_stor`; the timer
//!   counts `N_m` pulses until the detector sees `V_L,R`.
//! - **send**: a beacon carrying the latest counters is broadcast, costing
//!   `e_act_send` joules.
//!
//! The simulator works at phase granularity. Voltages inside each phase come
//! from the closed-form solutions in [`crate::physics`] and are sampled onto
//! the trace for plotting.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::physics::{
    charge_time, charge_voltage_at, discharge_time_closed_form,
    discharge_time_constant_net_power, discharge_voltage_at, DischargeIntegrator,
    ElectricalParams, PhysicsError, Termination,
};
use crate::wire::{encode_beacon, frame_to_hex, Beacon, BeaconFlags, WireError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("measurement stalled: load equilibrium {asymptote} V never reaches the lower threshold")]
    Stall { asymptote: f64 },
    #[error("invalid node parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Active phases that a schedule can contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseKind {
    Measure,
    Send,
}

impl PhaseKind {
    pub fn phase(self) -> Phase {
        match self {
            PhaseKind::Measure => Phase::Measure,
            PhaseKind::Send => Phase::Send,
        }
    }
}

impl std::str::FromStr for PhaseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "measure" => Ok(PhaseKind::Measure),
            "send" => Ok(PhaseKind::Send),
            other => Err(format!("unknown phase kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Harvest,
    Measure,
    Send,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Harvest => "harvest",
            Phase::Measure => "measure",
            Phase::Send => "send",
        })
    }
}

/// How the measurement discharge time is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DischargeMode<T> {
    /// Exact solution with harvested power still flowing during the measurement.
    NetPower,
    /// Adaptive ODE integration of the same model.
    Numeric { rel_tol: T },
    /// Plain RC decay, harvest and quiescent power ignored.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams<T> {
    pub electrical: ElectricalParams<T>,
    pub f_clk_nominal: T,
    /// Relative clock error; the timer runs at `f_clk_nominal·(1 + f_clk_error)`.
    pub f_clk_error: T,
    /// Net energy drawn from `C_stor` by one beacon transmission (J).
    pub e_act_send: T,
    pub pvd_grid_enabled: bool,
    pub pvd_grid_step: T,
    /// Detector range `(lo, hi)` used when the grid is enabled.
    pub pvd_range: (T, T),
    pub schedule: Vec<PhaseKind>,
    pub discharge_mode: DischargeMode<T>,
    /// Timer width in bits; counts saturate at `2^bits - 1`.
    pub counter_bits: u32,
    /// Random timer start phase, which makes a count one higher with
    /// probability equal to the fractional part of `t·f`.
    pub count_jitter: bool,
    pub node_id: u16,
    /// Duration of a beacon transmission (s).
    pub send_duration: T,
    /// Trace points per harvest and send phase.
    pub samples_per_phase: usize,
}

impl<T: Scalar> NodeParams<T> {
    pub fn nominal() -> Self {
        let electrical = ElectricalParams::<T>::nominal();
        let e = electrical;
        Self {
            electrical,
            f_clk_nominal: T::lit(37e3),
            f_clk_error: T::zero(),
            e_act_send: T::half() * e.c_stor * (e.v_h * e.v_h - e.v_l_send * e.v_l_send),
            pvd_grid_enabled: false,
            pvd_grid_step: T::lit(0.2),
            pvd_range: (T::lit(2.0), T::lit(3.2)),
            schedule: vec![PhaseKind::Measure, PhaseKind::Send],
            discharge_mode: DischargeMode::NetPower,
            counter_bits: 32,
            count_jitter: false,
            node_id: 1,
            send_duration: T::lit(2e-3),
            samples_per_phase: 32,
        }
    }

    /// Sets `e_act_send` to the energy between `v_h` and `v_l_send`.
    pub fn with_default_send_energy(mut self) -> Self {
        let e = self.electrical;
        self.e_act_send = T::half() * e.c_stor * (e.v_h * e.v_h - e.v_l_send * e.v_l_send);
        self
    }

    pub fn f_clk_actual(&self) -> T {
        self.f_clk_nominal * (T::one() + self.f_clk_error)
    }

    /// Electrical parameters as the hardware sees them, with thresholds
    /// snapped to the detector grid when it is enabled.
    pub fn effective_electrical(&self) -> ElectricalParams<T> {
        let mut e = self.electrical;
        if self.pvd_grid_enabled {
            let (lo, hi) = self.pvd_range;
            let step = self.pvd_grid_step;
            e.v_h = snap_to_pvd_grid(e.v_h, step, lo, hi);
            e.v_l_r = snap_to_pvd_grid(e.v_l_r, step, lo, hi);
            e.v_l_send = snap_to_pvd_grid(e.v_l_send, step, lo, hi);
        }
        e
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let bad = |m: String| Err(NodeError::InvalidParams(m));
        let e = self.effective_electrical();
        e.validate()?;
        if !(self.f_clk_nominal > T::zero()) || !self.f_clk_nominal.is_finite() {
            return bad(format!("f_clk_nominal must be positive, got {}", self.f_clk_nominal));
        }
        if !(self.f_clk_error.abs() < T::lit(0.2)) {
            return bad(format!("|f_clk_error| must be below 0.2, got {}", self.f_clk_error));
        }
        let budget = T::half() * e.c_stor * (e.v_h * e.v_h - e.v_l_min * e.v_l_min);
        if !(self.e_act_send > T::zero() && self.e_act_send <= budget) {
            return bad(format!(
                "e_act_send must lie in (0, {budget}] J to survive a send, got {}",
                self.e_act_send
            ));
        }
        if self.pvd_grid_enabled
            && !(self.pvd_grid_step > T::zero() && self.pvd_range.0 < self.pvd_range.1)
        {
            return bad("pvd grid needs step > 0 and lo < hi".into());
        }
        if self.schedule.is_empty() {
            return bad("schedule must contain at least one active phase".into());
        }
        if !(1..=32).contains(&self.counter_bits) {
            return bad(format!("counter_bits must be in 1..=32, got {}", self.counter_bits));
        }
        if !(self.send_duration > T::zero()) {
            return bad("send_duration must be positive".into());
        }
        if let DischargeMode::Numeric { rel_tol } = self.discharge_mode {
            DischargeIntegrator::new(rel_tol)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for NodeParams<T> {
    fn default() -> Self {
        Self::nominal()
    }
}

/// Result of converting a duration into timer pulses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub count: u64,
    /// The count hit the counter width and saturated.
    pub clipped: bool,
}

/// Completed timer periods in `t` seconds at `f_clk_actual`, on a 32-bit counter.
pub fn quantize_count<T: Scalar>(t: T, f_clk_actual: T) -> Quantized {
    quantize_count_with(t, f_clk_actual, 32, T::zero())
}

/// Like [`quantize_count`] with an explicit counter width and a timer start
/// phase in `[0, 1)` periods.
pub fn quantize_count_with<T: Scalar>(t: T, f_clk_actual: T, bits: u32, phase: T) -> Quantized {
    let max = if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let x = t * f_clk_actual + phase;
    if x.is_nan() || x <= T::zero() {
        return Quantized { count: 0, clipped: false };
    }
    // A product that is an integer in exact arithmetic can land a few ulp
    // below it in floating point; count it as complete.
    let nearest = x.round();
    let guard = T::lit(8.0) * T::epsilon() * x.max(T::one());
    let whole = if (x - nearest).abs() <= guard { nearest } else { x.floor() };
    match whole.to_u64() {
        Some(n) if n <= max => Quantized { count: n, clipped: false },
        _ => Quantized { count: max, clipped: true },
    }
}

/// Nearest detector level `v_lo + k·step`, clamped to `[v_lo, v_hi]`.
pub fn snap_to_pvd_grid<T: Scalar>(v: T, step: T, v_lo: T, v_hi: T) -> T {
    let k = ((v - v_lo) / step).round();
    (v_lo + k * step).max(v_lo).min(v_hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSample<T> {
    pub t: T,
    pub v_stor: T,
    /// Voltage on the sensor output; equals `v_stor` while measuring, else 0.
    pub v_r: T,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    VhCrossed,
    VlrCrossed,
    BeaconEmitted,
    Stall,
    NoNetHarvest,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::VhCrossed => "vh-crossed",
            EventKind::VlrCrossed => "vlr-crossed",
            EventKind::BeaconEmitted => "beacon-emitted",
            EventKind::Stall => "stall",
            EventKind::NoNetHarvest => "no-net-harvest",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<T> {
    pub t: T,
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace<T> {
    pub samples: Vec<SimSample<T>>,
    pub events: Vec<SimEvent<T>>,
}

impl<T: Scalar> SimTrace<T> {
    /// Columns `t_s,v_stor_V,v_r_V,phase`.
    pub fn write_samples_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_s", "v_stor_V", "v_r_V", "phase"])?;
        for s in &self.samples {
            out.write_record([
                s.t.to_string(),
                s.v_stor.to_string(),
                s.v_r.to_string(),
                s.phase.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `t_s,kind,detail`.
    pub fn write_events_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_s", "kind", "detail"])?;
        for e in &self.events {
            out.write_record([e.t.to_string(), e.kind.to_string(), e.detail.clone()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub n_m: u64,
    pub n_h: u64,
    pub seq: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<T> {
    pub t_m: T,
    pub n_m: Quantized,
    /// Discharge samples with `t` relative to the start of the measurement.
    pub samples: Vec<SimSample<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Harvest<T> {
    pub t_h: T,
    pub n_h: Quantized,
    /// Charging samples with `t` relative to the start of the phase.
    pub samples: Vec<SimSample<T>>,
}

enum MeasureOutcome<T> {
    Done(Measurement<T>),
    Stalled {
        asymptote: T,
        horizon: T,
        samples: Vec<SimSample<T>>,
    },
}

fn start_phase<T: Scalar>(params: &NodeParams<T>, rng: &mut ChaCha8Rng) -> T {
    if params.count_jitter {
        T::lit(rng.random::<f64>())
    } else {
        T::zero()
    }
}

fn linspace<T: Scalar>(duration: T, n: usize) -> impl Iterator<Item = T> {
    let n = n.max(1);
    (0..=n).map(move |k| duration * T::lit(k as f64) / T::lit(n as f64))
}

fn measure_inner<T: Scalar>(
    params: &NodeParams<T>,
    r_m: T,
    rng: &mut ChaCha8Rng,
) -> Result<MeasureOutcome<T>, NodeError> {
    let e = params.effective_electrical();
    let f = params.f_clk_actual();
    let n = params.samples_per_phase;
    let sample = |t: T, v: T| SimSample {
        t,
        v_stor: v,
        v_r: v,
        phase: Phase::Measure,
    };

    let (t_m, samples) = match params.discharge_mode {
        DischargeMode::NetPower => {
            let res = discharge_time_constant_net_power(r_m, &e)?;
            if let Termination::EquilibriumStall { asymptote } = res.terminated {
                return Ok(stalled(&e, r_m, asymptote, n));
            }
            let s = linspace(res.t_m, n)
                .map(|t| sample(t, discharge_voltage_at(t, r_m, &e)))
                .collect();
            (res.t_m, s)
        }
        DischargeMode::ClosedForm => {
            let t_m = discharge_time_closed_form(r_m, &e)?;
            let rc = e.with_p_geh(e.p_q);
            let s = linspace(t_m, n)
                .map(|t| sample(t, discharge_voltage_at(t, r_m, &rc)))
                .collect();
            (t_m, s)
        }
        DischargeMode::Numeric { rel_tol } => {
            let res = DischargeIntegrator::new(rel_tol)?
                .with_trajectory(true)
                .run(r_m, &e)?;
            if let Termination::EquilibriumStall { asymptote } = res.terminated {
                return Ok(stalled(&e, r_m, asymptote, n));
            }
            let s = res
                .v_trajectory
                .unwrap_or_default()
                .into_iter()
                .map(|(t, v)| sample(t, v))
                .collect();
            (res.t_m, s)
        }
    };
    let n_m = quantize_count_with(t_m, f, params.counter_bits, start_phase(params, rng));
    Ok(MeasureOutcome::Done(Measurement { t_m, n_m, samples }))
}

/// Samples the approach to the load equilibrium over five energy time constants.
fn stalled<T: Scalar>(e: &ElectricalParams<T>, r_m: T, asymptote: T, n: usize) -> MeasureOutcome<T> {
    let horizon = T::lit(2.5) * (r_m + e.r_gpio) * e.c_stor;
    let samples = linspace(horizon, n)
        .map(|t| {
            let v = discharge_voltage_at(t, r_m, e);
            SimSample {
                t,
                v_stor: v,
                v_r: v,
                phase: Phase::Measure,
            }
        })
        .collect();
    MeasureOutcome::Stalled {
        asymptote,
        horizon,
        samples,
    }
}

/// Runs one measurement starting with `C_stor` at `v_h`.
pub fn run_measurement<T: Scalar>(params: &NodeParams<T>, r_m: T) -> Result<Measurement<T>, NodeError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match measure_inner(params, r_m, &mut rng)? {
        MeasureOutcome::Done(m) => Ok(m),
        MeasureOutcome::Stalled { asymptote, .. } => Err(NodeError::Stall {
            asymptote: asymptote.as_f64(),
        }),
    }
}

fn harvest_inner<T: Scalar>(
    params: &NodeParams<T>,
    v_start: T,
    e_deficit: T,
    rng: &mut ChaCha8Rng,
) -> Result<Harvest<T>, NodeError> {
    let e = params.effective_electrical();
    let t_h = charge_time(e_deficit, &e)?;
    let n_h = quantize_count_with(
        t_h,
        params.f_clk_actual(),
        params.counter_bits,
        start_phase(params, rng),
    );
    let samples = linspace(t_h, params.samples_per_phase)
        .map(|t| SimSample {
            t,
            v_stor: charge_voltage_at(v_start, t, &e),
            v_r: T::zero(),
            phase: Phase::Harvest,
        })
        .collect();
    Ok(Harvest { t_h, n_h, samples })
}

/// Harvests `e_deficit` joules, ending at `v_h`.
pub fn run_harvest<T: Scalar>(params: &NodeParams<T>, e_deficit: T) -> Result<Harvest<T>, NodeError> {
    params.validate()?;
    let e = params.effective_electrical();
    let v2 = e.v_h * e.v_h - T::two() * e_deficit / e.c_stor;
    let v_start = v2.max(T::zero()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    harvest_inner(params, v_start, e_deficit, &mut rng)
}

/// How a multi-cycle run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Stalled,
    NoNetHarvest,
}

/// One phase of a run, in absolute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseRecord<T> {
    pub phase: Phase,
    pub t_start: T,
    pub t_end: T,
    pub v_start: T,
    pub v_end: T,
    /// `N_h` for harvests, `N_m` for measurements.
    pub count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun<T> {
    pub trace: SimTrace<T>,
    pub beacons: Vec<Beacon>,
    /// Encoded beacon frames, same order as `beacons`.
    pub frames: Vec<[u8; crate::wire::FRAME_LEN]>,
    pub phases: Vec<PhaseRecord<T>>,
    pub counters: Counters,
    pub status: RunStatus,
}

struct Runner<T: Scalar> {
    params: NodeParams<T>,
    e: ElectricalParams<T>,
    rng: ChaCha8Rng,
    t: T,
    v: T,
    counters: Counters,
    flags: BeaconFlags,
    n_m_clipped: bool,
    n_h_clipped: bool,
    run: SimRun<T>,
}

impl<T: Scalar> Runner<T> {
    fn push_fragment(&mut self, samples: &[SimSample<T>]) {
        for s in samples.iter().skip(1) {
            let t = self.t + s.t;
            if let Some(last) = self.run.trace.samples.last() {
                if t <= last.t {
                    continue;
                }
            }
            self.run.trace.samples.push(SimSample { t, ..*s });
        }
    }

    fn event(&mut self, t: T, kind: EventKind, detail: String) {
        self.run.trace.events.push(SimEvent { t, kind, detail });
    }

    fn record(&mut self, phase: Phase, t_end: T, v_end: T, count: Option<u64>) {
        self.run.phases.push(PhaseRecord {
            phase,
            t_start: self.t,
            t_end,
            v_start: self.v,
            v_end,
            count,
        });
    }

    /// Returns false when the run must stop.
    fn harvest(&mut self) -> Result<bool, NodeError> {
        let deficit = T::half() * self.e.c_stor * (self.e.v_h * self.e.v_h - self.v * self.v);
        let h = match harvest_inner(&self.params, self.v, deficit, &mut self.rng) {
            Ok(h) => h,
            Err(NodeError::Physics(PhysicsError::NoNetHarvest { p_geh, p_q })) => {
                self.event(
                    self.t,
                    EventKind::NoNetHarvest,
                    format!("p_geh={p_geh} p_q={p_q}"),
                );
                self.run.status = RunStatus::NoNetHarvest;
                return Ok(false);
            }
            Err(other) => return Err(other),
        };
        self.push_fragment(&h.samples);
        let t_end = self.t + h.t_h;
        self.record(Phase::Harvest, t_end, self.e.v_h, Some(h.n_h.count));
        self.counters.n_h = h.n_h.count;
        self.n_h_clipped = h.n_h.clipped;
        self.t = t_end;
        self.v = self.e.v_h;
        self.event(self.t, EventKind::VhCrossed, format!("n_h={}", h.n_h.count));
        Ok(true)
    }

    fn measure(&mut self, r_m: T) -> Result<bool, NodeError> {
        match measure_inner(&self.params, r_m, &mut self.rng)? {
            MeasureOutcome::Done(m) => {
                self.push_fragment(&m.samples);
                let t_end = self.t + m.t_m;
                self.record(Phase::Measure, t_end, self.e.v_l_r, Some(m.n_m.count));
                self.counters.n_m = m.n_m.count;
                self.flags.insert(BeaconFlags::N_M_VALID);
                self.n_m_clipped = m.n_m.clipped;
                self.t = t_end;
                self.v = self.e.v_l_r;
                self.event(self.t, EventKind::VlrCrossed, format!("n_m={}", m.n_m.count));
                Ok(true)
            }
            MeasureOutcome::Stalled {
                asymptote,
                horizon,
                samples,
            } => {
                self.push_fragment(&samples);
                let t_end = self.t + horizon;
                let v_end = samples.last().map(|s| s.v_stor).unwrap_or(self.v);
                self.record(Phase::Measure, t_end, v_end, None);
                self.t = t_end;
                self.v = v_end;
                self.flags.insert(BeaconFlags::STALL_DETECTED);
                self.event(self.t, EventKind::Stall, format!("v_eq={asymptote}"));
                self.run.status = RunStatus::Stalled;
                Ok(false)
            }
        }
    }

    fn send(&mut self) -> Result<(), NodeError> {
        let mut flags = self.flags;
        flags.set(BeaconFlags::COUNTER_CLIPPED, self.n_m_clipped || self.n_h_clipped);
        let beacon = Beacon::from_counts(
            self.params.node_id,
            self.counters.seq,
            self.counters.n_m,
            self.counters.n_h,
            flags,
        )?;
        let frame = encode_beacon(&beacon)?;
        let d = self.params.send_duration;
        let e_send = self.params.e_act_send;
        let (c, v_h) = (self.e.c_stor, self.e.v_h);
        let samples: Vec<_> = linspace(d, self.params.samples_per_phase)
            .map(|s| SimSample {
                t: s,
                v_stor: (v_h * v_h - T::two() * e_send * s / (d * c)).max(T::zero()).sqrt(),
                v_r: T::zero(),
                phase: Phase::Send,
            })
            .collect();
        self.push_fragment(&samples);
        let v_end = samples.last().map(|s| s.v_stor).unwrap_or(self.v);
        let t_end = self.t + d;
        self.record(Phase::Send, t_end, v_end, None);
        self.t = t_end;
        self.v = v_end;
        self.event(self.t, EventKind::BeaconEmitted, frame_to_hex(&frame));
        self.run.beacons.push(beacon);
        self.run.frames.push(frame);
        self.counters.seq = self.counters.seq.wrapping_add(1);
        Ok(())
    }
}

/// Simulates `n_cycles` passes through the schedule, each active phase
/// preceded by a harvest up to `v_h`. The node starts just after a send, at
/// `v_l_send`. Stalls and a missing net harvest end the run early and are
/// reported through [`SimRun::status`] and a terminal trace event.
///
/// `seed` only feeds the enabled noise sources.
pub fn run_cycles<T: Scalar>(
    params: &NodeParams<T>,
    r_m: T,
    n_cycles: usize,
    seed: u64,
) -> Result<SimRun<T>, NodeError> {
    params.validate()?;
    if n_cycles == 0 {
        return Err(NodeError::InvalidParams("n_cycles must be at least 1".into()));
    }
    if !(r_m > T::zero()) || !r_m.is_finite() {
        return Err(PhysicsError::InvalidArgument(format!("r_m must be positive, got {r_m}")).into());
    }
    let e = params.effective_electrical();
    let mut runner = Runner {
        params: params.clone(),
        e,
        rng: ChaCha8Rng::seed_from_u64(seed),
        t: T::zero(),
        v: e.v_l_send,
        counters: Counters::default(),
        flags: BeaconFlags::empty(),
        n_m_clipped: false,
        n_h_clipped: false,
        run: SimRun {
            trace: SimTrace::default(),
            beacons: Vec::new(),
            frames: Vec::new(),
            phases: Vec::new(),
            counters: Counters::default(),
            status: RunStatus::Completed,
        },
    };
    runner.run.trace.samples.push(SimSample {
        t: T::zero(),
        v_stor: runner.v,
        v_r: T::zero(),
        phase: Phase::Harvest,
    });

    'cycles: for _ in 0..n_cycles {
        for &kind in &params.schedule {
            if !runner.harvest()? {
                break 'cycles;
            }
            match kind {
                PhaseKind::Measure => {
                    if !runner.measure(r_m)? {
                        break 'cycles;
                    }
                }
                PhaseKind::Send => runner.send()?,
            }
        }
    }
    runner.run.counters = runner.counters;
    Ok(runner.run)
}

/// Energy the capacitor gives up over `[v_end, v_start]`, negative when charging.
pub fn phase_energy<T: Scalar>(rec: &PhaseRecord<T>, c_stor: T) -> T {
    T::half() * c_stor * (rec.v_start * rec.v_start - rec.v_end * rec.v_end)
}
