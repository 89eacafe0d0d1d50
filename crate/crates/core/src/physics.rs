//! Electrical model of the storage capacitor.
//!
//! During a measurement the sensor resistance is the load, so the power drawn
//! from `C_stor` is `V²/R + P_q - P_geh`. Writing `ΔP = P_geh - P_q` and
//! `E = C·V²/2`, the energy obeys a linear ODE with an exact solution:
//!
//! ```text
//! V(t)² = R·ΔP + (V_H² - R·ΔP)·exp(-2t / (R·C))
//! ```
//!
//! which crosses `V_L,R` only while `V_L,R² > R·ΔP`. For `ΔP = 0` this is the
//! plain RC decay `t_m = R·C·ln(V_H / V_L,R)` that the base station inverts.
//! [`DischargeIntegrator`] solves the same ODE numerically and serves as the
//! cross-check for both closed forms.

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Harvested power does not exceed quiescent power, the capacitor never recharges.
    #[error("no net harvest: p_geh={p_geh} W <= p_q={p_q} W")]
    NoNetHarvest { p_geh: f64, p_q: f64 },
    #[error("integrator exceeded {steps} steps")]
    MaxStepsExceeded { steps: usize },
}

fn invalid(msg: impl Into<String>) -> PhysicsError {
    PhysicsError::InvalidArgument(msg.into())
}

/// Electrical constants of the storage node. All values in SI base units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectricalParams<T> {
    /// Storage capacitance (F).
    pub c_stor: T,
    /// Upper detector threshold that ends a harvesting phase (V).
    pub v_h: T,
    /// Lower threshold that ends a resistive measurement (V).
    pub v_l_r: T,
    /// Voltage left after a beacon transmission (V).
    pub v_l_send: T,
    /// Minimum operating voltage of the electronics (V).
    pub v_l_min: T,
    /// Quiescent power drawn at all times (W).
    pub p_q: T,
    /// Harvested power, held constant (W).
    pub p_geh: T,
    /// Series resistance of the GPIO switch path (Ω).
    pub r_gpio: T,
}

impl<T: Scalar> ElectricalParams<T> {
    /// Reference node: 440 µF, 3.15 V / 2.85 V measurement window, 2.0 V
    /// post-send target, 1.8 V brown-out, 2.5 µW quiescent draw and a 10 µW
    /// harvester.
    pub fn nominal() -> Self {
        Self {
            c_stor: T::lit(440e-6),
            v_h: T::lit(3.15),
            v_l_r: T::lit(2.85),
            v_l_send: T::lit(2.0),
            v_l_min: T::lit(1.8),
            p_q: T::lit(2.5e-6),
            p_geh: T::lit(10e-6),
            r_gpio: T::zero(),
        }
    }

    pub fn with_p_geh(mut self, p_geh: T) -> Self {
        self.p_geh = p_geh;
        self
    }

    pub fn with_c_stor(mut self, c_stor: T) -> Self {
        self.c_stor = c_stor;
        self
    }

    pub fn with_r_gpio(mut self, r_gpio: T) -> Self {
        self.r_gpio = r_gpio;
        self
    }

    /// Net power into the capacitor while no load is connected, `P_geh - P_q`.
    #[inline]
    pub fn net_harvest(&self) -> T {
        self.p_geh - self.p_q
    }

    /// Checks the full ordering `v_l_min < v_l_send <= v_l_r < v_h` and signs.
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let all = [
            self.c_stor,
            self.v_h,
            self.v_l_r,
            self.v_l_send,
            self.v_l_min,
            self.p_q,
            self.p_geh,
            self.r_gpio,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("electrical parameters must be finite"));
        }
        if self.c_stor <= T::zero() {
            return Err(invalid("c_stor must be positive"));
        }
        if self.p_q < T::zero() || self.p_geh < T::zero() || self.r_gpio < T::zero() {
            return Err(invalid("p_q, p_geh and r_gpio must be non-negative"));
        }
        if !(self.v_l_min > T::zero()
            && self.v_l_min < self.v_l_send
            && self.v_l_send <= self.v_l_r
            && self.v_l_r < self.v_h)
        {
            return Err(invalid(format!(
                "thresholds must satisfy 0 < v_l_min < v_l_send <= v_l_r < v_h, got {} / {} / {} / {}",
                self.v_l_min, self.v_l_send, self.v_l_r, self.v_h
            )));
        }
        Ok(())
    }

    /// The subset of invariants a discharge needs. Equal thresholds are allowed
    /// and give a zero-length discharge.
    fn check_discharge(&self, r_m: T) -> Result<(), PhysicsError> {
        if !(r_m > T::zero()) || !r_m.is_finite() {
            return Err(invalid(format!("r_m must be positive and finite, got {r_m}")));
        }
        if !(self.c_stor > T::zero()) || !self.c_stor.is_finite() {
            return Err(invalid("c_stor must be positive"));
        }
        if !(self.v_l_r > T::zero()) || !(self.v_h >= self.v_l_r) || !self.v_h.is_finite() {
            return Err(invalid(format!(
                "discharge requires v_h >= v_l_r > 0, got {} / {}",
                self.v_h, self.v_l_r
            )));
        }
        if !(self.r_gpio >= T::zero()) {
            return Err(invalid("r_gpio must be non-negative"));
        }
        if !self.p_geh.is_finite() || !self.p_q.is_finite() {
            return Err(invalid("powers must be finite"));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ElectricalParams<T> {
    fn default() -> Self {
        Self::nominal()
    }
}

/// Why a discharge computation stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination<T> {
    ThresholdCrossed,
    /// The load equilibrium `sqrt(R·ΔP)` sits at or above `v_l_r`; the voltage
    /// settles there and the lower threshold never fires.
    EquilibriumStall { asymptote: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DischargeResult<T> {
    /// Time from `v_h` to `v_l_r` (s). Infinite on a stall.
    pub t_m: T,
    /// Sampled `(t, V)` points, when requested.
    pub v_trajectory: Option<Vec<(T, T)>>,
    pub terminated: Termination<T>,
}

impl<T: Scalar> DischargeResult<T> {
    fn crossed(t_m: T) -> Self {
        Self {
            t_m,
            v_trajectory: None,
            terminated: Termination::ThresholdCrossed,
        }
    }

    fn stalled(asymptote: T) -> Self {
        Self {
            t_m: T::infinity(),
            v_trajectory: None,
            terminated: Termination::EquilibriumStall { asymptote },
        }
    }

    pub fn is_stall(&self) -> bool {
        matches!(self.terminated, Termination::EquilibriumStall { .. })
    }
}

/// Plain RC decay time, `(r_m + r_gpio)·C·ln(V_H / V_L,R)`. Ignores harvested
/// and quiescent power.
pub fn discharge_time_closed_form<T: Scalar>(
    r_m: T,
    p: &ElectricalParams<T>,
) -> Result<T, PhysicsError> {
    p.check_discharge(r_m)?;
    Ok((r_m + p.r_gpio) * p.c_stor * (p.v_h / p.v_l_r).ln())
}

/// Exact discharge time with constant `ΔP = P_geh - P_q` flowing in while the
/// resistor drains the capacitor.
pub fn discharge_time_constant_net_power<T: Scalar>(
    r_m: T,
    p: &ElectricalParams<T>,
) -> Result<DischargeResult<T>, PhysicsError> {
    p.check_discharge(r_m)?;
    let dp = p.net_harvest();
    if dp == T::zero() {
        return discharge_time_closed_form(r_m, p).map(DischargeResult::crossed);
    }
    let r = r_m + p.r_gpio;
    let offset = r * dp;
    let lo = p.v_l_r * p.v_l_r - offset;
    if lo <= T::zero() {
        return Ok(DischargeResult::stalled(offset.sqrt()));
    }
    let hi = p.v_h * p.v_h - offset;
    Ok(DischargeResult::crossed(
        r * p.c_stor * T::half() * (hi / lo).ln(),
    ))
}

/// Storage voltage `t` seconds into a measurement under constant `ΔP`,
/// starting from `v_h`. Follows the exact solution, including the approach to
/// the equilibrium on a stall.
pub fn discharge_voltage_at<T: Scalar>(t: T, r_m: T, p: &ElectricalParams<T>) -> T {
    let r = r_m + p.r_gpio;
    let dp = p.net_harvest();
    let tau = r * p.c_stor;
    if dp == T::zero() {
        return p.v_h * (-t / tau).exp();
    }
    let offset = r * dp;
    let v2 = offset + (p.v_h * p.v_h - offset) * (-T::two() * t / tau).exp();
    v2.max(T::zero()).sqrt()
}

/// Storage voltage after charging for `t` seconds from `v0` at constant net power.
pub fn charge_voltage_at<T: Scalar>(v0: T, t: T, p: &ElectricalParams<T>) -> T {
    let v2 = v0 * v0 + T::two() * p.net_harvest() * t / p.c_stor;
    v2.max(T::zero()).sqrt()
}

/// Numeric solution of `dV/dt = -(V²/R + P_q - P_geh) / (C·V)` with default
/// integrator settings.
pub fn discharge_time_numeric<T: Scalar>(
    r_m: T,
    p: &ElectricalParams<T>,
    rel_tol: T,
) -> Result<DischargeResult<T>, PhysicsError> {
    DischargeIntegrator::new(rel_tol)?.run(r_m, p)
}

/// Adaptive step-doubling RK4 integrator for the measurement discharge.
#[derive(Debug, Clone, Copy)]
pub struct DischargeIntegrator<T> {
    rel_tol: T,
    max_steps: usize,
    max_step: Option<T>,
    record: bool,
}

impl<T: Scalar> DischargeIntegrator<T> {
    pub const DEFAULT_MAX_STEPS: usize = 1_000_000;

    pub fn default_rel_tol() -> T {
        T::lit(1e-8)
    }

    /// `rel_tol` must lie in `[1e-12, 1e-3]`.
    pub fn new(rel_tol: T) -> Result<Self, PhysicsError> {
        if !(rel_tol >= T::lit(1e-12) && rel_tol <= T::lit(1e-3)) {
            return Err(invalid(format!(
                "rel_tol must lie in [1e-12, 1e-3], got {rel_tol}"
            )));
        }
        Ok(Self {
            rel_tol,
            max_steps: Self::DEFAULT_MAX_STEPS,
            max_step: None,
            record: false,
        })
    }

    pub fn with_trajectory(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    /// Caps the step length (s). Useful when the trajectory feeds a quadrature.
    pub fn with_max_step(mut self, h: T) -> Self {
        self.max_step = Some(h);
        self
    }

    pub fn run(&self, r_m: T, p: &ElectricalParams<T>) -> Result<DischargeResult<T>, PhysicsError> {
        p.check_discharge(r_m)?;
        let r = r_m + p.r_gpio;
        let dp = p.net_harvest();
        let c = p.c_stor;
        let slope = move |v: T| -(v * v / r - dp) / (c * v);

        let mut t = T::zero();
        let mut v = p.v_h;
        let mut traj = self.record.then(|| vec![(t, v)]);
        let finish = |t_m: T, traj: Option<Vec<(T, T)>>| DischargeResult {
            t_m,
            v_trajectory: traj,
            terminated: Termination::ThresholdCrossed,
        };
        let stall = |v_eq: T, traj: Option<Vec<(T, T)>>| DischargeResult {
            t_m: T::infinity(),
            v_trajectory: traj,
            terminated: Termination::EquilibriumStall { asymptote: v_eq },
        };
        let asymptote = || if dp > T::zero() { (r * dp).sqrt() } else { T::zero() };

        if p.v_h == p.v_l_r {
            return Ok(finish(T::zero(), traj));
        }
        // The ODE is autonomous: if the slope is non-negative at the target,
        // the trajectory from above can never reach it.
        if slope(p.v_l_r) >= T::zero() || slope(v) >= T::zero() {
            return Ok(stall(asymptote(), traj));
        }

        // Local error is held an order of magnitude below the requested
        // tolerance so that the accumulated error in t_m stays within it.
        let tol = self.rel_tol * T::lit(0.1);
        let mut h = (v / slope(v)).abs() * T::lit(1e-3);
        if let Some(cap) = self.max_step {
            h = h.min(cap);
        }

        let mut steps = 0usize;
        loop {
            steps += 1;
            if steps > self.max_steps {
                return Err(PhysicsError::MaxStepsExceeded {
                    steps: self.max_steps,
                });
            }
            let Some((next, err)) = doubled_step(&slope, v, h) else {
                h = h * T::lit(0.25);
                continue;
            };
            let scale = tol * next.abs();
            if err > scale {
                h = h * shrink_factor(err, scale);
                continue;
            }

            if next <= p.v_l_r {
                let s = self.locate_crossing(&slope, v, h, p.v_l_r, t);
                let t_m = t + s;
                if let Some(tr) = traj.as_mut() {
                    tr.push((t_m, p.v_l_r));
                }
                return Ok(finish(t_m, traj));
            }

            t = t + h;
            v = next;
            if let Some(tr) = traj.as_mut() {
                tr.push((t, v));
            }
            if slope(v) >= T::zero() {
                return Ok(stall(asymptote(), traj));
            }
            h = h * grow_factor(err, scale);
            if let Some(cap) = self.max_step {
                h = h.min(cap);
            }
        }
    }

    /// Bisects the sub-step `s ∈ (0, h]` at which the RK4 trajectory from `v`
    /// reaches `target`.
    fn locate_crossing<F: Fn(T) -> T>(&self, f: &F, v: T, h: T, target: T, t0: T) -> T {
        let mut lo = T::zero();
        let mut hi = h;
        let width_tol = (t0 + h) * self.rel_tol * T::lit(1e-3);
        for _ in 0..200 {
            if hi - lo <= width_tol {
                break;
            }
            let mid = (lo + hi) * T::half();
            let reached = doubled_step(f, v, mid).map_or(T::zero(), |(y, _)| y);
            if reached > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo + hi) * T::half()
    }
}

fn rk4<T: Scalar, F: Fn(T) -> T>(f: &F, y: T, h: T) -> T {
    let half = T::half();
    let k1 = f(y);
    let k2 = f(y + half * h * k1);
    let k3 = f(y + half * h * k2);
    let k4 = f(y + h * k3);
    y + h / T::lit(6.0) * (k1 + T::two() * k2 + T::two() * k3 + k4)
}

/// One step of length `h` taken as a full RK4 step and as two half steps.
/// Returns the Richardson-extrapolated value and the error estimate, or
/// `None` if the step overshoots through zero volts.
fn doubled_step<T: Scalar, F: Fn(T) -> T>(f: &F, y: T, h: T) -> Option<(T, T)> {
    let full = rk4(f, y, h);
    let hh = h * T::half();
    let halves = rk4(f, rk4(f, y, hh), hh);
    if !(full > T::zero()) || !(halves > T::zero()) {
        return None;
    }
    let diff = (halves - full) / T::lit(15.0);
    Some((halves + diff, diff.abs()))
}

fn shrink_factor<T: Scalar>(err: T, scale: T) -> T {
    (T::lit(0.9) * (scale / err).powf(T::lit(0.2))).max(T::lit(0.1))
}

fn grow_factor<T: Scalar>(err: T, scale: T) -> T {
    if err == T::zero() {
        return T::lit(5.0);
    }
    (T::lit(0.9) * (scale / err).powf(T::lit(0.2))).clamp(T::one(), T::lit(5.0))
}

/// Time to recover `e_act` joules at constant net harvest `P_geh - P_q`.
pub fn charge_time<T: Scalar>(e_act: T, p: &ElectricalParams<T>) -> Result<T, PhysicsError> {
    if !(e_act >= T::zero()) || !e_act.is_finite() {
        return Err(invalid(format!("e_act must be non-negative, got {e_act}")));
    }
    let dp = p.net_harvest();
    if !(dp > T::zero()) {
        return Err(PhysicsError::NoNetHarvest {
            p_geh: p.p_geh.as_f64(),
            p_q: p.p_q.as_f64(),
        });
    }
    Ok(e_act / dp)
}

/// Energy drawn from the capacitor by one measurement, `C·(V_H² - V_L,R²)/2`.
pub fn measurement_energy<T: Scalar>(p: &ElectricalParams<T>) -> T {
    T::half() * p.c_stor * (p.v_h * p.v_h - p.v_l_r * p.v_l_r)
}

/// Smallest capacitance that delivers `e_act_max` without falling below `v_l_min`.
pub fn min_storage_capacitance<T: Scalar>(
    e_act_max: T,
    v_h: T,
    v_l_min: T,
) -> Result<T, PhysicsError> {
    if !(v_h > v_l_min && v_l_min > T::zero()) {
        return Err(invalid(format!(
            "need v_h > v_l_min > 0, got {v_h} / {v_l_min}"
        )));
    }
    if !(e_act_max >= T::zero()) || !e_act_max.is_finite() {
        return Err(invalid("e_act_max must be non-negative"));
    }
    Ok(T::two() * e_act_max / (v_h * v_h - v_l_min * v_l_min))
}

/// Resistance interval over which the linear count model holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityRange<T> {
    /// Two counts' worth of resistance; below it the reading is quantization noise.
    pub r_min: T,
    /// `r_max_hard / margin`.
    pub r_max: T,
    /// Total series resistance at which the discharge stalls, `V_L,R² / ΔP`.
    /// Infinite when `ΔP <= 0`.
    pub r_max_hard: T,
}

impl<T: Scalar> ValidityRange<T> {
    pub fn contains(&self, r: T) -> bool {
        r > self.r_min && r <= self.r_max
    }
}

pub fn validity_range<T: Scalar>(
    p: &ElectricalParams<T>,
    f_clk: T,
    margin: T,
) -> Result<ValidityRange<T>, PhysicsError> {
    if !(margin >= T::one()) {
        return Err(invalid(format!("margin must be >= 1, got {margin}")));
    }
    if !(f_clk > T::zero()) || !f_clk.is_finite() {
        return Err(invalid("f_clk must be positive"));
    }
    if !(p.c_stor > T::zero()) || !(p.v_h > p.v_l_r && p.v_l_r > T::zero()) {
        return Err(invalid("need c_stor > 0 and v_h > v_l_r > 0"));
    }
    let r_min = T::two() / (f_clk * p.c_stor * (p.v_h / p.v_l_r).ln());
    let dp = p.net_harvest();
    let r_max_hard = if dp > T::zero() {
        p.v_l_r * p.v_l_r / dp
    } else {
        T::infinity()
    };
    Ok(ValidityRange {
        r_min,
        r_max: r_max_hard / margin,
        r_max_hard,
    })
}

/// Ratio of resistive load power at `V_L,R` to the net harvest magnitude.
/// Infinite when `P_geh = P_q`.
pub fn condition_margin<T: Scalar>(r_m: T, p: &ElectricalParams<T>) -> Result<T, PhysicsError> {
    if !(r_m > T::zero()) {
        return Err(invalid(format!("r_m must be positive, got {r_m}")));
    }
    let dp = p.net_harvest().abs();
    if dp == T::zero() {
        return Ok(T::infinity());
    }
    Ok(p.v_l_r * p.v_l_r / r_m / dp)
}
