//! Flat `key=value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! seed=42
//! node.c_stor_f=440e-6
//! node.p_geh_w=1e-3
//! decode.c_stor_f=352e-6
//! sweep.r_values_ohm=50,100,150
//! montecarlo.n_trials=1000
//! ```
//!
//! Station-side `decode.*` values default to the node's nominal values, so a
//! misdeclared station is modelled by overriding only the `decode.*` key.

use std::collections::BTreeMap;
use std::path::Path;

use tddc_core::node::{DischargeMode, PhaseKind};
use tddc_core::{ChannelConfig, DecodeParams, NodeParams};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub n_trials: usize,
    /// Relative capacitor tolerance (uniform ±).
    pub c_tol: f64,
    /// Absolute threshold tolerance in volts (uniform ±), applied to both thresholds.
    pub v_thresh_tol: f64,
    /// Relative clock tolerance (uniform ±).
    pub clk_tol: f64,
    pub r_gpio_range: (f64, f64),
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            c_tol: 0.20,
            v_thresh_tol: 0.05,
            clk_tol: 0.05,
            r_gpio_range: (0.0, 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub node: NodeParams,
    pub decode: DecodeParams,
    /// Minimum load-to-harvest ratio for an estimate to count as in range.
    pub margin: f64,
    pub sweep: Vec<f64>,
    pub montecarlo: MonteCarloConfig,
    pub seed: u64,
    pub channel: ChannelConfig,
    /// Largest active-phase energy for capacitor sizing; defaults to the
    /// larger of the measurement and send energies.
    pub e_act_max: Option<f64>,
}

pub fn default_sweep() -> Vec<f64> {
    (1..=16).map(|k| 50.0 * k as f64).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let node = NodeParams::nominal();
        Self {
            decode: DecodeParams::from_node(&node),
            node,
            margin: 10.0,
            sweep: default_sweep(),
            montecarlo: MonteCarloConfig::default(),
            seed: 0,
            channel: ChannelConfig::lossless(),
            e_act_max: None,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn num(key: &str, v: &str) -> Result<f64, CliError> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| cfg_err(format!("{key}: '{v}' is not a number")))
}

fn int<I: std::str::FromStr>(key: &str, v: &str) -> Result<I, CliError> {
    v.trim()
        .parse::<I>()
        .map_err(|_| cfg_err(format!("{key}: '{v}' is not a valid integer")))
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(cfg_err(format!("{key}: '{other}' is not a boolean"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(cfg_err(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }

        let mut cfg = Self::default();
        let mut send_energy_set = false;
        // Node keys first: decode defaults are derived from the final node.
        for (k, v) in entries.iter().filter(|(k, _)| k.starts_with("node.")) {
            let n = &mut cfg.node;
            let e = &mut n.electrical;
            match k.as_str() {
                "node.c_stor_f" => e.c_stor = num(k, v)?,
                "node.v_h_v" => e.v_h = num(k, v)?,
                "node.v_l_r_v" => e.v_l_r = num(k, v)?,
                "node.v_l_send_v" => e.v_l_send = num(k, v)?,
                "node.v_l_min_v" => e.v_l_min = num(k, v)?,
                "node.p_q_w" => e.p_q = num(k, v)?,
                "node.p_geh_w" => e.p_geh = num(k, v)?,
                "node.r_gpio_ohm" => e.r_gpio = num(k, v)?,
                "node.f_clk_hz" => n.f_clk_nominal = num(k, v)?,
                "node.f_clk_error" => n.f_clk_error = num(k, v)?,
                "node.e_act_send_j" => {
                    n.e_act_send = num(k, v)?;
                    send_energy_set = true;
                }
                "node.pvd_grid_enabled" => n.pvd_grid_enabled = flag(k, v)?,
                "node.pvd_grid_step_v" => n.pvd_grid_step = num(k, v)?,
                "node.schedule" => {
                    n.schedule = v
                        .split(',')
                        .map(|s| s.parse::<PhaseKind>().map_err(|e| cfg_err(format!("{k}: {e}"))))
                        .collect::<Result<_, _>>()?
                }
                "node.discharge_mode" => {
                    n.discharge_mode = match v.as_str() {
                        "net-power" => DischargeMode::NetPower,
                        "closed-form" => DischargeMode::ClosedForm,
                        "numeric" => DischargeMode::Numeric { rel_tol: 1e-8 },
                        other => {
                            return Err(cfg_err(format!(
                                "{k}: expected net-power, numeric or closed-form, got '{other}'"
                            )))
                        }
                    }
                }
                "node.rel_tol" => {}
                "node.counter_bits" => n.counter_bits = int(k, v)?,
                "node.count_jitter" => n.count_jitter = flag(k, v)?,
                "node.node_id" => n.node_id = int(k, v)?,
                "node.send_duration_s" => n.send_duration = num(k, v)?,
                "node.samples_per_phase" => n.samples_per_phase = int(k, v)?,
                other => return Err(cfg_err(format!("unknown key '{other}'"))),
            }
        }
        if let Some(v) = entries.get("node.rel_tol") {
            let tol = num("node.rel_tol", v)?;
            match &mut cfg.node.discharge_mode {
                DischargeMode::Numeric { rel_tol } => *rel_tol = tol,
                _ => {
                    return Err(cfg_err(
                        "node.rel_tol only applies with node.discharge_mode=numeric",
                    ))
                }
            }
        }
        if !send_energy_set {
            cfg.node = cfg.node.with_default_send_energy();
        }
        cfg.decode = DecodeParams::from_node(&cfg.node);

        for (k, v) in entries.iter().filter(|(k, _)| !k.starts_with("node.")) {
            let d = &mut cfg.decode;
            let mc = &mut cfg.montecarlo;
            match k.as_str() {
                "seed" => cfg.seed = int(k, v)?,
                "decode.f_clk_hz" => d.f_clk = num(k, v)?,
                "decode.c_stor_f" => d.c_stor = num(k, v)?,
                "decode.v_h_v" => d.v_h = num(k, v)?,
                "decode.v_l_r_v" => d.v_l_r = num(k, v)?,
                "decode.p_q_w" => d.p_q = num(k, v)?,
                "decode.e_act_j" => d.e_act = num(k, v)?,
                "decode.margin" => cfg.margin = num(k, v)?,
                "sweep.r_values_ohm" => cfg.sweep = list(k, v)?,
                "montecarlo.n_trials" => mc.n_trials = int(k, v)?,
                "montecarlo.c_tol" => mc.c_tol = num(k, v)?,
                "montecarlo.v_thresh_tol_v" => mc.v_thresh_tol = num(k, v)?,
                "montecarlo.clk_tol" => mc.clk_tol = num(k, v)?,
                "montecarlo.r_gpio_min_ohm" => mc.r_gpio_range.0 = num(k, v)?,
                "montecarlo.r_gpio_max_ohm" => mc.r_gpio_range.1 = num(k, v)?,
                "channel.loss_probability" => cfg.channel.loss_probability = num(k, v)?,
                "channel.duplicate_probability" => cfg.channel.duplicate_probability = num(k, v)?,
                "size.e_act_max_j" => cfg.e_act_max = Some(num(k, v)?),
                other => return Err(cfg_err(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.node.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.decode.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.channel.validate().map_err(|e| cfg_err(e.to_string()))?;
        if !(self.margin >= 1.0) {
            return Err(cfg_err(format!("decode.margin must be >= 1, got {}", self.margin)));
        }
        if let Some(r) = self.sweep.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(cfg_err(format!("sweep values must be positive, got {r}")));
        }
        let mc = &self.montecarlo;
        if mc.n_trials == 0 {
            return Err(cfg_err("montecarlo.n_trials must be at least 1"));
        }
        for (name, tol) in [
            ("montecarlo.c_tol", mc.c_tol),
            ("montecarlo.v_thresh_tol_v", mc.v_thresh_tol),
            ("montecarlo.clk_tol", mc.clk_tol),
        ] {
            if !(tol >= 0.0) || !tol.is_finite() {
                return Err(cfg_err(format!("{name} must be non-negative, got {tol}")));
            }
        }
        if mc.c_tol >= 1.0 {
            return Err(cfg_err("montecarlo.c_tol must stay below 1"));
        }
        if mc.clk_tol >= 0.2 {
            return Err(cfg_err("montecarlo.clk_tol must stay below 0.2"));
        }
        let (lo, hi) = mc.r_gpio_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(cfg_err(format!("r_gpio range [{lo}, {hi}] is invalid")));
        }
        if let Some(e) = self.e_act_max {
            if !(e > 0.0) {
                return Err(cfg_err("size.e_act_max_j must be positive"));
            }
        }
        Ok(())
    }
}
