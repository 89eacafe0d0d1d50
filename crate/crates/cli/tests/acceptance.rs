//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tddc_cli::experiments::{run_montecarlo, run_size, run_sweep};
use tddc_cli::ExperimentConfig;
use tddc_core::{
    decode_beacon, discharge_time_constant_net_power, discharge_time_numeric, encode_beacon,
    measurement_energy, power_from_harvest_count, run_harvest, run_measurement, Beacon,
    BeaconFlags, DecodeParams, ElectricalParams, NodeParams, FRAME_LEN,
};

type Outcome = (bool, String);
type Check = (&'static str, fn() -> Outcome);

fn model_slope() -> Outcome {
    let slope = DecodeParams::nominal().model_slope();
    ((slope - 1.629).abs() <= 0.001, format!("slope = {slope:.5} pulses/ohm (1.629 ± 0.001)"))
}

fn balanced_node() -> NodeParams {
    let mut n = NodeParams::nominal();
    n.electrical.p_geh = n.electrical.p_q;
    n.with_default_send_energy()
}

fn discharge_times() -> Outcome {
    let nominal = balanced_node();
    let mut scaled = nominal.clone();
    scaled.electrical.c_stor *= 1.169 / 1.629;
    let scaled = scaled.with_default_send_energy();
    let t_nom = run_measurement(&nominal, 1000.0).map(|m| m.t_m);
    let t_sc = run_measurement(&scaled, 1000.0).map(|m| m.t_m);
    match (t_sc, t_nom) {
        (Ok(ts), Ok(tn)) => (
            (ts * 1e3 - 31.6).abs() <= 0.5 && (tn * 1e3 - 44.0).abs() <= 0.3,
            format!(
                "t_m(1 kOhm) scaled c = {:.3} ms (31.6 ± 0.5), nominal = {:.3} ms (44.0 ± 0.3)",
                ts * 1e3,
                tn * 1e3
            ),
        ),
        (a, b) => (false, format!("measurement failed: {a:?} {b:?}")),
    }
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_at = (0.0, 0.0);
    for r in [1.0, 10.0, 100.0, 1000.0, 5000.0] {
        for frac in [0.0, 0.1, 0.5, 0.9] {
            let mut p = ElectricalParams::nominal();
            p.p_geh = p.p_q + frac * p.v_l_r * p.v_l_r / r;
            let exact = discharge_time_constant_net_power(r, &p).expect("exact").t_m;
            let numeric = discharge_time_numeric(r, &p, 1e-8).expect("numeric").t_m;
            let rel = ((numeric - exact) / exact).abs();
            if rel > worst || rel.is_nan() {
                worst = rel;
                worst_at = (r, frac);
            }
        }
    }
    (
        worst <= 5e-4,
        format!(
            "worst relative deviation {worst:.2e} at r = {} ohm, fraction {} (<= 5e-4)",
            worst_at.0, worst_at.1
        ),
    )
}

fn linearity() -> Outcome {
    let cfg = ExperimentConfig::default();
    let res = run_sweep(&cfg.node, &cfg.decode, &cfg.sweep, None).expect("sweep");
    let cal = res.calibration.expect("fit");
    (
        cal.r_squared >= 0.9999,
        format!(
            "R^2 = {:.7} over {} points, slope {:.5} (>= 0.9999)",
            cal.r_squared, cal.n_points, cal.slope
        ),
    )
}

fn monte_carlo() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 2024,
        ..Default::default()
    };
    assert_eq!(cfg.montecarlo.n_trials, 1000);
    let s = run_montecarlo(&cfg).expect("montecarlo");
    (
        s.slope_interval_contains(1.629) && s.slope_interval_contains(1.169),
        format!(
            "{} trials, fitted slope interval [{:.4}, {:.4}] (must contain 1.169 and 1.629)",
            s.trials.len(),
            s.slope_min,
            s.slope_max
        ),
    )
}

fn calibration_efficacy() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.decode.c_stor *= 0.8;
    let res = run_sweep(&cfg.node, &cfg.decode, &cfg.sweep, None).expect("sweep");
    let (mut unc_lo, mut unc_hi, mut cal_worst) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for row in &res.rows {
        let unc = row.r_est_model.expect("model") / row.r_true - 1.0;
        let cal = row.r_est_calibrated.expect("calibrated") / row.r_true - 1.0;
        unc_lo = unc_lo.min(unc);
        unc_hi = unc_hi.max(unc);
        cal_worst = cal_worst.max(cal.abs());
    }
    // "approximately +25%": every uncalibrated error within two points of 1/0.8 - 1.
    let ok = (unc_lo - 0.25).abs() <= 0.02 && (unc_hi - 0.25).abs() <= 0.02 && cal_worst <= 0.01;
    (
        ok,
        format!(
            "uncalibrated errors [{:+.2}%, {:+.2}%] (about +25%), calibrated worst {:.3}% (<= 1%)",
            unc_lo * 100.0,
            unc_hi * 100.0,
            cal_worst * 100.0
        ),
    )
}

fn harvest_roundtrip() -> Outcome {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for p_geh in [10e-6, 100e-6, 1e-3] {
        let mut node = NodeParams::nominal();
        node.electrical.p_geh = p_geh;
        let node = node.with_default_send_energy();
        let e = measurement_energy(&node.electrical);
        let h = run_harvest(&node, e).expect("harvest");
        let mut dp = DecodeParams::from_node(&node);
        dp.e_act = e;
        let est = power_from_harvest_count(h.n_h.count, &dp).expect("decode");
        let rel = (est - p_geh).abs() / p_geh;
        worst = worst.max(rel);
        detail.push(format!("{:.0} uW -> {:.3e}", p_geh * 1e6, rel));
    }
    (worst <= 1e-3, format!("relative errors {} (<= 1e-3)", detail.join(", ")))
}

fn sizing() -> Outcome {
    let cfg = ExperimentConfig::parse("size.e_act_max_j=1.470e-3\nnode.p_geh_w=1e-3\n").unwrap();
    let s = run_size(&cfg).expect("size");
    let ok = (s.e_m - 396e-6).abs() <= 1e-6
        && (s.c_stor_min - 440e-6).abs() <= 1e-6
        && (s.r_min - 1.228).abs() <= 0.01
        && (s.r_max_hard - 8143.0).abs() <= 10.0;
    (
        ok,
        format!(
            "e_m = {:.2} uJ, c_min = {:.2} uF, r_min = {:.4} ohm, r_max_hard = {:.1} ohm",
            s.e_m * 1e6,
            s.c_stor_min * 1e6,
            s.r_min,
            s.r_max_hard
        ),
    )
}

fn run_tddc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tddc"))
        .args(args)
        .output()
        .expect("spawn tddc")
}

fn end_to_end(r: f64) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sim_dir = dir.path().join("sim");
    let r_arg = r.to_string();
    let out = run_tddc(&[
        "simulate",
        "--r-ohm",
        &r_arg,
        "--cycles",
        "3",
        "--seed",
        "7",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let est_path = dir.path().join("est.csv");
    let out = run_tddc(&[
        "estimate",
        sim_dir.join("beacons.log").to_str().unwrap(),
        "--out",
        est_path.to_str().unwrap(),
    ]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let mut rdr = csv::Reader::from_path(&est_path).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let est: f64 = rec[3].parse().map_err(|_| "bad r_est".to_string())?;
        worst = worst.max((est - r).abs());
        n += 1;
    }
    if n != 3 {
        return Err(format!("expected 3 reports, got {n}"));
    }
    Ok(worst)
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut roundtrip_failures = 0;
    for _ in 0..10_000 {
        let b = Beacon::new(
            rng.random(),
            rng.random(),
            rng.random(),
            rng.random(),
            BeaconFlags::from_bits_truncate(rng.random()),
        );
        let ok = encode_beacon(&b)
            .ok()
            .and_then(|f| decode_beacon(&f).ok())
            .is_some_and(|d| d == b);
        if !ok {
            roundtrip_failures += 1;
        }
    }
    let reference = encode_beacon(&Beacon::new(1, 0, 1629, 14690, BeaconFlags::N_M_VALID)).unwrap();
    let mut accepted_flips = 0;
    for bit in 0..FRAME_LEN * 8 {
        let mut f = reference;
        f[bit / 8] ^= 1 << (bit % 8);
        if decode_beacon(&f).is_ok() {
            accepted_flips += 1;
        }
    }
    let quant_step = 1.0 / DecodeParams::nominal().model_slope();
    let mut e2e = Vec::new();
    let mut e2e_ok = true;
    for r in [50.0, 150.0, 470.0] {
        match end_to_end(r) {
            Ok(err) => {
                e2e_ok &= err <= quant_step;
                e2e.push(format!("{r} ohm off by {err:.3}"));
            }
            Err(e) => {
                e2e_ok = false;
                e2e.push(format!("{r} ohm failed: {}", e.trim()));
            }
        }
    }
    (
        roundtrip_failures == 0 && accepted_flips == 0 && e2e_ok,
        format!(
            "roundtrip failures {roundtrip_failures}/10000, accepted bit flips {accepted_flips}/{}, end-to-end {} (step {quant_step:.3} ohm)",
            FRAME_LEN * 8,
            e2e.join(", ")
        ),
    )
}

fn main() {
    let checks: [Check; 9] = [
        ("model slope", model_slope),
        ("discharge time at 1 kOhm", discharge_times),
        ("numeric vs exact discharge", oracle_equivalence),
        ("sweep linearity", linearity),
        ("monte carlo slope interval", monte_carlo),
        ("calibration efficacy", calibration_efficacy),
        ("harvest power roundtrip", harvest_roundtrip),
        ("sizing identities", sizing),
        ("codec robustness", codec),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let (ok, detail) = check();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {detail}",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
