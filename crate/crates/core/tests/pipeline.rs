use tddc_core::station::write_reports_csv;
use tddc_core::wire::{read_log, write_log};
use tddc_core::{
    channel_pass, decode_beacon, fit_calibration, ingest_log, run_cycles, run_measurement,
    CalibrationKind, ChannelConfig, DecodeParams, DecodeParamsF32, NodeParams, NodeParamsF32,
};

#[test]
fn node_to_station_over_lossy_channel() {
    let mut node = NodeParams::nominal();
    node.count_jitter = true;
    let run = run_cycles(&node, 680.0, 40, 5).unwrap();
    assert_eq!(run.beacons.len(), 40);

    let ch = ChannelConfig {
        loss_probability: 0.25,
        duplicate_probability: 0.25,
    };
    let delivered = channel_pass(&run.frames, &ch, 99).unwrap();
    let mut log = Vec::new();
    write_log(&mut log, &delivered).unwrap();

    let dp = DecodeParams::from_node(&node);
    let out = ingest_log(log.as_slice(), &dp, None, 10.0).unwrap();
    assert_eq!(out.rejected, 0);
    assert_eq!(out.reports.len() + out.duplicates, delivered.len());
    let mut seqs: Vec<u8> = out.reports.iter().map(|r| r.seq).collect();
    seqs.dedup();
    assert_eq!(seqs.len(), out.reports.len());
    for r in &out.reports {
        assert!((r.r_m_est - 680.0).abs() < 2.0 / dp.model_slope(), "{}", r.r_m_est);
        assert!(r.in_range);
        let p = r.p_geh_est.unwrap();
        assert!((p - 10e-6).abs() / 10e-6 < 1e-3, "{p}");
    }
    let mut csv = Vec::new();
    write_reports_csv(&out.reports, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), out.reports.len() + 1);
}

#[test]
fn log_lines_decode_back_to_frames() {
    let run = run_cycles(&NodeParams::nominal(), 100.0, 5, 0).unwrap();
    let mut log = Vec::new();
    write_log(&mut log, &run.frames).unwrap();
    let parsed = read_log(log.as_slice()).unwrap();
    for ((line, frame), beacon) in parsed.into_iter().zip(&run.beacons) {
        assert!(line >= 1);
        assert_eq!(decode_beacon(&frame.unwrap()).unwrap(), *beacon);
    }
}

#[test]
fn calibration_from_simulated_sweep() {
    let node = NodeParams::nominal();
    let pts: Vec<(f64, f64)> = (1..=16)
        .map(|k| {
            let r = 50.0 * k as f64;
            (r, run_measurement(&node, r).unwrap().n_m.count as f64)
        })
        .collect();
    let m = fit_calibration(&pts, CalibrationKind::Affine).unwrap();
    assert!(m.r_squared > 0.9999);
    assert!((m.slope - 1.629).abs() < 0.01);
}

#[test]
fn single_precision_pipeline() {
    let node = NodeParamsF32::nominal();
    let m = run_measurement(&node, 1000.0f32).unwrap();
    assert!((m.n_m.count as i64 - 1629).abs() <= 1);
    let dp = DecodeParamsF32::from_node(&node);
    let r = tddc_core::resistance_from_count(m.n_m.count, &dp);
    assert!((r - 1000.0).abs() < 2.0);
}
