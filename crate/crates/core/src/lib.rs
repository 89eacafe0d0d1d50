//! Simulation and analysis toolkit for a battery-free resistive sensor node
//! that reads a resistance as the discharge time of its own storage capacitor.
//!
//! The node harvests energy into `C_stor` until the upper detector threshold
//! fires, then uses the sensor resistance as the load and counts low-power
//! timer pulses until the lower threshold fires. The count travels to a base
//! station inside a broadcast beacon, where it is decoded back into ohms.
//!
//! Modules:
//! - [`physics`]: storage-capacitor energy model, closed-form and numeric discharge.
//! - [`node`]: firmware work cycle (harvest, measure, send), counters and traces.
//! - [`wire`]: 15-byte beacon codec, hex log format and a lossy broadcast channel.
//! - [`station`]: count-to-ohm decoding, calibration fits, error metrics, log ingestion.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root pin the common types to `f64`, which is what the
//! command-line harness uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod node;
pub mod physics;
pub mod scalar;
pub mod station;
pub mod wire;

pub use scalar::Scalar;

pub use node::{
    quantize_count, run_cycles, run_harvest, run_measurement, snap_to_pvd_grid, Counters,
    DischargeMode, EventKind, NodeError, Phase, PhaseKind, Quantized, SimEvent, SimRun,
    SimSample,
};
pub use physics::{
    charge_time, condition_margin, discharge_time_closed_form, discharge_time_constant_net_power,
    discharge_time_numeric, measurement_energy, min_storage_capacitance, validity_range,
    DischargeIntegrator, PhysicsError, Termination,
};
pub use station::{
    apply_calibration, error_metrics, fit_calibration, ingest_csv, ingest_log,
    power_from_harvest_count, resistance_from_count, CalibrationKind, EstimateSource,
    IngestOutcome, StationError,
};
pub use wire::{
    channel_pass, decode_beacon, encode_beacon, Beacon, BeaconFlags, ChannelConfig, WireError,
    FRAME_LEN,
};

pub type ElectricalParams = physics::ElectricalParams<f64>;
pub type DischargeResult = physics::DischargeResult<f64>;
pub type ValidityRange = physics::ValidityRange<f64>;
pub type NodeParams = node::NodeParams<f64>;
pub type SimTrace = node::SimTrace<f64>;
pub type Measurement = node::Measurement<f64>;
pub type Harvest = node::Harvest<f64>;
pub type DecodeParams = station::DecodeParams<f64>;
pub type CalibrationModel = station::CalibrationModel<f64>;
pub type EstimateReport = station::EstimateReport<f64>;
pub type ErrorMetrics = station::ErrorMetrics<f64>;

pub type ElectricalParamsF32 = physics::ElectricalParams<f32>;
pub type NodeParamsF32 = node::NodeParams<f32>;
pub type DecodeParamsF32 = station::DecodeParams<f32>;
pub type CalibrationModelF32 = station::CalibrationModel<f32>;
