//! Calibration error metrics: translation (cm, L2), rotation (degrees,
//! geodesic) and clock offset (ms), plus mean/std summaries over the last
//! epochs (population standard deviation, pinned by tests).

use crate::geometry::rotation_geodesic_deg;
use crate::optim::calib::{CalibError, CalibrationState};
use crate::optim::train::EpochReport;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorErrors {
    pub name: String,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub temporal_ms: f64,
}

/// Per-sensor calibration error between an estimate and ground truth.
/// Symmetric in its arguments; sensors are matched by name.
pub fn metrics(est: &CalibrationState, gt: &CalibrationState) -> Result<Vec<SensorErrors>, CalibError> {
    if est.sensors.len() != gt.sensors.len() {
        return Err(CalibError::SensorSetMismatch(format!(
            "{} vs {} sensors",
            est.sensors.len(),
            gt.sensors.len()
        )));
    }
    let mut out = Vec::with_capacity(est.sensors.len());
    for e in &est.sensors {
        let g = gt
            .sensors
            .iter()
            .find(|g| g.name == e.name)
            .ok_or_else(|| CalibError::SensorSetMismatch(format!("sensor {} missing in gt", e.name)))?;
        out.push(SensorErrors {
            name: e.name.clone(),
            translation_cm: (e.translation - g.translation).norm() * 100.0,
            rotation_deg: rotation_geodesic_deg(&e.rotation.to_mat3(), &g.rotation.to_mat3()),
            temporal_ms: (e.delta - g.delta).abs() * 1000.0,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn error_stats(values: &[f64]) -> ErrorStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ErrorStats { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorErrorSummary {
    pub name: String,
    pub translation_cm: ErrorStats,
    pub rotation_deg: ErrorStats,
    pub temporal_ms: ErrorStats,
}

/// Mean and standard deviation of the per-epoch errors over the last
/// `window` snapshots.
pub type CalibrationErrors = Vec<SensorErrorSummary>;

pub fn summarize_history(
    history: &[EpochReport],
    gt: &CalibrationState,
    window: usize,
) -> Result<CalibrationErrors, CalibError> {
    assert!(!history.is_empty());
    let take = window.min(history.len());
    let snaps = &history[history.len() - take..];
    let per_epoch: Vec<Vec<SensorErrors>> = snaps
        .iter()
        .map(|r| metrics(&r.calib, gt))
        .collect::<Result<_, _>>()?;
    let n_sensors = per_epoch[0].len();
    let mut out = Vec::with_capacity(n_sensors);
    for si in 0..n_sensors {
        let t: Vec<f64> = per_epoch.iter().map(|e| e[si].translation_cm).collect();
        let r: Vec<f64> = per_epoch.iter().map(|e| e[si].rotation_deg).collect();
        let d: Vec<f64> = per_epoch.iter().map(|e| e[si].temporal_ms).collect();
        out.push(SensorErrorSummary {
            name: per_epoch[0][si].name.clone(),
            translation_cm: error_stats(&t),
            rotation_deg: error_stats(&r),
            temporal_ms: error_stats(&d),
        });
    }
    Ok(out)
}
