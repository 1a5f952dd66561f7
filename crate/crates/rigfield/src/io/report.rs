//! Report emission: per-epoch history CSV, a mean±std summary table over
//! the last epochs, and a self-contained SVG with loss and error curves.
//! Plots are presentational; every check runs on the CSV values.

use super::metrics::{summarize_history, CalibrationErrors};
use super::{fmt17, parse_f64, DataError};
use crate::geometry::{Quat, Vec3};
use crate::losses::LossParts;
use crate::optim::calib::{CalibrationState, SensorCalib};
use crate::optim::train::{EpochReport, AVERAGE_WINDOW};
use std::path::Path;

pub const HISTORY_HEADER: &str =
    "epoch,sensor,tx,ty,tz,qw,qx,qy,qz,delta,loss_c,loss_d,loss_ssim,loss_ds";

/// One sensor row per epoch; the loss columns repeat the epoch's values.
pub fn history_to_csv(history: &[EpochReport]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        for s in &r.calib.sensors {
            let q = s.rotation;
            let t = s.translation;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                s.name,
                fmt17(t.x),
                fmt17(t.y),
                fmt17(t.z),
                fmt17(q.w),
                fmt17(q.x),
                fmt17(q.y),
                fmt17(q.z),
                fmt17(s.delta),
                fmt17(r.losses.color),
                fmt17(r.losses.depth),
                fmt17(r.losses.ssim),
                fmt17(r.losses.smooth),
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub sensor: String,
    pub translation: Vec3,
    pub rotation: Quat,
    pub delta: f64,
    pub losses: LossParts,
}

pub fn parse_history_csv(path: &Path) -> Result<Vec<HistoryRow>, DataError> {
    let text = super::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln0, raw) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let line = raw.trim();
        if line.is_empty() || ln == 1 {
            if ln == 1 && line != HISTORY_HEADER {
                return Err(DataError::parse(path, 1, "unexpected CSV header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(DataError::parse(path, ln, format!("expected 14 columns, got {}", f.len())));
        }
        rows.push(HistoryRow {
            epoch: f[0]
                .parse()
                .map_err(|_| DataError::parse(path, ln, "bad epoch"))?,
            sensor: f[1].to_string(),
            translation: Vec3::new(
                parse_f64(path, ln, f[2])?,
                parse_f64(path, ln, f[3])?,
                parse_f64(path, ln, f[4])?,
            ),
            rotation: Quat::new(
                parse_f64(path, ln, f[5])?,
                parse_f64(path, ln, f[6])?,
                parse_f64(path, ln, f[7])?,
                parse_f64(path, ln, f[8])?,
            ),
            delta: parse_f64(path, ln, f[9])?,
            losses: LossParts {
                color: parse_f64(path, ln, f[10])?,
                depth: parse_f64(path, ln, f[11])?,
                ssim: parse_f64(path, ln, f[12])?,
                smooth: parse_f64(path, ln, f[13])?,
            },
        });
    }
    Ok(rows)
}

/// Rebuild per-epoch calibration snapshots from parsed history rows (the
/// reference sensor is inferred from `gt`).
pub fn rows_to_reports(rows: &[HistoryRow], gt: &CalibrationState) -> Vec<EpochReport> {
    let mut reports: Vec<EpochReport> = Vec::new();
    for row in rows {
        if reports.last().map(|r| r.epoch) != Some(row.epoch) {
            reports.push(EpochReport {
                epoch: row.epoch,
                losses: row.losses,
                total: 0.0,
                calib: CalibrationState { sensors: Vec::new() },
            });
        }
        let report = reports.last_mut().unwrap();
        let is_ref = gt
            .sensors
            .iter()
            .any(|s| s.reference && s.name == row.sensor);
        report.calib.sensors.push(if is_ref {
            SensorCalib::reference(&row.sensor)
        } else {
            SensorCalib::new(&row.sensor, row.rotation, row.translation, row.delta)
        });
    }
    reports
}

/// Summary table over the last epochs: `mean±std` per sensor, formatted to
/// match the usual reporting precision (cm and ms to one decimal, degrees
/// to two).
pub fn report_table(history: &[EpochReport], gt: Option<&CalibrationState>) -> String {
    let mut out = String::new();
    match gt {
        Some(gt) => {
            let errors: CalibrationErrors =
                summarize_history(history, gt, AVERAGE_WINDOW).expect("sensor sets match");
            out.push_str(&format!(
                "{:<12} {:>16} {:>14} {:>15}\n",
                "sensor", "trans err (cm)", "rot err (deg)", "clock err (ms)"
            ));
            for e in &errors {
                out.push_str(&format!(
                    "{:<12} {:>16} {:>14} {:>15}\n",
                    e.name,
                    format!("{:.1}±{:.1}", e.translation_cm.mean, e.translation_cm.std),
                    format!("{:.2}±{:.2}", e.rotation_deg.mean, e.rotation_deg.std),
                    format!("{:.1}±{:.1}", e.temporal_ms.mean, e.temporal_ms.std),
                ));
            }
        }
        None => {
            out.push_str(&format!(
                "{:<12} {:>44} {:>30} {:>12}\n",
                "sensor", "rotation (qw qx qy qz)", "translation (m)", "delta (s)"
            ));
            let last = &history[history.len() - 1].calib;
            for s in &last.sensors {
                let q = s.rotation;
                out.push_str(&format!(
                    "{:<12} {:>44} {:>30} {:>12}\n",
                    s.name,
                    format!("{:+.6} {:+.6} {:+.6} {:+.6}", q.w, q.x, q.y, q.z),
                    format!("{:+.4} {:+.4} {:+.4}", s.translation.x, s.translation.y, s.translation.z),
                    format!("{:+.5}", s.delta),
                ));
            }
        }
    }
    out
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

/// Map a series into plot coordinates with a log-scaled y axis.
fn series_points(values: &[f64], x0: f64, y0: f64, w: f64, h: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let n = values.len().max(2) as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = x0 + w * i as f64 / (n - 1.0);
            let t = ((v.max(1e-12).ln() - lo) / (hi - lo)).clamp(0.0, 1.0);
            (x, y0 + h * (1.0 - t))
        })
        .collect()
}

/// Self-contained SVG: total-loss curve plus per-sensor error curves when
/// ground truth is available.
pub fn curves_svg(history: &[EpochReport], gt: Option<&CalibrationState>) -> String {
    let (width, height) = (720.0, 380.0);
    let (x0, y0, w, h) = (60.0, 20.0, width - 90.0, height - 70.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>\n"
    );

    let mut series: Vec<(String, Vec<f64>, &str)> = Vec::new();
    series.push((
        "total loss".into(),
        history.iter().map(|r| r.total.max(1e-12)).collect(),
        "#1f77b4",
    ));
    if let Some(gt) = gt {
        let palette = ["#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        for (si, sensor) in gt.sensors.iter().enumerate() {
            if sensor.reference {
                continue;
            }
            let vals: Vec<f64> = history
                .iter()
                .map(|r| {
                    let errs = super::metrics::metrics(&r.calib, gt).expect("sensor sets match");
                    errs.iter()
                        .find(|e| e.name == sensor.name)
                        .map(|e| e.translation_cm)
                        .unwrap_or(0.0)
                })
                .collect();
            series.push((
                format!("{} trans err (cm)", sensor.name),
                vals,
                palette[si % palette.len()],
            ));
        }
    }

    let all: Vec<f64> = series.iter().flat_map(|(_, v, _)| v.iter().copied()).collect();
    let lo = all.iter().fold(f64::INFINITY, |a, b| a.min(*b)).max(1e-12).ln() - 0.2;
    let hi = all.iter().fold(1e-12f64, |a, b| a.max(*b)).ln() + 0.2;

    for (li, (label, values, color)) in series.iter().enumerate() {
        svg.push_str(&polyline(&series_points(values, x0, y0, w, h, lo, hi), color));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n",
            x0 + 8.0,
            y0 + 16.0 + 14.0 * li as f64
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" fill=\"#333\">epoch 0..{} (log y)</text>\n",
        x0,
        height - 18.0,
        history.len().saturating_sub(1)
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;

    fn fake_history(n: usize) -> (Vec<EpochReport>, CalibrationState) {
        let gt = CalibrationState {
            sensors: vec![
                SensorCalib::reference("cam0"),
                SensorCalib::new(
                    "cam1",
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.2),
                    Vec3::new(0.5, 0.0, 0.0),
                    0.01,
                ),
            ],
        };
        let history = (0..n)
            .map(|e| {
                let mut calib = gt.clone();
                calib.sensors[1].translation += Vec3::new(0.023, 0.0, 0.0);
                EpochReport {
                    epoch: e,
                    losses: LossParts { color: 0.1 / (e + 1) as f64, ..Default::default() },
                    total: 0.1 / (e + 1) as f64,
                    calib,
                }
            })
            .collect();
        (history, gt)
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let (history, _) = fake_history(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        std::fs::write(&path, history_to_csv(&history)).unwrap();
        let rows = parse_history_csv(&path).unwrap();
        assert_eq!(rows.len(), 5 * 2);
        for (i, row) in rows.iter().enumerate() {
            let r = &history[i / 2];
            let s = &r.calib.sensors[i % 2];
            assert_eq!(row.epoch, r.epoch);
            assert_eq!(row.sensor, s.name);
            assert_eq!(row.translation.x.to_bits(), s.translation.x.to_bits());
            assert_eq!(row.rotation.w.to_bits(), s.rotation.w.to_bits());
            assert_eq!(row.delta.to_bits(), s.delta.to_bits());
            assert_eq!(row.losses.color.to_bits(), r.losses.color.to_bits());
        }
    }

    #[test]
    fn table_formats_mean_pm_std() {
        // Constant 2.3 cm error history: "2.3±0.0".
        let (history, gt) = fake_history(12);
        let table = report_table(&history, Some(&gt));
        assert!(table.contains("2.3±0.0"), "constant history row: {table}");
        assert!(table.contains("cam1"));
    }

    #[test]
    fn table_without_gt_lists_values_only() {
        let (history, _) = fake_history(3);
        let table = report_table(&history, None);
        assert!(table.contains("delta (s)"));
        assert!(!table.contains("err"), "no error columns without gt");
    }

    #[test]
    fn svg_is_self_contained() {
        let (history, gt) = fake_history(8);
        let svg = curves_svg(&history, Some(&gt));
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(!svg.contains("href"), "no external assets");
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn rows_rebuild_reports() {
        let (history, gt) = fake_history(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        std::fs::write(&path, history_to_csv(&history)).unwrap();
        let rows = parse_history_csv(&path).unwrap();
        let reports = rows_to_reports(&rows, &gt);
        assert_eq!(reports.len(), 4);
        assert!(reports[0].calib.sensors[0].reference);
        assert_eq!(
            reports[2].calib.sensors[1].delta.to_bits(),
            history[2].calib.sensors[1].delta.to_bits()
        );
    }
}
