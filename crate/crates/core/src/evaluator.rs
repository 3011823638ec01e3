//! Depth and odometry metrics, and the comparison table.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{invert, Pose4x4, SE3Params};

pub const MIN_DEPTH: f64 = 1e-3;
pub const DEFAULT_CAP: f64 = 80.0;
pub const SNIPPET_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            abs_rel: a[0],
            sq_rel: a[1],
            rmse: a[2],
            rmse_log: a[3],
            delta1: a[4],
            delta2: a[5],
            delta3: a[6],
        }
    }

    /// Per-image metrics averaged over images.
    pub fn mean(all: &[DepthMetrics]) -> Result<DepthMetrics> {
        if all.is_empty() {
            return Err(Error::Invalid("no depth metrics to average".into()));
        }
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|v| v / all.len() as f64)))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Metrics over pixels that are valid, have finite ground truth and lie
/// within `cap`. Non-finite ground truth counts as invalid.
pub fn depth_metrics(pred: &[f64], gt: &[f64], valid: &[bool], cap: f64, median_scale: bool) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(Error::Shape(format!(
            "depth metrics on {} predicted, {} ground-truth and {} mask values",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    if !(cap > MIN_DEPTH) {
        return Err(Error::Invalid(format!("depth cap {cap} must exceed {MIN_DEPTH}")));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        if !valid[i] || !gt[i].is_finite() || gt[i] > cap {
            continue;
        }
        if gt[i] <= 0.0 {
            return Err(Error::Invalid(format!("ground truth depth {} at pixel {i} is not positive", gt[i])));
        }
        if !pred[i].is_finite() {
            return Err(Error::Invalid(format!("predicted depth at pixel {i} is not finite")));
        }
        p.push(pred[i]);
        g.push(gt[i]);
    }
    if g.is_empty() {
        return Err(Error::Invalid("no valid ground-truth pixels to evaluate".into()));
    }
    if median_scale {
        let mp = median(&mut p.clone());
        if mp <= 0.0 {
            return Err(Error::Invalid("median predicted depth is not positive".into()));
        }
        let s = median(&mut g.clone()) / mp;
        p.iter_mut().for_each(|v| *v *= s);
    }
    let n = g.len() as f64;
    let mut m = [0.0; 7];
    for (&pv, &gv) in p.iter().zip(&g) {
        let pv = pv.clamp(MIN_DEPTH, cap);
        let d = pv - gv;
        m[0] += d.abs() / gv;
        m[1] += d * d / gv;
        m[2] += d * d;
        m[3] += (pv.ln() - gv.ln()).powi(2);
        let ratio = (pv / gv).max(gv / pv);
        m[4] += f64::from(u8::from(ratio < 1.25));
        m[5] += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        m[6] += f64::from(u8::from(ratio < 1.25f64.powi(3)));
    }
    let m = m.map(|v| v / n);
    Ok(DepthMetrics {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        delta1: m[4],
        delta2: m[5],
        delta3: m[6],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometrySummary {
    pub mean: f64,
    pub std: f64,
    /// Error of each snippet, in snippet order.
    pub per_snippet: Vec<f64>,
}

/// Chains relative poses into a trajectory starting at the identity.
/// `relative[i]` maps camera `i+1` points into camera `i`.
pub fn integrate(relative: &[Pose4x4]) -> Vec<Pose4x4> {
    let mut out = vec![Pose4x4::identity()];
    for r in relative {
        let last = out[out.len() - 1];
        out.push(last.compose(r));
    }
    out
}

/// RMSE between positions after the least-squares scale is applied to `pred`.
pub fn scale_aligned_rmse(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let dot = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pp: f64 = pred.iter().map(|p| dot(p, p)).sum();
    let pg: f64 = pred.iter().zip(gt).map(|(p, g)| dot(p, g)).sum();
    let s = if pp > 0.0 { pg / pp } else { 0.0 };
    let se: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|k| (s * p[k] - g[k]).powi(2)).sum::<f64>())
        .sum();
    (se / gt.len() as f64).sqrt()
}

/// Absolute trajectory error over 5-frame snippets with stride 1.
///
/// `relative[i]` maps camera `i+1` points into camera `i` (predicted);
/// `gt_poses[i]` is the camera-to-world pose of frame `i`.
pub fn odometry_ate(relative: &[Pose4x4], gt_poses: &[Pose4x4]) -> Result<OdometrySummary> {
    if gt_poses.len() < SNIPPET_LEN {
        return Err(Error::Invalid(format!(
            "odometry needs at least {SNIPPET_LEN} frames, got {}",
            gt_poses.len()
        )));
    }
    if relative.len() + 1 != gt_poses.len() {
        return Err(Error::Shape(format!(
            "{} relative poses for {} frames",
            relative.len(),
            gt_poses.len()
        )));
    }
    let mut errs = Vec::new();
    for start in 0..=gt_poses.len() - SNIPPET_LEN {
        let traj = integrate(&relative[start..start + SNIPPET_LEN - 1]);
        let origin = invert(&gt_poses[start])?;
        let pred: Vec<[f64; 3]> = traj.iter().map(|p| p.translation().into()).collect();
        let gt: Vec<[f64; 3]> = gt_poses[start..start + SNIPPET_LEN]
            .iter()
            .map(|g| origin.compose(g).translation().into())
            .collect();
        errs.push(scale_aligned_rmse(&pred, &gt));
    }
    Ok(summarize(errs))
}

/// Predicted and true `(E_12, E_23)` of one sequence window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPoses {
    /// `(sequence id, middle frame index)`.
    pub sequence: (u64, usize),
    pub predicted: (SE3Params, SE3Params),
    pub truth: (SE3Params, SE3Params),
}

/// Chains the windows of each sequence into trajectories and scores every
/// 5-frame snippet. Runs of consecutive windows are chained; a gap in the
/// middle-frame indices starts a new run. Returns `None` when no run spans
/// 5 frames.
pub fn sequence_odometry(windows: &[WindowPoses]) -> Result<Option<OdometrySummary>> {
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| w.sequence);
    let mut errs = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len()
            && sorted[end].sequence.0 == sorted[start].sequence.0
            && sorted[end].sequence.1 == sorted[end - 1].sequence.1 + 1
        {
            end += 1;
        }
        let run = &sorted[start..end];
        if run.len() + 2 >= SNIPPET_LEN {
            let chain = |pick: fn(&WindowPoses) -> (SE3Params, SE3Params)| -> Result<Vec<Pose4x4>> {
                let mut rel: Vec<Pose4x4> = run.iter().map(|w| pick(w).0.to_matrix()).collect::<Result<_>>()?;
                rel.push(pick(&run[run.len() - 1]).1.to_matrix()?);
                Ok(rel)
            };
            let pred = chain(|w| w.predicted)?;
            let gt = integrate(&chain(|w| w.truth)?);
            errs.extend(odometry_ate(&pred, &gt)?.per_snippet);
        }
        start = end;
    }
    if errs.is_empty() {
        return Ok(None);
    }
    Ok(Some(summarize(errs)))
}

fn summarize(errs: Vec<f64>) -> OdometrySummary {
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    OdometrySummary {
        mean,
        std,
        per_snippet: errs,
    }
}

pub const METRICS_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3";
pub const ODOMETRY_HEADER: &str = "snippet_index,ate";

/// One row per evaluated image.
pub fn write_metrics_csv(path: &Path, rows: &[DepthMetrics]) -> Result<()> {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let cells: Vec<String> = m.to_array().iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<DepthMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::format(path, format!("expected header {METRICS_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("bad metrics row {l:?}: {e}")))?;
            let arr: [f64; 7] = vals
                .try_into()
                .map_err(|_| Error::format(path, format!("metrics row {l:?} needs 7 columns")))?;
            Ok(DepthMetrics::from_array(arr))
        })
        .collect()
}

pub fn write_odometry_csv(path: &Path, summary: &OdometrySummary) -> Result<()> {
    let mut out = format!("{ODOMETRY_HEADER}\n");
    for (i, e) in summary.per_snippet.iter().enumerate() {
        let _ = writeln!(out, "{i},{e:e}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_odometry_csv(path: &Path) -> Result<OdometrySummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ODOMETRY_HEADER) {
        return Err(Error::format(path, format!("expected header {ODOMETRY_HEADER:?}")));
    }
    let errs: Vec<f64> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad odometry row {l:?}")))
        })
        .collect::<Result<_>>()?;
    if errs.is_empty() {
        return Err(Error::format(path, "no snippets"));
    }
    Ok(summarize(errs))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub depth: DepthMetrics,
    pub odometry: Option<OdometrySummary>,
}

/// Aligned text table and CSV, rows sorted by abs_rel.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csv: String,
}

pub fn compare_report(runs: &[RunSummary]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Invalid("report needs at least one run".into()));
    }
    let mut rows: Vec<&RunSummary> = runs.iter().collect();
    rows.sort_by(|a, b| a.depth.abs_rel.total_cmp(&b.depth.abs_rel));
    let with_odo = rows.iter().any(|r| r.odometry.is_some());

    let mut header = vec!["run".to_string()];
    header.extend(
        ["abs_rel", "sq_rel", "rmse", "rmse_log"]
            .iter()
            .map(|h| format!("{h} (lower better)")),
    );
    header.extend(["d1", "d2", "d3"].iter().map(|h| format!("{h} (higher better)")));
    if with_odo {
        header.push("ate_mean (lower better)".into());
        header.push("ate_std".into());
    }
    let mut cells: Vec<Vec<String>> = vec![header];
    for r in &rows {
        let mut row = vec![r.name.clone()];
        row.extend(r.depth.to_array().iter().map(|v| format!("{v:.4}")));
        if with_odo {
            match &r.odometry {
                Some(o) => {
                    row.push(format!("{:.4}", o.mean));
                    row.push(format!("{:.4}", o.std));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }

    let mut csv = String::from("run,");
    csv.push_str(METRICS_HEADER);
    if with_odo {
        csv.push_str(",ate_mean,ate_std");
    }
    csv.push('\n');
    for r in &rows {
        let mut row = vec![r.name.clone()];
        row.extend(r.depth.to_array().iter().map(|v| format!("{v:e}")));
        if with_odo {
            match &r.odometry {
                Some(o) => row.extend([format!("{:e}", o.mean), format!("{:e}", o.std)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    Ok(Report { text, csv })
}
