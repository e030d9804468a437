//! Position reconstruction from model outputs and navigation error metrics.
//!
//! Reconstruction undoes the S2 label scaling, walks the optical-observable
//! path (K inverse, line of sight, attitude rotation) for the delta/rho
//! strategy, and rotates frame-tagged outputs into W. Metrics follow the
//! evaluation section: the per-sample position error vector, its range
//! normalization, and for the optical strategy the CoF pixel error and the
//! range error. `emit_report` turns metric tables into plain CSV artifacts
//! (box-plot summaries, mean matrices, best-method shares, histograms,
//! error ellipses) so plotting stays outside this crate.

use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{CameraModel, GroundTruth};
use crate::labels::{Frame, LabelSet};
use crate::linalg::sym2x2_eigen;
use crate::preprocess::{invert_labels, PreprocessRecord};
use crate::search::MethodTag;

/// Frame a [`PositionEstimate`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateFrame {
    Cam,
    W,
    As,
}

/// Optical observables recovered on the way to a position estimate,
/// kept so CoF and range errors can be reported afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CofObservables {
    /// Estimated center of figure in S0 pixels.
    pub cof_s0: [f64; 2],
    /// Estimated range in S0 units, km.
    pub rho_s0: f64,
}

/// A reconstructed position with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    /// Position in km, expressed in `frame`.
    pub p_est: [f64; 3],
    pub frame: EstimateFrame,
    pub source: MethodTag,
    pub sample_id: usize,
    /// Present only for the delta/rho strategy.
    pub observables: Option<CofObservables>,
}

/// Everything reconstruction needs besides the labels themselves.
#[derive(Debug, Clone)]
pub struct ReconstructionContext<'a> {
    pub camera: &'a CameraModel,
    /// Error-free attitude, rotating CAM-frame vectors into W.
    pub q_cam_to_w: UnitQuaternion<f64>,
    /// AS-to-W rotation angle about Z at the imaging epoch.
    pub rotation_phase_rad: f64,
}

/// The paper's Omega: spherical (degrees, km) to Cartesian km.
/// X = rho cos(phi2) cos(phi1), Y = rho cos(phi2) sin(phi1),
/// Z = rho sin(phi2).
pub fn spherical_to_cartesian(phi1_deg: f64, phi2_deg: f64, rho: f64) -> [f64; 3] {
    let p1 = phi1_deg.to_radians();
    let p2 = phi2_deg.to_radians();
    [
        rho * p2.cos() * p1.cos(),
        rho * p2.cos() * p1.sin(),
        rho * p2.sin(),
    ]
}

/// Optical-observable path for the delta/rho strategy. Inputs are S2-scaled
/// predictions; the record supplies CoB_S0 and gamma to undo the scaling:
/// CoF_S0 = CoB_S0 + delta * gamma/128, rho_S0 = rho_s2 * gamma/128. The
/// estimated CoF is unprojected through K^-1 and the line of sight points
/// from the body toward the spacecraft (the camera looks down +Z at the
/// body, so the boresight case gives p_CAM = (0, 0, -rho)). Rotating by the
/// attitude quaternion yields the W-frame spacecraft position.
pub fn observables_to_position(
    delta_s2: [f64; 2],
    rho_s2: f64,
    record: &PreprocessRecord,
    camera: &CameraModel,
    q_cam_to_w: &UnitQuaternion<f64>,
    source: MethodTag,
    sample_id: usize,
) -> PositionEstimate {
    let inv = 1.0 / record.scale(); // gamma / 128
    let cof_s0 = [
        record.blob.cob[0] + delta_s2[0] * inv,
        record.blob.cob[1] + delta_s2[1] * inv,
    ];
    let rho_s0 = rho_s2 * inv;
    let ray = camera.unproject(cof_s0);
    let los = -ray.normalize();
    let p_cam = los * rho_s0;
    let p_w = q_cam_to_w * p_cam;
    PositionEstimate {
        p_est: [p_w.x, p_w.y, p_w.z],
        frame: EstimateFrame::W,
        source,
        sample_id,
        observables: Some(CofObservables { cof_s0, rho_s0 }),
    }
}

/// Reconstructs a W-frame position estimate from S2-scaled predicted labels
/// of any strategy.
pub fn reconstruct_position(
    labels_s2: &LabelSet,
    record: &PreprocessRecord,
    ctx: &ReconstructionContext<'_>,
    source: MethodTag,
    sample_id: usize,
) -> PositionEstimate {
    match labels_s2 {
        LabelSet::DeltaRho { delta, rho } => observables_to_position(
            *delta,
            *rho,
            record,
            ctx.camera,
            &ctx.q_cam_to_w,
            source,
            sample_id,
        ),
        _ => {
            let labels_s0 = invert_labels(labels_s2, record);
            let (p, frame) = match labels_s0 {
                LabelSet::Spherical {
                    frame,
                    phi1_deg,
                    phi2_deg,
                    rho,
                } => (
                    Vector3::from(spherical_to_cartesian(phi1_deg, phi2_deg, rho)),
                    frame,
                ),
                LabelSet::Cartesian { frame, pos } => (Vector3::from(pos), frame),
                LabelSet::DeltaRho { .. } => unreachable!(),
            };
            let p_w = match frame {
                Frame::W => p,
                Frame::AS => {
                    Rotation3::from_axis_angle(&Vector3::z_axis(), ctx.rotation_phase_rad) * p
                }
            };
            PositionEstimate {
                p_est: [p_w.x, p_w.y, p_w.z],
                frame: EstimateFrame::W,
                source,
                sample_id,
                observables: None,
            }
        }
    }
}

/// CoF and range errors, delta/rho strategy only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CofMetrics {
    /// CoM projection minus estimated CoF, u axis, px.
    pub eps_cof_u: f64,
    /// Same, v axis.
    pub eps_cof_v: f64,
    /// Euclidean norm of the two, px.
    pub eps_cof: f64,
    /// True minus estimated range, km (signed).
    pub eps_rho: f64,
}

/// Per-sample navigation errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: usize,
    /// Position error vector, km, in the estimate's frame.
    pub eps_p: [f64; 3],
    /// The same error expressed on CAM axes (boresight = z). Absent when
    /// the estimate frame does not admit the rotation.
    pub eps_p_cam: Option<[f64; 3]>,
    /// 100 * |eps_p| / rho_true, percent.
    pub eps_n: f64,
    pub cof: Option<CofMetrics>,
}

/// Computes metric rows for estimates aligned with their truths: row `i`
/// must carry `sample_id == i`.
pub fn compute_metrics(
    estimates: &[PositionEstimate],
    truths: &[GroundTruth],
) -> Result<Vec<MetricRow>> {
    if estimates.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let mut rows = Vec::with_capacity(estimates.len());
    for (i, (est, truth)) in estimates.iter().zip(truths.iter()).enumerate() {
        if est.sample_id != i {
            return Err(Error::IdMismatch { row: i });
        }
        let p_est = Vector3::from(est.p_est);
        let q = truth.quaternion();
        let (diff, diff_cam) = match est.frame {
            EstimateFrame::W => {
                let d = p_est - Vector3::from(truth.position_w);
                (d, Some(q.inverse() * d))
            }
            EstimateFrame::As => (p_est - Vector3::from(truth.position_as), None),
            EstimateFrame::Cam => {
                let d = p_est - q.inverse() * Vector3::from(truth.position_w);
                (d, Some(d))
            }
        };
        let eps_n = 100.0 * diff.norm() / truth.rho_km;
        let cof = est.observables.map(|obs| {
            let eps_cof_u = truth.cof[0] - obs.cof_s0[0];
            let eps_cof_v = truth.cof[1] - obs.cof_s0[1];
            CofMetrics {
                eps_cof_u,
                eps_cof_v,
                eps_cof: eps_cof_u.hypot(eps_cof_v),
                eps_rho: truth.rho_km - obs.rho_s0,
            }
        });
        rows.push(MetricRow {
            sample_id: i,
            eps_p: [diff.x, diff.y, diff.z],
            eps_p_cam: diff_cam.map(|d| [d.x, d.y, d.z]),
            eps_n,
            cof,
        });
    }
    Ok(rows)
}

/// Metric rows for one method evaluated on one dataset.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub method: String,
    pub dataset: String,
    pub rows: Vec<MetricRow>,
}

/// Linear-interpolation quantile of a nonempty sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Five-number summary (min, q1, median, q3, max).
pub fn five_number_summary(values: &[f64]) -> [f64; 5] {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [
        v[0],
        quantile(&v, 0.25),
        quantile(&v, 0.5),
        quantile(&v, 0.75),
        v[v.len() - 1],
    ]
}

const HIST_BINS: usize = 40;

fn histogram(values: &[f64]) -> Vec<(f64, f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![(min, max, values.len())];
    }
    let width = (max - min) / HIST_BINS as f64;
    let mut counts = vec![0usize; HIST_BINS];
    for &v in values {
        let b = (((v - min) / width) as usize).min(HIST_BINS - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (min + i as f64 * width, min + (i + 1) as f64 * width, c))
        .collect()
}

/// Mean vector and covariance eigen-structure of 2D samples.
struct Ellipse {
    mean: [f64; 2],
    /// Standard deviations along the principal axes, descending.
    sigma: [f64; 2],
    /// Orientation of the major axis, degrees.
    angle_deg: f64,
}

fn cof_error_ellipse(uv: &[[f64; 2]]) -> Ellipse {
    let n = uv.len() as f64;
    let mean = [
        uv.iter().map(|p| p[0]).sum::<f64>() / n,
        uv.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let (mut sa, mut sb, mut sc) = (0.0, 0.0, 0.0);
    for p in uv {
        let du = p[0] - mean[0];
        let dv = p[1] - mean[1];
        sa += du * du;
        sb += du * dv;
        sc += dv * dv;
    }
    let denom = (uv.len().saturating_sub(1)).max(1) as f64;
    let (vals, vecs) = sym2x2_eigen(sa / denom, sb / denom, sc / denom);
    Ellipse {
        mean,
        sigma: [vals[0].max(0.0).sqrt(), vals[1].max(0.0).sqrt()],
        angle_deg: vecs[0][1].atan2(vecs[0][0]).to_degrees(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes the report artifacts and returns the paths created:
/// `quantiles_eps_n.csv` (box-plot five-number summaries per method and
/// dataset), `mean_eps_n.csv` (dataset x method matrix, long form),
/// `best_method_share.csv` (per dataset, share of samples each method wins;
/// ties go to the first table), `hist_eps_cof.csv` / `hist_eps_rho.csv`
/// (bin edges and counts), `ellipses_cof.csv` (mean CoF error, 1- and
/// 2-sigma semi-axes, major-axis angle), `cam_axis_errors.csv` (mean
/// absolute error per CAM axis), and `series.json` (method, dataset, mean
/// and median eps_n, consumable by external plotters).
pub fn emit_report(tables: &[MetricTable], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if tables.is_empty() || tables.iter().any(|t| t.rows.is_empty()) {
        return Err(Error::invalid("emit_report requires nonempty tables"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let q_path = out_dir.join("quantiles_eps_n.csv");
    {
        let mut w = csv_writer(&q_path)?;
        w.write_record(["method", "dataset", "min", "q1", "median", "q3", "max"])?;
        for t in tables {
            let eps: Vec<f64> = t.rows.iter().map(|r| r.eps_n).collect();
            let s = five_number_summary(&eps);
            w.write_record([
                t.method.as_str(),
                t.dataset.as_str(),
                &s[0].to_string(),
                &s[1].to_string(),
                &s[2].to_string(),
                &s[3].to_string(),
                &s[4].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&q_path, e))?;
    }
    written.push(q_path);

    let m_path = out_dir.join("mean_eps_n.csv");
    {
        let mut w = csv_writer(&m_path)?;
        w.write_record(["dataset", "method", "mean_eps_n"])?;
        for t in tables {
            let mean = t.rows.iter().map(|r| r.eps_n).sum::<f64>() / t.rows.len() as f64;
            w.write_record([t.dataset.as_str(), t.method.as_str(), &mean.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&m_path, e))?;
    }
    written.push(m_path);

    let s_path = out_dir.join("best_method_share.csv");
    {
        let mut w = csv_writer(&s_path)?;
        w.write_record(["dataset", "method", "share_percent"])?;
        let mut datasets: Vec<&str> = tables.iter().map(|t| t.dataset.as_str()).collect();
        datasets.dedup();
        datasets.sort_unstable();
        datasets.dedup();
        for ds in datasets {
            let group: Vec<&MetricTable> =
                tables.iter().filter(|t| t.dataset == ds).collect();
            let n = group[0].rows.len();
            if group.iter().any(|t| t.rows.len() != n) {
                return Err(Error::invalid(format!(
                    "dataset {ds}: methods disagree on sample count"
                )));
            }
            let mut wins = vec![0usize; group.len()];
            for i in 0..n {
                let best = group
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        a.rows[i].eps_n.partial_cmp(&b.rows[i].eps_n).unwrap()
                    })
                    .map(|(k, _)| k)
                    .unwrap();
                wins[best] += 1;
            }
            for (t, &w_count) in group.iter().zip(&wins) {
                w.write_record([
                    ds,
                    t.method.as_str(),
                    &(100.0 * w_count as f64 / n as f64).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&s_path, e))?;
    }
    written.push(s_path);

    for (name, pick) in [
        ("hist_eps_cof.csv", 0usize),
        ("hist_eps_rho.csv", 1usize),
    ] {
        let path = out_dir.join(name);
        let mut w = csv_writer(&path)?;
        w.write_record(["method", "dataset", "bin_lo", "bin_hi", "count"])?;
        for t in tables {
            let values: Vec<f64> = t
                .rows
                .iter()
                .filter_map(|r| r.cof.as_ref())
                .map(|c| if pick == 0 { c.eps_cof } else { c.eps_rho })
                .collect();
            for (lo, hi, count) in histogram(&values) {
                w.write_record([
                    t.method.as_str(),
                    t.dataset.as_str(),
                    &lo.to_string(),
                    &hi.to_string(),
                    &count.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    let e_path = out_dir.join("ellipses_cof.csv");
    {
        let mut w = csv_writer(&e_path)?;
        w.write_record([
            "method",
            "dataset",
            "mean_u",
            "mean_v",
            "semi_major_1s",
            "semi_minor_1s",
            "semi_major_2s",
            "semi_minor_2s",
            "angle_deg",
        ])?;
        for t in tables {
            let uv: Vec<[f64; 2]> = t
                .rows
                .iter()
                .filter_map(|r| r.cof.as_ref())
                .map(|c| [c.eps_cof_u, c.eps_cof_v])
                .collect();
            if uv.is_empty() {
                continue;
            }
            let e = cof_error_ellipse(&uv);
            w.write_record([
                t.method.as_str(),
                t.dataset.as_str(),
                &e.mean[0].to_string(),
                &e.mean[1].to_string(),
                &e.sigma[0].to_string(),
                &e.sigma[1].to_string(),
                &(2.0 * e.sigma[0]).to_string(),
                &(2.0 * e.sigma[1]).to_string(),
                &e.angle_deg.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&e_path, e))?;
    }
    written.push(e_path);

    let c_path = out_dir.join("cam_axis_errors.csv");
    {
        let mut w = csv_writer(&c_path)?;
        w.write_record([
            "method",
            "dataset",
            "mean_abs_x",
            "mean_abs_y",
            "mean_abs_z_boresight",
        ])?;
        for t in tables {
            let cams: Vec<[f64; 3]> = t.rows.iter().filter_map(|r| r.eps_p_cam).collect();
            if cams.is_empty() {
                continue;
            }
            let n = cams.len() as f64;
            let mean_abs =
                |k: usize| cams.iter().map(|v| v[k].abs()).sum::<f64>() / n;
            w.write_record([
                t.method.as_str(),
                t.dataset.as_str(),
                &mean_abs(0).to_string(),
                &mean_abs(1).to_string(),
                &mean_abs(2).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&c_path, e))?;
    }
    written.push(c_path);

    let j_path = out_dir.join("series.json");
    {
        #[derive(Serialize)]
        struct SeriesRow<'a> {
            method: &'a str,
            dataset: &'a str,
            mean_eps_n: f64,
            median_eps_n: f64,
        }
        let rows: Vec<SeriesRow> = tables
            .iter()
            .map(|t| {
                let eps: Vec<f64> = t.rows.iter().map(|r| r.eps_n).collect();
                SeriesRow {
                    method: &t.method,
                    dataset: &t.dataset,
                    mean_eps_n: eps.iter().sum::<f64>() / eps.len() as f64,
                    median_eps_n: five_number_summary(&eps)[2],
                }
            })
            .collect();
        std::fs::write(&j_path, serde_json::to_string_pretty(&rows)?)
            .map_err(|e| Error::io(&j_path, e))?;
    }
    written.push(j_path);

    Ok(written)
}
