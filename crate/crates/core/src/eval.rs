//! Best-of-K displacement metrics, model evaluation, and feature export.
//!
//! ADE is the mean per-point Euclidean error of a trajectory, FDE the error
//! of its final point alone. Best-of-K takes each metric's minimum over the
//! K decoder heads independently, the standard protocol for multimodal
//! prediction. Feature export dumps final hidden states with a
//! deterministic 2-component PCA projection for eyeballing how well the
//! domains' feature clouds overlap.

use crate::decode::PredictionSet;
use crate::diffnum::{Scalar, Tape};
use crate::encoder::encode_window;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::predict;
use crate::traj::ObservationWindow;

fn point_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

fn check_lengths(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Eval(format!(
            "trajectory lengths {} and {} (need equal, ≥ 1)",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Average displacement error: mean Euclidean distance over all points.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| point_dist(p, t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Final displacement error: Euclidean distance of the last points only.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(point_dist(*pred.last().unwrap(), *truth.last().unwrap()))
}

/// Best-of-K metrics: ADE and FDE minimized over heads independently (the
/// head that wins ADE need not win FDE).
pub fn best_of_k(preds: &PredictionSet, truth: &[[f64; 2]]) -> Result<(f64, f64)> {
    if preds.trajectories.is_empty() {
        return Err(Error::Eval("prediction set with zero trajectories".into()));
    }
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for traj in &preds.trajectories {
        best_ade = best_ade.min(ade(traj, truth)?);
        best_fde = best_fde.min(fde(traj, truth)?);
    }
    Ok((best_ade, best_fde))
}

/// Metrics of one subset of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetMetrics {
    pub name: String,
    pub n_windows: usize,
    pub ade: f64,
    pub fde: f64,
}

/// Mean best-of-K metrics over one test domain.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub domain_name: String,
    pub n_windows: usize,
    pub ade: f64,
    pub fde: f64,
    /// Optional named breakdown (e.g. per scene); empty when not used.
    pub per_subset: Vec<SubsetMetrics>,
}

/// Runs the model over every window and averages best-of-K ADE/FDE in the
/// given window order.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    windows: &[ObservationWindow],
    domain_name: &str,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::Eval(format!(
            "evaluation of '{domain_name}' got an empty test stream"
        )));
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    for w in windows {
        let preds = predict(params, w)?;
        let (a, f) = best_of_k(&preds, &w.future)?;
        sum_ade += a;
        sum_fde += f;
    }
    let n = windows.len() as f64;
    Ok(MetricReport {
        domain_name: domain_name.to_string(),
        n_windows: windows.len(),
        ade: sum_ade / n,
        fde: sum_fde / n,
        per_subset: Vec::new(),
    })
}

/// CSV rendering: `domain,subset,n_windows,ade,fde`, the overall row first
/// (subset `all`), then any named subsets.
pub fn report_csv(report: &MetricReport) -> String {
    let mut out = String::from("domain,subset,n_windows,ade,fde\n");
    out.push_str(&format!(
        "{},all,{},{},{}\n",
        report.domain_name, report.n_windows, report.ade, report.fde
    ));
    for s in &report.per_subset {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.domain_name, s.name, s.n_windows, s.ade, s.fde
        ));
    }
    out
}

/// One window's exported feature vector.
#[derive(Clone, Debug)]
pub struct FeatureRow {
    pub domain_id: usize,
    pub window_id: usize,
    pub features: Vec<f64>,
    pub projection: Option<[f64; 2]>,
}

/// Final hidden states of every window in every domain, plus the shared
/// 2D projection once [`project_features`] has run.
#[derive(Clone, Debug)]
pub struct FeatureDump {
    pub rows: Vec<FeatureRow>,
    pub width: usize,
}

/// Encodes every window of ≥ 2 domains and collects the final hidden
/// states, then fits the PCA projection on the pooled rows.
pub fn export_features<S: Scalar>(
    params: &ModelParams<S>,
    domains: &[Vec<ObservationWindow>],
) -> Result<FeatureDump> {
    if domains.len() < 2 {
        return Err(Error::Eval(format!(
            "feature export compares domains, got {}",
            domains.len()
        )));
    }
    let mut rows = Vec::new();
    for (domain_id, windows) in domains.iter().enumerate() {
        for (window_id, w) in windows.iter().enumerate() {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let e = encode_window(&tape, &bound.encoder, w, params.dims.a_max, params.dims.heads)?;
            let features: Vec<f64> = tape
                .value(e.final_hidden)
                .as_slice()
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            rows.push(FeatureRow {
                domain_id,
                window_id,
                features,
                projection: None,
            });
        }
    }
    let mut dump = FeatureDump {
        width: params.dims.hidden,
        rows,
    };
    project_features(&mut dump)?;
    Ok(dump)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i][i]).collect();
    (eigenvalues, v)
}

/// Fits PCA on the pooled rows and writes the top-2 projection into each
/// row. Eigenvector signs are canonicalized (largest component positive) so
/// the projection is unique, not just unique up to reflection.
pub fn project_features(dump: &mut FeatureDump) -> Result<()> {
    let n = dump.rows.len();
    if n < 2 {
        return Err(Error::Eval(format!(
            "PCA needs at least 2 feature rows, got {n}"
        )));
    }
    let d = dump.width;
    if dump.rows.iter().any(|r| r.features.len() != d) {
        return Err(Error::Eval("inconsistent feature widths in dump".into()));
    }
    let mut mean = vec![0.0; d];
    for row in &dump.rows {
        for (m, x) in mean.iter_mut().zip(&row.features) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in &dump.rows {
        let centered: Vec<f64> = row.features.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                let contrib = centered[i] * centered[j] / (n - 1) as f64;
                cov[i][j] += contrib;
                if i != j {
                    cov[j][i] += contrib;
                }
            }
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let component = |idx: usize| -> Vec<f64> {
        let col = order[idx];
        let mut vec_: Vec<f64> = (0..d).map(|r| vectors[r][col]).collect();
        // Canonical sign: the entry with the largest magnitude is positive.
        let lead = vec_
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            for x in &mut vec_ {
                *x = -*x;
            }
        }
        vec_
    };
    let pc1 = component(0);
    let pc2 = if d >= 2 { component(1) } else { vec![0.0; d] };
    for row in &mut dump.rows {
        let centered: Vec<f64> = row.features.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let p1: f64 = centered.iter().zip(&pc1).map(|(x, v)| x * v).sum();
        let p2: f64 = centered.iter().zip(&pc2).map(|(x, v)| x * v).sum();
        row.projection = Some([p1, p2]);
    }
    Ok(())
}

/// CSV rendering: `domain_id,window_id,f0..f{D-1},pc1,pc2`.
pub fn features_csv(dump: &FeatureDump) -> String {
    let mut header = String::from("domain_id,window_id");
    for i in 0..dump.width {
        header.push_str(&format!(",f{i}"));
    }
    if dump.rows.iter().any(|r| r.projection.is_some()) {
        header.push_str(",pc1,pc2");
    }
    header.push('\n');
    let mut out = header;
    for row in &dump.rows {
        out.push_str(&format!("{},{}", row.domain_id, row.window_id));
        for f in &row.features {
            out.push_str(&format!(",{f}"));
        }
        if let Some([p1, p2]) = row.projection {
            out.push_str(&format!(",{p1},{p2}"));
        }
        out.push('\n');
    }
    out
}

const SVG_COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// 2D scatter of the PCA projection, one fill color per domain, points at
/// 0.3 opacity so overlapping clouds stay readable.
pub fn features_svg(dump: &FeatureDump) -> Result<String> {
    let points: Vec<(usize, [f64; 2])> = dump
        .rows
        .iter()
        .map(|r| {
            r.projection
                .map(|p| (r.domain_id, p))
                .ok_or_else(|| Error::Eval("feature dump has no projection to plot".into()))
        })
        .collect::<Result<_>>()?;
    let (width, height, pad) = (640.0, 480.0, 40.0);
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for (_, p) in &points {
        for axis in 0..2 {
            min[axis] = min[axis].min(p[axis]);
            max[axis] = max[axis].max(p[axis]);
        }
    }
    for axis in 0..2 {
        if max[axis] - min[axis] < 1e-12 {
            // Degenerate spread: widen artificially so points stay visible.
            min[axis] -= 1.0;
            max[axis] += 1.0;
        }
    }
    let sx = (width - 2.0 * pad) / (max[0] - min[0]);
    let sy = (height - 2.0 * pad) / (max[1] - min[1]);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    out.push_str(&format!(
        "  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    let n_domains = points.iter().map(|(d, _)| d + 1).max().unwrap_or(0);
    for (domain, p) in &points {
        let cx = pad + (p[0] - min[0]) * sx;
        let cy = height - pad - (p[1] - min[1]) * sy;
        let color = SVG_COLORS[domain % SVG_COLORS.len()];
        out.push_str(&format!(
            "  <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.3\"/>\n"
        ));
    }
    for d in 0..n_domains {
        let color = SVG_COLORS[d % SVG_COLORS.len()];
        let y = 20.0 + d as f64 * 16.0;
        out.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{color}\"/>\n",
            width - 110.0,
            y
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">domain {d}</text>\n",
            width - 100.0,
            y + 4.0
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
