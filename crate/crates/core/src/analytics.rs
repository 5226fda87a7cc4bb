//! Subspace-stability and trajectory analytics.
//!
//! Principal angles between per-layer safety bases, the normalized
//! Grassmannian distance `d_G = sqrt(sum theta_j^2) / sqrt(k_s (pi/2)^2)`,
//! a Monte Carlo random-subspace null, and the per-stage trajectory
//! table with slope summaries. CSV renderings are header-first and
//! stable.

use crate::error::{Error, Result};
use crate::linalg::{orthonormality_defect, thin_svd, Matrix};
use crate::rng::{normal, substream};

/// Orthonormality tolerance on principal-angle inputs.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Comparison of two subspaces: ascending principal angles, the mean
/// cosine of those angles, and the normalized Grassmannian distance.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SubspaceComparison {
    pub angles: Vec<f64>,
    pub mean_cos: f64,
    pub grassmannian: f64,
    pub rank_left: usize,
    pub rank_right: usize,
}

/// Principal angles between two column-orthonormal bases in the same
/// ambient space, ascending; `min(k_1, k_2)` of them. Cosines are the
/// singular values of `V1^T V2`, clamped to [0, 1] before arccos.
pub fn principal_angles(v1: &Matrix, v2: &Matrix) -> Result<Vec<f64>> {
    if v1.rows() != v2.rows() {
        return Err(Error::Shape(format!(
            "ambient dims differ: {} vs {}",
            v1.rows(),
            v2.rows()
        )));
    }
    if v1.cols() == 0 || v2.cols() == 0 {
        return Ok(Vec::new());
    }
    for (name, m) in [("left", v1), ("right", v2)] {
        let defect = orthonormality_defect(m);
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Domain(format!(
                "{name} basis is not orthonormal (defect {defect:.3e})"
            )));
        }
    }
    let cross = v1.transpose().matmul(v2)?;
    let svd = thin_svd(&cross)?;
    // Singular values descend, so arccos ascends.
    Ok(svd
        .singular_values
        .iter()
        .map(|&s| s.clamp(0.0, 1.0).acos())
        .collect())
}

/// `sqrt(sum theta^2) / sqrt(k_s (pi/2)^2)`: 0 for identical subspaces,
/// 1 for maximally distant ones.
pub fn grassmannian_distance(angles: &[f64], k_s: usize) -> Result<f64> {
    if angles.is_empty() {
        return Err(Error::Domain("no principal angles".into()));
    }
    if angles.len() != k_s {
        return Err(Error::Shape(format!(
            "{} angles for k_s = {k_s}",
            angles.len()
        )));
    }
    let ss: f64 = angles.iter().map(|a| a * a).sum();
    let denom = (k_s as f64).sqrt() * std::f64::consts::FRAC_PI_2;
    Ok(ss.sqrt() / denom)
}

/// Full comparison of two orthonormal bases. With unequal ranks the
/// angles cover `min(k_1, k_2)` directions and `d_G` normalizes by that
/// count; both ranks are recorded.
pub fn compare_subspaces(v1: &Matrix, v2: &Matrix) -> Result<SubspaceComparison> {
    let angles = principal_angles(v1, v2)?;
    if angles.is_empty() {
        return Err(Error::Domain("cannot compare an empty subspace".into()));
    }
    let mean_cos = angles.iter().map(|a| a.cos()).sum::<f64>() / angles.len() as f64;
    let grassmannian = grassmannian_distance(&angles, angles.len())?;
    Ok(SubspaceComparison {
        mean_cos,
        grassmannian,
        rank_left: v1.cols(),
        rank_right: v2.cols(),
        angles,
    })
}

/// Statistics of the random-subspace null at a given ambient dimension
/// and rank.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NullStats {
    pub dim: usize,
    pub k_s: usize,
    pub trials: usize,
    pub mean_cos: f64,
    pub std_cos: f64,
    pub mean_grassmannian: f64,
    pub std_grassmannian: f64,
}

fn random_orthonormal(dim: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Matrix> {
    // Orthonormalized gaussian columns: uniform on the Grassmannian.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut w: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let proj = crate::linalg::dot(&w, c);
                crate::linalg::axpy(&mut w, -proj, c);
            }
        }
        let n = crate::linalg::norm(&w);
        if n < 1e-12 {
            return Err(Error::Domain("degenerate gaussian draw".into()));
        }
        for x in &mut w {
            *x /= n;
        }
        cols.push(w);
    }
    Matrix::from_columns(dim, &cols)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draw pairs of uniformly random `k_s`-dimensional subspaces of R^dim
/// and report the distribution of mean cosine and `d_G` between them.
/// Each trial uses its own named substream, so results are independent
/// of trial execution order.
pub fn random_subspace_null(dim: usize, k_s: usize, trials: usize, seed: u64) -> Result<NullStats> {
    if k_s == 0 || k_s > dim {
        return Err(Error::Config(format!("k_s = {k_s} outside 1..={dim}")));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut cos = Vec::with_capacity(trials);
    let mut dg = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = substream(seed, &format!("null/trial-{t}"));
        let v1 = random_orthonormal(dim, k_s, &mut rng)?;
        let v2 = random_orthonormal(dim, k_s, &mut rng)?;
        let cmp = compare_subspaces(&v1, &v2)?;
        cos.push(cmp.mean_cos);
        dg.push(cmp.grassmannian);
    }
    let (mean_cos, std_cos) = mean_std(&cos);
    let (mean_grassmannian, std_grassmannian) = mean_std(&dg);
    Ok(NullStats {
        dim,
        k_s,
        trials,
        mean_cos,
        std_cos,
        mean_grassmannian,
        std_grassmannian,
    })
}

/// One row of the per-stage trajectory: composite safety with its
/// components, domain and general scores. All scores are stored in
/// [0, 1] and rendered x100.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryRecord {
    pub stage: usize,
    pub label: String,
    /// Refusal rate on harmful probes.
    pub refusal: f64,
    /// Accuracy on the truthful probe split.
    pub truth: f64,
    /// Shortcut-prediction rate on the biased probe split (lower is better).
    pub bias: f64,
    /// Composite safety score in [0, 100].
    pub composite: f64,
    /// Per-domain eval accuracies, task order.
    pub domain_scores: Vec<f64>,
    /// Mean over all domain eval sets.
    pub domain_mean: f64,
    /// Accuracy on the held-out general eval set.
    pub general: f64,
}

/// Per-step slope `(s_first - s_last) / steps` of a score series.
pub fn per_step_slope(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let steps = (series.len() - 1) as f64;
    (series[0] - series[series.len() - 1]) / steps
}

/// Escape a CSV field (quotes fields containing separators).
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render rows into header-first CSV text.
pub fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
