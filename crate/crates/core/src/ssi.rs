//! Safety Subspace Identification.
//!
//! The empirical Fisher of the flattened adapter parameters is
//! accumulated over a safety calibration set, eigendecomposed, and
//! truncated at a cumulative-variance fraction `rho` to form a
//! per-layer orthonormal safety basis. After each domain the basis is
//! recomputed on the adapted model and merged with the old one by SVD
//! truncation, which tracks drift while keeping the rank bounded.
//!
//! Fisher granularity is per-layer dense blocks over the flattened
//! `(B, A)` vector; there are no cross-layer blocks.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, thin_svd, Matrix, SymEigResult};
use crate::model::{AdapterModel, Reader};
use crate::rng::fnv1a64;
use crate::tasks::Example;

/// Eigenvalues below this fraction of the largest are treated as zero
/// when selecting the basis.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Safety calibration set: labeled examples, half harmful prompts with
/// the refusal label and half benign prompts with their helpful label.
/// Disjoint from the probe set by example ID.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CalibrationSet {
    pub examples: Vec<Example>,
}

impl CalibrationSet {
    pub fn new(examples: Vec<Example>) -> Self {
        CalibrationSet { examples }
    }

    pub fn size(&self) -> usize {
        self.examples.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.examples.iter().map(|e| e.id)
    }
}

/// Per-layer orthonormal basis of safety-critical adapter directions,
/// with the eigenvalues it retained and the full Fisher trace.
#[derive(Clone, Debug)]
pub struct SafetySubspace {
    pub layer: usize,
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
    pub fisher_trace: f64,
}

impl SafetySubspace {
    /// Empty subspace: no safety information for this layer.
    pub fn empty(layer: usize, ambient: usize) -> Self {
        SafetySubspace {
            layer,
            basis: Matrix::zeros(ambient, 0),
            eigenvalues: Vec::new(),
            fisher_trace: 0.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }
}

/// Empirical Fisher of layer `layer`: `(1/N) sum g g^T` over per-example
/// log-likelihood gradients on the calibration set. Symmetric PSD by
/// construction.
pub fn accumulate_fisher(
    model: &AdapterModel,
    calib: &CalibrationSet,
    layer: usize,
) -> Result<Matrix> {
    if calib.size() == 0 {
        return Err(Error::Domain("empty calibration set".into()));
    }
    let dim = model.delta_dim(layer);
    let mut f = Matrix::zeros(dim, dim);
    for ex in &calib.examples {
        let grads = model.grad_log_likelihood(&ex.x, ex.label)?;
        let g = &grads[layer].values;
        // Rank-1 update on the upper triangle.
        for i in 0..dim {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            for j in i..dim {
                let v = f.get(i, j) + gi * g[j];
                f.set(i, j, v);
            }
        }
    }
    let scale = 1.0 / calib.size() as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = f.get(i, j) * scale;
            f.set(i, j, v);
            f.set(j, i, v);
        }
    }
    f.check_finite("accumulate_fisher")?;
    Ok(f)
}

/// Mean squared gradient norm over the calibration set, computed without
/// forming the Fisher matrix. Independent cross-check for
/// `trace(F) == mean ||g||^2`.
pub fn mean_squared_grad_norm(
    model: &AdapterModel,
    calib: &CalibrationSet,
    layer: usize,
) -> Result<f64> {
    if calib.size() == 0 {
        return Err(Error::Domain("empty calibration set".into()));
    }
    let mut total = 0.0;
    for ex in &calib.examples {
        let grads = model.grad_log_likelihood(&ex.x, ex.label)?;
        total += dot(&grads[layer].values, &grads[layer].values);
    }
    Ok(total / calib.size() as f64)
}

/// Smallest eigenvector prefix whose cumulative eigenvalue mass reaches
/// fraction `rho` (inclusive: hitting `rho` exactly stops). Eigenvalues
/// below `EIGENVALUE_FLOOR` of the largest count as zero; an all-zero
/// spectrum yields the empty subspace rather than an error.
pub fn select_basis(eig: &SymEigResult, rho: f64, layer: usize) -> Result<SafetySubspace> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must be in (0, 1], got {rho}")));
    }
    let ambient = eig.eigenvectors.rows();
    let lam_max = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if lam_max <= 0.0 {
        return Ok(SafetySubspace::empty(layer, ambient));
    }
    let floor = lam_max * EIGENVALUE_FLOOR;
    let effective: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l > floor { l } else { 0.0 })
        .collect();
    let total: f64 = effective.iter().sum();
    if total <= 0.0 {
        return Ok(SafetySubspace::empty(layer, ambient));
    }

    let mut cum = 0.0;
    let mut k_s = 0;
    for &l in &effective {
        cum += l;
        k_s += 1;
        if cum / total >= rho {
            break;
        }
    }
    let basis = Matrix::from_fn(ambient, k_s, |i, j| eig.eigenvectors.get(i, j));
    let fisher_trace = eig.eigenvalues.iter().sum::<f64>().max(0.0);
    Ok(SafetySubspace {
        layer,
        basis,
        eigenvalues: eig.eigenvalues[..k_s].to_vec(),
        fisher_trace,
    })
}

/// `Pi g = V (V^T g)` without materializing the projection matrix.
pub fn projection_apply(sub: &SafetySubspace, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != sub.ambient_dim() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, subspace ambient dim is {}",
            g.len(),
            sub.ambient_dim()
        )));
    }
    let mut out = vec![0.0; g.len()];
    for j in 0..sub.rank() {
        let col = sub.basis.column(j);
        let c = dot(&col, g);
        axpy(&mut out, c, &col);
    }
    Ok(out)
}

/// Merge an old and a freshly recomputed subspace: concatenate columns
/// (old first), thin SVD, keep the smallest left-singular-vector prefix
/// whose squared singular values reach fraction `rho` of the total.
pub fn merge_subspaces(
    old: &SafetySubspace,
    fresh: &SafetySubspace,
    rho: f64,
) -> Result<SafetySubspace> {
    if old.layer != fresh.layer {
        return Err(Error::Shape(format!(
            "merging subspaces of layers {} and {}",
            old.layer, fresh.layer
        )));
    }
    if old.ambient_dim() != fresh.ambient_dim() {
        return Err(Error::Shape(format!(
            "ambient dims differ: {} vs {}",
            old.ambient_dim(),
            fresh.ambient_dim()
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must be in (0, 1], got {rho}")));
    }
    let ambient = old.ambient_dim();
    let k_total = old.rank() + fresh.rank();
    if k_total == 0 {
        return Ok(SafetySubspace::empty(old.layer, ambient));
    }

    let merged = Matrix::from_fn(ambient, k_total, |i, j| {
        if j < old.rank() {
            old.basis.get(i, j)
        } else {
            fresh.basis.get(i, j - old.rank())
        }
    });
    let svd = thin_svd(&merged)?;

    let sq: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let floor = sq.first().copied().unwrap_or(0.0) * EIGENVALUE_FLOOR;
    let effective: Vec<f64> = sq
        .iter()
        .map(|&v| if v > floor { v } else { 0.0 })
        .collect();
    let total: f64 = effective.iter().sum();
    if total <= 0.0 {
        return Ok(SafetySubspace::empty(old.layer, ambient));
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for &v in &effective {
        if v == 0.0 {
            break;
        }
        cum += v;
        keep += 1;
        if cum / total >= rho {
            break;
        }
    }

    let basis = Matrix::from_fn(ambient, keep, |i, j| svd.u.get(i, j));
    // Retained spectrum metadata follows the merged directions; the trace
    // carries over from the fresh Fisher, which reflects the current model.
    Ok(SafetySubspace {
        layer: old.layer,
        basis,
        eigenvalues: sq[..keep].to_vec(),
        fisher_trace: fresh.fisher_trace,
    })
}

/// Cumulative-variance summary of a Fisher spectrum: `k_s` at each grid
/// point plus the top of the spectrum, for run logs and reports.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SpectrumReport {
    pub top_eigenvalues: Vec<f64>,
    pub trace: f64,
    /// `(rho, k_s)` per grid point.
    pub ks_at: Vec<(f64, usize)>,
}

pub const RHO_GRID: [f64; 7] = [0.5, 0.8, 0.85, 0.9, 0.95, 0.99, 1.0];

/// Summarize a spectrum over the standard `rho` grid.
pub fn eigen_spectrum_report(eig: &SymEigResult) -> SpectrumReport {
    let trace: f64 = eig.eigenvalues.iter().sum();
    let mut ks_at = Vec::with_capacity(RHO_GRID.len());
    for &rho in &RHO_GRID {
        // Same truncation rule as select_basis; layer index is irrelevant.
        let k = select_basis(eig, rho, 0).map(|s| s.rank()).unwrap_or(0);
        ks_at.push((rho, k));
    }
    let top = eig.eigenvalues.iter().take(16).copied().collect();
    SpectrumReport {
        top_eigenvalues: top,
        trace,
        ks_at,
    }
}

// --- serialization --------------------------------------------------------

const SUB_MAGIC: &[u8; 8] = b"SASUBS01";

impl SafetySubspace {
    /// Bit-exact binary serialization alongside model checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SUB_MAGIC);
        for v in [
            self.layer,
            self.ambient_dim(),
            self.rank(),
            self.eigenvalues.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.fisher_trace.to_le_bytes());
        for v in &self.eigenvalues {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.basis.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("subspace artifact too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format("subspace checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != SUB_MAGIC {
            return Err(Error::Format("bad subspace magic".into()));
        }
        let layer = r.u32()? as usize;
        let ambient = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let n_eig = r.u32()? as usize;
        let fisher_trace = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let eigenvalues = r.f64s(n_eig)?;
        let data = r.f64s(ambient * rank)?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in subspace artifact".into()));
        }
        let basis = if rank == 0 {
            Matrix::zeros(ambient, 0)
        } else {
            Matrix::from_vec(ambient, rank, data)?
        };
        Ok(SafetySubspace {
            layer,
            basis,
            eigenvalues,
            fisher_trace,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
