//! Toy differentiable model: a frozen base network with trainable
//! low-rank adapters.
//!
//! Layer `i` computes `a_i = tanh((W_i + B_i A_i) a_{i-1})` on column
//! vectors; a frozen head matrix maps the last activation to class logits
//! followed by softmax. Only the adapter pairs `(B_i, A_i)` train after
//! the alignment phase; `W_i` and the head are frozen for the life of a
//! run and guarded by a checksum.
//!
//! The flattened per-layer parameter vector is `vec(B_i)` followed by
//! `vec(A_i)`, column-major within each. That layout is fixed for the
//! life of a run and shared by gradients, Fisher matrices, and safety
//! subspaces.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{fnv1a64, normal};

/// Shapes of the toy model. Defaults: two 32x32 adapter layers of rank 4
/// (so each flattened adapter vector has 256 entries) and an 8-class head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelArch {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub rank: usize,
    pub layers: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            input: 32,
            hidden: 32,
            classes: 8,
            rank: 4,
            layers: 2,
        }
    }
}

impl ModelArch {
    /// Input width of layer `i`.
    pub fn layer_cols(&self, i: usize) -> usize {
        if i == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    /// Length of the flattened adapter vector of layer `i`:
    /// `d*r + r*k` for B (d x r) and A (r x k).
    pub fn delta_dim(&self, i: usize) -> usize {
        self.hidden * self.rank + self.rank * self.layer_cols(i)
    }
}

/// One adapter layer: frozen weight plus a low-rank pair.
#[derive(Clone, Debug)]
pub struct AdapterLayer {
    pub w_frozen: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    pub rank: usize,
}

impl AdapterLayer {
    /// Effective weight `W + B A`, materialized (tests and oracles only;
    /// the forward path never forms it).
    pub fn effective_weight(&self) -> Result<Matrix> {
        let ba = self.b.matmul(&self.a)?;
        Ok(Matrix::from_fn(
            self.w_frozen.rows(),
            self.w_frozen.cols(),
            |i, j| self.w_frozen.get(i, j) + ba.get(i, j),
        ))
    }
}

/// Flattened adapter gradient or update for one layer.
#[derive(Clone, Debug)]
pub struct FlatAdapterVec {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl FlatAdapterVec {
    pub fn zeros(layer: usize, dim: usize) -> Self {
        FlatAdapterVec {
            layer,
            values: vec![0.0; dim],
        }
    }
}

/// Column-major flatten of `(B, A)` into one vector.
pub fn flatten_adapters(b: &Matrix, a: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.rows() * b.cols() + a.rows() * a.cols());
    for j in 0..b.cols() {
        for i in 0..b.rows() {
            out.push(b.get(i, j));
        }
    }
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            out.push(a.get(i, j));
        }
    }
    out
}

/// Inverse of [`flatten_adapters`] for shapes `B: d x r`, `A: r x k`.
pub fn unflatten_adapters(
    values: &[f64],
    d: usize,
    r: usize,
    k: usize,
) -> Result<(Matrix, Matrix)> {
    if values.len() != d * r + r * k {
        return Err(Error::Shape(format!(
            "flat adapter vector has {} entries, expected {}",
            values.len(),
            d * r + r * k
        )));
    }
    let mut b = Matrix::zeros(d, r);
    let mut a = Matrix::zeros(r, k);
    let mut idx = 0;
    for j in 0..r {
        for i in 0..d {
            b.set(i, j, values[idx]);
            idx += 1;
        }
    }
    for j in 0..k {
        for i in 0..r {
            a.set(i, j, values[idx]);
            idx += 1;
        }
    }
    Ok((b, a))
}

/// Numerically safe softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cached activations from one forward pass, consumed by backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i]` the tanh output of
    /// layer `i-1`.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradients of the base weights plus the head; alignment phase only.
#[derive(Clone, Debug)]
pub struct BaseGrad {
    pub w: Vec<Matrix>,
    pub head: Matrix,
}

#[derive(Clone, Debug)]
pub struct AdapterModel {
    pub layers: Vec<AdapterLayer>,
    pub head: Matrix,
    pub arch: ModelArch,
    base_frozen: bool,
}

impl AdapterModel {
    /// Fresh model: gaussian base weights, zero `B`, uniform(-0.05, 0.05)
    /// `A` (the standard low-rank-adapter init: the initial delta is zero).
    pub fn init(arch: ModelArch, rng: &mut ChaCha8Rng) -> Self {
        let w_scale = 0.05;
        let h_scale = 0.3;
        let mut layers = Vec::with_capacity(arch.layers);
        for i in 0..arch.layers {
            let cols = arch.layer_cols(i);
            let w_frozen = Matrix::from_fn(arch.hidden, cols, |_, _| w_scale * normal(rng));
            let b = Matrix::zeros(arch.hidden, arch.rank);
            let a = Matrix::from_fn(arch.rank, cols, |_, _| rng.gen_range(-0.05..0.05));
            layers.push(AdapterLayer {
                w_frozen,
                b,
                a,
                rank: arch.rank,
            });
        }
        let head = Matrix::from_fn(arch.classes, arch.hidden, |_, _| h_scale * normal(rng));
        AdapterModel {
            layers,
            head,
            arch,
            base_frozen: false,
        }
    }

    /// Re-draw the adapter pairs from the standard init without touching
    /// the base.
    pub fn reinit_adapters(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            let (d, r) = (layer.b.rows(), layer.b.cols());
            layer.b = Matrix::zeros(d, r);
            let (r2, k) = (layer.a.rows(), layer.a.cols());
            layer.a = Matrix::from_fn(r2, k, |_, _| rng.gen_range(-0.05..0.05));
        }
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    /// Freeze the base weights; subsequent base updates are errors.
    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    /// FNV checksum over the frozen weights and head, for the
    /// immutability invariant.
    pub fn base_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            for v in layer.w_frozen.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.head.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn delta_dim(&self, layer: usize) -> usize {
        self.arch.delta_dim(layer)
    }

    /// Current flattened adapter vector of one layer.
    pub fn adapter_vec(&self, layer: usize) -> Vec<f64> {
        flatten_adapters(&self.layers[layer].b, &self.layers[layer].a)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Forward pass with cached activations.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let mut h = x.to_vec();
        for layer in &self.layers {
            // (W + BA) h = W h + B (A h), never materializing BA.
            let mut z = layer.w_frozen.matvec(&h)?;
            let ah = layer.a.matvec(&h)?;
            let bah = layer.b.matvec(&ah)?;
            for (zi, bi) in z.iter_mut().zip(&bah) {
                *zi += bi;
            }
            h = z.into_iter().map(f64::tanh).collect();
            activations.push(h.clone());
        }
        let logits = self.head.matvec(&h)?;
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            activations,
            logits,
            probs,
        })
    }

    /// Output distribution over classes.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.probs)
    }

    /// Backpropagate a gradient with respect to the logits down to the
    /// adapter pairs, returning one flattened gradient per layer.
    pub fn adapter_grads_from_dlogits(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
    ) -> Result<Vec<FlatAdapterVec>> {
        if dlogits.len() != self.arch.classes {
            return Err(Error::Shape("dlogits length mismatch".into()));
        }
        let mut grads: Vec<FlatAdapterVec> = (0..self.layers.len())
            .map(|i| FlatAdapterVec::zeros(i, self.delta_dim(i)))
            .collect();
        let mut dh = self.head.matvec_t(dlogits)?;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let a_out = &trace.activations[i + 1];
            let a_in = &trace.activations[i];
            let dz: Vec<f64> = dh
                .iter()
                .zip(a_out)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();

            // dB = dz (A a_in)^T, dA = (B^T dz) a_in^T.
            let t = layer.a.matvec(a_in)?;
            let s = layer.b.matvec_t(&dz)?;
            let d = layer.b.rows();
            let r = layer.rank;
            let g = &mut grads[i].values;
            // vec(B) column-major: entry (row, col l) at l*d + row.
            for (l, tl) in t.iter().enumerate() {
                if *tl != 0.0 {
                    for (row, dzi) in dz.iter().enumerate() {
                        g[l * d + row] += dzi * tl;
                    }
                }
            }
            // vec(A) column-major after the B block: (row l, col m) at m*r + l.
            let base = d * r;
            for (m, am) in a_in.iter().enumerate() {
                if *am != 0.0 {
                    for (l, sl) in s.iter().enumerate() {
                        g[base + m * r + l] += sl * am;
                    }
                }
            }

            if i > 0 {
                // dh_prev = (W + BA)^T dz = W^T dz + A^T (B^T dz)
                let mut prev = layer.w_frozen.matvec_t(&dz)?;
                let abs = layer.a.matvec_t(&s)?;
                for (p, q) in prev.iter_mut().zip(&abs) {
                    *p += q;
                }
                dh = prev;
            }
        }
        Ok(grads)
    }

    /// Gradients of `log p(y|x)` with respect to the adapter pairs only.
    pub fn grad_log_likelihood(&self, x: &[f64], y: usize) -> Result<Vec<FlatAdapterVec>> {
        if y >= self.arch.classes {
            return Err(Error::Domain(format!(
                "label {y} outside {} classes",
                self.arch.classes
            )));
        }
        let trace = self.forward_trace(x)?;
        let mut dlogits: Vec<f64> = trace.probs.iter().map(|p| -p).collect();
        dlogits[y] += 1.0;
        self.adapter_grads_from_dlogits(&trace, &dlogits)
    }

    /// Gradients of the mean cross-entropy over a batch with respect to
    /// the adapter pairs.
    pub fn grad_task_loss(&self, batch: &[(&[f64], usize)]) -> Result<Vec<FlatAdapterVec>> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total: Vec<FlatAdapterVec> = (0..self.layers.len())
            .map(|i| FlatAdapterVec::zeros(i, self.delta_dim(i)))
            .collect();
        for &(x, y) in batch {
            if y >= self.arch.classes {
                return Err(Error::Domain(format!(
                    "label {y} outside {} classes",
                    self.arch.classes
                )));
            }
            let trace = self.forward_trace(x)?;
            // d(-log p_y)/dlogits = p - onehot(y)
            let mut dlogits = trace.probs.clone();
            dlogits[y] -= 1.0;
            let grads = self.adapter_grads_from_dlogits(&trace, &dlogits)?;
            for (acc, g) in total.iter_mut().zip(&grads) {
                for (av, gv) in acc.values.iter_mut().zip(&g.values) {
                    *av += scale * gv;
                }
            }
        }
        Ok(total)
    }

    /// Mean cross-entropy of a batch (monitoring only).
    pub fn mean_cross_entropy(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let mut total = 0.0;
        for &(x, y) in batch {
            let p = self.forward(x)?;
            total -= p[y].max(1e-300).ln();
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradients of the mean cross-entropy with respect to the base
    /// weights and head; alignment-phase only.
    pub fn grad_base_loss(&self, batch: &[(&[f64], usize)]) -> Result<BaseGrad> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut w: Vec<Matrix> = self
            .layers
            .iter()
            .map(|l| Matrix::zeros(l.w_frozen.rows(), l.w_frozen.cols()))
            .collect();
        let mut head = Matrix::zeros(self.head.rows(), self.head.cols());
        for &(x, y) in batch {
            let trace = self.forward_trace(x)?;
            let mut dlogits = trace.probs.clone();
            dlogits[y] -= 1.0;
            let a_last = &trace.activations[self.layers.len()];
            for (c, dl) in dlogits.iter().enumerate() {
                for (j, aj) in a_last.iter().enumerate() {
                    head.set(c, j, head.get(c, j) + scale * dl * aj);
                }
            }
            let mut dh = self.head.matvec_t(&dlogits)?;
            for i in (0..self.layers.len()).rev() {
                let layer = &self.layers[i];
                let a_out = &trace.activations[i + 1];
                let a_in = &trace.activations[i];
                let dz: Vec<f64> = dh
                    .iter()
                    .zip(a_out)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
                let wi = &mut w[i];
                for (row, dzi) in dz.iter().enumerate() {
                    for (col, av) in a_in.iter().enumerate() {
                        let v = wi.get(row, col) + scale * dzi * av;
                        wi.set(row, col, v);
                    }
                }
                if i > 0 {
                    let s = layer.b.matvec_t(&dz)?;
                    let mut prev = layer.w_frozen.matvec_t(&dz)?;
                    let abs = layer.a.matvec_t(&s)?;
                    for (p, q) in prev.iter_mut().zip(&abs) {
                        *p += q;
                    }
                    dh = prev;
                }
            }
        }
        Ok(BaseGrad { w, head })
    }

    /// SGD step on the base weights (alignment phase).
    pub fn apply_base_update(&mut self, grad: &BaseGrad, eta: f64) -> Result<()> {
        if self.base_frozen {
            return Err(Error::Invariant("base update after freeze".into()));
        }
        for (layer, gw) in self.layers.iter_mut().zip(&grad.w) {
            for i in 0..layer.w_frozen.rows() {
                for j in 0..layer.w_frozen.cols() {
                    let v = layer.w_frozen.get(i, j) - eta * gw.get(i, j);
                    layer.w_frozen.set(i, j, v);
                }
            }
        }
        for i in 0..self.head.rows() {
            for j in 0..self.head.cols() {
                self.head
                    .set(i, j, self.head.get(i, j) - eta * grad.head.get(i, j));
            }
        }
        Ok(())
    }

    /// `delta_i <- delta_i - eta * update_i` for every named layer. Only
    /// the adapter pairs change; frozen weights are untouched.
    pub fn apply_update(&mut self, updates: &[FlatAdapterVec], eta: f64) -> Result<()> {
        for update in updates {
            let i = update.layer;
            if i >= self.layers.len() {
                return Err(Error::Shape(format!(
                    "update names layer {i} of {}",
                    self.layers.len()
                )));
            }
            if update.values.len() != self.delta_dim(i) {
                return Err(Error::Shape(format!(
                    "update for layer {i} has {} entries, expected {}",
                    update.values.len(),
                    self.delta_dim(i)
                )));
            }
            let layer = &mut self.layers[i];
            let d = layer.b.rows();
            let r = layer.rank;
            let mut idx = 0;
            for j in 0..r {
                for row in 0..d {
                    let v = layer.b.get(row, j) - eta * update.values[idx];
                    layer.b.set(row, j, v);
                    idx += 1;
                }
            }
            for j in 0..layer.a.cols() {
                for row in 0..r {
                    let v = layer.a.get(row, j) - eta * update.values[idx];
                    layer.a.set(row, j, v);
                    idx += 1;
                }
            }
        }
        Ok(())
    }

    /// Overwrite the adapter pair of one layer from a flattened vector.
    pub fn set_adapter_vec(&mut self, layer: usize, values: &[f64]) -> Result<()> {
        let l = &self.layers[layer];
        let (d, r, k) = (l.b.rows(), l.rank, l.a.cols());
        let (b, a) = unflatten_adapters(values, d, r, k)?;
        self.layers[layer].b = b;
        self.layers[layer].a = a;
        Ok(())
    }
}

// --- checkpoint serialization -------------------------------------------
//
// Binary container: magic, version tag, layout tag, arch, then raw
// little-endian f64 payloads, trailed by an FNV checksum. Round-trips are
// bit-exact.

const CKPT_MAGIC: &[u8; 8] = b"SACKPT01";
const LAYOUT_TAG: &[u8] = b"row-major;flat=bcol,acol";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("artifact truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl AdapterModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        push_u32(&mut out, LAYOUT_TAG.len() as u32);
        out.extend_from_slice(LAYOUT_TAG);
        for v in [
            self.arch.input,
            self.arch.hidden,
            self.arch.classes,
            self.arch.rank,
            self.arch.layers,
        ] {
            push_u32(&mut out, v as u32);
        }
        out.push(self.base_frozen as u8);
        for layer in &self.layers {
            push_f64s(&mut out, layer.w_frozen.data());
            push_f64s(&mut out, layer.b.data());
            push_f64s(&mut out, layer.a.data());
        }
        push_f64s(&mut out, self.head.data());
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let tag_len = r.u32()? as usize;
        if r.take(tag_len)? != LAYOUT_TAG {
            return Err(Error::Format("unknown adapter layout tag".into()));
        }
        let arch = ModelArch {
            input: r.u32()? as usize,
            hidden: r.u32()? as usize,
            classes: r.u32()? as usize,
            rank: r.u32()? as usize,
            layers: r.u32()? as usize,
        };
        let base_frozen = r.take(1)?[0] != 0;
        let mut layers = Vec::with_capacity(arch.layers);
        for i in 0..arch.layers {
            let cols = arch.layer_cols(i);
            let w = Matrix::from_vec(arch.hidden, cols, r.f64s(arch.hidden * cols)?)?;
            let b = Matrix::from_vec(arch.hidden, arch.rank, r.f64s(arch.hidden * arch.rank)?)?;
            let a = Matrix::from_vec(arch.rank, cols, r.f64s(arch.rank * cols)?)?;
            layers.push(AdapterLayer {
                w_frozen: w,
                b,
                a,
                rank: arch.rank,
            });
        }
        let head = Matrix::from_vec(
            arch.classes,
            arch.hidden,
            r.f64s(arch.classes * arch.hidden)?,
        )?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(AdapterModel {
            layers,
            head,
            arch,
            base_frozen,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small_arch() -> ModelArch {
        ModelArch {
            input: 6,
            hidden: 5,
            classes: 4,
            rank: 2,
            layers: 2,
        }
    }

    fn seeded_model(seed: u64, arch: ModelArch) -> AdapterModel {
        let mut rng = substream(seed, "init");
        AdapterModel::init(arch, &mut rng)
    }

    /// Straightforward reimplementation of the forward pass: materialize
    /// W + BA per layer and run plain loops. Independent of the fast path.
    fn naive_forward(m: &AdapterModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &m.layers {
            let eff = layer.effective_weight().unwrap();
            let mut z = vec![0.0; eff.rows()];
            for i in 0..eff.rows() {
                for j in 0..eff.cols() {
                    z[i] += eff.get(i, j) * h[j];
                }
            }
            h = z.into_iter().map(f64::tanh).collect();
        }
        let mut logits = vec![0.0; m.head.rows()];
        for i in 0..m.head.rows() {
            for j in 0..m.head.cols() {
                logits[i] += m.head.get(i, j) * h[j];
            }
        }
        softmax(&logits)
    }

    #[test]
    fn forward_is_a_probability_vector() {
        let m = seeded_model(0, ModelArch::default());
        let mut rng = substream(9, "x");
        let x: Vec<f64> = (0..32).map(|_| normal(&mut rng)).collect();
        let p = m.forward(&x).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_adapters_match_frozen_base_forward() {
        let mut m = seeded_model(1, small_arch());
        // B is zero at init, so BA = 0 regardless of A.
        let x = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2];
        let with_adapters = m.forward(&x).unwrap();
        for layer in &mut m.layers {
            let (r, k) = (layer.a.rows(), layer.a.cols());
            layer.a = Matrix::zeros(r, k);
        }
        let base_only = m.forward(&x).unwrap();
        for (a, b) in with_adapters.iter().zip(&base_only) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn seed0_forward_matches_recorded_golden_vector() {
        // Golden values produced by `naive_forward` on the seed-0 default
        // model with the fixed input below; frozen to guard both paths.
        let m = seeded_model(0, ModelArch::default());
        let x: Vec<f64> = (0..32).map(|i| ((i as f64) * 0.1).sin()).collect();
        let got = m.forward(&x).unwrap();
        let oracle = naive_forward(&m, &x);
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-12);
        }
        let golden = GOLDEN_SEED0;
        for (g, e) in got.iter().zip(&golden) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    // Regenerate by printing `naive_forward` output if the init scheme
    // intentionally changes.
    const GOLDEN_SEED0: [f64; 8] = [
        0.10342689992791686,
        0.14381096646073455,
        0.14961757052424957,
        0.14731126990021087,
        0.1281671432649917,
        0.10333909375679044,
        0.11397925602802651,
        0.1103478001370795,
    ];

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let m = seeded_model(0, small_arch());
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_log_likelihood_rejects_bad_label() {
        let m = seeded_model(0, small_arch());
        let x = vec![0.0; 6];
        assert!(matches!(
            m.grad_log_likelihood(&x, 11),
            Err(Error::Domain(_))
        ));
    }

    fn central_difference_check(seed: u64) {
        let arch = small_arch();
        let mut m = seeded_model(seed, arch);
        // Move B off zero so A-gradients are live.
        let mut rng = substream(seed, "perturb");
        for li in 0..m.layers.len() {
            let dim = m.delta_dim(li);
            let vals: Vec<f64> = (0..dim).map(|_| 0.1 * normal(&mut rng)).collect();
            m.set_adapter_vec(li, &vals).unwrap();
        }
        let x: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
        let y = (seed % 4) as usize;

        let grads = m.grad_log_likelihood(&x, y).unwrap();
        let h = 1e-5;
        for li in 0..m.layers.len() {
            let base = m.adapter_vec(li);
            for idx in (0..base.len()).step_by(7) {
                let mut plus = m.clone();
                let mut vals = base.clone();
                vals[idx] += h;
                plus.set_adapter_vec(li, &vals).unwrap();
                let mut minus = m.clone();
                vals[idx] -= 2.0 * h;
                minus.set_adapter_vec(li, &vals).unwrap();
                let fp = plus.forward(&x).unwrap()[y].ln();
                let fm = minus.forward(&x).unwrap()[y].ln();
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[li].values[idx];
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-6 + 1e-4 * an.abs(),
                    "layer {li} coord {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn log_likelihood_gradient_matches_central_differences() {
        for seed in 0..4 {
            central_difference_check(seed);
        }
    }

    #[test]
    fn saturated_likelihood_has_vanishing_gradient() {
        let arch = small_arch();
        let mut m = seeded_model(3, arch);
        let x = vec![0.5; 6];
        let y = 2usize;
        // Point the head row for y along the last activation, scaled hard,
        // so that class saturates to probability ~1.
        let trace = m.forward_trace(&x).unwrap();
        let a_last = &trace.activations[m.layers.len()];
        let sq: f64 = a_last.iter().map(|v| v * v).sum();
        let gain = 30.0 / sq; // logit for y becomes exactly 30
        let head = m.head.clone();
        m.head = Matrix::from_fn(head.rows(), head.cols(), |i, j| {
            if i == y {
                gain * a_last[j]
            } else {
                head.get(i, j)
            }
        });
        let p = m.forward(&x).unwrap();
        assert!(p[y] > 1.0 - 1e-9);
        let grads = m.grad_log_likelihood(&x, y).unwrap();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn b_gradient_of_last_layer_vanishes_when_a_is_zero() {
        // dB = dz (A a_in)^T; with A = 0 the product rule forces dB = 0.
        let arch = small_arch();
        let mut m = seeded_model(4, arch);
        let last = m.layers.len() - 1;
        let (r, k) = (m.layers[last].a.rows(), m.layers[last].a.cols());
        m.layers[last].a = Matrix::zeros(r, k);
        let x = vec![0.2, 0.4, -0.1, 0.3, 0.0, -0.2];
        let grads = m.grad_log_likelihood(&x, 1).unwrap();
        let d = m.layers[last].b.rows();
        for v in &grads[last].values[..d * r] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn task_loss_of_single_example_is_negated_log_likelihood_grad() {
        let m = seeded_model(5, small_arch());
        let x = vec![0.1, -0.3, 0.2, 0.5, -0.1, 0.4];
        let g_ll = m.grad_log_likelihood(&x, 2).unwrap();
        let g_task = m.grad_task_loss(&[(&x, 2)]).unwrap();
        for (a, b) in g_ll.iter().zip(&g_task) {
            for (av, bv) in a.values.iter().zip(&b.values) {
                assert!((av + bv).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let m = seeded_model(6, small_arch());
        let x1 = [0.1, -0.3, 0.2, 0.5, -0.1, 0.4];
        let x2 = [-0.2, 0.1, 0.0, 0.3, 0.2, -0.5];
        let single = m.grad_task_loss(&[(&x1[..], 0), (&x2[..], 3)]).unwrap();
        let doubled = m
            .grad_task_loss(&[(&x1[..], 0), (&x2[..], 3), (&x1[..], 0), (&x2[..], 3)])
            .unwrap();
        for (a, b) in single.iter().zip(&doubled) {
            for (av, bv) in a.values.iter().zip(&b.values) {
                assert!((av - bv).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_update_and_zero_eta_leave_model_unchanged() {
        let m0 = seeded_model(7, small_arch());
        let updates: Vec<FlatAdapterVec> = (0..m0.layers.len())
            .map(|i| FlatAdapterVec::zeros(i, m0.delta_dim(i)))
            .collect();
        let mut m = m0.clone();
        m.apply_update(&updates, 0.5).unwrap();
        for (l0, l1) in m0.layers.iter().zip(&m.layers) {
            assert_eq!(l0.b.data(), l1.b.data());
            assert_eq!(l0.a.data(), l1.a.data());
        }
        let mut m = m0.clone();
        let g = m
            .grad_task_loss(&[(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6][..], 1)])
            .unwrap();
        m.apply_update(&g, 0.0).unwrap();
        for (l0, l1) in m0.layers.iter().zip(&m.layers) {
            assert_eq!(l0.b.data(), l1.b.data());
            assert_eq!(l0.a.data(), l1.a.data());
        }
    }

    #[test]
    fn apply_update_rejects_layout_mismatch() {
        let mut m = seeded_model(7, small_arch());
        let bad = vec![FlatAdapterVec::zeros(0, 3)];
        assert!(matches!(m.apply_update(&bad, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_identity() {
        let m = seeded_model(8, small_arch());
        for layer in &m.layers {
            let flat = flatten_adapters(&layer.b, &layer.a);
            let (b, a) =
                unflatten_adapters(&flat, layer.b.rows(), layer.rank, layer.a.cols()).unwrap();
            assert_eq!(b.data(), layer.b.data());
            assert_eq!(a.data(), layer.a.data());
        }
    }

    #[test]
    fn update_touches_only_adapters() {
        let mut m = seeded_model(9, small_arch());
        m.freeze_base();
        let before = m.base_checksum();
        let x = [0.3; 6];
        let g = m.grad_task_loss(&[(&x[..], 0)]).unwrap();
        m.apply_update(&g, 0.2).unwrap();
        assert_eq!(m.base_checksum(), before);
        let bg = m.grad_base_loss(&[(&x[..], 0)]).unwrap();
        assert!(m.apply_base_update(&bg, 0.1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut m = seeded_model(10, ModelArch::default());
        m.freeze_base();
        let bytes = m.to_bytes();
        let back = AdapterModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.base_checksum(), m.base_checksum());
        assert!(back.is_base_frozen());
        for (l0, l1) in m.layers.iter().zip(&back.layers) {
            assert_eq!(l0.b.data(), l1.b.data());
            assert_eq!(l0.a.data(), l1.a.data());
            assert_eq!(l0.w_frozen.data(), l1.w_frozen.data());
        }

        let mut corrupted = bytes.clone();
        let mid = corrupted.len() / 2;
        corrupted[mid] ^= 0xff;
        assert!(AdapterModel::from_bytes(&corrupted).is_err());
    }

    #[test]
    fn base_grad_matches_central_differences() {
        let arch = small_arch();
        let m = seeded_model(12, arch);
        let x = [0.4, -0.2, 0.1, 0.3, -0.5, 0.2];
        let batch = [(&x[..], 2usize)];
        let g = m.grad_base_loss(&batch).unwrap();
        let h = 1e-5;
        for (probe_i, probe_j) in [(0usize, 0usize), (2, 3), (4, 1)] {
            let mut plus = m.clone();
            plus.layers[0].w_frozen.set(
                probe_i,
                probe_j,
                m.layers[0].w_frozen.get(probe_i, probe_j) + h,
            );
            let mut minus = m.clone();
            minus.layers[0].w_frozen.set(
                probe_i,
                probe_j,
                m.layers[0].w_frozen.get(probe_i, probe_j) - h,
            );
            let fp = plus.mean_cross_entropy(&batch).unwrap();
            let fm = minus.mean_cross_entropy(&batch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.w[0].get(probe_i, probe_j);
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs());
        }
    }
}
