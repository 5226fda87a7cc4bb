//! Forward-KL anchor regularizer.
//!
//! At each domain boundary the previous checkpoint's output distribution
//! is snapshotted on the safety calibration set; during the domain the
//! anchor loss `gamma * mean KL(p_ref || p_cur)` penalizes drift away
//! from it. Forward KL is mean-seeking: it punishes the current model
//! for assigning low probability where the reference assigned mass,
//! which is what preserves refusal behaviour. A reverse-KL variant
//! exists for direction-of-effect comparisons.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{AdapterModel, FlatAdapterVec};
use crate::tasks::Example;

/// Probabilities are clamped to this floor before any log; softmax
/// outputs are strictly positive in exact arithmetic, so the clamp only
/// guards underflow.
pub const EPS_FLOOR: f64 = 1e-12;

/// Direction of the anchor divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    Forward,
    Reverse,
}

/// Snapshot of the previous checkpoint's output distributions on the
/// calibration set, keyed by example ID. Refreshed exactly at domain
/// boundaries, never mid-domain.
#[derive(Clone, Debug)]
pub struct AnchorReference {
    refs: BTreeMap<u64, Vec<f64>>,
}

impl AnchorReference {
    /// Record the model's current outputs on every calibration example.
    pub fn snapshot(model: &AdapterModel, examples: &[Example]) -> Result<Self> {
        let mut refs = BTreeMap::new();
        for ex in examples {
            refs.insert(ex.id, model.forward(&ex.x)?);
        }
        Ok(AnchorReference { refs })
    }

    pub fn get(&self, id: u64) -> Option<&Vec<f64>> {
        self.refs.get(&id)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

fn check_distributions(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `sum p ln(p/q)` with the convention `0 ln(0/q) = 0`; `q` is floored at
/// `EPS_FLOOR` so the result is always finite and non-negative.
pub fn kl_forward(p_ref: &[f64], q_cur: &[f64]) -> Result<f64> {
    check_distributions(p_ref, q_cur)?;
    let mut acc = 0.0;
    for (&p, &q) in p_ref.iter().zip(q_cur) {
        if p > 0.0 {
            acc += p * (p.max(EPS_FLOOR) / q.max(EPS_FLOOR)).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// `KL(q || p_ref)`; mode-seeking counterpart of [`kl_forward`].
pub fn kl_reverse(p_ref: &[f64], q_cur: &[f64]) -> Result<f64> {
    kl_forward(q_cur, p_ref)
}

/// Anchor loss and its adapter gradients over a batch of calibration
/// examples.
///
/// Loss is `gamma * mean_x D(p_ref(x), p_cur(x))` in the configured
/// direction. The gradient with respect to the current logits is analytic
/// (`q - p_ref` for forward KL) and backpropagated through the adapters;
/// a `gamma` of zero short-circuits to zeros.
pub fn anchor_loss_and_grad(
    model: &AdapterModel,
    reference: &AnchorReference,
    batch: &[&Example],
    gamma: f64,
    direction: KlDirection,
) -> Result<(f64, Vec<FlatAdapterVec>)> {
    let zeros = || -> Vec<FlatAdapterVec> {
        (0..model.layers.len())
            .map(|i| FlatAdapterVec::zeros(i, model.delta_dim(i)))
            .collect()
    };
    if gamma == 0.0 {
        return Ok((0.0, zeros()));
    }
    if batch.is_empty() {
        return Err(Error::Domain("empty anchor batch".into()));
    }
    let scale = gamma / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = zeros();
    for ex in batch {
        let p_ref = reference
            .get(ex.id)
            .ok_or_else(|| Error::Domain(format!("no anchor reference for example {}", ex.id)))?;
        let trace = model.forward_trace(&ex.x)?;
        let q = &trace.probs;
        let dlogits: Vec<f64> = match direction {
            KlDirection::Forward => {
                total_loss += kl_forward(p_ref, q)?;
                // d KL(p_ref || q) / d logits = q - p_ref
                q.iter().zip(p_ref).map(|(qi, pi)| qi - pi).collect()
            }
            KlDirection::Reverse => {
                let loss = kl_reverse(p_ref, q)?;
                total_loss += loss;
                // d KL(q || p_ref) / d logits_j = q_j (ln(q_j/p_j) - KL)
                q.iter()
                    .zip(p_ref)
                    .map(|(&qi, &pi)| qi * ((qi.max(EPS_FLOOR) / pi.max(EPS_FLOOR)).ln() - loss))
                    .collect()
            }
        };
        let g = model.adapter_grads_from_dlogits(&trace, &dlogits)?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (av, gv) in acc.values.iter_mut().zip(&gi.values) {
                *av += scale * gv;
            }
        }
    }
    Ok((scale * total_loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelArch;
    use crate::rng::{normal, substream};

    fn small_model(seed: u64) -> AdapterModel {
        let mut rng = substream(seed, "init");
        let arch = ModelArch {
            input: 6,
            hidden: 5,
            classes: 4,
            rank: 2,
            layers: 2,
        };
        let mut m = AdapterModel::init(arch, &mut rng);
        for li in 0..m.layers.len() {
            let dim = m.delta_dim(li);
            let vals: Vec<f64> = (0..dim).map(|_| 0.1 * normal(&mut rng)).collect();
            m.set_adapter_vec(li, &vals).unwrap();
        }
        m
    }

    fn examples(model: &AdapterModel, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = substream(seed, "anchor/x");
        (0..n)
            .map(|i| Example {
                id: 1000 + i as u64,
                x: (0..model.arch.input).map(|_| normal(&mut rng)).collect(),
                label: i % model.arch.classes,
                harmful: false,
            })
            .collect()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = vec![0.25, 0.25, 0.5];
        assert_eq!(kl_forward(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form_point_mass_to_uniform() {
        let p = vec![1.0, 0.0];
        let q = vec![0.5, 0.5];
        let v = kl_forward(&p, &q).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        // Direct-summation oracle: 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5) and
        // the reverse order.
        let p = vec![0.9, 0.1];
        let q = vec![0.5, 0.5];
        let fwd = kl_forward(&p, &q).unwrap();
        let rev = kl_reverse(&p, &q).unwrap();
        let fwd_oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let rev_oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((fwd - fwd_oracle).abs() < 1e-12);
        assert!((rev - rev_oracle).abs() < 1e-12);
        assert!((fwd - 0.3681).abs() < 5e-5);
        assert!((rev - 0.5108).abs() < 5e-5);
        assert!(fwd != rev);
    }

    #[test]
    fn kl_survives_zero_entries_in_q() {
        let p = vec![0.5, 0.5];
        let q = vec![1.0, 0.0];
        let v = kl_forward(&p, &q).unwrap();
        assert!(v.is_finite());
        assert!(v > 0.0);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        assert!(kl_forward(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn anchor_loss_zero_when_model_unchanged() {
        let m = small_model(1);
        let exs = examples(&m, 5, 2);
        let reference = AnchorReference::snapshot(&m, &exs).unwrap();
        let batch: Vec<&Example> = exs.iter().collect();
        let (loss, grads) =
            anchor_loss_and_grad(&m, &reference, &batch, 0.1, KlDirection::Forward).unwrap();
        assert!(loss.abs() < 1e-15);
        let gnorm: f64 = grads
            .iter()
            .flat_map(|g| g.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(gnorm <= 1e-10);
    }

    #[test]
    fn gamma_zero_short_circuits() {
        let m = small_model(3);
        let exs = examples(&m, 2, 4);
        let reference = AnchorReference::snapshot(&m, &exs).unwrap();
        let batch: Vec<&Example> = exs.iter().collect();
        let (loss, grads) =
            anchor_loss_and_grad(&m, &reference, &batch, 0.0, KlDirection::Forward).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn missing_reference_id_is_a_domain_error() {
        let m = small_model(5);
        let exs = examples(&m, 2, 6);
        let reference = AnchorReference::snapshot(&m, &exs[..1]).unwrap();
        let batch: Vec<&Example> = exs.iter().collect();
        assert!(matches!(
            anchor_loss_and_grad(&m, &reference, &batch, 0.1, KlDirection::Forward),
            Err(Error::Domain(_))
        ));
    }

    fn fd_check(direction: KlDirection, seed: u64) {
        let m0 = small_model(seed);
        let exs = examples(&m0, 3, seed + 50);
        let reference = AnchorReference::snapshot(&m0, &exs).unwrap();
        // Perturb the model so the anchor loss is non-trivial.
        let mut m = m0.clone();
        let mut rng = substream(seed, "fd/perturb");
        for li in 0..m.layers.len() {
            let mut vals = m.adapter_vec(li);
            for v in &mut vals {
                *v += 0.05 * normal(&mut rng);
            }
            m.set_adapter_vec(li, &vals).unwrap();
        }
        let gamma = 0.1;
        let batch: Vec<&Example> = exs.iter().collect();
        let (_, grads) = anchor_loss_and_grad(&m, &reference, &batch, gamma, direction).unwrap();

        let loss_of = |model: &AdapterModel| -> f64 {
            let (l, _) = anchor_loss_and_grad(model, &reference, &batch, gamma, direction).unwrap();
            l
        };
        let h = 1e-5;
        for li in 0..m.layers.len() {
            let base = m.adapter_vec(li);
            for idx in (0..base.len()).step_by(11) {
                let mut plus = m.clone();
                let mut vals = base.clone();
                vals[idx] += h;
                plus.set_adapter_vec(li, &vals).unwrap();
                let mut minus = m.clone();
                vals[idx] -= 2.0 * h;
                minus.set_adapter_vec(li, &vals).unwrap();
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[li].values[idx];
                assert!(
                    (fd - an).abs() <= 1e-7 + 1e-4 * an.abs().max(fd.abs()),
                    "{direction:?} layer {li} coord {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn forward_anchor_gradient_matches_central_differences() {
        for seed in 0..3 {
            fd_check(KlDirection::Forward, seed);
        }
    }

    #[test]
    fn reverse_anchor_gradient_matches_central_differences() {
        for seed in 0..3 {
            fd_check(KlDirection::Reverse, seed);
        }
    }

    #[test]
    fn anchor_loss_is_nonnegative_for_random_pairs() {
        let mut rng = substream(9, "nonneg");
        for _ in 0..200 {
            let raw: Vec<f64> = (0..6).map(|_| normal(&mut rng).exp()).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let raw: Vec<f64> = (0..6).map(|_| normal(&mut rng).exp()).collect();
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            assert!(kl_forward(&p, &q).unwrap() >= 0.0);
            assert!(kl_reverse(&p, &q).unwrap() >= 0.0);
        }
    }
}
