//! Property tests over the engine-wide invariants that hold for all
//! inputs, not just the worked examples.

use proptest::prelude::*;

use safeanchor_core::analytics::grassmannian_distance;
use safeanchor_core::anchor::{kl_forward, kl_reverse};
use safeanchor_core::csm::trigger_decision;
use safeanchor_core::linalg::{sym_eig, Matrix};
use safeanchor_core::model::{flatten_adapters, softmax, unflatten_adapters};
use safeanchor_core::ssi::select_basis;
use safeanchor_core::tasks::composite_safety;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01_f64..10.0, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flatten_unflatten_is_a_bijection(
        d in 1usize..8, r in 1usize..4, k in 1usize..8,
        raw in proptest::collection::vec(-10.0_f64..10.0, 1..96)
    ) {
        let need = d * r + r * k;
        let mut vals = raw;
        vals.resize(need, 0.5);
        let (b, a) = unflatten_adapters(&vals, d, r, k).unwrap();
        let back = flatten_adapters(&b, &a);
        prop_assert_eq!(back, vals);
    }

    #[test]
    fn kl_divergences_are_nonnegative_and_zero_on_identity(p in distribution(6), q in distribution(6)) {
        let f = kl_forward(&p, &q).unwrap();
        let r = kl_reverse(&p, &q).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert!(r >= 0.0);
        prop_assert!(kl_forward(&p, &p).unwrap().abs() < 1e-14);
    }

    #[test]
    fn composite_stays_in_range_and_rejects_outside(
        h in 0.0_f64..100.0, t in 0.0_f64..100.0, b in 0.0_f64..100.0
    ) {
        let c = composite_safety(h, t, b).unwrap();
        prop_assert!((0.0..=100.0).contains(&c));
        prop_assert!(composite_safety(h + 101.0, t, b).is_err());
    }

    #[test]
    fn grassmannian_is_monotone_and_permutation_invariant(
        mut angles in proptest::collection::vec(0.0_f64..std::f64::consts::FRAC_PI_2, 1..8),
        bump in 0.001_f64..0.2,
    ) {
        let k = angles.len();
        let d0 = grassmannian_distance(&angles, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d0));
        // Monotone in each angle.
        let i = angles.len() / 2;
        let old = angles[i];
        angles[i] = (old + bump).min(std::f64::consts::FRAC_PI_2);
        let d1 = grassmannian_distance(&angles, k).unwrap();
        prop_assert!(d1 >= d0 - 1e-12);
        // Permutation-invariant.
        angles.reverse();
        let d2 = grassmannian_distance(&angles, k).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn trigger_decision_is_pure_and_strict(s_t in 0.0_f64..1.0, s0 in 0.01_f64..1.0, tau in 0.0_f64..0.99) {
        let a = trigger_decision(s_t, s0, tau).unwrap();
        let b = trigger_decision(s_t, s0, tau).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a, s_t < (1.0 - tau) * s0);
        // Exactly at the threshold: no trigger.
        prop_assert!(!trigger_decision((1.0 - tau) * s0, s0, tau).unwrap());
    }

    #[test]
    fn ks_is_monotone_in_rho_for_psd_spectra(
        raw in proptest::collection::vec(-2.0_f64..2.0, 12..36)
    ) {
        // Build a PSD matrix from random low-rank factors and check the
        // basis-size monotonicity over a rho sweep.
        let n = 6;
        let cols = raw.len() / n;
        let g = Matrix::from_vec(n, cols, raw[..n * cols].to_vec()).unwrap();
        let f = g.matmul(&g.transpose()).unwrap();
        let eig = sym_eig(&f).unwrap();
        let mut prev = 0usize;
        for rho in [0.2, 0.4, 0.6, 0.8, 0.9, 1.0] {
            let k = select_basis(&eig, rho, 0).unwrap().rank();
            prop_assert!(k >= prev, "k_s not monotone at rho {}", rho);
            prev = k;
        }
        prop_assert!(prev <= cols.min(n));
    }

    #[test]
    fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0_f64..50.0, 2..10)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
