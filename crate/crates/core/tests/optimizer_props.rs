//! Update-rule properties: exact sparsification, accumulator monotonicity,
//! support invariance under learning-rate scaling, and the bitwise
//! equivalence of the quantized rules fed full-precision gradients.

use proptest::prelude::*;

use qsubgrad::optimizer::{Method, OptimizerConfig, OptimizerState};

fn gradient_sequence() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..12)
}

fn cfg(method: Method, eta: f64, lambda: f64, delta: f64) -> OptimizerConfig {
    OptimizerConfig {
        method,
        eta,
        lambda,
        delta,
    }
}

proptest! {
    #[test]
    fn soft_threshold_produces_exact_zeros(grads in gradient_sequence(), lambda in 0.05f64..1.0) {
        // Every coordinate whose pre-shrink magnitude is at most the shrink
        // amount ends exactly at 0.0 (no epsilon needed downstream).
        let c = cfg(Method::Qcmd, 0.3, lambda, 1e-8);
        let mut s = OptimizerState::new(6, 1e-8);
        for g in &grads {
            let before = s.x().to_vec();
            s.step(g, &c).unwrap();
            for i in 0..6 {
                let h = s.adaptive().h(i);
                let pre = before[i] - c.eta * g[i] / h;
                if pre.abs() <= c.lambda * c.eta / h {
                    prop_assert_eq!(s.x()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn adaptive_steps_never_grow(grads in gradient_sequence()) {
        let c = cfg(Method::Qcmd, 0.3, 0.0, 1e-8);
        let mut s = OptimizerState::new(6, 1e-8);
        let mut prev_h = [0.0f64; 6];
        for g in &grads {
            s.step(g, &c).unwrap();
            for i in 0..6 {
                let h = s.adaptive().h(i);
                prop_assert!(h >= prev_h[i]);
                prev_h[i] = h;
            }
        }
    }

    #[test]
    fn dual_averaging_support_ignores_eta(grads in gradient_sequence(), scale in 0.1f64..10.0) {
        // Eta multiplies outside the truncation in the dual-averaging rule,
        // so the zero/nonzero pattern at fixed t is eta-free.
        let c1 = cfg(Method::Qrda, 0.2, 0.1, 1e-8);
        let c2 = cfg(Method::Qrda, 0.2 * scale, 0.1, 1e-8);
        let mut s1 = OptimizerState::new(6, 1e-8);
        let mut s2 = OptimizerState::new(6, 1e-8);
        for g in &grads {
            s1.step(g, &c1).unwrap();
            s2.step(g, &c2).unwrap();
            for i in 0..6 {
                prop_assert_eq!(s1.x()[i] == 0.0, s2.x()[i] == 0.0);
            }
        }
    }

    #[test]
    fn quantized_rules_degenerate_to_full_precision(grads in gradient_sequence()) {
        // Same arithmetic, different label: Qcmd == Cmd and Qrda == Rda on
        // identical gradient sequences, bit for bit.
        for (qm, fm) in [(Method::Qcmd, Method::Cmd), (Method::Qrda, Method::Rda)] {
            let mut q = OptimizerState::new(6, 1e-8);
            let mut f = OptimizerState::new(6, 1e-8);
            for g in &grads {
                q.step(g, &cfg(qm, 0.3, 0.05, 1e-8)).unwrap();
                f.step(g, &cfg(fm, 0.3, 0.05, 1e-8)).unwrap();
            }
            for (a, b) in q.x().iter().zip(f.x()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn unselected_zero_coordinates_stay_zero(grads in gradient_sequence()) {
        // A coordinate at exactly zero that receives a zero gradient stays
        // zero under both rules (the synchronous-indicator soundness
        // argument at the update level).
        for method in [Method::Qcmd, Method::Qrda] {
            let c = cfg(method, 0.3, 0.1, 1e-8);
            let mut s = OptimizerState::new(6, 1e-8);
            for g in &grads {
                // Zero out the gradient wherever x is already zero.
                let masked: Vec<f64> = g
                    .iter()
                    .zip(s.x())
                    .map(|(&gi, &xi)| if xi == 0.0 { 0.0 } else { gi })
                    .collect();
                let zero_before: Vec<bool> = s.x().iter().map(|&x| x == 0.0).collect();
                s.step(&masked, &c).unwrap();
                for i in 0..6 {
                    if zero_before[i] {
                        prop_assert_eq!(s.x()[i], 0.0);
                    }
                }
            }
        }
    }
}
