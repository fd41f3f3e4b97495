//! Property tests for the ternary quantizers.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qsubgrad::quantize::{
    optimal_ternary_oracle, quantization_error, stochastic_ternary, threshold_approx,
    threshold_exact, TernaryGradient,
};

fn small_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..=12)
}

fn sign_preserved(v: &[f64], q: &TernaryGradient) -> bool {
    v.iter()
        .zip(q.codes())
        .all(|(&x, &c)| c == 0 || (c > 0) == (x > 0.0))
}

/// Candidate thresholds are the distinct magnitudes plus one below the
/// minimum; the direct objective is `(Σ_{|v_i|>Δ} |v_i|)² / |I_Δ|`.
fn direct_max_objective(v: &[f64]) -> f64 {
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).filter(|&m| m > 0.0).collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    let mut candidates: Vec<f64> = mags.clone();
    candidates.push(-1.0); // below every magnitude: the all-in support
    let mut best = f64::NEG_INFINITY;
    for delta in candidates {
        let sel: Vec<f64> = v
            .iter()
            .map(|x| x.abs())
            .filter(|&m| m > delta && m > 0.0)
            .collect();
        if sel.is_empty() {
            continue;
        }
        let s: f64 = sel.iter().sum();
        best = best.max(s * s / sel.len() as f64);
    }
    best
}

proptest! {
    #[test]
    fn exact_matches_brute_force_oracle(v in small_vector()) {
        let q = threshold_exact(&v).unwrap();
        let e_exact = quantization_error(&v, &q).unwrap();
        let oracle = optimal_ternary_oracle(&v).unwrap();
        let tol = 1e-12 * oracle.error.max(1e-3);
        prop_assert!(
            (e_exact - oracle.error).abs() <= tol,
            "exact {e_exact} vs oracle {}", oracle.error
        );
    }

    #[test]
    fn exact_dominates_approx_and_stochastic(v in small_vector(), seed in any::<u64>()) {
        let e_exact = quantization_error(&v, &threshold_exact(&v).unwrap()).unwrap();
        let e_approx = quantization_error(&v, &threshold_approx(&v).unwrap()).unwrap();
        prop_assert!(e_exact <= e_approx + 1e-12 * e_approx.max(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let draw = stochastic_ternary(&v, &mut rng).unwrap();
            let e_draw = quantization_error(&v, &draw).unwrap();
            prop_assert!(e_exact <= e_draw + 1e-12 * e_draw.max(1.0));
        }
    }

    #[test]
    fn signs_are_preserved(v in small_vector(), seed in any::<u64>()) {
        prop_assert!(sign_preserved(&v, &threshold_exact(&v).unwrap()));
        prop_assert!(sign_preserved(&v, &threshold_approx(&v).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(sign_preserved(&v, &stochastic_ternary(&v, &mut rng).unwrap()));
    }

    #[test]
    fn deterministic_quantizers_are_pure(v in small_vector()) {
        prop_assert_eq!(threshold_exact(&v).unwrap(), threshold_exact(&v).unwrap());
        prop_assert_eq!(threshold_approx(&v).unwrap(), threshold_approx(&v).unwrap());
    }

    #[test]
    fn exact_scan_attains_the_candidate_maximum(v in small_vector()) {
        let q = threshold_exact(&v).unwrap();
        if q.nnz() == 0 {
            // Zero vector: no candidates.
            prop_assert!(v.iter().all(|&x| x == 0.0));
            return Ok(());
        }
        let selected_sum: f64 = v
            .iter()
            .zip(q.codes())
            .filter(|(_, &c)| c != 0)
            .map(|(&x, _)| x.abs())
            .sum();
        let achieved = selected_sum * selected_sum / q.nnz() as f64;
        let best = direct_max_objective(&v);
        prop_assert!(
            (achieved - best).abs() <= 1e-9 * best.max(1e-9),
            "achieved {achieved} vs best {best}"
        );
    }

    #[test]
    fn zero_scale_implies_zero_codes(v in small_vector(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in [
            threshold_exact(&v).unwrap(),
            threshold_approx(&v).unwrap(),
            stochastic_ternary(&v, &mut rng).unwrap(),
        ] {
            if q.scale() == 0.0 {
                prop_assert_eq!(q.nnz(), 0);
            }
            // Dense view is consistent with scale * codes.
            let dense = q.dense();
            for (i, &x) in dense.iter().enumerate() {
                prop_assert_eq!(x, q.value(i));
            }
        }
    }
}

#[test]
fn objective_tie_breaks_toward_larger_support() {
    // Magnitudes [3, 1, 1, 1]: support {3} scores 9, the full support scores
    // 36/4 = 9 (an exact tie in binary floating point). The smaller
    // threshold, i.e. the larger support, must win.
    let v = [3.0, -1.0, 1.0, 1.0];
    let q = threshold_exact(&v).unwrap();
    assert_eq!(q.codes(), &[1, -1, 1, 1]);
    assert!((q.scale() - 1.5).abs() < 1e-15);
}

#[test]
fn stochastic_standard_error_shrinks_with_sample_count() {
    // Monte-Carlo means converge ~1/sqrt(N): the empirical deviation at
    // 40000 draws should be well under the deviation bound at 400 draws.
    let v = [0.3, -0.6, 0.05, 0.9];
    let mean_abs_dev = |n: usize, seed: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = vec![0.0; v.len()];
        for _ in 0..n {
            let q = stochastic_ternary(&v, &mut rng).unwrap();
            for (s, i) in sum.iter_mut().zip(0..v.len()) {
                *s += q.value(i);
            }
        }
        sum.iter()
            .zip(&v)
            .map(|(s, &x)| (s / n as f64 - x).abs())
            .fold(0.0f64, f64::max)
    };
    let coarse = mean_abs_dev(400, 5);
    let fine = mean_abs_dev(40_000, 6);
    // ~10x fewer in expectation; allow a wide band for randomness.
    assert!(
        fine < coarse.max(0.02),
        "fine {fine} should beat coarse {coarse}"
    );
    assert!(fine < 0.02, "fine deviation too large: {fine}");
}
