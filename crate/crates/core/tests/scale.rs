use nalgebra::DMatrix;
use proptest::prelude::*;
use qboost_core::metrics::srocc;
use qboost_core::normal;
use qboost_core::pcm::PairComparisonMatrix;
use qboost_core::scale::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn random_pcm(n: usize, rng: &mut ChaCha8Rng, max: u32) -> PairComparisonMatrix {
    let mut pcm = PairComparisonMatrix::zeros(ids(n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pcm.add(i, j, rng.random_range(0..=max) as f64).unwrap();
            }
        }
    }
    pcm
}

/// Pairwise counts drawn from the generative model with `k` trials per pair.
fn generative_pcm<F: Fn(usize, usize) -> f64>(n: usize, k: u64, prob: F, rng: &mut ChaCha8Rng) -> PairComparisonMatrix {
    let mut pcm = PairComparisonMatrix::zeros(ids(n));
    for i in 0..n {
        for j in (i + 1)..n {
            let wins = Binomial::new(k, prob(i, j)).unwrap().sample(rng);
            pcm.add(i, j, wins as f64).unwrap();
            pcm.add(j, i, (k - wins) as f64).unwrap();
        }
    }
    pcm
}

/// Straight re-evaluation of the Case III likelihood over enumerated pairs.
fn brute_log_likelihood(s: &[f64], sigma: &[f64], pcm: &PairComparisonMatrix) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let p = normal::cdf((s[i] - s[j]) / (sigma[i].powi(2) + sigma[j].powi(2)).sqrt());
            if pcm.get(i, j) > 0.0 {
                total += pcm.get(i, j) * p.ln();
            }
            if pcm.get(j, i) > 0.0 {
                total += pcm.get(j, i) * (1.0 - p).ln();
            }
        }
    }
    total
}

fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n == 1 {
        return m[0][0];
    }
    (0..n)
        .map(|c| {
            let minor: Vec<Vec<f64>> = m[1..]
                .iter()
                .map(|row| row.iter().enumerate().filter(|(k, _)| *k != c).map(|(_, v)| *v).collect())
                .collect();
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[0][c] * determinant(&minor)
        })
        .sum()
}

/// Inverse by the adjugate, cofactors from Laplace expansion.
fn cofactor_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let det = determinant(m);
    let mut inv = vec![vec![0.0; n]; n];
    for r in 0..n {
        for c in 0..n {
            let minor: Vec<Vec<f64>> = m
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != r)
                .map(|(_, row)| row.iter().enumerate().filter(|(k, _)| *k != c).map(|(_, v)| *v).collect())
                .collect();
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            inv[c][r] = sign * determinant(&minor) / det;
        }
    }
    inv
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn likelihood_matches_pairwise_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(2..8);
        let pcm = random_pcm(n, &mut rng, 6);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let got = log_likelihood(&s, &sigma, &pcm).unwrap();
        let want = brute_log_likelihood(&s, &sigma, &pcm);
        assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let pcm = random_pcm(n, &mut rng, 9);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.8)).collect();
        let (gs, gsig) = log_likelihood_gradient(&s, &sigma, &pcm).unwrap();
        assert!(gs.iter().sum::<f64>().abs() < 1e-9);
        for k in 0..n {
            let mut up = s.clone();
            let mut dn = s.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (log_likelihood(&up, &sigma, &pcm).unwrap() - log_likelihood(&dn, &sigma, &pcm).unwrap()) / (2.0 * h);
            assert!((gs[k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "ds {k}: {} vs {fd}", gs[k]);
            let mut up = sigma.clone();
            let mut dn = sigma.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (log_likelihood(&s, &up, &pcm).unwrap() - log_likelihood(&s, &dn, &pcm).unwrap()) / (2.0 * h);
            assert!((gsig[k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "dsigma {k}: {} vs {fd}", gsig[k]);
        }
    }
}

#[test]
fn covariance_matches_cofactor_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let n = rng.random_range(2..=5);
        let pcm = random_pcm(n, &mut rng, 8);
        let est = fit_thurstone_case3(&pcm, &FitOptions::default()).unwrap();
        let h = score_hessian(&est.s_hat, &est.sigma_hat, &pcm).unwrap();
        let cov = covariance_of_estimates(&h).unwrap();
        let mut aug = vec![vec![0.0; n + 1]; n + 1];
        for r in 0..n {
            for c in 0..n {
                aug[r][c] = -h[(r, c)];
            }
            aug[r][n] = 1.0;
            aug[n][r] = 1.0;
        }
        let inv = cofactor_inverse(&aug);
        for r in 0..n {
            for c in 0..n {
                assert!((cov[(r, c)] - inv[r][c]).abs() < 1e-8, "({r},{c})");
            }
        }
        assert_eq!(cov, cov.transpose());
    }
}

#[test]
fn covariance_of_negative_identity() {
    let cov = covariance_of_estimates(&(-DMatrix::<f64>::identity(2, 2))).unwrap();
    let want = [0.5, -0.5, -0.5, 0.5];
    for (a, b) in cov.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn generative_recovery_all_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5;
    let s_true: Vec<f64> = vec![-0.9, -0.35, 0.05, 0.5, 1.1];
    let sigma_true: Vec<f64> = vec![0.6, 0.9, 0.75, 1.2, 0.8];
    let opts = FitOptions::default();

    let pcm = generative_pcm(
        n,
        10_000,
        |i, j| normal::cdf((s_true[i] - s_true[j]) / (sigma_true[i].powi(2) + sigma_true[j].powi(2)).sqrt()),
        &mut rng,
    );
    let est = fit_thurstone_case3(&pcm, &opts).unwrap();
    assert!(est.converged);
    assert_eq!(srocc(&est.s_hat, &s_true).unwrap(), 1.0);
    // Put the truth on the same constraint surface.
    let c = 1.0 / mean(&sigma_true.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
    let m = mean(&s_true);
    for (got, want) in est.s_hat.iter().zip(&s_true) {
        assert!((got - (want - m) * c).abs() < 0.05, "{got} vs {}", (want - m) * c);
    }

    let pcm = generative_pcm(n, 10_000, |i, j| normal::cdf(s_true[i] - s_true[j]), &mut rng);
    let est = fit_thurstone_case5(&pcm, &opts).unwrap();
    assert_eq!(srocc(&est.s_hat, &s_true).unwrap(), 1.0);
    for (got, want) in est.s_hat.iter().zip(&s_true) {
        assert!((got - (want - m)).abs() < 0.05);
    }

    let pcm = generative_pcm(n, 10_000, |i, j| normal::logistic(s_true[i] - s_true[j]), &mut rng);
    let est = fit_bradley_terry(&pcm, &opts).unwrap();
    assert_eq!(srocc(&est.s_hat, &s_true).unwrap(), 1.0);
    for (got, want) in est.s_hat.iter().zip(&s_true) {
        assert!((got - (want - m)).abs() < 0.05);
    }
}

#[test]
fn covariance_shrinks_with_comparisons() {
    let n = 5;
    let s_true = [-0.8, -0.3, 0.0, 0.4, 0.9];
    let sigma_true = [0.7, 1.0, 0.8, 1.1, 0.9];
    let prob = |i: usize, j: usize| {
        normal::cdf((s_true[i] - s_true[j]) / (sigma_true[i] * sigma_true[i] + sigma_true[j] * sigma_true[j] as f64).sqrt())
    };
    let k = 400;
    // Expected counts keep the comparison free of sampling noise.
    let expected = |k: f64| {
        let mut pcm = PairComparisonMatrix::zeros(ids(n));
        for i in 0..n {
            for j in (i + 1)..n {
                pcm.add(i, j, k * prob(i, j)).unwrap();
                pcm.add(j, i, k * (1.0 - prob(i, j))).unwrap();
            }
        }
        pcm
    };
    let a = fit_thurstone_case3(&expected(k as f64), &FitOptions::default()).unwrap();
    let b = fit_thurstone_case3(&expected(4.0 * k as f64), &FitOptions::default()).unwrap();
    for i in 0..n {
        let ratio = a.cov(i, i) / b.cov(i, i);
        assert!((ratio / 4.0 - 1.0).abs() < 0.25, "stimulus {i}: ratio {ratio}");
    }
}

#[test]
fn two_item_case5_matches_constrained_case3() {
    // With two stimuli the scale constraint forces σ̂₁ = σ̂₂ = 1, so the
    // Case III link is Φ(Δ/√2) where Case V uses Φ(Δ) at σ = 1/√2.
    let opts = FitOptions::default();
    for (a, b) in [(7.0, 3.0), (12.0, 1.0), (4.0, 4.0)] {
        let pcm = PairComparisonMatrix::from_rows(ids(2), &[vec![0.0, a], vec![b, 0.0]]).unwrap();
        let c3 = fit_thurstone_case3(&pcm, &opts).unwrap();
        let c5 = fit_thurstone_case5(&pcm, &opts).unwrap();
        let d3 = (c3.s_hat[0] - c3.s_hat[1]) / std::f64::consts::SQRT_2;
        let d5 = c5.s_hat[0] - c5.s_hat[1];
        assert!((d3 - d5).abs() < 1e-6, "{d3} vs {d5}");
        // Both equal the quantile of the smoothed win rate.
        let rate = (a + 0.5) / (a + b + 1.0);
        assert!((d5 - normal::quantile(rate)).abs() < 1e-6);
    }
}

#[test]
fn two_item_difference_increases_with_wins() {
    let opts = FitOptions::default();
    for model in ModelKind::ALL {
        let mut last = f64::NEG_INFINITY;
        for m12 in 0..=20 {
            let pcm = PairComparisonMatrix::from_rows(ids(2), &[vec![0.0, m12 as f64], vec![(20 - m12) as f64, 0.0]])
                .unwrap();
            let est = fit(model, &pcm, &opts, None).unwrap();
            let d = est.s_hat[0] - est.s_hat[1];
            assert!(d > last, "{model} m12={m12}");
            last = d;
        }
    }
}

#[test]
fn estimates_satisfy_constraints_and_monotone_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let n = rng.random_range(3..10);
        let pcm = random_pcm(n, &mut rng, 12);
        for model in ModelKind::ALL {
            let (est, trace) = fit_traced(model, &pcm, &FitOptions::default(), None).unwrap();
            assert!(mean(&est.s_hat).abs() < 1e-10, "{model}");
            if model == ModelKind::Case3 {
                let ms = mean(&est.sigma_hat.iter().map(|v| v * v).collect::<Vec<_>>());
                assert!((ms - 1.0).abs() < 1e-10);
            }
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{model}: {} -> {}", w[0], w[1]);
            }
            for i in 0..n {
                assert!(est.cov(i, i) >= 0.0);
                for j in 0..n {
                    assert_eq!(est.cov(i, j), est.cov(j, i));
                }
            }
        }
    }
}

#[test]
fn fits_are_deterministic_and_json_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pcm = random_pcm(7, &mut rng, 5);
    let opts = FitOptions::default();
    let a = fit_thurstone_case3(&pcm, &opts).unwrap();
    let b = fit_thurstone_case3(&pcm, &opts).unwrap();
    assert_eq!(a, b);
    let json = serde_json::to_string(&a).unwrap();
    let back: QualityEstimate = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}

#[test]
fn permuting_stimuli_permutes_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 6;
    let pcm = random_pcm(n, &mut rng, 10);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let rows = pcm.rows();
    let permuted: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| rows[perm[r]][perm[c]]).collect()).collect();
    let pcm_p = PairComparisonMatrix::from_rows(ids(n), &permuted).unwrap();
    for model in ModelKind::ALL {
        let a = fit(model, &pcm, &FitOptions::default(), None).unwrap();
        let b = fit(model, &pcm_p, &FitOptions::default(), None).unwrap();
        for r in 0..n {
            assert!((b.s_hat[r] - a.s_hat[perm[r]]).abs() < 1e-6, "{model}");
            assert!((b.sigma_hat[r] - a.sigma_hat[perm[r]]).abs() < 1e-6, "{model}");
        }
    }
}

#[test]
fn bradley_terry_likelihood_is_logistic() {
    let pcm = PairComparisonMatrix::from_rows(ids(2), &[vec![0.0, 3.0], vec![2.0, 0.0]]).unwrap();
    let got = bt_log_likelihood(&[0.4, -0.1], &pcm).unwrap();
    let p = 1.0 / (1.0 + (-0.5f64).exp());
    assert!((got - (3.0 * p.ln() + 2.0 * (1.0 - p).ln())).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn likelihood_invariant_under_affine_maps(
        s in prop::collection::vec(-2.0f64..2.0, 4),
        sigma in prop::collection::vec(0.2f64..2.0, 4),
        counts in prop::collection::vec(0u32..8, 12),
        c in 0.2f64..5.0,
        d in -3.0f64..3.0,
    ) {
        let mut pcm = PairComparisonMatrix::zeros(ids(4));
        let mut k = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    pcm.add(i, j, counts[k] as f64).unwrap();
                    k += 1;
                }
            }
        }
        let base = log_likelihood(&s, &sigma, &pcm).unwrap();
        let s2: Vec<f64> = s.iter().map(|v| c * v + d).collect();
        let sigma2: Vec<f64> = sigma.iter().map(|v| c * v).collect();
        let moved = log_likelihood(&s2, &sigma2, &pcm).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn win_probability_is_complementary(
        si in -4.0f64..4.0, sj in -4.0f64..4.0, a in 0.05f64..3.0, b in 0.05f64..3.0,
    ) {
        let p = win_probability(si, sj, a, b).unwrap();
        let q = win_probability(sj, si, b, a).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((p + q - 1.0).abs() < 1e-14);
    }
}
