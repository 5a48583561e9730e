//! Oracle checks for the evaluation metrics: permutation alignment against
//! ground truth, interference-ratio bookkeeping, and the accuracy bound,
//! including a Monte Carlo confirmation that maximum-likelihood separation
//! attains the bound.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sedjoco::{
    align_solution, build_cov_experiment2, icrlb, isr_accumulate, isr_norm, mix,
    permute_solution, sample_sources_gaussian, separate_ml, Experiment2Params, IsrReport,
    ScvCovarianceSet, SolutionSet, SolverOptions,
};

fn random_matrix(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Unit-variance first-order autoregressive covariance with the given pole.
fn ar1_cov(pole: f64, t: usize) -> DMatrix<f64> {
    let scale = 1.0 / (1.0 - pole * pole);
    DMatrix::from_fn(t, t, |i, j| {
        scale * pole.powi((i as i64 - j as i64).unsigned_abs() as i32)
    })
}

fn inverse_solution(mixing: &[DMatrix<f64>]) -> SolutionSet {
    let k = mixing[0].nrows();
    let b = mixing
        .iter()
        .map(|a| a.clone().try_inverse().expect("test mixing is invertible"))
        .collect();
    SolutionSet::new(k, mixing.len(), b).unwrap()
}

#[test]
fn aligning_an_exact_inverse_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (k, m) = (3, 2);
    let mixing: Vec<_> = (0..m).map(|_| random_matrix(k, &mut rng)).collect();
    let bhat = inverse_solution(&mixing);
    let aligned = align_solution(&bhat, &mixing).unwrap();
    for mm in 0..m {
        assert_eq!(aligned.b(mm), bhat.b(mm));
    }
}

#[test]
fn a_row_shuffled_inverse_is_restored() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (k, m) = (4, 3);
    let mixing: Vec<_> = (0..m).map(|_| random_matrix(k, &mut rng)).collect();
    let shuffled = permute_solution(&inverse_solution(&mixing), &[2, 0, 3, 1]).unwrap();
    let aligned = align_solution(&shuffled, &mixing).unwrap();
    for mm in 0..m {
        let product = aligned.b(mm) * &mixing[mm];
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (product[(i, j)] - expect).abs() < 1e-8,
                    "dataset {} entry ({}, {}) = {}",
                    mm,
                    i,
                    j,
                    product[(i, j)]
                );
            }
        }
    }
}

/// Independent permutation enumeration for the oracle below, implemented by
/// element swaps rather than lexicographic recursion.
fn heaps_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(items: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if n <= 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..n {
            rec(items, n - 1, out);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    rec(&mut items, n, &mut out);
    out
}

#[test]
fn alignment_matches_an_independent_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (k, m) = (4, 2);
    for _ in 0..10 {
        let mixing: Vec<_> = (0..m).map(|_| random_matrix(k, &mut rng)).collect();
        let b: Vec<_> = (0..m).map(|_| random_matrix(k, &mut rng)).collect();
        let bhat = SolutionSet::new(k, m, b).unwrap();
        let products: Vec<_> = (0..m).map(|mm| bhat.b(mm) * &mixing[mm]).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in heaps_permutations(k) {
            let mut score = 1.0;
            for g in &products {
                for col in 0..k {
                    score *= g[(perm[col], col)].abs();
                }
            }
            if best.as_ref().map_or(true, |(s, _)| score > *s) {
                best = Some((score, perm));
            }
        }
        let oracle = permute_solution(&bhat, &best.unwrap().1).unwrap();
        let aligned = align_solution(&bhat, &mixing).unwrap();
        for mm in 0..m {
            assert_eq!(aligned.b(mm), oracle.b(mm));
        }
    }
}

#[test]
fn indistinguishable_sources_get_an_infinite_bound() {
    let (t, m) = (12, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let g = random_matrix(m * t, &mut rng);
    let stacked = &g * g.transpose() + DMatrix::identity(m * t, m * t);
    let block = |m1: usize, m2: usize| stacked.view((m1 * t, m2 * t), (t, t)).into_owned();
    let mut blocks = Vec::new();
    for _source in 0..2 {
        for m1 in 0..m {
            for m2 in 0..m {
                blocks.push(block(m1, m2));
            }
        }
    }
    let cov = ScvCovarianceSet::new(2, m, t, blocks).unwrap();
    let report = icrlb(&cov).unwrap();
    assert_eq!(report.flagged_infinite(), &[(0, 1), (1, 0)]);
    for mm in 0..m {
        assert!(report.bound(mm, 0, 1).is_infinite());
        assert!(report.bound(mm, 1, 0).is_infinite());
    }
    assert!(report.bound_norm().is_infinite());
}

#[test]
fn white_sources_in_a_single_dataset_are_unseparable_at_any_scale() {
    let t = 32;
    let blocks = vec![
        DMatrix::<f64>::identity(t, t),
        DMatrix::<f64>::identity(t, t) * 2.5,
    ];
    let cov = ScvCovarianceSet::new(2, 1, t, blocks).unwrap();
    let report = icrlb(&cov).unwrap();
    assert_eq!(report.flagged_infinite(), &[(0, 1), (1, 0)]);
    assert!(report.bound(0, 0, 1).is_infinite());
    assert!(report.bound(0, 1, 0).is_infinite());
}

#[test]
fn single_dataset_bound_matches_a_scalar_hand_computation() {
    let t = 64;
    let c1 = ar1_cov(0.5, t);
    let c2 = ar1_cov(-0.5, t);
    let cov = ScvCovarianceSet::new(2, 1, t, vec![c1.clone(), c2.clone()]).unwrap();
    let report = icrlb(&cov).unwrap();
    let tf = t as f64;
    let k12 = (c1.clone().try_inverse().unwrap() * &c2).trace() / tf;
    let k21 = (c2.clone().try_inverse().unwrap() * &c1).trace() / tf;
    let expected_01 = (1.0 / (k12 - 1.0 / k21)) / tf * (c2.trace() / c1.trace());
    let expected_10 = (1.0 / (k21 - 1.0 / k12)) / tf * (c1.trace() / c2.trace());
    assert!(report.flagged_infinite().is_empty());
    assert!((report.bound(0, 0, 1) - expected_01).abs() <= 1e-12 * expected_01.abs());
    assert!((report.bound(0, 1, 0) - expected_10).abs() <= 1e-12 * expected_10.abs());
    assert!(expected_01 > 0.0 && expected_10 > 0.0);
}

#[test]
fn modulated_family_bound_stays_finite_without_modulation() {
    let params = Experiment2Params::table_defaults(0.0, 100);
    let cov = build_cov_experiment2(&params).unwrap();
    let report = icrlb(&cov).unwrap();
    assert!(report.flagged_infinite().is_empty());
    for mm in 0..2 {
        for k in 0..2 {
            for l in 0..2 {
                if k != l {
                    let b = report.bound(mm, k, l);
                    assert!(b.is_finite() && b > 0.0, "bound({},{},{}) = {}", mm, k, l, b);
                }
            }
        }
    }
}

/// Runs `trials` maximum-likelihood separations of two autoregressive
/// sources observed through fresh random mixings and returns the mean
/// interference report.
fn ml_isr_ar1(t: usize, trials: usize, seed: u64) -> (IsrReport, ScvCovarianceSet) {
    let cov = ScvCovarianceSet::new(2, 1, t, vec![ar1_cov(0.5, t), ar1_cov(-0.5, t)]).unwrap();
    let mut report = IsrReport::new(2, 1).unwrap();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e37_79b9));
        let sources = sample_sources_gaussian(&cov, &mut rng).unwrap();
        let mixing = vec![random_matrix(2, &mut rng)];
        let data = mix(sources, mixing).unwrap();
        let opts = SolverOptions {
            seed: trial as u64,
            ..SolverOptions::default()
        };
        let outcome = separate_ml(&data, &cov, &opts, None).unwrap();
        let a = data.mixing().unwrap();
        let aligned = align_solution(&outcome.solution, a).unwrap();
        isr_accumulate(&aligned, a, &cov, &mut report).unwrap();
    }
    (report, cov)
}

#[test]
fn maximum_likelihood_separation_attains_the_bound() {
    let (report, cov) = ml_isr_ar1(256, 1000, 0x5eed_0001);
    assert_eq!(report.n_trials(), 1000);
    assert_eq!(report.excluded(), 0);
    let bound = icrlb(&cov).unwrap();
    for (k, l) in [(0, 1), (1, 0)] {
        let emp = report.isr(0, k, l);
        let b = bound.bound(0, k, l);
        assert!(b.is_finite() && b > 0.0);
        assert!(
            emp >= 0.9 * b,
            "empirical ratio ({}, {}) = {} undershoots the bound {}",
            k,
            l,
            emp,
            b
        );
    }
    let emp_db = 10.0 * isr_norm(&report).unwrap().log10();
    let bound_db = 10.0 * bound.bound_norm().log10();
    assert!(
        (emp_db - bound_db).abs() <= 1.0,
        "mean ratio {:.3} dB vs bound {:.3} dB",
        emp_db,
        bound_db
    );
}

#[test]
fn interference_falls_inversely_with_sample_count() {
    let trials = 500;
    let (short, _) = ml_isr_ar1(128, trials, 0x5eed_0002);
    let (long, _) = ml_isr_ar1(512, trials, 0x5eed_0003);
    let ratio = isr_norm(&short).unwrap() / isr_norm(&long).unwrap();
    assert!(
        (ratio - 4.0).abs() <= 0.8,
        "quadrupling the sample count should quarter the ratio, got factor {}",
        ratio
    );
}
