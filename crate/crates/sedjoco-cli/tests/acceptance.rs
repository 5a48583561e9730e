//! Acceptance gate for the workspace. Each test exercises one numbered
//! release criterion end to end (solver properties in process, experiment
//! reproductions through the installed binary) and prints one summary line;
//! the test name doubles as the pass/fail report for its criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sedjoco::core::serialize::problem_to_json;
use sedjoco::core::{
    build_augmented_targets, log_likelihood_core, permute_instance, permute_solution,
    ProblemInstance, SolutionSet,
};
use sedjoco::solvers::{flat_index, gradient, hessian, InitStrategy};
use sedjoco::{
    align_solution, build_cov_experiment2, build_cov_experiment3, draw_experiment3_filters, icrlb,
    invert_permutation, ir_solve, isr_accumulate, isr_norm, mix, newton_solve, residual,
    sample_experiment2, sample_experiment3, sample_sources_gaussian, separate_ml,
    standard_sedjoco_solve, Experiment2Params, Experiment3Params, IsrReport, ScvCovarianceSet,
    SolverOptions,
};

fn newton_opts() -> SolverOptions {
    SolverOptions {
        max_iters: 500,
        tol: 1e-10,
        init: InitStrategy::Identity,
        newton_damping: true,
        seed: 7,
    }
}

fn ir_opts() -> SolverOptions {
    SolverOptions {
        max_iters: 20_000,
        ..newton_opts()
    }
}

/// Criterion 1: on 100 random well-posed instances per size, both solvers
/// reach residual 1e-10, the second-order solver in a median of at most 50
/// iterations, all within five minutes.
#[test]
fn criterion_1_solver_correctness() {
    let started = Instant::now();
    let sizes = [(2usize, 2usize), (2, 4), (5, 2), (5, 4)];
    for (k, m) in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc1 + (k * 37 + m) as u64);
        let mut newton_iters = Vec::with_capacity(100);
        for trial in 0..100 {
            let p = ProblemInstance::random_pd(k, m, &mut rng).unwrap();
            let (sn, tn) = newton_solve(&p, &newton_opts()).unwrap();
            assert!(
                tn.converged && residual(&sn, &p).unwrap().total <= 1e-10,
                "second-order solver missed tolerance at K={k}, M={m}, trial {trial}"
            );
            newton_iters.push(tn.iterations);
            let (si, ti) = ir_solve(&p, &ir_opts()).unwrap();
            assert!(
                ti.converged && residual(&si, &p).unwrap().total <= 1e-10,
                "relaxation missed tolerance at K={k}, M={m}, trial {trial}"
            );
        }
        newton_iters.sort_unstable();
        let median = newton_iters[newton_iters.len() / 2];
        assert!(
            median <= 50,
            "median of {median} second-order iterations at K={k}, M={m}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() <= 300, "criterion 1 took {:?}", elapsed);
    println!("criterion 1 (solver correctness): pass in {:?}", elapsed);
}

/// Random evaluation point with every per-dataset matrix comfortably
/// invertible, so the log-det terms are smooth at the difference scale.
fn random_point(k: usize, m: usize, rng: &mut ChaCha8Rng) -> SolutionSet {
    loop {
        let sets: Vec<DMatrix<f64>> = (0..m)
            .map(|_| DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let ok = sets.iter().all(|b| {
            let svd = b.clone().svd(false, false);
            svd.singular_values
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
                > 0.05
        });
        if ok {
            return SolutionSet::new(k, m, sets).unwrap();
        }
    }
}

fn perturbed(s: &SolutionSet, set: usize, row: usize, col: usize, delta: f64) -> SolutionSet {
    let mut sets: Vec<DMatrix<f64>> = s.sets().to_vec();
    sets[set][(row, col)] += delta;
    SolutionSet::new(s.dims().k, s.dims().m, sets).unwrap()
}

/// Criterion 2: analytic gradient and Hessian match central finite
/// differences (step 1e-6) to relative error 1e-5 at 20 random nonsingular
/// points per tested size.
#[test]
fn criterion_2_derivative_oracles() {
    for (k, m) in [(2usize, 2usize), (3, 2), (2, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc2 + (k * 37 + m) as u64);
        for _ in 0..20 {
            let p = ProblemInstance::random_pd(k, m, &mut rng).unwrap();
            let a = build_augmented_targets(&p);
            let s = random_point(k, m, &mut rng);

            let g = gradient(&s, &p).unwrap();
            let (mut num, mut den) = (0.0_f64, 0.0_f64);
            for set in 0..m {
                for row in 0..k {
                    for col in 0..k {
                        let h = 1e-6 * s.b(set)[(row, col)].abs().max(1.0);
                        let lp = log_likelihood_core(&perturbed(&s, set, row, col, h), &a).unwrap();
                        let lm =
                            log_likelihood_core(&perturbed(&s, set, row, col, -h), &a).unwrap();
                        let fd = (lp - lm) / (2.0 * h);
                        num += (fd - g.g[set][(row, col)]).powi(2);
                        den += fd * fd;
                    }
                }
            }
            assert!(
                num.sqrt() / den.sqrt().max(1.0) <= 1e-5,
                "gradient mismatch at K={k}, M={m}"
            );

            let hess = hessian(&s, &p).unwrap();
            let (mut num, mut den) = (0.0_f64, 0.0_f64);
            for set in 0..m {
                for row in 0..k {
                    for col in 0..k {
                        let h = 1e-6 * s.b(set)[(row, col)].abs().max(1.0);
                        let gp = gradient(&perturbed(&s, set, row, col, h), &p).unwrap();
                        let gm = gradient(&perturbed(&s, set, row, col, -h), &p).unwrap();
                        let jcol = flat_index(k, set, row, col);
                        for s2 in 0..m {
                            for r2 in 0..k {
                                for c2 in 0..k {
                                    let fd =
                                        (gp.g[s2][(r2, c2)] - gm.g[s2][(r2, c2)]) / (2.0 * h);
                                    let irow = flat_index(k, s2, r2, c2);
                                    num += (fd - hess.h[(irow, jcol)]).powi(2);
                                    den += fd * fd;
                                }
                            }
                        }
                    }
                }
            }
            assert!(
                num.sqrt() / den.sqrt().max(1.0) <= 1e-5,
                "Hessian mismatch at K={k}, M={m}"
            );
        }
    }
    println!("criterion 2 (derivative oracles): pass");
}

/// Criterion 3: with zero between-set targets the joint solve decouples; its
/// per-dataset matrices solve the M independent single-set problems to
/// residual 1e-8 and agree with the standalone solves.
#[test]
fn criterion_3_decoupling_equivalence() {
    let (k, m) = (3usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0xc3);
    for _ in 0..10 {
        let singles: Vec<ProblemInstance> = (0..m)
            .map(|_| ProblemInstance::random_pd(k, 1, &mut rng).unwrap())
            .collect();
        let mut targets = Vec::with_capacity(k * m * m);
        for kk in 0..k {
            for m1 in 0..m {
                for m2 in 0..m {
                    if m1 == m2 {
                        targets.push(singles[m1].target(kk, 0, 0).clone());
                    } else {
                        targets.push(DMatrix::zeros(k, k));
                    }
                }
            }
        }
        let joint = ProblemInstance::new(k, m, targets).unwrap();
        let (sol, trace) = newton_solve(&joint, &newton_opts()).unwrap();
        assert!(trace.converged);
        for mm in 0..m {
            let single_sol = SolutionSet::new(k, 1, vec![sol.b(mm).clone()]).unwrap();
            let rep = residual(&single_sol, &singles[mm]).unwrap();
            assert!(
                rep.total <= 1e-8,
                "dataset {mm} of the joint solution misses its single-set system: {:.3e}",
                rep.total
            );
            let standalone_targets: Vec<DMatrix<f64>> =
                (0..k).map(|kk| singles[mm].target(kk, 0, 0).clone()).collect();
            let (alone, at) = standard_sedjoco_solve(&standalone_targets, &newton_opts()).unwrap();
            assert!(at.converged);
            let diff = (sol.b(mm) - alone.b(0)).norm() / alone.b(0).norm();
            assert!(
                diff <= 1e-8,
                "dataset {mm} joint vs standalone relative difference {diff:.3e}"
            );
        }
    }
    println!("criterion 3 (decoupling equivalence): pass");
}

/// True when `a` equals `b` up to one shared row permutation with shared
/// per-row sign flips, checked exhaustively (K=3).
fn related_by_row_permutation_and_signs(a: &SolutionSet, b: &SolutionSet) -> bool {
    let (k, m) = (a.dims().k, a.dims().m);
    assert_eq!(k, 3);
    let perms: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let scale: f64 = b.sets().iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    for perm in &perms {
        for signs in 0..(1 << k) {
            let mut max_diff = 0.0_f64;
            for mm in 0..m {
                for row in 0..k {
                    let sign = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
                    for col in 0..k {
                        let diff = sign * a.b(mm)[(perm[row], col)] - b.b(mm)[(row, col)];
                        max_diff = max_diff.max(diff.abs());
                    }
                }
            }
            if max_diff <= 1e-6 * scale.max(1.0) {
                return true;
            }
        }
    }
    false
}

/// Criterion 4: reindexing the sources of a solved instance and warm-solving
/// yields a valid additional solution (residual 1e-8) that is more than a
/// row permutation away from the original in at least 90% of 20 instances.
#[test]
fn criterion_4_permutation_solutions() {
    let (k, m) = (3usize, 2usize);
    let cycles: [&[usize]; 2] = [&[1, 2, 0], &[2, 0, 1]];
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4);
    let trials = 20;
    let mut essentially_different = 0;
    for trial in 0..trials {
        let p = ProblemInstance::random_pd(k, m, &mut rng).unwrap();
        let (b_direct, _) = newton_solve(&p, &newton_opts()).unwrap();
        for sigma in cycles {
            let reindexed = permute_instance(&p, sigma).unwrap();
            let warm = SolverOptions {
                init: InitStrategy::UserSupplied(b_direct.clone()),
                ..newton_opts()
            };
            let (b_re, trace) = newton_solve(&reindexed, &warm).unwrap();
            assert!(trace.converged);
            let mapped = permute_solution(&b_re, &invert_permutation(sigma).unwrap()).unwrap();
            let rep = residual(&mapped, &p).unwrap();
            assert!(
                rep.total <= 1e-8,
                "constructed solution residual {:.3e} on trial {trial}",
                rep.total
            );
            if !related_by_row_permutation_and_signs(&mapped, &b_direct) {
                essentially_different += 1;
                break;
            }
        }
    }
    assert!(
        essentially_different * 10 >= trials * 9,
        "only {essentially_different}/{trials} instances gave a genuinely new solution"
    );
    println!("criterion 4 (permutation solutions): pass");
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sedjoco"))
}

fn work_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = cli().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Rows of a norm table: (sweep value, method, isr_db, crlb_db).
fn norm_rows(path: &Path) -> Vec<(f64, String, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].to_string(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
            )
        })
        .collect()
}

fn method_entry(rows: &[(f64, String, f64, f64)], sweep: f64, method: &str) -> (f64, f64) {
    rows.iter()
        .find(|(s, m, _, _)| (*s - sweep).abs() < 1e-9 && m == method)
        .map(|(_, _, isr, crlb)| (*isr, *crlb))
        .unwrap_or_else(|| panic!("no {method} row at sweep value {sweep}"))
}

/// Criterion 5: modulated-source study at T=1000 with 500 trials per
/// modulation depth. The joint separator sits within 1 dB of the bound at
/// depths 0, 0.5 and 1; at depth 0 the single-dataset baseline is at least
/// 15 dB worse. Budget: fifteen minutes.
#[test]
fn criterion_5_nonstationary_reproduction() {
    let started = Instant::now();
    let dir = work_dir("acceptance_c5");
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{
  "experiment": "nonstationary2x2",
  "alpha_grid": [0.0, 0.5, 1.0],
  "t": 1000,
  "n_trials": 500,
  "master_seed": 20260823
}"#,
    )
    .unwrap();
    let out = dir.join("artifacts");
    run_ok(&[
        "nonstationary",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = norm_rows(&out.join("nonstationary_norm.csv"));
    for alpha in [0.0, 0.5, 1.0] {
        let (isr, crlb) = method_entry(&rows, alpha, "extended");
        assert!(
            (isr - crlb).abs() <= 1.0,
            "depth {alpha}: joint separator at {isr:.2} dB vs bound {crlb:.2} dB"
        );
    }
    let (ext0, _) = method_entry(&rows, 0.0, "extended");
    let (per0, _) = method_entry(&rows, 0.0, "per_set");
    assert!(
        per0 - ext0 >= 15.0,
        "depth 0: baseline {per0:.2} dB vs joint {ext0:.2} dB"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() <= 900, "criterion 5 took {:?}", elapsed);
    println!("criterion 5 (modulated-source reproduction): pass in {:?}", elapsed);
}

/// Criterion 6: filtered-source study (3 sources, 3 datasets, length-5
/// filters) at T in {300, 1000} with 200 trials. At T=1000 the joint
/// separator beats the baseline by 10 dB and sits within 2 dB of the bound.
/// Budget: twenty minutes.
#[test]
fn criterion_6_stationary_reproduction() {
    let started = Instant::now();
    let dir = work_dir("acceptance_c6");
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{
  "experiment": "stationary3x3",
  "t_grid": [300, 1000],
  "filter_len": 5,
  "eta": 1.0,
  "n_trials": 200,
  "master_seed": 20260823
}"#,
    )
    .unwrap();
    let out = dir.join("artifacts");
    run_ok(&[
        "stationary",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = norm_rows(&out.join("stationary_norm.csv"));
    let (ext, crlb) = method_entry(&rows, 1000.0, "extended");
    let (per, _) = method_entry(&rows, 1000.0, "per_set");
    assert!(
        per - ext >= 10.0,
        "T=1000: baseline {per:.2} dB vs joint {ext:.2} dB"
    );
    assert!(
        (ext - crlb).abs() <= 2.0,
        "T=1000: joint separator at {ext:.2} dB vs bound {crlb:.2} dB"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() <= 1200, "criterion 6 took {:?}", elapsed);
    println!("criterion 6 (filtered-source reproduction): pass in {:?}", elapsed);
}

/// Stacks source `k` of a realization into one long vector, datasets in
/// order.
fn stacked_source(sources: &[DMatrix<f64>], k: usize, t: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(sources.len() * t);
    for s in sources {
        for n in 0..t {
            v.push(s[(k, n)]);
        }
    }
    v
}

fn check_covariance_fidelity<F>(cov: &ScvCovarianceSet, n_draws: usize, mut draw: F, label: &str)
where
    F: FnMut() -> Vec<DMatrix<f64>>,
{
    let dims = cov.dims();
    let (k, m, t) = (dims.k, dims.m, cov.sample_count());
    let d = m * t;
    let mut acc = vec![DMatrix::<f64>::zeros(d, d); k];
    for _ in 0..n_draws {
        let sources = draw();
        for kk in 0..k {
            let v = stacked_source(&sources, kk, t);
            for i in 0..d {
                for j in i..d {
                    acc[kk][(i, j)] += v[i] * v[j];
                }
            }
        }
    }
    let model = |kk: usize, i: usize, j: usize| cov.c_block(kk, i / t, j / t)[(i % t, j % t)];
    for kk in 0..k {
        for i in 0..d {
            for j in i..d {
                let emp = acc[kk][(i, j)] / n_draws as f64;
                let c = model(kk, i, j);
                let se = ((model(kk, i, i) * model(kk, j, j) + c * c) / n_draws as f64).sqrt();
                assert!(
                    (emp - c).abs() <= 5.0 * se,
                    "{label}: source {kk} entry ({i}, {j}) empirical {emp:.4} vs model {c:.4} \
                     (5 standard errors = {:.4})",
                    5.0 * se
                );
            }
        }
    }
}

/// Criterion 7: for both experiment builders, empirical covariances over
/// 20000 realizations match the analytic blocks entrywise within 5 standard
/// errors.
#[test]
fn criterion_7_covariance_fidelity() {
    let n_draws = 20_000;

    let params2 = Experiment2Params::table_defaults(0.7, 24);
    let cov2 = build_cov_experiment2(&params2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc7);
    check_covariance_fidelity(
        &cov2,
        n_draws,
        || sample_experiment2(&params2, &mut rng).unwrap(),
        "modulated family",
    );

    let filters = draw_experiment3_filters(3, 3, 5, 1.0, 0xc7).unwrap();
    let params3 = Experiment3Params::from_filters(3, 3, 20, 5, 1.0, filters).unwrap();
    let cov3 = build_cov_experiment3(&params3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7c);
    check_covariance_fidelity(
        &cov3,
        n_draws,
        || sample_experiment3(&params3, &mut rng).unwrap(),
        "filtered family",
    );
    println!("criterion 7 (covariance fidelity): pass");
}

/// First-order autoregressive covariance family: one dataset, two sources
/// with opposite poles, unit innovation scaling.
fn ar1_cov(t: usize) -> ScvCovarianceSet {
    let block = |pole: f64| {
        let scale = 1.0 / (1.0 - pole * pole);
        DMatrix::from_fn(t, t, |i, j| scale * pole.powi((i as i32 - j as i32).abs()))
    };
    ScvCovarianceSet::new(2, 1, t, vec![block(0.5), block(-0.5)]).unwrap()
}

/// Criterion 8: the bound flags indistinguishable families as infinite
/// (identical covariances; single-dataset white sources) and is attained
/// within 1 dB by maximum-likelihood separation in the finite
/// autoregressive case.
#[test]
fn criterion_8_bound_sanity() {
    let identical = ScvCovarianceSet::new(
        2,
        1,
        4,
        vec![
            DMatrix::identity(4, 4) * 1.5,
            DMatrix::identity(4, 4) * 1.5,
        ],
    )
    .unwrap();
    let report = icrlb(&identical).unwrap();
    assert_eq!(report.flagged_infinite(), &[(0, 1), (1, 0)]);

    let white = ScvCovarianceSet::new(
        2,
        1,
        4,
        vec![DMatrix::identity(4, 4), DMatrix::identity(4, 4) * 2.5],
    )
    .unwrap();
    let report = icrlb(&white).unwrap();
    assert_eq!(report.flagged_infinite(), &[(0, 1), (1, 0)]);

    let t = 256;
    let cov = ar1_cov(t);
    let crlb = icrlb(&cov).unwrap();
    assert!(crlb.flagged_infinite().is_empty());
    let bound_db = 10.0 * crlb.bound_norm().log10();

    let mut rng = ChaCha8Rng::seed_from_u64(0xc8);
    let opts = SolverOptions {
        max_iters: 500,
        tol: 1e-10,
        init: InitStrategy::PerSetSedjoco,
        newton_damping: true,
        seed: 3,
    };
    let mut agg = IsrReport::new(2, 1).unwrap();
    for _ in 0..1000 {
        let sources = sample_sources_gaussian(&cov, &mut rng).unwrap();
        let mixing = vec![DMatrix::from_fn(2, 2, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        })];
        let data = mix(sources, mixing).unwrap();
        let out = separate_ml(&data, &cov, &opts, None).unwrap();
        let a = data.mixing().unwrap();
        let aligned = align_solution(&out.solution, a).unwrap();
        isr_accumulate(&aligned, a, &cov, &mut agg).unwrap();
    }
    let empirical_db = 10.0 * isr_norm(&agg).unwrap().log10();
    assert!(
        (empirical_db - bound_db).abs() <= 1.0,
        "autoregressive case: empirical {empirical_db:.2} dB vs bound {bound_db:.2} dB"
    );
    println!("criterion 8 (bound sanity): pass");
}

/// Byte content of every artifact in a directory, sorted by file name.
fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn assert_identical_artifacts(a: &Path, b: &Path, label: &str) {
    let fa = artifact_bytes(a);
    let fb = artifact_bytes(b);
    assert_eq!(
        fa.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        fb.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "{label}: artifact lists differ"
    );
    for ((name, ba), (_, bb)) in fa.iter().zip(fb.iter()) {
        assert!(ba == bb, "{label}: {name} differs between runs");
    }
}

/// Criterion 9: every artifact is byte-identical across reruns with the
/// same configuration and seed, including across different thread counts.
#[test]
fn criterion_9_determinism() {
    let dir = work_dir("acceptance_c9");

    let mut rng = ChaCha8Rng::seed_from_u64(0xc9);
    let instance = ProblemInstance::random_pd(3, 2, &mut rng).unwrap();
    let instance_path = dir.join("instance.json");
    fs::write(&instance_path, problem_to_json(&instance).unwrap()).unwrap();

    let configs = [
        (
            "convergence",
            format!(
                r#"{{"experiment": "convergence", "sizes": [[2, 2]], "n_trials": 3, "master_seed": 5}}"#
            ),
        ),
        (
            "nonstationary",
            format!(
                r#"{{"experiment": "nonstationary2x2", "alpha_grid": [0.0, 1.0], "t": 64, "n_trials": 3, "master_seed": 5}}"#
            ),
        ),
        (
            "stationary",
            format!(
                r#"{{"experiment": "stationary3x3", "t_grid": [48], "n_trials": 2, "master_seed": 5}}"#
            ),
        ),
        (
            "crlb",
            format!(
                r#"{{"experiment": "crlb", "family": {{"type": "modulated", "alpha": 0.5, "t": 16}}, "master_seed": 5}}"#
            ),
        ),
        (
            "solve",
            format!(
                r#"{{"experiment": "solve", "instance": {:?}, "master_seed": 5}}"#,
                instance_path.to_str().unwrap()
            ),
        ),
    ];

    for (sub, body) in &configs {
        let config = dir.join(format!("{sub}.json"));
        fs::write(&config, body).unwrap();
        let out_a = dir.join(format!("{sub}_a"));
        let out_b = dir.join(format!("{sub}_b"));
        let out_t = dir.join(format!("{sub}_t"));
        run_ok(&[
            sub,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_a.to_str().unwrap(),
            "--threads",
            "1",
        ]);
        run_ok(&[
            sub,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_b.to_str().unwrap(),
            "--threads",
            "1",
        ]);
        run_ok(&[
            sub,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_t.to_str().unwrap(),
            "--threads",
            "4",
        ]);
        assert_identical_artifacts(&out_a, &out_b, &format!("{sub} rerun"));
        assert_identical_artifacts(&out_a, &out_t, &format!("{sub} thread variation"));
    }
    println!("criterion 9 (artifact determinism): pass");
}
