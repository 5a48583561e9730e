//! Iterative solvers for the joint-congruence system: a cyclic
//! relaxation sweep and a damped Newton iteration on the stacked
//! likelihood, plus gradient/Hessian assembly and initialization.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::{
    all_permutations, build_augmented_targets, checked_inverse, coupling_pair, coupling_vector,
    log_likelihood_core, residual, AugmentedTargetSet, CompensatedSum, ProblemInstance,
    SolutionSet,
};
use crate::error::{Result, SedjocoError};

/// Starting point selection for the solvers.
#[derive(Clone, Debug, Default)]
pub enum InitStrategy {
    #[default]
    Identity,
    /// Solve each dataset's within-set problem on its own and stack the
    /// results; falls back to identity per dataset when that fails.
    PerSetSedjoco,
    UserSupplied(SolutionSet),
}

/// Knobs shared by both solvers.
#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Newton iterations or full relaxation sweeps, whichever applies.
    pub max_iters: usize,
    /// Convergence threshold on the total residual.
    pub tol: f64,
    pub init: InitStrategy,
    /// Line-search damping of the Newton step on the squared gradient norm,
    /// with singular iterates rejected. Disable for the undamped iteration.
    pub newton_damping: bool,
    /// Seed for the relaxation solver's degenerate-update jitter.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 500,
            tol: 1e-10,
            init: InitStrategy::Identity,
            newton_damping: true,
            seed: 0,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(SedjocoError::InvalidInput(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(SedjocoError::InvalidInput(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Per-iteration history of one solver run.
#[derive(Clone, Debug)]
pub struct ConvergenceTrace {
    /// Total residual after each full update iteration.
    pub residuals: Vec<f64>,
    /// Log-likelihood after each full update iteration.
    pub likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: Duration,
    /// Residual and likelihood at the starting point.
    pub initial_residual: f64,
    pub initial_likelihood: f64,
    /// Rows whose sign was flipped by the output normalization, or None if
    /// normalization was skipped.
    pub sign_flips: Option<Vec<bool>>,
}

impl ConvergenceTrace {
    fn new(initial_residual: f64, initial_likelihood: f64) -> Self {
        ConvergenceTrace {
            residuals: Vec::new(),
            likelihoods: Vec::new(),
            iterations: 0,
            converged: false,
            wall_time: Duration::ZERO,
            initial_residual,
            initial_likelihood,
            sign_flips: None,
        }
    }

    fn record(&mut self, residual: f64, likelihood: f64) {
        self.residuals.push(residual);
        self.likelihoods.push(likelihood);
        self.iterations += 1;
    }

    pub fn last_residual(&self) -> f64 {
        self.residuals
            .last()
            .copied()
            .unwrap_or(self.initial_residual)
    }
}

/// Gradient of the likelihood with respect to each `B[m]`.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub g: Vec<DMatrix<f64>>,
}

impl GradientSet {
    pub fn max_abs(&self) -> f64 {
        self.g
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }
}

/// Second-derivative matrix of the likelihood with respect to the stacked
/// unknowns, in the layout of [`flat_index`].
#[derive(Clone, Debug)]
pub struct HessianMatrix {
    pub h: DMatrix<f64>,
    pub k: usize,
    pub m: usize,
}

/// Position of entry (row, col) of set `set` inside the stacked vector:
/// sets are laid out consecutively, each in column-major order.
pub fn flat_index(k: usize, set: usize, row: usize, col: usize) -> usize {
    set * k * k + col * k + row
}

fn solution_to_vec(s: &SolutionSet) -> DVector<f64> {
    let (k, m) = (s.dims().k, s.dims().m);
    let mut v = DVector::zeros(k * k * m);
    for set in 0..m {
        let b = s.b(set);
        for col in 0..k {
            for row in 0..k {
                v[flat_index(k, set, row, col)] = b[(row, col)];
            }
        }
    }
    v
}

fn vec_to_solution(v: &DVector<f64>, k: usize, m: usize) -> Result<SolutionSet> {
    let mats = (0..m)
        .map(|set| DMatrix::from_fn(k, k, |row, col| v[flat_index(k, set, row, col)]))
        .collect();
    SolutionSet::new(k, m, mats)
}

/// The coupling vector β_k(m) = Σ_ℓ Q[k][m][ℓ]·b_k(ℓ), the quantity each
/// separating row is paired with in the system equations.
fn beta(p: &ProblemInstance, s: &SolutionSet, k: usize, m: usize) -> DVector<f64> {
    coupling_vector(p, s, k, m)
}

/// Gradient blocks `G[m] = (B[m]⁻¹)ᵀ − Σ_k E_kk Σ_ℓ B[ℓ]·Q[k][ℓ][m]`. Row k
/// of the subtracted term is the coupling vector β_k(m), evaluated with
/// compensated accumulation so the near-cancellation at solutions is
/// resolved accurately.
pub fn gradient(s: &SolutionSet, p: &ProblemInstance) -> Result<GradientSet> {
    check_same_dims(s, p)?;
    let (k, m) = (p.dims().k, p.dims().m);
    let mut g = Vec::with_capacity(m);
    for mm in 0..m {
        let inv = checked_inverse(s.b(mm))
            .ok_or_else(|| SedjocoError::Singular(format!("solution matrix {}", mm)))?;
        // The gradient factors as `defects · B⁻ᵀ`, where row k of `defects`
        // is `e_k − B·β_k` (the k-th drilled-column defect). Evaluating the
        // defects with compensated accumulation keeps the gradient's error
        // proportional to its size, so the iteration does not stall on an
        // absolute noise floor once the defects are small.
        let b = s.b(mm);
        let mut defects = DMatrix::zeros(k, k);
        for kk in 0..k {
            let (beta_hi, beta_lo) = coupling_pair(p, s, kk, mm);
            for row in 0..k {
                let mut acc = CompensatedSum::default();
                if row == kk {
                    acc.add(1.0);
                }
                for j in 0..k {
                    acc.add_prod(-b[(row, j)], beta_hi[j]);
                    acc.add(-b[(row, j)] * beta_lo[j]);
                }
                defects[(kk, row)] = acc.value();
            }
        }
        g.push(&defects * inv.inverse.transpose());
    }
    Ok(GradientSet { g })
}

/// Dense Hessian assembly from the closed-form second derivatives: the
/// same-set log-det term plus the same-row coupling term.
pub fn hessian(s: &SolutionSet, p: &ProblemInstance) -> Result<HessianMatrix> {
    check_same_dims(s, p)?;
    let (k, m) = (p.dims().k, p.dims().m);
    let inverses: Vec<DMatrix<f64>> = (0..m)
        .map(|mm| {
            checked_inverse(s.b(mm))
                .map(|ci| ci.inverse)
                .ok_or_else(|| SedjocoError::Singular(format!("solution matrix {}", mm)))
        })
        .collect::<Result<_>>()?;
    let n = k * k * m;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..m {
        let binv = &inverses[i];
        for p_row in 0..k {
            for q_col in 0..k {
                let r = flat_index(k, i, p_row, q_col);
                // d²/dB(i) dB(i) of the log-det term.
                for mm in 0..k {
                    for nn in 0..k {
                        let c = flat_index(k, i, mm, nn);
                        h[(r, c)] -= binv[(nn, p_row)] * binv[(q_col, mm)];
                    }
                }
                // Coupling term: nonzero only when both entries sit in the
                // same row p of their sets.
                for j in 0..m {
                    let q_mat = p.target(p_row, i, j);
                    for nn in 0..k {
                        let c = flat_index(k, j, p_row, nn);
                        h[(r, c)] -= q_mat[(q_col, nn)];
                    }
                }
            }
        }
    }
    Ok(HessianMatrix { h, k, m })
}

fn check_same_dims(s: &SolutionSet, p: &ProblemInstance) -> Result<()> {
    if s.dims().k != p.dims().k || s.dims().m != p.dims().m {
        return Err(SedjocoError::DimensionMismatch(format!(
            "solution is K={}, M={} but problem is K={}, M={}",
            s.dims().k,
            s.dims().m,
            p.dims().k,
            p.dims().m
        )));
    }
    Ok(())
}

/// Solves each dataset's within-set problem on its own and stacks the
/// results into a joint starting point. A dataset whose solve does not
/// converge keeps the identity start and logs a warning.
///
/// The independent solves agree on which source a row index means only up
/// to a per-dataset permutation, and a stack with inconsistent row pairing
/// starts the joint iteration in the basin of a mispaired critical point
/// that no shared row permutation can repair afterwards. Each dataset after
/// the first is therefore re-ordered to pair with the first via the
/// cross-dataset targets before stacking.
pub fn per_set_initial(p: &ProblemInstance) -> Result<SolutionSet> {
    let (k, m) = (p.dims().k, p.dims().m);
    let inner = SolverOptions {
        max_iters: 200,
        tol: 1e-10,
        init: InitStrategy::Identity,
        newton_damping: true,
        seed: 0,
    };
    let mut sets = Vec::with_capacity(m);
    for mm in 0..m {
        let targets: Vec<DMatrix<f64>> = (0..k).map(|kk| p.target(kk, mm, mm).clone()).collect();
        match standard_sedjoco_solve(&targets, &inner) {
            Ok((sol, trace)) if trace.converged => sets.push(sol.b(0).clone()),
            Ok(_) | Err(_) => {
                log::warn!(
                    "within-set solve for dataset {} did not converge; \
                     using identity start",
                    mm
                );
                sets.push(DMatrix::identity(k, k));
            }
        }
    }
    if m > 1 {
        reconcile_rows(p, &mut sets);
    }
    SolutionSet::new(k, m, sets)
}

/// Upper limit on the number of relative row pairings that are ranked
/// exhaustively when stacking per-dataset solutions.
const MAX_PAIRING_COMBOS: f64 = 2e6;

/// Decides, for every dataset beyond the first, which of its rows feeds each
/// stacked row of the joint start, then rescales every stacked row in place.
///
/// The per-dataset solves recover the sources in an arbitrary order with
/// arbitrary signs and scales, and a stack that pairs different sources in
/// the same row sits near no joint solution at all. After rescaling, each
/// candidate stack satisfies its diagonal conditions exactly, so stacks can
/// be ranked by their determinant terms alone, and those separate into one
/// score per row. Small problems rank every relative pairing; larger ones
/// fall back to a greedy cross-coupling match per dataset.
fn reconcile_rows(p: &ProblemInstance, sets: &mut [DMatrix<f64>]) {
    let k = sets[0].nrows();
    let m = sets.len();
    let perms = all_permutations(k);
    let combos = (perms.len() as f64).powi(m as i32 - 1);
    if combos <= MAX_PAIRING_COMBOS {
        reconcile_exhaustive(p, sets, &perms);
        return;
    }
    for mm in 1..m {
        let perm = pairing_permutation(p, &sets[0], &sets[mm], mm);
        if perm.iter().enumerate().any(|(i, &pi)| pi != i) {
            log::debug!(
                "re-ordering dataset {} start rows by {:?} to pair with dataset 0",
                mm,
                perm
            );
            let reordered = DMatrix::from_fn(k, k, |row, col| sets[mm][(perm[row], col)]);
            sets[mm] = reordered;
        }
    }
    for slot in 0..k {
        let assignment = vec![slot; m];
        let coupling = row_coupling(p, sets, slot, &assignment);
        if let Some((_, lambda)) = dominant_row_scaling(&coupling) {
            scale_slot(sets, slot, &lambda);
        }
    }
}

/// Ranks every combination of per-dataset row orders by the summed row
/// scores of the rescaled stack and applies the best one.
fn reconcile_exhaustive(p: &ProblemInstance, sets: &mut [DMatrix<f64>], perms: &[Vec<usize>]) {
    let k = sets[0].nrows();
    let m = sets.len();
    let tuples = k.pow(m as u32 - 1);
    let mut table: Vec<Vec<Option<(f64, DVector<f64>)>>> = Vec::with_capacity(k);
    for slot in 0..k {
        let mut row = Vec::with_capacity(tuples);
        for idx in 0..tuples {
            let mut assignment = vec![slot; m];
            let mut rest = idx;
            for a in assignment.iter_mut().skip(1) {
                *a = rest % k;
                rest /= k;
            }
            let coupling = row_coupling(p, sets, slot, &assignment);
            row.push(dominant_row_scaling(&coupling));
        }
        table.push(row);
    }
    let tuple_index = |combo: &[usize], slot: usize| -> usize {
        let mut idx = 0;
        let mut mul = 1;
        for (mm, &ci) in combo.iter().enumerate() {
            let _ = mm;
            idx += perms[ci][slot] * mul;
            mul *= k;
        }
        idx
    };
    let mut combo = vec![0usize; m - 1];
    let mut best: Option<(f64, Vec<usize>)> = None;
    'combos: loop {
        let mut total = 0.0;
        let mut feasible = true;
        for slot in 0..k {
            match &table[slot][tuple_index(&combo, slot)] {
                Some((score, _)) => total += score,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible && best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, combo.clone()));
        }
        let mut pos = 0;
        loop {
            combo[pos] += 1;
            if combo[pos] < perms.len() {
                break;
            }
            combo[pos] = 0;
            pos += 1;
            if pos == m - 1 {
                break 'combos;
            }
        }
    }
    let Some((_, combo)) = best else {
        log::warn!("every candidate row pairing was degenerate; stacking rows as solved");
        return;
    };
    for (mm, &ci) in combo.iter().enumerate() {
        let perm = &perms[ci];
        if perm.iter().enumerate().any(|(i, &pi)| pi != i) {
            log::debug!(
                "re-ordering dataset {} start rows by {:?} to pair with dataset 0",
                mm + 1,
                perm
            );
            let reordered = DMatrix::from_fn(k, k, |row, col| sets[mm + 1][(perm[row], col)]);
            sets[mm + 1] = reordered;
        }
    }
    for slot in 0..k {
        let (_, lambda) = table[slot][tuple_index(&combo, slot)]
            .as_ref()
            .expect("winning pairing was checked feasible");
        let lambda = lambda.clone();
        scale_slot(sets, slot, &lambda);
    }
}

/// Cross-dataset coupling matrix of one stacked row: entry `(a, b)` is the
/// bilinear form of the assigned rows of datasets `a` and `b` through the
/// `slot`-th target.
fn row_coupling(
    p: &ProblemInstance,
    sets: &[DMatrix<f64>],
    slot: usize,
    assignment: &[usize],
) -> DMatrix<f64> {
    let m = sets.len();
    DMatrix::from_fn(m, m, |a, b| {
        (sets[a].row(assignment[a]) * p.target(slot, a, b) * sets[b].row(assignment[b]).transpose())
            [(0, 0)]
    })
}

fn scale_slot(sets: &mut [DMatrix<f64>], slot: usize, lambda: &DVector<f64>) {
    let k = sets[0].ncols();
    for (mm, set) in sets.iter_mut().enumerate() {
        for col in 0..k {
            set[(slot, col)] *= lambda[mm];
        }
    }
}

/// Refines a start by exact per-row likelihood ascent: each update replaces
/// one row of one dataset with the global maximizer of the objective over
/// that row, every other row held fixed. The maximizer solves a scalar
/// quadratic for the reciprocal of the row's determinant inner product; both
/// roots are stationary points of the row objective, so the root with the
/// higher value is taken. Unlike the full second-order iteration, which
/// homes in on whatever stationary point is nearest in residual, these
/// sweeps only ever increase the objective, so they pull a rough start into
/// the basin of a high-likelihood stationary point before polishing.
/// Degenerate rows are skipped. Stops after `max_sweeps` or once a full
/// sweep gains less than `gain_tol`.
pub(crate) fn ascent_sweeps(
    p: &ProblemInstance,
    aug: &AugmentedTargetSet,
    current: &mut SolutionSet,
    max_sweeps: usize,
    gain_tol: f64,
) {
    let (k, m) = (p.dims().k, p.dims().m);
    let Ok(mut last) = log_likelihood_core(current, aug) else {
        return;
    };
    for _ in 0..max_sweeps {
        for mm in 0..m {
            for kk in 0..k {
                ascend_row(p, current, kk, mm);
            }
        }
        let Ok(now) = log_likelihood_core(current, aug) else {
            return;
        };
        if now - last < gain_tol {
            return;
        }
        last = now;
    }
}

/// One exact row maximization; leaves the row unchanged when the update is
/// degenerate (singular within-dataset target or vanishing cofactors).
fn ascend_row(p: &ProblemInstance, s: &mut SolutionSet, k: usize, m: usize) {
    let dim = p.dims().k;
    let n_sets = p.dims().m;
    let Some(c) = cofactor_row(s.b(m), k) else {
        return;
    };
    let mut v = DVector::zeros(dim);
    for ll in 0..n_sets {
        if ll != m {
            v += p.target(k, m, ll) * s.b(ll).row(k).transpose();
        }
    }
    let Some(chol) = p.target(k, m, m).clone().cholesky() else {
        return;
    };
    let wc = chol.solve(&c);
    let wv = chol.solve(&v);
    let a2 = c.dot(&wc);
    let a1 = c.dot(&wv);
    if !(a2 > 0.0) || !a1.is_finite() {
        return;
    }
    let disc = (a1 * a1 + 4.0 * a2).sqrt();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for tau in [(a1 + disc) / (2.0 * a2), (a1 - disc) / (2.0 * a2)] {
        if tau == 0.0 || !tau.is_finite() {
            continue;
        }
        let b = &wc * tau - &wv;
        let quad = 0.5 * b.dot(&(p.target(k, m, m) * &b)) + b.dot(&v);
        let value = -tau.abs().ln() - quad;
        if value.is_finite() && best.as_ref().map_or(true, |(bv, _)| value > *bv) {
            best = Some((value, b));
        }
    }
    if let Some((_, b)) = best {
        s.sets_mut()[m].row_mut(k).copy_from(&b.transpose());
    }
}

/// Cofactors of row `k`: the gradient of `det` with respect to that row.
/// Computed from the adjugate when the matrix is comfortably invertible and
/// from explicit minors otherwise. Returns `None` only when the values are
/// not finite.
fn cofactor_row(b: &DMatrix<f64>, k: usize) -> Option<DVector<f64>> {
    let n = b.nrows();
    if n == 1 {
        return Some(DVector::from_element(1, 1.0));
    }
    let lu = b.clone().lu();
    let det = lu.determinant();
    if det.is_finite() && det != 0.0 {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        if let Some(col) = lu.solve(&e) {
            let c = col * det;
            if c.iter().all(|x| x.is_finite()) {
                return Some(c);
            }
        }
    }
    let mut c = DVector::zeros(n);
    for j in 0..n {
        let minor = DMatrix::from_fn(n - 1, n - 1, |r, col| {
            let rr = if r < k { r } else { r + 1 };
            let cc = if col < j { col } else { col + 1 };
            b[(rr, cc)]
        });
        let sign = if (k + j) % 2 == 0 { 1.0 } else { -1.0 };
        c[j] = sign * minor.determinant();
    }
    if c.iter().all(|x| x.is_finite()) {
        Some(c)
    } else {
        None
    }
}

/// Rescales every stacked row of `sol` to satisfy its own diagonal
/// conditions, leaving rows with degenerate couplings untouched. Used to
/// turn a row-permuted start into a usable one: a permutation moves each
/// row under a different normalization, so its scales must be solved anew.
pub(crate) fn renormalize_start(p: &ProblemInstance, sol: &SolutionSet) -> SolutionSet {
    let (k, m) = (p.dims().k, p.dims().m);
    let mut sets: Vec<DMatrix<f64>> = (0..m).map(|mm| sol.b(mm).clone()).collect();
    for slot in 0..k {
        let assignment = vec![slot; m];
        let coupling = row_coupling(p, &sets, slot, &assignment);
        if let Some((_, lambda)) = dominant_row_scaling(&coupling) {
            scale_slot(&mut sets, slot, &lambda);
        }
    }
    SolutionSet::new(k, m, sets).expect("dimensions are preserved")
}

/// Solves the scaling equations `lambda_m (C lambda)_m = 1` of one stacked
/// row for the row coupling matrix `C`, returning the solution branch with
/// the largest determinant contribution `sum_m ln|lambda_m|` together with
/// that score. The system has one branch per relative sign pattern, so the
/// returned branch also settles the relative signs of the row across
/// datasets. Returns `None` when the coupling is degenerate.
fn dominant_row_scaling(coupling: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let m = coupling.nrows();
    if (0..m).any(|i| !coupling[(i, i)].is_finite() || coupling[(i, i)] <= 0.0) {
        return None;
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for pattern in 0..(1u32 << (m - 1)) {
        let mut lambda = DVector::from_fn(m, |i, _| {
            let sign = if i > 0 && (pattern >> (i - 1)) & 1 == 1 {
                -1.0
            } else {
                1.0
            };
            sign / coupling[(i, i)].sqrt()
        });
        if !refine_row_scaling(coupling, &mut lambda) {
            continue;
        }
        let score: f64 = (0..m).map(|i| lambda[i].abs().ln()).sum();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, lambda));
        }
    }
    best
}

/// Newton iteration for the row scaling equations; returns false when this
/// sign branch has no reachable solution.
fn refine_row_scaling(coupling: &DMatrix<f64>, lambda: &mut DVector<f64>) -> bool {
    let m = coupling.nrows();
    for _ in 0..60 {
        let w = coupling * &*lambda;
        let f = DVector::from_fn(m, |i, _| lambda[i] * w[i] - 1.0);
        if f.amax() <= 1e-12 {
            return true;
        }
        let jac = DMatrix::from_fn(m, m, |i, j| {
            let off = lambda[i] * coupling[(i, j)];
            if i == j {
                off + w[i]
            } else {
                off
            }
        });
        match jac.lu().solve(&f) {
            Some(step) => {
                *lambda -= &step;
                if lambda.iter().any(|v| !v.is_finite()) {
                    return false;
                }
            }
            None => return false,
        }
    }
    false
}

/// Chooses the row order of `b_m` (dataset `mm`) that best pairs its rows
/// with those of `b0` (dataset 0): the coupling `b0_row(j)ᵀ Q[j][0][mm]
/// b_m_row(l)` is large when both rows extract the common source `j` and
/// near zero otherwise, so the permutation maximizing the summed absolute
/// couplings recovers a consistent pairing.
fn pairing_permutation(
    p: &ProblemInstance,
    b0: &DMatrix<f64>,
    b_m: &DMatrix<f64>,
    mm: usize,
) -> Vec<usize> {
    let k = p.dims().k;
    let mut coupling = DMatrix::zeros(k, k);
    for j in 0..k {
        let cross = b0.row(j) * p.target(j, 0, mm) * b_m.transpose();
        for l in 0..k {
            coupling[(j, l)] = cross[(0, l)].abs();
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in crate::core::all_permutations(k) {
        let score: f64 = (0..k).map(|j| coupling[(j, perm[j])]).sum();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, perm));
        }
    }
    best.expect("at least the identity permutation").1
}

/// Materializes the requested starting point.
pub fn make_initial(p: &ProblemInstance, strategy: &InitStrategy) -> Result<SolutionSet> {
    let (k, m) = (p.dims().k, p.dims().m);
    match strategy {
        InitStrategy::Identity => Ok(SolutionSet::identity(k, m)),
        InitStrategy::UserSupplied(s) => {
            if s.dims().k != k || s.dims().m != m {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "supplied init is K={}, M={} but problem is K={}, M={}",
                    s.dims().k,
                    s.dims().m,
                    k,
                    m
                )));
            }
            Ok(s.clone())
        }
        InitStrategy::PerSetSedjoco => per_set_initial(p),
    }
}

/// Newton iteration on the stacked unknowns with optional backtracking.
///
/// With damping enabled, the iteration can occasionally be captured by a
/// solution whose norm is so large (of order one over the square root of the
/// smallest eigenvalue of the stacked target matrices) that no nearby
/// floating-point matrix satisfies a tight tolerance. When the endgame
/// stagnates above tolerance, the solver re-seeds from relaxation sweeps,
/// which are drawn toward well-scaled solutions, and resumes the Newton
/// iteration from there. The sweeps are counted in the iteration trace.
pub fn newton_solve(
    p: &ProblemInstance,
    opts: &SolverOptions,
) -> Result<(SolutionSet, ConvergenceTrace)> {
    opts.validate()?;
    let start = Instant::now();
    let a = build_augmented_targets(p);
    let mut current = make_initial(p, &opts.init)?;
    if !current.is_nonsingular() {
        return Err(SedjocoError::Singular("initial solution".into()));
    }
    let mut res_cur = residual(&current, p)?.total;
    let mut trace = ConvergenceTrace::new(res_cur, log_likelihood_core(&current, &a)?);
    if res_cur <= opts.tol {
        trace.converged = true;
        finish(&mut current, p, &mut trace, start);
        return Ok((current, trace));
    }
    let (k, m) = (p.dims().k, p.dims().m);
    let mut best_res = res_cur;
    let mut since_improve = 0usize;
    let mut rescues_left: usize = if opts.newton_damping { 2 } else { 0 };
    let reseed_target = (opts.tol * 1e3).min(1e-4).max(opts.tol);
    for _ in 0..opts.max_iters {
        let g = gradient(&current, p)?;
        let mut gv = DVector::zeros(k * k * m);
        for set in 0..m {
            for col in 0..k {
                for row in 0..k {
                    gv[flat_index(k, set, row, col)] = g.g[set][(row, col)];
                }
            }
        }
        let h = hessian(&current, p)?;
        let base = solution_to_vec(&current);
        if opts.newton_damping {
            // Stationary points of the likelihood with nonsingular B are
            // exactly the system solutions, so globalize on the merit
            // φ = ½‖∇L‖²: the Newton step −H⁻¹∇L is a descent direction for
            // φ whenever H is nonsingular (regardless of its inertia, so
            // saddle-point solutions attract just like maxima), and a
            // Levenberg fallback keeps descent guaranteed when it is not.
            let phi_cur = 0.5 * gv.norm_squared();
            let (delta, dir_slope) = damped_direction(&h.h, &gv);
            let mut accepted = None;
            let mut step = 1.0_f64;
            for _ in 0..=60 {
                let cand_vec = &base - &delta * step;
                let cand = vec_to_solution(&cand_vec, k, m)?;
                if cand.is_nonsingular() {
                    let r = match residual(&cand, p) {
                        Ok(rep) => rep.total,
                        Err(_) => {
                            step *= 0.5;
                            continue;
                        }
                    };
                    if r <= opts.tol {
                        accepted = Some((cand, r));
                        break;
                    }
                    if let Ok(gn) = gradient(&cand, p) {
                        let phi_new: f64 =
                            0.5 * gn.g.iter().map(|gm| gm.norm_squared()).sum::<f64>();
                        if phi_new <= phi_cur + 1e-4 * step * dir_slope {
                            accepted = Some((cand, r));
                            break;
                        }
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((cand, r)) => {
                    current = cand;
                    res_cur = r;
                }
                None if rescues_left > 0 => {
                    rescues_left -= 1;
                    let (s, r) = reseed_from_relaxation(p, &a, opts, reseed_target, &mut trace)?;
                    current = s;
                    res_cur = r;
                    best_res = r;
                    since_improve = 0;
                    if res_cur <= opts.tol {
                        trace.converged = true;
                        break;
                    }
                    continue;
                }
                None => {
                    trace.wall_time = start.elapsed();
                    return Err(SedjocoError::NonConvergence {
                        message: format!(
                            "step rejected after 60 halvings at residual {:.3e}",
                            res_cur
                        ),
                        trace: Some(Box::new(trace)),
                    });
                }
            }
        } else {
            let delta = solve_newton_system(&h.h, &gv)?;
            let cand_vec = &base - &delta;
            current = vec_to_solution(&cand_vec, k, m)?;
            res_cur = residual(&current, p)?.total;
        }
        trace.record(res_cur, log_likelihood_core(&current, &a)?);
        if res_cur <= opts.tol {
            trace.converged = true;
            break;
        }
        if res_cur < 0.3 * best_res {
            best_res = res_cur;
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        if since_improve >= 12 && rescues_left > 0 {
            rescues_left -= 1;
            let (s, r) = reseed_from_relaxation(p, &a, opts, reseed_target, &mut trace)?;
            current = s;
            res_cur = r;
            best_res = r;
            since_improve = 0;
            if res_cur <= opts.tol {
                trace.converged = true;
                break;
            }
        }
    }
    finish(&mut current, p, &mut trace, start);
    Ok((current, trace))
}

/// Runs relaxation sweeps from the identity until the residual drops below
/// `target` (or a sweep budget runs out) and returns the best state seen.
/// Used to move a stagnated Newton iteration into the basin of a well-scaled
/// solution.
fn reseed_from_relaxation(
    p: &ProblemInstance,
    a: &AugmentedTargetSet,
    opts: &SolverOptions,
    target: f64,
    trace: &mut ConvergenceTrace,
) -> Result<(SolutionSet, f64)> {
    let (k, m) = (p.dims().k, p.dims().m);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut s = SolutionSet::identity(k, m);
    let mut best_res = residual(&s, p)?.total;
    let mut best = s.clone();
    for _ in 0..4000 {
        for mm in 0..m {
            for kk in 0..k {
                if let Err(message) = relax_row(p, &mut s, kk, mm, &mut rng) {
                    return Err(SedjocoError::NonConvergence {
                        message,
                        trace: Some(Box::new(trace.clone())),
                    });
                }
            }
        }
        let r = residual(&s, p)?.total;
        trace.record(r, log_likelihood_core(&s, a)?);
        if r < best_res {
            best_res = r;
            best = s.clone();
        }
        if r <= target {
            break;
        }
    }
    log::debug!(
        "re-seeded a stagnated Newton run at residual {:.3e} after relaxation sweeps",
        best_res
    );
    Ok((best, best_res))
}

/// Direction and slope for the damped iteration. Prefers the exact Newton
/// step, which is a descent direction for φ = ½‖∇L‖² whenever the
/// second-derivative matrix is nonsingular; falls back to a Levenberg step
/// `(H² + µI)⁻¹·H·g`, which is a descent direction for φ unconditionally.
/// The returned slope is the directional derivative of φ along the step.
fn damped_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> (DVector<f64>, f64) {
    let gsq = g.norm_squared();
    if let Ok(d) = solve_newton_system(h, g) {
        let slope = -g.dot(&(h * &d));
        if slope.is_finite() && slope <= -1e-2 * gsq {
            return (d, slope);
        }
    }
    let hg = h * g;
    let h2 = h * h;
    let n = h2.nrows();
    let mut mu = 1e-12 * h2.norm() + f64::MIN_POSITIVE;
    for _ in 0..40 {
        let reg = &h2 + DMatrix::from_diagonal_element(n, n, mu);
        if let Some(chol) = reg.cholesky() {
            let d = chol.solve(&hg);
            let slope = -g.dot(&(h * &d));
            if slope.is_finite() && slope < 0.0 {
                return (d, slope);
            }
        }
        mu *= 100.0;
    }
    // Nothing produced a usable direction; hand back a zero step so the
    // caller's line search fails fast and its rescue path takes over.
    (DVector::zeros(g.len()), 0.0)
}

/// Solves H·d = g by LU with compensated iterative refinement, regularizing
/// with a small ridge if the factorization reports singularity. Refinement
/// keeps the step accurate when g is many orders smaller than H.
fn solve_newton_system(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let mut lu = h.clone_owned().lu();
    let mut solved = lu
        .solve(g)
        .filter(|d| d.iter().all(|x| x.is_finite()));
    if solved.is_none() {
        let mu = 1e-10 * h.norm();
        let ridged = h + DMatrix::from_diagonal_element(n, n, mu);
        lu = ridged.lu();
        solved = lu
            .solve(g)
            .filter(|d| d.iter().all(|x| x.is_finite()));
    }
    let Some(mut d) = solved else {
        return Err(SedjocoError::Singular(
            "second-derivative matrix (even after ridge regularization)".into(),
        ));
    };
    for _ in 0..2 {
        let rho = DVector::from_fn(n, |i, _| {
            let mut acc = CompensatedSum::default();
            acc.add(g[i]);
            for j in 0..n {
                acc.add_prod(-h[(i, j)], d[j]);
            }
            acc.value()
        });
        let Some(correction) = lu
            .solve(&rho)
            .filter(|c| c.iter().all(|x| x.is_finite()))
        else {
            break;
        };
        d += &correction;
        if correction.norm() <= 1e-15 * d.norm() {
            break;
        }
    }
    Ok(d)
}

/// Cyclic relaxation: sweep datasets then sources, each time projecting the
/// row against the other coupling vectors and renormalizing.
pub fn ir_solve(
    p: &ProblemInstance,
    opts: &SolverOptions,
) -> Result<(SolutionSet, ConvergenceTrace)> {
    opts.validate()?;
    let start = Instant::now();
    let a = build_augmented_targets(p);
    let mut current = make_initial(p, &opts.init)?;
    let mut res_cur = residual(&current, p)?.total;
    let mut trace = ConvergenceTrace::new(res_cur, log_likelihood_core(&current, &a)?);
    if res_cur <= opts.tol {
        trace.converged = true;
        finish(&mut current, p, &mut trace, start);
        return Ok((current, trace));
    }
    let (k, m) = (p.dims().k, p.dims().m);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.max_iters {
        for mm in 0..m {
            for kk in 0..k {
                if let Err(message) = relax_row(p, &mut current, kk, mm, &mut rng) {
                    trace.wall_time = start.elapsed();
                    return Err(SedjocoError::NonConvergence {
                        message,
                        trace: Some(Box::new(trace)),
                    });
                }
            }
        }
        res_cur = residual(&current, p)?.total;
        trace.record(res_cur, log_likelihood_core(&current, &a)?);
        if res_cur <= opts.tol {
            trace.converged = true;
            break;
        }
    }
    finish(&mut current, p, &mut trace, start);
    Ok((current, trace))
}

/// One (k, m) relaxation update, with jitter retries when the projection or
/// the rescaling degenerates.
fn relax_row(
    p: &ProblemInstance,
    s: &mut SolutionSet,
    k: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(), String> {
    let dim = p.dims().k;
    for attempt in 0..=10 {
        let betas: Vec<DVector<f64>> = (0..dim).map(|kp| beta(p, s, kp, m)).collect();
        let b = s.b(m).row(k).transpose();
        let projected = if dim == 1 {
            b.clone()
        } else {
            // Rows of `span` are the coupling vectors of the other sources.
            let mut span = DMatrix::zeros(dim - 1, dim);
            let mut r = 0;
            for kp in 0..dim {
                if kp != k {
                    span.row_mut(r).copy_from(&betas[kp].transpose());
                    r += 1;
                }
            }
            let gram = &span * span.transpose();
            match gram.cholesky() {
                Some(chol) => {
                    let coeffs = chol.solve(&(&span * &b));
                    &b - span.transpose() * coeffs
                }
                None => {
                    jitter_row(s, k, m, rng);
                    continue;
                }
            }
        };
        let inner = projected.dot(&betas[k]);
        let denom = inner.abs();
        if denom < 1e-14 || !denom.is_finite() {
            jitter_row(s, k, m, rng);
            continue;
        }
        // Orient the row so its coupling inner product is +1 rather than −1:
        // both satisfy the magnitude rule, but only the positive branch is a
        // solution of the system, and without this choice the sweep can
        // settle on the spurious branch.
        let updated = projected * (inner.signum() / denom.sqrt());
        s.sets_mut()[m].row_mut(k).copy_from(&updated.transpose());
        if attempt > 0 {
            log::debug!(
                "relaxation update for source {}, dataset {} needed {} jitter retries",
                k,
                m,
                attempt
            );
        }
        return Ok(());
    }
    Err(format!(
        "relaxation update for source {}, dataset {} stayed degenerate \
         after 10 jitter retries",
        k, m
    ))
}

/// Perturbs one row in place with a random direction of norm 1e−6.
fn jitter_row(s: &mut SolutionSet, k: usize, m: usize, rng: &mut ChaCha8Rng) {
    let dim = s.dims().k;
    let mut dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm > 0.0 {
        dir *= 1e-6 / norm;
        let mut row = s.sets_mut()[m].row_mut(k);
        for j in 0..dim {
            row[j] += dir[j];
        }
    }
}

/// Single-dataset solve: wraps the targets into an M=1 instance and runs the
/// Newton iteration. Targets must be symmetric; they are symmetrized exactly
/// before use.
pub fn standard_sedjoco_solve(
    targets: &[DMatrix<f64>],
    opts: &SolverOptions,
) -> Result<(SolutionSet, ConvergenceTrace)> {
    let k = targets.len();
    if k == 0 {
        return Err(SedjocoError::InvalidInput("no target matrices".into()));
    }
    for (i, q) in targets.iter().enumerate() {
        if q.nrows() != k || q.ncols() != k {
            return Err(SedjocoError::DimensionMismatch(format!(
                "target {} is {}x{}, expected {}x{}",
                i,
                q.nrows(),
                q.ncols(),
                k,
                k
            )));
        }
        let asym = (q - q.transpose()).norm();
        if asym > 1e-8 * (1.0 + q.norm()) {
            return Err(SedjocoError::InvalidInput(format!(
                "target {} is not symmetric (deviation {:.3e})",
                i, asym
            )));
        }
    }
    let symmetrized: Vec<DMatrix<f64>> = targets
        .iter()
        .map(|q| (q + q.transpose()) * 0.5)
        .collect();
    let p = ProblemInstance::new(k, 1, symmetrized)?;
    newton_solve(&p, opts)
}

/// Applies the cosmetic output normalization and stamps the wall time.
fn finish(s: &mut SolutionSet, p: &ProblemInstance, trace: &mut ConvergenceTrace, start: Instant) {
    trace.sign_flips = normalize_signs(s, p);
    trace.wall_time = start.elapsed();
}

/// Flips row signs, identically in every dataset, so that the diagonal of
/// B[0]·L is nonnegative, where L is the Cholesky factor of the first
/// target. Flipping a row in only some datasets would break the system
/// equations, so one shared flip pattern is used and reported. Returns None
/// (no flip) when the first target is not positive definite.
fn normalize_signs(s: &mut SolutionSet, p: &ProblemInstance) -> Option<Vec<bool>> {
    let chol = p.target(0, 0, 0).clone_owned().cholesky()?;
    let l = chol.l();
    let d = s.b(0) * &l;
    let k = s.dims().k;
    let flips: Vec<bool> = (0..k).map(|i| d[(i, i)] < 0.0).collect();
    if flips.iter().any(|&f| f) {
        for b in s.sets_mut() {
            for (i, &flip) in flips.iter().enumerate() {
                if flip {
                    let mut row = b.row_mut(i);
                    row *= -1.0;
                }
            }
        }
    }
    Some(flips)
}
