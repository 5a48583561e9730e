//! Nonstationary coupled-source model: each source is white noise whose
//! amplitude is modulated by a slow cosine envelope, with the same underlying
//! noise shared across datasets and independent unit white noise added per
//! dataset. The sharing correlates corresponding sources between datasets;
//! the modulation makes them nonstationary whenever its depth is nonzero.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ScvCovarianceSet;
use crate::error::{Result, SedjocoError};

/// Parameters of the modulated-noise model. Source `k` in dataset `m` at
/// sample `n` is
///
/// ```text
/// s = (sigma[k][m] + alpha * cos(2*pi*n / periods[k][m] + phi0[k][m])) * w_k[n] + v[n]
/// ```
///
/// where `w_k` is standard white noise shared by all datasets and `v` is
/// standard white noise drawn independently per source and dataset.
#[derive(Clone, Debug)]
pub struct Experiment2Params {
    /// Modulation depth; `0` makes every source stationary white noise.
    pub alpha: f64,
    /// Samples per signal.
    pub t: usize,
    /// Envelope phase offsets in radians, indexed `[k][m]`.
    pub phi0: Vec<Vec<f64>>,
    /// Envelope periods in samples, indexed `[k][m]`.
    pub periods: Vec<Vec<f64>>,
    /// Baseline amplitudes, indexed `[k][m]`.
    pub sigma: Vec<Vec<f64>>,
}

impl Experiment2Params {
    /// The built-in two-dataset, two-source parameter table.
    pub fn table_defaults(alpha: f64, t: usize) -> Self {
        Experiment2Params {
            alpha,
            t,
            phi0: vec![vec![PI, 5.0 * PI / 3.0], vec![PI / 3.0, PI]],
            periods: vec![vec![50.0, 350.0], vec![200.0, 500.0]],
            sigma: vec![vec![2.0, 10.0 / 3.0], vec![8.0 / 3.0, 4.0]],
        }
    }

    /// Number of sources.
    pub fn k(&self) -> usize {
        self.phi0.len()
    }

    /// Number of datasets.
    pub fn m(&self) -> usize {
        self.phi0.first().map_or(0, |row| row.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (k, m) = (self.k(), self.m());
        if k == 0 || m == 0 || self.t == 0 {
            return Err(SedjocoError::InvalidInput(
                "modulated-noise model needs at least one source, one dataset and one sample"
                    .into(),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(SedjocoError::NonFinite("modulation depth".into()));
        }
        for (name, table) in [
            ("phi0", &self.phi0),
            ("periods", &self.periods),
            ("sigma", &self.sigma),
        ] {
            if table.len() != k || table.iter().any(|row| row.len() != m) {
                return Err(SedjocoError::DimensionMismatch(format!(
                    "{} table must be {}x{}",
                    name, k, m
                )));
            }
            if table.iter().flatten().any(|x| !x.is_finite()) {
                return Err(SedjocoError::NonFinite(format!("{} table", name)));
            }
        }
        if self.periods.iter().flatten().any(|&p| p <= 0.0) {
            return Err(SedjocoError::InvalidInput(
                "envelope periods must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Envelope value `sigma + alpha * cos(2*pi*n/period + phi0)` for source
    /// `k` in dataset `m` at sample `n`.
    pub fn gain(&self, k: usize, m: usize, n: usize) -> f64 {
        let phase = 2.0 * PI * n as f64 / self.periods[k][m] + self.phi0[k][m];
        self.sigma[k][m] + self.alpha * phase.cos()
    }
}

/// Analytic covariance family of the modulated-noise model. Every block is
/// diagonal: the shared noise contributes `gain(k, m1, n) * gain(k, m2, n)`
/// at sample `n`, and the per-dataset noise adds `1` on within-set blocks.
pub fn build_cov_experiment2(params: &Experiment2Params) -> Result<ScvCovarianceSet> {
    params.validate()?;
    let (k, m, t) = (params.k(), params.m(), params.t);
    let mut blocks = Vec::with_capacity(k * m * m);
    for kk in 0..k {
        for m1 in 0..m {
            for m2 in 0..m {
                let mut block = DMatrix::zeros(t, t);
                for n in 0..t {
                    let mut v = params.gain(kk, m1, n) * params.gain(kk, m2, n);
                    if m1 == m2 {
                        v += 1.0;
                    }
                    block[(n, n)] = v;
                }
                blocks.push(block);
            }
        }
    }
    ScvCovarianceSet::new(k, m, t, blocks)
}

/// Draws one realization of the model's sources; returns `S[m]`, each
/// `K x T`. The draw order is fixed (shared noise for every source first,
/// then each dataset's own noise), so a seeded generator reproduces
/// realizations exactly.
pub fn sample_experiment2<R: Rng + ?Sized>(
    params: &Experiment2Params,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    params.validate()?;
    let (k, m, t) = (params.k(), params.m(), params.t);
    let w = DMatrix::from_fn(k, t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = Vec::with_capacity(m);
    for mm in 0..m {
        let mut s = DMatrix::zeros(k, t);
        for kk in 0..k {
            for n in 0..t {
                let v: f64 = rng.sample(StandardNormal);
                s[(kk, n)] = params.gain(kk, mm, n) * w[(kk, n)] + v;
            }
        }
        out.push(s);
    }
    Ok(out)
}
