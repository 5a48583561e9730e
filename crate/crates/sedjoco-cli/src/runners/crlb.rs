//! Bound table for a covariance family: the attainable interference floor
//! per dataset and ordered source pair, with infinite entries marking
//! indistinguishable pairs.

use nalgebra::DMatrix;
use sedjoco::core::serialize::format_f64;
use sedjoco::{
    build_cov_experiment2, build_cov_experiment3, draw_experiment3_filters, icrlb,
    Experiment2Params, Experiment3Params, Result, ScvCovarianceSet, SedjocoError,
};

use crate::config::{CrlbConfig, FamilySpec};
use crate::runners::{derive_seed, streams, Artifacts};

fn build_family(cfg: &CrlbConfig) -> Result<ScvCovarianceSet> {
    match &cfg.family {
        FamilySpec::Modulated { alpha, t } => {
            build_cov_experiment2(&Experiment2Params::table_defaults(*alpha, *t))
        }
        FamilySpec::Filtered { t, filter_len, eta } => {
            let master = cfg.master_seed.expect("validated");
            let filters = draw_experiment3_filters(
                3,
                3,
                *filter_len,
                *eta,
                derive_seed(master, streams::FILTER_DRAW, 0),
            )?;
            let params = Experiment3Params::from_filters(3, 3, *t, *filter_len, *eta, filters)?;
            build_cov_experiment3(&params)
        }
        FamilySpec::Explicit { k, m, t, blocks } => {
            let mats = blocks
                .iter()
                .enumerate()
                .map(|(i, rows)| {
                    if rows.len() != *t || rows.iter().any(|r| r.len() != *t) {
                        return Err(SedjocoError::DimensionMismatch(format!(
                            "block {} is not {t} x {t}",
                            i
                        )));
                    }
                    Ok(DMatrix::from_fn(*t, *t, |r, c| rows[r][c]))
                })
                .collect::<Result<Vec<_>>>()?;
            ScvCovarianceSet::new(*k, *m, *t, mats)
        }
    }
}

pub fn run(cfg: &CrlbConfig, out: &Artifacts) -> Result<()> {
    let cov = build_family(cfg)?;
    let report = icrlb(&cov)?;
    let mut csv = String::from("m,k,l,crlb,crlb_db\n");
    for mm in 0..report.m() {
        for kk in 0..report.k() {
            for ll in 0..report.k() {
                if kk == ll {
                    continue;
                }
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    mm,
                    kk,
                    ll,
                    format_f64(report.bound(mm, kk, ll)),
                    format_f64(report.bound_db(mm, kk, ll)),
                ));
            }
        }
    }
    out.write("crlb.csv", &csv)?;
    if !report.flagged_infinite().is_empty() {
        log::warn!(
            "infinite bound for source pairs {:?}",
            report.flagged_infinite()
        );
    }
    Ok(())
}
