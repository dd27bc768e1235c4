//! Discrete-to-continuous convergence over increasingly fine grids.

use serde::{Deserialize, Serialize};

use super::{
    balance_data, fit_continuous_gps, fit_discrete_ps, interval_masses, mass_edges, PropensityModel, PsConfig,
};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::portfolio::{quantile_grid, Portfolio};
use crate::stats::Summary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub intervals: usize,
    /// `|pi_discrete(c_i | X_i) - mass_continuous(c_i | X_i)|` over rows.
    pub score_diff: Summary,
    /// Weighted ASAM per interval.
    pub discrete_asam: Summary,
    pub continuous_asam: Summary,
    pub discrete_rounds: usize,
}

/// Fits one continuous GPS (on the first grid) and a discrete PS per interval
/// count, comparing scores and balance on each grid.
pub fn convergence_study(
    portfolio: &Portfolio,
    interval_counts: &[usize],
    discrete: &PsConfig,
    continuous: &PsConfig,
) -> Result<Vec<ConvergenceRow>> {
    let first = *interval_counts
        .first()
        .ok_or_else(|| Error::invalid("convergence study needs at least one interval count"))?;
    let t = portfolio.rate_changes();
    let base_grid = quantile_grid(&t, first)?;
    let gps = match fit_continuous_gps(portfolio, &base_grid, base_grid.bounds(), continuous)? {
        PropensityModel::Continuous(g) => g,
        PropensityModel::Discrete(_) => unreachable!(),
    };
    let x = portfolio.covariates();
    let f = gps.mean(&x)?;
    let mut rows = Vec::with_capacity(interval_counts.len());
    for &c in interval_counts {
        let grid = quantile_grid(&t, c)?;
        let cats = grid.categories(&t)?;
        let model = fit_discrete_ps(portfolio, &grid, discrete)?;
        let rounds = match &model {
            PropensityModel::Discrete(d) => d.ensemble.rounds(),
            PropensityModel::Continuous(_) => 0,
        };
        let pd = model.interval_scores(&x)?;
        let edges = mass_edges(&grid, &gps.bounds);
        let masses = exec::map_slice(&f, |&f| interval_masses(f, gps.sigma, &edges));
        let pc = Matrix::new(f.len(), c, masses.into_iter().flatten().collect())?;
        let diff: Vec<f64> = cats
            .iter()
            .enumerate()
            .map(|(i, &ci)| (pd.get(i, ci) - pc.get(i, ci)).abs())
            .collect();
        let balance = balance_data(portfolio, &grid)?;
        let row = ConvergenceRow {
            intervals: c,
            score_diff: Summary::of(&diff),
            discrete_asam: Summary::of(&balance.interval_asam(&pd)?),
            continuous_asam: Summary::of(&balance.interval_asam(&pc)?),
            discrete_rounds: rounds,
        };
        log::info!(
            "convergence C={c}: median diff {:.5}, discrete ASAM mean {:.4}, continuous ASAM mean {:.4}",
            row.score_diff.median,
            row.discrete_asam.mean,
            row.continuous_asam.mean
        );
        rows.push(row);
    }
    Ok(rows)
}
