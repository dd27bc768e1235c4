//! Global response model: one penalised logistic fit per imputation,
//! pooled with Rubin's rule.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::design::DesignSpec;
use super::lasso::{fit_logistic_lasso, fit_penalized_many, LassoConfig, LassoPath, LogisticFit};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::matching::{rubin_combine, ImputedResponseSet, PooledEstimate};
use crate::portfolio::{PolicyRecord, Portfolio, TreatmentGrid};
use crate::stats::sigmoid;

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledLogistic {
    pub design: DesignSpec,
    pub grid: TreatmentGrid,
    pub penalty: f64,
    /// Intercept first, then the design columns.
    pub names: Vec<String>,
    pub estimate: PooledEstimate,
    /// Active coefficient count per imputation.
    pub active: Vec<usize>,
}

impl PooledLogistic {
    /// Interval of a rate change, clamping doses outside the grid to the end
    /// intervals.
    pub fn interval_of(&self, t: f64) -> usize {
        let t = t.clamp(self.grid.lower(), self.grid.upper());
        self.grid.category_of(t).expect("clamped dose lies on the grid")
    }

    pub fn logit(&self, r: &PolicyRecord, c: usize, competitiveness: f64) -> f64 {
        let d = &self.estimate.delta_bar;
        d[0] + self
            .design
            .row(r, c, competitiveness)
            .iter()
            .zip(&d[1..])
            .map(|(x, b)| x * b)
            .sum::<f64>()
    }

    pub fn probability(&self, r: &PolicyRecord, c: usize, competitiveness: f64) -> f64 {
        sigmoid(self.logit(r, c, competitiveness))
    }

    /// Churn probability at rate change `t`.
    pub fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64 {
        self.probability(r, self.interval_of(t), competitiveness)
    }

    /// Coefficient table: name, pooled estimate, pooled SE, within SE.
    pub fn coefficients_tsv(&self) -> String {
        let se = self.estimate.std_errors();
        let mut out = String::from("term\testimate\tstd_error\twithin_std_error\n");
        for (j, name) in self.names.iter().enumerate() {
            out.push_str(&format!(
                "{name}\t{:.8}\t{:.8}\t{:.8}\n",
                self.estimate.delta_bar[j],
                se[j],
                libm::sqrt(self.estimate.w_bar[j][j].max(0.0))
            ));
        }
        out
    }
}

/// Stacked targets: the average over imputations per cell, or imputation `m`.
fn targets(imputed: &ImputedResponseSet, m: Option<usize>) -> Vec<f64> {
    let n = imputed.policies();
    let cc = imputed.intervals();
    let mut y = Vec::with_capacity(n * cc);
    for i in 0..n {
        for c in 0..cc {
            y.push(match m {
                None => imputed.mean_response(i, c),
                Some(m) => imputed.draw(i, c, m) as f64,
            });
        }
    }
    y
}

fn check_shapes(portfolio: &Portfolio, imputed: &ImputedResponseSet, design: &DesignSpec) -> Result<()> {
    if imputed.policies() != portfolio.len() {
        return Err(Error::invalid(format!(
            "imputations cover {} policies, portfolio has {}",
            imputed.policies(),
            portfolio.len()
        )));
    }
    if imputed.intervals() != design.intervals() {
        return Err(Error::invalid("imputation and design interval counts differ"));
    }
    Ok(())
}

/// Penalty selection on the average potential responses, folds grouped by
/// policy.
pub fn select_penalty(
    portfolio: &Portfolio,
    imputed: &ImputedResponseSet,
    design: &DesignSpec,
    config: &LassoConfig,
) -> Result<LassoPath> {
    check_shapes(portfolio, imputed, design)?;
    let x = design.stacked(portfolio);
    let y = targets(imputed, None);
    let groups: Vec<usize> = (0..portfolio.len())
        .flat_map(|i| std::iter::repeat_n(i, design.intervals()))
        .collect();
    fit_logistic_lasso(&x, &y, &groups, config)
}

/// Inverse observed information of the fit restricted to the intercept and
/// active columns, scattered into a full `(K+1) x (K+1)` matrix.
fn active_covariance(x: &Matrix, fit: &LogisticFit, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let active: Vec<usize> = std::iter::once(0)
        .chain(
            fit.coefficients
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, _)| j + 1),
        )
        .collect();
    let a = active.len();
    let mut info = DMatrix::<f64>::zeros(a, a);
    let mut z = vec![0.0; a];
    for i in 0..x.rows() {
        let row = x.row(i);
        let p = sigmoid(fit.linear_predictor(row));
        let w = p * (1.0 - p);
        for (slot, &j) in z.iter_mut().zip(&active) {
            *slot = if j == 0 { 1.0 } else { row[j - 1] };
        }
        for u in 0..a {
            let wu = w * z[u];
            for v in 0..=u {
                info[(u, v)] += wu * z[v];
            }
        }
    }
    for u in 0..a {
        for v in 0..u {
            info[(v, u)] = info[(u, v)];
        }
    }
    let dependent = super::linalg::dependent_columns(&info);
    if !dependent.is_empty() {
        return Err(Error::RankDeficient(
            dependent.iter().map(|&k| names[active[k]].clone()).collect(),
        ));
    }
    let inv = info
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(active.iter().map(|&j| names[j].clone()).collect()))?
        .inverse();
    let p = names.len();
    let mut full = vec![vec![0.0; p]; p];
    for (u, &ju) in active.iter().enumerate() {
        for (v, &jv) in active.iter().enumerate() {
            full[ju][jv] = inv[(u, v)];
        }
    }
    Ok(full)
}

/// One fit per imputation at the shared `penalty`, with observed-information
/// covariances on each active set, pooled by Rubin's rule over the union of
/// active sets (inactive coefficients enter as zeros).
pub fn fit_pooled_response(
    portfolio: &Portfolio,
    imputed: &ImputedResponseSet,
    design: &DesignSpec,
    grid: &TreatmentGrid,
    penalty: f64,
    config: &LassoConfig,
) -> Result<PooledLogistic> {
    check_shapes(portfolio, imputed, design)?;
    if imputed.imputations() < 2 {
        return Err(Error::invalid("pooling needs at least 2 imputations"));
    }
    if grid.count() != design.intervals() {
        return Err(Error::invalid("grid and design interval counts differ"));
    }
    let x = design.stacked(portfolio);
    let ys: Vec<Vec<f64>> = (0..imputed.imputations()).map(|m| targets(imputed, Some(m))).collect();
    let fits = fit_penalized_many(&x, &ys, penalty, config)?;
    let names: Vec<String> = std::iter::once(INTERCEPT.to_string())
        .chain(design.names().iter().cloned())
        .collect();
    let estimates: Vec<Vec<f64>> = fits
        .iter()
        .map(|f| {
            std::iter::once(f.intercept)
                .chain(f.coefficients.iter().copied())
                .collect()
        })
        .collect();
    let variances = crate::exec::map_slice(&fits, |f| active_covariance(&x, f, &names))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let active: Vec<usize> = fits.iter().map(|f| f.nonzero()).collect();
    let union = (0..design.width())
        .filter(|&j| fits.iter().any(|f| f.coefficients[j] != 0.0))
        .count();
    if active.iter().any(|&a| a != union) {
        log::info!("active sets differ across imputations ({active:?}); pooling over a union of {union} coefficients");
    }
    Ok(PooledLogistic {
        design: design.clone(),
        grid: grid.clone(),
        penalty,
        names,
        estimate: rubin_combine(&estimates, &variances)?,
        active,
    })
}

/// Portfolio-average churn at one (interval, competitiveness) cell with a
/// delta-method 95% band from the pooled covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub interval: usize,
    pub t: f64,
    pub competitiveness: f64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn churn_surface(model: &PooledLogistic, portfolio: &Portfolio, competitiveness: &[f64]) -> Vec<SurfacePoint> {
    let p = model.names.len();
    let n = portfolio.len() as f64;
    let cells: Vec<(usize, f64)> = (0..model.grid.count())
        .flat_map(|c| competitiveness.iter().map(move |&g| (c, g)))
        .collect();
    crate::exec::map_slice(&cells, |&(c, g)| {
        let mut est = 0.0;
        let mut grad = vec![0.0; p];
        for r in portfolio.records() {
            let row = model.design.row(r, c, g);
            let eta = model.estimate.delta_bar[0]
                + row
                    .iter()
                    .zip(&model.estimate.delta_bar[1..])
                    .map(|(x, b)| x * b)
                    .sum::<f64>();
            let q = sigmoid(eta);
            est += q / n;
            let s = q * (1.0 - q) / n;
            grad[0] += s;
            grad[1..].iter_mut().zip(&row).for_each(|(gj, x)| *gj += s * x);
        }
        let var: f64 = (0..p)
            .map(|u| grad[u] * (0..p).map(|v| model.estimate.var[u][v] * grad[v]).sum::<f64>())
            .sum();
        let half = 1.959_963_984_540_054 * libm::sqrt(var.max(0.0));
        SurfacePoint {
            interval: c,
            t: model.grid.medians()[c],
            competitiveness: g,
            estimate: est,
            lo: (est - half).max(0.0),
            hi: (est + half).min(1.0),
        }
    })
}

pub fn surface_tsv(points: &[SurfacePoint]) -> String {
    let mut out = String::from("t\tcompetitiveness\testimate\tlo\thi\n");
    for s in points {
        out.push_str(&format!(
            "{:.6}\t{:.6}\t{:.8}\t{:.8}\t{:.8}\n",
            s.t, s.competitiveness, s.estimate, s.lo, s.hi
        ));
    }
    out
}
