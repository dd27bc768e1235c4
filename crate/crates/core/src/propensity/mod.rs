//! Discrete propensity scores and continuous generalized propensity scores.
//!
//! Both models are boosted ensembles on the reference-coded covariates and
//! both stop early on ASAM, evaluated on the balance covariates.

mod balance;
mod convergence;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use balance::{BalanceData, BalanceReport, CovariateBalance, IntervalBalance, PI_FLOOR};
pub use convergence::{convergence_study, ConvergenceRow};

use crate::boosting::{self, BoostConfig, Ensemble, RoundState};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{self, softmax, Loss, TruncationBounds};
use crate::portfolio::{balance_covariate_names, Portfolio, TreatmentGrid};
use crate::rng::{keyed, stream};
use crate::stats::{norm_mass, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EarlyStopMetric {
    /// ASAM on the training rows, every round.
    TrainingAsam,
    /// ASAM on a seeded holdout; the model is fit on the remaining rows.
    HoldoutAsam { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsConfig {
    pub boost: BoostConfig,
    pub early_stop: EarlyStopMetric,
}

impl Default for PsConfig {
    fn default() -> Self {
        PsConfig {
            boost: BoostConfig::default(),
            early_stop: EarlyStopMetric::TrainingAsam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePs {
    pub ensemble: Ensemble,
    pub grid: TreatmentGrid,
}

/// Truncated-Gaussian mean model with a global and per-interval scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousGps {
    pub ensemble: Ensemble,
    pub sigma: f64,
    pub interval_sigma: Vec<f64>,
    pub bounds: TruncationBounds,
    pub grid: TreatmentGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityModel {
    Discrete(DiscretePs),
    Continuous(ContinuousGps),
}

/// Interval edges with the outer edges moved to the truncation bounds.
fn mass_edges(grid: &TreatmentGrid, bounds: &TruncationBounds) -> Vec<f64> {
    let mut e = grid.boundaries().to_vec();
    e[0] = bounds.lower();
    let last = e.len() - 1;
    e[last] = bounds.upper();
    e
}

/// Homoskedastic interval masses of a truncated normal with mean `f`.
fn interval_masses(f: f64, sigma: f64, edges: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = edges.iter().map(|e| (e - f) / sigma).collect();
    let total = norm_mass(z[0], z[z.len() - 1]);
    if !(total > 0.0) {
        // Far outside the support: all mass in the nearest end interval.
        let mut m = vec![0.0; edges.len() - 1];
        let idx = if f < edges[0] { 0 } else { m.len() - 1 };
        m[idx] = 1.0;
        return m;
    }
    z.windows(2).map(|w| norm_mass(w[0], w[1]) / total).collect()
}

impl DiscretePs {
    /// N x C class probabilities.
    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        let raw = self.ensemble.predict_raw(x)?;
        let c = raw.cols();
        let rows = exec::map_range(raw.rows(), |i| softmax(raw.row(i)));
        Matrix::new(raw.rows(), c, rows.into_iter().flatten().collect())
    }
}

impl ContinuousGps {
    pub fn mean(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.ensemble.predict(x)
    }

    pub fn mean_row(&self, x: &[f64]) -> f64 {
        self.ensemble.predict_row(x)[0]
    }

    /// Model-implied probability of each interval at mean `f`.
    pub fn masses_at(&self, f: f64) -> Vec<f64> {
        interval_masses(f, self.sigma, &mass_edges(&self.grid, &self.bounds))
    }

    /// Piecewise GPS density at dose `t` given mean `f`: on interval `c` a
    /// truncated normal with scale `sigma_c`, renormalised to the interval's
    /// homoskedastic mass.
    pub fn density_at(&self, f: f64, t: f64) -> Result<f64> {
        if !self.bounds.contains(t) {
            return Err(Error::invalid(format!(
                "dose {t} outside [{}, {}]",
                self.bounds.lower(),
                self.bounds.upper()
            )));
        }
        let edges = mass_edges(&self.grid, &self.bounds);
        let c = match self.grid.category_of(t) {
            Some(c) => c,
            None if t < self.grid.lower() => 0,
            None => self.grid.count() - 1,
        };
        let w = interval_masses(f, self.sigma, &edges)[c];
        let s = self.interval_sigma[c];
        let piece = norm_mass((edges[c] - f) / s, (edges[c + 1] - f) / s);
        if w == 0.0 || !(piece > 0.0) {
            return Ok(0.0);
        }
        Ok(w * norm_pdf((t - f) / s) / (s * piece))
    }

    /// GPS of every row at a common dose `t`.
    pub fn gps(&self, x: &Matrix, t: f64) -> Result<Vec<f64>> {
        let f = self.mean(x)?;
        f.iter().map(|&f| self.density_at(f, t)).collect()
    }

    /// GPS of every row at its own dose.
    pub fn gps_at(&self, x: &Matrix, t: &[f64]) -> Result<Vec<f64>> {
        let f = self.mean(x)?;
        f.iter().zip(t).map(|(&f, &t)| self.density_at(f, t)).collect()
    }
}

impl PropensityModel {
    pub fn grid(&self) -> &TreatmentGrid {
        match self {
            PropensityModel::Discrete(d) => &d.grid,
            PropensityModel::Continuous(c) => &c.grid,
        }
    }

    /// `pi(t_c, X_i)` for every row and interval. For the continuous model
    /// this is the interval's probability mass.
    pub fn interval_scores(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            PropensityModel::Discrete(d) => d.probabilities(x),
            PropensityModel::Continuous(c) => {
                let f = c.mean(x)?;
                let k = c.grid.count();
                let rows = exec::map_slice(&f, |&f| c.masses_at(f));
                Matrix::new(f.len(), k, rows.into_iter().flatten().collect())
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PropensityModel = serde_json::from_str(s)?;
        let e = match &m {
            PropensityModel::Discrete(d) => &d.ensemble,
            PropensityModel::Continuous(c) => &c.ensemble,
        };
        // Re-run the ensemble's own format checks.
        Ensemble::from_json(&serde_json::to_string(e)?)?;
        Ok(m)
    }
}

/// Balance data of a portfolio on a grid.
pub fn balance_data(portfolio: &Portfolio, grid: &TreatmentGrid) -> Result<BalanceData> {
    let cats = grid.categories(&portfolio.rate_changes())?;
    BalanceData::new(
        portfolio.balance_covariates(),
        balance_covariate_names(),
        cats,
        grid.count(),
    )
}

/// Rows for fitting and rows for the early-stopping metric.
fn split_rows(n: usize, metric: &EarlyStopMetric, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    match *metric {
        EarlyStopMetric::TrainingAsam => {
            let all: Vec<usize> = (0..n).collect();
            Ok((all.clone(), all))
        }
        EarlyStopMetric::HoldoutAsam { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut keyed(seed, stream::HOLDOUT, 0, 0));
            let h = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut hold = idx[..h].to_vec();
            let mut fit = idx[h..].to_vec();
            hold.sort_unstable();
            fit.sort_unstable();
            Ok((fit, hold))
        }
    }
}

/// Tracks raw scores on the metric rows, either reading the training scores
/// directly or accumulating the new trees on holdout rows.
struct MetricScores {
    holdout: Option<(Matrix, Matrix)>,
}

impl MetricScores {
    fn new(x: &Matrix, fit_rows: &[usize], metric_rows: &[usize]) -> Self {
        if fit_rows == metric_rows {
            MetricScores { holdout: None }
        } else {
            MetricScores {
                holdout: Some((x.select_rows(metric_rows), Matrix::zeros(0, 0))),
            }
        }
    }

    fn update(&mut self, s: &RoundState) -> Matrix {
        match &mut self.holdout {
            None => s.scores.clone(),
            Some((x, scores)) => {
                if s.round == 0 {
                    let k = s.base_score.len();
                    *scores = Matrix::new(x.rows(), k, s.base_score.repeat(x.rows())).expect("shape");
                }
                for i in 0..x.rows() {
                    for (o, t) in s.new_trees.iter().enumerate() {
                        let v = scores.get(i, o) + s.eta * t.predict_row(x.row(i));
                        scores.set(i, o, v);
                    }
                }
                scores.clone()
            }
        }
    }
}

fn subset_balance(portfolio: &Portfolio, grid: &TreatmentGrid, rows: &[usize]) -> Result<BalanceData> {
    let p = portfolio.subset(rows)?;
    balance_data(&p, grid)
}

/// Multinoulli propensity model over the grid's intervals.
pub fn fit_discrete_ps(portfolio: &Portfolio, grid: &TreatmentGrid, config: &PsConfig) -> Result<PropensityModel> {
    let (fit_rows, metric_rows) = split_rows(portfolio.len(), &config.early_stop, config.boost.seed)?;
    fit_discrete_ps_on(portfolio, grid, config, &fit_rows, &metric_rows)
}

fn check_rows(n: usize, fit_rows: &[usize], metric_rows: &[usize]) -> Result<()> {
    if fit_rows.is_empty() || metric_rows.is_empty() {
        return Err(Error::invalid("fit and metric rows must be non-empty"));
    }
    if fit_rows.iter().chain(metric_rows).any(|&i| i >= n) {
        return Err(Error::invalid("row index out of range"));
    }
    Ok(())
}

/// Discrete PS fit on `fit_rows`, early-stopped on the ASAM of `metric_rows`
/// (ignoring `config.early_stop`). Passing the same rows twice gives the
/// training-ASAM fit.
pub fn fit_discrete_ps_on(
    portfolio: &Portfolio,
    grid: &TreatmentGrid,
    config: &PsConfig,
    fit_rows: &[usize],
    metric_rows: &[usize],
) -> Result<PropensityModel> {
    check_rows(portfolio.len(), fit_rows, metric_rows)?;
    let cats = grid.categories(&portfolio.rate_changes())?;
    let mut occupancy = vec![0usize; grid.count()];
    for &i in fit_rows {
        occupancy[cats[i]] += 1;
    }
    if let Some(c) = occupancy.iter().position(|&n| n == 0) {
        return Err(Error::EmptyInterval(c));
    }
    let x = portfolio.covariates();
    let balance = subset_balance(portfolio, grid, metric_rows)?;
    let mut tracker = MetricScores::new(&x, fit_rows, metric_rows);
    let mut failure: Option<Error> = None;
    let mut callback = |s: &RoundState| -> f64 {
        let raw = tracker.update(s);
        let c = raw.cols();
        let probs: Vec<f64> = (0..raw.rows()).flat_map(|i| softmax(raw.row(i))).collect();
        let probs = Matrix::new(raw.rows(), c, probs).expect("shape");
        match balance.overall(&probs) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let xf = x.select_rows(fit_rows);
    let yf: Vec<f64> = fit_rows.iter().map(|&i| cats[i] as f64).collect();
    let ensemble = boosting::fit(
        &xf,
        &yf,
        Loss::Multinoulli { classes: grid.count() },
        &config.boost,
        Some(&mut callback),
    )?;
    if let Some(e) = failure {
        log::warn!("ASAM evaluation failed during discrete PS fit: {e}");
    }
    Ok(PropensityModel::Discrete(DiscretePs {
        ensemble,
        grid: grid.clone(),
    }))
}

/// Continuous GPS: boosted truncated-Gaussian mean model plus per-interval
/// residual scales.
pub fn fit_continuous_gps(
    portfolio: &Portfolio,
    grid: &TreatmentGrid,
    bounds: TruncationBounds,
    config: &PsConfig,
) -> Result<PropensityModel> {
    let (fit_rows, metric_rows) = split_rows(portfolio.len(), &config.early_stop, config.boost.seed)?;
    fit_continuous_gps_on(portfolio, grid, bounds, config, &fit_rows, &metric_rows)
}

/// Continuous GPS fit on `fit_rows`, early-stopped on the ASAM of
/// `metric_rows`. Residual scales come from the fit rows.
pub fn fit_continuous_gps_on(
    portfolio: &Portfolio,
    grid: &TreatmentGrid,
    bounds: TruncationBounds,
    config: &PsConfig,
    fit_rows: &[usize],
    metric_rows: &[usize],
) -> Result<PropensityModel> {
    check_rows(portfolio.len(), fit_rows, metric_rows)?;
    let t = portfolio.rate_changes();
    if let Some(i) = t.iter().position(|&v| !bounds.contains(v)) {
        return Err(Error::Row {
            row: i + 1,
            message: format!("rate change {} outside truncation bounds", t[i]),
        });
    }
    let cats = grid.categories(&t)?;
    let x = portfolio.covariates();
    let balance = subset_balance(portfolio, grid, metric_rows)?;
    let edges = mass_edges(grid, &bounds);
    let t_metric: Vec<f64> = metric_rows.iter().map(|&i| t[i]).collect();
    let mut tracker = MetricScores::new(&x, fit_rows, metric_rows);
    let mut failure: Option<Error> = None;
    let mut callback = |s: &RoundState| -> f64 {
        let f = tracker.update(s);
        let resid: Vec<f64> = t_metric.iter().enumerate().map(|(i, t)| t - f.get(i, 0)).collect();
        let result = losses::sigma_hat(&resid).and_then(|sigma| {
            let rows: Vec<f64> = (0..f.rows())
                .flat_map(|i| interval_masses(f.get(i, 0), sigma, &edges))
                .collect();
            balance.overall(&Matrix::new(f.rows(), edges.len() - 1, rows)?)
        });
        match result {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let xf = x.select_rows(fit_rows);
    let tf: Vec<f64> = fit_rows.iter().map(|&i| t[i]).collect();
    let ensemble = boosting::fit(&xf, &tf, Loss::truncated(bounds), &config.boost, Some(&mut callback))?;
    if let Some(e) = failure {
        log::warn!("ASAM evaluation failed during GPS fit: {e}");
    }
    let f = ensemble.predict(&xf)?;
    let resid: Vec<f64> = tf.iter().zip(&f).map(|(t, f)| t - f).collect();
    let sigma = losses::sigma_hat(&resid)?;
    let mut per = vec![Vec::new(); grid.count()];
    for (r, &i) in resid.iter().zip(fit_rows) {
        per[cats[i]].push(*r);
    }
    let mut interval_sigma = Vec::with_capacity(grid.count());
    for (c, r) in per.iter().enumerate() {
        if r.len() < 2 {
            return Err(Error::SparseInterval {
                interval: c,
                count: r.len(),
                needed: 2,
            });
        }
        interval_sigma.push(losses::sigma_hat(r)?);
    }
    Ok(PropensityModel::Continuous(ContinuousGps {
        ensemble,
        sigma,
        interval_sigma,
        bounds,
        grid: grid.clone(),
    }))
}

/// Balance report of a fitted model on a portfolio.
pub fn asam(portfolio: &Portfolio, ps: &PropensityModel, grid: &TreatmentGrid) -> Result<BalanceReport> {
    let data = balance_data(portfolio, grid)?;
    let scores = ps.interval_scores(&portfolio.covariates())?;
    if scores.cols() != grid.count() {
        return Err(Error::invalid("model and grid interval counts differ"));
    }
    let labels: Vec<String> = (0..grid.count()).map(|c| grid.label(c)).collect();
    data.report(&scores, &labels)
}
