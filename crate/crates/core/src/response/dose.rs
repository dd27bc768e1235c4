//! Dose-response curves on the generalized propensity score.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::{self, BoostConfig, Ensemble, RoundState};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::Loss;
use crate::portfolio::{PolicyRecord, Portfolio};
use crate::propensity::{ContinuousGps, PropensityModel};
use crate::rng::{keyed, stream};
use crate::stats::{log1p_exp, mean, quantile_sorted, sigmoid};

pub const QUADRATIC_TERMS: [&str; 6] = ["intercept", "gps", "gps^2", "t", "t^2", "gps*t"];

/// `E[Y | T = t, GPS = r]` approximated as
/// `b0 + b1 r + b2 r^2 + b3 t + b4 t^2 + b5 r t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticDr {
    pub coefficients: [f64; 6],
}

impl QuadraticDr {
    fn regressors(t: f64, r: f64) -> [f64; 6] {
        [1.0, r, r * r, t, t * t, r * t]
    }

    /// Unclamped conditional response.
    pub fn raw(&self, t: f64, gps: f64) -> f64 {
        Self::regressors(t, gps)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, b)| x * b)
            .sum()
    }

    pub fn predict(&self, t: f64, gps: f64) -> f64 {
        self.raw(t, gps).clamp(0.0, 1.0)
    }
}

/// Bernoulli boosting model on the features `(t, GPS(t, X))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedDr {
    pub ensemble: Ensemble,
    /// Held-out mean log-loss at the best round.
    pub holdout_loss: f64,
    /// Held-out mean log-loss of the constant training churn rate.
    pub baseline_loss: f64,
}

impl BoostedDr {
    pub fn predict(&self, t: f64, gps: f64) -> f64 {
        sigmoid(self.ensemble.predict_row(&[t, gps])[0])
    }
}

/// Conditional response model on `(t, GPS)`.
pub trait DoseModel {
    /// Response before any clamping.
    fn raw(&self, t: f64, gps: f64) -> f64;

    fn predict(&self, t: f64, gps: f64) -> f64 {
        self.raw(t, gps).clamp(0.0, 1.0)
    }
}

impl DoseModel for QuadraticDr {
    fn raw(&self, t: f64, gps: f64) -> f64 {
        QuadraticDr::raw(self, t, gps)
    }
}

impl DoseModel for BoostedDr {
    fn raw(&self, t: f64, gps: f64) -> f64 {
        BoostedDr::predict(self, t, gps)
    }
}

pub(crate) fn continuous(ps: &PropensityModel) -> Result<&ContinuousGps> {
    match ps {
        PropensityModel::Continuous(c) => Ok(c),
        PropensityModel::Discrete(_) => Err(Error::invalid("dose-response needs a continuous propensity model")),
    }
}

/// OLS of `y` on `[1, gps, gps^2, t, t^2, gps*t]` by twice-orthogonalised
/// Gram-Schmidt, so collinear regressors are caught and named.
pub fn fit_quadratic_dr(t: &[f64], y: &[f64], gps: &[f64]) -> Result<QuadraticDr> {
    let n = t.len();
    if y.len() != n || gps.len() != n {
        return Err(Error::invalid("doses, responses and GPS values must align"));
    }
    if n < 7 {
        return Err(Error::invalid("quadratic dose-response needs at least 7 observations"));
    }
    let cols: Vec<Vec<f64>> = (0..6)
        .map(|k| (0..n).map(|i| QuadraticDr::regressors(t[i], gps[i])[k]).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(6);
    let mut r = [[0.0f64; 6]; 6];
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        for _pass in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let c = dot(qk, &v);
                r[k][j] += c;
                v.iter_mut().zip(qk).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let norm = libm::sqrt(dot(&v, &v));
        let scale = libm::sqrt(dot(col, col));
        if !(norm > 1e-10 * scale) || scale == 0.0 {
            let mut names = vec![QUADRATIC_TERMS[j].to_string()];
            names.extend(
                (0..j)
                    .filter(|&k| r[k][j].abs() > 1e-12 * scale)
                    .map(|k| QUADRATIC_TERMS[k].to_string()),
            );
            return Err(Error::RankDeficient(names));
        }
        r[j][j] = norm;
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let qty: Vec<f64> = q.iter().map(|qk| dot(qk, y)).collect();
    let mut b = [0.0; 6];
    for j in (0..6).rev() {
        let s: f64 = (j + 1..6).map(|k| r[j][k] * b[k]).sum();
        b[j] = (qty[j] - s) / r[j][j];
    }
    Ok(QuadraticDr { coefficients: b })
}

/// Quadratic dose-response on a portfolio's observed doses and GPS values.
pub fn fit_quadratic_dr_portfolio(portfolio: &Portfolio, ps: &PropensityModel) -> Result<QuadraticDr> {
    let gps = continuous(ps)?.gps_at(&portfolio.covariates(), &portfolio.rate_changes())?;
    fit_quadratic_dr(&portfolio.rate_changes(), &portfolio.churn(), &gps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostedDrConfig {
    pub boost: BoostConfig,
    pub holdout_fraction: f64,
}

impl Default for BoostedDrConfig {
    fn default() -> Self {
        BoostedDrConfig {
            boost: BoostConfig {
                eta: 0.05,
                max_depth: 3,
                max_rounds: 2000,
                early_stop_patience: 50,
                ..BoostConfig::default()
            },
            holdout_fraction: 0.2,
        }
    }
}

fn log_loss(y: &[f64], raw: &[f64]) -> f64 {
    y.iter().zip(raw).map(|(yi, s)| log1p_exp(*s) - yi * s).sum::<f64>() / y.len() as f64
}

/// Boosted conditional dose-response on `(T_i, GPS(T_i, X_i))`, early-stopped
/// on the held-out log-loss of a seeded split.
pub fn fit_boosted_dr(portfolio: &Portfolio, ps: &PropensityModel, config: &BoostedDrConfig) -> Result<BoostedDr> {
    let n = portfolio.len();
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut keyed(config.boost.seed, stream::HOLDOUT, 1, 0));
    let h = ((config.holdout_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    let (mut hold, mut fit_rows) = (idx[..h].to_vec(), idx[h..].to_vec());
    hold.sort_unstable();
    fit_rows.sort_unstable();
    fit_boosted_dr_on(portfolio, ps, &config.boost, &fit_rows, &hold)
}

/// Boosted dose-response fit on `fit_rows`, early-stopped on the log-loss of
/// the disjoint `hold` rows.
pub fn fit_boosted_dr_on(
    portfolio: &Portfolio,
    ps: &PropensityModel,
    boost: &BoostConfig,
    fit_rows: &[usize],
    hold: &[usize],
) -> Result<BoostedDr> {
    let n = portfolio.len();
    if fit_rows.is_empty() || hold.is_empty() || fit_rows.iter().chain(hold).any(|&i| i >= n) {
        return Err(Error::invalid("fit and holdout rows must be non-empty and in range"));
    }
    let gps = continuous(ps)?.gps_at(&portfolio.covariates(), &portfolio.rate_changes())?;
    let t = portfolio.rate_changes();
    let y = portfolio.churn();
    let features = |rows: &[usize]| {
        Matrix::new(rows.len(), 2, rows.iter().flat_map(|&i| [t[i], gps[i]]).collect()).expect("two columns")
    };
    let xf = features(fit_rows);
    let xh = features(hold);
    let yf: Vec<f64> = fit_rows.iter().map(|&i| y[i]).collect();
    let yh: Vec<f64> = hold.iter().map(|&i| y[i]).collect();
    let mut hs = Vec::new();
    let mut callback = |s: &RoundState| -> f64 {
        if s.round == 0 {
            hs = vec![s.base_score[0]; xh.rows()];
        }
        if let Some(tree) = s.new_trees.first() {
            for (i, v) in hs.iter_mut().enumerate() {
                *v += s.eta * tree.predict_row(xh.row(i));
            }
        }
        log_loss(&yh, &hs)
    };
    let ensemble = boosting::fit(&xf, &yf, Loss::Bernoulli, boost, Some(&mut callback))?;
    let d = ensemble.diagnostics();
    let holdout_loss = d.metric_history.get(d.best_round).copied().unwrap_or(f64::NAN);
    let rate = mean(&yf).clamp(1e-12, 1.0 - 1e-12);
    let baseline_loss = log_loss(&yh, &vec![libm::log(rate / (1.0 - rate)); yh.len()]);
    Ok(BoostedDr {
        ensemble,
        holdout_loss,
        baseline_loss,
    })
}

fn check_dose(gps: &ContinuousGps, t: f64) -> Result<()> {
    if !gps.bounds.contains(t) {
        return Err(Error::invalid(format!(
            "dose {t} outside [{}, {}]",
            gps.bounds.lower(),
            gps.bounds.upper()
        )));
    }
    Ok(())
}

/// Average dose-response at each dose: the portfolio mean of the model at
/// `(t, GPS(t, X_i))`, clamped to [0, 1] after averaging so the estimate
/// stays linear in the model coefficients.
pub fn avg_dose_response_curve<M: DoseModel + Sync>(
    model: &M,
    portfolio: &Portfolio,
    ps: &PropensityModel,
    doses: &[f64],
) -> Result<Vec<f64>> {
    let c = continuous(ps)?;
    for &t in doses {
        check_dose(c, t)?;
    }
    let f = c.mean(&portfolio.covariates())?;
    exec::map_slice(doses, |&t| {
        let mut s = 0.0;
        for &fi in &f {
            s += model.raw(t, c.density_at(fi, t)?);
        }
        Ok((s / f.len() as f64).clamp(0.0, 1.0))
    })
    .into_iter()
    .collect()
}

pub fn avg_dose_response<M: DoseModel + Sync>(
    model: &M,
    portfolio: &Portfolio,
    ps: &PropensityModel,
    t: f64,
) -> Result<f64> {
    Ok(avg_dose_response_curve(model, portfolio, ps, &[t])?[0])
}

/// Individual response at dose `t` under a (possibly shifted) competitiveness.
pub fn individual_response<M: DoseModel>(
    model: &M,
    gps: &ContinuousGps,
    r: &PolicyRecord,
    t: f64,
    competitiveness: f64,
) -> f64 {
    let f = gps.mean_row(&r.covariates_with(competitiveness));
    let t = t.clamp(gps.bounds.lower(), gps.bounds.upper());
    let density = gps.density_at(f, t).expect("dose clamped into bounds");
    model.predict(t, density)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    /// With `false` every replicate reuses the original data.
    pub resample: bool,
    pub max_attempts: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 200,
            seed: 0,
            resample: true,
            max_attempts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBands {
    pub doses: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
    /// Redraws forced by empty or sparse treatment intervals.
    pub redraws: usize,
}

impl BootstrapBands {
    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\testimate\tlo\thi\n");
        for k in 0..self.doses.len() {
            out.push_str(&format!(
                "{:.6}\t{:.8}\t{:.8}\t{:.8}\n",
                self.doses[k], self.estimate[k], self.lo[k], self.hi[k]
            ));
        }
        out
    }
}

/// Resample of `n` policies drawn with replacement, relabelled `1..=n` so
/// ids stay unique.
pub fn resample_portfolio(portfolio: &Portfolio, seed: u64, replicate: u64, attempt: u64) -> Result<Portfolio> {
    let mut rng = keyed(seed, stream::BOOTSTRAP, replicate, attempt);
    let src = portfolio.records();
    let records = (0..src.len())
        .map(|k| PolicyRecord {
            id: k as u64 + 1,
            ..src[rng.gen_range(0..src.len())].clone()
        })
        .collect();
    Portfolio::new(records)
}

/// Percentile bootstrap of a dose-response curve: `pipeline` refits the GPS
/// and the response model on each replicate and returns the curve on
/// `doses`. Bands are the 2.5% and 97.5% replicate quantiles, widened where
/// needed to contain the full-sample estimate.
pub fn bootstrap_dr<F>(
    portfolio: &Portfolio,
    doses: &[f64],
    config: &BootstrapConfig,
    pipeline: F,
) -> Result<BootstrapBands>
where
    F: Fn(&Portfolio) -> Result<Vec<f64>> + Sync,
{
    if config.resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    let estimate = pipeline(portfolio)?;
    if estimate.len() != doses.len() {
        return Err(Error::invalid("pipeline must return one value per dose"));
    }
    let runs: Vec<Result<(Vec<f64>, usize)>> = exec::map_range(config.resamples, |b| {
        if !config.resample {
            return Ok((pipeline(portfolio)?, 0));
        }
        let mut last = None;
        for attempt in 0..config.max_attempts.max(1) {
            let p = resample_portfolio(portfolio, config.seed, b as u64, attempt as u64)?;
            match pipeline(&p) {
                Ok(curve) => return Ok((curve, attempt)),
                Err(e @ (Error::EmptyInterval(_) | Error::SparseInterval { .. })) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::invalid(format!(
            "bootstrap replicate {b} failed after {} attempts: {}",
            config.max_attempts,
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    });
    let mut replicates = Vec::with_capacity(config.resamples);
    let mut redraws = 0;
    for r in runs {
        let (curve, extra) = r?;
        redraws += extra;
        replicates.push(curve);
    }
    let mut lo = Vec::with_capacity(doses.len());
    let mut hi = Vec::with_capacity(doses.len());
    for (k, &e) in estimate.iter().enumerate() {
        let mut v: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
        v.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&v, 0.025).min(e));
        hi.push(quantile_sorted(&v, 0.975).max(e));
    }
    Ok(BootstrapBands {
        doses: doses.to_vec(),
        estimate,
        lo,
        hi,
        replicates,
        redraws,
    })
}
