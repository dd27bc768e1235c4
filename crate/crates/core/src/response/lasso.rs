//! L1-penalised logistic regression: IRLS outer loop, cyclic coordinate
//! descent with soft thresholding inside, on standardised columns.
//!
//! Objective per fit: `-(1/n) sum [y eta - log(1 + e^eta)] + lambda * sum |b_j|`
//! with `b` on the standardised scale and an unpenalised intercept. Targets
//! may be fractional (averaged potential responses).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{keyed, stream};
use crate::stats::{log1p_exp, mean, sigmoid};

const WEIGHT_FLOOR: f64 = 1e-5;
const MAX_SWEEPS: usize = 100_000;

/// Penalties `e^x` for `x` from 5 down to -20. `step` 0.01 is the
/// published grid (2501 values); the default 0.1 keeps runs short.
pub fn penalty_grid(step: f64) -> Vec<f64> {
    let n = libm::round(25.0 / step) as usize;
    (0..=n).map(|k| libm::exp(5.0 - k as f64 * step)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    /// Descending, positive.
    pub penalties: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Stop the path once the deviance stops moving (relative change below
    /// 1e-5 of the null deviance) with at least one active coefficient.
    pub truncate_path: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            penalties: penalty_grid(0.1),
            folds: 10,
            seed: 0,
            max_iter: 200,
            tol: 1e-8,
            truncate_path: true,
        }
    }
}

/// Coefficients on the original column scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub penalty: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// Mean negative log-likelihood on the training rows.
    pub loss: f64,
}

impl LogisticFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn nonzero(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub fits: Vec<LogisticFit>,
    pub cv_mean: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub min_index: usize,
    pub selected_index: usize,
}

impl LassoPath {
    pub fn selected(&self) -> &LogisticFit {
        &self.fits[self.selected_index]
    }

    pub fn selected_penalty(&self) -> f64 {
        self.selected().penalty
    }

    pub fn min_penalty(&self) -> f64 {
        self.fits[self.min_index].penalty
    }

    /// Columns: penalty, log penalty, nonzero count, CV mean, CV SE.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("penalty\tlog_penalty\tnonzero\tcv_mean\tcv_se\n");
        for (k, f) in self.fits.iter().enumerate() {
            out.push_str(&format!(
                "{:e}\t{:.2}\t{}\t{:.8}\t{:.8}\n",
                f.penalty,
                libm::log(f.penalty),
                f.nonzero(),
                self.cv_mean[k],
                self.cv_se[k]
            ));
        }
        out
    }
}

/// Column-major standardised copy of a design.
struct Standardized {
    cols: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    n: usize,
}

impl Standardized {
    fn new(x: &Matrix, rows: &[usize]) -> Self {
        let n = rows.len();
        let mut cols = Vec::with_capacity(x.cols());
        let mut means = Vec::with_capacity(x.cols());
        let mut sds = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let mut c: Vec<f64> = rows.iter().map(|&i| x.get(i, j)).collect();
            let m = mean(&c);
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let sd = libm::sqrt(var);
            // Constant columns stay zero and never enter the model.
            if sd > 1e-12 * m.abs().max(1.0) {
                c.iter_mut().for_each(|v| *v = (*v - m) / sd);
            } else {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
            cols.push(c);
            means.push(m);
            sds.push(if sd > 1e-12 * m.abs().max(1.0) { sd } else { 0.0 });
        }
        Standardized {
            cols,
            mean: means,
            sd: sds,
            n,
        }
    }

    fn lambda_max(&self, y: &[f64]) -> f64 {
        let ybar = mean(y);
        self.cols
            .iter()
            .map(|c| c.iter().zip(y).map(|(x, yi)| x * (yi - ybar)).sum::<f64>().abs() / self.n as f64)
            .fold(0.0, f64::max)
    }
}

/// Solver state on the standardised scale.
#[derive(Clone)]
struct State {
    b0: f64,
    b: Vec<f64>,
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

fn mean_nll(y: &[f64], eta: &[f64]) -> f64 {
    y.iter().zip(eta).map(|(yi, e)| log1p_exp(*e) - yi * e).sum::<f64>() / y.len() as f64
}

fn solve(s: &Standardized, y: &[f64], lambda: f64, warm: State, max_iter: usize, tol: f64) -> Result<(State, usize)> {
    let n = s.n;
    let nf = n as f64;
    let k = s.cols.len();
    let usable: Vec<bool> = s.sd.iter().map(|&sd| sd > 0.0).collect();
    let mut st = warm;
    let mut eta = vec![st.b0; n];
    for (j, c) in s.cols.iter().enumerate() {
        if st.b[j] != 0.0 {
            eta.iter_mut().zip(c).for_each(|(e, x)| *e += st.b[j] * x);
        }
    }
    let mut w = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut xwx = vec![0.0; k];
    let mut last_change = f64::INFINITY;
    for iter in 1..=max_iter {
        for i in 0..n {
            let p = sigmoid(eta[i]);
            w[i] = (p * (1.0 - p)).max(WEIGHT_FLOOR);
            r[i] = (y[i] - p) / w[i];
        }
        let wsum: f64 = w.iter().sum();
        // Covariance updates: the weighted gradient `q` is kept current
        // through Gram columns computed when a coordinate first moves.
        let mut sr: f64 = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum();
        let mut q = vec![0.0; k];
        let mut wx = vec![0.0; k];
        for j in 0..k {
            if usable[j] {
                let c = &s.cols[j];
                q[j] = c.iter().zip(&r).zip(&w).map(|((x, ri), wi)| wi * x * ri).sum::<f64>() / nf;
                wx[j] = c.iter().zip(&w).map(|(x, wi)| wi * x).sum::<f64>() / nf;
                xwx[j] = c.iter().zip(&w).map(|(x, wi)| wi * x * x).sum::<f64>() / nf;
            } else {
                xwx[j] = 0.0;
            }
        }
        let mut gram: Vec<Option<Vec<f64>>> = vec![None; k];
        let before = st.clone();
        let inner_tol = 0.01 * tol * tol;
        let mut full = true;
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let mut max_change = 0.0f64;
            let d0 = sr / wsum;
            if d0 != 0.0 {
                st.b0 += d0;
                sr = 0.0;
                q.iter_mut().zip(&wx).for_each(|(qj, m)| *qj -= d0 * m);
                max_change = max_change.max(wsum / nf * d0 * d0);
            }
            let mut entered = false;
            for j in 0..k {
                if !usable[j] || (!full && st.b[j] == 0.0) {
                    continue;
                }
                let bj = soft(q[j] + xwx[j] * st.b[j], lambda) / xwx[j];
                let d = bj - st.b[j];
                if d != 0.0 {
                    if st.b[j] == 0.0 {
                        entered = true;
                    }
                    let col = gram[j].get_or_insert_with(|| {
                        let cj = &s.cols[j];
                        (0..k)
                            .map(|l| {
                                if usable[l] {
                                    s.cols[l]
                                        .iter()
                                        .zip(cj)
                                        .zip(&w)
                                        .map(|((x, z), wi)| wi * x * z)
                                        .sum::<f64>()
                                        / nf
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    });
                    q.iter_mut().zip(col.iter()).for_each(|(ql, g)| *ql -= d * g);
                    sr -= d * wx[j] * nf;
                    st.b[j] = bj;
                    max_change = max_change.max(xwx[j] * d * d);
                }
            }
            if max_change < inner_tol {
                if full && !entered {
                    break;
                }
                full = true;
            } else {
                full = false;
            }
            if sweeps > MAX_SWEEPS {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    detail: format!(
                        "coordinate descent did not settle at penalty {lambda:e} (last change {max_change:e})"
                    ),
                });
            }
        }
        eta.iter_mut().for_each(|e| *e = st.b0);
        for (j, c) in s.cols.iter().enumerate() {
            if st.b[j] != 0.0 {
                eta.iter_mut().zip(c).for_each(|(e, x)| *e += st.b[j] * x);
            }
        }
        let change = std::iter::once((st.b0 - before.b0).abs())
            .chain(st.b.iter().zip(&before.b).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        last_change = change;
        if change < tol || !change.is_finite() {
            if !change.is_finite() {
                break;
            }
            return Ok((st, iter));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        detail: format!(
            "IRLS at penalty {lambda:e}: last max coefficient change {last_change:e}, intercept {:.6}, {} active",
            st.b0,
            st.b.iter().filter(|b| **b != 0.0).count()
        ),
    })
}

fn unscale(s: &Standardized, st: &State, penalty: f64, iterations: usize, loss: f64) -> LogisticFit {
    let coefficients: Vec<f64> =
        st.b.iter()
            .zip(&s.sd)
            .map(|(b, sd)| if *sd > 0.0 { b / sd } else { 0.0 })
            .collect();
    let intercept = st.b0 - coefficients.iter().zip(&s.mean).map(|(b, m)| b * m).sum::<f64>();
    LogisticFit {
        penalty,
        intercept,
        coefficients,
        iterations,
        loss,
    }
}

fn check(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::invalid("one target per design row required"));
    }
    if x.rows() < 2 {
        return Err(Error::invalid("logistic fit needs at least 2 rows"));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("logistic targets must lie in [0, 1]"));
    }
    Ok(())
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn start(s: &Standardized, y: &[f64]) -> State {
    let ybar = mean(y).clamp(1e-12, 1.0 - 1e-12);
    State {
        b0: libm::log(ybar / (1.0 - ybar)),
        b: vec![0.0; s.cols.len()],
    }
}

/// Penalised fit at one penalty. `warm` seeds the solver with coefficients
/// on the original scale.
pub fn fit_logistic_penalized(
    x: &Matrix,
    y: &[f64],
    penalty: f64,
    warm: Option<&LogisticFit>,
    config: &LassoConfig,
) -> Result<LogisticFit> {
    check(x, y)?;
    if !(penalty >= 0.0) {
        return Err(Error::invalid("penalty must be non-negative"));
    }
    let s = Standardized::new(x, &all_rows(x.rows()));
    let init = match warm {
        None => start(&s, y),
        Some(f) => {
            let b: Vec<f64> = f.coefficients.iter().zip(&s.sd).map(|(b, sd)| b * sd).collect();
            let b0 = f.intercept + f.coefficients.iter().zip(&s.mean).map(|(b, m)| b * m).sum::<f64>();
            State { b0, b }
        }
    };
    let (st, iters) = solve(&s, y, penalty, init, config.max_iter, config.tol)?;
    let fit = unscale(&s, &st, penalty, iters, 0.0);
    let eta: Vec<f64> = (0..x.rows()).map(|i| fit.linear_predictor(x.row(i))).collect();
    Ok(LogisticFit {
        loss: mean_nll(y, &eta),
        ..fit
    })
}

/// Independent fits of several target vectors against one design at a
/// shared penalty, standardising the design once.
pub(crate) fn fit_penalized_many(
    x: &Matrix,
    ys: &[Vec<f64>],
    penalty: f64,
    config: &LassoConfig,
) -> Result<Vec<LogisticFit>> {
    for y in ys {
        check(x, y)?;
    }
    let s = Standardized::new(x, &all_rows(x.rows()));
    exec::map_range(ys.len(), |m| {
        let y = &ys[m];
        let (st, iters) = solve(&s, y, penalty, start(&s, y), config.max_iter, config.tol)?;
        let fit = unscale(&s, &st, penalty, iters, 0.0);
        let eta: Vec<f64> = (0..x.rows()).map(|i| fit.linear_predictor(x.row(i))).collect();
        Ok(LogisticFit {
            loss: mean_nll(y, &eta),
            ..fit
        })
    })
    .into_iter()
    .collect()
}

/// Warm-started path over `penalties` on the given rows. Returns the fits
/// (possibly truncated) on the original scale.
fn path(
    x: &Matrix,
    y_all: &[f64],
    rows: &[usize],
    penalties: &[f64],
    config: &LassoConfig,
    truncate: bool,
) -> Result<Vec<LogisticFit>> {
    let s = Standardized::new(x, rows);
    let y: Vec<f64> = rows.iter().map(|&i| y_all[i]).collect();
    let mut st = start(&s, &y);
    let null_dev = mean_nll(&y, &vec![st.b0; y.len()]);
    let lmax = s.lambda_max(&y);
    let mut fits = Vec::with_capacity(penalties.len());
    let mut prev_loss = f64::INFINITY;
    for &lambda in penalties {
        let (next, iters) = if lambda >= lmax {
            (st.clone(), 0)
        } else {
            solve(&s, &y, lambda, st.clone(), config.max_iter, config.tol)?
        };
        st = next;
        let fit = unscale(&s, &st, lambda, iters, 0.0);
        let eta: Vec<f64> = rows.iter().map(|&i| fit.linear_predictor(x.row(i))).collect();
        let loss = mean_nll(&y, &eta);
        let active = st.b.iter().any(|b| *b != 0.0);
        fits.push(LogisticFit { loss, ..fit });
        if truncate && active && (prev_loss - loss).abs() < 1e-5 * null_dev {
            break;
        }
        prev_loss = loss;
    }
    Ok(fits)
}

/// Fold of each row: groups (policies) are shuffled with a keyed stream and
/// dealt round-robin, so all rows of a group share a fold.
pub fn group_folds(groups: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut keyed(seed, stream::FOLDS, 0, 0));
    let mut fold_of = std::collections::HashMap::with_capacity(ids.len());
    for (pos, g) in ids.iter().enumerate() {
        fold_of.insert(*g, pos % folds);
    }
    groups.iter().map(|g| fold_of[g]).collect()
}

/// Penalty path with grouped K-fold cross-validation of the mean negative
/// log-likelihood and one-standard-error selection.
pub fn fit_logistic_lasso(x: &Matrix, y: &[f64], groups: &[usize], config: &LassoConfig) -> Result<LassoPath> {
    check(x, y)?;
    if groups.len() != y.len() {
        return Err(Error::invalid("one group per design row required"));
    }
    if config.folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if config.penalties.is_empty()
        || config.penalties.iter().any(|p| !(*p > 0.0))
        || config.penalties.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::invalid("penalty grid must be positive and strictly descending"));
    }
    let fits = path(
        x,
        y,
        &all_rows(x.rows()),
        &config.penalties,
        config,
        config.truncate_path,
    )?;
    let penalties: Vec<f64> = fits.iter().map(|f| f.penalty).collect();
    let fold = group_folds(groups, config.folds, config.seed);
    if (0..config.folds).any(|k| !fold.contains(&k)) {
        return Err(Error::invalid(format!("fewer groups than the {} folds", config.folds)));
    }
    let per_fold: Vec<Result<Vec<f64>>> = exec::map_range(config.folds, |k| {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != k).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == k).collect();
        let fold_fits = path(x, y, &train, &penalties, config, false)?;
        Ok(fold_fits
            .iter()
            .map(|f| {
                let eta: Vec<f64> = test.iter().map(|&i| f.linear_predictor(x.row(i))).collect();
                let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                mean_nll(&yt, &eta)
            })
            .collect())
    });
    let per_fold: Vec<Vec<f64>> = per_fold.into_iter().collect::<Result<_>>()?;
    let kf = config.folds as f64;
    let (cv_mean, cv_se): (Vec<f64>, Vec<f64>) = (0..fits.len())
        .map(|l| {
            let v: Vec<f64> = per_fold.iter().map(|f| f[l]).collect();
            let m = mean(&v);
            let var = v.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (kf - 1.0);
            (m, libm::sqrt(var / kf))
        })
        .unzip();
    let min_index = (0..cv_mean.len())
        .min_by(|&a, &b| cv_mean[a].total_cmp(&cv_mean[b]))
        .expect("non-empty path");
    let bound = cv_mean[min_index] + cv_se[min_index];
    // Penalties descend, so the first index within the bound is the largest.
    let selected_index = (0..=min_index).find(|&l| cv_mean[l] <= bound).unwrap_or(min_index);
    Ok(LassoPath {
        fits,
        cv_mean,
        cv_se,
        min_index,
        selected_index,
    })
}
