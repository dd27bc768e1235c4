//! Gradient-boosted decision trees.
//!
//! Two modes share one tree grower. `SecondOrder` follows the regularised
//! Newton scheme (gradient and hessian per row, `gamma`/`lambda`/`alpha`
//! penalties, column subsampling per tree). `FirstOrder` is classic stochastic
//! gradient boosting: least-squares trees on pseudo-residuals with a Newton
//! line search on the true loss in every leaf.

mod tree;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use tree::{best_split, leaf_weight, DecisionTree, Node, Split, SplitParams};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{self, Loss, TruncationBounds};
use crate::rng::{keyed, stream};
use crate::stats::{logit, mean};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostMode {
    FirstOrder,
    SecondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostConfig {
    pub eta: f64,
    pub max_depth: usize,
    /// Minimum number of instances in each child node.
    pub min_child_weight: usize,
    pub subsample: f64,
    pub colsample: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub max_rounds: usize,
    /// Rounds without metric improvement before stopping; 0 never stops early.
    pub early_stop_patience: usize,
    pub mode: BoostMode,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            eta: 0.3,
            max_depth: 6,
            min_child_weight: 1,
            subsample: 1.0,
            colsample: 1.0,
            gamma: 0.0,
            lambda: 1.0,
            alpha: 0.0,
            max_rounds: 10_000,
            early_stop_patience: 250,
            mode: BoostMode::SecondOrder,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.eta) {
            return Err(Error::invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !unit(self.subsample) || !unit(self.colsample) {
            return Err(Error::invalid("subsample and colsample must lie in (0, 1]"));
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        let first = self.mode == BoostMode::FirstOrder;
        SplitParams {
            lambda: if first { 0.0 } else { self.lambda },
            alpha: if first { 0.0 } else { self.alpha },
            gamma: if first { 0.0 } else { self.gamma },
            min_child: self.min_child_weight.max(1),
            first_order: first,
        }
    }
}

/// What the round callback sees.
pub struct RoundState<'a> {
    /// Rounds completed so far (0 = base score only).
    pub round: usize,
    /// Raw training scores, N x outputs.
    pub scores: &'a Matrix,
    /// Trees added this round, one per output (empty at round 0).
    pub new_trees: &'a [DecisionTree],
    pub base_score: &'a [f64],
    pub eta: f64,
}

/// Metric hook; lower is better.
pub type RoundCallback<'a> = dyn FnMut(&RoundState) -> f64 + 'a;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rounds_run: usize,
    pub best_round: usize,
    pub metric_history: Vec<f64>,
    pub clamped_hessians: u64,
}

/// A fitted boosting model: `base + eta * sum(trees)` per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    format_version: u32,
    loss: Loss,
    n_features: usize,
    #[serde(with = "decimal::vec")]
    base_score: Vec<f64>,
    #[serde(with = "decimal")]
    eta: f64,
    /// `trees[round][output]`.
    trees: Vec<Vec<DecisionTree>>,
    config: BoostConfig,
    diagnostics: FitDiagnostics,
}

impl Ensemble {
    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn outputs(&self) -> usize {
        self.loss.outputs()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn base_score(&self) -> &[f64] {
        &self.base_score
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[Vec<DecisionTree>] {
        &self.trees
    }

    pub fn config(&self) -> &BoostConfig {
        &self.config
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    /// Raw scores of one feature row, one per output.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.base_score.clone();
        for round in &self.trees {
            for (o, t) in out.iter_mut().zip(round) {
                *o += self.eta * t.predict_row(x);
            }
        }
        out
    }

    /// Raw scores, N x outputs.
    pub fn predict_raw(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features {
            return Err(Error::FeatureMismatch {
                expected: self.n_features,
                got: x.cols(),
            });
        }
        let k = self.outputs();
        let rows = exec::map_range(x.rows(), |i| self.predict_row(x.row(i)));
        Matrix::new(x.rows(), k, rows.into_iter().flatten().collect())
    }

    /// Raw scores of a single-output model.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.outputs() != 1 {
            return Err(Error::invalid("predict on a multi-output model; use predict_raw"));
        }
        Ok(self.predict_raw(x)?.as_slice().to_vec())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Ensemble = serde_json::from_str(s)?;
        if e.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                e.format_version
            )));
        }
        if e.base_score.len() != e.outputs() || e.trees.iter().any(|r| r.len() != e.outputs()) {
            return Err(Error::Format("tree count does not match loss outputs".into()));
        }
        for t in e.trees.iter().flatten() {
            t.validate()?;
            if t.max_feature().is_some_and(|f| f >= e.n_features) {
                return Err(Error::Format("split on a feature beyond n_features".into()));
            }
        }
        Ok(e)
    }
}

/// Per-row gradients and hessians for every output, row-major N x outputs.
struct Derivatives {
    grad: Vec<Vec<f64>>,
    hess: Vec<Vec<f64>>,
    clamped: u64,
}

fn check_targets(y: &[f64], loss: &Loss) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        let ok = match *loss {
            Loss::SquaredError => v.is_finite(),
            Loss::Bernoulli => (0.0..=1.0).contains(&v),
            Loss::Multinoulli { classes } => v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes,
            Loss::TruncatedGaussian { lower, upper } => v >= lower && v <= upper,
        };
        if !ok {
            return Err(Error::Row {
                row: i + 1,
                message: format!("target {v} is not valid for loss {loss:?}"),
            });
        }
    }
    if let Loss::Multinoulli { classes } = loss {
        if *classes < 2 {
            return Err(Error::invalid("multinoulli needs at least 2 classes"));
        }
    }
    Ok(())
}

fn bounds_of(loss: &Loss) -> TruncationBounds {
    loss.bounds().expect("truncated loss has bounds")
}

fn base_score(y: &[f64], loss: &Loss) -> Result<Vec<f64>> {
    Ok(match *loss {
        Loss::SquaredError => vec![mean(y)],
        Loss::Bernoulli => vec![logit(mean(y).clamp(1e-12, 1.0 - 1e-12))],
        Loss::Multinoulli { classes } => {
            let mut counts = vec![0.0; classes];
            for &v in y {
                counts[v as usize] += 1.0;
            }
            let n = y.len() as f64;
            counts.iter().map(|c| libm::log((c / n).max(1e-12))).collect()
        }
        Loss::TruncatedGaussian { .. } => {
            let b = bounds_of(loss);
            let sigma = losses::sigma_hat(y)?;
            let total = |f: f64| -> Result<(f64, f64, f64)> {
                let mut acc = (0.0, 0.0, 0.0);
                for &t in y {
                    let e = losses::truncated_gaussian(t, f, sigma, &b)?;
                    acc.0 += e.value;
                    acc.1 += e.grad;
                    acc.2 += e.hess;
                }
                Ok(acc)
            };
            let mut f = mean(y);
            let (mut value, mut g, mut h) = total(f)?;
            for _ in 0..50 {
                let mut step = -g / h;
                if step.abs() < 1e-14 * (1.0 + f.abs()) {
                    break;
                }
                // Halve until the loss does not increase.
                loop {
                    match total(f + step) {
                        Ok(next) if next.0 <= value => {
                            f += step;
                            (value, g, h) = next;
                            break;
                        }
                        _ if step.abs() > 1e-16 => step *= 0.5,
                        _ => return Ok(vec![f]),
                    }
                }
            }
            vec![f]
        }
    })
}

fn derivatives(y: &[f64], scores: &Matrix, loss: &Loss, sigma: f64) -> Result<Derivatives> {
    let k = loss.outputs();
    let rows = exec::map_range(y.len(), |i| -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let s = scores.row(i);
        Ok(match *loss {
            Loss::SquaredError => {
                let e = losses::squared_error(y[i], s[0]);
                (vec![e.grad], vec![e.hess], false)
            }
            Loss::Bernoulli => {
                let e = losses::bernoulli(y[i], s[0]);
                (vec![e.grad], vec![e.hess], false)
            }
            Loss::Multinoulli { .. } => {
                let e = losses::multinoulli(y[i] as usize, s);
                (e.grad, e.hess, false)
            }
            Loss::TruncatedGaussian { .. } => {
                let (e, c) = losses::truncated_gaussian_flagged(y[i], s[0], sigma, &bounds_of(loss))?;
                (vec![e.grad], vec![e.hess], c)
            }
        })
    });
    let mut d = Derivatives {
        grad: vec![Vec::with_capacity(y.len()); k],
        hess: vec![Vec::with_capacity(y.len()); k],
        clamped: 0,
    };
    for r in rows {
        let (g, h, c) = r?;
        for o in 0..k {
            d.grad[o].push(g[o]);
            d.hess[o].push(h[o]);
        }
        d.clamped += c as u64;
    }
    Ok(d)
}

fn mean_loss(y: &[f64], scores: &Matrix, loss: &Loss, sigma: f64) -> Result<f64> {
    let vals = exec::map_range(y.len(), |i| -> Result<f64> {
        let s = scores.row(i);
        Ok(match *loss {
            Loss::SquaredError => losses::squared_error(y[i], s[0]).value,
            Loss::Bernoulli => losses::bernoulli(y[i], s[0]).value,
            Loss::Multinoulli { .. } => losses::multinoulli(y[i] as usize, s).value,
            Loss::TruncatedGaussian { .. } => losses::truncated_gaussian(y[i], s[0], sigma, &bounds_of(loss))?.value,
        })
    });
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(total / y.len() as f64)
}

fn residual_sigma(y: &[f64], scores: &Matrix) -> Result<f64> {
    let r: Vec<f64> = y.iter().enumerate().map(|(i, t)| t - scores.get(i, 0)).collect();
    losses::sigma_hat(&r)
}

/// Newton line search on the true loss for output `o` over the leaf rows.
fn line_search(rows: &[u32], y: &[f64], scores: &Matrix, loss: &Loss, sigma: f64, o: usize) -> Result<f64> {
    if let Loss::SquaredError = loss {
        let g: f64 = rows.iter().map(|&r| scores.get(r as usize, 0) - y[r as usize]).sum();
        return Ok(-g / rows.len() as f64);
    }
    let mut gamma = 0.0;
    for _ in 0..10 {
        let (mut g, mut h) = (0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            let s = scores.row(r);
            let e = match *loss {
                Loss::Bernoulli => losses::bernoulli(y[r], s[0] + gamma),
                Loss::TruncatedGaussian { .. } => {
                    losses::truncated_gaussian(y[r], s[0] + gamma, sigma, &bounds_of(loss))?
                }
                Loss::Multinoulli { .. } => {
                    let mut shifted = s.to_vec();
                    shifted[o] += gamma;
                    let m = losses::multinoulli(y[r] as usize, &shifted);
                    losses::LossEval {
                        value: m.value,
                        grad: m.grad[o],
                        hess: m.hess[o],
                    }
                }
                Loss::SquaredError => unreachable!(),
            };
            g += e.grad;
            h += e.hess;
        }
        if !(h > 1e-300) {
            break;
        }
        let step = -g / h;
        gamma += step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    Ok(gamma)
}

fn sample_rows(n: usize, subsample: f64, seed: u64, round: usize) -> Vec<u32> {
    if subsample >= 1.0 {
        return (0..n as u32).collect();
    }
    let m = ((subsample * n as f64).floor() as usize).clamp(1, n);
    let mut rng = keyed(seed, stream::BOOST_ROWS, round as u64, 0);
    let mut v: Vec<u32> = sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect();
    v.sort_unstable();
    v
}

fn sample_cols(k: usize, cfg: &BoostConfig, round: usize) -> Vec<usize> {
    if cfg.mode == BoostMode::FirstOrder || cfg.colsample >= 1.0 {
        return (0..k).collect();
    }
    let m = ((cfg.colsample * k as f64).round() as usize).clamp(1, k);
    let mut rng = keyed(cfg.seed, stream::BOOST_COLS, round as u64, 0);
    let mut v = sample(&mut rng, k, m).into_vec();
    v.sort_unstable();
    v
}

/// Fits an ensemble to `y` under `loss`.
///
/// The callback, if any, is called after the base score is set (round 0) and
/// after every round; without one the metric is the mean training loss.
/// The returned ensemble is truncated at the best-metric round.
pub fn fit(
    x: &Matrix,
    y: &[f64],
    loss: Loss,
    config: &BoostConfig,
    mut callback: Option<&mut RoundCallback>,
) -> Result<Ensemble> {
    config.validate()?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::invalid("boosting needs at least 2 rows"));
    }
    if y.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} rows", y.len())));
    }
    check_targets(y, &loss)?;
    let k_out = loss.outputs();
    let base = base_score(y, &loss)?;
    let columns = tree::column_major(x);
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let order: Vec<Vec<u32>> = exec::map_slice(&columns, |c| tree::argsort(c, &all_rows));
    let params = config.split_params();

    let mut scores = Matrix::new(n, k_out, base.iter().copied().cycle().take(n * k_out).collect())?;
    let is_truncated = matches!(loss, Loss::TruncatedGaussian { .. });
    let mut sigma = if is_truncated { residual_sigma(y, &scores)? } else { 1.0 };

    let mut metric = |round: usize, scores: &Matrix, new_trees: &[DecisionTree], sigma: f64| -> Result<f64> {
        match callback.as_mut() {
            Some(cb) => Ok(cb(&RoundState {
                round,
                scores,
                new_trees,
                base_score: &base,
                eta: config.eta,
            })),
            None => mean_loss(y, scores, &loss, sigma),
        }
    };

    let mut diagnostics = FitDiagnostics::default();
    let first = metric(0, &scores, &[], sigma)?;
    diagnostics.metric_history.push(first);
    let mut best = (first, 0usize);
    let mut trees: Vec<Vec<DecisionTree>> = Vec::new();

    for round in 1..=config.max_rounds {
        if is_truncated {
            sigma = residual_sigma(y, &scores)?;
        }
        let d = derivatives(y, &scores, &loss, sigma)?;
        diagnostics.clamped_hessians += d.clamped;
        let rows = sample_rows(n, config.subsample, config.seed, round);
        let features = sample_cols(x.cols(), config, round);
        let in_sample = {
            let mut m = vec![false; n];
            rows.iter().for_each(|&r| m[r as usize] = true);
            m
        };
        let sorted: Vec<Vec<u32>> = features
            .iter()
            .map(|&k| order[k].iter().copied().filter(|&r| in_sample[r as usize]).collect())
            .collect();

        let mut round_trees = Vec::with_capacity(k_out);
        for o in 0..k_out {
            let (grad, hess) = (&d.grad[o], &d.hess[o]);
            let tree = match config.mode {
                BoostMode::SecondOrder => tree::grow(
                    &columns,
                    &features,
                    sorted.clone(),
                    grad,
                    hess,
                    &params,
                    config.max_depth,
                    |_, g, h| leaf_weight(g, h, config.lambda, config.alpha),
                )?,
                BoostMode::FirstOrder => tree::grow(
                    &columns,
                    &features,
                    sorted.clone(),
                    grad,
                    hess,
                    &params,
                    config.max_depth,
                    |leaf, _, _| line_search(leaf, y, &scores, &loss, sigma, o),
                )?,
            };
            round_trees.push(tree);
        }
        let eta = config.eta;
        let k = k_out;
        {
            let trees_ref = &round_trees;
            let cols = x.cols();
            let xs = x.as_slice();
            let mut data = scores.as_slice().to_vec();
            exec::for_each_chunk_mut(&mut data, k * 1024, |ci, chunk| {
                for (j, row) in chunk.chunks_mut(k).enumerate() {
                    let i = ci * 1024 + j;
                    let xr = &xs[i * cols..(i + 1) * cols];
                    for (o, t) in trees_ref.iter().enumerate() {
                        row[o] += eta * t.predict_row(xr);
                    }
                }
            });
            scores = Matrix::new(n, k, data)?;
        }
        let m = metric(round, &scores, &round_trees, sigma)?;
        trees.push(round_trees);
        diagnostics.metric_history.push(m);
        diagnostics.rounds_run = round;
        if m < best.0 {
            best = (m, round);
        }
        if config.early_stop_patience > 0 && round - best.1 >= config.early_stop_patience {
            break;
        }
    }
    diagnostics.best_round = best.1;
    trees.truncate(best.1);
    log::debug!(
        "boosting: {} rounds run, best round {}, metric {:.6}",
        diagnostics.rounds_run,
        diagnostics.best_round,
        best.0
    );
    Ok(Ensemble {
        format_version: FORMAT_VERSION,
        loss,
        n_features: x.cols(),
        base_score: base,
        eta: config.eta,
        trees,
        config: config.clone(),
        diagnostics,
    })
}

/// Shortest round-trip decimal strings for floats in model files.
pub(crate) mod decimal {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }

    pub mod vec {
        use serde::{de::Error as _, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&x.to_string())?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| s.parse().map_err(D::Error::custom))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BoostConfig {
        BoostConfig {
            max_rounds: 20,
            early_stop_patience: 0,
            ..BoostConfig::default()
        }
    }

    #[test]
    fn depth_zero_predicts_base() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = [1.0, 0.0, 0.0, 0.0];
        let cfg = BoostConfig {
            eta: 1.0,
            max_depth: 0,
            lambda: 0.0,
            ..quick()
        };
        let e = fit(&x, &y, Loss::Bernoulli, &cfg, None).unwrap();
        assert_eq!(e.base_score()[0], logit(0.25));
        for p in e.predict(&x).unwrap() {
            assert!((p - logit(0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x = Matrix::from_rows(
            &(0..30)
                .map(|i| vec![i as f64 * 0.1, (i % 7) as f64 / 3.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let y: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 / 7.0).collect();
        let e = fit(&x, &y, Loss::SquaredError, &quick(), None).unwrap();
        let s = e.to_json().unwrap();
        let back = Ensemble::from_json(&s).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn rejects_bad_targets_and_features() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(fit(&x, &[0.0, 2.0], Loss::Bernoulli, &quick(), None).is_err());
        assert!(fit(&x, &[0.0, 2.0], Loss::Multinoulli { classes: 2 }, &quick(), None).is_err());
        let e = fit(&x, &[0.0, 1.0], Loss::Bernoulli, &quick(), None).unwrap();
        let wide = Matrix::zeros(2, 3);
        assert!(matches!(e.predict(&wide), Err(Error::FeatureMismatch { .. })));
    }
}
