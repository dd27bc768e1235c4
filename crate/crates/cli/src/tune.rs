//! Sequential hyperparameter search with K-fold cross-validation.
//!
//! The grid is searched stage by stage: learning rate with the tree
//! parameters, then the stochastic features, then the regularization
//! penalties. Within a stage every combination is tried; the best values are
//! frozen before the next stage starts.

use serde::{Deserialize, Serialize};

use renewal_core::boosting::BoostConfig;
use renewal_core::exec;
use renewal_core::response::group_folds;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneGrid {
    pub eta: Vec<f64>,
    pub max_depth: Vec<usize>,
    pub min_child_weight: Vec<usize>,
    pub subsample: Vec<f64>,
    pub colsample: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            eta: vec![0.05, 0.1, 0.3],
            max_depth: vec![1, 2, 4],
            min_child_weight: vec![1, 10],
            subsample: vec![0.5, 1.0],
            colsample: vec![0.5, 1.0],
            gamma: vec![0.0, 1.0],
            lambda: vec![1.0, 10.0],
            alpha: vec![0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub folds: usize,
    pub grid: TuneGrid,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            folds: 10,
            grid: TuneGrid::default(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.folds < 2 {
            return Err(CliError::Validation("tune.folds must be at least 2".into()));
        }
        let g = &self.grid;
        let sizes = [
            ("eta", g.eta.len()),
            ("max_depth", g.max_depth.len()),
            ("min_child_weight", g.min_child_weight.len()),
            ("subsample", g.subsample.len()),
            ("colsample", g.colsample.len()),
            ("gamma", g.gamma.len()),
            ("lambda", g.lambda.len()),
            ("alpha", g.alpha.len()),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return Err(CliError::Validation(format!("tune.grid.{name} is empty")));
        }
        Ok(())
    }
}

/// Held-out score of one fold (lower is better) and the boosting rounds kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub metric: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    /// 1 = learning rate and tree parameters, 2 = stochastic features,
    /// 3 = regularization.
    pub stage: usize,
    pub config: BoostConfig,
    pub folds: Vec<FoldScore>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub metric: String,
    pub best: BoostConfig,
    pub rows: Vec<TuneRow>,
    /// Fold fits actually run; repeated candidates are scored once.
    pub evaluations: usize,
}

impl TuneReport {
    pub fn to_tsv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.folds.len());
        let mut out = String::from(
            "stage\teta\tmax_depth\tmin_child_weight\tsubsample\tcolsample\tgamma\tlambda\talpha\tmean\tstd_error\tmean_rounds",
        );
        for f in 1..=k {
            out.push_str(&format!("\tfold_{f}"));
        }
        out.push_str("\tselected\n");
        for r in &self.rows {
            let c = &r.config;
            let rounds = r.folds.iter().map(|f| f.rounds as f64).sum::<f64>() / r.folds.len() as f64;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.8}\t{:.8}\t{:.1}",
                r.stage,
                c.eta,
                c.max_depth,
                c.min_child_weight,
                c.subsample,
                c.colsample,
                c.gamma,
                c.lambda,
                c.alpha,
                r.mean,
                r.std_error,
                rounds
            ));
            for f in &r.folds {
                out.push_str(&format!("\t{:.8}", f.metric));
            }
            out.push_str(if same_params(c, &self.best) { "\t1\n" } else { "\t0\n" });
        }
        out
    }
}

fn same_params(a: &BoostConfig, b: &BoostConfig) -> bool {
    a.eta == b.eta
        && a.max_depth == b.max_depth
        && a.min_child_weight == b.min_child_weight
        && a.subsample == b.subsample
        && a.colsample == b.colsample
        && a.gamma == b.gamma
        && a.lambda == b.lambda
        && a.alpha == b.alpha
}

fn stage_candidates(stage: usize, grid: &TuneGrid, base: &BoostConfig) -> Vec<BoostConfig> {
    let mut out = Vec::new();
    match stage {
        1 => {
            for &eta in &grid.eta {
                for &max_depth in &grid.max_depth {
                    for &min_child_weight in &grid.min_child_weight {
                        out.push(BoostConfig {
                            eta,
                            max_depth,
                            min_child_weight,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        2 => {
            for &subsample in &grid.subsample {
                for &colsample in &grid.colsample {
                    out.push(BoostConfig {
                        subsample,
                        colsample,
                        ..base.clone()
                    });
                }
            }
        }
        _ => {
            for &gamma in &grid.gamma {
                for &lambda in &grid.lambda {
                    for &alpha in &grid.alpha {
                        out.push(BoostConfig {
                            gamma,
                            lambda,
                            alpha,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    out
}

/// Runs the three-stage search over `n` rows split into seeded folds.
/// `evaluate(config, train, hold)` fits on the training rows and scores the
/// held-out rows.
pub fn tune<F>(
    n: usize,
    base: &BoostConfig,
    config: &TuneConfig,
    seed: u64,
    metric: &str,
    evaluate: F,
) -> Result<TuneReport, CliError>
where
    F: Fn(&BoostConfig, &[usize], &[usize]) -> Result<FoldScore, CliError> + Sync,
{
    config.validate()?;
    if n < config.folds {
        return Err(CliError::Validation(format!(
            "{n} rows cannot fill {} folds",
            config.folds
        )));
    }
    let groups: Vec<usize> = (0..n).collect();
    let fold_of = group_folds(&groups, config.folds, seed);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..config.folds)
        .map(|k| {
            let (hold, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == k);
            (train, hold)
        })
        .collect();
    let mut best = base.clone();
    let mut rows: Vec<TuneRow> = Vec::new();
    let mut evaluations = 0;
    for stage in 1..=3 {
        let candidates: Vec<BoostConfig> = stage_candidates(stage, &config.grid, &best)
            .into_iter()
            .filter(|c| !rows.iter().any(|r| same_params(&r.config, c)))
            .collect();
        let jobs = candidates.len() * config.folds;
        let scores = exec::map_range(jobs, |j| {
            let (train, hold) = &splits[j % config.folds];
            evaluate(&candidates[j / config.folds], train, hold)
        });
        evaluations += jobs;
        let mut scores = scores.into_iter();
        for c in candidates {
            let folds = scores.by_ref().take(config.folds).collect::<Result<Vec<_>, _>>()?;
            let m: Vec<f64> = folds.iter().map(|f| f.metric).collect();
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m.len() - 1) as f64;
            rows.push(TuneRow {
                stage,
                config: c,
                folds,
                mean,
                std_error: (var / m.len() as f64).sqrt(),
            });
        }
        let winner = rows
            .iter()
            .filter(|r| r.mean.is_finite())
            .min_by(|a, b| a.mean.total_cmp(&b.mean))
            .ok_or_else(|| CliError::Runtime("every tuning candidate failed to score".into()))?;
        best = winner.config.clone();
        log::info!("tuning stage {stage}: best mean {metric} {:.6}", winner.mean);
    }
    Ok(TuneReport {
        metric: metric.to_string(),
        best,
        rows,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn singleton() -> TuneConfig {
        TuneConfig {
            folds: 4,
            grid: TuneGrid {
                eta: vec![0.1],
                max_depth: vec![2],
                min_child_weight: vec![1],
                subsample: vec![1.0],
                colsample: vec![1.0],
                gamma: vec![0.0],
                lambda: vec![1.0],
                alpha: vec![0.0],
            },
        }
    }

    #[test]
    fn singleton_grid_scores_once_per_fold() {
        let calls = AtomicUsize::new(0);
        let report = tune(40, &BoostConfig::default(), &singleton(), 1, "m", |_, train, hold| {
            calls.fetch_add(1, Ordering::Relaxed);
            assert_eq!(train.len() + hold.len(), 40);
            Ok(FoldScore { metric: 1.0, rounds: 3 })
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 4);
        assert_eq!(report.evaluations, 4);
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.best.max_depth, 2);
        assert_eq!(report.best.eta, 0.1);
    }

    #[test]
    fn later_stages_start_from_the_frozen_winner() {
        let mut cfg = singleton();
        cfg.grid.max_depth = vec![1, 3];
        cfg.grid.subsample = vec![0.5, 1.0];
        let report = tune(30, &BoostConfig::default(), &cfg, 1, "m", |c, _, _| {
            let depth_cost = (c.max_depth as f64 - 3.0).abs();
            Ok(FoldScore {
                metric: depth_cost + (1.0 - c.subsample),
                rounds: 1,
            })
        })
        .unwrap();
        assert_eq!(report.best.max_depth, 3);
        assert_eq!(report.best.subsample, 1.0);
        assert!(report
            .rows
            .iter()
            .filter(|r| r.stage == 2)
            .all(|r| r.config.max_depth == 3));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut cfg = singleton();
        cfg.grid.gamma.clear();
        let r = tune(10, &BoostConfig::default(), &cfg, 1, "m", |_, _, _| {
            Ok(FoldScore { metric: 0.0, rounds: 0 })
        });
        assert!(matches!(r, Err(CliError::Validation(m)) if m.contains("gamma")));
    }
}
