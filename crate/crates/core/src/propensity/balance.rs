//! ASAM balance metric and balance tables.

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance};

/// Propensity floor inside the weights.
pub const PI_FLOOR: f64 = 1e-6;

/// Covariates, observed categories and full-sample standardisation, reusable
/// across many score matrices (one per boosting round).
#[derive(Debug, Clone)]
pub struct BalanceData {
    x: Matrix,
    names: Vec<String>,
    categories: Vec<usize>,
    intervals: usize,
    full_mean: Vec<f64>,
    full_sd: Vec<f64>,
    counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub full_mean: f64,
    pub treated_mean: f64,
    pub weighted_mean: f64,
    pub sam_before: f64,
    pub sam_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBalance {
    pub interval: usize,
    pub label: String,
    pub count: usize,
    pub covariates: Vec<CovariateBalance>,
    pub asam_before: f64,
    pub asam_after: f64,
    /// Mean over all units of the interval's propensity score.
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub intervals: Vec<IntervalBalance>,
    pub overall_before: f64,
    pub overall_after: f64,
    /// Weights that hit the propensity floor.
    pub floored_weights: usize,
}

struct Weighted {
    means: Vec<Vec<f64>>,
    floored: usize,
}

impl BalanceData {
    pub fn new(x: Matrix, names: Vec<String>, categories: Vec<usize>, intervals: usize) -> Result<Self> {
        if x.rows() != categories.len() {
            return Err(Error::invalid("one category per covariate row required"));
        }
        if x.rows() < 2 {
            return Err(Error::invalid("balance needs at least 2 rows"));
        }
        if names.len() != x.cols() {
            return Err(Error::invalid("one name per covariate column required"));
        }
        let mut counts = vec![0; intervals];
        for &c in &categories {
            if c >= intervals {
                return Err(Error::invalid(format!("category {c} outside 0..{intervals}")));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyInterval(c));
        }
        let cols: Vec<Vec<f64>> = (0..x.cols()).map(|k| x.column(k)).collect();
        let full_mean = cols.iter().map(|c| mean(c)).collect();
        let full_sd = cols.iter().map(|c| libm::sqrt(sample_variance(c))).collect();
        Ok(BalanceData {
            x,
            names,
            categories,
            intervals,
            full_mean,
            full_sd,
            counts,
        })
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    fn sam(&self, k: usize, m: f64) -> f64 {
        let sd = self.full_sd[k];
        if sd > 0.0 {
            (m - self.full_mean[k]).abs() / sd
        } else {
            0.0
        }
    }

    /// Per-interval means with weights `1[c_i = c] / pi(c, X_i)`; `None` gives
    /// unit weights.
    fn weighted_means(&self, scores: Option<&Matrix>) -> Result<Weighted> {
        let k = self.x.cols();
        let mut sums = vec![vec![0.0; k]; self.intervals];
        let mut wsum = vec![0.0; self.intervals];
        let mut floored = 0;
        for (i, &c) in self.categories.iter().enumerate() {
            let w = match scores {
                None => 1.0,
                Some(s) => {
                    let p = s.get(i, c);
                    if !(p > 0.0) {
                        return Err(Error::NoOverlap { policy: i, interval: c });
                    }
                    if p < PI_FLOOR {
                        floored += 1;
                    }
                    1.0 / p.max(PI_FLOOR)
                }
            };
            wsum[c] += w;
            for (acc, x) in sums[c].iter_mut().zip(self.x.row(i)) {
                *acc += w * x;
            }
        }
        if floored > 0 {
            log::warn!("{floored} propensity scores below {PI_FLOOR} were floored in ASAM weights");
        }
        for (s, w) in sums.iter_mut().zip(&wsum) {
            s.iter_mut().for_each(|v| *v /= w);
        }
        Ok(Weighted { means: sums, floored })
    }

    fn check_scores(&self, scores: &Matrix) -> Result<()> {
        if scores.rows() != self.x.rows() || scores.cols() != self.intervals {
            return Err(Error::invalid(format!(
                "score matrix is {}x{}, expected {}x{}",
                scores.rows(),
                scores.cols(),
                self.x.rows(),
                self.intervals
            )));
        }
        Ok(())
    }

    fn asam_per_interval(&self, means: &[Vec<f64>]) -> Vec<f64> {
        means
            .iter()
            .map(|m| m.iter().enumerate().map(|(k, &v)| self.sam(k, v)).sum::<f64>() / m.len() as f64)
            .collect()
    }

    /// Weighted ASAM per interval.
    pub fn interval_asam(&self, scores: &Matrix) -> Result<Vec<f64>> {
        self.check_scores(scores)?;
        Ok(self.asam_per_interval(&self.weighted_means(Some(scores))?.means))
    }

    /// Overall weighted ASAM: mean over intervals of the per-interval ASAM.
    pub fn overall(&self, scores: &Matrix) -> Result<f64> {
        Ok(mean(&self.interval_asam(scores)?))
    }

    /// Unweighted ASAM per interval.
    pub fn interval_asam_before(&self) -> Vec<f64> {
        let w = self.weighted_means(None).expect("unit weights cannot fail");
        self.asam_per_interval(&w.means)
    }

    pub fn report(&self, scores: &Matrix, labels: &[String]) -> Result<BalanceReport> {
        self.check_scores(scores)?;
        let before = self.weighted_means(None)?;
        let after = self.weighted_means(Some(scores))?;
        let asam_before = self.asam_per_interval(&before.means);
        let asam_after = self.asam_per_interval(&after.means);
        let intervals = (0..self.intervals)
            .map(|c| IntervalBalance {
                interval: c,
                label: labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
                count: self.counts[c],
                covariates: (0..self.x.cols())
                    .map(|k| CovariateBalance {
                        covariate: self.names[k].clone(),
                        full_mean: self.full_mean[k],
                        treated_mean: before.means[c][k],
                        weighted_mean: after.means[c][k],
                        sam_before: self.sam(k, before.means[c][k]),
                        sam_after: self.sam(k, after.means[c][k]),
                    })
                    .collect(),
                asam_before: asam_before[c],
                asam_after: asam_after[c],
                mean_score: mean(&scores.column(c)),
            })
            .collect();
        Ok(BalanceReport {
            intervals,
            overall_before: mean(&asam_before),
            overall_after: mean(&asam_after),
            floored_weights: after.floored,
        })
    }
}

impl BalanceReport {
    /// Table with one row per covariate and a before/after column pair per
    /// interval, followed by ASAM, count and mean-score rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("covariate");
        for iv in &self.intervals {
            out.push_str(&format!("\t{} before\t{} after", iv.label, iv.label));
        }
        out.push('\n');
        let k = self.intervals.first().map_or(0, |iv| iv.covariates.len());
        for j in 0..k {
            out.push_str(&self.intervals[0].covariates[j].covariate);
            for iv in &self.intervals {
                let cb = &iv.covariates[j];
                out.push_str(&format!("\t{:.4}\t{:.4}", cb.treated_mean, cb.weighted_mean));
            }
            out.push('\n');
        }
        out.push_str("ASAM");
        for iv in &self.intervals {
            out.push_str(&format!("\t{:.4}\t{:.4}", iv.asam_before, iv.asam_after));
        }
        out.push_str("\ncount");
        for iv in &self.intervals {
            out.push_str(&format!("\t{}\t{}", iv.count, iv.count));
        }
        out.push_str("\nmean_score");
        for iv in &self.intervals {
            out.push_str(&format!("\t\t{:.6}", iv.mean_score));
        }
        out.push_str(&format!(
            "\noverall ASAM\t{:.4}\t{:.4}\n",
            self.overall_before, self.overall_after
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> BalanceData {
        // 6 rows, 2 intervals, 2 covariates.
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 1.0],
            vec![3.0, 0.0],
            vec![4.0, 1.0],
            vec![5.0, 1.0],
            vec![6.0, 0.0],
        ])
        .unwrap();
        BalanceData::new(x, vec!["a".into(), "b".into()], vec![0, 0, 0, 1, 1, 1], 2).unwrap()
    }

    #[test]
    fn hand_computed_instance() {
        let d = fixture();
        let scores = Matrix::from_rows(&[
            vec![0.5, 0.5],
            vec![0.25, 0.75],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
        ])
        .unwrap();
        // Full means 3.5, 0.5; sds sqrt(3.5), sqrt(0.3).
        // Interval 0 weights 2, 4, 2 (sum 8): means (2+8+6)/8 = 2, (0+4+0)/8 = 0.5.
        // Interval 1 weights 2, 1.25, 2 (sum 5.25): means (8+6.25+12)/5.25 = 5, (2+1.25)/5.25.
        let r = d.report(&scores, &[]).unwrap();
        let sa = 3.5f64.sqrt();
        let sb = 0.3f64.sqrt();
        let iv0 = &r.intervals[0];
        assert!((iv0.covariates[0].weighted_mean - 2.0).abs() < 1e-15);
        assert!((iv0.covariates[0].sam_after - 1.5 / sa).abs() < 1e-15);
        assert_eq!(iv0.covariates[1].sam_after, 0.0);
        let b1 = 3.25 / 5.25;
        let want1 = (1.5 / sa + (b1 - 0.5f64).abs() / sb) / 2.0;
        assert!((r.intervals[1].asam_after - want1).abs() < 1e-14);
        // Unweighted: interval 0 means 2, 1/3.
        let want0 = (1.5 / sa + (1.0 / 6.0) / sb) / 2.0;
        assert!((r.intervals[0].asam_before - want0).abs() < 1e-14);
        assert!((r.overall_after - (iv0.asam_after + r.intervals[1].asam_after) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_scores_reproduce_before() {
        let d = fixture();
        let scores = Matrix::new(6, 2, [0.3, 0.7].repeat(6)).unwrap();
        let r = d.report(&scores, &[]).unwrap();
        for iv in &r.intervals {
            assert!((iv.asam_before - iv.asam_after).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_score_is_no_overlap() {
        let d = fixture();
        let mut scores = Matrix::new(6, 2, vec![0.5; 12]).unwrap();
        scores.set(4, 1, 0.0);
        assert!(matches!(
            d.overall(&scores),
            Err(Error::NoOverlap { policy: 4, interval: 1 })
        ));
        scores.set(4, 1, 1e-9);
        let r = d.report(&scores, &[]).unwrap();
        assert_eq!(r.floored_weights, 1);
    }

    #[test]
    fn tsv_has_row_per_covariate() {
        let d = fixture();
        let scores = Matrix::new(6, 2, vec![0.5; 12]).unwrap();
        let tsv = d.report(&scores, &["[0, 1]".into(), "(1, 2]".into()]).unwrap().to_tsv();
        assert!(tsv.starts_with("covariate\t[0, 1] before\t[0, 1] after"));
        assert_eq!(tsv.lines().count(), 1 + 2 + 4);
    }
}
