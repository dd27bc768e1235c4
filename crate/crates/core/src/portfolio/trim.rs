use serde::{Deserialize, Serialize};

use super::{PolicyRecord, Portfolio};
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sorted_copy};

const IQR_MULTIPLIER: f64 = 1.5;

/// Boxplot fences `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]` for the two trimmed fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fences {
    pub rate_change: [f64; 2],
    pub competitiveness: [f64; 2],
}

fn fence(values: &[f64]) -> [f64; 2] {
    let s = sorted_copy(values);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    [q1 - IQR_MULTIPLIER * iqr, q3 + IQR_MULTIPLIER * iqr]
}

impl Fences {
    pub fn fit(portfolio: &Portfolio) -> Result<Self> {
        if portfolio.len() < 4 {
            return Err(Error::invalid(format!(
                "outlier trimming needs at least 4 records, got {}",
                portfolio.len()
            )));
        }
        let rc: Vec<f64> = portfolio.records().iter().map(|r| r.rate_change).collect();
        let comp: Vec<f64> = portfolio.records().iter().map(|r| r.competitiveness).collect();
        Ok(Fences {
            rate_change: fence(&rc),
            competitiveness: fence(&comp),
        })
    }

    pub fn admits(&self, r: &PolicyRecord) -> bool {
        let inside = |v: f64, f: [f64; 2]| v >= f[0] && v <= f[1];
        inside(r.rate_change, self.rate_change) && inside(r.competitiveness, self.competitiveness)
    }

    /// Keeps the records inside both fences. Re-applying the same fences is a
    /// no-op.
    pub fn apply(&self, portfolio: &Portfolio) -> Result<Portfolio> {
        portfolio.filter(|r| self.admits(r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    pub input_count: usize,
    pub retained_count: usize,
    pub retained_fraction: f64,
    pub fences: Fences,
    /// Observed `[min, max]` after trimming (`None` when nothing is left).
    pub rate_change_range: Option<[f64; 2]>,
    pub competitiveness_range: Option<[f64; 2]>,
}

fn range(values: impl Iterator<Item = f64>) -> Option<[f64; 2]> {
    values.fold(None, |acc, v| match acc {
        None => Some([v, v]),
        Some([lo, hi]) => Some([lo.min(v), hi.max(v)]),
    })
}

/// Drops every record whose rate change or competitiveness falls outside
/// 1.5 interquartile ranges of its marginal distribution.
pub fn trim_outliers(portfolio: &Portfolio) -> Result<(Portfolio, TrimReport)> {
    let fences = Fences::fit(portfolio)?;
    let kept = fences.apply(portfolio)?;
    let report = TrimReport {
        input_count: portfolio.len(),
        retained_count: kept.len(),
        retained_fraction: kept.len() as f64 / portfolio.len() as f64,
        fences,
        rate_change_range: range(kept.records().iter().map(|r| r.rate_change)),
        competitiveness_range: range(kept.records().iter().map(|r| r.competitiveness)),
    };
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::{synth_generate, SynthConfig};

    fn base(n: usize) -> Portfolio {
        synth_generate(
            &SynthConfig {
                n,
                ..SynthConfig::default()
            },
            11,
        )
        .unwrap()
        .portfolio
    }

    #[test]
    fn identical_values_keep_everything() {
        let p = base(10);
        let recs: Vec<_> = p
            .records()
            .iter()
            .map(|r| PolicyRecord {
                rate_change: 0.05,
                competitiveness: -0.1,
                ..r.clone()
            })
            .collect();
        let p = Portfolio::new(recs).unwrap();
        let (kept, report) = trim_outliers(&p).unwrap();
        assert_eq!(kept.len(), 10);
        assert_eq!(report.fences.rate_change, [0.05, 0.05]);
    }

    #[test]
    fn injected_outliers_are_exactly_dropped() {
        // Fixture without natural outliers: values evenly spread on a lattice.
        let p = base(200);
        let mut recs: Vec<_> = p
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| PolicyRecord {
                rate_change: (i % 20) as f64 * 0.01,
                competitiveness: (i / 20) as f64 * 0.05 - 0.25,
                ..r.clone()
            })
            .collect();
        let fences = Fences::fit(&Portfolio::new(recs.clone()).unwrap()).unwrap();
        let iqr_rc = (fences.rate_change[1] - fences.rate_change[0]) / 4.0;
        let iqr_comp = (fences.competitiveness[1] - fences.competitiveness[0]) / 4.0;
        recs[3].rate_change = 0.095 + 10.0 * iqr_rc;
        recs[77].competitiveness = -10.0 * iqr_comp;
        let p = Portfolio::new(recs).unwrap();
        let (kept, report) = trim_outliers(&p).unwrap();
        assert_eq!(report.retained_count, 198);
        let ids: Vec<u64> = kept.records().iter().map(|r| r.id).collect();
        assert!(!ids.contains(&p.records()[3].id));
        assert!(!ids.contains(&p.records()[77].id));
    }

    #[test]
    fn reapplying_fences_is_idempotent() {
        let p = base(500);
        let (once, report) = trim_outliers(&p).unwrap();
        let twice = report.fences.apply(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn too_small_portfolio_rejected() {
        assert!(trim_outliers(&base(3)).is_err());
    }
}
