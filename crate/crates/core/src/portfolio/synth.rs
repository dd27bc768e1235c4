//! Seeded synthetic portfolios with known assignment and churn mechanisms.
//!
//! Each record draws from its own keyed substream, so record `i` is the same
//! regardless of `n` or thread count. Only `libm` math is used on the
//! generation path.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{derive_covariates, PolicyRecord, PolicyType, Portfolio, RiskLevel, TreatmentGrid};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{keyed, stream};
use crate::stats::{norm_cdf, norm_inv, norm_mass, norm_pdf, sigmoid};

/// True churn probability: logistic in rate change, competitiveness and risk
/// level, with a Gaussian bump at small positive rate changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnCurve {
    pub intercept: f64,
    pub rate_slope: f64,
    pub bump_height: f64,
    pub bump_center: f64,
    pub bump_width: f64,
    pub competitiveness_slope: f64,
    pub competitiveness_sq: f64,
    pub risk: [f64; 4],
}

impl Default for ChurnCurve {
    fn default() -> Self {
        ChurnCurve {
            intercept: -1.3,
            rate_slope: 4.0,
            bump_height: 1.0,
            bump_center: 0.015,
            bump_width: 0.006,
            competitiveness_slope: 1.5,
            competitiveness_sq: 1.0,
            risk: [0.3, 0.0, 0.1, 0.5],
        }
    }
}

impl ChurnCurve {
    pub fn logit(&self, rate_change: f64, competitiveness: f64, risk: RiskLevel) -> f64 {
        let z = (rate_change - self.bump_center) / self.bump_width;
        self.intercept
            + self.rate_slope * rate_change
            + self.bump_height * libm::exp(-z * z)
            + self.competitiveness_slope * competitiveness
            + self.competitiveness_sq * competitiveness * competitiveness
            + self.risk[risk.index()]
    }

    pub fn probability(&self, rate_change: f64, competitiveness: f64, risk: RiskLevel) -> f64 {
        sigmoid(self.logit(rate_change, competitiveness, risk))
    }

    /// Rate changes within three bump widths of the bump centre.
    pub fn inflection_region(&self) -> (f64, f64) {
        (
            self.bump_center - 3.0 * self.bump_width,
            self.bump_center + 3.0 * self.bump_width,
        )
    }
}

/// True assignment: rate change ~ N(mean(X), noise_sd) truncated to
/// `[lower, upper]`, where the covariate part of the mean is scaled by the
/// confounding strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentTruth {
    pub center: f64,
    pub confounding: f64,
    pub risk: [f64; 4],
    pub policy: [f64; 3],
    pub competitiveness: f64,
    /// Per unit of `undershooting_1 / premium_new_base`.
    pub undershooting: f64,
    /// Per unit of `(premium_new_base - 450) / 450`.
    pub premium: f64,
    pub noise_sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for AssignmentTruth {
    fn default() -> Self {
        AssignmentTruth {
            center: 0.075,
            confounding: 1.0,
            risk: [0.0, 0.015, 0.045, 0.08],
            policy: [0.0, -0.01, 0.04],
            competitiveness: 0.08,
            undershooting: 0.12,
            premium: -0.03,
            noise_sd: 0.05,
            lower: -0.0928,
            upper: 0.2701,
        }
    }
}

impl AssignmentTruth {
    pub fn mean(&self, r: &PolicyRecord) -> f64 {
        let x = self.risk[r.risk_level.index()]
            + self.policy[r.policy_type.index()]
            + self.competitiveness * r.competitiveness
            + self.undershooting * r.undershooting_1 / r.premium_new_base
            + self.premium * (r.premium_new_base - 450.0) / 450.0;
        self.center + self.confounding * x
    }

    fn standardized(&self, r: &PolicyRecord, t: f64) -> f64 {
        (t - self.mean(r)) / self.noise_sd
    }

    fn total_mass(&self, r: &PolicyRecord) -> f64 {
        norm_mass(self.standardized(r, self.lower), self.standardized(r, self.upper))
    }

    /// True conditional density of the rate change.
    pub fn density(&self, r: &PolicyRecord, t: f64) -> f64 {
        if t < self.lower || t > self.upper {
            return 0.0;
        }
        norm_pdf(self.standardized(r, t)) / (self.noise_sd * self.total_mass(r))
    }

    /// True probability of each grid interval given the record's covariates.
    pub fn interval_mass(&self, r: &PolicyRecord, grid: &TreatmentGrid) -> Vec<f64> {
        let total = self.total_mass(r);
        grid.boundaries()
            .windows(2)
            .map(|w| {
                let a = self.standardized(r, w[0].max(self.lower));
                let b = self.standardized(r, w[1].min(self.upper));
                if b <= a {
                    0.0
                } else {
                    norm_mass(a, b) / total
                }
            })
            .collect()
    }

    fn sample(&self, r: &PolicyRecord, u: f64) -> f64 {
        let mu = self.mean(r);
        let pa = norm_cdf((self.lower - mu) / self.noise_sd);
        let pb = norm_cdf((self.upper - mu) / self.noise_sd);
        let t = mu + self.noise_sd * norm_inv(pa + u * (pb - pa));
        t.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub assignment: AssignmentTruth,
    pub churn: ChurnCurve,
}

impl SynthTruth {
    pub fn churn_probability(&self, r: &PolicyRecord, rate_change: f64, competitiveness: f64) -> f64 {
        self.churn.probability(rate_change, competitiveness, r.risk_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub risk_probs: [f64; 4],
    pub policy_probs: [f64; 3],
    pub premium_log_mean: f64,
    pub premium_log_sd: f64,
    pub competitiveness_mean: f64,
    pub competitiveness_sd: f64,
    pub expense_ratio: [f64; 2],
    pub max_tenure: u32,
    pub assignment: AssignmentTruth,
    pub churn: ChurnCurve,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 20_000,
            risk_probs: [0.62, 0.22, 0.12, 0.04],
            policy_probs: [0.86, 0.05, 0.09],
            premium_log_mean: 6.05,
            premium_log_sd: 0.4,
            competitiveness_mean: -0.05,
            competitiveness_sd: 0.22,
            expense_ratio: [0.55, 0.95],
            max_tenure: 8,
            assignment: AssignmentTruth::default(),
            churn: ChurnCurve::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("synthetic portfolio size must be positive"));
        }
        let probs_ok =
            |p: &[f64]| p.iter().all(|&x| (0.0..=1.0).contains(&x)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !probs_ok(&self.risk_probs) || !probs_ok(&self.policy_probs) {
            return Err(Error::invalid("category probabilities must lie in [0, 1] and sum to 1"));
        }
        let a = &self.assignment;
        if !(a.noise_sd > 0.0) || !(a.lower < a.upper) || !(a.confounding >= 0.0) {
            return Err(Error::invalid(
                "assignment needs noise_sd > 0, lower < upper, confounding >= 0",
            ));
        }
        if !(self.premium_log_sd >= 0.0) || !(self.competitiveness_sd >= 0.0) {
            return Err(Error::invalid("standard deviations must be non-negative"));
        }
        let [lo, hi] = self.expense_ratio;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::invalid("expense ratio range must satisfy 0 <= lo <= hi"));
        }
        if !(self.churn.bump_width > 0.0) {
            return Err(Error::invalid("churn bump width must be positive"));
        }
        if self.max_tenure == 0 {
            return Err(Error::invalid("max_tenure must be at least 1"));
        }
        Ok(())
    }
}

/// Seed, configuration and ground truth, written next to the CSV as
/// `<name>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub seed: u64,
    pub config: SynthConfig,
    pub truth: SynthTruth,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub portfolio: Portfolio,
    pub metadata: SynthMetadata,
}

const RISK_PREMIUM: [f64; 4] = [-0.1, 0.1, 0.3, 0.6];
const RISK_CORRECTION: [f64; 4] = [-0.02, 0.0, 0.03, 0.06];
const RISK_EXPENSE_LOAD: [f64; 4] = [0.95, 1.0, 1.05, 1.1];

fn categorical(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Open interval keeps norm_inv finite.
    let u: f64 = rng.gen();
    norm_inv(u.clamp(1e-300, 1.0 - 1e-16))
}

fn generate_record(cfg: &SynthConfig, truth: &SynthTruth, seed: u64, i: usize) -> PolicyRecord {
    let mut rng = keyed(seed, stream::SYNTH, i as u64, 0);
    let risk_level = RiskLevel::ALL[categorical(rng.gen(), &cfg.risk_probs)];
    let policy_type = PolicyType::ALL[categorical(rng.gen(), &cfg.policy_probs)];
    let lvl = risk_level.index();

    let premium_old = libm::exp(cfg.premium_log_mean + RISK_PREMIUM[lvl] + cfg.premium_log_sd * normal(&mut rng));
    let correction = RISK_CORRECTION[lvl] + 0.03 * normal(&mut rng);
    let premium_new_base = premium_old * (1.0 + correction).max(0.05);
    let comp = cfg.competitiveness_mean + cfg.competitiveness_sd * normal(&mut rng);
    let offer_before = premium_old;
    let cheapest = offer_before * (1.0 + comp).max(0.01);
    let second = cheapest * (1.02 + 0.08 * rng.gen::<f64>());
    let (competitiveness, undershooting_1, undershooting_2) =
        derive_covariates(offer_before, cheapest, premium_new_base, cheapest, second).expect("positive offer");
    let [lo, hi] = cfg.expense_ratio;
    let expenses = premium_old * (lo + (hi - lo) * rng.gen::<f64>()) * RISK_EXPENSE_LOAD[lvl];
    let tenure = 1 + (rng.gen::<f64>() * cfg.max_tenure as f64) as u32;

    let mut record = PolicyRecord {
        id: i as u64 + 1,
        churn: false,
        rate_change: 0.0,
        expenses,
        competitiveness,
        premium_old,
        premium_new_base,
        undershooting_1,
        undershooting_2,
        risk_level,
        policy_type,
        tenure: tenure.min(cfg.max_tenure),
    };
    record.rate_change = truth.assignment.sample(&record, rng.gen());
    let p = truth.churn_probability(&record, record.rate_change, competitiveness);
    record.churn = rng.gen::<f64>() < p;
    record
}

/// Generates a confounded portfolio with known truth. Deterministic in
/// `(config, seed)`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let truth = SynthTruth {
        assignment: config.assignment.clone(),
        churn: config.churn.clone(),
    };
    let records = exec::map_range(config.n, |i| generate_record(config, &truth, seed, i));
    Ok(SynthOutput {
        portfolio: Portfolio::new(records)?,
        metadata: SynthMetadata {
            seed,
            config: config.clone(),
            truth,
        },
    })
}

pub fn write_sidecar(path: impl AsRef<Path>, metadata: &SynthMetadata) -> Result<()> {
    let json = serde_json::to_string_pretty(metadata)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_portfolio() {
        let cfg = SynthConfig {
            n: 300,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg, 42).unwrap();
        let b = synth_generate(&cfg, 42).unwrap();
        assert_eq!(a.portfolio, b.portfolio);
        let c = synth_generate(&cfg, 43).unwrap();
        assert_ne!(a.portfolio, c.portfolio);
    }

    #[test]
    fn records_do_not_depend_on_n() {
        let small = synth_generate(
            &SynthConfig {
                n: 10,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap();
        let large = synth_generate(
            &SynthConfig {
                n: 50,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(small.portfolio.records(), &large.portfolio.records()[..10]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(synth_generate(
            &SynthConfig {
                n: 0,
                ..SynthConfig::default()
            },
            1
        )
        .is_err());
        let bad = SynthConfig {
            risk_probs: [0.5, 0.6, -0.1, 0.0],
            ..SynthConfig::default()
        };
        assert!(synth_generate(&bad, 1).is_err());
    }

    #[test]
    fn rate_changes_within_truncation() {
        let out = synth_generate(
            &SynthConfig {
                n: 2000,
                ..SynthConfig::default()
            },
            9,
        )
        .unwrap();
        let a = &out.metadata.truth.assignment;
        for r in out.portfolio.records() {
            assert!(r.rate_change >= a.lower && r.rate_change <= a.upper);
            assert!(r.undershooting_2 >= r.undershooting_1);
        }
    }

    #[test]
    fn churn_curve_monotone_above_inflection() {
        let curve = ChurnCurve::default();
        let (_, hi) = curve.inflection_region();
        for comp in [-0.5, -0.1, 0.0, 0.3] {
            for risk in RiskLevel::ALL {
                let mut prev = curve.probability(hi, comp, risk);
                let mut t = hi;
                while t < 0.3 {
                    t += 0.0005;
                    let p = curve.probability(t, comp, risk);
                    assert!(p > prev, "t={t} comp={comp}");
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn true_interval_masses_sum_to_one() {
        let out = synth_generate(
            &SynthConfig {
                n: 500,
                ..SynthConfig::default()
            },
            2,
        )
        .unwrap();
        let grid = super::super::quantile_grid(&out.portfolio.rate_changes(), 5).unwrap();
        let a = &out.metadata.truth.assignment;
        for r in out.portfolio.records().iter().take(50) {
            let m = a.interval_mass(r, &grid);
            let total: f64 = m.iter().sum();
            // Grid spans the observed range, not the full truncation range.
            assert!(total <= 1.0 + 1e-12 && total > 0.9);
        }
    }

    #[test]
    fn unconfounded_assignment_independent_of_risk() {
        let cfg = SynthConfig {
            n: 20_000,
            assignment: AssignmentTruth {
                confounding: 0.0,
                ..AssignmentTruth::default()
            },
            ..SynthConfig::default()
        };
        let out = synth_generate(&cfg, 2024).unwrap();
        let t = out.portfolio.rate_changes();
        let grid = super::super::quantile_grid(&t, 5).unwrap();
        let mut table = [[0.0f64; 4]; 5];
        for r in out.portfolio.records() {
            table[grid.category_of(r.rate_change).unwrap()][r.risk_level.index()] += 1.0;
        }
        let n = cfg.n as f64;
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut chi2 = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let e = rows[i] * cols[j] / n;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        // Upper 1% point of chi-square with 12 degrees of freedom.
        assert!(chi2 < 26.217, "chi2 = {chi2}");
    }

    #[test]
    fn confounded_assignment_shifts_with_risk() {
        let out = synth_generate(
            &SynthConfig {
                n: 5000,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        let mut sums = [0.0; 4];
        let mut counts = [0.0; 4];
        for r in out.portfolio.records() {
            sums[r.risk_level.index()] += r.rate_change;
            counts[r.risk_level.index()] += 1.0;
        }
        let means: Vec<f64> = (0..4).map(|i| sums[i] / counts[i]).collect();
        assert!(means[0] < means[2] && means[2] < means[3], "{means:?}");
    }
}
