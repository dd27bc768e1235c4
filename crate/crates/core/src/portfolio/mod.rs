//! Policy records, ingestion, outlier trimming, treatment grids and the
//! synthetic portfolio generator.

mod csv_io;
mod grid;
mod synth;
mod trim;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};

pub use csv_io::{load_csv, save_csv, CsvSchema};
pub use grid::{quantile_grid, TreatmentGrid};
pub use synth::{
    synth_generate, write_sidecar, AssignmentTruth, ChurnCurve, SynthConfig, SynthMetadata, SynthOutput, SynthTruth,
};
pub use trim::{trim_outliers, Fences, TrimReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    VeryLow,
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 4] = [RiskLevel::VeryLow, RiskLevel::Low, RiskLevel::Medium, RiskLevel::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            RiskLevel::VeryLow => "very_low",
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyType {
    Regular,
    Employee,
    SecondCar,
}

impl PolicyType {
    pub const ALL: [PolicyType; 3] = [PolicyType::Regular, PolicyType::Employee, PolicyType::SecondCar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            PolicyType::Regular => "regular",
            PolicyType::Employee => "employee",
            PolicyType::SecondCar => "second_car",
        }
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl fmt::Display for PolicyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RiskLevel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RiskLevel::ALL
            .into_iter()
            .find(|l| l.label() == s)
            .ok_or_else(|| format!("unknown risk_level `{s}`"))
    }
}

impl FromStr for PolicyType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PolicyType::ALL
            .into_iter()
            .find(|l| l.label() == s)
            .ok_or_else(|| format!("unknown policy_type `{s}`"))
    }
}

/// One policy renewal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub id: u64,
    pub churn: bool,
    /// Offered rate change as a fraction (0.0606 = 6.06%).
    pub rate_change: f64,
    pub expenses: f64,
    /// `(B - A) / A`: cheapest competitor relative to the offer before changes.
    pub competitiveness: f64,
    pub premium_old: f64,
    pub premium_new_base: f64,
    /// `(D1 - C)+` against the cheapest competitor.
    pub undershooting_1: f64,
    /// `(D2 - C)+` against the second-cheapest competitor.
    pub undershooting_2: f64,
    pub risk_level: RiskLevel,
    pub policy_type: PolicyType,
    /// Consecutive renewals observed for the customer.
    pub tenure: u32,
}

impl PolicyRecord {
    pub fn churn_f64(&self) -> f64 {
        if self.churn {
            1.0
        } else {
            0.0
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let finite = [
            ("rate_change", self.rate_change),
            ("expenses", self.expenses),
            ("competitiveness", self.competitiveness),
            ("premium_old", self.premium_old),
            ("premium_new_base", self.premium_new_base),
            ("undershooting_1", self.undershooting_1),
            ("undershooting_2", self.undershooting_2),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.expenses < 0.0 {
            return Err("expenses must be non-negative".into());
        }
        if self.premium_old <= 0.0 || self.premium_new_base <= 0.0 {
            return Err("premiums must be positive".into());
        }
        if self.undershooting_1 < 0.0 || self.undershooting_2 < 0.0 {
            return Err("undershooting must be non-negative".into());
        }
        Ok(())
    }

    /// Model covariates in [`Portfolio::covariate_names`] order, with the
    /// competitiveness replaced by `competitiveness`.
    pub fn covariates_with(&self, competitiveness: f64) -> Vec<f64> {
        let r = self.risk_level.index();
        let p = self.policy_type.index();
        vec![
            competitiveness,
            self.premium_new_base,
            self.undershooting_1,
            self.undershooting_2,
            (r == 1) as u8 as f64,
            (r == 2) as u8 as f64,
            (r == 3) as u8 as f64,
            (p == 1) as u8 as f64,
            (p == 2) as u8 as f64,
        ]
    }

    pub fn covariates(&self) -> Vec<f64> {
        self.covariates_with(self.competitiveness)
    }

    /// Balance covariates: numeric fields plus one indicator per level.
    pub fn balance_covariates(&self) -> Vec<f64> {
        let mut v = vec![
            self.competitiveness,
            self.premium_new_base,
            self.undershooting_1,
            self.undershooting_2,
        ];
        v.extend(RiskLevel::ALL.iter().map(|&l| (l == self.risk_level) as u8 as f64));
        v.extend(PolicyType::ALL.iter().map(|&t| (t == self.policy_type) as u8 as f64));
        v
    }
}

pub const NUMERIC_COVARIATES: [&str; 4] = [
    "competitiveness",
    "premium_new_base",
    "undershooting_1",
    "undershooting_2",
];

/// Reference-coded model covariate names (first level of each categorical
/// is the reference).
pub fn covariate_names() -> Vec<String> {
    let mut names: Vec<String> = NUMERIC_COVARIATES.iter().map(|s| s.to_string()).collect();
    names.extend(RiskLevel::ALL[1..].iter().map(|l| format!("risk_level={l}")));
    names.extend(PolicyType::ALL[1..].iter().map(|t| format!("policy_type={t}")));
    names
}

/// Balance covariate names, one indicator per categorical level.
pub fn balance_covariate_names() -> Vec<String> {
    let mut names: Vec<String> = NUMERIC_COVARIATES.iter().map(|s| s.to_string()).collect();
    names.extend(RiskLevel::ALL.iter().map(|l| format!("risk_level={l}")));
    names.extend(PolicyType::ALL.iter().map(|t| format!("policy_type={t}")));
    names
}

/// An immutable, validated set of policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    records: Vec<PolicyRecord>,
    covariate_names: Vec<String>,
}

impl Portfolio {
    pub fn new(records: Vec<PolicyRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.id) {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("duplicate id {}", r.id),
                });
            }
            r.validate().map_err(|message| Error::Row { row: i + 1, message })?;
        }
        Ok(Portfolio {
            records,
            covariate_names: covariate_names(),
        })
    }

    pub fn records(&self) -> &[PolicyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn rate_changes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rate_change).collect()
    }

    pub fn churn(&self) -> Vec<f64> {
        self.records.iter().map(PolicyRecord::churn_f64).collect()
    }

    /// N x K reference-coded covariate matrix.
    pub fn covariates(&self) -> Matrix {
        let k = self.covariate_names.len();
        let data = self.records.iter().flat_map(PolicyRecord::covariates).collect();
        Matrix::new(self.records.len(), k, data).expect("covariate layout")
    }

    /// N x K' balance covariate matrix (all categorical levels).
    pub fn balance_covariates(&self) -> Matrix {
        let k = balance_covariate_names().len();
        let data = self.records.iter().flat_map(PolicyRecord::balance_covariates).collect();
        Matrix::new(self.records.len(), k, data).expect("balance layout")
    }

    /// Observed churn rate.
    pub fn churn_rate(&self) -> f64 {
        self.records.iter().filter(|r| r.churn).count() as f64 / self.len().max(1) as f64
    }

    /// Subset by index, preserving order. Ids must stay unique.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Portfolio::new(idx.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Records matching a predicate.
    pub fn filter(&self, keep: impl Fn(&PolicyRecord) -> bool) -> Result<Self> {
        Portfolio::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }
}

/// Competitive position of a renewal offer.
///
/// `a`: offer before any rate change, `b`: cheapest competing offer,
/// `c`: base renewal offer, `d1`/`d2`: cheapest and second-cheapest
/// competitor. Returns `(competitiveness, undershooting_1, undershooting_2)`.
pub fn derive_covariates(a: f64, b: f64, c: f64, d1: f64, d2: f64) -> Result<(f64, f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::invalid(format!(
            "offer before changes must be positive, got {a}"
        )));
    }
    Ok(((b - a) / a, (d1 - c).max(0.0), (d2 - c).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_symmetric_case() {
        assert_eq!(
            derive_covariates(100.0, 100.0, 100.0, 100.0, 100.0).unwrap(),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn derive_competitiveness() {
        let (comp, _, _) = derive_covariates(100.0, 80.0, 100.0, 100.0, 100.0).unwrap();
        assert!((comp + 0.20).abs() < 1e-15);
    }

    #[test]
    fn derive_positive_parts_clamp() {
        let (_, u1, u2) = derive_covariates(100.0, 100.0, 120.0, 100.0, 110.0).unwrap();
        assert_eq!((u1, u2), (0.0, 0.0));
        let (_, u1, u2) = derive_covariates(100.0, 100.0, 90.0, 100.0, 110.0).unwrap();
        assert_eq!((u1, u2), (10.0, 20.0));
    }

    #[test]
    fn derive_rejects_nonpositive_offer() {
        assert!(derive_covariates(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(derive_covariates(-5.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = crate::portfolio::synth_generate(
            &SynthConfig {
                n: 2,
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap()
        .portfolio
        .records()[0]
            .clone();
        assert!(Portfolio::new(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn covariate_layouts_match_names() {
        let p = synth_generate(
            &SynthConfig {
                n: 5,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap()
        .portfolio;
        assert_eq!(p.covariates().cols(), p.covariate_names().len());
        assert_eq!(p.balance_covariates().cols(), balance_covariate_names().len());
        let b = p.balance_covariates();
        for i in 0..p.len() {
            let row = b.row(i);
            assert_eq!(row[4..8].iter().sum::<f64>(), 1.0);
            assert_eq!(row[8..11].iter().sum::<f64>(), 1.0);
        }
    }
}
