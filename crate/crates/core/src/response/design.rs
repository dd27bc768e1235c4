//! Regressors of the global response model: base covariate terms, treatment
//! indicators against a reference interval, and their interactions.

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::portfolio::{PolicyRecord, PolicyType, Portfolio, RiskLevel, NUMERIC_COVARIATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Term {
    Numeric(usize),
    Square(usize),
    Risk(usize),
    Policy(usize),
}

impl Term {
    fn name(self) -> String {
        match self {
            Term::Numeric(k) => NUMERIC_COVARIATES[k].to_string(),
            Term::Square(k) => format!("{}^2", NUMERIC_COVARIATES[k]),
            Term::Risk(l) => format!("risk_level={}", RiskLevel::ALL[l]),
            Term::Policy(l) => format!("policy_type={}", PolicyType::ALL[l]),
        }
    }

    fn eval(self, numeric: &[f64; 4], r: &PolicyRecord) -> f64 {
        match self {
            Term::Numeric(k) => numeric[k],
            Term::Square(k) => numeric[k] * numeric[k],
            Term::Risk(l) => (r.risk_level.index() == l) as u8 as f64,
            Term::Policy(l) => (r.policy_type.index() == l) as u8 as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Column {
    Base { term: Term },
    Treatment { interval: usize },
    TreatmentBase { interval: usize, term: Term },
    CompetitivenessBase { term: Term },
}

/// Column layout of the response design. The intercept is implicit and not
/// part of [`DesignSpec::names`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    intervals: usize,
    reference: usize,
    columns: Vec<Column>,
    names: Vec<String>,
}

impl DesignSpec {
    /// Full design for `intervals` treatment categories with the middle one
    /// as reference.
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::invalid("response design needs at least 2 intervals"));
        }
        let reference = (intervals - 1) / 2;
        let mut base: Vec<Term> = (0..4).map(Term::Numeric).collect();
        base.extend((0..4).map(Term::Square));
        base.extend((1..4).map(Term::Risk));
        base.extend((1..3).map(Term::Policy));
        let mut columns: Vec<Column> = base.iter().map(|&term| Column::Base { term }).collect();
        for c in (0..intervals).filter(|&c| c != reference) {
            columns.push(Column::Treatment { interval: c });
            columns.extend(base.iter().map(|&term| Column::TreatmentBase { interval: c, term }));
        }
        let comp_free = base.iter().filter(|t| !matches!(t, Term::Numeric(0) | Term::Square(0)));
        columns.extend(comp_free.map(|&term| Column::CompetitivenessBase { term }));
        let mut named: Vec<(String, Column)> = columns.into_iter().map(|c| (column_name(c), c)).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let (names, columns) = named.into_iter().unzip();
        Ok(DesignSpec {
            intervals,
            reference,
            columns,
            names,
        })
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Regressors of one policy in interval `c` at the given competitiveness.
    pub fn row(&self, r: &PolicyRecord, c: usize, competitiveness: f64) -> Vec<f64> {
        let numeric = [
            competitiveness,
            r.premium_new_base,
            r.undershooting_1,
            r.undershooting_2,
        ];
        self.columns
            .iter()
            .map(|col| match *col {
                Column::Base { term } => term.eval(&numeric, r),
                Column::Treatment { interval } => (c == interval) as u8 as f64,
                Column::TreatmentBase { interval, term } => {
                    if c == interval {
                        term.eval(&numeric, r)
                    } else {
                        0.0
                    }
                }
                Column::CompetitivenessBase { term } => competitiveness * term.eval(&numeric, r),
            })
            .collect()
    }

    /// Stacked design over every (policy, interval) pair, policy-major:
    /// row `i * C + c`.
    pub fn stacked(&self, portfolio: &Portfolio) -> Matrix {
        let k = self.width();
        let mut data = Vec::with_capacity(portfolio.len() * self.intervals * k);
        for r in portfolio.records() {
            for c in 0..self.intervals {
                data.extend(self.row(r, c, r.competitiveness));
            }
        }
        Matrix::new(portfolio.len() * self.intervals, k, data).expect("design layout")
    }
}

fn column_name(c: Column) -> String {
    match c {
        Column::Base { term } => term.name(),
        Column::Treatment { interval } => format!("t{interval}"),
        Column::TreatmentBase { interval, term } => format!("t{interval}:{}", term.name()),
        Column::CompetitivenessBase { term } => format!("competitiveness:{}", term.name()),
    }
}
