//! Renewal-offer optimisation: single-period efficient frontiers, boundary
//! solutions and multi-period plans with competitiveness feedback.
//!
//! All solvers work on a precomputed [`ChoiceTable`] of expected margin and
//! churn per (policy, action) and use Lagrangian relaxation of the churn or
//! profit constraint, which separates over policies. Every reported plan is
//! feasible; the Lagrangian dual gives the reported suboptimality bound.

mod frontier;
mod multiperiod;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::portfolio::{PolicyRecord, Portfolio, SynthTruth, TreatmentGrid};
use crate::propensity::{ContinuousGps, PropensityModel};
use crate::response::{DoseModel, PooledLogistic};

pub use frontier::{
    boundary_on, boundary_solutions, frontier, frontier_on, max_profit_on, min_churn_on, realized_outcome,
    BoundarySolutions, FrontierEntry, FrontierPoint, MinChurnPoint, Outcome,
};
pub use multiperiod::{
    default_caps, expected_outcomes, multiperiod, CompetitivenessUpdate, CompetitorsFixed, FrozenCompetitiveness,
    MultiperiodConfig, RenewalPlan, YearOutcome,
};

/// Expected churn `Y_i(t)` of a policy offered rate change `t` at a given
/// competitiveness.
pub trait ChurnResponse: Sync {
    fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64;

    /// Churn at every action; override when per-policy work can be shared.
    fn churn_row(&self, r: &PolicyRecord, competitiveness: f64, actions: &[f64]) -> Vec<f64> {
        actions.iter().map(|&t| self.churn(r, t, competitiveness)).collect()
    }
}

impl<F> ChurnResponse for F
where
    F: Fn(&PolicyRecord, f64, f64) -> f64 + Sync,
{
    fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64 {
        self(r, t, competitiveness)
    }
}

impl ChurnResponse for PooledLogistic {
    fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64 {
        PooledLogistic::churn(self, r, t, competitiveness)
    }
}

impl ChurnResponse for SynthTruth {
    fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64 {
        self.churn_probability(r, t, competitiveness)
    }
}

/// A dose-response model evaluated at `(t, GPS(t, X_i))`, with the GPS mean
/// recomputed from the policy's covariates at the given competitiveness.
pub struct DoseResponse<'a, M> {
    pub model: &'a M,
    pub gps: &'a ContinuousGps,
}

impl<'a, M: DoseModel + Sync> DoseResponse<'a, M> {
    pub fn new(model: &'a M, ps: &'a PropensityModel) -> Result<Self> {
        match ps {
            PropensityModel::Continuous(gps) => Ok(DoseResponse { model, gps }),
            PropensityModel::Discrete(_) => Err(Error::invalid(
                "dose-response evaluation needs a continuous propensity model",
            )),
        }
    }

    fn at(&self, f: f64, t: f64) -> f64 {
        let t = t.clamp(self.gps.bounds.lower(), self.gps.bounds.upper());
        let density = self.gps.density_at(f, t).expect("dose clamped into bounds");
        self.model.predict(t, density)
    }
}

impl<M: DoseModel + Sync> ChurnResponse for DoseResponse<'_, M> {
    fn churn(&self, r: &PolicyRecord, t: f64, competitiveness: f64) -> f64 {
        self.at(self.gps.mean_row(&r.covariates_with(competitiveness)), t)
    }

    fn churn_row(&self, r: &PolicyRecord, competitiveness: f64, actions: &[f64]) -> Vec<f64> {
        let f = self.gps.mean_row(&r.covariates_with(competitiveness));
        actions.iter().map(|&t| self.at(f, t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    DiscreteMedians,
    ContinuousGrid { step: f64 },
}

/// Candidate rate changes, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub kind: ActionKind,
    pub actions: Vec<f64>,
}

impl ActionSet {
    /// The interval medians of a treatment grid.
    pub fn discrete(grid: &TreatmentGrid) -> Self {
        ActionSet {
            kind: ActionKind::DiscreteMedians,
            actions: grid.medians().to_vec(),
        }
    }

    /// `lower, lower + step, ...` up to and including `upper`.
    pub fn continuous(lower: f64, upper: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(lower < upper) {
            return Err(Error::invalid("continuous actions need step > 0 and lower < upper"));
        }
        let n = libm::floor((upper - lower) / step + 1e-9) as usize;
        let mut actions: Vec<f64> = (0..=n).map(|k| lower + k as f64 * step).collect();
        if upper - actions[n] > 1e-12 {
            actions.push(upper);
        }
        Ok(ActionSet {
            kind: ActionKind::ContinuousGrid { step },
            actions,
        })
    }

    pub fn from_values(mut actions: Vec<f64>) -> Result<Self> {
        if actions.is_empty() || actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("actions must be finite and non-empty"));
        }
        actions.sort_by(f64::total_cmp);
        actions.dedup();
        Ok(ActionSet {
            kind: ActionKind::DiscreteMedians,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// One-year margin of a policy that renews at rate change `t`.
pub fn margin(r: &PolicyRecord, t: f64) -> f64 {
    r.premium_old * (1.0 + t) - r.expenses
}

/// Expected one-year profit `(1 - Y)(P(1 + t) - E)` and churn `Y` for every
/// policy and action, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceTable {
    pub policies: usize,
    pub actions: Vec<f64>,
    pub value: Vec<f64>,
    pub churn: Vec<f64>,
}

impl ChoiceTable {
    pub fn build<R: ChurnResponse + ?Sized>(portfolio: &Portfolio, response: &R, actions: &ActionSet) -> Self {
        let recs = portfolio.records();
        let rows = exec::map_slice(recs, |r| {
            let y = response.churn_row(r, r.competitiveness, &actions.actions);
            let v: Vec<f64> = actions
                .actions
                .iter()
                .zip(&y)
                .map(|(&t, &y)| (1.0 - y) * margin(r, t))
                .collect();
            (v, y)
        });
        let mut value = Vec::with_capacity(recs.len() * actions.len());
        let mut churn = Vec::with_capacity(recs.len() * actions.len());
        for (v, y) in rows {
            value.extend(v);
            churn.extend(y);
        }
        ChoiceTable {
            policies: recs.len(),
            actions: actions.actions.clone(),
            value,
            churn,
        }
    }

    /// Direct construction from `value[i][a]` and `churn[i][a]`.
    pub fn from_parts(actions: Vec<f64>, value: &[Vec<f64>], churn: &[Vec<f64>]) -> Result<Self> {
        let a = actions.len();
        if value.len() != churn.len() || value.iter().chain(churn).any(|r| r.len() != a) || a == 0 {
            return Err(Error::invalid("value and churn tables must be N x A"));
        }
        Ok(ChoiceTable {
            policies: value.len(),
            actions,
            value: value.concat(),
            churn: churn.concat(),
        })
    }

    pub fn width(&self) -> usize {
        self.actions.len()
    }

    pub fn value(&self, i: usize, a: usize) -> f64 {
        self.value[i * self.width() + a]
    }

    pub fn churn(&self, i: usize, a: usize) -> f64 {
        self.churn[i * self.width() + a]
    }

    /// Total profit and mean churn of a plan given as action indices.
    pub fn evaluate(&self, plan: &[usize]) -> (f64, f64) {
        let p: f64 = plan.iter().enumerate().map(|(i, &a)| self.value(i, a)).sum();
        let c: f64 = plan.iter().enumerate().map(|(i, &a)| self.churn(i, a)).sum();
        (p, c / self.policies as f64)
    }
}
