//! Multi-period renewal plans with yearly churn caps.
//!
//! Year `h` churn is the single-period model evaluated at the year-`h`
//! state: the rate change `t_h` and the competitiveness carried over from
//! earlier years by a [`CompetitivenessUpdate`]. Premiums compound and
//! expenses stay fixed. Per-policy rate-change paths are enumerated and the
//! yearly caps are dualised with one multiplier per year.

use serde::{Deserialize, Serialize};

use super::frontier::max_profit_on;
use super::{margin, ActionSet, ChoiceTable, ChurnResponse};
use crate::error::{Error, Result};
use crate::exec;
use crate::portfolio::{PolicyRecord, Portfolio};

/// Competitiveness at the start of the next year given this year's value
/// and the offered rate change.
pub trait CompetitivenessUpdate: Sync {
    fn next(&self, competitiveness: f64, rate_change: f64) -> f64;
}

/// Competitor prices stay put while the own premium grows by `t`:
/// `comp' = (1 + comp) / (1 + t) - 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompetitorsFixed;

impl CompetitivenessUpdate for CompetitorsFixed {
    fn next(&self, competitiveness: f64, rate_change: f64) -> f64 {
        (1.0 + competitiveness) / (1.0 + rate_change) - 1.0
    }
}

/// No feedback: competitiveness never changes.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenCompetitiveness;

impl CompetitivenessUpdate for FrozenCompetitiveness {
    fn next(&self, competitiveness: f64, _rate_change: f64) -> f64 {
        competitiveness
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiperiodConfig {
    /// Weight year `j` by the survival probability through year `j`; when
    /// false each year counts with its own retention `1 - Y_j` only.
    pub survival_weighting: bool,
    /// Premium in year `j` is `P_old * prod_{k<=j}(1 + t_k)`; when false it
    /// is `P_old * (1 + t_j)`.
    pub compound_premium: bool,
    pub max_iter: usize,
    /// Cap on `N * A^tau` table entries.
    pub max_table: usize,
    /// Relative dual gap at which the multiplier search stops.
    pub gap_tolerance: f64,
}

impl Default for MultiperiodConfig {
    fn default() -> Self {
        MultiperiodConfig {
            survival_weighting: true,
            compound_premium: true,
            max_iter: 500,
            max_table: 50_000_000,
            gap_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearOutcome {
    /// Mean expected churn of the year's renewal offers.
    pub churn: f64,
    /// Expected profit booked in the year.
    pub profit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalPlan {
    pub tau: usize,
    pub caps: Vec<f64>,
    /// `rates[i][j]`: rate change of policy `i` in year `j`.
    pub rates: Vec<Vec<f64>>,
    pub years: Vec<YearOutcome>,
    pub objective: f64,
    pub dual_bound: f64,
    pub dual_gap: f64,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-year churn and weighted margin along one path.
fn path_terms<R, U>(
    r: &PolicyRecord,
    rates: &[f64],
    response: &R,
    feedback: &U,
    config: &MultiperiodConfig,
) -> (Vec<f64>, Vec<f64>)
where
    R: ChurnResponse + ?Sized,
    U: CompetitivenessUpdate + ?Sized,
{
    let mut comp = r.competitiveness;
    let mut growth = 1.0;
    let mut survival = 1.0;
    let mut churn = Vec::with_capacity(rates.len());
    let mut profit = Vec::with_capacity(rates.len());
    for &t in rates {
        let y = response.churn(r, t, comp);
        survival *= 1.0 - y;
        growth = if config.compound_premium {
            growth * (1.0 + t)
        } else {
            1.0 + t
        };
        let weight = if config.survival_weighting { survival } else { 1.0 - y };
        profit.push(weight * (r.premium_old * growth - r.expenses));
        churn.push(y);
        comp = feedback.next(comp, t);
    }
    (churn, profit)
}

/// Per-year churn and profit of any plan (`rates[i][j]`).
pub fn expected_outcomes<R, U>(
    rates: &[Vec<f64>],
    portfolio: &Portfolio,
    response: &R,
    feedback: &U,
    config: &MultiperiodConfig,
) -> Result<Vec<YearOutcome>>
where
    R: ChurnResponse + ?Sized,
    U: CompetitivenessUpdate + ?Sized,
{
    if rates.len() != portfolio.len() {
        return Err(Error::invalid("one rate path per policy required"));
    }
    let tau = rates.first().map_or(0, |r| r.len());
    if rates.iter().any(|r| r.len() != tau) {
        return Err(Error::invalid("rate paths must share one horizon"));
    }
    let terms = exec::map_range(rates.len(), |i| {
        path_terms(&portfolio.records()[i], &rates[i], response, feedback, config)
    });
    let n = portfolio.len() as f64;
    Ok((0..tau)
        .map(|j| YearOutcome {
            churn: terms.iter().map(|t| t.0[j]).sum::<f64>() / n,
            profit: terms.iter().map(|t| t.1[j]).sum(),
        })
        .collect())
}

/// Caps equal to the model-implied churn of repeating each policy's
/// observed rate change every year.
pub fn default_caps<R, U>(
    portfolio: &Portfolio,
    response: &R,
    feedback: &U,
    tau: usize,
    config: &MultiperiodConfig,
) -> Result<Vec<f64>>
where
    R: ChurnResponse + ?Sized,
    U: CompetitivenessUpdate + ?Sized,
{
    let rates: Vec<Vec<f64>> = portfolio.records().iter().map(|r| vec![r.rate_change; tau]).collect();
    Ok(expected_outcomes(&rates, portfolio, response, feedback, config)?
        .iter()
        .map(|y| y.churn)
        .collect())
}

/// Path values and yearly churn for every policy and path.
struct PathTable {
    n: usize,
    paths: usize,
    tau: usize,
    value: Vec<f64>,
    /// `churn[(i * paths + p) * tau + j]`.
    churn: Vec<f64>,
}

impl PathTable {
    fn c(&self, i: usize, p: usize, j: usize) -> f64 {
        self.churn[(i * self.paths + p) * self.tau + j]
    }

    fn v(&self, i: usize, p: usize) -> f64 {
        self.value[i * self.paths + p]
    }

    /// Per-policy argmax of `value - mu . churn` (ties: lower total churn,
    /// then lower path index). Returns the plan and the Lagrangian sum.
    fn choose(&self, mu: &[f64]) -> (Vec<usize>, f64) {
        let picks = exec::map_range(self.n, |i| {
            let mut best = (0, f64::NEG_INFINITY, f64::INFINITY);
            for p in 0..self.paths {
                let load: f64 = (0..self.tau).map(|j| mu[j] * self.c(i, p, j)).sum();
                let total: f64 = (0..self.tau).map(|j| self.c(i, p, j)).sum();
                let score = self.v(i, p) - load;
                if score > best.1 || (score == best.1 && total < best.2) {
                    best = (p, score, total);
                }
            }
            (best.0, best.1)
        });
        let lag = picks.iter().map(|p| p.1).sum();
        (picks.into_iter().map(|p| p.0).collect(), lag)
    }

    fn totals(&self, plan: &[usize]) -> (f64, Vec<f64>) {
        let mut loads = vec![0.0; self.tau];
        let mut value = 0.0;
        for (i, &p) in plan.iter().enumerate() {
            value += self.v(i, p);
            for (j, l) in loads.iter_mut().enumerate() {
                *l += self.c(i, p, j);
            }
        }
        (value, loads)
    }

    /// Greedy repair of cap violations: moves policies to paths that cut
    /// the violated loads at the least value lost per unit of relief.
    fn repair(&self, plan: &mut [usize], caps: &[f64], tol: f64) -> bool {
        for _round in 0..50 {
            let (_, loads) = self.totals(plan);
            let over: Vec<bool> = loads.iter().zip(caps).map(|(l, c)| *l > c + tol).collect();
            if !over.iter().any(|&o| o) {
                return true;
            }
            let mut moves: Vec<(f64, usize, usize)> = (0..self.n)
                .filter_map(|i| {
                    let cur = plan[i];
                    let mut best: Option<(f64, usize)> = None;
                    for p in 0..self.paths {
                        let relief: f64 = (0..self.tau)
                            .filter(|&j| over[j])
                            .map(|j| self.c(i, cur, j) - self.c(i, p, j))
                            .sum();
                        // Never worsen a year that is already over its cap.
                        if relief <= 0.0 {
                            continue;
                        }
                        let loss = self.v(i, cur) - self.v(i, p);
                        let ratio = loss.max(0.0) / relief;
                        if best.is_none_or(|b| ratio < b.0) {
                            best = Some((ratio, p));
                        }
                    }
                    best.map(|(r, p)| (r, i, p))
                })
                .collect();
            if moves.is_empty() {
                return false;
            }
            moves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut loads = loads;
            for (_, i, p) in moves {
                if !loads.iter().zip(caps).any(|(l, c)| *l > c + tol) {
                    break;
                }
                for (j, l) in loads.iter_mut().enumerate() {
                    *l += self.c(i, p, j) - self.c(i, plan[i], j);
                }
                plan[i] = p;
            }
        }
        let (_, loads) = self.totals(plan);
        loads.iter().zip(caps).all(|(l, c)| *l <= c + tol)
    }

    /// Single-policy improvements that keep every cap.
    fn polish(&self, plan: &mut [usize], caps: &[f64], tol: f64) {
        let (_, mut loads) = self.totals(plan);
        for _ in 0..50 {
            let mut changed = false;
            for i in 0..self.n {
                let cur = plan[i];
                let mut best: Option<usize> = None;
                for p in 0..self.paths {
                    let better = self.v(i, p)
                        > best.map_or(self.v(i, cur), |b| self.v(i, b)) + 1e-12 * self.v(i, cur).abs().max(1.0);
                    if better && (0..self.tau).all(|j| loads[j] - self.c(i, cur, j) + self.c(i, p, j) <= caps[j] + tol)
                    {
                        best = Some(p);
                    }
                }
                if let Some(p) = best {
                    for (j, l) in loads.iter_mut().enumerate() {
                        *l += self.c(i, p, j) - self.c(i, cur, j);
                    }
                    plan[i] = p;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
}

impl PathTable {
    /// Joint moves of two policies that keep every cap; only run when the
    /// pair neighbourhood is small.
    fn pair_polish(&self, plan: &mut [usize], caps: &[f64], tol: f64) {
        let (_, mut loads) = self.totals(plan);
        for _ in 0..20 {
            let mut changed = false;
            for i in 0..self.n {
                for k in i + 1..self.n {
                    let (ci, ck) = (plan[i], plan[k]);
                    let base = self.v(i, ci) + self.v(k, ck);
                    let mut best: Option<(f64, usize, usize)> = None;
                    for p in 0..self.paths {
                        for q in 0..self.paths {
                            let v = self.v(i, p) + self.v(k, q);
                            if v <= best.map_or(base, |b| b.0) + 1e-12 * base.abs().max(1.0) {
                                continue;
                            }
                            let fits = (0..self.tau).all(|j| {
                                loads[j] - self.c(i, ci, j) - self.c(k, ck, j) + self.c(i, p, j) + self.c(k, q, j)
                                    <= caps[j] + tol
                            });
                            if fits {
                                best = Some((v, p, q));
                            }
                        }
                    }
                    if let Some((_, p, q)) = best {
                        for (j, l) in loads.iter_mut().enumerate() {
                            *l += self.c(i, p, j) + self.c(k, q, j) - self.c(i, ci, j) - self.c(k, ck, j);
                        }
                        plan[i] = p;
                        plan[k] = q;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
}

/// Largest `(N * paths)^2` for which pair moves are tried.
const PAIR_BUDGET: usize = 10_000_000;

fn path_actions(p: usize, a: usize, tau: usize) -> Vec<usize> {
    let mut digits = vec![0; tau];
    let mut rest = p;
    for j in (0..tau).rev() {
        digits[j] = rest % a;
        rest /= a;
    }
    digits
}

/// Multi-period plan maximising expected (survival-weighted) profit over
/// `tau` years subject to a mean-churn cap per year.
pub fn multiperiod<R, U>(
    portfolio: &Portfolio,
    response: &R,
    actions: &ActionSet,
    caps: &[f64],
    feedback: &U,
    config: &MultiperiodConfig,
) -> Result<RenewalPlan>
where
    R: ChurnResponse + ?Sized,
    U: CompetitivenessUpdate + ?Sized,
{
    let tau = caps.len();
    if tau == 0 {
        return Err(Error::invalid("horizon must be at least one year"));
    }
    if portfolio.is_empty() {
        return Err(Error::invalid("empty portfolio"));
    }
    let n = portfolio.len();
    let nf = n as f64;
    let a = actions.len();
    if tau == 1 {
        let table = ChoiceTable::build(portfolio, response, actions);
        return match max_profit_on(&table, caps[0]) {
            super::FrontierEntry::Infeasible { alpha, min_churn } => Err(Error::Infeasible(format!(
                "churn cap {alpha:.6} below the minimum achievable {min_churn:.6}"
            ))),
            super::FrontierEntry::Solved(p) => Ok(RenewalPlan {
                tau,
                caps: caps.to_vec(),
                rates: p.plan.iter().map(|&t| vec![t]).collect(),
                years: vec![YearOutcome {
                    churn: p.expected_churn,
                    profit: p.expected_profit,
                }],
                objective: p.expected_profit,
                dual_bound: p.expected_profit + p.dual_gap,
                dual_gap: p.dual_gap,
                multipliers: vec![p.multiplier],
                iterations: 0,
                converged: true,
            }),
        };
    }
    let paths = a
        .checked_pow(tau as u32)
        .filter(|p| p.saturating_mul(n) <= config.max_table)
        .ok_or_else(|| {
            Error::invalid(format!(
                "{a} actions over {tau} years for {n} policies exceeds the path table cap {}",
                config.max_table
            ))
        })?;
    let rows = exec::map_slice(portfolio.records(), |r| {
        let mut value = Vec::with_capacity(paths);
        let mut churn = Vec::with_capacity(paths * tau);
        for p in 0..paths {
            let rates: Vec<f64> = path_actions(p, a, tau).iter().map(|&k| actions.actions[k]).collect();
            let (c, v) = path_terms(r, &rates, response, feedback, config);
            value.push(v.iter().sum::<f64>());
            churn.extend(c);
        }
        (value, churn)
    });
    let mut table = PathTable {
        n,
        paths,
        tau,
        value: Vec::with_capacity(n * paths),
        churn: Vec::with_capacity(n * paths * tau),
    };
    for (v, c) in rows {
        table.value.extend(v);
        table.churn.extend(c);
    }
    let cap_loads: Vec<f64> = caps.iter().map(|c| c * nf).collect();
    let tol = 1e-9 * nf;
    for j in 0..tau {
        let least: f64 = (0..n)
            .map(|i| (0..paths).map(|p| table.c(i, p, j)).fold(f64::INFINITY, f64::min))
            .sum();
        if least > cap_loads[j] + tol {
            return Err(Error::Infeasible(format!(
                "year {} cap {:.6} below the minimum achievable {:.6}",
                j + 1,
                caps[j],
                least / nf
            )));
        }
    }
    let dual_at = |lag: f64, mu: &[f64]| lag + mu.iter().zip(&cap_loads).map(|(m, c)| m * c).sum::<f64>();
    let mut mu = vec![0.0; tau];
    let mut best_dual = f64::INFINITY;
    let mut best_mu = mu.clone();
    let mut incumbent: Option<(f64, Vec<usize>)> = None;
    // Scale for steps before an incumbent exists: typical one-year margin.
    let scale = portfolio.records().iter().map(|r| margin(r, 0.0).abs()).sum::<f64>() / nf;
    let mut iterations = 0;
    for k in 0..config.max_iter.max(1) {
        iterations = k + 1;
        let (plan, lag) = table.choose(&mu);
        let dual = dual_at(lag, &mu);
        if dual < best_dual {
            best_dual = dual;
            best_mu = mu.clone();
        }
        let (_, loads) = table.totals(&plan);
        let mut candidate = plan;
        if table.repair(&mut candidate, &cap_loads, tol) {
            table.polish(&mut candidate, &cap_loads, tol);
            let (v, _) = table.totals(&candidate);
            if incumbent.as_ref().is_none_or(|b| v > b.0) {
                incumbent = Some((v, candidate));
            }
        }
        let g: Vec<f64> = cap_loads.iter().zip(&loads).map(|(c, l)| c - l).collect();
        let norm2: f64 = g.iter().map(|x| x * x).sum();
        if let Some((v, _)) = &incumbent {
            if best_dual - v <= config.gap_tolerance * v.abs().max(1.0) {
                break;
            }
        }
        if norm2 == 0.0 {
            break;
        }
        let step = match &incumbent {
            Some((v, _)) => (dual - v).max(0.0) / norm2,
            None => scale / (libm::sqrt(norm2) * libm::sqrt(k as f64 + 1.0)),
        };
        // Descent on the dual: dL/dmu_j = cap_j - load_j.
        for (m, gj) in mu.iter_mut().zip(&g) {
            *m = (*m - step * gj).max(0.0);
        }
    }
    if let Some((v, plan)) = incumbent.as_mut() {
        if (n * paths).saturating_mul(n * paths) <= PAIR_BUDGET {
            table.pair_polish(plan, &cap_loads, tol);
            table.polish(plan, &cap_loads, tol);
            *v = table.totals(plan).0;
        }
    }
    let (objective, plan) = incumbent.ok_or_else(|| Error::NonConvergence {
        iterations,
        detail: "no plan meeting every yearly cap was found".into(),
    })?;
    let dual_gap = (best_dual - objective).max(0.0);
    let converged = dual_gap <= config.gap_tolerance * objective.abs().max(1.0);
    if !converged {
        log::warn!("multiplier search stopped with dual gap {dual_gap:.4} after {iterations} iterations; returning the best feasible plan");
    }
    let rates: Vec<Vec<f64>> = plan
        .iter()
        .map(|&p| path_actions(p, a, tau).iter().map(|&k| actions.actions[k]).collect())
        .collect();
    let years = expected_outcomes(&rates, portfolio, response, feedback, config)?;
    Ok(RenewalPlan {
        tau,
        caps: caps.to_vec(),
        rates,
        years,
        objective,
        dual_bound: best_dual.max(objective),
        dual_gap,
        multipliers: best_mu,
        iterations,
        converged,
    })
}
