//! Single-period frontier and boundary solutions.

use serde::{Deserialize, Serialize};

use super::{margin, ActionSet, ChoiceTable, ChurnResponse};
use crate::error::{Error, Result};
use crate::portfolio::Portfolio;

const BISECTION_STEPS: usize = 200;
const POLISH_PASSES: usize = 50;

/// Separable problem `max sum obj[i][a_i]` s.t. `sum res[i][a_i] <= cap`.
struct Knapsack<'a> {
    n: usize,
    w: usize,
    obj: &'a [f64],
    res: &'a [f64],
}

struct Choice {
    plan: Vec<usize>,
    obj: f64,
    res: f64,
    lagrangian: f64,
}

struct Solved {
    plan: Vec<usize>,
    obj: f64,
    res: f64,
    dual: f64,
    multiplier: f64,
}

impl<'a> Knapsack<'a> {
    fn at(&self, i: usize, a: usize) -> (f64, f64) {
        (self.obj[i * self.w + a], self.res[i * self.w + a])
    }

    /// Per-policy argmax of `obj - mu res`; ties prefer lower resource use,
    /// then the lower action index.
    fn choose(&self, mu: f64) -> Choice {
        let mut plan = Vec::with_capacity(self.n);
        let (mut obj, mut res, mut lag) = (0.0, 0.0, 0.0);
        for i in 0..self.n {
            let mut best = 0;
            let (o0, r0) = self.at(i, 0);
            let mut best_val = o0 - mu * r0;
            let mut best_res = r0;
            for a in 1..self.w {
                let (o, r) = self.at(i, a);
                let v = o - mu * r;
                if v > best_val || (v == best_val && r < best_res) {
                    best = a;
                    best_val = v;
                    best_res = r;
                }
            }
            plan.push(best);
            let (o, r) = self.at(i, best);
            obj += o;
            res += r;
            lag += best_val;
        }
        Choice {
            plan,
            obj,
            res,
            lagrangian: lag,
        }
    }

    fn totals(&self, plan: &[usize]) -> (f64, f64) {
        plan.iter().enumerate().fold((0.0, 0.0), |(o, r), (i, &a)| {
            let (oi, ri) = self.at(i, a);
            (o + oi, r + ri)
        })
    }

    fn min_resource(&self) -> f64 {
        (0..self.n)
            .map(|i| (0..self.w).map(|a| self.at(i, a).1).fold(f64::INFINITY, f64::min))
            .sum()
    }

    /// Lagrangian bisection on the multiplier, then a ratio-greedy move
    /// towards the infeasible side and 1-opt polishing within the slack.
    /// `Err(min_res)` when even the resource-minimising plan exceeds `cap`.
    fn solve(&self, cap: f64, tol: f64) -> std::result::Result<Solved, f64> {
        let min_res = self.min_resource();
        if min_res > cap + tol {
            return Err(min_res);
        }
        let zero = self.choose(0.0);
        if zero.res <= cap + tol {
            return Ok(Solved {
                obj: zero.obj,
                res: zero.res,
                dual: zero.obj,
                plan: zero.plan,
                multiplier: 0.0,
            });
        }
        let dual_of = |c: &Choice, mu: f64| c.lagrangian + mu * cap;
        let mut dual = dual_of(&zero, 0.0);
        let (mut lo, mut lo_choice) = (0.0, zero);
        let mut hi = 1.0;
        let mut hi_choice = self.choose(hi);
        dual = dual.min(dual_of(&hi_choice, hi));
        let mut guard = 0;
        while hi_choice.res > cap + tol {
            lo = hi;
            lo_choice = hi_choice;
            hi *= 2.0;
            hi_choice = self.choose(hi);
            dual = dual.min(dual_of(&hi_choice, hi));
            guard += 1;
            if guard > 2000 {
                // Unreachable: at a large enough multiplier the choice is
                // the resource-minimising plan, which is feasible.
                return Err(min_res);
            }
        }
        for _ in 0..BISECTION_STEPS {
            if hi_choice.res >= cap - tol.max(1e-6 * cap.abs()) || hi - lo < 1e-12 * hi.max(1.0) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let c = self.choose(mid);
            dual = dual.min(dual_of(&c, mid));
            if c.res <= cap + tol {
                hi = mid;
                hi_choice = c;
            } else {
                lo = mid;
                lo_choice = c;
            }
        }
        let mut plan = hi_choice.plan;
        let mut res = hi_choice.res;
        // Ratio-greedy moves to the lower-multiplier choice.
        let mut moves: Vec<(f64, f64, usize)> = (0..self.n)
            .filter(|&i| lo_choice.plan[i] != plan[i])
            .map(|i| {
                let (o1, r1) = self.at(i, lo_choice.plan[i]);
                let (o0, r0) = self.at(i, plan[i]);
                (o1 - o0, r1 - r0, i)
            })
            .filter(|m| m.0 > 0.0)
            .collect();
        moves.sort_by(|a, b| {
            let ra = if a.1 > 0.0 { a.0 / a.1 } else { f64::INFINITY };
            let rb = if b.1 > 0.0 { b.0 / b.1 } else { f64::INFINITY };
            rb.total_cmp(&ra).then(a.2.cmp(&b.2))
        });
        for (_, d_res, i) in moves {
            if res + d_res <= cap + tol {
                plan[i] = lo_choice.plan[i];
                res += d_res;
            }
        }
        // 1-opt: best single-policy improvement that keeps the cap.
        for _ in 0..POLISH_PASSES {
            let mut changed = false;
            for i in 0..self.n {
                let (oc, rc) = self.at(i, plan[i]);
                let mut best: Option<(usize, f64, f64)> = None;
                for a in 0..self.w {
                    let (o, r) = self.at(i, a);
                    if o > oc + 1e-12 * oc.abs().max(1.0) && res - rc + r <= cap + tol && best.is_none_or(|b| o > b.1) {
                        best = Some((a, o, r));
                    }
                }
                if let Some((a, _, r)) = best {
                    plan[i] = a;
                    res += r - rc;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let (obj_exact, res_exact) = self.totals(&plan);
        Ok(Solved {
            plan,
            obj: obj_exact,
            res: res_exact,
            dual: dual.max(obj_exact),
            multiplier: hi,
        })
    }
}

/// Feasible tolerance on mean churn.
const CHURN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub alpha: f64,
    pub expected_profit: f64,
    pub expected_churn: f64,
    /// Chosen rate change per policy.
    pub plan: Vec<f64>,
    pub action_index: Vec<usize>,
    /// Upper bound on `optimum - expected_profit`.
    pub dual_gap: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FrontierEntry {
    Solved(FrontierPoint),
    Infeasible { alpha: f64, min_churn: f64 },
}

impl FrontierEntry {
    pub fn point(&self) -> Option<&FrontierPoint> {
        match self {
            FrontierEntry::Solved(p) => Some(p),
            FrontierEntry::Infeasible { .. } => None,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            FrontierEntry::Solved(p) => p.alpha,
            FrontierEntry::Infeasible { alpha, .. } => *alpha,
        }
    }
}

/// Maximal expected profit at mean churn at most `alpha`.
pub fn max_profit_on(table: &ChoiceTable, alpha: f64) -> FrontierEntry {
    let n = table.policies as f64;
    let k = Knapsack {
        n: table.policies,
        w: table.width(),
        obj: &table.value,
        res: &table.churn,
    };
    match k.solve(alpha * n, CHURN_TOL * n) {
        Err(min_res) => FrontierEntry::Infeasible {
            alpha,
            min_churn: min_res / n,
        },
        Ok(s) => FrontierEntry::Solved(FrontierPoint {
            alpha,
            expected_profit: s.obj,
            expected_churn: s.res / n,
            plan: s.plan.iter().map(|&a| table.actions[a]).collect(),
            dual_gap: (s.dual - s.obj).max(0.0),
            action_index: s.plan,
            multiplier: s.multiplier,
        }),
    }
}

/// Gives `p` the plan of `from`, keeping `p`'s dual bound.
fn reassign(p: &mut FrontierPoint, from: &FrontierPoint) {
    let bound = p.expected_profit + p.dual_gap;
    p.dual_gap = (bound - from.expected_profit).max(0.0);
    p.expected_profit = from.expected_profit;
    p.expected_churn = from.expected_churn;
    p.plan = from.plan.clone();
    p.action_index = from.action_index.clone();
}

/// Frontier over an ascending cap grid, post-processed so profit and churn
/// are both non-decreasing: a plan feasible at a tighter cap and at least as
/// profitable replaces a looser cap's plan, and vice versa.
pub fn frontier_on(table: &ChoiceTable, alphas: &[f64]) -> Result<Vec<FrontierEntry>> {
    if alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("alpha grid must be ascending"));
    }
    let mut entries: Vec<FrontierEntry> = crate::exec::map_slice(alphas, |&a| max_profit_on(table, a));
    for _ in 0..entries.len() + 1 {
        let mut changed = false;
        for k in 1..entries.len() {
            let (left, right) = entries.split_at_mut(k);
            let (FrontierEntry::Solved(prev), FrontierEntry::Solved(cur)) = (&mut left[k - 1], &mut right[0]) else {
                continue;
            };
            if cur.expected_profit < prev.expected_profit {
                reassign(cur, prev);
                changed = true;
            } else if (cur.expected_churn <= prev.alpha + CHURN_TOL && cur.expected_profit > prev.expected_profit)
                || (cur.expected_churn < prev.expected_churn && cur.expected_profit == prev.expected_profit)
            {
                reassign(prev, cur);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(entries)
}

pub fn frontier<R: ChurnResponse + ?Sized>(
    portfolio: &Portfolio,
    response: &R,
    actions: &ActionSet,
    alphas: &[f64],
) -> Result<Vec<FrontierEntry>> {
    frontier_on(&ChoiceTable::build(portfolio, response, actions), alphas)
}

/// Expected profit and mean churn of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub profit: f64,
    pub churn: f64,
}

/// Model-implied outcome of the observed rate changes.
pub fn realized_outcome<R: ChurnResponse + ?Sized>(portfolio: &Portfolio, response: &R) -> Outcome {
    let (mut profit, mut churn) = (0.0, 0.0);
    for r in portfolio.records() {
        let y = response.churn(r, r.rate_change, r.competitiveness);
        profit += (1.0 - y) * margin(r, r.rate_change);
        churn += y;
    }
    Outcome {
        profit,
        churn: churn / portfolio.len() as f64,
    }
}

/// Minimal-churn plan with expected profit at least a floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinChurnPoint {
    pub profit_floor: f64,
    pub expected_profit: f64,
    pub expected_churn: f64,
    pub plan: Vec<f64>,
    pub action_index: Vec<usize>,
    /// Upper bound on `expected_churn - optimum` (mean churn units).
    pub dual_gap: f64,
}

/// Minimal mean churn at expected profit at least `floor`.
pub fn min_churn_on(table: &ChoiceTable, floor: f64) -> Result<MinChurnPoint> {
    let n = table.policies as f64;
    let neg_churn: Vec<f64> = table.churn.iter().map(|c| -c).collect();
    let neg_value: Vec<f64> = table.value.iter().map(|v| -v).collect();
    let k = Knapsack {
        n: table.policies,
        w: table.width(),
        obj: &neg_churn,
        res: &neg_value,
    };
    let tol = 1e-9 * floor.abs().max(1.0);
    match k.solve(-floor, tol) {
        Err(min_res) => Err(Error::Infeasible(format!(
            "profit floor {floor:.2} exceeds the maximum expected profit {:.2}",
            -min_res
        ))),
        Ok(s) => Ok(MinChurnPoint {
            profit_floor: floor,
            expected_profit: -s.res,
            expected_churn: -s.obj / n,
            plan: s.plan.iter().map(|&a| table.actions[a]).collect(),
            action_index: s.plan,
            dual_gap: ((s.dual - s.obj) / n).max(0.0),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySolutions {
    pub realized: Outcome,
    /// Maximal profit at no more than the realized churn.
    pub a: FrontierEntry,
    /// Minimal churn at no less than the realized profit.
    pub b: std::result::Result<MinChurnPoint, String>,
}

pub fn boundary_solutions<R: ChurnResponse + ?Sized>(
    portfolio: &Portfolio,
    response: &R,
    actions: &ActionSet,
) -> BoundarySolutions {
    let table = ChoiceTable::build(portfolio, response, actions);
    boundary_on(&table, realized_outcome(portfolio, response))
}

pub fn boundary_on(table: &ChoiceTable, realized: Outcome) -> BoundarySolutions {
    BoundarySolutions {
        realized,
        a: max_profit_on(table, realized.churn),
        b: min_churn_on(table, realized.profit).map_err(|e| e.to_string()),
    }
}
