//! Independent reference implementations used by the integration tests and
//! the acceptance harness. None of these share code with the library paths
//! they check.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

/// Exhaustive split enumeration: every (feature, distinct value) pair, sums
/// accumulated in row order. Ties keep the lowest feature, then threshold.
pub fn brute_force_split(
    x: &[Vec<f64>],
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    features: &[usize],
    lambda: f64,
    alpha: f64,
    gamma: f64,
    min_child: usize,
) -> Option<(usize, f64, f64)> {
    let score = |g: f64, h: f64| {
        let s = (g.abs() - alpha).max(0.0);
        if s == 0.0 {
            0.0
        } else {
            s * s / (2.0 * (h + 2.0 * lambda))
        }
    };
    let (gt, ht): (f64, f64) = rows.iter().fold((0.0, 0.0), |a, &r| (a.0 + grad[r], a.1 + hess[r]));
    let parent = score(gt, ht);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut fs = features.to_vec();
    fs.sort();
    for &k in &fs {
        let mut values: Vec<f64> = rows.iter().map(|&r| x[r][k]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &v in &values[..values.len().saturating_sub(1)] {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            let (mut gr, mut hr, mut nr) = (0.0, 0.0, 0usize);
            for &r in rows {
                if x[r][k] <= v {
                    gl += grad[r];
                    hl += hess[r];
                    nl += 1;
                } else {
                    gr += grad[r];
                    hr += hess[r];
                    nr += 1;
                }
            }
            if nl < min_child.max(1) || nr < min_child.max(1) {
                continue;
            }
            let gain = score(gl, hl) + score(gr, hr) - parent - gamma;
            if best.is_none_or(|b| gain > b.2) {
                best = Some((k, v, gain));
            }
        }
    }
    best.filter(|b| b.2 > 0.0)
}

/// Minimiser of `G w + H w^2 / 2 + a |w| + lambda w^2` by bisection on the
/// (monotone) subgradient.
pub fn numeric_leaf_weight(g: f64, h: f64, lambda: f64, a: f64) -> f64 {
    let c = h + 2.0 * lambda;
    let d = |w: f64| g + c * w + a * w.signum();
    let r = (g.abs() + a) / c + 1.0;
    let (mut lo, mut hi) = (-r, r);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // At the kink, 0 is optimal iff it lies between the one-sided slopes.
        let slope = if mid != 0.0 {
            d(mid)
        } else if g + a < 0.0 {
            -1.0
        } else if g - a > 0.0 {
            1.0
        } else {
            0.0
        };
        if slope == 0.0 {
            return mid;
        }
        if slope > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Unpenalised logistic regression by Newton's method with an intercept
/// column already included in `x`.
pub fn newton_logistic(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (xi, &yi) in x.iter().zip(y) {
            let eta: f64 = xi.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            for j in 0..p {
                grad[j] += (yi - mu) * xi[j];
                for k in 0..p {
                    hess[j][k] += w * xi[j] * xi[k];
                }
            }
        }
        let step = solve(hess, grad);
        let size: f64 = step.iter().map(|s| s.abs()).sum();
        for j in 0..p {
            beta[j] += step[j];
        }
        if size < 1e-14 {
            break;
        }
    }
    beta
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Exhaustive single-period plan search: maximise profit subject to mean
/// churn <= alpha. `value[i][a]`, `churn[i][a]` per policy and action.
/// Returns `(profit, churn, plan)` or `None` when nothing is feasible.
pub fn brute_force_plan(value: &[Vec<f64>], churn: &[Vec<f64>], alpha: f64) -> Option<(f64, f64, Vec<usize>)> {
    let n = value.len();
    let a = value[0].len();
    let mut plan = vec![0usize; n];
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    loop {
        let p: f64 = (0..n).map(|i| value[i][plan[i]]).sum();
        let c: f64 = (0..n).map(|i| churn[i][plan[i]]).sum::<f64>() / n as f64;
        if c <= alpha + 1e-12 && best.as_ref().is_none_or(|b| p > b.0) {
            best = Some((p, c, plan.clone()));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            plan[i] += 1;
            if plan[i] < a {
                break;
            }
            plan[i] = 0;
            i += 1;
        }
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Exhaustive multi-year plan search: `value[i][p]` and `churn[i][p][j]`
/// per policy, path and year; mean churn in year `j` must stay within
/// `caps[j]`. Returns the best objective and plan.
pub fn brute_force_paths(value: &[Vec<f64>], churn: &[Vec<Vec<f64>>], caps: &[f64]) -> Option<(f64, Vec<usize>)> {
    let n = value.len();
    let paths = value[0].len();
    let mut plan = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let feasible = caps
            .iter()
            .enumerate()
            .all(|(j, &cap)| (0..n).map(|i| churn[i][plan[i]][j]).sum::<f64>() / n as f64 <= cap + 1e-12);
        if feasible {
            let v: f64 = (0..n).map(|i| value[i][plan[i]]).sum();
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, plan.clone()));
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            plan[i] += 1;
            if plan[i] < paths {
                break;
            }
            plan[i] = 0;
            i += 1;
        }
    }
}
