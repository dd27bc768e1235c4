//! Regression trees, exact greedy split search and the regularised leaf solve.

use serde::{Deserialize, Serialize};

use super::decimal;
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;

/// Minimiser of `G w + H w^2 / 2 + a |w| + lambda w^2`.
///
/// The ridge term carries `lambda` rather than `lambda / 2`, hence `H + 2 lambda`
/// in the denominator.
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> Result<f64> {
    let shrunk = (g.abs() - alpha).max(0.0);
    if shrunk == 0.0 {
        return Ok(0.0);
    }
    let denom = h + 2.0 * lambda;
    if !(denom > 0.0) {
        return Err(Error::UnboundedLeaf { grad: g });
    }
    Ok(-g.signum() * shrunk / denom)
}

/// Split-search settings shared by both boosting modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Minimum instances per child (at least 1).
    pub min_child: usize,
    /// First-order mode: least-squares score on pseudo-residuals, no penalties.
    pub first_order: bool,
}

impl SplitParams {
    /// `-min_w objective` of a node with gradient sum `g`, hessian sum `h`
    /// and `n` instances.
    pub fn score(&self, g: f64, h: f64, n: usize) -> f64 {
        if self.first_order {
            return g * g / (2.0 * n as f64);
        }
        let shrunk = (g.abs() - self.alpha).max(0.0);
        let denom = h + 2.0 * self.lambda;
        if shrunk == 0.0 {
            0.0
        } else if denom > 0.0 {
            shrunk * shrunk / (2.0 * denom)
        } else {
            f64::INFINITY
        }
    }

    fn penalty(&self) -> f64 {
        if self.first_order {
            0.0
        } else {
            self.gamma
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    /// Rows with `x <= threshold` go left.
    pub threshold: f64,
    pub gain: f64,
    pub left_count: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    g: f64,
    h: f64,
    n: usize,
}

fn better(candidate: &Split, incumbent: &Option<Split>) -> bool {
    match incumbent {
        None => true,
        Some(b) => candidate.gain > b.gain,
    }
}

/// Best threshold on one feature, scanning `rows` sorted by that feature.
fn scan_feature(
    feature: usize,
    column: &[f64],
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    total: Sums,
    parent_score: f64,
    params: &SplitParams,
) -> Option<Split> {
    let mut best: Option<Split> = None;
    let mut left = Sums::default();
    let min_child = params.min_child.max(1);
    for w in 0..rows.len().saturating_sub(1) {
        let r = rows[w] as usize;
        left.g += grad[r];
        left.h += hess[r];
        left.n += 1;
        let x = column[r];
        let next = column[rows[w + 1] as usize];
        if !(next > x) {
            continue;
        }
        let right_n = total.n - left.n;
        if left.n < min_child || right_n < min_child {
            continue;
        }
        let gain = params.score(left.g, left.h, left.n) + params.score(total.g - left.g, total.h - left.h, right_n)
            - parent_score
            - params.penalty();
        if !gain.is_finite() {
            continue;
        }
        let cand = Split {
            feature,
            threshold: x,
            gain,
            left_count: left.n,
        };
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    best
}

/// Split search on a node whose rows are given per candidate feature, each
/// list sorted ascending by that feature. Returns the max-gain split if its
/// gain is positive; ties go to the lowest feature index, then the lowest
/// threshold.
pub(crate) fn best_split_sorted(
    columns: &[Vec<f64>],
    sorted: &[(usize, &[u32])],
    grad: &[f64],
    hess: &[f64],
    params: &SplitParams,
) -> Option<Split> {
    let rows = sorted.first()?.1;
    let mut total = Sums::default();
    for &r in rows {
        total.g += grad[r as usize];
        total.h += hess[r as usize];
        total.n += 1;
    }
    if total.n < 2 * params.min_child.max(1) {
        return None;
    }
    let parent = params.score(total.g, total.h, total.n);
    let per_feature = exec::map_slice(sorted, |&(k, rows)| {
        scan_feature(k, &columns[k], rows, grad, hess, total, parent, params)
    });
    // Candidate features arrive in ascending index order; strict improvement
    // keeps the lowest index on ties.
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.sort_by_key(|&i| sorted[i].0);
    let mut best: Option<Split> = None;
    for i in order {
        if let Some(s) = per_feature[i] {
            if better(&s, &best) {
                best = Some(s);
            }
        }
    }
    best.filter(|s| s.gain > 0.0)
}

pub(crate) fn column_major(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.cols()).map(|k| x.column(k)).collect()
}

pub(crate) fn argsort(column: &[f64], rows: &[u32]) -> Vec<u32> {
    let mut v = rows.to_vec();
    v.sort_by(|&a, &b| column[a as usize].total_cmp(&column[b as usize]).then(a.cmp(&b)));
    v
}

/// Exact greedy split search over the node `rows` and candidate `features`.
pub fn best_split(
    x: &Matrix,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    features: &[usize],
    params: &SplitParams,
) -> Option<Split> {
    let columns = column_major(x);
    let rows: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let sorted: Vec<(usize, Vec<u32>)> = features.iter().map(|&k| (k, argsort(&columns[k], &rows))).collect();
    let views: Vec<(usize, &[u32])> = sorted.iter().map(|(k, v)| (*k, v.as_slice())).collect();
    best_split_sorted(&columns, &views, grad, hess, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        #[serde(with = "decimal")]
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        #[serde(with = "decimal")]
        weight: f64,
        count: usize,
    },
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf(weight: f64, count: usize) -> Self {
        DecisionTree {
            nodes: vec![Node::Leaf { weight, count }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight, .. } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Fitted instance counts of all leaves.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { count, .. } => Some(*count),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                _ => None,
            })
            .max()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Format("tree without nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = node {
                if *left <= i || *right <= i || *left >= n || *right >= n {
                    return Err(Error::Format(format!("node {i} has invalid children")));
                }
            }
        }
        Ok(())
    }
}

/// Grows one tree level by level.
///
/// `sorted[k]` holds the sampled rows ordered by feature `features[k]`; it is
/// partitioned in place so that every open node owns the same contiguous
/// segment in each list. `leaf_value` receives the rows of a finished leaf
/// with their gradient and hessian sums.
pub(crate) fn grow<F>(
    columns: &[Vec<f64>],
    features: &[usize],
    mut sorted: Vec<Vec<u32>>,
    grad: &[f64],
    hess: &[f64],
    params: &SplitParams,
    max_depth: usize,
    leaf_value: F,
) -> Result<DecisionTree>
where
    F: Fn(&[u32], f64, f64) -> Result<f64>,
{
    struct Open {
        node: usize,
        start: usize,
        end: usize,
    }
    let n = sorted.first().map_or(0, Vec::len);
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut level = vec![Open {
        node: 0,
        start: 0,
        end: n,
    }];
    let mut goes_left = vec![false; columns.first().map_or(0, Vec::len)];
    let mut depth = 0;
    while !level.is_empty() {
        let mut next = Vec::new();
        for open in level {
            let seg = open.start..open.end;
            let split = if depth < max_depth {
                let views: Vec<(usize, &[u32])> = features
                    .iter()
                    .zip(&sorted)
                    .map(|(&k, v)| (k, &v[seg.clone()]))
                    .collect();
                best_split_sorted(columns, &views, grad, hess, params)
            } else {
                None
            };
            match split {
                None => {
                    let rows = &sorted[0][seg];
                    let (g, h) = rows
                        .iter()
                        .fold((0.0, 0.0), |(g, h), &r| (g + grad[r as usize], h + hess[r as usize]));
                    nodes[open.node] = Some(Node::Leaf {
                        weight: leaf_value(rows, g, h)?,
                        count: rows.len(),
                    });
                }
                Some(s) => {
                    let col = &columns[s.feature];
                    for &r in &sorted[0][seg.clone()] {
                        goes_left[r as usize] = col[r as usize] <= s.threshold;
                    }
                    let flags = &goes_left;
                    exec::for_each_mut(&mut sorted, |_, list| {
                        stable_partition(&mut list[seg.clone()], flags);
                    });
                    let left = nodes.len();
                    nodes.push(None);
                    nodes.push(None);
                    nodes[open.node] = Some(Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left,
                        right: left + 1,
                    });
                    let mid = open.start + s.left_count;
                    next.push(Open {
                        node: left,
                        start: open.start,
                        end: mid,
                    });
                    next.push(Open {
                        node: left + 1,
                        start: mid,
                        end: open.end,
                    });
                }
            }
        }
        level = next;
        depth += 1;
    }
    Ok(DecisionTree {
        nodes: nodes.into_iter().map(|n| n.expect("every node resolved")).collect(),
    })
}

fn stable_partition(seg: &mut [u32], goes_left: &[bool]) {
    let mut right = Vec::with_capacity(seg.len());
    let mut w = 0;
    for i in 0..seg.len() {
        let r = seg[i];
        if goes_left[r as usize] {
            seg[w] = r;
            w += 1;
        } else {
            right.push(r);
        }
    }
    seg[w..].copy_from_slice(&right);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_weight_direct() {
        assert_eq!(leaf_weight(-4.0, 2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(leaf_weight(0.5, 2.0, 1.0, 0.7).unwrap(), 0.0);
        assert_eq!(leaf_weight(3.0, 1.5, 0.0, 0.0).unwrap(), -2.0);
        assert!(matches!(
            leaf_weight(1.0, 0.0, 0.0, 0.0),
            Err(Error::UnboundedLeaf { .. })
        ));
    }

    #[test]
    fn zero_gradients_do_not_split() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let params = SplitParams {
            lambda: 1.0,
            alpha: 0.0,
            gamma: 0.0,
            min_child: 1,
            first_order: false,
        };
        assert!(best_split(&x, &[0, 1, 2, 3], &[0.0; 4], &[1.0; 4], &[0], &params).is_none());
    }

    #[test]
    fn threshold_is_left_value() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let params = SplitParams {
            lambda: 0.0,
            alpha: 0.0,
            gamma: 0.0,
            min_child: 1,
            first_order: false,
        };
        let s = best_split(&x, &[0, 1, 2, 3], &[-1.0, -1.0, 1.0, 1.0], &[1.0; 4], &[0], &params).unwrap();
        assert_eq!((s.feature, s.threshold, s.left_count), (0, 2.0, 2));
        assert!((s.gain - 2.0).abs() < 1e-12);
    }

    #[test]
    fn partition_is_stable() {
        let mut seg = vec![5, 1, 4, 2, 3, 0];
        let flags = [true, false, true, false, true, false];
        stable_partition(&mut seg, &flags);
        assert_eq!(seg, vec![4, 2, 0, 5, 1, 3]);
    }
}
