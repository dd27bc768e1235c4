use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TruncationBounds;
use crate::stats::{median, sorted_copy};

/// Partition of the observed rate-change range into `C` intervals.
///
/// The first interval is closed on both ends, the others are left-open and
/// right-closed: `[b0, b1], (b1, b2], ..., (b_{C-1}, b_C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentGrid {
    boundaries: Vec<f64>,
    medians: Vec<f64>,
}

impl TreatmentGrid {
    /// Builds a grid from explicit boundaries and computes the per-interval
    /// medians of `values`.
    pub fn from_boundaries(boundaries: Vec<f64>, values: &[f64]) -> Result<Self> {
        if boundaries.len() < 3 {
            return Err(Error::invalid("a treatment grid needs at least 2 intervals"));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!(
                "grid boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        let mut grid = TreatmentGrid {
            boundaries,
            medians: Vec::new(),
        };
        let mut members = vec![Vec::new(); grid.count()];
        for &v in values {
            if let Some(c) = grid.category_of(v) {
                members[c].push(v);
            }
        }
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::EmptyInterval(c));
            }
        }
        grid.medians = members.iter().map(|m| median(m)).collect();
        Ok(grid)
    }

    pub fn count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn medians(&self) -> &[f64] {
        &self.medians
    }

    pub fn lower(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn upper(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    pub fn bounds(&self) -> TruncationBounds {
        TruncationBounds::new(self.lower(), self.upper()).expect("grid bounds are ordered")
    }

    /// Interval containing `t`, or `None` outside `[lower, upper]`.
    pub fn category_of(&self, t: f64) -> Option<usize> {
        if !(t >= self.lower() && t <= self.upper()) {
            return None;
        }
        // First index whose right boundary is >= t.
        let right = &self.boundaries[1..];
        let c = right.partition_point(|&b| b < t);
        Some(c.min(self.count() - 1))
    }

    /// Interval of every value; errors on values outside the grid.
    pub fn categories(&self, values: &[f64]) -> Result<Vec<usize>> {
        values
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                self.category_of(t).ok_or_else(|| Error::Row {
                    row: i + 1,
                    message: format!("rate change {t} outside grid [{}, {}]", self.lower(), self.upper()),
                })
            })
            .collect()
    }

    pub fn occupancy(&self, values: &[f64]) -> Vec<usize> {
        let mut counts = vec![0; self.count()];
        for &t in values {
            if let Some(c) = self.category_of(t) {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Printable interval label in percent, e.g. `(1.53%, 6.06%]`.
    pub fn label(&self, c: usize) -> String {
        let open = if c == 0 { '[' } else { '(' };
        format!(
            "{open}{:.2}%, {:.2}%]",
            self.boundaries[c] * 100.0,
            self.boundaries[c + 1] * 100.0
        )
    }
}

/// Grid whose boundaries are the `0, 1/C, ..., 1` type-7 quantiles of the
/// observed rate changes.
pub fn quantile_grid(rate_changes: &[f64], intervals: usize) -> Result<TreatmentGrid> {
    if intervals < 2 {
        return Err(Error::invalid(format!("need at least 2 intervals, got {intervals}")));
    }
    let sorted = sorted_copy(rate_changes);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < intervals {
        return Err(Error::invalid(format!(
            "{} distinct rate changes cannot form {intervals} nonempty intervals",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let boundaries: Vec<f64> = (0..=intervals)
        .map(|k| {
            // Exact integer position (n-1)k/C keeps boundaries on data points
            // whenever the quantile position is integral.
            let num = (n - 1) * k;
            let lo = num / intervals;
            let rem = num % intervals;
            if rem == 0 {
                sorted[lo]
            } else {
                let frac = rem as f64 / intervals as f64;
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            }
        })
        .collect();
    if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(format!(
            "tied quantiles: rate changes too concentrated for {intervals} intervals"
        )));
    }
    TreatmentGrid::from_boundaries(boundaries, rate_changes)
}
