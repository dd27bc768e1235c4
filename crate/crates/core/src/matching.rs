//! Nearest-score donor search, multiple imputation of counterfactual
//! responses and Rubin's rule.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::portfolio::{Portfolio, TreatmentGrid};
use crate::propensity::PropensityModel;
use crate::rng::{keyed, stream};

const MAGIC: &[u8; 4] = b"RIMP";
const FORMAT_VERSION: u32 = 1;

/// Units of every interval sorted by their score for that interval.
#[derive(Debug, Clone)]
pub struct DonorIndex {
    members: Vec<Vec<(f64, usize)>>,
}

impl DonorIndex {
    /// `scores[i][c]` is unit `i`'s propensity for interval `c`;
    /// `categories[i]` its observed interval.
    pub fn new(scores: &Matrix, categories: &[usize]) -> Self {
        let mut members = vec![Vec::new(); scores.cols()];
        for (j, &c) in categories.iter().enumerate() {
            members[c].push((scores.get(j, c), j));
        }
        for m in &mut members {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        DonorIndex { members }
    }

    pub fn interval_size(&self, c: usize) -> usize {
        self.members[c].len()
    }

    /// The `count` members of interval `c` closest to `score`, excluding
    /// unit `exclude`; ties go to the lower index. Sorted by (distance, index).
    pub fn nearest(&self, c: usize, score: f64, exclude: usize, count: usize) -> Result<Vec<usize>> {
        let m = &self.members[c];
        let available = m.len() - m.iter().any(|&(_, j)| j == exclude) as usize;
        if available < count {
            return Err(Error::SparseInterval {
                interval: c,
                count: available,
                needed: count,
            });
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let dist = |k: usize| (m[k].0 - score).abs();
        // Walk outward from the insertion point to the count-th distance.
        let pos = m.partition_point(|&(s, _)| s < score);
        let (mut lo, mut hi) = (pos, pos);
        let mut taken = 0;
        let mut radius = 0.0f64;
        while taken < count {
            let take_left = match (lo > 0, hi < m.len()) {
                (true, true) => dist(lo - 1) <= dist(hi),
                (true, false) => true,
                (false, true) => false,
                (false, false) => break,
            };
            let k = if take_left {
                lo -= 1;
                lo
            } else {
                hi += 1;
                hi - 1
            };
            if m[k].1 != exclude {
                taken += 1;
                radius = radius.max(dist(k));
            }
        }
        // Widen to every tie at the boundary distance, then order.
        while lo > 0 && dist(lo - 1) <= radius {
            lo -= 1;
        }
        while hi < m.len() && dist(hi) <= radius {
            hi += 1;
        }
        let mut cands: Vec<(f64, usize)> = m[lo..hi]
            .iter()
            .filter(|&&(_, j)| j != exclude)
            .map(|&(s, j)| ((s - score).abs(), j))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(cands.into_iter().take(count).map(|(_, j)| j).collect())
    }
}

/// Donors for unit `i` in interval `c`: the `count` units observed in `c`
/// with the closest score for `c`.
pub fn find_donors(i: usize, c: usize, scores: &Matrix, categories: &[usize], count: usize) -> Result<Vec<usize>> {
    DonorIndex::new(scores, categories).nearest(c, scores.get(i, c), i, count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    policies: usize,
    intervals: usize,
    imputations: usize,
    donors: usize,
    seed: u64,
    observed: Vec<usize>,
}

/// `N x C x M` binary draws plus the donor lists behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedResponseSet {
    header: Header,
    draws: Vec<u8>,
    donors: Vec<u32>,
}

impl ImputedResponseSet {
    /// Wraps externally generated draws, laid out `(i * C + c) * M + m`,
    /// with no donor lists.
    pub fn from_draws(
        observed: Vec<usize>,
        intervals: usize,
        imputations: usize,
        draws: Vec<u8>,
        seed: u64,
    ) -> Result<Self> {
        let policies = observed.len();
        if draws.len() != policies * intervals * imputations {
            return Err(Error::invalid("draw count does not match N x C x M"));
        }
        if draws.iter().any(|&d| d > 1) || observed.iter().any(|&c| c >= intervals) {
            return Err(Error::invalid("draws must be binary and categories in range"));
        }
        Ok(ImputedResponseSet {
            header: Header {
                format_version: FORMAT_VERSION,
                policies,
                intervals,
                imputations,
                donors: 0,
                seed,
                observed,
            },
            draws,
            donors: Vec::new(),
        })
    }

    pub fn policies(&self) -> usize {
        self.header.policies
    }

    pub fn intervals(&self) -> usize {
        self.header.intervals
    }

    pub fn imputations(&self) -> usize {
        self.header.imputations
    }

    pub fn donor_count(&self) -> usize {
        self.header.donors
    }

    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn observed(&self, i: usize) -> usize {
        self.header.observed[i]
    }

    pub fn draw(&self, i: usize, c: usize, m: usize) -> u8 {
        let (cc, mm) = (self.header.intervals, self.header.imputations);
        self.draws[(i * cc + c) * mm + m]
    }

    pub fn draws(&self, i: usize, c: usize) -> &[u8] {
        let (cc, mm) = (self.header.intervals, self.header.imputations);
        let s = (i * cc + c) * mm;
        &self.draws[s..s + mm]
    }

    pub fn donors(&self, i: usize, c: usize) -> &[u32] {
        let (cc, k) = (self.header.intervals, self.header.donors);
        let s = (i * cc + c) * k;
        &self.donors[s..s + k]
    }

    /// Average over imputations at cell `(i, c)`.
    pub fn mean_response(&self, i: usize, c: usize) -> f64 {
        let d = self.draws(i, c);
        d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&self.draws)?;
        for d in &self.donors {
            f.write_all(&d.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an imputation file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported imputation format version {}",
                header.format_version
            )));
        }
        let cells = header.policies * header.intervals;
        let nd = cells * header.imputations;
        let nk = cells * header.donors;
        let rest = &bytes[8 + hlen..];
        if rest.len() != nd + 4 * nk || header.observed.len() != header.policies {
            return Err(Error::Format("imputation payload size mismatch".into()));
        }
        let draws = rest[..nd].to_vec();
        let donors = rest[nd..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(ImputedResponseSet { header, draws, donors })
    }

    /// Long format: `policy, interval, imputation, response, observed`.
    pub fn write_csv(&self, path: impl AsRef<Path>, portfolio: &Portfolio) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["policy_id", "interval", "imputation", "response", "observed"])?;
        for (i, r) in portfolio.records().iter().enumerate() {
            for c in 0..self.intervals() {
                let obs = (c == self.observed(i)) as u8;
                for m in 0..self.imputations() {
                    w.write_record(&[
                        r.id.to_string(),
                        c.to_string(),
                        m.to_string(),
                        self.draw(i, c, m).to_string(),
                        obs.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Imputes every counterfactual cell by drawing `imputations` responses with
/// replacement from the cell's `donors` nearest units. Draws for a cell are
/// keyed on `(seed, policy id, interval)`.
pub fn impute(
    portfolio: &Portfolio,
    ps: &PropensityModel,
    grid: &TreatmentGrid,
    donors: usize,
    imputations: usize,
    seed: u64,
) -> Result<ImputedResponseSet> {
    let scores = ps.interval_scores(&portfolio.covariates())?;
    let categories = grid.categories(&portfolio.rate_changes())?;
    impute_with_scores(portfolio, &scores, &categories, donors, imputations, seed)
}

pub fn impute_with_scores(
    portfolio: &Portfolio,
    scores: &Matrix,
    categories: &[usize],
    donors: usize,
    imputations: usize,
    seed: u64,
) -> Result<ImputedResponseSet> {
    if donors == 0 || imputations == 0 {
        return Err(Error::invalid("donor and imputation counts must be positive"));
    }
    let n = portfolio.len();
    let c_count = scores.cols();
    let index = DonorIndex::new(scores, categories);
    for c in 0..c_count {
        // Each unit outside c needs `donors` units in c; units inside need one more.
        let needed = donors + (index.interval_size(c) > 0) as usize;
        if index.interval_size(c) < needed {
            return Err(Error::SparseInterval {
                interval: c,
                count: index.interval_size(c),
                needed,
            });
        }
    }
    let y = portfolio.churn();
    let records = portfolio.records();
    let rows = exec::map_range(n, |i| -> Result<(Vec<u8>, Vec<u32>)> {
        let mut draws = Vec::with_capacity(c_count * imputations);
        let mut dlist = Vec::with_capacity(c_count * donors);
        for c in 0..c_count {
            let d = index.nearest(c, scores.get(i, c), i, donors)?;
            if c == categories[i] {
                draws.extend(std::iter::repeat_n(y[i] as u8, imputations));
            } else {
                let mut rng = keyed(seed, stream::IMPUTE, records[i].id, c as u64);
                for _ in 0..imputations {
                    draws.push(y[d[rng.gen_range(0..d.len())]] as u8);
                }
            }
            dlist.extend(d.iter().map(|&j| j as u32));
        }
        Ok((draws, dlist))
    });
    let mut draws = Vec::with_capacity(n * c_count * imputations);
    let mut donor_ids = Vec::with_capacity(n * c_count * donors);
    for r in rows {
        let (d, k) = r?;
        draws.extend(d);
        donor_ids.extend(k);
    }
    Ok(ImputedResponseSet {
        header: Header {
            format_version: FORMAT_VERSION,
            policies: n,
            intervals: c_count,
            imputations,
            donors,
            seed,
            observed: categories.to_vec(),
        },
        draws,
        donors: donor_ids,
    })
}

/// Rubin-pooled estimate over imputations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub delta_bar: Vec<f64>,
    pub var: Vec<Vec<f64>>,
    pub w_bar: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub m: usize,
}

impl PooledEstimate {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.delta_bar.len())
            .map(|j| libm::sqrt(self.var[j][j].max(0.0)))
            .collect()
    }
}

/// Pools `M` estimates and their covariance matrices:
/// `Var = W_bar + (1 + 1/M) B`.
pub fn rubin_combine(estimates: &[Vec<f64>], variances: &[Vec<Vec<f64>>]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::invalid("Rubin's rule needs at least 2 imputations"));
    }
    if variances.len() != m {
        return Err(Error::invalid("one covariance matrix per estimate required"));
    }
    let p = estimates[0].len();
    if estimates.iter().any(|e| e.len() != p)
        || variances.iter().any(|v| v.len() != p || v.iter().any(|r| r.len() != p))
    {
        return Err(Error::invalid("inconsistent estimate dimensions"));
    }
    let mf = m as f64;
    // Centred on the first estimate so identical inputs give B = 0 exactly.
    let delta_bar: Vec<f64> = (0..p)
        .map(|j| {
            let e0 = estimates[0][j];
            e0 + estimates.iter().map(|e| e[j] - e0).sum::<f64>() / mf
        })
        .collect();
    let mut w_bar = vec![vec![0.0; p]; p];
    let mut b = vec![vec![0.0; p]; p];
    for (e, v) in estimates.iter().zip(variances) {
        for j in 0..p {
            for k in 0..p {
                w_bar[j][k] += v[j][k] / mf;
                b[j][k] += (e[j] - delta_bar[j]) * (e[k] - delta_bar[k]) / (mf - 1.0);
            }
        }
    }
    let var = (0..p)
        .map(|j| (0..p).map(|k| w_bar[j][k] + (1.0 + 1.0 / mf) * b[j][k]).collect())
        .collect();
    Ok(PooledEstimate {
        delta_bar,
        var,
        w_bar,
        b,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_rubin() {
        let p = rubin_combine(&[vec![0.0], vec![2.0]], &[vec![vec![1.0]], vec![vec![3.0]]]).unwrap();
        assert_eq!(p.delta_bar, vec![1.0]);
        assert_eq!(p.w_bar, vec![vec![2.0]]);
        assert_eq!(p.b, vec![vec![2.0]]);
        assert_eq!(p.var, vec![vec![5.0]]);
    }

    #[test]
    fn rubin_needs_two() {
        assert!(rubin_combine(&[vec![1.0]], &[vec![vec![1.0]]]).is_err());
    }

    #[test]
    fn identical_scores_pick_lowest_indices() {
        let scores = Matrix::new(6, 2, vec![0.5; 12]).unwrap();
        let cats = [1, 0, 1, 0, 1, 0];
        assert_eq!(find_donors(2, 0, &scores, &cats, 2).unwrap(), vec![1, 3]);
        assert_eq!(find_donors(2, 1, &scores, &cats, 2).unwrap(), vec![0, 4]);
        assert!(find_donors(2, 1, &scores, &cats, 3).is_err());
        assert_eq!(find_donors(0, 0, &scores, &cats, 3).unwrap(), vec![1, 3, 5]);
    }
}
