//! Per-observation losses on raw ensemble scores.
//!
//! Values exclude the `1/N` factor; the boosting engine averages. Gradients
//! and hessians are with respect to the raw score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log1p_exp, mean, norm_mass, norm_pdf, sigmoid};

/// Hessian floor for the truncated Gaussian.
pub const HESS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationBounds {
    lower: f64,
    upper: f64,
}

impl TruncationBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::invalid(format!(
                "truncation bounds must satisfy lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(TruncationBounds { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: f64,
    pub hess: f64,
}

/// Multinoulli evaluation with one gradient/hessian entry per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

pub fn squared_error(y: f64, score: f64) -> LossEval {
    let r = score - y;
    LossEval {
        value: 0.5 * r * r,
        grad: r,
        hess: 1.0,
    }
}

/// Negative Bernoulli log-likelihood with `p = sigmoid(score)`.
pub fn bernoulli(y: f64, score: f64) -> LossEval {
    let p = sigmoid(score);
    // -[y log p + (1-y) log(1-p)] = log(1 + e^s) - y s
    LossEval {
        value: log1p_exp(score) - y * score,
        grad: p - y,
        hess: p * (1.0 - p),
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| libm::exp(s - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(scores.iter().map(|&s| libm::exp(s - m)).sum::<f64>())
}

/// Negative multinoulli log-likelihood of class `t_index` (0-based) with a
/// diagonal hessian.
pub fn multinoulli(t_index: usize, scores: &[f64]) -> MultiLossEval {
    assert!(
        scores.len() >= 2 && t_index < scores.len(),
        "multinoulli needs C >= 2 and a valid class"
    );
    let f = softmax(scores);
    let value = log_sum_exp(scores) - scores[t_index];
    let grad = f
        .iter()
        .enumerate()
        .map(|(c, &p)| p - if c == t_index { 1.0 } else { 0.0 })
        .collect();
    let hess = f.iter().map(|&p| p * (1.0 - p)).collect();
    MultiLossEval { value, grad, hess }
}

/// Untruncated Gaussian counterpart of [`truncated_gaussian`], with the same
/// `ln(2 pi sigma)` normalisation.
pub fn gaussian_nll(t: f64, f: f64, sigma: f64) -> LossEval {
    let s2 = sigma * sigma;
    LossEval {
        value: 0.5 * libm::log(2.0 * std::f64::consts::PI * sigma) + (t - f) * (t - f) / (2.0 * s2),
        grad: -(t - f) / s2,
        hess: 1.0 / s2,
    }
}

/// Negative truncated Gaussian log-likelihood of dose `t` at mean `f`.
///
/// The normalising term is `ln(2 pi sigma)`, which differs from the textbook
/// `ln(2 pi sigma^2)` by a constant in `f`. The hessian is floored at
/// [`HESS_FLOOR`]; the returned flag reports whether the floor was hit.
pub fn truncated_gaussian_flagged(t: f64, f: f64, sigma: f64, bounds: &TruncationBounds) -> Result<(LossEval, bool)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let a = (bounds.lower - f) / sigma;
    let b = (bounds.upper - f) / sigma;
    let z = norm_mass(a, b);
    if !(z > 1e-300) || !z.is_finite() {
        return Err(Error::DegenerateTruncation { mean: f, sigma });
    }
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    // a * phi(a) is 0 for infinite-looking bounds since phi underflows first.
    let apa = if pa == 0.0 { 0.0 } else { a * pa };
    let bpb = if pb == 0.0 { 0.0 } else { b * pb };
    let ratio = (pa - pb) / z;
    let base = gaussian_nll(t, f, sigma);
    let s2 = sigma * sigma;
    let raw_hess = (1.0 + (apa - bpb) / z - ratio * ratio) / s2;
    let clamped = raw_hess < HESS_FLOOR;
    Ok((
        LossEval {
            value: base.value + libm::log(z),
            grad: base.grad + ratio / sigma,
            hess: raw_hess.max(HESS_FLOOR),
        },
        clamped,
    ))
}

pub fn truncated_gaussian(t: f64, f: f64, sigma: f64, bounds: &TruncationBounds) -> Result<LossEval> {
    truncated_gaussian_flagged(t, f, sigma, bounds).map(|(e, _)| e)
}

/// Unbiased sample standard deviation of the residuals.
pub fn sigma_hat(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 2 {
        return Err(Error::DegenerateResiduals(format!(
            "need at least 2 residuals, got {}",
            residuals.len()
        )));
    }
    let m = mean(residuals);
    let ss: f64 = residuals.iter().map(|r| (r - m) * (r - m)).sum();
    let s = libm::sqrt(ss / (residuals.len() - 1) as f64);
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateResiduals("zero residual variance".into()));
    }
    Ok(s)
}

/// Loss descriptor stored with a fitted ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    SquaredError,
    Bernoulli,
    Multinoulli { classes: usize },
    TruncatedGaussian { lower: f64, upper: f64 },
}

impl Loss {
    pub fn truncated(bounds: TruncationBounds) -> Self {
        Loss::TruncatedGaussian {
            lower: bounds.lower,
            upper: bounds.upper,
        }
    }

    /// Number of score columns (trees per round).
    pub fn outputs(&self) -> usize {
        match self {
            Loss::Multinoulli { classes } => *classes,
            _ => 1,
        }
    }

    pub fn bounds(&self) -> Option<TruncationBounds> {
        match *self {
            Loss::TruncatedGaussian { lower, upper } => TruncationBounds::new(lower, upper).ok(),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const STEP: f64 = 1e-5;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    #[test]
    fn bernoulli_symmetric_point() {
        let e = bernoulli(1.0, 0.0);
        assert!((e.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!((e.grad, e.hess), (-0.5, 0.25));
        let e = bernoulli(0.0, 0.0);
        assert_eq!((e.grad, e.hess), (0.5, 0.25));
    }

    #[test]
    fn bernoulli_saturates_without_overflow() {
        assert!((bernoulli(0.0, 800.0).value - 800.0).abs() < 1e-9);
        assert!(bernoulli(1.0, -800.0).value.is_finite());
    }

    #[test]
    fn bernoulli_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let y = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            let s = rng.gen_range(-6.0..6.0);
            let e = bernoulli(y, s);
            let g = (bernoulli(y, s + STEP).value - bernoulli(y, s - STEP).value) / (2.0 * STEP);
            let h = (bernoulli(y, s + STEP).grad - bernoulli(y, s - STEP).grad) / (2.0 * STEP);
            assert!(rel(e.grad, g) < 1e-6, "y={y} s={s}");
            assert!(rel(e.hess, h) < 1e-6, "y={y} s={s}");
        }
    }

    #[test]
    fn multinoulli_uniform() {
        let e = multinoulli(1, &[0.3, 0.3, 0.3]);
        assert!((e.value - libm::log(3.0)).abs() < 1e-15);
        let want = [1.0 / 3.0, -2.0 / 3.0, 1.0 / 3.0];
        for (g, w) in e.grad.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn multinoulli_shift_invariant_and_normalised() {
        let s = [0.5, -2.0, 3.0, 700.0];
        let p = softmax(&s);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let shifted: Vec<f64> = s.iter().map(|x| x - 11.0).collect();
        assert!((multinoulli(2, &s).value - multinoulli(2, &shifted).value).abs() < 1e-9);
    }

    #[test]
    fn multinoulli_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let c = rng.gen_range(2..6);
            let t = rng.gen_range(0..c);
            let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let e = multinoulli(t, &s);
            for k in 0..c {
                let mut up = s.clone();
                let mut dn = s.clone();
                up[k] += STEP;
                dn[k] -= STEP;
                let g = (multinoulli(t, &up).value - multinoulli(t, &dn).value) / (2.0 * STEP);
                let h = (multinoulli(t, &up).grad[k] - multinoulli(t, &dn).grad[k]) / (2.0 * STEP);
                assert!(rel(e.grad[k], g) < 1e-6);
                assert!(rel(e.hess[k], h) < 1e-6);
            }
        }
    }

    #[test]
    fn wide_truncation_is_gaussian() {
        let b = TruncationBounds::new(-1e9, 1e9).unwrap();
        for (t, f, s) in [(0.1, 0.05, 0.06), (-0.3, 0.2, 1.5), (2.0, 2.0, 0.01)] {
            let tr = truncated_gaussian(t, f, s, &b).unwrap();
            let g = gaussian_nll(t, f, s);
            assert!((tr.value - g.value).abs() < 1e-9);
            assert!((tr.grad - g.grad).abs() < 1e-9);
            assert!((tr.hess - g.hess).abs() < 1e-9);
        }
    }

    #[test]
    fn truncated_value_offset_is_log_mass() {
        let b = TruncationBounds::new(-0.09, 0.27).unwrap();
        let (t, f, s) = (0.05, 0.1, 0.08);
        let mass = norm_mass((b.lower() - f) / s, (b.upper() - f) / s);
        let diff = truncated_gaussian(t, f, s, &b).unwrap().value - gaussian_nll(t, f, s).value;
        assert!((diff - libm::log(mass)).abs() < 1e-14);
    }

    #[test]
    fn truncated_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let lo = rng.gen_range(-1.0..0.0);
            let hi = lo + rng.gen_range(0.2..2.0);
            let b = TruncationBounds::new(lo, hi).unwrap();
            let f = rng.gen_range(lo..hi);
            let t = rng.gen_range(lo..hi);
            let s = rng.gen_range(0.05..1.0);
            let e = truncated_gaussian(t, f, s, &b).unwrap();
            let v = |f: f64| truncated_gaussian(t, f, s, &b).unwrap();
            let g = (v(f + STEP).value - v(f - STEP).value) / (2.0 * STEP);
            let h = (v(f + STEP).grad - v(f - STEP).grad) / (2.0 * STEP);
            assert!(rel(e.grad, g) < 1e-5, "grad {} vs {g}", e.grad);
            assert!(rel(e.hess, h) < 1e-5, "hess {} vs {h}", e.hess);
        }
    }

    #[test]
    fn truncation_at_mean_gives_correction_only() {
        let b = TruncationBounds::new(0.0, 1.0).unwrap();
        let (f, s) = (0.2, 0.3);
        let e = truncated_gaussian(f, f, s, &b).unwrap();
        let v = |f: f64| truncated_gaussian(0.2, f, s, &b).unwrap().value;
        let fd = (v(f + STEP) - v(f - STEP)) / (2.0 * STEP);
        assert!(rel(e.grad, fd) < 1e-6);
        assert!(e.grad != 0.0);
    }

    #[test]
    fn degenerate_truncation_errors() {
        let b = TruncationBounds::new(100.0, 101.0).unwrap();
        assert!(matches!(
            truncated_gaussian(100.5, 0.0, 0.1, &b),
            Err(Error::DegenerateTruncation { .. })
        ));
    }

    #[test]
    fn sigma_hat_cases() {
        assert!((sigma_hat(&[-1.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(sigma_hat(&[0.3; 5]).is_err());
        assert!(sigma_hat(&[1.0]).is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let r: Vec<f64> = (0..1000).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let oracle = crate::stats::sample_variance(&r).sqrt();
        assert!(rel(sigma_hat(&r).unwrap(), oracle) < 1e-12);
        let scaled: Vec<f64> = r.iter().map(|x| 4.0 * x).collect();
        assert!(rel(sigma_hat(&scaled).unwrap(), 4.0 * oracle) < 1e-12);
    }
}
