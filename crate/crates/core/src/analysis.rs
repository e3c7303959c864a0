//! Evaluation statistics: RMSE, Welch's two-sample t-test and reward
//! histograms over the tilt angle.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("empty input")]
    Empty,
    #[error("need at least two samples per group")]
    TooFewSamples,
    #[error("both groups have zero variance")]
    ZeroVariance,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}

pub fn rmse(xs: &[f64]) -> Result<f64, AnalysisError> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok((xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Per-step tracking errors of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingErrorSeries {
    pub t: Vec<f64>,
    pub position: Vec<f64>,
    pub pitch: Vec<f64>,
}

impl TrackingErrorSeries {
    pub fn push(&mut self, t: f64, position: f64, pitch: f64) {
        self.t.push(t);
        self.position.push(position);
        self.pitch.push(pitch);
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.t.len() != self.position.len() || self.t.len() != self.pitch.len() {
            return Err(AnalysisError::LengthMismatch(self.t.len(), self.position.len().min(self.pitch.len())));
        }
        Ok(())
    }

    pub fn position_rmse(&self) -> Result<f64, AnalysisError> {
        rmse(&self.position)
    }

    pub fn pitch_rmse(&self) -> Result<f64, AnalysisError> {
        rmse(&self.pitch)
    }

    /// Restrict to samples with `t >= t0`.
    pub fn after(&self, t0: f64) -> Self {
        let mut out = Self::default();
        for i in 0..self.t.len() {
            if self.t[i] >= t0 {
                out.push(self.t[i], self.position[i], self.pitch[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// Two-sided.
    pub p_value: f64,
}

impl SignificanceResult {
    /// One-sided p for the alternative `mean(a) > mean(b)`.
    pub fn p_greater(&self) -> f64 {
        let half = 0.5 * self.p_value;
        if self.t_statistic > 0.0 {
            half
        } else {
            1.0 - half
        }
    }

    /// One-sided p for the alternative `mean(a) < mean(b)`.
    pub fn p_less(&self) -> f64 {
        let half = 0.5 * self.p_value;
        if self.t_statistic < 0.0 {
            half
        } else {
            1.0 - half
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided tail of Student's t: `P(|T| > |t|) = I_{ν/(ν+t²)}(ν/2, 1/2)`.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    beta_reg(0.5 * dof, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<SignificanceResult, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::TooFewSamples);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(AnalysisError::ZeroVariance);
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(SignificanceResult { t_statistic: t, degrees_of_freedom: dof, p_value: student_t_two_sided(t, dof) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHistogram {
    pub alpha_edges: Vec<f64>,
    pub reward_edges: Vec<f64>,
    /// `counts[i][j]`: alpha bin `i`, reward bin `j`.
    pub counts: Vec<Vec<usize>>,
    pub alpha_mean: Vec<f64>,
    pub alpha_std: Vec<f64>,
    pub total: usize,
}

fn bin(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// 2-D histogram of `(alpha, cumulative reward)` runs plus per-alpha-bin
/// mean and standard deviation of the reward. Out-of-range values go to the
/// edge bins.
pub fn reward_histogram(
    evals: &[(f64, f64)],
    alpha_range: (f64, f64),
    alpha_bins: usize,
    reward_range: (f64, f64),
    reward_bins: usize,
) -> Result<RewardHistogram, AnalysisError> {
    if alpha_bins == 0 || reward_bins == 0 {
        return Err(AnalysisError::InvalidHistogram("bin counts must be positive".into()));
    }
    if !(alpha_range.1 > alpha_range.0) || !(reward_range.1 > reward_range.0) {
        return Err(AnalysisError::InvalidHistogram("ranges must be increasing".into()));
    }
    let mut counts = vec![vec![0; reward_bins]; alpha_bins];
    let mut sums = vec![(0.0, 0.0, 0usize); alpha_bins];
    for &(a, r) in evals {
        let i = bin(a, alpha_range.0, alpha_range.1, alpha_bins);
        let j = bin(r, reward_range.0, reward_range.1, reward_bins);
        counts[i][j] += 1;
        sums[i].0 += r;
        sums[i].1 += r * r;
        sums[i].2 += 1;
    }
    let alpha_mean = sums.iter().map(|&(s, _, n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect();
    let alpha_std = sums
        .iter()
        .map(|&(s, s2, n)| {
            if n > 0 {
                let m = s / n as f64;
                (s2 / n as f64 - m * m).max(0.0).sqrt()
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(RewardHistogram {
        alpha_edges: edges(alpha_range.0, alpha_range.1, alpha_bins),
        reward_edges: edges(reward_range.0, reward_range.1, reward_bins),
        counts,
        alpha_mean,
        alpha_std,
        total: evals.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Two-sided tail by Simpson quadrature of the t density over
    /// `[0, |t|]`, in a substitution that keeps the integrand smooth.
    fn t_tail_quadrature(t: f64, dof: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma(0.5 * (dof + 1.0))
            - statrs::function::gamma::ln_gamma(0.5 * dof)
            - 0.5 * (dof * std::f64::consts::PI).ln();
        let f = |x: f64| (ln_c - 0.5 * (dof + 1.0) * (1.0 + x * x / dof).ln()).exp();
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = f(0.0) + f(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.0; 4]).unwrap(), 0.0);
        assert_relative_eq!(rmse(&[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        assert_eq!(rmse(&[]), Err(AnalysisError::Empty));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..101).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for x in &xs {
            acc += x * x;
        }
        assert_relative_eq!(rmse(&xs).unwrap(), (acc / 101.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn welch_identity_symmetry_and_textbook_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let same = welch_ttest(&a, &a).unwrap();
        assert_eq!(same.t_statistic, 0.0);
        assert_eq!(same.p_value, 1.0);

        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = welch_ttest(&a, &b).unwrap();
        let s = welch_ttest(&b, &a).unwrap();
        assert_relative_eq!(r.t_statistic, -1.0, epsilon = 1e-12);
        assert_relative_eq!(r.degrees_of_freedom, 8.0, epsilon = 1e-12);
        assert_eq!(r.t_statistic, -s.t_statistic);
        assert_eq!(r.p_value, s.p_value);
        assert!((r.p_value - t_tail_quadrature(-1.0, 8.0)).abs() < 1e-9);
        assert_relative_eq!(r.p_value, 0.346_593_507_087_939_6, epsilon = 1e-9);
        assert_relative_eq!(r.p_less(), 0.5 * r.p_value, epsilon = 1e-15);

        assert_eq!(welch_ttest(&[1.0], &a), Err(AnalysisError::TooFewSamples));
        assert_eq!(welch_ttest(&[1.0, 1.0], &[2.0, 2.0]), Err(AnalysisError::ZeroVariance));
    }

    #[test]
    fn welch_matches_quadrature_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let na = rng.random_range(3..30);
            let nb = rng.random_range(3..30);
            let shift = rng.random_range(-1.0..1.0);
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-2.0..2.0) + shift).collect();
            let r = welch_ttest(&a, &b).unwrap();
            let q = t_tail_quadrature(r.t_statistic, r.degrees_of_freedom);
            assert!((r.p_value - q).abs() < 1e-6, "{} vs {q}", r.p_value);
        }
    }

    #[test]
    fn p_values_are_uniform_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let trials = 4000;
        let mut ps: Vec<f64> = (0..trials)
            .map(|_| {
                let a: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
                let b: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
                welch_ttest(&a, &b).unwrap().p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let n = trials as f64;
        let d = ps
            .iter()
            .enumerate()
            .map(|(i, p)| ((i + 1) as f64 / n - p).abs().max((p - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        assert!(d < 1.63 / n.sqrt(), "D = {d}");
    }

    #[test]
    fn histogram_counts_and_marginals() {
        let h = reward_histogram(&[(0.5, 1500.0)], (0.0, 2.0), 4, (0.0, 2000.0), 10).unwrap();
        assert_eq!(h.total, 1);
        let filled: usize = h.counts.iter().flatten().filter(|&&c| c > 0).count();
        assert_eq!(filled, 1);
        assert_eq!(h.counts[1][7], 1);

        let evals: Vec<(f64, f64)> = (0..400).map(|i| ((i % 4) as f64 * 0.5 + 0.25, ((i / 4) % 10) as f64 * 200.0 + 100.0)).collect();
        let h = reward_histogram(&evals, (0.0, 2.0), 4, (0.0, 2000.0), 10).unwrap();
        assert_eq!(h.counts.iter().flatten().sum::<usize>(), 400);
        for row in &h.counts {
            assert!(row.iter().all(|&c| c == 10));
        }
        assert!(reward_histogram(&evals, (0.0, 2.0), 0, (0.0, 1.0), 1).is_err());
    }

    proptest! {
        #[test]
        fn rmse_scales_with_the_input(xs in prop::collection::vec(-1e3f64..1e3, 1..50), c in -1e3f64..1e3) {
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let lhs = rmse(&scaled).unwrap();
            let rhs = c.abs() * rmse(&xs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
    }
}
