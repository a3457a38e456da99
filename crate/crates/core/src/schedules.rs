//! Discrete variance-preserving noise schedule shared by the data-space and
//! measurement-space chains.

use crate::error::{Error, Result};

/// Lower/upper clamp keeping every `beta_t` strictly inside (0, 1).
pub const BETA_CLAMP: f64 = 1e-12;

/// Per-step `beta_t`, `alpha_t = 1 - beta_t` and cumulative `alpha_bar_t`.
///
/// Steps are indexed `1..=T`; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t in 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from explicit betas (`betas[0]` is `beta_1`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("at least one step is required".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::InvalidSchedule(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
            }
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule("betas must be nondecreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for &a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Linear interpolation of the continuous rate `beta(s)` on `[beta_min, beta_max]`,
    /// divided by `T`: `beta_t = (beta_min + (t-1)/max(T-1,1) (beta_max - beta_min)) / T`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("T must be positive".into()));
        }
        if !beta_min.is_finite() || !beta_max.is_finite() {
            return Err(Error::InvalidSchedule("beta bounds must be finite".into()));
        }
        if beta_min <= 0.0 || beta_max < beta_min {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        let t_f = num_steps as f64;
        let denom = (num_steps.max(2) - 1) as f64;
        let betas = (0..num_steps)
            .map(|i| {
                let b = (beta_min + i as f64 / denom * (beta_max - beta_min)) / t_f;
                b.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps(), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t in 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps(), "alpha index {t} out of range");
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::StepOutOfRange {
            t,
            num_steps: self.num_steps(),
        })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Free-function form of [`NoiseSchedule::linear`].
pub fn make_linear_schedule(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(num_steps, beta_min, beta_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn benchmark_endpoints() {
        let s = make_linear_schedule(1000, 0.1, 500.0).unwrap();
        assert!((s.beta(1) - 1.0e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn two_steps() {
        let s = make_linear_schedule(2, 0.2, 0.4).unwrap();
        assert!((s.beta(1) - 0.1).abs() < 1e-15);
        assert!((s.beta(2) - 0.2).abs() < 1e-15);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_queries() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert!(matches!(s.alpha_bar(3), Err(Error::StepOutOfRange { .. })));
        let one = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(one.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_linear_schedule(0, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(10, 0.0, 1.0).is_err());
        assert!(make_linear_schedule(10, -1.0, 1.0).is_err());
        assert!(make_linear_schedule(10, 2.0, 1.0).is_err());
        assert!(make_linear_schedule(10, f64::NAN, 1.0).is_err());
        assert!(make_linear_schedule(10, 0.1, f64::INFINITY).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn invariants_hold(t in 1usize..400, lo in 1e-3f64..5.0, span in 0.0f64..600.0) {
            let s = make_linear_schedule(t, lo, lo + span).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for k in 1..=t {
                let b = s.beta(k);
                prop_assert!(b > 0.0 && b < 1.0);
                prop_assert_eq!(s.alpha(k), 1.0 - b);
                prop_assert_eq!(ab[k], ab[k - 1] * s.alpha(k));
                prop_assert!(ab[k] <= ab[k - 1]);
                if ab[k] > 1e-280 {
                    prop_assert!(ab[k] < ab[k - 1]);
                    let ratio = ab[k] / ab[k - 1];
                    prop_assert!((ratio - (1.0 - b)).abs() <= 4.0 * f64::EPSILON * (1.0 - b));
                }
                if k > 1 {
                    prop_assert!(b >= s.beta(k - 1));
                }
            }
        }
    }
}
