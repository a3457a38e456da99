//! Gaussian-mixture prior with closed-form noised score and denoiser, and the
//! exact posterior under a linear Gaussian measurement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::operators::{DenseOperator, LinearOperator};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Component covariance of a mixture.
#[derive(Debug, Clone)]
pub enum ComponentCov {
    /// `variances[k] * I` for component `k`.
    Isotropic(Vec<f64>),
    /// One SPD matrix shared by every component, with its Cholesky factor.
    SharedFull { cov: DMatrix<f64>, chol: Cholesky<f64, Dyn> },
}

/// Logits, isotropic noised variances, and the noised Cholesky factor for shared covariances.
type NoisedLogits = (Vec<f64>, Option<Vec<f64>>, Option<Cholesky<f64, Dyn>>);

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cov: ComponentCov,
}

fn validate_components(means: &[Vec<f64>], weights: &[f64]) -> Result<(usize, Vec<f64>)> {
    if means.is_empty() {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    check_len("mixture weights", means.len(), weights.len())?;
    let d = means[0].len();
    if d == 0 {
        return Err(Error::InvalidArgument("mixture dimension must be positive".into()));
    }
    for m in means {
        check_len("component mean", d, m.len())?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("component mean"));
        }
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidArgument("mixture weights sum to zero".into()));
    }
    Ok((d, weights.iter().map(|w| w / total).collect()))
}

/// `log sum_k exp(l_k)` and the normalized `exp(l_k - lse)`.
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut r: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = r.iter().sum();
    r.iter_mut().for_each(|v| *v /= s);
    (max + s.ln(), r)
}

/// Noised full covariance `abar Sigma + (1 - abar) I` and its Cholesky factor.
fn noised_full(cov: &DMatrix<f64>, abar: f64) -> Cholesky<f64, Dyn> {
    let d = cov.nrows();
    let m = cov * abar + DMatrix::identity(d, d) * (1.0 - abar);
    m.cholesky().expect("noised covariance of an SPD matrix is SPD")
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl GaussianMixture {
    pub fn isotropic(means: Vec<Vec<f64>>, variances: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let (_, weights) = validate_components(&means, &weights)?;
        check_len("component variances", means.len(), variances.len())?;
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NotPositiveDefinite("component variances must be positive".into()));
        }
        Ok(Self {
            means,
            weights,
            cov: ComponentCov::Isotropic(variances),
        })
    }

    pub fn shared_full(means: Vec<Vec<f64>>, cov: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        let (d, weights) = validate_components(&means, &weights)?;
        if cov.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                what: "shared covariance",
                expected: d,
                found: cov.nrows(),
            });
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("shared component covariance".into()))?;
        Ok(Self {
            means,
            weights,
            cov: ComponentCov::SharedFull { cov, chol },
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn covariance(&self) -> &ComponentCov {
        &self.cov
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    fn check_abar(abar: f64) {
        assert!(abar > 0.0 && abar <= 1.0, "alpha_bar {abar} outside (0, 1]");
    }

    /// Per-component logits of the noised marginal `p_t(x)` and, for the
    /// isotropic case, the per-component noised variances.
    fn noised_logits(&self, x: &[f64], abar: f64) -> NoisedLogits {
        let d = self.dim() as f64;
        let sa = abar.sqrt();
        match &self.cov {
            ComponentCov::Isotropic(vars) => {
                let s2: Vec<f64> = vars.iter().map(|v| abar * v + (1.0 - abar)).collect();
                let logits = self
                    .means
                    .iter()
                    .zip(&self.weights)
                    .zip(&s2)
                    .map(|((mu, w), s)| {
                        let dist: f64 = x.iter().zip(mu).map(|(xi, m)| (xi - sa * m).powi(2)).sum();
                        w.ln() - 0.5 * dist / s - 0.5 * d * (LN_2PI + s.ln())
                    })
                    .collect();
                (logits, Some(s2), None)
            }
            ComponentCov::SharedFull { cov, .. } => {
                let chol = noised_full(cov, abar);
                let ld = log_det(&chol);
                let logits = self
                    .means
                    .iter()
                    .zip(&self.weights)
                    .map(|(mu, w)| {
                        let diff = DVector::from_iterator(x.len(), x.iter().zip(mu).map(|(xi, m)| xi - sa * m));
                        let sol = chol.solve(&diff);
                        w.ln() - 0.5 * diff.dot(&sol) - 0.5 * (d * LN_2PI + ld)
                    })
                    .collect();
                (logits, None, Some(chol))
            }
        }
    }

    /// `log p_t(x)` of the mixture noised to level `abar`.
    pub fn log_density_noised(&self, x: &[f64], abar: f64) -> f64 {
        Self::check_abar(abar);
        softmax(&self.noised_logits(x, abar).0).0
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_noised(x, 1.0)
    }

    /// Component responsibilities of the noised mixture at `x`.
    pub fn responsibilities(&self, x: &[f64], abar: f64) -> Vec<f64> {
        Self::check_abar(abar);
        softmax(&self.noised_logits(x, abar).0).1
    }

    /// `grad_x log p_t(x)` where `p_t` is the mixture pushed through
    /// `x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps`.
    pub fn score(&self, x: &[f64], abar: f64) -> Vec<f64> {
        Self::check_abar(abar);
        let sa = abar.sqrt();
        let (logits, s2, chol) = self.noised_logits(x, abar);
        let (_, r) = softmax(&logits);
        let mut out = vec![0.0; x.len()];
        match (s2, chol) {
            (Some(s2), _) => {
                for ((mu, rk), s) in self.means.iter().zip(&r).zip(&s2) {
                    let f = rk / s;
                    out.iter_mut().zip(mu).zip(x).for_each(|((o, m), xi)| *o += f * (sa * m - xi));
                }
            }
            (None, Some(chol)) => {
                let mut diff = DVector::zeros(x.len());
                for (mu, rk) in self.means.iter().zip(&r) {
                    diff.iter_mut().zip(mu).zip(x).for_each(|((o, m), xi)| *o += rk * (sa * m - xi));
                }
                out.copy_from_slice(chol.solve(&diff).as_slice());
            }
            _ => unreachable!(),
        }
        out
    }

    /// Per-component posterior means `g_k = E[x_0 | x_t, k]` and the
    /// responsibilities and noised variances (isotropic case only).
    fn component_denoise(&self, x: &[f64], abar: f64) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let vars = match &self.cov {
            ComponentCov::Isotropic(v) => v,
            ComponentCov::SharedFull { .. } => unreachable!(),
        };
        let sa = abar.sqrt();
        let (logits, s2, _) = self.noised_logits(x, abar);
        let s2 = s2.expect("isotropic");
        let (_, r) = softmax(&logits);
        let g = self
            .means
            .iter()
            .zip(vars)
            .zip(&s2)
            .map(|((mu, v), s)| x.iter().zip(mu).map(|(xi, m)| (sa * v * xi + (1.0 - abar) * m) / s).collect())
            .collect();
        (r, s2, g)
    }

    /// Posterior mean `E[x_0 | x_t = x]`, computed without dividing by `sqrt(abar)`.
    pub fn denoise(&self, x: &[f64], abar: f64) -> Vec<f64> {
        Self::check_abar(abar);
        match &self.cov {
            ComponentCov::Isotropic(_) => {
                let (r, _, g) = self.component_denoise(x, abar);
                let mut out = vec![0.0; x.len()];
                for (gk, rk) in g.iter().zip(&r) {
                    out.iter_mut().zip(gk).for_each(|(o, v)| *o += rk * v);
                }
                out
            }
            ComponentCov::SharedFull { .. } => {
                // Tweedie: (x + (1 - abar) score) / sqrt(abar)
                let s = self.score(x, abar);
                x.iter().zip(&s).map(|(xi, si)| (xi + (1.0 - abar) * si) / abar.sqrt()).collect()
            }
        }
    }

    /// `J^T u` with `J` the Jacobian of [`Self::denoise`] at `x`.
    pub fn denoise_vjp(&self, x: &[f64], abar: f64, u: &[f64]) -> Vec<f64> {
        Self::check_abar(abar);
        let sa = abar.sqrt();
        match &self.cov {
            ComponentCov::Isotropic(vars) => {
                let (r, s2, g) = self.component_denoise(x, abar);
                let grads: Vec<Vec<f64>> = self
                    .means
                    .iter()
                    .zip(&s2)
                    .map(|(mu, s)| x.iter().zip(mu).map(|(xi, m)| (sa * m - xi) / s).collect())
                    .collect();
                let mut mean_grad = vec![0.0; x.len()];
                for (gr, rk) in grads.iter().zip(&r) {
                    mean_grad.iter_mut().zip(gr).for_each(|(o, v)| *o += rk * v);
                }
                let mut out = vec![0.0; x.len()];
                for k in 0..r.len() {
                    let diag = r[k] * sa * vars[k] / s2[k];
                    let gu: f64 = g[k].iter().zip(u).map(|(a, b)| a * b).sum();
                    let f = r[k] * gu;
                    for i in 0..x.len() {
                        out[i] += diag * u[i] + f * (grads[k][i] - mean_grad[i]);
                    }
                }
                out
            }
            ComponentCov::SharedFull { .. } => {
                // J = (I + (1 - abar) H) / sqrt(abar), H the (symmetric) score Hessian
                let h = 1e-6;
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                xp.iter_mut().zip(u).for_each(|(a, b)| *a += h * b / norm);
                xm.iter_mut().zip(u).for_each(|(a, b)| *a -= h * b / norm);
                let (sp, sm) = (self.score(&xp, abar), self.score(&xm, abar));
                u.iter()
                    .zip(sp.iter().zip(&sm))
                    .map(|(ui, (a, b))| (ui + (1.0 - abar) * norm * (a - b) / (2.0 * h)) / sa)
                    .collect()
            }
        }
    }

    /// Draw `n` samples: a categorical component, then a Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let idx = WeightedIndex::new(&self.weights).expect("weights validated");
        let d = self.dim();
        (0..n)
            .map(|_| {
                let k = idx.sample(rng);
                let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mu = &self.means[k];
                match &self.cov {
                    ComponentCov::Isotropic(v) => {
                        let s = v[k].sqrt();
                        mu.iter().zip(&eps).map(|(m, e)| m + s * e).collect()
                    }
                    ComponentCov::SharedFull { chol, .. } => {
                        let z = chol.l_dirty().lower_triangle() * DVector::from_vec(eps);
                        mu.iter().zip(z.iter()).map(|(m, e)| m + e).collect()
                    }
                }
            })
            .collect()
    }
}

/// 25 unit-variance components with means repeating `(8i, 8j)` for
/// `i, j in {-2, ..., 2}` and uniform weights.
pub fn make_grid_gmm(d: usize) -> Result<GaussianMixture> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("grid mixture needs even d > 0, got {d}")));
    }
    let mut means = Vec::with_capacity(25);
    for i in -2i32..=2 {
        for j in -2i32..=2 {
            means.push((0..d).map(|k| 8.0 * if k % 2 == 0 { i } else { j } as f64).collect());
        }
    }
    GaussianMixture::isotropic(means, vec![1.0; 25], vec![1.0; 25])
}

pub fn sample_mixture<R: Rng + ?Sized>(gmm: &GaussianMixture, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(gmm.sample(n, rng))
}

/// Exact posterior of `y = A x + n`, `n ~ N(0, sigma^2 I)`, under a mixture of
/// unit-variance isotropic Gaussians.
pub fn exact_posterior(gmm: &GaussianMixture, a: &DenseOperator, y: &[f64], sigma: f64) -> Result<GaussianMixture> {
    match gmm.covariance() {
        ComponentCov::Isotropic(v) if v.iter().all(|&x| x == 1.0) => {}
        _ => return Err(Error::InvalidArgument("exact posterior needs unit-variance components".into())),
    }
    let d = gmm.dim();
    check_len("operator columns", d, a.cols())?;
    check_len("measurement", a.rows(), y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {sigma} must be positive")));
    }
    let am = a.matrix();
    let m = am.nrows();
    let s2 = sigma * sigma;
    let precision = DMatrix::identity(d, d) + am.tr_mul(am) / s2;
    let cov = precision
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?
        .inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    let yv = DVector::from_column_slice(y);
    let aty = am.tr_mul(&yv) / s2;

    let marginal = DMatrix::identity(m, m) * s2 + am * am.transpose();
    let mchol = marginal
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("measurement marginal covariance".into()))?;
    let mld = log_det(&mchol);

    let mut means = Vec::with_capacity(gmm.num_components());
    let mut logw = Vec::with_capacity(gmm.num_components());
    for (mu, w) in gmm.means().iter().zip(gmm.weights()) {
        let muv = DVector::from_column_slice(mu);
        means.push((&cov * (&aty + &muv)).as_slice().to_vec());
        let resid = &yv - am * &muv;
        let quad = resid.dot(&mchol.solve(&resid));
        logw.push(w.ln() - 0.5 * (quad + mld + m as f64 * LN_2PI));
    }
    let (_, weights) = softmax(&logw);
    GaussianMixture::shared_full(means, cov, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::make_random_svd_operator;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn fd_score(g: &GaussianMixture, x: &[f64], abar: f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (g.log_density_noised(&p, abar) - g.log_density_noised(&m, abar)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(b).max(1.0)
    }

    #[test]
    fn grid_layout() {
        let g = make_grid_gmm(2).unwrap();
        assert_eq!(g.num_components(), 25);
        for target in [[-16.0, -16.0], [0.0, 0.0], [16.0, 16.0]] {
            assert!(g.means().iter().any(|m| m[..] == target[..]));
        }
        assert!(g.weights().iter().all(|&w| (w - 0.04).abs() < 1e-15));
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(norm(&g.mean()) < 1e-12);
        let g8 = make_grid_gmm(8).unwrap();
        assert!(g8.means().contains(&vec![8.0, -16.0, 8.0, -16.0, 8.0, -16.0, 8.0, -16.0]));
        assert!(make_grid_gmm(3).is_err());
        assert!(make_grid_gmm(0).is_err());
    }

    #[test]
    fn score_examples() {
        let g = make_grid_gmm(4).unwrap();
        for abar in [1.0, 0.3, 1e-4] {
            assert!(norm(&g.score(&[0.0; 4], abar)) < 1e-12);
        }
        let single = GaussianMixture::isotropic(vec![vec![1.0, -2.0]], vec![1.0], vec![1.0]).unwrap();
        assert_eq!(single.score(&[0.5, 0.5], 1.0), vec![0.5, -2.5]);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [2usize, 4, 8] {
            let g = make_grid_gmm(d).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let abar = if d == 4 { 0.7 } else { rng.random_range(1e-3..1.0) };
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
                worst = worst.max(rel_err(&fd_score(&g, &x, abar, 1e-5), &g.score(&x, abar)));
            }
            assert!(worst < 1e-5, "d={d}: {worst}");
        }
    }

    #[test]
    fn full_covariance_score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = make_grid_gmm(2).unwrap();
        let a = make_random_svd_operator(2, 1, &mut rng).unwrap();
        let post = exact_posterior(&g, &a, &[3.0], 0.5).unwrap();
        for _ in 0..20 {
            let abar = rng.random_range(0.05..1.0);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-10.0..10.0)).collect();
            assert!(rel_err(&fd_score(&post, &x, abar, 1e-5), &post.score(&x, abar)) < 1e-5);
        }
    }

    #[test]
    fn denoiser_is_tweedie() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = make_grid_gmm(4).unwrap();
        for _ in 0..50 {
            let abar = rng.random_range(0.01..1.0);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-15.0..15.0)).collect();
            let s = g.score(&x, abar);
            let tweedie: Vec<f64> = x.iter().zip(&s).map(|(xi, si)| (xi + (1.0 - abar) * si) / abar.sqrt()).collect();
            assert!(rel_err(&g.denoise(&x, abar), &tweedie) < 1e-10);
        }
        // tiny abar stays finite and near the mixture mean
        let x0 = g.denoise(&[3.0, -1.0, 2.0, 0.5], 1e-109);
        assert!(x0.iter().all(|v| v.is_finite() && v.abs() < 1e-6));
    }

    #[test]
    fn denoiser_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = GaussianMixture::isotropic(
            vec![vec![1.0, 2.0, -1.0], vec![-3.0, 0.0, 2.0], vec![0.5, -2.0, 0.0]],
            vec![0.5, 1.0, 2.0],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        for _ in 0..30 {
            let abar = rng.random_range(0.05..1.0);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let h = 1e-6;
            let fd: Vec<f64> = (0..3)
                .map(|i| {
                    let mut p = x.clone();
                    let mut m = x.clone();
                    p[i] += h;
                    m[i] -= h;
                    let (dp, dm) = (g.denoise(&p, abar), g.denoise(&m, abar));
                    dp.iter().zip(&dm).zip(&u).map(|((a, b), w)| (a - b) / (2.0 * h) * w).sum()
                })
                .collect();
            assert!(rel_err(&g.denoise_vjp(&x, abar, &u), &fd) < 1e-6);
        }
    }

    #[test]
    fn conjugate_posterior() {
        let g = GaussianMixture::isotropic(vec![vec![0.0; 3]], vec![1.0], vec![1.0]).unwrap();
        let a = DenseOperator::identity(3);
        let y = [1.0, -2.0, 0.5];
        let post = exact_posterior(&g, &a, &y, 1.0).unwrap();
        assert!(rel_err(&post.means()[0], &[0.5, -1.0, 0.25]) < 1e-14);
        match post.covariance() {
            ComponentCov::SharedFull { cov, .. } => {
                assert!((cov - DMatrix::identity(3, 3) * 0.5).norm() < 1e-14)
            }
            _ => panic!("expected full covariance"),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let s = sample_mixture(&post, n, &mut rng).unwrap();
        let se = (0.5f64 / n as f64).sqrt();
        for i in 0..3 {
            let mean = s.iter().map(|v| v[i]).sum::<f64>() / n as f64;
            assert!((mean - y[i] / 2.0).abs() < 3.0 * se);
        }
        let again = sample_mixture(&post, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, sample_mixture(&post, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        assert!(sample_mixture(&post, 0, &mut rng).is_err());
    }

    #[test]
    fn standard_normal_sampling() {
        let g = GaussianMixture::isotropic(vec![vec![0.0; 2]], vec![1.0], vec![1.0]).unwrap();
        let s = g.sample(50_000, &mut ChaCha8Rng::seed_from_u64(3));
        let n = s.len() as f64;
        let m0 = s.iter().map(|v| v[0]).sum::<f64>() / n;
        let v0 = s.iter().map(|v| v[0] * v[0]).sum::<f64>() / n;
        let c01 = s.iter().map(|v| v[0] * v[1]).sum::<f64>() / n;
        assert!(m0.abs() < 0.02 && (v0 - 1.0).abs() < 0.03 && c01.abs() < 0.03);
    }

    #[test]
    fn uninformative_measurement_keeps_prior() {
        let g = make_grid_gmm(2).unwrap();
        let a = DenseOperator::zeros(1, 2);
        let post = exact_posterior(&g, &a, &[4.2], 0.1).unwrap();
        assert_eq!(post.means(), g.means());
        assert!(post.weights().iter().all(|&w| (w - 0.04).abs() < 1e-14));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = make_random_svd_operator(2, 1, &mut rng).unwrap();
        let wide = exact_posterior(&g, &a, &[3.0], 1e6).unwrap();
        assert!(wide.weights().iter().all(|&w| (w - 0.04).abs() < 1e-6));
        assert!(exact_posterior(&g, &a, &[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn posterior_matches_grid_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let g = make_grid_gmm(2).unwrap();
        let a = make_random_svd_operator(2, 1, &mut rng).unwrap();
        let x_true = &g.sample(1, &mut rng)[0];
        let sigma = 0.5;
        let y = a.apply(x_true)[0] + sigma * rng.sample::<f64, _>(StandardNormal);
        let post = exact_posterior(&g, &a, &[y], sigma).unwrap();

        let n = 400;
        let h = 48.0 / n as f64;
        let mut prior_lik = Vec::with_capacity(n * n);
        let mut closed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let x = [-24.0 + (i as f64 + 0.5) * h, -24.0 + (j as f64 + 0.5) * h];
                let r = y - a.apply(&x)[0];
                prior_lik.push((g.log_density(&x) - 0.5 * r * r / (sigma * sigma)).exp());
                closed.push(post.log_density(&x).exp());
            }
        }
        let z1: f64 = prior_lik.iter().sum();
        let z2: f64 = closed.iter().sum();
        let tv: f64 = 0.5 * prior_lik.iter().zip(&closed).map(|(p, q)| (p / z1 - q / z2).abs()).sum::<f64>();
        assert!(tv < 1e-3, "total variation {tv}");
        // the closed form is a normalized density on its own
        assert!((z2 * h * h - 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn posterior_weights_normalized(seed in any::<u64>(), sigma in 0.01f64..2.0, m in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = make_grid_gmm(4).unwrap();
            let a = make_random_svd_operator(4, m, &mut rng).unwrap();
            let x = &g.sample(1, &mut rng)[0];
            let y: Vec<f64> = a.apply(x).iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let post = exact_posterior(&g, &a, &y, sigma).unwrap();
            prop_assert!((post.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            match post.covariance() {
                ComponentCov::SharedFull { cov, .. } => prop_assert!(cov.clone().cholesky().is_some()),
                _ => prop_assert!(false),
            }
        }
    }
}
