//! Matrix-free SPD solves for the posterior precision
//! `Lambda = c I + A^T Sigma^{-1} A` and the pre-whitened CG Gaussian draw.

use std::cell::RefCell;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::operators::{LinearOperator, Whitener};

pub const DEFAULT_CG_TOL: f64 = 1e-8;
/// Largest dimension for which the preconditioner falls back to `e_i` probing.
pub const PROBE_LIMIT: usize = 4096;

/// Default iteration cap, `10 d`.
pub fn default_max_iter(d: usize) -> usize {
    10 * d.max(1)
}

/// Symmetric positive-definite operator on `R^d`.
pub trait SpdOperator {
    fn dim(&self) -> usize;
    fn apply_into(&self, u: &[f64], out: &mut [f64]);
}

/// `u -> c u + (W A)^T (W A) u`.
pub struct PrecisionOperator<'a> {
    c: f64,
    op: &'a dyn LinearOperator,
    whitener: &'a Whitener,
    scratch: RefCell<(Vec<f64>, Vec<f64>)>,
}

impl<'a> PrecisionOperator<'a> {
    pub fn new(c: f64, op: &'a dyn LinearOperator, whitener: &'a Whitener) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument(format!("precision shift c={c} must be positive")));
        }
        let m = op.rows();
        if let Some(wm) = whitener.dim() {
            check_len("whitener dimension", m, wm)?;
        }
        Ok(Self {
            c,
            op,
            whitener,
            scratch: RefCell::new((vec![0.0; m], vec![0.0; m])),
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn operator(&self) -> &'a dyn LinearOperator {
        self.op
    }

    pub fn whitener(&self) -> &'a Whitener {
        self.whitener
    }

    pub fn meas_dim(&self) -> usize {
        self.op.rows()
    }

    /// `W A u`.
    pub fn whitened_apply(&self, u: &[f64]) -> Vec<f64> {
        let au = self.op.apply(u);
        let mut out = vec![0.0; au.len()];
        self.whitener.apply_w_into(&au, &mut out);
        out
    }

    /// `A^T W^T e`.
    pub fn whitened_adjoint(&self, e: &[f64]) -> Vec<f64> {
        let mut wt = vec![0.0; e.len()];
        self.whitener.apply_wt_into(e, &mut wt);
        self.op.adjoint(&wt)
    }

    /// `A^T Sigma^{-1} r` for a measurement-space vector `r`.
    pub fn data_term(&self, r: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; r.len()];
        self.whitener.apply_inv_into(r, &mut s);
        self.op.adjoint(&s)
    }

    /// Dense `Lambda` (tests and oracles).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            e[j] = 0.0;
            out.set_column(j, &nalgebra::DVector::from_column_slice(&col));
        }
        out
    }
}

impl SpdOperator for PrecisionOperator<'_> {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let mut guard = self.scratch.borrow_mut();
        let (au, s) = &mut *guard;
        self.op.apply_into(u, au);
        self.whitener.apply_inv_into(au, s);
        self.op.adjoint_into(s, out);
        for (o, x) in out.iter_mut().zip(u) {
            *o += self.c * x;
        }
    }
}

/// Outcome of a CG run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `||Lambda x - rhs|| / ||rhs||` (recursively updated).
    pub residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cg_solve<O: SpdOperator + ?Sized>(
    op: &O,
    rhs: &[f64],
    preconditioner: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    cg_solve_observed(op, rhs, preconditioner, tol, max_iter, |_, _| {})
}

/// [`cg_solve`] calling `observer(k, x_k)` after every iterate, starting from `x_0 = 0`.
pub fn cg_solve_observed<O, F>(
    op: &O,
    rhs: &[f64],
    preconditioner: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
    mut observer: F,
) -> Result<(Vec<f64>, CgReport)>
where
    O: SpdOperator + ?Sized,
    F: FnMut(usize, &[f64]),
{
    let d = op.dim();
    check_len("cg right-hand side", d, rhs.len())?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("cg tolerance {tol} must be positive")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("cg max_iter must be at least 1".into()));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cg right-hand side"));
    }
    if let Some(p) = preconditioner {
        check_len("preconditioner", d, p.len())?;
        if p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("preconditioner entries must be positive".into()));
        }
    }

    let mut x = vec![0.0; d];
    observer(0, &x);
    let rhs_norm = dot(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
        ));
    }

    let precond = |r: &[f64], z: &mut [f64]| match preconditioner {
        Some(p) => z.iter_mut().zip(r).zip(p).for_each(|((z, r), p)| *z = r / p),
        None => z.copy_from_slice(r),
    };

    let mut r = rhs.to_vec();
    let mut z = vec![0.0; d];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; d];
    let mut rz = dot(&r, &z);
    let mut residual = 1.0;
    let mut iterations = 0;

    while iterations < max_iter {
        op.apply_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap.is_nan() || pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..d {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        observer(iterations, &x);
        residual = dot(&r, &r).sqrt() / rhs_norm;
        if residual <= tol {
            break;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..d {
            p[i] = z[i] + beta * p[i];
        }
    }
    if !residual.is_finite() {
        return Err(Error::NonFinite("cg residual"));
    }
    Ok((
        x,
        CgReport {
            iterations,
            residual,
            converged: residual <= tol,
        },
    ))
}

/// `diag(Lambda)`: analytic when the covariance is isotropic and the operator
/// exposes column norms, otherwise `e_i` probing up to [`PROBE_LIMIT`], and
/// all ones (no preconditioning) beyond that.
pub fn diag_preconditioner(op: &PrecisionOperator<'_>) -> Vec<f64> {
    let c = op.c();
    if let (Some(prec), Some(norms)) = (op.whitener().isotropic_precision(), op.operator().column_norms_sq()) {
        return norms.iter().map(|n| c + prec * n).collect();
    }
    let d = op.dim();
    if d > PROBE_LIMIT {
        return vec![1.0; d];
    }
    let mut e = vec![0.0; d];
    (0..d)
        .map(|i| {
            e[i] = 1.0;
            let col = op.whitened_apply(&e);
            e[i] = 0.0;
            c + dot(&col, &col)
        })
        .collect()
}

/// `z = sqrt(c) eps1 + (W A)^T eps2`, whose covariance is `Lambda`.
pub fn pw_cg_noise(op: &PrecisionOperator<'_>, eps1: &[f64], eps2: &[f64]) -> Vec<f64> {
    let sc = op.c().sqrt();
    let mut z = op.whitened_adjoint(eps2);
    for (zi, e) in z.iter_mut().zip(eps1) {
        *zi += sc * e;
    }
    z
}

/// Draw `v ~ N(0, Lambda^{-1})` by solving `Lambda v = z` with `z` from
/// [`pw_cg_noise`]. Draws `d` normals for `eps1`, then `m` for `eps2`.
pub fn pw_cg_draw<R: Rng + ?Sized>(
    op: &PrecisionOperator<'_>,
    rng: &mut R,
    preconditioner: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let eps1: Vec<f64> = (0..op.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let eps2: Vec<f64> = (0..op.meas_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let z = pw_cg_noise(op, &eps1, &eps2);
    cg_solve(op, &z, preconditioner, tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{
        make_random_svd_operator, make_whitener, mask_operator, mix_conditional_cov, ConditionalCov, DenseOperator, NoiseModel,
    };
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(gamma: f64) -> Whitener {
        make_whitener(&ConditionalCov {
            abar_prev: 1.0,
            structure: NoiseModel::isotropic(gamma),
        })
        .unwrap()
    }

    fn random_dense(m: usize, d: usize, rng: &mut ChaCha8Rng) -> DenseOperator {
        DenseOperator::new(DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
    }

    fn empirical_cov(samples: &[Vec<f64>]) -> DMatrix<f64> {
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov / (n - 1.0)
    }

    #[test]
    fn scalar_system() {
        let a = DenseOperator::zeros(1, 2);
        let w = iso(1.0);
        let op = PrecisionOperator::new(2.0, &a, &w).unwrap();
        let (x, rep) = cg_solve(&op, &[4.0, 6.0], None, 1e-12, 20).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] - 3.0).abs() < 1e-14);
        assert!(rep.converged);
        let (x, rep) = cg_solve(&op, &[0.0, 0.0], None, 1e-8, 20).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert_eq!(rep.iterations, 0);
        assert!(rep.converged);
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = DenseOperator::zeros(1, 2);
        let w = iso(1.0);
        let op = PrecisionOperator::new(2.0, &a, &w).unwrap();
        assert!(cg_solve(&op, &[1.0], None, 1e-8, 20).is_err());
        assert!(cg_solve(&op, &[1.0, f64::NAN], None, 1e-8, 20).is_err());
        assert!(cg_solve(&op, &[1.0, 1.0], None, 0.0, 20).is_err());
        assert!(cg_solve(&op, &[1.0, 1.0], None, 1e-8, 0).is_err());
        assert!(PrecisionOperator::new(0.0, &a, &w).is_err());
        let w3 = make_whitener(&ConditionalCov {
            abar_prev: 1.0,
            structure: NoiseModel::Diagonal { variances: vec![1.0; 3] },
        })
        .unwrap();
        assert!(PrecisionOperator::new(1.0, &a, &w3).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_dense(12, 12, &mut rng);
        let w = iso(1e-3);
        let op = PrecisionOperator::new(1e-3, &a, &w).unwrap();
        let rhs: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let (_, rep) = cg_solve(&op, &rhs, None, 1e-14, 2).unwrap();
        assert_eq!(rep.iterations, 2);
        assert!(!rep.converged);
        assert!(rep.residual > 1e-14);
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, noise) in &[(4usize, 0), (16, 0), (6, 1), (16, 2)] {
            let d = 16;
            let a = random_dense(m, d, &mut rng);
            let model = match noise {
                0 => NoiseModel::isotropic(0.3),
                1 => NoiseModel::Diagonal {
                    variances: (0..m).map(|_| rng.random_range(0.1..2.0)).collect(),
                },
                _ => NoiseModel::LowRankPlusDiagonal {
                    factor: DMatrix::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
                    variance: 0.5,
                },
            };
            let cov = mix_conditional_cov(&model, 0.7).unwrap();
            let w = make_whitener(&cov).unwrap();
            let op = PrecisionOperator::new(0.8, &a, &w).unwrap();
            let sigma_inv = cov.to_dense(m).unwrap().try_inverse().unwrap();
            let dense = DMatrix::identity(d, d) * 0.8 + a.matrix().transpose() * sigma_inv * a.matrix();
            assert!((op.to_dense() - &dense).norm() / dense.norm() < 1e-12);

            let rhs: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let exact = dense.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
            let pre = diag_preconditioner(&op);
            for p in [None, Some(pre.as_slice())] {
                let (x, rep) = cg_solve(&op, &rhs, p, 1e-12, default_max_iter(d)).unwrap();
                assert!(rep.converged);
                let err = (DVector::from_column_slice(&x) - &exact).norm() / exact.norm();
                assert!(err < 1e-8, "relative error {err}");
            }
            for (i, p) in pre.iter().enumerate() {
                assert!((p - dense[(i, i)]).abs() < 1e-12 * dense[(i, i)]);
            }
        }
    }

    #[test]
    fn preconditioner_examples() {
        let a = DenseOperator::zeros(3, 5);
        let w = iso(1.0);
        let op = PrecisionOperator::new(2.5, &a, &w).unwrap();
        assert_eq!(diag_preconditioner(&op), vec![2.5; 5]);

        let id = DenseOperator::identity(4);
        let op = PrecisionOperator::new(0.5, &id, &w).unwrap();
        assert_eq!(diag_preconditioner(&op), vec![1.5; 4]);

        let mask = mask_operator(&[1, 3], 4).unwrap();
        let w2 = iso(0.25);
        let op = PrecisionOperator::new(1.0, &mask, &w2).unwrap();
        assert_eq!(diag_preconditioner(&op), vec![1.0, 5.0, 1.0, 5.0]);

        // probing path through a non-isotropic whitener
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_dense(3, 8, &mut rng);
        let cov = mix_conditional_cov(
            &NoiseModel::Diagonal {
                variances: vec![0.5, 1.0, 2.0],
            },
            0.5,
        )
        .unwrap();
        let w = make_whitener(&cov).unwrap();
        let op = PrecisionOperator::new(1.3, &a, &w).unwrap();
        let dense = op.to_dense();
        for (i, p) in diag_preconditioner(&op).iter().enumerate() {
            assert!((p - dense[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn error_energy_norm_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let d = 4 + 3 * trial;
            let a = make_random_svd_operator(d, d / 2, &mut rng).unwrap();
            let w = iso(0.5);
            let op = PrecisionOperator::new(1.0, &a, &w).unwrap();
            let dense = op.to_dense();
            let rhs: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let exact = dense.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
            let pre = diag_preconditioner(&op);
            for p in [None, Some(pre.as_slice())] {
                let mut norms = Vec::new();
                let (_, rep) = cg_solve_observed(&op, &rhs, p, 1e-10, 10 * d, |_, x| {
                    let e = DVector::from_column_slice(x) - &exact;
                    norms.push(e.dot(&(&dense * &e)).sqrt());
                })
                .unwrap();
                assert!(rep.converged);
                assert!(rep.iterations <= d + 2, "{} iterations at d={d}", rep.iterations);
                for k in 1..norms.len() {
                    assert!(norms[k] <= norms[k - 1] * (1.0 + 1e-9) + 1e-13, "step {k}: {norms:?}");
                }
            }
        }
    }

    #[test]
    fn draw_without_measurement_is_scaled_noise() {
        let a = DenseOperator::zeros(2, 3);
        let w = iso(1.0);
        let op = PrecisionOperator::new(4.0, &a, &w).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let (v, _) = pw_cg_draw(&op, &mut r1, None, 1e-12, 30).unwrap();
        let eps: Vec<f64> = (0..3).map(|_| r2.sample(StandardNormal)).collect();
        for (vi, e) in v.iter().zip(&eps) {
            assert!((vi - e / 2.0).abs() < 1e-14);
        }
        let (v2, _) = pw_cg_draw(&op, &mut ChaCha8Rng::seed_from_u64(4), None, 1e-12, 30).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn draw_covariance_matches_inverse_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = 8;
        let a = make_random_svd_operator(d, 4, &mut rng).unwrap();
        let cov = mix_conditional_cov(&NoiseModel::isotropic(0.05), 0.6).unwrap();
        let w = make_whitener(&cov).unwrap();
        let op = PrecisionOperator::new(0.7, &a, &w).unwrap();
        let lambda = op.to_dense();
        let sigma_post = lambda.clone().try_inverse().unwrap();
        let pre = diag_preconditioner(&op);

        let n = 50_000;
        let mut zs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for _ in 0..n {
            let e1: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let e2: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let z = pw_cg_noise(&op, &e1, &e2);
            let (v, rep) = cg_solve(&op, &z, Some(&pre), DEFAULT_CG_TOL, default_max_iter(d)).unwrap();
            assert!(rep.converged);
            zs.push(z);
            vs.push(v);
        }
        let cz = empirical_cov(&zs);
        assert!((&cz - &lambda).norm() / lambda.norm() < 0.05);
        let cv = empirical_cov(&vs);
        assert!((&cv - &sigma_post).norm() / sigma_post.norm() < 0.05);
    }

    proptest! {
        #[test]
        fn precision_is_symmetric_positive_definite(seed in any::<u64>(), m in 1usize..6, d in 1usize..10, c in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_dense(m, d, &mut rng);
            let w = iso(rng.random_range(0.01..2.0));
            let op = PrecisionOperator::new(c, &a, &w).unwrap();
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut lu = vec![0.0; d];
            let mut lv = vec![0.0; d];
            op.apply_into(&u, &mut lu);
            op.apply_into(&v, &mut lv);
            let (a1, a2) = (dot(&lu, &v), dot(&u, &lv));
            prop_assert!((a1 - a2).abs() <= 1e-10 * a1.abs().max(a2.abs()).max(1.0));
            prop_assert!(dot(&u, &lu) >= c * dot(&u, &u) * (1.0 - 1e-12));
        }
    }
}
