//! Matrix-free measurement operators, structured noise covariances and the
//! whitening operators used to pre-whiten the posterior precision.
//!
//! A [`NoiseModel`] describes `Sigma_n`. Mixing it with the identity at a given
//! `alpha_bar` ([`mix_conditional_cov`]) gives the conditional covariance
//! `alpha_bar * Sigma_n + (1 - alpha_bar) * I` in the same structural class, and
//! [`make_whitener`] builds an operator `W` with `W^T W` equal to its inverse.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{check_len, Error, Result};

/// Largest `rows * cols` for which dense materialization is offered.
pub const DENSE_LIMIT: usize = 1 << 20;

/// A linear map `R^cols -> R^rows` exposed through its action and adjoint.
pub trait LinearOperator: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// `out = A x`. Callers guarantee `x.len() == cols` and `out.len() == rows`.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    /// `out = A^T y`.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    /// Squared Euclidean norms of the columns, when cheaply available.
    fn column_norms_sq(&self) -> Option<Vec<f64>> {
        None
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        self.apply_into(x, &mut out);
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(y, &mut out);
        out
    }

    /// Dense copy built by probing columns; `None` above [`DENSE_LIMIT`] entries.
    fn to_dense(&self) -> Option<DMatrix<f64>> {
        let (m, d) = (self.rows(), self.cols());
        if m * d > DENSE_LIMIT {
            return None;
        }
        let mut dense = DMatrix::zeros(m, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; m];
        for j in 0..d {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            e[j] = 0.0;
            for i in 0..m {
                dense[(i, j)] = col[i];
            }
        }
        Some(dense)
    }
}

/// Explicit `m x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    col_norms_sq: Vec<f64>,
}

const DENSE_MAGIC: &[u8; 8] = b"CDPSOPv1";

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let col_norms_sq = matrix.column_iter().map(|c| c.norm_squared()).collect();
        Self { matrix, col_norms_sq }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Write as 8-byte magic, `m` and `d` as little-endian `u32`, then the
    /// entries in row-major order as little-endian `f64`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DENSE_MAGIC)?;
        w.write_all(&(self.matrix.nrows() as u32).to_le_bytes())?;
        w.write_all(&(self.matrix.ncols() as u32).to_le_bytes())?;
        for i in 0..self.matrix.nrows() {
            for j in 0..self.matrix.ncols() {
                w.write_all(&self.matrix[(i, j)].to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != DENSE_MAGIC {
            return Err(Error::InvalidArgument("bad operator file magic".into()));
        }
        let m = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; m * d * 8];
        r.read_exact(&mut buf)?;
        let values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        Ok(Self::new(DMatrix::from_row_iterator(m, d, values)))
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (m, d) = self.matrix.shape();
        let data = self.matrix.as_slice();
        out.fill(0.0);
        // column-major storage: accumulate column by column
        for j in 0..d {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let col = &data[j * m..(j + 1) * m];
            for (o, a) in out.iter_mut().zip(col) {
                *o += a * xj;
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let m = self.matrix.nrows();
        let data = self.matrix.as_slice();
        for (j, o) in out.iter_mut().enumerate() {
            let col = &data[j * m..(j + 1) * m];
            *o = col.iter().zip(y).map(|(a, b)| a * b).sum();
        }
    }

    fn column_norms_sq(&self) -> Option<Vec<f64>> {
        Some(self.col_norms_sq.clone())
    }

    fn to_dense(&self) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }
}

/// `A = U diag(s) V^T` with `U, V` from the SVD of a standard Gaussian `m x d`
/// matrix and `s_i ~ Uniform[0, 1]`.
pub fn make_random_svd_operator<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<DenseOperator> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidArgument("operator dimensions must be positive".into()));
    }
    if m > d {
        return Err(Error::InvalidArgument(format!(
            "random SVD operator needs m <= d, got m={m}, d={d}"
        )));
    }
    let gaussian = DMatrix::from_row_iterator(m, d, (0..m * d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let svd = gaussian.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let unif = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
    let s = DVector::from_iterator(m, (0..m).map(|_| rng.sample(unif)));
    let a = &u * DMatrix::from_diagonal(&s) * &v_t;
    Ok(DenseOperator::new(a))
}

/// Coordinate selection `x -> (x_i)_{i in keep}`.
#[derive(Debug, Clone)]
pub struct MaskOperator {
    keep: Vec<usize>,
    d: usize,
}

impl LinearOperator for MaskOperator {
    fn rows(&self) -> usize {
        self.keep.len()
    }

    fn cols(&self) -> usize {
        self.d
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(&self.keep) {
            *o = x[i];
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&v, &i) in y.iter().zip(&self.keep) {
            out[i] = v;
        }
    }

    fn column_norms_sq(&self) -> Option<Vec<f64>> {
        let mut n = vec![0.0; self.d];
        for &i in &self.keep {
            n[i] = 1.0;
        }
        Some(n)
    }
}

impl MaskOperator {
    pub fn keep(&self) -> &[usize] {
        &self.keep
    }
}

pub fn mask_operator(keep_indices: &[usize], d: usize) -> Result<MaskOperator> {
    if keep_indices.is_empty() {
        return Err(Error::InvalidArgument("mask keeps no coordinates".into()));
    }
    let mut seen = vec![false; d];
    for &i in keep_indices {
        if i >= d {
            return Err(Error::InvalidArgument(format!("mask index {i} out of range for d={d}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("mask index {i} repeated")));
        }
    }
    Ok(MaskOperator {
        keep: keep_indices.to_vec(),
        d,
    })
}

/// Circular convolution with a short kernel anchored at `(len - 1) / 2`.
#[derive(Debug, Clone)]
pub struct BlurOperator {
    kernel: Vec<f64>,
    d: usize,
    anchor: usize,
}

impl LinearOperator for BlurOperator {
    fn rows(&self) -> usize {
        self.d
    }

    fn cols(&self) -> usize {
        self.d
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &k) in self.kernel.iter().enumerate() {
                acc += k * x[(i + d + self.anchor - j) % d];
            }
            *o = acc;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        // correlation with the same kernel
        let d = self.d;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, &k) in self.kernel.iter().enumerate() {
                acc += k * y[(i + d + j - self.anchor) % d];
            }
            *o = acc;
        }
    }

    fn column_norms_sq(&self) -> Option<Vec<f64>> {
        let n: f64 = self.kernel.iter().map(|k| k * k).sum();
        Some(vec![n; self.d])
    }
}

pub fn blur_operator(kernel: &[f64], d: usize) -> Result<BlurOperator> {
    if kernel.is_empty() || kernel.len() > d {
        return Err(Error::InvalidArgument(format!(
            "blur kernel length {} must be in 1..={d}",
            kernel.len()
        )));
    }
    if kernel.iter().any(|k| !k.is_finite()) {
        return Err(Error::NonFinite("blur kernel"));
    }
    Ok(BlurOperator {
        kernel: kernel.to_vec(),
        d,
        anchor: (kernel.len() - 1) / 2,
    })
}

/// Structured measurement-noise covariance `Sigma_n`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// `variance * I`.
    Isotropic { variance: f64 },
    /// `diag(variances)`.
    Diagonal { variances: Vec<f64> },
    /// `U U^T + variance * I` with `U` tall (`m x r`).
    LowRankPlusDiagonal { factor: DMatrix<f64>, variance: f64 },
    /// `F^H diag(spectrum) F`; the spectrum must be real, positive and
    /// Hermitian-symmetric (`spectrum[k] == spectrum[(m - k) % m]`).
    Circulant { spectrum: Vec<f64> },
}

impl NoiseModel {
    pub fn isotropic(variance: f64) -> Self {
        Self::Isotropic { variance }
    }

    /// Measurement dimension if the structure fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Isotropic { .. } => None,
            Self::Diagonal { variances } => Some(variances.len()),
            Self::LowRankPlusDiagonal { factor, .. } => Some(factor.nrows()),
            Self::Circulant { spectrum } => Some(spectrum.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        match self {
            Self::Isotropic { variance } if !pos(*variance) => Err(Error::NotPositiveDefinite(format!("isotropic variance {variance}"))),
            Self::Diagonal { variances } if variances.is_empty() || !variances.iter().all(|&v| pos(v)) => {
                Err(Error::NotPositiveDefinite("diagonal variances must be positive".into()))
            }
            Self::LowRankPlusDiagonal { factor, variance } => {
                if !pos(*variance) {
                    return Err(Error::NotPositiveDefinite(format!("diagonal shift {variance}")));
                }
                if factor.nrows() == 0 || factor.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("low-rank factor must be finite and non-empty".into()));
                }
                Ok(())
            }
            Self::Circulant { spectrum } => {
                if spectrum.is_empty() || !spectrum.iter().all(|&v| pos(v)) {
                    return Err(Error::NotPositiveDefinite("circulant eigenvalues must be positive".into()));
                }
                let m = spectrum.len();
                for k in 1..m {
                    let (a, b) = (spectrum[k], spectrum[m - k]);
                    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                        return Err(Error::InvalidArgument(format!(
                            "circulant spectrum not Hermitian-symmetric at bin {k}"
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Dense `m x m` covariance (tests and oracles).
    pub fn to_dense(&self, m: usize) -> Result<DMatrix<f64>> {
        if let Some(dim) = self.dim() {
            check_len("noise model dimension", m, dim)?;
        }
        Ok(match self {
            Self::Isotropic { variance } => DMatrix::identity(m, m) * *variance,
            Self::Diagonal { variances } => DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
            Self::LowRankPlusDiagonal { factor, variance } => factor * factor.transpose() + DMatrix::identity(m, m) * *variance,
            Self::Circulant { spectrum } => circulant_dense(spectrum),
        })
    }
}

/// Dense real symmetric circulant with the given (Hermitian-symmetric) eigenvalues.
fn circulant_dense(spectrum: &[f64]) -> DMatrix<f64> {
    let m = spectrum.len();
    let first: Vec<f64> = (0..m)
        .map(|j| {
            spectrum
                .iter()
                .enumerate()
                .map(|(k, &l)| l * (2.0 * std::f64::consts::PI * (k * j) as f64 / m as f64).cos())
                .sum::<f64>()
                / m as f64
        })
        .collect();
    DMatrix::from_fn(m, m, |i, j| first[(j + m - i) % m])
}

/// `alpha_bar * Sigma_n + (1 - alpha_bar) * I`, kept in the structural class of
/// `Sigma_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCov {
    pub abar_prev: f64,
    /// The mixed covariance, expressed with the same variant as the source noise model.
    pub structure: NoiseModel,
}

impl ConditionalCov {
    pub fn to_dense(&self, m: usize) -> Result<DMatrix<f64>> {
        self.structure.to_dense(m)
    }

    /// `gamma_t` for the isotropic case.
    pub fn gamma(&self) -> Option<f64> {
        match self.structure {
            NoiseModel::Isotropic { variance } => Some(variance),
            _ => None,
        }
    }
}

pub fn mix_conditional_cov(noise: &NoiseModel, abar_prev: f64) -> Result<ConditionalCov> {
    if !(abar_prev > 0.0 && abar_prev <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {abar_prev} outside (0, 1]")));
    }
    noise.validate()?;
    let a = abar_prev;
    let mix = |v: f64| a * v + (1.0 - a);
    let structure = match noise {
        NoiseModel::Isotropic { variance } => NoiseModel::Isotropic { variance: mix(*variance) },
        NoiseModel::Diagonal { variances } => NoiseModel::Diagonal {
            variances: variances.iter().map(|&v| mix(v)).collect(),
        },
        NoiseModel::LowRankPlusDiagonal { factor, variance } => NoiseModel::LowRankPlusDiagonal {
            factor: if a == 1.0 { factor.clone() } else { factor * a.sqrt() },
            variance: mix(*variance),
        },
        NoiseModel::Circulant { spectrum } => NoiseModel::Circulant {
            spectrum: spectrum.iter().map(|&v| mix(v)).collect(),
        },
    };
    Ok(ConditionalCov { abar_prev, structure })
}

/// Operator `W` with `W^T W = Sigma^{-1}` for a structured covariance.
#[derive(Clone)]
pub struct Whitener {
    kind: WhitenerKind,
}

#[derive(Clone)]
enum WhitenerKind {
    Isotropic { gamma: f64, inv_sqrt: f64 },
    Diagonal { inv_sqrt: Vec<f64>, inv: Vec<f64> },
    LowRank(LowRankWhitener),
    Circulant(CirculantWhitener),
}

/// `Sigma = F F^T + delta I`. With the thin QR `F = Q R` and the Cholesky
/// factor `L L^T = R R^T + delta I`,
/// `W = Q L^{-1} Q^T + delta^{-1/2} (I - Q Q^T)`.
#[derive(Clone)]
struct LowRankWhitener {
    factor: DMatrix<f64>,
    delta: f64,
    /// Cholesky of the capacitance `I + F^T F / delta`.
    capacitance: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    q: DMatrix<f64>,
    /// Lower-triangular `L` with `L L^T = R R^T + delta I`.
    l: DMatrix<f64>,
}

#[derive(Clone)]
struct CirculantWhitener {
    m: usize,
    /// `D'^{-1/2}` on the `m/2 + 1` non-redundant bins.
    half_inv_sqrt: Vec<f64>,
    half_inv: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl CirculantWhitener {
    fn filter(&self, v: &[f64], gains: &[f64], out: &mut [f64]) {
        let mut input = v.to_vec();
        let mut spec = self.forward.make_output_vec();
        self.forward
            .process(&mut input, &mut spec)
            .expect("buffer sizes come from the plan");
        for (c, g) in spec.iter_mut().zip(gains) {
            *c *= *g / self.m as f64;
        }
        // bins 0 and m/2 (even m) must be purely real for a real inverse
        spec[0].im = 0.0;
        if self.m.is_multiple_of(2) {
            spec[self.m / 2].im = 0.0;
        }
        self.inverse.process(&mut spec, out).expect("buffer sizes come from the plan");
    }
}

impl Whitener {
    /// Measurement dimension, or `None` when any length is accepted.
    pub fn dim(&self) -> Option<usize> {
        match &self.kind {
            WhitenerKind::Isotropic { .. } => None,
            WhitenerKind::Diagonal { inv, .. } => Some(inv.len()),
            WhitenerKind::LowRank(lr) => Some(lr.factor.nrows()),
            WhitenerKind::Circulant(c) => Some(c.m),
        }
    }

    /// `1 / gamma` when the covariance is a multiple of the identity.
    pub fn isotropic_precision(&self) -> Option<f64> {
        match self.kind {
            WhitenerKind::Isotropic { gamma, .. } => Some(1.0 / gamma),
            _ => None,
        }
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        match self.dim() {
            Some(m) if m != v.len() => match self.kind {
                WhitenerKind::Circulant(_) => Err(Error::FftLength {
                    expected: m,
                    found: v.len(),
                }),
                _ => check_len("whitener input", m, v.len()),
            },
            _ => Ok(()),
        }
    }

    pub fn apply_w(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let mut out = vec![0.0; v.len()];
        self.apply_w_into(v, &mut out);
        Ok(out)
    }

    pub fn apply_wt(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let mut out = vec![0.0; v.len()];
        self.apply_wt_into(v, &mut out);
        Ok(out)
    }

    pub fn apply_inv(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let mut out = vec![0.0; v.len()];
        self.apply_inv_into(v, &mut out);
        Ok(out)
    }

    pub(crate) fn apply_w_into(&self, v: &[f64], out: &mut [f64]) {
        match &self.kind {
            WhitenerKind::Isotropic { inv_sqrt, .. } => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = x * inv_sqrt;
                }
            }
            WhitenerKind::Diagonal { inv_sqrt, .. } => {
                for ((o, x), s) in out.iter_mut().zip(v).zip(inv_sqrt) {
                    *o = x * s;
                }
            }
            WhitenerKind::LowRank(lr) => lr.apply(v, out, false),
            WhitenerKind::Circulant(c) => c.filter(v, &c.half_inv_sqrt, out),
        }
    }

    pub(crate) fn apply_wt_into(&self, v: &[f64], out: &mut [f64]) {
        match &self.kind {
            WhitenerKind::LowRank(lr) => lr.apply(v, out, true),
            // the remaining factors are symmetric
            _ => self.apply_w_into(v, out),
        }
    }

    pub(crate) fn apply_inv_into(&self, v: &[f64], out: &mut [f64]) {
        match &self.kind {
            WhitenerKind::Isotropic { gamma, .. } => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o = x / gamma;
                }
            }
            WhitenerKind::Diagonal { inv, .. } => {
                for ((o, x), s) in out.iter_mut().zip(v).zip(inv) {
                    *o = x * s;
                }
            }
            WhitenerKind::LowRank(lr) => {
                // Woodbury: delta^{-1} (v - F (I + F^T F / delta)^{-1} F^T v / delta)
                let vv = DVector::from_column_slice(v);
                let ftv = lr.factor.tr_mul(&vv) / lr.delta;
                let inner = lr.capacitance.solve(&ftv);
                let corr = &lr.factor * inner;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (v[i] - corr[i]) / lr.delta;
                }
            }
            WhitenerKind::Circulant(c) => c.filter(v, &c.half_inv, out),
        }
    }
}

impl LowRankWhitener {
    fn apply(&self, v: &[f64], out: &mut [f64], transpose: bool) {
        let vv = DVector::from_column_slice(v);
        let qtv = self.q.tr_mul(&vv);
        let inner = if transpose {
            self.l.tr_solve_lower_triangular(&qtv).expect("L has a positive diagonal")
        } else {
            self.l.solve_lower_triangular(&qtv).expect("L has a positive diagonal")
        };
        let range = &self.q * inner;
        let proj = &self.q * qtv;
        let s = self.delta.sqrt().recip();
        for i in 0..v.len() {
            out[i] = range[i] + s * (v[i] - proj[i]);
        }
    }
}

pub fn make_whitener(cov: &ConditionalCov) -> Result<Whitener> {
    cov.structure.validate()?;
    let kind = match &cov.structure {
        NoiseModel::Isotropic { variance } => WhitenerKind::Isotropic {
            gamma: *variance,
            inv_sqrt: variance.sqrt().recip(),
        },
        NoiseModel::Diagonal { variances } => WhitenerKind::Diagonal {
            inv_sqrt: variances.iter().map(|v| v.sqrt().recip()).collect(),
            inv: variances.iter().map(|v| v.recip()).collect(),
        },
        NoiseModel::LowRankPlusDiagonal { factor, variance } => {
            let r = factor.ncols();
            let delta = *variance;
            let cap = DMatrix::identity(r, r) + factor.tr_mul(factor) / delta;
            let capacitance = cap
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("low-rank capacitance".into()))?;
            let qr = factor.clone().qr();
            let q = qr.q();
            let rr = qr.r();
            let k = q.ncols();
            let inner = &rr * rr.transpose() + DMatrix::identity(k, k) * delta;
            let l = inner
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("low-rank inner factor".into()))?
                .l();
            WhitenerKind::LowRank(LowRankWhitener {
                factor: factor.clone(),
                delta,
                capacitance,
                q,
                l,
            })
        }
        NoiseModel::Circulant { spectrum } => {
            let m = spectrum.len();
            let mut planner = RealFftPlanner::<f64>::new();
            let half = &spectrum[..m / 2 + 1];
            WhitenerKind::Circulant(CirculantWhitener {
                m,
                half_inv_sqrt: half.iter().map(|v| v.sqrt().recip()).collect(),
                half_inv: half.iter().map(|v| v.recip()).collect(),
                forward: planner.plan_fft_forward(m),
                inverse: planner.plan_fft_inverse(m),
            })
        }
    };
    Ok(Whitener { kind })
}
