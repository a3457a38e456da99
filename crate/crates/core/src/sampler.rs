//! Reverse-time samplers: the coupled C-DPS loop, its locally linearized
//! nonlinear step, and the DPS / Score-SDE / ILVR baselines.
//!
//! Step `t` maps `x_t` to `x_{t-1}` and consumes `beta_t` and `alpha_bar_{t-1}`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_finite, check_len, Error, Result};
use crate::gmm_prior::GaussianMixture;
use crate::linalg::{cg_solve, default_max_iter, diag_preconditioner, pw_cg_noise, PrecisionOperator, DEFAULT_CG_TOL};
use crate::metrics::{measurement_residual, score_consistency_vectors};
use crate::operators::{make_whitener, mix_conditional_cov, ConditionalCov, DenseOperator, LinearOperator, NoiseModel, Whitener};
use crate::schedules::NoiseSchedule;

/// Analytic or learned score of the noised data marginal.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `grad log p_t(x)` at noise level `abar`.
    fn score(&self, x: &[f64], abar: f64) -> Vec<f64>;

    /// `E[x_0 | x_t = x]`.
    fn denoise(&self, x: &[f64], abar: f64) -> Vec<f64> {
        let s = self.score(x, abar);
        x.iter().zip(&s).map(|(xi, si)| (xi + (1.0 - abar) * si) / abar.sqrt()).collect()
    }

    /// `J^T u` with `J` the Jacobian of [`ScoreModel::denoise`].
    fn denoise_vjp(&self, x: &[f64], abar: f64, u: &[f64]) -> Vec<f64>;
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn score(&self, x: &[f64], abar: f64) -> Vec<f64> {
        GaussianMixture::score(self, x, abar)
    }

    fn denoise(&self, x: &[f64], abar: f64) -> Vec<f64> {
        GaussianMixture::denoise(self, x, abar)
    }

    fn denoise_vjp(&self, x: &[f64], abar: f64, u: &[f64]) -> Vec<f64> {
        GaussianMixture::denoise_vjp(self, x, abar, u)
    }
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Forward-noised measurements `y_0, ..., y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementChain {
    levels: Vec<Vec<f64>>,
}

impl MeasurementChain {
    pub fn y(&self, t: usize) -> &[f64] {
        &self.levels[t]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn num_steps(&self) -> usize {
        self.levels.len() - 1
    }

    /// Chain with `y_t = sqrt(abar_t) y_0` (no forward noise).
    pub fn deterministic(y0: &[f64], schedule: &NoiseSchedule) -> Self {
        let levels = (0..=schedule.num_steps())
            .map(|t| {
                let s = schedule.alpha_bars()[t].sqrt();
                y0.iter().map(|v| s * v).collect()
            })
            .collect();
        Self { levels }
    }
}

/// `y_t = sqrt(1 - beta_t) y_{t-1} + sqrt(beta_t) z_t`, drawing `z_1, ..., z_T` in order.
pub fn generate_measurement_chain<R: Rng + ?Sized>(y0: &[f64], schedule: &NoiseSchedule, rng: &mut R) -> Result<MeasurementChain> {
    check_finite("initial measurement", y0)?;
    let mut levels = Vec::with_capacity(schedule.num_steps() + 1);
    levels.push(y0.to_vec());
    for t in 1..=schedule.num_steps() {
        let (sa, sb) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
        let prev = &levels[t - 1];
        let next = prev.iter().map(|p| sa * p + sb * rng.sample::<f64, _>(StandardNormal)).collect();
        levels.push(next);
    }
    Ok(MeasurementChain { levels })
}

/// Prior coefficient on `x_t` in the mean right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanRhs {
    /// `sqrt(1 - beta_t) / beta_t`, from completing the square.
    #[default]
    Derived,
    /// `c_t = (1 - beta_t) / beta_t`.
    Simplified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub cg_tol: f64,
    /// Defaults to `10 d`.
    pub cg_max_iter: Option<usize>,
    pub mean_rhs: MeanRhs,
    /// Keep the `N(0, I)` prior on `x_{t-1}`, adding `I` to the precision.
    pub include_prior: bool,
    pub precondition: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: None,
            mean_rhs: MeanRhs::Derived,
            include_prior: false,
            precondition: true,
        }
    }
}

/// Quantities fixed by `(x_t, t)` before the two solves.
pub struct PosteriorStepParams {
    pub t: usize,
    /// Precision shift, `(1 - beta_t) / beta_t` (plus one with the prior term).
    pub c: f64,
    /// Coefficient of `x_t` in the mean right-hand side.
    pub rhs_scale: f64,
    /// `b_{t-1}`, the frozen-score offset of the measurement mean.
    pub b_prev: Vec<f64>,
    pub cov: ConditionalCov,
    pub whitener: Whitener,
}

impl PosteriorStepParams {
    pub fn new(t: usize, b_prev: Vec<f64>, noise: &NoiseModel, schedule: &NoiseSchedule, cfg: &SolverConfig) -> Result<Self> {
        if t == 0 || t > schedule.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                num_steps: schedule.num_steps(),
            });
        }
        let beta = schedule.beta(t);
        let base = (1.0 - beta) / beta;
        let c = if cfg.include_prior { base + 1.0 } else { base };
        let rhs_scale = match cfg.mean_rhs {
            MeanRhs::Derived => (1.0 - beta).sqrt() / beta,
            MeanRhs::Simplified => base,
        };
        let cov = mix_conditional_cov(noise, schedule.alpha_bars()[t - 1])?;
        let whitener = make_whitener(&cov)?;
        Ok(Self {
            t,
            c,
            rhs_scale,
            b_prev,
            cov,
            whitener,
        })
    }

    pub fn precision<'a>(&'a self, op: &'a dyn LinearOperator) -> Result<PrecisionOperator<'a>> {
        PrecisionOperator::new(self.c, op, &self.whitener)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    pub cg_iters_mean: usize,
    pub cg_iters_noise: usize,
}

/// Mean and zero-mean noise of one reverse step; `x_{t-1} = mean + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParts {
    pub mean: Vec<f64>,
    pub noise: Vec<f64>,
    pub stats: StepStats,
}

impl StepParts {
    pub fn sample(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.noise).map(|(a, b)| a + b).collect()
    }
}

fn solve_checked(prec: &PrecisionOperator<'_>, rhs: &[f64], pre: Option<&[f64]>, cfg: &SolverConfig) -> Result<(Vec<f64>, usize)> {
    let max_iter = cfg.cg_max_iter.unwrap_or_else(|| default_max_iter(rhs.len()));
    let (x, rep) = cg_solve(prec, rhs, pre, cfg.cg_tol, max_iter)?;
    if !rep.converged {
        return Err(Error::CgNotConverged {
            iterations: rep.iterations,
            residual: rep.residual,
        });
    }
    Ok((x, rep.iterations))
}

/// Shared core of the linear and linearized steps. Draws `d` then `m` normals.
#[allow(clippy::too_many_arguments)]
fn posterior_step<R: Rng + ?Sized>(
    x_t: &[f64],
    y_prev: &[f64],
    t: usize,
    op: &dyn LinearOperator,
    b_prev: Vec<f64>,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<StepParts> {
    let params = PosteriorStepParams::new(t, b_prev, noise, schedule, cfg)?;
    let prec = params.precision(op)?;
    let pre = cfg.precondition.then(|| diag_preconditioner(&prec));

    let shifted: Vec<f64> = y_prev.iter().zip(&params.b_prev).map(|(y, b)| y - b).collect();
    let mut rhs = prec.data_term(&shifted);
    for (r, x) in rhs.iter_mut().zip(x_t) {
        *r += params.rhs_scale * x;
    }
    let (mean, cg_iters_mean) = solve_checked(&prec, &rhs, pre.as_deref(), cfg)?;

    let eps1 = gaussian_vec(op.cols(), rng);
    let eps2 = gaussian_vec(op.rows(), rng);
    let z = pw_cg_noise(&prec, &eps1, &eps2);
    let (noise_v, cg_iters_noise) = solve_checked(&prec, &z, pre.as_deref(), cfg)?;
    check_finite("posterior step", &mean)?;
    Ok(StepParts {
        mean,
        noise: noise_v,
        stats: StepStats {
            cg_iters_mean,
            cg_iters_noise,
        },
    })
}

fn check_step_dims(x_t: &[f64], y_len: usize, model: &dyn ScoreModel, op: &dyn LinearOperator) -> Result<()> {
    check_len("x_t", model.dim(), x_t.len())?;
    check_len("operator columns", model.dim(), op.cols())?;
    check_len("measurement", op.rows(), y_len)?;
    check_finite("x_t", x_t)
}

/// One C-DPS reverse step with the mean and noise returned separately.
#[allow(clippy::too_many_arguments)]
pub fn cdps_step_parts<R: Rng + ?Sized>(
    x_t: &[f64],
    chain: &MeasurementChain,
    t: usize,
    model: &dyn ScoreModel,
    op: &dyn LinearOperator,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<StepParts> {
    if t == 0 || t > schedule.num_steps() || t > chain.num_steps() {
        return Err(Error::StepOutOfRange {
            t,
            num_steps: schedule.num_steps(),
        });
    }
    let y_prev = chain.y(t - 1);
    check_step_dims(x_t, y_prev.len(), model, op)?;
    let s_hat = model.score(x_t, schedule.alpha_bars()[t]);
    let scale = 1.0 - schedule.alpha_bars()[t - 1];
    let b_prev: Vec<f64> = op.apply(&s_hat).iter().map(|v| scale * v).collect();
    posterior_step(x_t, y_prev, t, op, b_prev, noise, schedule, rng, cfg)
}

/// One C-DPS reverse step `x_t -> x_{t-1}`.
#[allow(clippy::too_many_arguments)]
pub fn cdps_step<R: Rng + ?Sized>(
    x_t: &[f64],
    chain: &MeasurementChain,
    t: usize,
    model: &dyn ScoreModel,
    op: &dyn LinearOperator,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, StepStats)> {
    let parts = cdps_step_parts(x_t, chain, t, model, op, noise, schedule, rng, cfg)?;
    Ok((parts.sample(), parts.stats))
}

/// What to record while sampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub residual: bool,
    pub cg: bool,
    pub score_consistency: bool,
}

impl TraceOptions {
    pub fn all() -> Self {
        Self {
            residual: true,
            cg: true,
            score_consistency: true,
        }
    }

    fn any(&self) -> bool {
        self.residual || self.cg || self.score_consistency
    }
}

/// Record for the iterate `x_t` produced by the step from `t + 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// `||y - A x_t||^2`.
    pub residual_sq: Option<f64>,
    pub cg_iters_mean: Option<usize>,
    pub cg_iters_noise: Option<usize>,
    /// Cosine between `s(x_t, t)` and `s(x_{t+1}, t+1)`; `None` for a zero score.
    pub score_cosine: Option<f64>,
    pub score_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerTrace {
    /// `||y - A x_T||^2` for the initial draw.
    pub initial_residual_sq: Option<f64>,
    pub steps: Vec<StepRecord>,
}

struct TraceRecorder<'a> {
    opts: TraceOptions,
    y: &'a [f64],
    op: &'a dyn LinearOperator,
    model: &'a dyn ScoreModel,
    schedule: &'a NoiseSchedule,
    trace: SamplerTrace,
}

impl<'a> TraceRecorder<'a> {
    fn new(
        opts: TraceOptions,
        y: &'a [f64],
        op: &'a dyn LinearOperator,
        model: &'a dyn ScoreModel,
        schedule: &'a NoiseSchedule,
        x_init: &[f64],
    ) -> Self {
        let mut trace = SamplerTrace::default();
        if opts.residual {
            trace.initial_residual_sq = Some(measurement_residual(x_init, y, op).expect("dimensions checked"));
        }
        if opts.any() {
            trace.steps.reserve(schedule.num_steps());
        }
        Self {
            opts,
            y,
            op,
            model,
            schedule,
            trace,
        }
    }

    fn record(&mut self, t: usize, x_t: &[f64], x_next: &[f64], stats: Option<StepStats>) {
        if !self.opts.any() {
            return;
        }
        let mut rec = StepRecord {
            t: t - 1,
            ..Default::default()
        };
        if self.opts.residual {
            rec.residual_sq = Some(measurement_residual(x_next, self.y, self.op).expect("dimensions checked"));
        }
        if self.opts.cg {
            rec.cg_iters_mean = stats.map(|s| s.cg_iters_mean);
            rec.cg_iters_noise = stats.map(|s| s.cg_iters_noise);
        }
        if self.opts.score_consistency {
            let ab = self.schedule.alpha_bars();
            let s_cur = self.model.score(x_t, ab[t]);
            let s_prev = self.model.score(x_next, ab[t - 1]);
            let sc = score_consistency_vectors(&s_prev, &s_cur).expect("equal lengths");
            rec.score_cosine = sc.cosine;
            rec.score_mse = Some(sc.mse);
        }
        self.trace.steps.push(rec);
    }
}

/// Run C-DPS over a given measurement chain from `x_init` (or `x_T ~ N(0, I)`).
#[allow(clippy::too_many_arguments)]
pub fn cdps_sample_with_chain<R: Rng + ?Sized>(
    chain: &MeasurementChain,
    x_init: Option<Vec<f64>>,
    op: &dyn LinearOperator,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    cfg: &SolverConfig,
    trace_opts: TraceOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, SamplerTrace)> {
    check_len("measurement chain length", schedule.num_steps(), chain.num_steps())?;
    let mut x = match x_init {
        Some(x) => x,
        None => gaussian_vec(model.dim(), rng),
    };
    check_step_dims(&x, chain.y(0).len(), model, op)?;
    let mut rec = TraceRecorder::new(trace_opts, chain.y(0), op, model, schedule, &x);
    for t in (1..=schedule.num_steps()).rev() {
        let (next, stats) = cdps_step(&x, chain, t, model, op, noise, schedule, rng, cfg)?;
        rec.record(t, &x, &next, Some(stats));
        x = next;
    }
    Ok((x, rec.trace))
}

/// Full C-DPS sampler: forward-noise `y` into a chain, draw `x_T` (unless
/// given) and apply `T` reverse steps.
#[allow(clippy::too_many_arguments)]
pub fn cdps_sample<R: Rng + ?Sized>(
    x_init: Option<Vec<f64>>,
    y: &[f64],
    op: &dyn LinearOperator,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    cfg: &SolverConfig,
    trace_opts: TraceOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, SamplerTrace)> {
    let chain = generate_measurement_chain(y, schedule, rng)?;
    cdps_sample_with_chain(&chain, x_init, op, noise, schedule, model, cfg, trace_opts, rng)
}

/// Posterior mean of `x_{t-1}` under the DDPM reverse kernel, from the denoised estimate.
fn ddpm_mean(x: &[f64], x0: &[f64], t: usize, schedule: &NoiseSchedule) -> (Vec<f64>, f64) {
    let ab = schedule.alpha_bars();
    let (abt, abp) = (ab[t], ab[t - 1]);
    let beta = schedule.beta(t);
    let denom = 1.0 - abt;
    let cx = schedule.alpha(t).sqrt() * (1.0 - abp) / denom;
    let c0 = abp.sqrt() * beta / denom;
    let mean = x.iter().zip(x0).map(|(xi, x0i)| cx * xi + c0 * x0i).collect();
    let var = (beta * (1.0 - abp) / denom).max(0.0);
    (mean, var)
}

/// Unconditional ancestral DDPM step `x_t -> x_{t-1}`; draws `d` normals.
pub fn ddpm_step<R: Rng + ?Sized>(x: &[f64], t: usize, model: &dyn ScoreModel, schedule: &NoiseSchedule, rng: &mut R) -> Vec<f64> {
    let x0 = model.denoise(x, schedule.alpha_bars()[t]);
    let (mean, var) = ddpm_mean(x, &x0, t, schedule);
    let sd = var.sqrt();
    mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// DPS: ancestral step plus `-(zeta / ||y - A x0_hat||) grad 0.5 ||y - A x0_hat||^2`.
#[allow(clippy::too_many_arguments)]
pub fn dps_sample<R: Rng + ?Sized>(
    x_init: Option<Vec<f64>>,
    y: &[f64],
    op: &dyn LinearOperator,
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    zeta: f64,
    trace_opts: TraceOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, SamplerTrace)> {
    let mut x = match x_init {
        Some(x) => x,
        None => gaussian_vec(model.dim(), rng),
    };
    check_step_dims(&x, y.len(), model, op)?;
    let mut rec = TraceRecorder::new(trace_opts, y, op, model, schedule, &x);
    let ab = schedule.alpha_bars();
    for t in (1..=schedule.num_steps()).rev() {
        let x0 = model.denoise(&x, ab[t]);
        let (mean, var) = ddpm_mean(&x, &x0, t, schedule);
        let sd = var.sqrt();
        let mut next: Vec<f64> = mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        if zeta != 0.0 {
            let r: Vec<f64> = y.iter().zip(op.apply(&x0)).map(|(a, b)| a - b).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                // descent direction J^T A^T r
                let dir = model.denoise_vjp(&x, ab[t], &op.adjoint(&r));
                let step = zeta / norm;
                next.iter_mut().zip(&dir).for_each(|(n, g)| *n += step * g);
            }
        }
        check_finite("dps iterate", &next)?;
        rec.record(t, &x, &next, None);
        x = next;
    }
    Ok((x, rec.trace))
}

/// `-A^T (y + sigma_t eps - A x_t)`; draws `m` normals.
pub fn score_sde_guidance<R: Rng + ?Sized>(x_t: &[f64], y: &[f64], op: &dyn LinearOperator, sigma_t: f64, rng: &mut R) -> Vec<f64> {
    let ax = op.apply(x_t);
    let r: Vec<f64> = y
        .iter()
        .zip(&ax)
        .map(|(yi, a)| -(yi + sigma_t * rng.sample::<f64, _>(StandardNormal) - a))
        .collect();
    op.adjoint(&r)
}

/// Moore-Penrose pseudo-inverse with singular values below `1e-10` treated as zero.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pinv: DMatrix<f64>,
}

impl PseudoInverse {
    pub const CUTOFF: f64 = 1e-10;

    pub fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let inv: Vec<f64> = svd
            .singular_values
            .iter()
            .map(|&s| if s < Self::CUTOFF { 0.0 } else { 1.0 / s })
            .collect();
        let sinv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(inv));
        Self {
            pinv: v_t.transpose() * sinv * u.transpose(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        (&self.pinv * nalgebra::DVector::from_column_slice(r)).as_slice().to_vec()
    }
}

/// `-A^+ (y_t - A x_t)`.
pub fn ilvr_guidance(x_t: &[f64], y_t: &[f64], op: &dyn LinearOperator, pinv: &PseudoInverse) -> Vec<f64> {
    let r: Vec<f64> = y_t.iter().zip(op.apply(x_t)).map(|(a, b)| b - a).collect();
    pinv.apply(&r)
}

/// Which projection the guided-DDPM baselines apply after each ancestral step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceKind {
    ScoreSde,
    Ilvr,
}

/// Ancestral DDPM with a post-step correction toward the noised target
/// `sqrt(abar_{t-1}) y + sqrt(1 - abar_{t-1}) eps`.
#[allow(clippy::too_many_arguments)]
pub fn guided_ddpm_sample<R: Rng + ?Sized>(
    kind: GuidanceKind,
    x_init: Option<Vec<f64>>,
    y: &[f64],
    op: &DenseOperator,
    schedule: &NoiseSchedule,
    model: &dyn ScoreModel,
    scale: f64,
    trace_opts: TraceOptions,
    rng: &mut R,
) -> Result<(Vec<f64>, SamplerTrace)> {
    let mut x = match x_init {
        Some(x) => x,
        None => gaussian_vec(model.dim(), rng),
    };
    check_step_dims(&x, y.len(), model, op)?;
    let pinv = (kind == GuidanceKind::Ilvr).then(|| PseudoInverse::new(op.matrix()));
    let mut rec = TraceRecorder::new(trace_opts, y, op, model, schedule, &x);
    let ab = schedule.alpha_bars();
    for t in (1..=schedule.num_steps()).rev() {
        let mut next = ddpm_step(&x, t, model, schedule, rng);
        let (sa, sigma) = (ab[t - 1].sqrt(), (1.0 - ab[t - 1]).sqrt());
        let y_scaled: Vec<f64> = y.iter().map(|v| sa * v).collect();
        let grad = match &pinv {
            None => score_sde_guidance(&next, &y_scaled, op, sigma, rng),
            Some(p) => {
                let y_t: Vec<f64> = y_scaled.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                ilvr_guidance(&next, &y_t, op, p)
            }
        };
        next.iter_mut().zip(&grad).for_each(|(n, g)| *n -= scale * g);
        check_finite("guided iterate", &next)?;
        rec.record(t, &x, &next, None);
        x = next;
    }
    Ok((x, rec.trace))
}

/// Forward map `g: R^d -> R^m` with Jacobian products.
pub trait DifferentiableMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    /// `J(x) v`.
    fn jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
    /// `J(x)^T u`.
    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// Squared column norms of `J(x)`, when cheaply available.
    fn jacobian_column_norms_sq(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// `false` when the products are finite-difference approximations.
    fn is_exact(&self) -> bool {
        true
    }
}

/// `g(x) = A x + offset`.
#[derive(Debug, Clone)]
pub struct AffineMap<O> {
    pub op: O,
    pub offset: Option<Vec<f64>>,
}

impl<O: LinearOperator> AffineMap<O> {
    pub fn linear(op: O) -> Self {
        Self { op, offset: None }
    }
}

impl<O: LinearOperator> DifferentiableMap for AffineMap<O> {
    fn input_dim(&self) -> usize {
        self.op.cols()
    }

    fn output_dim(&self) -> usize {
        self.op.rows()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.op.apply(x);
        if let Some(o) = &self.offset {
            y.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        y
    }

    fn jvp(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        self.op.apply(v)
    }

    fn vjp(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        self.op.adjoint(u)
    }

    fn jacobian_column_norms_sq(&self, _x: &[f64]) -> Option<Vec<f64>> {
        self.op.column_norms_sq()
    }
}

/// Central finite-difference Jacobian products for a plain function.
pub struct FiniteDifferenceMap<F> {
    f: F,
    d: usize,
    m: usize,
    step: f64,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> FiniteDifferenceMap<F> {
    pub const DEFAULT_STEP: f64 = 1e-6;

    pub fn new(f: F, d: usize, m: usize) -> Self {
        Self {
            f,
            d,
            m,
            step: Self::DEFAULT_STEP,
        }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> DifferentiableMap for FiniteDifferenceMap<F> {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn output_dim(&self) -> usize {
        self.m
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    fn jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let h = self.step;
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = ((self.f)(&xp), (self.f)(&xm));
        fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    fn vjp(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut e = vec![0.0; self.d];
        (0..self.d)
            .map(|i| {
                e[i] = 1.0;
                let col = self.jvp(x, &e);
                e[i] = 0.0;
                col.iter().zip(u).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn is_exact(&self) -> bool {
        false
    }
}

/// `J(x)` of a map at a fixed point, as a linear operator.
struct Linearized<'a> {
    g: &'a dyn DifferentiableMap,
    x: &'a [f64],
}

impl LinearOperator for Linearized<'_> {
    fn rows(&self) -> usize {
        self.g.output_dim()
    }

    fn cols(&self) -> usize {
        self.g.input_dim()
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.g.jvp(self.x, v));
    }

    fn adjoint_into(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.g.vjp(self.x, u));
    }

    fn column_norms_sq(&self) -> Option<Vec<f64>> {
        self.g.jacobian_column_norms_sq(self.x)
    }
}

/// C-DPS step with `g` linearized at `x_t`: `A <- J`, and the measurement
/// offset `g(x_t) - J x_t + (1 - abar_{t-1}) J s_hat`.
#[allow(clippy::too_many_arguments)]
pub fn cdps_step_nonlinear_parts<R: Rng + ?Sized>(
    x_t: &[f64],
    chain: &MeasurementChain,
    t: usize,
    model: &dyn ScoreModel,
    g: &dyn DifferentiableMap,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<StepParts> {
    if t == 0 || t > schedule.num_steps() || t > chain.num_steps() {
        return Err(Error::StepOutOfRange {
            t,
            num_steps: schedule.num_steps(),
        });
    }
    let lin = Linearized { g, x: x_t };
    let y_prev = chain.y(t - 1);
    check_step_dims(x_t, y_prev.len(), model, &lin)?;
    let s_hat = model.score(x_t, schedule.alpha_bars()[t]);
    let scale = 1.0 - schedule.alpha_bars()[t - 1];
    let gx = g.eval(x_t);
    let jx = lin.apply(x_t);
    let js = lin.apply(&s_hat);
    let offset: Vec<f64> = gx.iter().zip(&jx).zip(&js).map(|((a, b), s)| (a - b) + scale * s).collect();
    posterior_step(x_t, y_prev, t, &lin, offset, noise, schedule, rng, cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn cdps_step_nonlinear<R: Rng + ?Sized>(
    x_t: &[f64],
    chain: &MeasurementChain,
    t: usize,
    model: &dyn ScoreModel,
    g: &dyn DifferentiableMap,
    noise: &NoiseModel,
    schedule: &NoiseSchedule,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, StepStats)> {
    let parts = cdps_step_nonlinear_parts(x_t, chain, t, model, g, noise, schedule, rng, cfg)?;
    Ok((parts.sample(), parts.stats))
}
