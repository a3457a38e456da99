//! Coupled data- and measurement-space diffusion posterior sampling.
//!
//! The sampler runs a forward-noised measurement chain alongside the reverse
//! data-space diffusion and draws each `x_{t-1}` from a closed-form Gaussian
//! conditioned on `x_t` and `y_{t-1}`, using matrix-free CG solves.

pub mod error;
pub mod gmm_prior;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod sampler;
pub mod schedules;

pub use error::{Error, Result};
pub use gmm_prior::{exact_posterior, make_grid_gmm, sample_mixture, GaussianMixture};
pub use linalg::{cg_solve, diag_preconditioner, pw_cg_draw, CgReport, PrecisionOperator};
pub use metrics::{measurement_residual, sliced_wasserstein, SampleSet, SwOrder};
pub use operators::{
    blur_operator, make_random_svd_operator, make_whitener, mask_operator, mix_conditional_cov, ConditionalCov, DenseOperator,
    LinearOperator, NoiseModel, Whitener,
};
pub use sampler::{
    cdps_sample, cdps_step, cdps_step_nonlinear, dps_sample, generate_measurement_chain, MeanRhs, MeasurementChain, SamplerTrace,
    ScoreModel, SolverConfig, TraceOptions,
};
pub use schedules::{make_linear_schedule, NoiseSchedule};
