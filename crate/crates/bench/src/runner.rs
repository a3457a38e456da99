//! Per-matrix benchmark runs with derived seeds, chain retries and SW scoring.

use std::time::Instant;

use cdps_core::gmm_prior::{exact_posterior, make_grid_gmm, GaussianMixture};
use cdps_core::metrics::score_consistency;
use cdps_core::metrics::{slice_directions, sliced_wasserstein_with, SampleSet, SwOrder};
use cdps_core::operators::{make_random_svd_operator, DenseOperator, LinearOperator, NoiseModel};
use cdps_core::sampler::{
    cdps_sample_with_chain, ddpm_step, dps_sample, generate_measurement_chain, guided_ddpm_sample, GuidanceKind, MeasurementChain,
    SamplerTrace, TraceOptions,
};
use cdps_core::schedules::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BenchConfig, Method};
use crate::BenchError;

const PROBLEM_TAG: u64 = 0x5052_4f42;
const REFERENCE_TAG: u64 = 0x5245_4645;
const SLICE_TAG: u64 = 0x534c_4943;
const CHAIN_TAG: u64 = 0x4348_4149;
const DIAG_TAG: u64 = 0x4449_4147;
const NULL_TAG: u64 = 0x4e55_4c4c;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of seed components.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6364_7073_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// One random measurement model with its observation and exact posterior.
#[derive(Debug, Clone)]
pub struct Problem {
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub matrix: usize,
    pub prior: GaussianMixture,
    pub op: DenseOperator,
    pub x_true: Vec<f64>,
    pub y: Vec<f64>,
    pub posterior: GaussianMixture,
}

impl Problem {
    fn key(&self, master: u64, tag: u64) -> [u64; 6] {
        [master, tag, self.d as u64, self.m as u64, self.sigma.to_bits(), self.matrix as u64]
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::isotropic(self.sigma * self.sigma)
    }
}

/// Draw `A`, `x*` from the prior and `y = A x* + sigma z`; deterministic per key.
pub fn build_problem(cfg: &BenchConfig, d: usize, m: usize, sigma: f64, matrix: usize) -> Result<Problem, BenchError> {
    let mut rng = rng_for(&[cfg.seed, PROBLEM_TAG, d as u64, m as u64, sigma.to_bits(), matrix as u64]);
    let prior = make_grid_gmm(d)?;
    let op = make_random_svd_operator(d, m, &mut rng)?;
    let x_true = prior.sample(1, &mut rng).remove(0);
    let y: Vec<f64> = op
        .apply(&x_true)
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let posterior = exact_posterior(&prior, &op, &y, sigma)?;
    Ok(Problem {
        d,
        m,
        sigma,
        matrix,
        prior,
        op,
        x_true,
        y,
        posterior,
    })
}

/// `n` exact posterior samples shared by every method.
pub fn reference_samples(cfg: &BenchConfig, p: &Problem, n: usize) -> Vec<Vec<f64>> {
    p.posterior.sample(n, &mut rng_for(&p.key(cfg.seed, REFERENCE_TAG)))
}

pub fn slices(cfg: &BenchConfig, p: &Problem) -> Vec<f64> {
    slice_directions(p.d, cfg.sw_slices, &mut rng_for(&p.key(cfg.seed, SLICE_TAG)))
}

/// One posterior sample from `method`.
pub fn sample_one<R: Rng + ?Sized>(
    cfg: &BenchConfig,
    method: Method,
    p: &Problem,
    schedule: &NoiseSchedule,
    shared_chain: Option<&MeasurementChain>,
    trace: TraceOptions,
    rng: &mut R,
) -> cdps_core::Result<(Vec<f64>, SamplerTrace)> {
    match method {
        Method::Cdps => {
            let solver = cfg.solver();
            let own;
            let chain = match shared_chain {
                Some(c) => c,
                None => {
                    own = generate_measurement_chain(&p.y, schedule, rng)?;
                    &own
                }
            };
            cdps_sample_with_chain(chain, None, &p.op, &p.noise(), schedule, &p.prior, &solver, trace, rng)
        }
        Method::Dps => dps_sample(None, &p.y, &p.op, schedule, &p.prior, cfg.dps_zeta, trace, rng),
        Method::ScoreSde => guided_ddpm_sample(
            GuidanceKind::ScoreSde,
            None,
            &p.y,
            &p.op,
            schedule,
            &p.prior,
            cfg.guidance_scale,
            trace,
            rng,
        ),
        Method::Ilvr => guided_ddpm_sample(
            GuidanceKind::Ilvr,
            None,
            &p.y,
            &p.op,
            schedule,
            &p.prior,
            cfg.guidance_scale,
            trace,
            rng,
        ),
    }
}

fn retryable(e: &cdps_core::Error) -> bool {
    matches!(e, cdps_core::Error::CgNotConverged { .. } | cdps_core::Error::NonFinite(_))
}

type ChainOutcome = cdps_core::Result<Option<(Vec<f64>, SamplerTrace)>>;

/// Samples of one method on one problem.
#[derive(Debug, Clone, Default)]
pub struct MethodRun {
    /// Successful chains in chain order.
    pub samples: Vec<Vec<f64>>,
    pub failures: usize,
    /// `(chain_id, trace)` for the first `trace_chains` chains.
    pub traces: Vec<(usize, SamplerTrace)>,
}

/// Run `n_chains` independent chains; each retries with a fresh seed up to
/// `cfg.max_retries` times before counting as a failure.
pub fn run_method(
    cfg: &BenchConfig,
    method: Method,
    p: &Problem,
    schedule: &NoiseSchedule,
    n_chains: usize,
    trace_chains: usize,
) -> Result<MethodRun, BenchError> {
    let shared = if cfg.shared_y_chain && method == Method::Cdps {
        let mut rng = rng_for(&[
            cfg.seed,
            CHAIN_TAG,
            method.tag(),
            p.d as u64,
            p.m as u64,
            p.sigma.to_bits(),
            p.matrix as u64,
            u64::MAX,
        ]);
        Some(generate_measurement_chain(&p.y, schedule, &mut rng)?)
    } else {
        None
    };
    let outcomes: Vec<ChainOutcome> = (0..n_chains)
        .into_par_iter()
        .map(|chain| {
            let trace = if chain < trace_chains {
                TraceOptions {
                    residual: true,
                    cg: true,
                    score_consistency: false,
                }
            } else {
                TraceOptions::default()
            };
            for attempt in 0..=cfg.max_retries {
                let mut rng = rng_for(&[
                    cfg.seed,
                    CHAIN_TAG,
                    method.tag(),
                    p.d as u64,
                    p.m as u64,
                    p.sigma.to_bits(),
                    p.matrix as u64,
                    chain as u64,
                    attempt as u64,
                ]);
                match sample_one(cfg, method, p, schedule, shared.as_ref(), trace, &mut rng) {
                    Ok(out) => return Ok(Some(out)),
                    Err(e) if retryable(&e) => continue,
                    Err(e) => return Err(e),
                }
            }
            Ok(None)
        })
        .collect();
    let mut run = MethodRun::default();
    for (chain, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            Some((x, trace)) => {
                if chain < trace_chains {
                    run.traces.push((chain, trace));
                }
                run.samples.push(x);
            }
            None => run.failures += 1,
        }
    }
    Ok(run)
}

/// One `results.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub matrix: usize,
    /// `NaN` when more than 10% of chains failed.
    pub sw: f64,
    pub failures: usize,
    pub seconds: f64,
}

/// First two coordinates of posterior and method samples for one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatter {
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    /// `(source, x0, x1)`.
    pub points: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TraceSet {
    pub method: Method,
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub traces: Vec<(usize, SamplerTrace)>,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub rows: Vec<ResultRow>,
    pub scatter: Option<Scatter>,
    pub traces: Vec<TraceSet>,
}

/// Whether `failures` out of `n` chains exceeds the 10% abort threshold.
pub fn too_many_failures(failures: usize, n: usize) -> bool {
    10 * failures > n
}

/// Run every configured method on matrix `matrix` of grid point `(d, m, sigma)`.
pub fn run_config(cfg: &BenchConfig, d: usize, m: usize, sigma: f64, matrix: usize, trace: bool) -> Result<MatrixOutcome, BenchError> {
    let schedule = cfg.schedule()?;
    let p = build_problem(cfg, d, m, sigma, matrix)?;
    let n = cfg.samples_per_run;
    let reference = reference_samples(cfg, &p, n);
    let dirs = slices(cfg, &p);
    let trace_chains = if trace && matrix == 0 { cfg.trace_chains.min(n) } else { 0 };
    let want_scatter = cfg.scatter && matrix == 0;
    let mut scatter_points: Vec<(String, f64, f64)> = if want_scatter {
        reference.iter().map(|x| ("posterior".to_string(), x[0], x[1])).collect()
    } else {
        Vec::new()
    };

    let mut rows = Vec::with_capacity(cfg.methods.len());
    let mut traces = Vec::new();
    for &method in &cfg.methods {
        let start = Instant::now();
        let run = run_method(cfg, method, &p, &schedule, n, trace_chains)?;
        let sw = if too_many_failures(run.failures, n) || run.samples.is_empty() {
            f64::NAN
        } else {
            let a = SampleSet::new(&run.samples)?;
            let b = SampleSet::new(&reference[..run.samples.len()])?;
            sliced_wasserstein_with(&a, &b, &dirs, SwOrder::Two)?
        };
        let seconds = if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
        if want_scatter {
            scatter_points.extend(run.samples.iter().map(|x| (method.name().to_string(), x[0], x[1])));
        }
        if trace_chains > 0 {
            traces.push(TraceSet {
                method,
                d,
                m,
                sigma,
                traces: run.traces,
            });
        }
        rows.push(ResultRow {
            method,
            d,
            m,
            sigma,
            matrix,
            sw,
            failures: run.failures,
            seconds,
        });
    }
    Ok(MatrixOutcome {
        rows,
        scatter: want_scatter.then_some(Scatter {
            d,
            m,
            sigma,
            points: scatter_points,
        }),
        traces,
    })
}

#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    pub rows: Vec<ResultRow>,
    pub scatters: Vec<Scatter>,
    pub traces: Vec<TraceSet>,
}

/// Run the whole grid. `progress` receives one line per finished matrix.
pub fn run_all(cfg: &BenchConfig, trace: bool, mut progress: impl FnMut(&str)) -> Result<BenchResult, BenchError> {
    cfg.validate()?;
    let mut result = BenchResult::default();
    for (d, m, sigma) in cfg.grid() {
        for matrix in 0..cfg.matrices_per_config {
            let out = run_config(cfg, d, m, sigma, matrix, trace)?;
            let summary: Vec<String> = out.rows.iter().map(|r| format!("{}={:.4}", r.method, r.sw)).collect();
            progress(&format!("d={d} m={m} sigma={sigma} matrix={matrix} {}", summary.join(" ")));
            result.rows.extend(out.rows);
            result.scatters.extend(out.scatter);
            result.traces.extend(out.traces);
        }
    }
    // deterministic emission order: method, then grid position, then matrix
    let order = |m: Method| cfg.methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    result.rows.sort_by_key(|r| order(r.method));
    Ok(result)
}

/// Exact-posterior sanity numbers for one problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub matrix: usize,
    /// SW between two independent exact-posterior sample sets.
    pub sw_null: f64,
    /// SW between prior samples and exact-posterior samples.
    pub sw_prior: f64,
    pub max_weight: f64,
}

pub fn oracle_row(cfg: &BenchConfig, d: usize, m: usize, sigma: f64, matrix: usize) -> Result<OracleRow, BenchError> {
    let p = build_problem(cfg, d, m, sigma, matrix)?;
    let n = cfg.samples_per_run;
    let reference = SampleSet::new(&reference_samples(cfg, &p, n))?;
    let mut rng = rng_for(&p.key(cfg.seed, NULL_TAG));
    let other = SampleSet::new(&p.posterior.sample(n, &mut rng))?;
    let prior = SampleSet::new(&p.prior.sample(n, &mut rng))?;
    let dirs = slices(cfg, &p);
    Ok(OracleRow {
        d,
        m,
        sigma,
        matrix,
        sw_null: sliced_wasserstein_with(&reference, &other, &dirs, SwOrder::Two)?,
        sw_prior: sliced_wasserstein_with(&reference, &prior, &dirs, SwOrder::Two)?,
        max_weight: p.posterior.weights().iter().cloned().fold(0.0, f64::max),
    })
}

/// Score-consistency record along an unconditional reverse trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub d: usize,
    pub chain_id: usize,
    pub t: usize,
    pub cosine: Option<f64>,
    pub mse: f64,
}

/// Compare `s(x_{t-1}, t-1)` with `s(x_t, t)` along `n_chains` ancestral DDPM
/// trajectories of the grid mixture.
pub fn score_diagnostics(cfg: &BenchConfig, d: usize, n_chains: usize) -> Result<Vec<DiagnosticRow>, BenchError> {
    let schedule = cfg.schedule()?;
    let prior = make_grid_gmm(d)?;
    let per_chain: Vec<Result<Vec<DiagnosticRow>, BenchError>> = (0..n_chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = rng_for(&[cfg.seed, DIAG_TAG, d as u64, chain as u64]);
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut rows = Vec::with_capacity(schedule.num_steps());
            for t in (1..=schedule.num_steps()).rev() {
                let next = ddpm_step(&x, t, &prior, &schedule, &mut rng);
                let sc = score_consistency(&prior, &schedule, &x, &next, t)?;
                rows.push(DiagnosticRow {
                    d,
                    chain_id: chain,
                    t,
                    cosine: sc.cosine,
                    mse: sc.mse,
                });
                x = next;
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for rows in per_chain {
        out.extend(rows?);
    }
    Ok(out)
}

/// Mean of `||y - A x_t||^2` over traced chains, indexed by `t` (`0..=T`).
pub fn mean_residual_by_step(traces: &[(usize, SamplerTrace)], num_steps: usize) -> Vec<f64> {
    let mut sums = vec![0.0; num_steps + 1];
    let mut counts = vec![0usize; num_steps + 1];
    for (_, tr) in traces {
        if let Some(r) = tr.initial_residual_sq {
            sums[num_steps] += r;
            counts[num_steps] += 1;
        }
        for rec in &tr.steps {
            if let Some(r) = rec.residual_sq {
                sums[rec.t] += r;
                counts[rec.t] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            dims: vec![4],
            measurements: vec![2],
            sigmas: vec![0.1],
            matrices_per_config: 2,
            samples_per_run: 20,
            sw_slices: 50,
            num_steps: 30,
            beta_max: 15.0,
            methods: Method::ALL.to_vec(),
            record_timing: false,
            ..Default::default()
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(&[0, CHAIN_TAG, 1, 8, 4, 0, 0]);
        assert_eq!(a, derive_seed(&[0, CHAIN_TAG, 1, 8, 4, 0, 0]));
        let mut seen = std::collections::HashSet::new();
        for method in 1..5u64 {
            for chain in 0..200u64 {
                for attempt in 0..4u64 {
                    assert!(seen.insert(derive_seed(&[7, CHAIN_TAG, method, 8, 4, 0, chain, attempt])));
                }
            }
        }
        // permuted components give different streams
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }

    #[test]
    fn problems_are_deterministic() {
        let cfg = tiny();
        let a = build_problem(&cfg, 4, 2, 0.1, 0).unwrap();
        let b = build_problem(&cfg, 4, 2, 0.1, 0).unwrap();
        assert_eq!(a.op, b.op);
        assert_eq!(a.y, b.y);
        let c = build_problem(&cfg, 4, 2, 0.1, 1).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn run_config_covers_methods() {
        let cfg = tiny();
        let out = run_config(&cfg, 4, 2, 0.1, 0, true).unwrap();
        assert_eq!(out.rows.len(), 4);
        for r in &out.rows {
            assert!(r.sw.is_finite() && r.sw >= 0.0);
            assert_eq!(r.failures, 0);
            assert_eq!(r.seconds, 0.0);
        }
        assert_eq!(out.traces.len(), 4);
        assert!(out.traces.iter().all(|t| t.traces.len() == 10));
        let again = run_config(&cfg, 4, 2, 0.1, 0, false).unwrap();
        assert_eq!(out.rows, again.rows);
        assert!(again.traces.is_empty());
    }

    #[test]
    fn failure_threshold() {
        assert!(!too_many_failures(100, 1000));
        assert!(too_many_failures(101, 1000));
        assert!(!too_many_failures(0, 1));
        assert!(too_many_failures(1, 1));
    }

    #[test]
    fn residual_means() {
        let tr = SamplerTrace {
            initial_residual_sq: Some(4.0),
            steps: vec![
                cdps_core::sampler::StepRecord {
                    t: 1,
                    residual_sq: Some(2.0),
                    ..Default::default()
                },
                cdps_core::sampler::StepRecord {
                    t: 0,
                    residual_sq: Some(1.0),
                    ..Default::default()
                },
            ],
        };
        let other = SamplerTrace {
            initial_residual_sq: Some(6.0),
            steps: vec![
                cdps_core::sampler::StepRecord {
                    t: 1,
                    residual_sq: Some(4.0),
                    ..Default::default()
                },
                cdps_core::sampler::StepRecord {
                    t: 0,
                    residual_sq: Some(3.0),
                    ..Default::default()
                },
            ],
        };
        assert_eq!(mean_residual_by_step(&[(0, tr), (1, other)], 2), vec![2.0, 3.0, 5.0]);
    }
}
