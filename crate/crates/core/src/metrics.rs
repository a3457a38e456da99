//! Sample-quality and fidelity metrics: sliced Wasserstein distance,
//! measurement residuals and score-consistency diagnostics.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::operators::LinearOperator;
use crate::sampler::ScoreModel;
use crate::schedules::NoiseSchedule;

/// `n >= 1` finite vectors of a common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl SampleSet {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("sample set is empty".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("samples have zero dimension".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            check_len("sample dimension", d, r.len())?;
            data.extend_from_slice(r);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample set"));
        }
        Ok(Self { data, n: rows.len(), d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }
}

/// Order of the one-dimensional Wasserstein distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwOrder {
    One,
    #[default]
    Two,
}

/// `n_slices` unit directions in `R^d` from normalized Gaussian draws, row-major.
pub fn slice_directions<R: Rng + ?Sized>(d: usize, n_slices: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(d * n_slices);
    let mut dir = vec![0.0; d];
    for _ in 0..n_slices {
        loop {
            dir.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.extend(dir.iter().map(|v| v / norm));
                break;
            }
        }
    }
    out
}

fn sorted_projection(set: &SampleSet, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = set.rows().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    p.sort_unstable_by(|a, b| a.total_cmp(b));
    p
}

/// Sliced Wasserstein distance over precomputed directions (row-major, `d` per slice).
pub fn sliced_wasserstein_with(a: &SampleSet, b: &SampleSet, directions: &[f64], order: SwOrder) -> Result<f64> {
    check_len("sample dimension", a.dim(), b.dim())?;
    check_len("sample count", a.len(), b.len())?;
    if directions.is_empty() || !directions.len().is_multiple_of(a.dim()) {
        return Err(Error::InvalidArgument("slice directions do not match the sample dimension".into()));
    }
    let per_slice: Vec<f64> = directions
        .par_chunks_exact(a.dim())
        .map(|dir| {
            let pa = sorted_projection(a, dir);
            let pb = sorted_projection(b, dir);
            let n = pa.len() as f64;
            match order {
                SwOrder::Two => pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
                SwOrder::One => pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
            }
        })
        .collect();
    let mean = per_slice.iter().sum::<f64>() / per_slice.len() as f64;
    Ok(match order {
        SwOrder::Two => mean.sqrt(),
        SwOrder::One => mean,
    })
}

/// SW2 over `n_slices` random directions drawn from `rng`.
pub fn sliced_wasserstein<R: Rng + ?Sized>(a: &SampleSet, b: &SampleSet, n_slices: usize, rng: &mut R) -> Result<f64> {
    if n_slices == 0 {
        return Err(Error::InvalidArgument("need at least one slice".into()));
    }
    check_len("sample dimension", a.dim(), b.dim())?;
    let dirs = slice_directions(a.dim(), n_slices, rng);
    sliced_wasserstein_with(a, b, &dirs, SwOrder::Two)
}

/// `||y - A x||^2`.
pub fn measurement_residual(x: &[f64], y: &[f64], op: &dyn LinearOperator) -> Result<f64> {
    check_len("x", op.cols(), x.len())?;
    check_len("y", op.rows(), y.len())?;
    Ok(op.apply(x).iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConsistency {
    /// `None` when either score vector is zero.
    pub cosine: Option<f64>,
    pub mse: f64,
}

/// Cosine similarity and mean squared difference of two score vectors.
pub fn score_consistency_vectors(s_prev: &[f64], s_cur: &[f64]) -> Result<ScoreConsistency> {
    check_len("score", s_prev.len(), s_cur.len())?;
    let dot: f64 = s_prev.iter().zip(s_cur).map(|(a, b)| a * b).sum();
    let na = s_prev.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = s_cur.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0));
    let mse = s_prev.iter().zip(s_cur).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s_prev.len() as f64;
    Ok(ScoreConsistency { cosine, mse })
}

/// Compares `s(x_prev, t - 1)` with `s(x_t, t)`.
pub fn score_consistency(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    x_prev: &[f64],
    t: usize,
) -> Result<ScoreConsistency> {
    if t == 0 || t > schedule.num_steps() {
        return Err(Error::StepOutOfRange {
            t,
            num_steps: schedule.num_steps(),
        });
    }
    let ab = schedule.alpha_bars();
    score_consistency_vectors(&model.score(x_prev, ab[t - 1]), &model.score(x_t, ab[t]))
}
