//! Model-averaged posterior prediction: per-partition conditional Gaussian
//! draws combined by sampling partitions from their posterior weights.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{cholesky_with_jitter, cross_cov_matrix, segment_cov_matrix};
use crate::data::{Location, SpatialDataset};
use crate::error::{Error, Result};
use crate::evidence::PartitionWeights;
use crate::inference::{segment_frames, ModelState, PosteriorDraws, SegmentFrame};
use crate::partition::Partition;
use crate::rng::{stream, RngSeed};
use crate::stats::{quantile_sorted, sample_variance};

/// What to predict and where.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub locations: Vec<Location>,
    pub n_draws: usize,
    /// Include the measurement-error variance (predict the observable
    /// response) or drop it (predict the latent mean-plus-process surface).
    pub include_nugget: bool,
}

/// Joint predictive samples; row t is one draw over all locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveDraws {
    pub draws: Vec<Vec<f64>>,
    pub partition_trace: Vec<usize>,
}

/// Per-location posterior mean / sd / quantile summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// (probability, per-location values), one entry per requested level.
    pub quantiles: Vec<(f64, Vec<f64>)>,
}

/// Conditional mean and covariance of the response at `pred` given the
/// training data, under one posterior state and one partition.
///
/// Cross-covariances between different segments are zero, so conditioning
/// factorizes segment by segment. Prediction points in a segment with no
/// training data get their unconditional moments.
pub fn conditional_moments(
    state: &ModelState,
    partition: &Partition,
    frames: &[SegmentFrame],
    train: &SpatialDataset,
    pred: &[Location],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    conditional_moments_with(state, partition, frames, train, pred, true)
}

pub fn conditional_moments_with(
    state: &ModelState,
    partition: &Partition,
    frames: &[SegmentFrame],
    train: &SpatialDataset,
    pred: &[Location],
    include_nugget: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = pred.len();
    let mut mean = DVector::from_element(m, state.mu);
    let mut cov = DMatrix::zeros(m, m);
    let blocks = segment_blocks(state, partition, frames, train, pred, include_nugget)?;
    for block in blocks {
        for (bi, &gi) in block.pred_idx.iter().enumerate() {
            mean[gi] = block.mean[bi];
            for (bj, &gj) in block.pred_idx.iter().enumerate() {
                cov[(gi, gj)] = block.cov[(bi, bj)];
            }
        }
    }
    Ok((mean, cov))
}

/// One segment's conditional block.
struct SegmentBlock {
    pred_idx: Vec<usize>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn segment_blocks(
    state: &ModelState,
    partition: &Partition,
    frames: &[SegmentFrame],
    train: &SpatialDataset,
    pred: &[Location],
    include_nugget: bool,
) -> Result<Vec<SegmentBlock>> {
    let k = partition.k();
    assert_eq!(state.segments.len(), k, "one parameter block per segment");
    let train_labels = partition.assign_all(&train.locations);
    let pred_labels = partition.assign_all(pred);
    let mut blocks = Vec::new();

    for seg in 1..=k {
        let params = &state.segments[seg - 1];
        let frame = frames[seg - 1];
        let pred_idx: Vec<usize> = pred_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == seg)
            .map(|(i, _)| i)
            .collect();
        if pred_idx.is_empty() {
            continue;
        }
        let pred_framed: Vec<Location> = pred_idx.iter().map(|&i| frame.apply(pred[i])).collect();
        let c_star = segment_cov_matrix(params, &pred_framed, include_nugget);

        let train_idx: Vec<usize> = train_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == seg)
            .map(|(i, _)| i)
            .collect();
        if train_idx.is_empty() {
            // No data in this segment: unconditional moments.
            blocks.push(SegmentBlock {
                mean: DVector::from_element(pred_idx.len(), state.mu),
                cov: c_star,
                pred_idx,
            });
            continue;
        }
        let train_framed: Vec<Location> =
            train_idx.iter().map(|&i| frame.apply(train.locations[i])).collect();
        let resid = DVector::from_iterator(
            train_idx.len(),
            train_idx.iter().map(|&i| train.values[i] - state.mu),
        );
        let a = segment_cov_matrix(params, &train_framed, true);
        let chol = cholesky_with_jitter(&a, params.sigma2)?;
        let b = cross_cov_matrix(params, &pred_framed, &train_framed);
        let mean = DVector::from_element(pred_idx.len(), state.mu) + &b * chol.solve(&resid);
        let cov = &c_star - &b * chol.solve(&b.transpose());
        blocks.push(SegmentBlock {
            pred_idx,
            mean,
            cov,
        });
    }
    Ok(blocks)
}

/// A factored conditional ready for repeated sampling.
struct ConditionalSampler {
    blocks: Vec<(Vec<usize>, DVector<f64>, DMatrix<f64>)>, // (pred idx, mean, chol L)
    mu: f64,
    m: usize,
}

impl ConditionalSampler {
    fn build(
        state: &ModelState,
        partition: &Partition,
        frames: &[SegmentFrame],
        train: &SpatialDataset,
        request: &PredictionRequest,
    ) -> Result<Self> {
        let blocks = segment_blocks(
            state,
            partition,
            frames,
            train,
            &request.locations,
            request.include_nugget,
        )?;
        let mut factored = Vec::with_capacity(blocks.len());
        for block in blocks {
            let scale = block
                .cov
                .diagonal()
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
                .max(1e-300);
            let chol = cholesky_with_jitter(&block.cov, scale)?;
            factored.push((block.pred_idx, block.mean, chol.l()));
        }
        Ok(ConditionalSampler {
            blocks: factored,
            mu: state.mu,
            m: request.locations.len(),
        })
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![self.mu; self.m];
        for (idx, mean, l) in &self.blocks {
            let eps = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = mean + l * eps;
            for (bi, &gi) in idx.iter().enumerate() {
                out[gi] = draw[bi];
            }
        }
        out
    }
}

/// The model-averaged sampler: per output draw, (1) a partition sampled
/// from the posterior weights, (2) one stored posterior state resampled
/// uniformly with replacement, (3) one joint Gaussian draw of the response
/// from its conditional distribution. Deterministic given the seed.
pub fn sample_predictive(
    weights: &PartitionWeights,
    draws_by_partition: &HashMap<usize, PosteriorDraws>,
    partitions: &[Partition],
    frames_by_partition: &HashMap<usize, Vec<SegmentFrame>>,
    train: &SpatialDataset,
    request: &PredictionRequest,
    seed: RngSeed,
) -> Result<PredictiveDraws> {
    assert_eq!(
        weights.probabilities.len(),
        partitions.len(),
        "one weight per partition"
    );
    for (w, p) in weights.probabilities.iter().zip(partitions) {
        if *w > 0.0 && !draws_by_partition.contains_key(&p.id) {
            return Err(Error::MissingDraws { partition_id: p.id });
        }
    }

    // Steps 1 and 2, sequential and cheap: pick (partition, state) per draw.
    let pick_seed = seed.split(stream::PREDICT);
    let mut rng = pick_seed.rng();
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(request.n_draws);
    let heaviest = weights
        .probabilities
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(j, _)| j)
        .unwrap_or(0);
    for _ in 0..request.n_draws {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = heaviest; // rounding fallback stays on positive mass
        for (j, &w) in weights.probabilities.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = j;
                break;
            }
        }
        let pid = partitions[chosen].id;
        let n_states = draws_by_partition[&pid].states.len();
        let state_idx = rng.random_range(0..n_states);
        picks.push((chosen, state_idx));
    }

    // Conditional moments are shared across draws that reuse a state.
    let mut unique: Vec<(usize, usize)> = picks.clone();
    unique.sort_unstable();
    unique.dedup();
    let samplers: HashMap<(usize, usize), ConditionalSampler> = unique
        .par_iter()
        .map(|&(j, state_idx)| {
            let part = &partitions[j];
            let state = &draws_by_partition[&part.id].states[state_idx];
            let frames = &frames_by_partition[&part.id];
            ConditionalSampler::build(state, part, frames, train, request)
                .map(|s| ((j, state_idx), s))
        })
        .collect::<Result<_>>()?;

    // Step 3, one split seed per draw so batching is order-independent.
    let draws: Vec<Vec<f64>> = picks
        .par_iter()
        .enumerate()
        .map(|(t, key)| {
            let mut draw_rng = pick_seed.split(1 + t as u64).rng();
            samplers[key].sample(&mut draw_rng)
        })
        .collect();

    Ok(PredictiveDraws {
        draws,
        partition_trace: picks.iter().map(|&(j, _)| partitions[j].id).collect(),
    })
}

/// Columnwise mean, sample standard deviation, and empirical quantiles.
pub fn summarize(draws: &PredictiveDraws, quantiles: &[f64]) -> PredictionSummary {
    let t = draws.draws.len();
    assert!(t >= 2, "summary needs at least two draws");
    let m = draws.draws[0].len();
    let mut mean = Vec::with_capacity(m);
    let mut sd = Vec::with_capacity(m);
    let mut qvals: Vec<(f64, Vec<f64>)> =
        quantiles.iter().map(|&q| (q, Vec::with_capacity(m))).collect();
    let mut column = vec![0.0; t];
    for j in 0..m {
        for (i, row) in draws.draws.iter().enumerate() {
            column[i] = row[j];
        }
        mean.push(column.iter().sum::<f64>() / t as f64);
        sd.push(sample_variance(&column).sqrt());
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (q, vals) in qvals.iter_mut() {
            vals.push(quantile_sorted(&column, *q));
        }
    }
    PredictionSummary {
        mean,
        sd,
        quantiles: qvals,
    }
}

/// Per-draw arithmetic mean over the prediction locations: a functional of
/// the joint draw, so its spread reflects the predictive covariance.
pub fn spatial_average_draws(draws: &PredictiveDraws) -> Vec<f64> {
    draws
        .draws
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}
