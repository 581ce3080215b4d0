//! Segment-wise Gaussian likelihood, priors, and the adaptive random-walk
//! Metropolis sampler.
//!
//! Conditional on a partition, the likelihood is a product of per-segment
//! multivariate Gaussians with anisotropic Matérn covariance; distances are
//! computed after rescaling each segment's training bounding box onto the
//! unit square. One chain updates the global mean with a scalar
//! Metropolis-Hastings step and each segment's five covariance parameters
//! as an adapted block.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, SQRT_2};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{cholesky_with_jitter, segment_cov_matrix, support, SegmentParams};
use crate::data::{Location, SpatialDataset};
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::rng::RngSeed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MU_PRIOR_SD: f64 = 100.0;

/// One point of the posterior: global mean plus one parameter block per
/// segment of the conditioning partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub mu: f64,
    pub segments: Vec<SegmentParams>,
}

/// Affine map taking a segment's training bounding box onto the unit
/// square. Prediction locations outside the box map outside [0,1]^2,
/// which is fine: the map is affine everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFrame {
    pub shift: [f64; 2],
    pub scale: [f64; 2],
    /// Zero-extent axis or single training point.
    pub degenerate: bool,
    /// No training data at all: prediction falls back to the prior moments.
    pub prior_only: bool,
}

impl SegmentFrame {
    pub fn identity() -> Self {
        SegmentFrame {
            shift: [0.0, 0.0],
            scale: [1.0, 1.0],
            degenerate: false,
            prior_only: false,
        }
    }

    pub fn apply(&self, s: Location) -> Location {
        Location::new(
            (s.lon - self.shift[0]) * self.scale[0],
            (s.lat - self.shift[1]) * self.scale[1],
        )
    }
}

/// Per-segment affine maps from the training bounding boxes onto [0,1]^2.
pub fn segment_frames(partition: &Partition, train: &SpatialDataset) -> Vec<SegmentFrame> {
    let k = partition.k();
    let labels = partition.assign_all(&train.locations);
    (1..=k)
        .map(|seg| {
            let pts: Vec<Location> = train
                .locations
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == seg)
                .map(|(s, _)| *s)
                .collect();
            if pts.is_empty() {
                return SegmentFrame {
                    shift: [0.0, 0.0],
                    scale: [1.0, 1.0],
                    degenerate: true,
                    prior_only: true,
                };
            }
            let (lo, hi) = crate::data::bounding_box(&pts);
            let ext = [hi.lon - lo.lon, hi.lat - lo.lat];
            let mut degenerate = pts.len() == 1;
            let scale = [
                if ext[0] > 0.0 {
                    1.0 / ext[0]
                } else {
                    degenerate = true;
                    1.0
                },
                if ext[1] > 0.0 {
                    1.0 / ext[1]
                } else {
                    degenerate = true;
                    1.0
                },
            ];
            SegmentFrame {
                shift: [lo.lon, lo.lat],
                scale,
                degenerate,
                prior_only: false,
            }
        })
        .collect()
}

/// Sampler settings. Defaults: 20k iterations, 10k burn-in, no thinning,
/// adaptation every 50 iterations during burn-in only, block target 0.234,
/// scalar target 0.44.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt_window: usize,
    pub target_accept_block: f64,
    pub target_accept_scalar: f64,
    pub seed: RngSeed,
}

impl ChainConfig {
    pub fn new(seed: RngSeed) -> Self {
        ChainConfig {
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 1,
            adapt_window: 50,
            target_accept_block: 0.234,
            target_accept_scalar: 0.44,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::InvalidChainConfig(format!(
                "burn_in {} must be below n_iter {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidChainConfig("thin must be >= 1".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::InvalidChainConfig("adapt_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which coordinates the sampler updates; fixing a subset leaves the rest
/// of the kernel untouched (the proposal is symmetric either way).
#[derive(Debug, Clone, Copy)]
pub struct UpdateMask {
    pub mu: bool,
    /// tau2, sigma2, phi1, phi2, eta.
    pub dims: [bool; 5],
}

impl Default for UpdateMask {
    fn default() -> Self {
        UpdateMask {
            mu: true,
            dims: [true; 5],
        }
    }
}

/// Acceptance rates and sampler health flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub mu_acceptance: f64,
    pub block_acceptance: Vec<f64>,
    /// Adaptation windows in which a block accepted nothing.
    pub stalled_windows: usize,
    /// Segments with fewer than 5 observations (fit anyway, priors are proper).
    pub small_segments: Vec<usize>,
    /// Proposal log-scales at the end of burn-in and at the end of the run;
    /// equal by construction since adaptation freezes at burn-in.
    pub scales_at_burn_in: Vec<f64>,
    pub final_scales: Vec<f64>,
    pub seconds: f64,
}

/// Post-burn-in draws with aligned exact log-likelihood values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub states: Vec<ModelState>,
    pub loglik: Vec<f64>,
    pub partition_id: usize,
    pub diagnostics: ChainDiagnostics,
}

/// Training data of one segment, already mapped into its frame.
#[derive(Debug, Clone)]
pub(crate) struct SegmentTraining {
    pub framed: Vec<Location>,
    pub values: Vec<f64>,
}

pub(crate) fn split_training(
    data: &SpatialDataset,
    partition: &Partition,
    frames: &[SegmentFrame],
) -> Vec<SegmentTraining> {
    let labels = partition.assign_all(&data.locations);
    (1..=partition.k())
        .map(|seg| {
            let frame = frames[seg - 1];
            let mut framed = Vec::new();
            let mut values = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if l == seg {
                    framed.push(frame.apply(data.locations[i]));
                    values.push(data.values[i]);
                }
            }
            SegmentTraining { framed, values }
        })
        .collect()
}

/// Sufficient pieces of one segment's Gaussian log-likelihood, cached so a
/// mean update costs O(1) per segment:
/// ll(mu) = -n/2 ln 2pi - sum ln L_ii - (vv - 2 mu uv + mu^2 uu) / 2
/// with vv = z' A^{-1} z, uv = 1' A^{-1} z, uu = 1' A^{-1} 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SegmentLikTerms {
    pub n: usize,
    pub logdet_sum: f64,
    pub vv: f64,
    pub uv: f64,
    pub uu: f64,
}

impl SegmentLikTerms {
    const EMPTY: SegmentLikTerms = SegmentLikTerms {
        n: 0,
        logdet_sum: 0.0,
        vv: 0.0,
        uv: 0.0,
        uu: 0.0,
    };

    #[inline]
    pub fn loglik(&self, mu: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        -0.5 * self.n as f64 * LN_2PI
            - self.logdet_sum
            - 0.5 * (self.vv - 2.0 * mu * self.uv + mu * mu * self.uu)
    }
}

/// The canonical per-segment evaluation. Every likelihood value in the
/// crate flows through this function, so cached and recomputed values are
/// bitwise identical. Returns None when the jittered Cholesky fails (the
/// state is then rejected).
pub(crate) fn segment_terms(
    params: &SegmentParams,
    seg: &SegmentTraining,
) -> Option<SegmentLikTerms> {
    let n = seg.framed.len();
    if n == 0 {
        return Some(SegmentLikTerms::EMPTY);
    }
    let cov = segment_cov_matrix(params, &seg.framed, true);
    let chol = cholesky_with_jitter(&cov, params.sigma2).ok()?;
    let logdet_sum: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let z = DVector::from_column_slice(&seg.values);
    let ones = DVector::from_element(n, 1.0);
    let w = chol.solve(&z);
    let s = chol.solve(&ones);
    Some(SegmentLikTerms {
        n,
        logdet_sum,
        vv: z.dot(&w),
        uv: ones.dot(&w),
        uu: ones.dot(&s),
    })
}

pub(crate) fn loglik_from_terms(terms: &[SegmentLikTerms], mu: f64) -> f64 {
    terms.iter().map(|t| t.loglik(mu)).sum()
}

/// Product-of-segments Gaussian log-likelihood of the state, with distances
/// in each segment's rescaled frame. Returns -inf when the covariance
/// cannot be factored even after jitter escalation.
pub fn log_likelihood(
    data: &SpatialDataset,
    partition: &Partition,
    state: &ModelState,
    frames: &[SegmentFrame],
) -> f64 {
    let segs = split_training(data, partition, frames);
    let mut terms = Vec::with_capacity(segs.len());
    for (params, seg) in state.segments.iter().zip(&segs) {
        match segment_terms(params, seg) {
            Some(t) => terms.push(t),
            None => return f64::NEG_INFINITY,
        }
    }
    loglik_from_terms(&terms, state.mu)
}

/// log N(mu; 0, 100^2) plus the flat in-support mass of the uniform
/// priors; -inf outside support.
pub fn log_prior(state: &ModelState) -> f64 {
    for p in &state.segments {
        if !p.in_support() {
            return f64::NEG_INFINITY;
        }
    }
    let mu_term = -0.5 * (2.0 * PI * MU_PRIOR_SD * MU_PRIOR_SD).ln()
        - state.mu * state.mu / (2.0 * MU_PRIOR_SD * MU_PRIOR_SD);
    let per_segment: f64 = -(support::TAU2_MAX.ln()
        + support::SIGMA2_MAX.ln()
        + support::PHI_MAX.ln()
        + support::PHI_MAX.ln()
        + support::ETA_MAX.ln());
    mu_term + per_segment * state.segments.len() as f64
}

/// Default initial state: mean at the sample mean, nugget and marginal
/// variance at half the sample variance, phi = 0.25, eta = pi/4.
pub fn default_initial_state(data: &SpatialDataset, k: usize) -> ModelState {
    let n = data.len() as f64;
    let mean = data.values.iter().sum::<f64>() / n;
    let var = if data.len() > 1 {
        data.values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        1.0
    };
    let half = (var / 2.0).clamp(1e-6, support::SIGMA2_MAX * 0.99);
    ModelState {
        mu: mean,
        segments: vec![SegmentParams::new(half, half, 0.25, 0.25, FRAC_PI_4); k],
    }
}

// Unit-box mapping for the block proposal: each parameter divided by its
// prior width, so a single adapted step size serves all five coordinates.
const DIM_WIDTHS: [f64; 5] = [100.0, 100.0, SQRT_2, SQRT_2, FRAC_PI_2];

fn params_to_unit(p: &SegmentParams) -> [f64; 5] {
    [
        p.tau2 / DIM_WIDTHS[0],
        p.sigma2 / DIM_WIDTHS[1],
        p.phi1 / DIM_WIDTHS[2],
        p.phi2 / DIM_WIDTHS[3],
        p.eta / DIM_WIDTHS[4],
    ]
}

fn unit_to_params(u: &[f64; 5], nu: f64) -> SegmentParams {
    SegmentParams {
        tau2: u[0] * DIM_WIDTHS[0],
        sigma2: u[1] * DIM_WIDTHS[1],
        phi1: u[2] * DIM_WIDTHS[2],
        phi2: u[3] * DIM_WIDTHS[3],
        eta: u[4] * DIM_WIDTHS[4],
        nu,
    }
}

/// Reflect into [0, 1] by folding the triangle wave; the folded random
/// walk is a symmetric proposal so the plain MH ratio applies.
fn reflect_unit(x: f64) -> f64 {
    let mut t = x.rem_euclid(2.0);
    if t > 1.0 {
        t = 2.0 - t;
    }
    t
}

/// Run the sampler for one partition with the default mask (all updates on).
pub fn run_chain(
    data: &SpatialDataset,
    partition: &Partition,
    config: &ChainConfig,
) -> Result<PosteriorDraws> {
    run_chain_masked(data, partition, config, None, UpdateMask::default())
}

/// Run the sampler with an explicit initial state and update mask. Fixed
/// coordinates keep their initial values throughout.
pub fn run_chain_masked(
    data: &SpatialDataset,
    partition: &Partition,
    config: &ChainConfig,
    init: Option<ModelState>,
    mask: UpdateMask,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let start = Instant::now();
    let k = partition.k();
    let frames = segment_frames(partition, data);
    let segs = split_training(data, partition, &frames);
    let small_segments: Vec<usize> = segs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.framed.len() < 5)
        .map(|(i, _)| i + 1)
        .collect();

    let mut rng = config.seed.rng();

    // Initialization with re-tries: widen the variances until the
    // likelihood is finite.
    let base = init.unwrap_or_else(|| default_initial_state(data, k));
    let mut state = base.clone();
    let mut terms: Option<Vec<SegmentLikTerms>> = None;
    const MAX_INIT_ATTEMPTS: usize = 10;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        let candidate: Option<Vec<SegmentLikTerms>> = state
            .segments
            .iter()
            .zip(&segs)
            .map(|(p, s)| segment_terms(p, s))
            .collect();
        if let Some(t) = candidate {
            if loglik_from_terms(&t, state.mu).is_finite() {
                terms = Some(t);
                break;
            }
        }
        // Push variances up; a larger nugget always helps conditioning.
        for p in &mut state.segments {
            p.tau2 = (p.tau2 * 2.0 + 1e-4).min(support::TAU2_MAX * 0.99);
            p.sigma2 = (p.sigma2 * 2.0).min(support::SIGMA2_MAX * 0.99);
        }
        if attempt == MAX_INIT_ATTEMPTS - 1 {
            return Err(Error::BadInitialState {
                attempts: MAX_INIT_ATTEMPTS,
            });
        }
    }
    let mut terms = terms.expect("initialization loop either sets terms or errors");

    // Proposal scales (log scale, Robbins-Monro adapted during burn-in).
    let sd_z = {
        let n = data.len() as f64;
        let m = data.values.iter().sum::<f64>() / n;
        (data.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n.max(2.0) + 1e-12).sqrt()
    };
    let mut mu_log_scale: f64 = (0.5 * sd_z).max(0.05).ln();
    let mut block_log_scale = vec![(0.1f64).ln(); k];

    let mut mu_accepts_window = 0usize;
    let mut block_accepts_window = vec![0usize; k];
    let mut window_index = 0usize;
    let mut stalled_windows = 0usize;
    let mut scales_at_burn_in = Vec::new();

    let mut mu_accepts_post = 0usize;
    let mut block_accepts_post = vec![0usize; k];
    let mut post_iters = 0usize;

    let keep = (config.n_iter - config.burn_in).div_ceil(config.thin);
    let mut states = Vec::with_capacity(keep);
    let mut loglik = Vec::with_capacity(keep);

    for iter in 0..config.n_iter {
        let adapting = iter < config.burn_in;

        // Scalar MH step for the mean.
        if mask.mu {
            let step: f64 = rng.sample(StandardNormal);
            let mu_new = state.mu + mu_log_scale.exp() * step;
            let ll_old = loglik_from_terms(&terms, state.mu);
            let ll_new = loglik_from_terms(&terms, mu_new);
            let prior_delta = (state.mu * state.mu - mu_new * mu_new)
                / (2.0 * MU_PRIOR_SD * MU_PRIOR_SD);
            let log_alpha = ll_new - ll_old + prior_delta;
            if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
                state.mu = mu_new;
                mu_accepts_window += 1;
                if !adapting {
                    mu_accepts_post += 1;
                }
            }
        }

        // Block update per segment: spherical walk in the prior-rescaled
        // unit box with reflection at the boundaries.
        for seg_idx in 0..k {
            let scale = block_log_scale[seg_idx].exp();
            let current = params_to_unit(&state.segments[seg_idx]);
            let mut proposal = current;
            for (d, slot) in proposal.iter_mut().enumerate() {
                if mask.dims[d] {
                    let step: f64 = rng.sample(StandardNormal);
                    *slot = reflect_unit(*slot + scale * step);
                }
            }
            let cand_params = unit_to_params(&proposal, state.segments[seg_idx].nu);
            if !cand_params.in_support() {
                continue;
            }
            let cand_terms = match segment_terms(&cand_params, &segs[seg_idx]) {
                Some(t) => t,
                None => continue, // covariance failure rejects the proposal
            };
            let ll_old = terms[seg_idx].loglik(state.mu);
            let ll_new = cand_terms.loglik(state.mu);
            let log_alpha = ll_new - ll_old;
            if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
                state.segments[seg_idx] = cand_params;
                terms[seg_idx] = cand_terms;
                block_accepts_window[seg_idx] += 1;
                if !adapting {
                    block_accepts_post[seg_idx] += 1;
                }
            }
        }

        // Robbins-Monro step-size adaptation, burn-in only.
        if adapting && (iter + 1) % config.adapt_window == 0 {
            window_index += 1;
            let gain = 1.0 / (window_index as f64).sqrt();
            let w = config.adapt_window as f64;
            if mask.mu {
                let rate = mu_accepts_window as f64 / w;
                mu_log_scale =
                    (mu_log_scale + gain * (rate - config.target_accept_scalar)).clamp(-12.0, 4.0);
            }
            let mut stalled = false;
            for seg_idx in 0..k {
                let rate = block_accepts_window[seg_idx] as f64 / w;
                if block_accepts_window[seg_idx] == 0 && mask.dims.iter().any(|&d| d) {
                    stalled = true;
                }
                block_log_scale[seg_idx] = (block_log_scale[seg_idx]
                    + gain * (rate - config.target_accept_block))
                    .clamp(-12.0, 4.0);
            }
            if stalled {
                stalled_windows += 1;
            }
            mu_accepts_window = 0;
            block_accepts_window.iter_mut().for_each(|c| *c = 0);
        }

        if iter + 1 == config.burn_in {
            scales_at_burn_in = std::iter::once(mu_log_scale)
                .chain(block_log_scale.iter().cloned())
                .collect();
        }

        if iter >= config.burn_in {
            post_iters += 1;
            if (iter - config.burn_in) % config.thin == 0 {
                states.push(state.clone());
                loglik.push(loglik_from_terms(&terms, state.mu));
            }
        }
    }

    let final_scales: Vec<f64> = std::iter::once(mu_log_scale)
        .chain(block_log_scale.iter().cloned())
        .collect();
    let diagnostics = ChainDiagnostics {
        mu_acceptance: mu_accepts_post as f64 / post_iters.max(1) as f64,
        block_acceptance: block_accepts_post
            .iter()
            .map(|&a| a as f64 / post_iters.max(1) as f64)
            .collect(),
        stalled_windows,
        small_segments,
        scales_at_burn_in,
        final_scales,
        seconds: start.elapsed().as_secs_f64(),
    };

    Ok(PosteriorDraws {
        states,
        loglik,
        partition_id: partition.id,
        diagnostics,
    })
}
