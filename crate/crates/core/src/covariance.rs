//! Anisotropic Matérn segment covariances and the partition-induced
//! nonstationary covariance with indicator weights.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::bessel::bessel_k;
use crate::data::Location;
use crate::error::{Error, Result};
use crate::partition::Partition;

/// Prior support bounds for the segment covariance parameters.
pub mod support {
    use std::f64::consts::{FRAC_PI_2, SQRT_2};
    pub const TAU2_MAX: f64 = 100.0;
    pub const SIGMA2_MAX: f64 = 100.0;
    pub const PHI_MAX: f64 = SQRT_2;
    pub const ETA_MAX: f64 = FRAC_PI_2;
}

/// Per-segment covariance parameter block: nugget, marginal variance,
/// anisotropy eigenvalues (squared ranges), rotation, and smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub tau2: f64,
    pub sigma2: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub eta: f64,
    pub nu: f64,
}

impl SegmentParams {
    pub fn new(tau2: f64, sigma2: f64, phi1: f64, phi2: f64, eta: f64) -> Self {
        SegmentParams {
            tau2,
            sigma2,
            phi1,
            phi2,
            eta,
            nu: 0.5,
        }
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    /// Inside the prior support (variances and ranges in their uniform
    /// boxes, rotation in [0, pi/2])?
    pub fn in_support(&self) -> bool {
        self.tau2 > 0.0
            && self.tau2 < support::TAU2_MAX
            && self.sigma2 > 0.0
            && self.sigma2 < support::SIGMA2_MAX
            && self.phi1 > 0.0
            && self.phi1 < support::PHI_MAX
            && self.phi2 > 0.0
            && self.phi2 < support::PHI_MAX
            && self.eta >= 0.0
            && self.eta <= support::ETA_MAX
            && self.nu > 0.0
    }
}

/// 2x2 SPD anisotropy matrix with eigenvalues {phi1, phi2}.
#[derive(Debug, Clone, PartialEq)]
pub struct AnisotropyMatrix(pub Matrix2<f64>);

/// Sigma = R(eta) diag(phi1, phi2) R(eta)^T.
pub fn anisotropy_matrix(phi1: f64, phi2: f64, eta: f64) -> Result<AnisotropyMatrix> {
    if phi1 <= 0.0 || phi2 <= 0.0 {
        return Err(Error::NonPositiveEigenvalue { phi1, phi2 });
    }
    let (s, c) = eta.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    let d = Matrix2::new(phi1, 0.0, 0.0, phi2);
    Ok(AnisotropyMatrix(r * d * r.transpose()))
}

/// Squared Mahalanobis distance h^T Sigma^{-1} h.
pub fn mahalanobis_sq(sigma: &AnisotropyMatrix, h: [f64; 2]) -> f64 {
    let m = &sigma.0;
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    let hv = Vector2::new(h[0], h[1]);
    (hv.transpose() * inv * hv)[(0, 0)]
}

/// Q via the spectral parameters directly: rotate h into the eigenbasis and
/// scale by the eigenvalues. Algebraically identical to building Sigma and
/// inverting, but cheaper inside the covariance fill loops.
#[inline]
fn mahalanobis_sq_spectral(phi1: f64, phi2: f64, sin_eta: f64, cos_eta: f64, h: [f64; 2]) -> f64 {
    let u = cos_eta * h[0] + sin_eta * h[1];
    let v = -sin_eta * h[0] + cos_eta * h[1];
    u * u / phi1 + v * v / phi2
}

/// Anisotropic Matérn covariance at separation h (without nugget).
///
/// Returns sigma2 at h = 0 (the continuity limit) and dispatches nu = 1/2
/// to its exponential closed form; all other smoothness values go through
/// the Bessel evaluation in [`matern_general`].
pub fn matern(params: &SegmentParams, h: [f64; 2]) -> f64 {
    let (sin_eta, cos_eta) = params.eta.sin_cos();
    let q = mahalanobis_sq_spectral(params.phi1, params.phi2, sin_eta, cos_eta, h);
    let x = q.sqrt();
    if x == 0.0 {
        return params.sigma2;
    }
    if params.nu == 0.5 {
        params.sigma2 * (-x).exp()
    } else {
        matern_scalar_general(params.sigma2, params.nu, x)
    }
}

/// Anisotropic Matérn evaluated through the general Bessel path for every
/// smoothness, including nu = 1/2. Kept distinct from [`matern`] so the two
/// routes can be checked against each other.
pub fn matern_general(params: &SegmentParams, h: [f64; 2]) -> f64 {
    let (sin_eta, cos_eta) = params.eta.sin_cos();
    let q = mahalanobis_sq_spectral(params.phi1, params.phi2, sin_eta, cos_eta, h);
    matern_scalar_general(params.sigma2, params.nu, q.sqrt())
}

/// sigma2 / (Gamma(nu) 2^{nu-1}) x^nu K_nu(x).
fn matern_scalar_general(sigma2: f64, nu: f64, x: f64) -> f64 {
    if x < 1e-12 {
        return sigma2;
    }
    sigma2 / (gamma(nu) * (nu - 1.0).exp2()) * x.powf(nu) * bessel_k(nu, x)
}

/// Dense covariance matrix of one segment's observations.
pub fn segment_cov_matrix(
    params: &SegmentParams,
    locations: &[Location],
    include_nugget: bool,
) -> DMatrix<f64> {
    let n = locations.len();
    let mut m = DMatrix::zeros(n, n);
    let diag = params.sigma2 + if include_nugget { params.tau2 } else { 0.0 };
    for i in 0..n {
        m[(i, i)] = diag;
        for j in 0..i {
            let h = [
                locations[i].lon - locations[j].lon,
                locations[i].lat - locations[j].lat,
            ];
            let v = matern(params, h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Cross-covariance block between two location sets in the same segment
/// (no nugget: the error process is independent across locations).
pub fn cross_cov_matrix(
    params: &SegmentParams,
    rows: &[Location],
    cols: &[Location],
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            m[(i, j)] = matern(params, [a.lon - b.lon, a.lat - b.lat]);
        }
    }
    m
}

/// Partition-induced nonstationary covariance between two locations:
/// the within-segment Matérn when both fall in the same segment, zero
/// across segments (indicator weights).
pub fn nonstationary_cov(
    partition: &Partition,
    all_params: &[SegmentParams],
    s: Location,
    t: Location,
) -> f64 {
    assert_eq!(
        all_params.len(),
        partition.k(),
        "one parameter block per segment"
    );
    let ks = partition.assign_segment(s);
    let kt = partition.assign_segment(t);
    if ks != kt {
        return 0.0;
    }
    matern(&all_params[ks - 1], [s.lon - t.lon, s.lat - t.lat])
}

/// Cholesky with a diagonal jitter ladder: none, then 1e-10*scale
/// escalating tenfold to 1e-6*scale, then fail.
pub fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    scale: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = matrix.nrows();
    if let Some(chol) = matrix.clone().cholesky() {
        return Ok(chol);
    }
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-6 * scale * (1.0 + 1e-12) {
        let mut jittered = matrix.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailure { n })
}

pub use support::{ETA_MAX, PHI_MAX, SIGMA2_MAX, TAU2_MAX};
