//! Covariate-driven spatial partitioning.
//!
//! Bivariate Gaussian mixtures are fit by EM to the locations where all
//! covariates are observed; a fitted mixture induces a hard partition of
//! the whole plane by maximum component density, so any location (observed
//! or not) can be assigned to a segment.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bounding_box, CovariateTable, Location};
use crate::error::{Error, Result};
use crate::rng::{stream, RngSeed};

/// One bivariate Gaussian mixture component: mean, covariance, weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

impl MixtureComponent {
    fn log_det_and_inv(&self) -> (f64, [[f64; 2]; 2]) {
        let [[a, b], [c, d]] = self.cov;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        (det.ln(), inv)
    }

    /// log N2(s; mean, cov), the unweighted component density.
    pub fn log_density(&self, s: Location) -> f64 {
        let (log_det, inv) = self.log_det_and_inv();
        let dx = s.lon - self.mean[0];
        let dy = s.lat - self.mean[1];
        let quad = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy);
        -(2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad
    }
}

/// A fitted K-component mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub components: Vec<MixtureComponent>,
    pub log_likelihood: f64,
    pub em_iterations: usize,
    pub converged: bool,
}

impl MixtureModel {
    /// Assemble a mixture by hand (synthetic partitions, tests). The
    /// log-likelihood is unset.
    pub fn from_components(components: Vec<MixtureComponent>) -> Self {
        MixtureModel {
            components,
            log_likelihood: 0.0,
            em_iterations: 0,
            converged: true,
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// A candidate partition: a mixture plus the induced hard segmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub id: usize,
    pub mixture: MixtureModel,
    /// Off by default: the assignment rule uses unweighted component
    /// densities. Switching this on adds the log mixture weights, for
    /// sensitivity analysis only.
    pub weighted_assignment: bool,
}

impl Partition {
    pub fn new(id: usize, mixture: MixtureModel) -> Self {
        Partition {
            id,
            mixture,
            weighted_assignment: false,
        }
    }

    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    /// Hard segment label in 1..=K: argmax of the component densities,
    /// ties broken toward the lowest index.
    pub fn assign_segment(&self, s: Location) -> usize {
        let dens = component_log_densities(&self.mixture, s);
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (k, comp) in self.mixture.components.iter().enumerate() {
            let v = if self.weighted_assignment {
                dens[k] + comp.weight.ln()
            } else {
                dens[k]
            };
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        best + 1
    }

    /// Labels for a whole slice of locations.
    pub fn assign_all(&self, locations: &[Location]) -> Vec<usize> {
        locations.iter().map(|s| self.assign_segment(*s)).collect()
    }
}

/// The ordered candidate set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSet {
    pub partitions: Vec<Partition>,
}

impl PartitionSet {
    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }
}

/// Unweighted per-component log densities at s.
pub fn component_log_densities(model: &MixtureModel, s: Location) -> Vec<f64> {
    model.components.iter().map(|c| c.log_density(s)).collect()
}

/// Fit a K-component bivariate Gaussian mixture by EM with k-means++
/// seeding, returning the best converged restart by log-likelihood.
pub fn fit_mixture(
    points: &[Location],
    k: usize,
    seed: RngSeed,
    restarts: usize,
    tol: f64,
    max_iter: usize,
) -> Result<MixtureModel> {
    if k < 1 || points.len() < 5 * k {
        return Err(Error::TooFewPoints {
            n: points.len(),
            k,
            min: 5 * k,
        });
    }
    let floor = eigen_floor(points);
    let mut best: Option<MixtureModel> = None;
    for r in 0..restarts.max(1) {
        let rseed = seed.split(stream::EM).split(r as u64);
        match run_em(points, k, rseed, tol, max_iter, floor) {
            Some((model, _trace)) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        // Converged fits dominate unconverged ones.
                        (model.converged, model.log_likelihood) > (b.converged, b.log_likelihood)
                    }
                };
                if better {
                    best = Some(model);
                }
            }
            None => continue,
        }
    }
    best.ok_or(Error::AllRestartsDegenerate { k, restarts })
}

/// Eigenvalue floor for component covariances: 1e-6 * (domain diameter)^2.
fn eigen_floor(points: &[Location]) -> f64 {
    let (lo, hi) = bounding_box(points);
    let dx = hi.lon - lo.lon;
    let dy = hi.lat - lo.lat;
    let diam2 = dx * dx + dy * dy;
    (1e-6 * diam2).max(1e-12)
}

/// One EM run from a k-means++ seeding. Returns the fitted model and the
/// per-iteration log-likelihood trace, or None if the run degenerated.
pub(crate) fn run_em(
    points: &[Location],
    k: usize,
    seed: RngSeed,
    tol: f64,
    max_iter: usize,
    floor: f64,
) -> Option<(MixtureModel, Vec<f64>)> {
    let n = points.len();
    let mut rng = seed.rng();
    let centers = kmeanspp_seed(points, k, &mut rng);
    let mut components = init_components(points, &centers, floor);

    let mut resp = vec![vec![0.0; k]; n];
    let mut logs = vec![0.0f64; k];
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        // E step
        let mut ll = 0.0;
        for (i, s) in points.iter().enumerate() {
            for (j, c) in components.iter().enumerate() {
                logs[j] = c.weight.ln() + c.log_density(*s);
            }
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logs.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + sum_exp.ln();
            ll += lse;
            for j in 0..k {
                resp[i][j] = (logs[j] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return None;
        }
        trace.push(ll);

        // M step
        for (j, comp) in components.iter_mut().enumerate() {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if nk < 1e-10 {
                return None; // component collapsed despite the floor
            }
            let mut mean = [0.0, 0.0];
            for (i, s) in points.iter().enumerate() {
                mean[0] += resp[i][j] * s.lon;
                mean[1] += resp[i][j] * s.lat;
            }
            mean[0] /= nk;
            mean[1] /= nk;
            let mut cov = [[0.0, 0.0], [0.0, 0.0]];
            for (i, s) in points.iter().enumerate() {
                let dx = s.lon - mean[0];
                let dy = s.lat - mean[1];
                cov[0][0] += resp[i][j] * dx * dx;
                cov[0][1] += resp[i][j] * dx * dy;
                cov[1][1] += resp[i][j] * dy * dy;
            }
            cov[0][0] /= nk;
            cov[0][1] /= nk;
            cov[1][1] /= nk;
            cov[1][0] = cov[0][1];
            comp.weight = nk / n as f64;
            comp.mean = mean;
            comp.cov = floor_eigenvalues(cov, floor);
        }

        if iter > 0 {
            let delta = (ll - prev_ll).abs();
            if delta < tol * (1.0 + ll.abs()) {
                converged = true;
                prev_ll = ll;
                break;
            }
        }
        prev_ll = ll;
    }

    Some((
        MixtureModel {
            components,
            log_likelihood: prev_ll,
            em_iterations: iterations,
            converged,
        },
        trace,
    ))
}

/// k-means++ seeding on the raw coordinates.
fn kmeanspp_seed(points: &[Location], k: usize, rng: &mut impl Rng) -> Vec<Location> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| {
            let d = p.dist(&centers[0]);
            d * d
        })
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.random_range(0..n)]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            points[chosen]
        };
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = p.dist(&next);
            d2[i] = d2[i].min(d * d);
        }
    }
    centers
}

/// Initial components from a single hard-assignment pass over the seeds.
fn init_components(points: &[Location], centers: &[Location], floor: f64) -> Vec<MixtureComponent> {
    let k = centers.len();
    let n = points.len();
    let mut assign = vec![0usize; n];
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let d = p.dist(c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assign[i] = best;
    }
    let global_cov = sample_cov(points);
    (0..k)
        .map(|j| {
            let members: Vec<Location> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| *p)
                .collect();
            if members.len() < 2 {
                MixtureComponent {
                    mean: [centers[j].lon, centers[j].lat],
                    cov: floor_eigenvalues(global_cov, floor),
                    weight: 1.0 / k as f64,
                }
            } else {
                let mean = [
                    members.iter().map(|p| p.lon).sum::<f64>() / members.len() as f64,
                    members.iter().map(|p| p.lat).sum::<f64>() / members.len() as f64,
                ];
                MixtureComponent {
                    mean,
                    cov: floor_eigenvalues(sample_cov(&members), floor),
                    weight: members.len() as f64 / n as f64,
                }
            }
        })
        .collect()
}

fn sample_cov(points: &[Location]) -> [[f64; 2]; 2] {
    let n = points.len() as f64;
    let mean = [
        points.iter().map(|p| p.lon).sum::<f64>() / n,
        points.iter().map(|p| p.lat).sum::<f64>() / n,
    ];
    let mut cov = [[0.0, 0.0], [0.0, 0.0]];
    for p in points {
        let dx = p.lon - mean[0];
        let dy = p.lat - mean[1];
        cov[0][0] += dx * dx / n;
        cov[0][1] += dx * dy / n;
        cov[1][1] += dy * dy / n;
    }
    cov[1][0] = cov[0][1];
    cov
}

/// Clamp the eigenvalues of a symmetric 2x2 matrix from below.
fn floor_eigenvalues(cov: [[f64; 2]; 2], floor: f64) -> [[f64; 2]; 2] {
    let a = cov[0][0];
    let b = cov[0][1];
    let d = cov[1][1];
    let tr = a + d;
    let gap = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
    let l1 = 0.5 * (tr + gap);
    let l2 = 0.5 * (tr - gap);
    if l2 >= floor {
        return cov;
    }
    // Eigenvector for l1; (b, l1 - a) unless degenerate.
    let (vx, vy) = if b.abs() > 1e-300 {
        (b, l1 - a)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = if norm > 0.0 {
        (vx / norm, vy / norm)
    } else {
        (1.0, 0.0)
    };
    let l1c = l1.max(floor);
    let l2c = l2.max(floor);
    // Reconstruct R diag(l1c, l2c) R^T with R = [[vx, -vy], [vy, vx]].
    [
        [
            l1c * vx * vx + l2c * vy * vy,
            l1c * vx * vy - l2c * vx * vy,
        ],
        [
            l1c * vx * vy - l2c * vx * vy,
            l1c * vy * vy + l2c * vx * vx,
        ],
    ]
}

/// Fit candidate mixtures for every K, keep converged fits, deduplicate
/// coincident local modes, and rank by log-likelihood up to `max_keep`.
pub fn generate_candidates(
    covariates: &CovariateTable,
    k_values: &[usize],
    restarts: usize,
    seed: RngSeed,
    max_keep: usize,
) -> Result<PartitionSet> {
    let points = covariates.complete_case_locations();
    if points.is_empty() {
        return Err(Error::NoCompleteCases);
    }
    let floor = eigen_floor(&points);
    let mut candidates: Vec<MixtureModel> = Vec::new();
    for (ki, &k) in k_values.iter().enumerate() {
        if points.len() < 5 * k {
            continue;
        }
        let mut modes: Vec<MixtureModel> = Vec::new();
        for r in 0..restarts.max(1) {
            let rseed = seed
                .split(stream::EM)
                .split(ki as u64)
                .split(r as u64);
            if let Some((model, _)) = run_em(&points, k, rseed, 1e-6, 500, floor) {
                if model.converged && !modes.iter().any(|m| is_duplicate_mode(m, &model)) {
                    modes.push(model);
                }
            }
        }
        candidates.extend(modes);
    }
    if candidates.is_empty() {
        return Err(Error::NoConvergedFit);
    }
    candidates.sort_by(|a, b| b.log_likelihood.partial_cmp(&a.log_likelihood).unwrap());
    candidates.truncate(max_keep);
    Ok(PartitionSet {
        partitions: candidates
            .into_iter()
            .enumerate()
            .map(|(i, m)| Partition::new(i, m))
            .collect(),
    })
}

/// Two fits are the same local mode when their log-likelihoods coincide
/// (within 1e-8, scaled) and their components match under some ordering.
pub fn is_duplicate_mode(a: &MixtureModel, b: &MixtureModel) -> bool {
    if a.k() != b.k() {
        return false;
    }
    if (a.log_likelihood - b.log_likelihood).abs() > 1e-8 * (1.0 + a.log_likelihood.abs()) {
        return false;
    }
    components_match(a, b, 1e-5)
}

/// Greedy permutation matching of components by nearest mean.
fn components_match(a: &MixtureModel, b: &MixtureModel, tol: f64) -> bool {
    let k = a.k();
    let mut used = vec![false; k];
    for ca in &a.components {
        let mut found = false;
        for (j, cb) in b.components.iter().enumerate() {
            if used[j] {
                continue;
            }
            let close = (ca.mean[0] - cb.mean[0]).abs() <= tol
                && (ca.mean[1] - cb.mean[1]).abs() <= tol
                && (ca.weight - cb.weight).abs() <= tol
                && (0..2).all(|r| {
                    (0..2).all(|c| (ca.cov[r][c] - cb.cov[r][c]).abs() <= tol)
                });
            if close {
                used[j] = true;
                found = true;
                break;
            }
        }
        if !found {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cluster(center: (f64, f64), spread: f64, count: usize, seed: u64) -> Vec<Location> {
        use rand_distr::{Distribution, Normal};
        let mut rng = RngSeed::new(seed).rng();
        let normal = Normal::new(0.0, spread).unwrap();
        (0..count)
            .map(|_| {
                Location::new(
                    center.0 + normal.sample(&mut rng),
                    center.1 + normal.sample(&mut rng),
                )
            })
            .collect()
    }

    #[test]
    fn single_component_is_sample_mle() {
        let points = cluster((3.0, -1.0), 1.3, 40, 7);
        let model = fit_mixture(&points, 1, RngSeed::new(1), 3, 1e-10, 200).unwrap();
        let n = points.len() as f64;
        let mean = [
            points.iter().map(|p| p.lon).sum::<f64>() / n,
            points.iter().map(|p| p.lat).sum::<f64>() / n,
        ];
        let comp = &model.components[0];
        assert_relative_eq!(comp.mean[0], mean[0], epsilon = 1e-9);
        assert_relative_eq!(comp.mean[1], mean[1], epsilon = 1e-9);
        let cov = sample_cov(&points);
        for r in 0..2 {
            for c in 0..2 {
                assert_relative_eq!(comp.cov[r][c], cov[r][c], epsilon = 1e-9);
            }
        }
        assert_eq!(comp.weight, 1.0);
    }

    /// Lloyd's k-means, used only as an independent centroid oracle.
    fn kmeans_oracle(points: &[Location], init: [Location; 2]) -> [Location; 2] {
        let mut centers = init;
        for _ in 0..100 {
            let mut sums = [[0.0f64; 2]; 2];
            let mut counts = [0usize; 2];
            for p in points {
                let j = if p.dist(&centers[0]) <= p.dist(&centers[1]) {
                    0
                } else {
                    1
                };
                sums[j][0] += p.lon;
                sums[j][1] += p.lat;
                counts[j] += 1;
            }
            for j in 0..2 {
                if counts[j] > 0 {
                    centers[j] = Location::new(
                        sums[j][0] / counts[j] as f64,
                        sums[j][1] / counts[j] as f64,
                    );
                }
            }
        }
        centers
    }

    #[test]
    fn two_well_separated_clusters_recovered() {
        let mut points = cluster((0.0, 0.0), 0.1, 50, 11);
        points.extend(cluster((10.0, 10.0), 0.1, 50, 12));
        let model = fit_mixture(&points, 2, RngSeed::new(2), 10, 1e-8, 500).unwrap();
        assert!(model.converged);

        let oracle = kmeans_oracle(
            &points,
            [Location::new(0.0, 0.0), Location::new(10.0, 10.0)],
        );
        // Match components to oracle centroids by proximity.
        for comp in &model.components {
            let m = Location::new(comp.mean[0], comp.mean[1]);
            let d = oracle.iter().map(|c| m.dist(c)).fold(f64::INFINITY, f64::min);
            assert!(d < 0.05, "component mean {:?} off by {d}", comp.mean);
        }

        // Responsibilities >= 0.999 toward own cluster.
        for (i, p) in points.iter().enumerate() {
            let dens = component_log_densities(&model, *p);
            let lw: Vec<f64> = dens
                .iter()
                .zip(&model.components)
                .map(|(d, c)| d + c.weight.ln())
                .collect();
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lw.iter().map(|l| (l - m).exp()).sum();
            let own = if i < 50 {
                // cluster at origin
                let k = model
                    .components
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = a.mean[0].hypot(a.mean[1]);
                        let db = b.mean[0].hypot(b.mean[1]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                ((lw[k] - m).exp()) / z
            } else {
                let k = model
                    .components
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        let da = a.mean[0].hypot(a.mean[1]);
                        let db = b.mean[0].hypot(b.mean[1]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                ((lw[k] - m).exp()) / z
            };
            assert!(own >= 0.999, "point {i} responsibility {own}");
        }
    }

    #[test]
    fn em_loglik_is_monotone() {
        let mut points = cluster((0.0, 0.0), 1.0, 60, 3);
        points.extend(cluster((4.0, 2.0), 0.7, 60, 4));
        let floor = eigen_floor(&points);
        for r in 0..5 {
            let (_, trace) = run_em(
                &points,
                3,
                RngSeed::new(100).split(r),
                1e-9,
                300,
                floor,
            )
            .unwrap();
            for w in trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9,
                    "log-likelihood decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let points = cluster((0.0, 0.0), 1.0, 50, 5);
        let model = fit_mixture(&points, 3, RngSeed::new(6), 5, 1e-6, 200).unwrap();
        for p in &points {
            let dens = component_log_densities(&model, *p);
            let lw: Vec<f64> = dens
                .iter()
                .zip(&model.components)
                .map(|(d, c)| d + c.weight.ln())
                .collect();
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lw.iter().map(|l| (l - m).exp()).sum();
            let total: f64 = lw.iter().map(|l| (l - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut points = cluster((0.0, 0.0), 0.5, 40, 8);
        points.extend(cluster((5.0, 5.0), 0.5, 40, 9));
        let model = fit_mixture(&points, 2, RngSeed::new(3), 5, 1e-8, 300).unwrap();
        let total: f64 = model.components.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_at_mean_is_normalizing_constant() {
        let comp = MixtureComponent {
            mean: [1.0, 2.0],
            cov: [[0.5, 0.1], [0.1, 0.3]],
            weight: 1.0,
        };
        let det: f64 = 0.5 * 0.3 - 0.1 * 0.1;
        let expected = -(2.0 * PI).ln() - 0.5 * det.ln();
        assert_relative_eq!(
            comp.log_density(Location::new(1.0, 2.0)),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn identical_components_give_identical_densities() {
        let c = MixtureComponent {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            weight: 0.5,
        };
        let model = MixtureModel::from_components(vec![c.clone(), c]);
        let dens = component_log_densities(&model, Location::new(0.7, -0.3));
        assert_eq!(dens[0], dens[1]);
    }

    #[test]
    fn generic_density_matches_direct_formula() {
        let comp = MixtureComponent {
            mean: [-84.0, 42.0],
            cov: [[2.0, 0.4], [0.4, 1.0]],
            weight: 1.0,
        };
        let mut rng = RngSeed::new(17).rng();
        for _ in 0..100 {
            let s = Location::new(
                -84.0 + 4.0 * (rng.random::<f64>() - 0.5),
                42.0 + 4.0 * (rng.random::<f64>() - 0.5),
            );
            // Independent direct evaluation of the bivariate normal density.
            let det: f64 = 2.0 * 1.0 - 0.4 * 0.4;
            let dx = s.lon + 84.0;
            let dy = s.lat - 42.0;
            let quad = (1.0 * dx * dx - 2.0 * 0.4 * dx * dy + 2.0 * dy * dy) / det;
            let expected = (1.0 / (2.0 * PI * det.sqrt()) * (-0.5 * quad).exp()).ln();
            assert_relative_eq!(comp.log_density(s), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn assignment_basics_and_tie_break() {
        let a = MixtureComponent {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            weight: 0.5,
        };
        let b = MixtureComponent {
            mean: [2.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            weight: 0.5,
        };
        let part = Partition::new(0, MixtureModel::from_components(vec![a, b]));
        // At component 1's mean.
        assert_eq!(part.assign_segment(Location::new(0.0, 0.0)), 1);
        // Equidistant: tie toward lowest index.
        assert_eq!(part.assign_segment(Location::new(1.0, 0.0)), 1);
        assert_eq!(part.assign_segment(Location::new(2.0, 0.0)), 2);
    }

    #[test]
    fn assignment_matches_brute_force_argmax() {
        let mut points = cluster((0.0, 0.0), 1.0, 50, 31);
        points.extend(cluster((6.0, 3.0), 1.5, 50, 32));
        let model = fit_mixture(&points, 3, RngSeed::new(33), 5, 1e-6, 200).unwrap();
        let part = Partition::new(0, model.clone());
        let mut rng = RngSeed::new(34).rng();
        for _ in 0..100 {
            let s = Location::new(
                10.0 * rng.random::<f64>() - 2.0,
                8.0 * rng.random::<f64>() - 2.0,
            );
            let dens = component_log_densities(&model, s);
            let mut best = 0;
            for j in 1..dens.len() {
                if dens[j] > dens[best] {
                    best = j;
                }
            }
            assert_eq!(part.assign_segment(s), best + 1);
        }
    }

    #[test]
    fn permuting_components_permutes_labels() {
        let mut points = cluster((0.0, 0.0), 1.0, 40, 41);
        points.extend(cluster((7.0, 7.0), 1.0, 40, 42));
        let model = fit_mixture(&points, 2, RngSeed::new(43), 5, 1e-6, 200).unwrap();
        let mut swapped = model.clone();
        swapped.components.swap(0, 1);
        let p1 = Partition::new(0, model);
        let p2 = Partition::new(0, swapped);
        for s in &points {
            let l1 = p1.assign_segment(*s);
            let l2 = p2.assign_segment(*s);
            assert_eq!(l1, 3 - l2, "label permutation must track component order");
        }
    }

    #[test]
    fn every_point_gets_exactly_one_label() {
        let points = cluster((0.0, 0.0), 2.0, 80, 51);
        let model = fit_mixture(&points, 4, RngSeed::new(52), 5, 1e-6, 200).unwrap();
        let part = Partition::new(0, model);
        for s in &points {
            let label = part.assign_segment(*s);
            assert!((1..=part.k()).contains(&label));
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let points = cluster((0.0, 0.0), 1.0, 9, 61);
        assert!(matches!(
            fit_mixture(&points, 2, RngSeed::new(62), 3, 1e-6, 100),
            Err(Error::TooFewPoints { .. })
        ));
    }

    fn table_from_points(points: Vec<Location>) -> CovariateTable {
        let n = points.len();
        CovariateTable {
            locations: points,
            categories: vec![vec![Some("a".into())]; n],
            column_names: vec!["cat".into()],
        }
    }

    #[test]
    fn candidates_capped_at_max_keep() {
        let mut points = cluster((0.0, 0.0), 0.5, 60, 71);
        points.extend(cluster((5.0, 0.0), 0.5, 60, 72));
        points.extend(cluster((0.0, 5.0), 0.5, 60, 73));
        let table = table_from_points(points);
        let set = generate_candidates(&table, &[2, 3, 4, 5, 6], 6, RngSeed::new(74), 8).unwrap();
        assert!(set.len() <= 8);
        assert!(!set.is_empty());
        // distinct ids
        let mut ids: Vec<usize> = set.partitions.iter().map(|p| p.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), set.len());
        // loglik-ranked
        for w in set.partitions.windows(2) {
            assert!(w[0].mixture.log_likelihood >= w[1].mixture.log_likelihood);
        }
    }

    #[test]
    fn single_k_one_gives_stationary_baseline() {
        let points = cluster((0.0, 0.0), 1.0, 50, 81);
        let table = table_from_points(points);
        let set = generate_candidates(&table, &[1], 3, RngSeed::new(82), 8).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.partitions[0].k(), 1);
    }

    #[test]
    fn duplicate_modes_are_deduplicated() {
        let comp = MixtureComponent {
            mean: [1.0, 2.0],
            cov: [[1.0, 0.1], [0.1, 0.8]],
            weight: 0.4,
        };
        let other = MixtureComponent {
            mean: [-3.0, 0.5],
            cov: [[0.5, 0.0], [0.0, 0.5]],
            weight: 0.6,
        };
        let mut a = MixtureModel::from_components(vec![comp.clone(), other.clone()]);
        a.log_likelihood = -312.5;
        // Same mode with permuted components and a tiny loglik wobble.
        let mut b = MixtureModel::from_components(vec![other, comp]);
        b.log_likelihood = -312.5 + 1e-9;
        assert!(is_duplicate_mode(&a, &b));

        let mut c = a.clone();
        c.log_likelihood = -310.0;
        assert!(!is_duplicate_mode(&a, &c));
        let mut d = a.clone();
        d.components[0].mean[0] += 0.5;
        assert!(!is_duplicate_mode(&a, &d));
    }
}
