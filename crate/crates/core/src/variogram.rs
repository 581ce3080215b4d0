//! Exploratory nonstationarity diagnostics: OLS detrending, empirical
//! semivariograms, exponential fits, and parametric-bootstrap bands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Location, SpatialDataset};
use crate::error::{Error, Result};
use crate::rng::{stream, RngSeed};
use crate::stats::quantile;

/// Binned moment estimate of the semivariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalSemivariogram {
    pub bin_centers: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
    /// Binning definition, kept so bootstrap replicates bin identically.
    pub n_bins: usize,
    pub max_dist: f64,
}

/// 95% bootstrap band per reported bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariogramBands {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Fitted exponential semivariogram
/// gamma(h) = nugget + partial_sill * (1 - exp(-h / range)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentialVariogramFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
    /// False in the pure-nugget limit, where the range is meaningless.
    pub range_identified: bool,
    pub bands: Option<VariogramBands>,
}

impl ExponentialVariogramFit {
    pub fn evaluate(&self, h: f64) -> f64 {
        self.nugget + self.partial_sill * (1.0 - (-h / self.range).exp())
    }
}

/// OLS residuals of a regression on (1, lon, lat, lon*lat).
pub fn detrend_ols(data: &SpatialDataset) -> Result<Vec<f64>> {
    let n = data.len();
    if n < 5 {
        return Err(Error::EmptyDataset(format!(
            "trend regression needs n >= 5, got {n}"
        )));
    }
    let mut x = DMatrix::zeros(n, 4);
    for (i, loc) in data.locations.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = loc.lon;
        x[(i, 2)] = loc.lat;
        x[(i, 3)] = loc.lon * loc.lat;
    }
    let y = DVector::from_column_slice(&data.values);
    let svd = x.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficientDesign);
    }
    let beta = svd.solve(&y, tol).map_err(|_| Error::RankDeficientDesign)?;
    let fitted = x * beta;
    Ok((y - fitted).iter().cloned().collect())
}

/// Moment estimator: bin b holds (1/(2 N_b)) sum (r_i - r_j)^2 over pairs
/// whose distance falls in bin b. Empty bins are dropped.
pub fn empirical_semivariogram(
    residuals: &[f64],
    locations: &[Location],
    n_bins: usize,
    max_dist: f64,
) -> Result<EmpiricalSemivariogram> {
    assert_eq!(residuals.len(), locations.len());
    assert!(n_bins >= 1 && max_dist > 0.0);
    let n = locations.len();
    if n < 2 {
        return Err(Error::EmptyDataset("semivariogram needs n >= 2".into()));
    }
    let width = max_dist / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..n {
        for j in 0..i {
            let d = locations[i].dist(&locations[j]);
            if d > max_dist {
                continue;
            }
            let b = ((d / width) as usize).min(n_bins - 1);
            let diff = residuals[i] - residuals[j];
            sums[b] += diff * diff;
            counts[b] += 1;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::NoPairsInRange { max_dist });
    }
    let mut bin_centers = Vec::new();
    let mut gamma = Vec::new();
    let mut kept_counts = Vec::new();
    for b in 0..n_bins {
        if counts[b] > 0 {
            bin_centers.push((b as f64 + 0.5) * width);
            gamma.push(sums[b] / (2.0 * counts[b] as f64));
            kept_counts.push(counts[b]);
        }
    }
    Ok(EmpiricalSemivariogram {
        bin_centers,
        gamma,
        counts: kept_counts,
        n_bins,
        max_dist,
    })
}

/// Default binning: 15 equal-width bins to half the maximum pairwise distance.
pub fn default_binning(locations: &[Location]) -> (usize, f64) {
    let mut max_d: f64 = 0.0;
    for i in 0..locations.len() {
        for j in 0..i {
            max_d = max_d.max(locations[i].dist(&locations[j]));
        }
    }
    (15, (max_d / 2.0).max(f64::MIN_POSITIVE))
}

/// Count-weighted least squares over (nugget, partial_sill, range), solved
/// by profiling the two linear parameters over a fixed range grid. The grid
/// makes the fit deterministic.
pub fn fit_exponential(emp: &EmpiricalSemivariogram) -> Result<ExponentialVariogramFit> {
    let n_bins = emp.bin_centers.len();
    if n_bins < 3 {
        return Err(Error::TooFewBins {
            found: n_bins,
            need: 3,
        });
    }
    let h_max = *emp.bin_centers.last().unwrap();

    let mut best: Option<(f64, f64, f64, f64)> = None; // (sse, nugget, psill, range)
    let mut consider = |best: &mut Option<(f64, f64, f64, f64)>, r: f64| -> f64 {
        let (sse, nugget, psill) = profile_wls(emp, r);
        if best.is_none() || sse < best.unwrap().0 {
            *best = Some((sse, nugget, psill, r));
        }
        sse
    };

    // Log-spaced multi-start grid over the range parameter.
    let lo = (1e-3 * h_max).ln();
    let hi = (3.0 * h_max).ln();
    let grid = 200;
    for i in 0..=grid {
        let r = (lo + (hi - lo) * i as f64 / grid as f64).exp();
        consider(&mut best, r);
    }
    // Golden-section refinement around the best grid point.
    let r0 = best.unwrap().3;
    let mut a = r0 / 1.3;
    let mut b = r0 * 1.3;
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = consider(&mut best, c);
    let mut fd = consider(&mut best, d);
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = consider(&mut best, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = consider(&mut best, d);
        }
    }

    let (_, nugget, psill, range) = best.ok_or(Error::VariogramFitFailure)?;
    let scale = emp.gamma.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let range_identified = psill > 1e-8 * scale;
    Ok(ExponentialVariogramFit {
        nugget,
        partial_sill: psill,
        range,
        range_identified,
        bands: None,
    })
}

/// For fixed range r the model is linear in (nugget, partial_sill); solve
/// the count-weighted normal equations with nonnegativity clamps and
/// return (weighted SSE, nugget, partial_sill).
fn profile_wls(emp: &EmpiricalSemivariogram, r: f64) -> (f64, f64, f64) {
    let basis: Vec<f64> = emp
        .bin_centers
        .iter()
        .map(|&h| 1.0 - (-h / r).exp())
        .collect();
    let w: Vec<f64> = emp.counts.iter().map(|&c| c as f64).collect();
    let g = &emp.gamma;

    let sw: f64 = w.iter().sum();
    let swb: f64 = w.iter().zip(&basis).map(|(wi, bi)| wi * bi).sum();
    let swbb: f64 = w.iter().zip(&basis).map(|(wi, bi)| wi * bi * bi).sum();
    let swg: f64 = w.iter().zip(g).map(|(wi, gi)| wi * gi).sum();
    let swbg: f64 = w
        .iter()
        .zip(&basis)
        .zip(g)
        .map(|((wi, bi), gi)| wi * bi * gi)
        .sum();

    let sse_of = |nug: f64, ps: f64| -> f64 {
        w.iter()
            .zip(&basis)
            .zip(g)
            .map(|((wi, bi), gi)| {
                let e = gi - nug - ps * bi;
                wi * e * e
            })
            .sum()
    };

    let det = sw * swbb - swb * swb;
    let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(3);
    if det.abs() > 1e-300 {
        let nug = (swg * swbb - swbg * swb) / det;
        let ps = (sw * swbg - swb * swg) / det;
        if nug >= 0.0 && ps >= 0.0 {
            candidates.push((nug, ps));
        }
    }
    // Boundary solutions.
    if swbb > 0.0 {
        candidates.push((0.0, (swbg / swbb).max(0.0)));
    }
    candidates.push(((swg / sw).max(0.0), 0.0));

    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (nug, ps) in candidates {
        let sse = sse_of(nug, ps);
        if sse < best.0 {
            best = (sse, nug, ps);
        }
    }
    best
}

/// Parametric bootstrap: simulate Gaussian fields from the fitted model at
/// the data locations, re-estimate the empirical semivariogram of each
/// replicate with the same binning, and report per-bin 2.5/97.5 percentiles.
pub fn bootstrap_bands(
    fit: &ExponentialVariogramFit,
    emp: &EmpiricalSemivariogram,
    locations: &[Location],
    n_boot: usize,
    seed: RngSeed,
) -> Result<VariogramBands> {
    let n = locations.len();
    // Covariance implied by the fitted semivariogram:
    // C(h) = psill * exp(-h / range) for h > 0, C(0) = nugget + psill.
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = fit.nugget + fit.partial_sill;
        for j in 0..i {
            let h = locations[i].dist(&locations[j]);
            let c = fit.partial_sill * (-h / fit.range).exp();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let scale = (fit.nugget + fit.partial_sill).max(1e-300);
    let chol = crate::covariance::cholesky_with_jitter(&cov, scale)?;
    let l = chol.l();

    let replicate_gammas: Vec<Vec<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed.split(stream::BOOTSTRAP).split(b as u64).rng();
            let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &l * eps;
            let field: Vec<f64> = z.iter().cloned().collect();
            let rep = empirical_semivariogram(&field, locations, emp.n_bins, emp.max_dist)
                .expect("replicate binning matches the data binning");
            // Pair counts depend only on locations, so the reported bins align.
            rep.gamma
        })
        .collect();

    let n_bins = emp.bin_centers.len();
    let mut lower = Vec::with_capacity(n_bins);
    let mut upper = Vec::with_capacity(n_bins);
    for bin in 0..n_bins {
        let vals: Vec<f64> = replicate_gammas.iter().map(|g| g[bin]).collect();
        lower.push(quantile(&vals, 0.025));
        upper.push(quantile(&vals, 0.975));
    }
    Ok(VariogramBands { lower, upper })
}

/// Indices of the dataset split into a k_lon x k_lat grid of the bounding
/// box (the subregion diagnostic). Cells are row-major from the lower-left
/// corner; empty cells are kept as empty index lists.
pub fn subregion_indices(locations: &[Location], k_lon: usize, k_lat: usize) -> Vec<Vec<usize>> {
    let (lo, hi) = crate::data::bounding_box(locations);
    let dlon = (hi.lon - lo.lon).max(f64::MIN_POSITIVE);
    let dlat = (hi.lat - lo.lat).max(f64::MIN_POSITIVE);
    let mut cells = vec![Vec::new(); k_lon * k_lat];
    for (i, s) in locations.iter().enumerate() {
        let cx = (((s.lon - lo.lon) / dlon * k_lon as f64) as usize).min(k_lon - 1);
        let cy = (((s.lat - lo.lat) / dlat * k_lat as f64) as usize).min(k_lat - 1);
        cells[cy * k_lon + cx].push(i);
    }
    cells
}
