//! Synthetic data drawn from the segment-wise Gaussian model itself, under
//! a user-specified true partition. This is what the oracle and
//! calibration tests condition on.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{cholesky_with_jitter, segment_cov_matrix, SegmentParams};
use crate::data::{Location, SpatialDataset};
use crate::error::Result;
use crate::inference::{segment_frames, SegmentFrame};
use crate::partition::{MixtureComponent, MixtureModel, Partition};
use crate::rng::{stream, RngSeed};

/// Everything needed to draw one dataset from the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Uniform location box: (min corner, max corner).
    pub lo: Location,
    pub hi: Location,
    pub partition: Partition,
    pub mu: f64,
    /// True parameter blocks, interpreted in each segment's rescaled frame.
    pub segments: Vec<SegmentParams>,
    pub seed: RngSeed,
}

/// A partition that slices the box into `k` vertical bands via equally
/// spaced mixture components along the longitude axis.
pub fn banded_partition(id: usize, k: usize, lo: Location, hi: Location) -> Partition {
    let width = (hi.lon - lo.lon).max(1e-12);
    let height = (hi.lat - lo.lat).max(1e-12);
    let sx = (width / (2.0 * k as f64)).powi(2);
    let sy = height * height;
    let components = (0..k)
        .map(|i| MixtureComponent {
            mean: [
                lo.lon + width * (i as f64 + 0.5) / k as f64,
                lo.lat + height / 2.0,
            ],
            cov: [[sx, 0.0], [0.0, sy]],
            weight: 1.0 / k as f64,
        })
        .collect();
    Partition::new(id, MixtureModel::from_components(components))
}

/// Draw locations uniformly in the box.
pub fn uniform_locations(n: usize, lo: Location, hi: Location, rng: &mut impl Rng) -> Vec<Location> {
    (0..n)
        .map(|_| {
            Location::new(
                lo.lon + (hi.lon - lo.lon) * rng.random::<f64>(),
                lo.lat + (hi.lat - lo.lat) * rng.random::<f64>(),
            )
        })
        .collect()
}

/// Sample one dataset: uniform locations, segment assignment through the
/// true partition, and a joint Gaussian draw per segment (process plus
/// nugget) around the global mean. Returns the dataset and the segment
/// frames implied by the generated locations.
pub fn generate(spec: &SynthSpec) -> Result<(SpatialDataset, Vec<SegmentFrame>)> {
    assert_eq!(spec.segments.len(), spec.partition.k());
    let mut rng = spec.seed.split(stream::SYNTH).rng();
    let locations = uniform_locations(spec.n, spec.lo, spec.hi, &mut rng);

    // Frames come from the same code path the fit will use.
    let skeleton = SpatialDataset::new(locations.clone(), vec![0.0; spec.n], None)?;
    let frames = segment_frames(&spec.partition, &skeleton);

    let labels = spec.partition.assign_all(&locations);
    let mut values = vec![0.0; spec.n];
    for seg in 1..=spec.partition.k() {
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == seg)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let frame = frames[seg - 1];
        let framed: Vec<Location> = idx.iter().map(|&i| frame.apply(locations[i])).collect();
        let params = &spec.segments[seg - 1];
        let cov = segment_cov_matrix(params, &framed, true);
        let chol = cholesky_with_jitter(&cov, params.sigma2)?;
        let eps = DVector::from_fn(idx.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = chol.l() * eps;
        for (j, &i) in idx.iter().enumerate() {
            values[i] = spec.mu + draw[j];
        }
    }

    Ok((SpatialDataset::new(locations, values, None)?, frames))
}
