//! End-to-end orchestration: candidate partitions, per-partition chains,
//! evidence, model-averaged prediction, and optional holdout evaluation,
//! with reproducible artifacts on disk.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_f64, load_covariates, load_observations, SpatialDataset};
use crate::error::{Error, Result};
use crate::evaluate::{
    evaluate_model, make_block_holdouts, make_circular_holdouts, make_kfold, EvaluationConfig,
    HoldoutKind, HoldoutScheme, ModelScore, WeightingMethod,
};
use crate::evidence::{evidence_table, partition_posterior, scale_estimates, EvidenceMethod,
    LogMLEstimate, PartitionWeights};
use crate::inference::{
    run_chain_masked, segment_frames, ChainConfig, ChainDiagnostics, ModelState, PosteriorDraws,
    SegmentFrame, UpdateMask,
};
use crate::covariance::SegmentParams;
use crate::data::Location;
use crate::partition::{generate_candidates, Partition, PartitionSet};
use crate::predict::{sample_predictive, summarize, PredictionRequest};
use crate::rng::{stream, RngSeed};

/// Full pipeline settings. Every field has a default; the paper-anchored
/// ones are 20000 iterations, 10000 burn-in, no thinning, smoothness 0.5,
/// and the delta grid 0.1..0.9.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub observations: PathBuf,
    pub value_column: String,
    pub log_transform: bool,
    pub covariates: Option<PathBuf>,
    pub category_columns: Vec<String>,

    pub k_values: Vec<usize>,
    pub restarts: usize,
    pub max_keep: usize,

    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt_window: usize,
    pub target_accept_block: f64,
    pub target_accept_scalar: f64,
    pub nu: f64,

    pub deltas: Vec<f64>,
    /// Weighting method: "hm", "is1".."is9", or "aicm". BICM is reported in
    /// the evidence table but excluded from the weighting menu.
    pub evidence_method: String,

    pub grid_nx: usize,
    pub grid_ny: usize,
    pub pred_locations: Option<PathBuf>,
    pub n_draws: usize,
    pub include_nugget: bool,
    pub quantiles: Vec<f64>,
    pub write_predictive_draws: bool,

    pub evaluate: Option<EvaluateConfigSection>,

    pub seed: u64,
    pub output: PathBuf,
    pub jobs: Option<usize>,
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            observations: PathBuf::from("observations.csv"),
            value_column: "value".into(),
            log_transform: false,
            covariates: None,
            category_columns: Vec::new(),
            k_values: vec![2, 3, 4, 5, 6],
            restarts: 20,
            max_keep: 8,
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 1,
            adapt_window: 50,
            target_accept_block: 0.234,
            target_accept_scalar: 0.44,
            nu: 0.5,
            deltas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            evidence_method: "hm".into(),
            grid_nx: 40,
            grid_ny: 40,
            pred_locations: None,
            n_draws: 500,
            include_nugget: true,
            quantiles: vec![0.05, 0.5, 0.95],
            write_predictive_draws: false,
            evaluate: None,
            seed: 42,
            output: PathBuf::from("out"),
            jobs: None,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfigSection {
    /// Any of "kfold", "block", "circular".
    pub schemes: Vec<String>,
    pub kfold_k: usize,
    pub block_dlon: f64,
    pub block_dlat: f64,
    pub block_min_size: usize,
    pub circular_m: usize,
    pub circular_sets: usize,
    pub strict_refit: bool,
    /// Also score the single-segment stationary baseline.
    pub include_baseline: bool,
    pub n_draws: usize,
}

impl Default for EvaluateConfigSection {
    fn default() -> Self {
        EvaluateConfigSection {
            schemes: vec!["kfold".into()],
            kfold_k: 10,
            block_dlon: 3.3,
            block_dlat: 1.7,
            block_min_size: 5,
            circular_m: 29,
            circular_sets: 10,
            strict_refit: false,
            include_baseline: true,
            n_draws: 400,
        }
    }
}

impl PipelineConfig {
    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            adapt_window: self.adapt_window,
            target_accept_block: self.target_accept_block,
            target_accept_scalar: self.target_accept_scalar,
            seed: RngSeed::new(self.seed),
        }
    }

    pub fn weighting(&self) -> Result<WeightingMethod> {
        parse_weighting(&self.evidence_method)
    }

    /// Hash of the computation-relevant fields; output location, job count,
    /// and the resume flag do not change results.
    pub fn semantic_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.output = PathBuf::new();
        normalized.jobs = None;
        normalized.resume = false;
        let json = serde_json::to_string(&normalized).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.chain_config().validate()?;
        self.weighting()?;
        if self.k_values.is_empty() {
            return Err(Error::InvalidConfig("k_values must be nonempty".into()));
        }
        if self.n_draws == 0 {
            return Err(Error::InvalidConfig("n_draws must be >= 1".into()));
        }
        if self.pred_locations.is_none() && (self.grid_nx == 0 || self.grid_ny == 0) {
            return Err(Error::InvalidConfig("prediction grid must be nonempty".into()));
        }
        Ok(())
    }
}

pub fn parse_weighting(s: &str) -> Result<WeightingMethod> {
    match s.to_ascii_lowercase().as_str() {
        "hm" => Ok(WeightingMethod::HarmonicMean),
        "aicm" => Ok(WeightingMethod::Aicm),
        "bicm" => Err(Error::InvalidConfig(
            "bicm is reported in the evidence table but excluded from the weighting menu".into(),
        )),
        other => {
            if let Some(d) = other.strip_prefix("is") {
                if let Ok(i) = d.parse::<u32>() {
                    if (1..=9).contains(&i) {
                        return Ok(WeightingMethod::ImportanceSampling {
                            delta: i as f64 / 10.0,
                        });
                    }
                }
            }
            Err(Error::InvalidConfig(format!(
                "unknown evidence method `{other}` (expected hm, is1..is9, or aicm)"
            )))
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub seconds: f64,
    pub resumed: bool,
}

/// The run record: enough to reproduce every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageReport>,
    pub outputs: Vec<String>,
}

/// Per-partition sidecar so `--resume` can check compatibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrawsMeta {
    config_hash: String,
    partition_id: usize,
    k: usize,
    nu: f64,
    diagnostics: ChainDiagnostics,
}

/// Run partition -> fit -> evidence -> predict -> (evaluate), writing all
/// artifacts under the configured output directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest> {
    config.validate()?;
    match config.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
            pool.install(|| run_pipeline_inner(config))
        }
        None => run_pipeline_inner(config),
    }
}

fn run_pipeline_inner(config: &PipelineConfig) -> Result<Manifest> {
    let out = &config.output;
    fs::create_dir_all(out.join("draws")).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let hash = config.semantic_hash();
    let seed = RngSeed::new(config.seed);
    let mut stages = Vec::new();
    let mut outputs = Vec::new();

    // Stage: load.
    let t0 = Instant::now();
    let data = load_observations(
        &config.observations,
        &config.value_column,
        config.log_transform,
    )
    .map_err(|e| e.in_stage("load"))?;
    stages.push(StageReport {
        name: "load".into(),
        seconds: t0.elapsed().as_secs_f64(),
        resumed: false,
    });

    // Stage: partition.
    let t0 = Instant::now();
    let partitions = build_candidates(config, seed).map_err(|e| e.in_stage("partition"))?;
    let partitions_path = out.join("partitions.json");
    write_json(&partitions_path, &partitions)?;
    outputs.push(rel(out, &partitions_path));
    stages.push(StageReport {
        name: "partition".into(),
        seconds: t0.elapsed().as_secs_f64(),
        resumed: false,
    });

    // Stage: fit (resume-aware).
    let t0 = Instant::now();
    let mut resumed_fit = true;
    let fits: Vec<(PosteriorDraws, bool)> = partitions
        .partitions
        .par_iter()
        .map(|part| fit_partition(config, &data, part, seed, &hash, out))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("fit"))?;
    let mut draws_map: HashMap<usize, PosteriorDraws> = HashMap::new();
    for (part, fit) in partitions.partitions.iter().zip(fits) {
        resumed_fit &= fit.1;
        outputs.push(rel(out, &draws_csv_path(out, part.id)));
        outputs.push(rel(out, &draws_meta_path(out, part.id)));
        draws_map.insert(part.id, fit.0);
    }
    stages.push(StageReport {
        name: "fit".into(),
        seconds: t0.elapsed().as_secs_f64(),
        resumed: resumed_fit,
    });

    // Stage: evidence.
    let t0 = Instant::now();
    let (estimates, weights) =
        compute_evidence(config, &partitions, &draws_map, data.len()).map_err(|e| e.in_stage("evidence"))?;
    let evidence_csv = out.join("evidence.csv");
    write_evidence_csv(&evidence_csv, &estimates, &partitions, &weights)?;
    outputs.push(rel(out, &evidence_csv));
    let evidence_json = out.join("evidence.json");
    write_json(
        &evidence_json,
        &EvidenceReport::assemble(&estimates, &weights),
    )?;
    outputs.push(rel(out, &evidence_json));
    stages.push(StageReport {
        name: "evidence".into(),
        seconds: t0.elapsed().as_secs_f64(),
        resumed: false,
    });

    // Stage: predict.
    let t0 = Instant::now();
    let pred_locations = prediction_locations(config, &data)?;
    let request = PredictionRequest {
        locations: pred_locations,
        n_draws: config.n_draws,
        include_nugget: config.include_nugget,
    };
    let frames_map: HashMap<usize, Vec<SegmentFrame>> = partitions
        .partitions
        .iter()
        .map(|p| (p.id, segment_frames(p, &data)))
        .collect();
    let predictive = sample_predictive(
        &weights,
        &draws_map,
        &partitions.partitions,
        &frames_map,
        &data,
        &request,
        seed,
    )
    .map_err(|e| e.in_stage("predict"))?;
    let summary = summarize(&predictive, &config.quantiles);
    let predictions_path = out.join("predictions.csv");
    write_predictions_csv(&predictions_path, &request.locations, &summary, &config.quantiles)?;
    outputs.push(rel(out, &predictions_path));
    if config.write_predictive_draws {
        let p = out.join("predictive_draws.csv");
        write_draw_matrix_csv(&p, &predictive.draws, &predictive.partition_trace)?;
        outputs.push(rel(out, &p));
    }
    stages.push(StageReport {
        name: "predict".into(),
        seconds: t0.elapsed().as_secs_f64(),
        resumed: false,
    });

    // Stage: evaluate (optional).
    if let Some(eval) = &config.evaluate {
        let t0 = Instant::now();
        let table = run_evaluation(config, eval, &data, &partitions).map_err(|e| e.in_stage("evaluate"))?;
        let p = out.join("evaluation.csv");
        write_evaluation_csv(&p, &table)?;
        outputs.push(rel(out, &p));
        stages.push(StageReport {
            name: "evaluate".into(),
            seconds: t0.elapsed().as_secs_f64(),
            resumed: false,
        });
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config_hash: hash,
        config: config.clone(),
        stages,
        outputs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn rel(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

fn build_candidates(config: &PipelineConfig, seed: RngSeed) -> Result<PartitionSet> {
    match &config.covariates {
        Some(path) => {
            let table = load_covariates(path, &config.category_columns)?;
            generate_candidates(
                &table,
                &config.k_values,
                config.restarts,
                seed,
                config.max_keep,
            )
        }
        None => Ok(PartitionSet {
            partitions: vec![crate::synth::banded_partition(
                0,
                1,
                Location::new(0.0, 0.0),
                Location::new(1.0, 1.0),
            )],
        }),
    }
}

/// Fit one partition or reload it when resuming; returns (draws, resumed).
fn fit_partition(
    config: &PipelineConfig,
    data: &SpatialDataset,
    part: &Partition,
    seed: RngSeed,
    hash: &str,
    out: &Path,
) -> Result<(PosteriorDraws, bool)> {
    let csv_path = draws_csv_path(out, part.id);
    let meta_path = draws_meta_path(out, part.id);
    if config.resume && csv_path.exists() && meta_path.exists() {
        let meta: DrawsMeta = read_json(&meta_path)?;
        if meta.config_hash == hash && meta.partition_id == part.id {
            let draws = read_draws_csv(&csv_path, part.id, meta.k, meta.nu, meta.diagnostics)?;
            return Ok((draws, true));
        }
    }
    let mut chain = config.chain_config();
    chain.seed = seed.split(stream::CHAIN).split(part.id as u64);
    let mut init = crate::inference::default_initial_state(data, part.k());
    for p in &mut init.segments {
        p.nu = config.nu;
    }
    let draws = run_chain_masked(data, part, &chain, Some(init), UpdateMask::default())?;
    write_draws_csv(&csv_path, &draws)?;
    let meta = DrawsMeta {
        config_hash: hash.to_string(),
        partition_id: part.id,
        k: part.k(),
        nu: config.nu,
        diagnostics: draws.diagnostics.clone(),
    };
    write_json(&meta_path, &meta)?;
    Ok((draws, false))
}

fn compute_evidence(
    config: &PipelineConfig,
    partitions: &PartitionSet,
    draws_map: &HashMap<usize, PosteriorDraws>,
    n_obs: usize,
) -> Result<(Vec<LogMLEstimate>, PartitionWeights)> {
    let logliks: Vec<(usize, &[f64])> = partitions
        .partitions
        .iter()
        .map(|p| (p.id, draws_map[&p.id].loglik.as_slice()))
        .collect();
    let estimates = evidence_table(&logliks, n_obs, &config.deltas, 1e-8, 1000);

    let weighting = config.weighting()?;
    let method = match weighting {
        WeightingMethod::HarmonicMean => EvidenceMethod::HarmonicMean,
        WeightingMethod::ImportanceSampling { delta } => {
            EvidenceMethod::ImportanceSampling { delta }
        }
        WeightingMethod::Aicm => EvidenceMethod::Aicm,
    };
    let chosen: Vec<f64> = partitions
        .partitions
        .iter()
        .map(|p| {
            estimates
                .iter()
                .find(|e| e.partition_id == p.id && method_matches(&e.method, &method))
                .map(|e| e.value)
                .expect("estimate exists for every partition and menu method")
        })
        .collect();
    let weights = partition_posterior(&chosen, method)?;
    Ok((estimates, weights))
}

fn method_matches(a: &EvidenceMethod, b: &EvidenceMethod) -> bool {
    match (a, b) {
        (EvidenceMethod::HarmonicMean, EvidenceMethod::HarmonicMean) => true,
        (EvidenceMethod::Aicm, EvidenceMethod::Aicm) => true,
        (EvidenceMethod::Bicm, EvidenceMethod::Bicm) => true,
        (
            EvidenceMethod::ImportanceSampling { delta: x },
            EvidenceMethod::ImportanceSampling { delta: y },
        ) => (x - y).abs() < 1e-12,
        _ => false,
    }
}

fn prediction_locations(config: &PipelineConfig, data: &SpatialDataset) -> Result<Vec<Location>> {
    if let Some(path) = &config.pred_locations {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Csv {
                path: path.display().to_string(),
                source: e,
            })?
            .clone();
        let lon_idx = headers
            .iter()
            .position(|h| h == "lon")
            .ok_or_else(|| Error::MissingColumn {
                path: path.display().to_string(),
                column: "lon".into(),
            })?;
        let lat_idx = headers
            .iter()
            .position(|h| h == "lat")
            .ok_or_else(|| Error::MissingColumn {
                path: path.display().to_string(),
                column: "lat".into(),
            })?;
        let mut locs = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
            let lon: f64 = record
                .get(lon_idx)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::NonNumeric {
                    path: path.display().to_string(),
                    column: "lon".into(),
                    row,
                    value: record.get(lon_idx).unwrap_or("").into(),
                })?;
            let lat: f64 = record
                .get(lat_idx)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::NonNumeric {
                    path: path.display().to_string(),
                    column: "lat".into(),
                    row,
                    value: record.get(lat_idx).unwrap_or("").into(),
                })?;
            locs.push(Location::new(lon, lat));
        }
        if locs.is_empty() {
            return Err(Error::EmptyDataset("no prediction locations".into()));
        }
        Ok(locs)
    } else {
        let (lo, hi) = data.bounding_box();
        let nx = config.grid_nx;
        let ny = config.grid_ny;
        let mut locs = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let fx = if nx > 1 { i as f64 / (nx - 1) as f64 } else { 0.5 };
                let fy = if ny > 1 { j as f64 / (ny - 1) as f64 } else { 0.5 };
                locs.push(Location::new(
                    lo.lon + fx * (hi.lon - lo.lon),
                    lo.lat + fy * (hi.lat - lo.lat),
                ));
            }
        }
        Ok(locs)
    }
}

fn run_evaluation(
    config: &PipelineConfig,
    eval: &EvaluateConfigSection,
    data: &SpatialDataset,
    partitions: &PartitionSet,
) -> Result<Vec<(String, Vec<ModelScore>)>> {
    let seed = RngSeed::new(config.seed);
    let mut eval_config = EvaluationConfig::new(config.chain_config(), seed);
    eval_config.n_draws = eval.n_draws;
    eval_config.include_nugget = config.include_nugget;
    eval_config.weighting = config.weighting()?;
    eval_config.strict_refit = eval.strict_refit;
    if eval.strict_refit {
        if let Some(path) = &config.covariates {
            eval_config.refit_covariates = Some(load_covariates(path, &config.category_columns)?);
            eval_config.refit_k_values = config.k_values.clone();
            eval_config.refit_restarts = config.restarts;
            eval_config.refit_max_keep = config.max_keep;
        } else {
            return Err(Error::InvalidConfig(
                "strict_refit requires a covariate file".into(),
            ));
        }
    }

    let baseline = PartitionSet {
        partitions: vec![crate::synth::banded_partition(
            0,
            1,
            Location::new(0.0, 0.0),
            Location::new(1.0, 1.0),
        )],
    };

    let mut table = Vec::new();
    for scheme_name in &eval.schemes {
        let scheme: HoldoutScheme = match scheme_name.as_str() {
            "kfold" => make_kfold(data.len(), eval.kfold_k, seed)?,
            "block" => make_block_holdouts(
                &data.locations,
                eval.block_dlon,
                eval.block_dlat,
                eval.block_min_size,
            )?,
            "circular" => make_circular_holdouts(
                &data.locations,
                eval.circular_m,
                eval.circular_sets,
                seed,
            )?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown holdout scheme `{other}`"
                )))
            }
        };
        let mut rows = Vec::new();
        rows.push(evaluate_model(data, partitions, &scheme, &eval_config, "nsgp")?);
        if eval.include_baseline {
            let mut base_config = eval_config.clone();
            base_config.strict_refit = false;
            rows.push(evaluate_model(data, &baseline, &scheme, &base_config, "stationary")?);
        }
        table.push((scheme_name.clone(), rows));
    }
    Ok(table)
}

// ---------------------------------------------------------------------
// Artifact files
// ---------------------------------------------------------------------

fn draws_csv_path(out: &Path, id: usize) -> PathBuf {
    out.join("draws").join(format!("partition_{id}.csv"))
}

fn draws_meta_path(out: &Path, id: usize) -> PathBuf {
    out.join("draws").join(format!("partition_{id}_diagnostics.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Draws CSV: iteration, mu, per-segment parameter columns, loglik.
pub fn write_draws_csv(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let k = draws.states.first().map(|s| s.segments.len()).unwrap_or(0);
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut header = String::from("iteration,mu");
    for seg in 1..=k {
        for name in ["tau2", "sigma2", "phi1", "phi2", "eta"] {
            header.push_str(&format!(",seg{seg}_{name}"));
        }
    }
    header.push_str(",loglik\n");
    write_all(&mut file, path, header.as_bytes())?;
    for (t, (state, ll)) in draws.states.iter().zip(&draws.loglik).enumerate() {
        let mut line = format!("{t},{}", format_f64(state.mu));
        for p in &state.segments {
            for v in [p.tau2, p.sigma2, p.phi1, p.phi2, p.eta] {
                line.push(',');
                line.push_str(&format_f64(v));
            }
        }
        line.push(',');
        line.push_str(&format_f64(*ll));
        line.push('\n');
        write_all(&mut file, path, line.as_bytes())?;
    }
    Ok(())
}

fn write_all(file: &mut fs::File, path: &Path, bytes: &[u8]) -> Result<()> {
    file.write_all(bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_draws_csv(
    path: &Path,
    partition_id: usize,
    k: usize,
    nu: f64,
    diagnostics: ChainDiagnostics,
) -> Result<PosteriorDraws> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut states = Vec::new();
    let mut loglik = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let parse = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| Error::NonNumeric {
                    path: path.display().to_string(),
                    column: format!("column {idx}"),
                    row,
                    value: record.get(idx).unwrap_or("").into(),
                })
        };
        let mu = parse(1)?;
        let mut segments = Vec::with_capacity(k);
        for seg in 0..k {
            let base = 2 + seg * 5;
            segments.push(
                SegmentParams::new(
                    parse(base)?,
                    parse(base + 1)?,
                    parse(base + 2)?,
                    parse(base + 3)?,
                    parse(base + 4)?,
                )
                .with_nu(nu),
            );
        }
        states.push(ModelState { mu, segments });
        loglik.push(parse(2 + k * 5)?);
    }
    if states.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no draws in {}",
            path.display()
        )));
    }
    Ok(PosteriorDraws {
        states,
        loglik,
        partition_id,
        diagnostics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub rows: Vec<EvidenceRow>,
    pub weighting_method: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub partition_id: usize,
    pub method: String,
    pub log_ml: f64,
    pub scaled_log_ml: f64,
    pub converged: bool,
}

impl EvidenceReport {
    fn assemble(estimates: &[LogMLEstimate], weights: &PartitionWeights) -> EvidenceReport {
        // Scale each method's estimates across partitions.
        let mut by_method: HashMap<String, Vec<(usize, f64, bool)>> = HashMap::new();
        for e in estimates {
            by_method.entry(format!("{}", e.method)).or_default().push((
                e.partition_id,
                e.value,
                e.converged,
            ));
        }
        let mut rows = Vec::new();
        let mut methods: Vec<String> = by_method.keys().cloned().collect();
        methods.sort();
        for m in methods {
            let entries = &by_method[&m];
            let values: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let scaled = scale_estimates(&values);
            for ((pid, value, converged), s) in entries.iter().zip(scaled) {
                rows.push(EvidenceRow {
                    partition_id: *pid,
                    method: m.clone(),
                    log_ml: *value,
                    scaled_log_ml: s,
                    converged: *converged,
                });
            }
        }
        EvidenceReport {
            rows,
            weighting_method: format!("{}", weights.method),
            probabilities: weights.probabilities.clone(),
        }
    }
}

fn write_evidence_csv(
    path: &Path,
    estimates: &[LogMLEstimate],
    partitions: &PartitionSet,
    weights: &PartitionWeights,
) -> Result<()> {
    let report = EvidenceReport::assemble(estimates, weights);
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    write_all(
        &mut file,
        path,
        b"partition_id,method,log_ml,scaled_log_ml,converged,probability\n",
    )?;
    let prob_of = |pid: usize| -> f64 {
        partitions
            .partitions
            .iter()
            .position(|p| p.id == pid)
            .map(|i| weights.probabilities[i])
            .unwrap_or(0.0)
    };
    for row in &report.rows {
        let is_weighting = row.method == report.weighting_method;
        let line = format!(
            "{},{},{},{},{},{}\n",
            row.partition_id,
            row.method,
            format_f64(row.log_ml),
            format_f64(row.scaled_log_ml),
            row.converged,
            if is_weighting {
                format_f64(prob_of(row.partition_id))
            } else {
                String::new()
            }
        );
        write_all(&mut file, path, line.as_bytes())?;
    }
    Ok(())
}

fn write_predictions_csv(
    path: &Path,
    locations: &[Location],
    summary: &crate::predict::PredictionSummary,
    quantiles: &[f64],
) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut header = String::from("lon,lat,mean,sd");
    for q in quantiles {
        header.push_str(&format!(",q{:02}", (q * 100.0).round() as u32));
    }
    header.push('\n');
    write_all(&mut file, path, header.as_bytes())?;
    for (i, loc) in locations.iter().enumerate() {
        let mut line = format!(
            "{},{},{},{}",
            format_f64(loc.lon),
            format_f64(loc.lat),
            format_f64(summary.mean[i]),
            format_f64(summary.sd[i])
        );
        for (_, vals) in &summary.quantiles {
            line.push(',');
            line.push_str(&format_f64(vals[i]));
        }
        line.push('\n');
        write_all(&mut file, path, line.as_bytes())?;
    }
    Ok(())
}

fn write_draw_matrix_csv(path: &Path, draws: &[Vec<f64>], trace: &[usize]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    write_all(&mut file, path, b"draw,partition_id,values...\n")?;
    for (t, (row, pid)) in draws.iter().zip(trace).enumerate() {
        let mut line = format!("{t},{pid}");
        for v in row {
            line.push(',');
            line.push_str(&format_f64(*v));
        }
        line.push('\n');
        write_all(&mut file, path, line.as_bytes())?;
    }
    Ok(())
}

fn write_evaluation_csv(path: &Path, table: &[(String, Vec<ModelScore>)]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    // Rows = models, columns = schemes.
    let mut models: Vec<String> = Vec::new();
    for (_, rows) in table {
        for r in rows {
            if !models.contains(&r.model) {
                models.push(r.model.clone());
            }
        }
    }
    let mut header = String::from("model");
    for (scheme, _) in table {
        header.push(',');
        header.push_str(scheme);
    }
    header.push('\n');
    write_all(&mut file, path, header.as_bytes())?;
    for model in &models {
        let mut line = model.clone();
        for (_, rows) in table {
            line.push(',');
            if let Some(r) = rows.iter().find(|r| &r.model == model) {
                line.push_str(&format_f64(r.mean));
            }
        }
        line.push('\n');
        write_all(&mut file, path, line.as_bytes())?;
    }
    Ok(())
}

// Re-export for the CLI's variogram and holdout subcommands.
pub use crate::evaluate::ScoreTable;
