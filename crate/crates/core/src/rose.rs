//! Layer-wise normalisation of Fisher scores and their aggregation.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::ImageDataset;
use crate::fisher::{fit, FisherArtifact, FisherError, FisherMethod, ModelGradients, RELATIVE_DAMPING};
use crate::formats::{model_fingerprint, weights_checksum};
use crate::tensor::{Rng, Scalar};
use crate::vae::{VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum RoseError {
    #[error("calibration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("expected {expected} layer scores, got {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Fisher artifact was fitted on model {artifact:016x} but the model fingerprint is {model:016x}")]
    Fingerprint { artifact: u64, model: u64 },
    #[error("Fisher artifact was fitted on weights {artifact:016x} but the model weights checksum is {model:016x}")]
    Weights { artifact: u64, model: u64 },
    #[error("{requested} samples requested but the dataset holds {available}")]
    Undersized { requested: usize, available: usize },
    #[error("Fisher artifact has no calibration statistics")]
    Uncalibrated,
    #[error("non-finite {what} for sample {id}")]
    NonFinite { what: &'static str, id: usize },
    #[error("malformed score table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

pub type Result<T, E = RoseError> = std::result::Result<T, E>;

/// Relative threshold below which a layer's spread is treated as zero.
pub const DEGENERATE_SIGMA_REL: f64 = 1e-12;

/// Per-layer mean and population standard deviation of calibration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_samples: usize,
}

impl LayerStats {
    pub fn num_layers(&self) -> usize {
        self.mu.len()
    }

    /// Layers whose spread carries no ranking information; their normalised
    /// score is pinned to 0.
    pub fn is_degenerate(&self, layer: usize) -> bool {
        let (mu, sigma) = (self.mu[layer], self.sigma[layer]);
        !(sigma > DEGENERATE_SIGMA_REL * mu.abs()) || sigma < f64::MIN_POSITIVE
    }

    /// `ŝˡ = (sˡ − μˡ) / σˡ`.
    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.mu.len() {
            return Err(RoseError::LayerCount { expected: self.mu.len(), found: raw.len() });
        }
        Ok(raw
            .iter()
            .enumerate()
            .map(|(l, &s)| if self.is_degenerate(l) { 0.0 } else { (s - self.mu[l]) / self.sigma[l] })
            .collect())
    }
}

/// Per-layer statistics of a `[samples][layers]` score matrix.
pub fn calibrate(raw: &[Vec<f64>]) -> Result<LayerStats> {
    if raw.len() < 2 {
        return Err(RoseError::TooFewSamples(raw.len()));
    }
    let layers = raw[0].len();
    let mut mean = vec![0.0; layers];
    let mut m2 = vec![0.0; layers];
    for (n, row) in raw.iter().enumerate() {
        if row.len() != layers {
            return Err(RoseError::LayerCount { expected: layers, found: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(RoseError::NonFinite { what: "calibration score", id: n });
        }
        let count = (n + 1) as f64;
        for l in 0..layers {
            let delta = row[l] - mean[l];
            mean[l] += delta / count;
            m2[l] += delta * (row[l] - mean[l]);
        }
    }
    let sigma = m2.iter().map(|v| (v / raw.len() as f64).max(0.0).sqrt()).collect();
    let stats = LayerStats { mu: mean, sigma, n_samples: raw.len() };
    for l in 0..layers {
        if stats.is_degenerate(l) {
            log::warn!(
                "layer {} has degenerate spread (mu {}, sigma {}); its normalised score is fixed at 0",
                l + 1,
                stats.mu[l],
                stats.sigma[l]
            );
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoseConfig {
    /// Per-layer offsets; empty means all zero.
    pub beta: Vec<f64>,
    /// Norm order `p ≥ 1`; `f64::INFINITY` for the max norm.
    pub p: f64,
}

impl Default for RoseConfig {
    fn default() -> Self {
        Self { beta: Vec::new(), p: f64::INFINITY }
    }
}

impl RoseConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(RoseError::Config(format!("p must be at least 1, got {}", self.p)));
        }
        if !self.beta.is_empty() && self.beta.len() != layers {
            return Err(RoseError::LayerCount { expected: layers, found: self.beta.len() });
        }
        Ok(())
    }

    fn beta(&self, l: usize) -> f64 {
        self.beta.get(l).copied().unwrap_or(0.0)
    }
}

/// `‖ReLU(ŝ + β)‖_p` of already normalised scores.
pub fn aggregate(s_hat: &[f64], cfg: &RoseConfig) -> Result<f64> {
    cfg.validate(s_hat.len())?;
    let act = s_hat.iter().enumerate().map(|(l, &s)| (s + cfg.beta(l)).max(0.0));
    Ok(if cfg.p.is_infinite() {
        act.fold(0.0, f64::max)
    } else if cfg.p == 1.0 {
        act.sum()
    } else {
        act.map(|v| v.powf(cfg.p)).sum::<f64>().powf(1.0 / cfg.p)
    })
}

pub fn rose_score(raw: &[f64], stats: &LayerStats, cfg: &RoseConfig) -> Result<f64> {
    aggregate(&stats.normalize(raw)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: usize,
    pub raw: Vec<f64>,
    pub hat: Vec<f64>,
    pub rose: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn num_layers(&self) -> usize {
        self.rows.first().map_or(0, |r| r.raw.len())
    }

    pub fn rose(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rose).collect()
    }

    pub fn nll(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.nll).collect()
    }

    pub fn raw_column(&self, l: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.raw[l]).collect()
    }

    pub fn hat_column(&self, l: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.hat[l]).collect()
    }

    pub fn header(layers: usize) -> String {
        let mut cols = vec!["id".to_string()];
        cols.extend((1..=layers).map(|l| format!("s_raw_{l}")));
        cols.extend((1..=layers).map(|l| format!("s_hat_{l}")));
        cols.push("rose".into());
        cols.push("nll".into());
        cols.join(",")
    }

    /// CSV with 17 significant digits, which round-trips `f64` exactly.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", Self::header(self.num_layers()))?;
        for r in &self.rows {
            let mut line = r.id.to_string();
            for v in r.raw.iter().chain(&r.hat).chain([&r.rose, &r.nll]) {
                line.push(',');
                line.push_str(&format!("{v:.16e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(RoseError::Parse { line: 1, reason: "empty file".into() })??;
        let cols = header.trim().split(',').count();
        if cols < 5 || (cols - 3) % 2 != 0 {
            return Err(RoseError::Parse { line: 1, reason: format!("{cols} columns cannot be id,2L scores,rose,nll") });
        }
        let layers = (cols - 3) / 2;
        if header.trim() != Self::header(layers) {
            return Err(RoseError::Parse { line: 1, reason: format!("unexpected header `{}`", header.trim()) });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols {
                return Err(RoseError::Parse { line: line_no, reason: format!("{} fields, expected {cols}", fields.len()) });
            }
            let id = fields[0]
                .parse()
                .map_err(|e| RoseError::Parse { line: line_no, reason: format!("id: {e}") })?;
            let vals = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| RoseError::Parse { line: line_no, reason: e.to_string() })?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(RoseError::Parse { line: line_no, reason: "non-finite value".into() });
            }
            rows.push(ScoreRow {
                id,
                raw: vals[..layers].to_vec(),
                hat: vals[layers..2 * layers].to_vec(),
                rose: vals[2 * layers],
                nll: vals[2 * layers + 1],
            });
        }
        Ok(Self { rows })
    }
}

/// Scoring hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub rose: RoseConfig,
    /// Importance samples for the score gradient.
    pub k: usize,
    /// Importance samples for the NLL column.
    pub nll_k: usize,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { rose: RoseConfig::default(), k: 1, nll_k: 20, seed: 0 }
    }
}

/// Offset separating the NLL noise streams from the gradient streams.
const NLL_SEED_OFFSET: u64 = 0x6e6c_6c00;

const SCORE_BATCH: usize = 32;

/// Raw per-layer scores for `indices` of `data`, in input order.
pub fn raw_scores<T: Scalar>(
    model: &VaeModel<T>,
    artifact: &FisherArtifact,
    data: &ImageDataset,
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let source = ModelGradients::new(model, data, Vec::new(), k, seed);
    let chunks = indices
        .par_chunks(SCORE_BATCH)
        .map(|idx| -> Result<Vec<Vec<f64>>> {
            let sets = source.batch(idx)?;
            sets.iter().map(|s| Ok(artifact.layer_scores(s)?)).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Fisher fitting and calibration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub method: FisherMethod,
    pub n_samples: usize,
    pub damping_rel: f64,
    pub k: usize,
    pub seed: u64,
    /// Calibrate on this many further samples, disjoint from the Fisher
    /// samples, instead of reusing them.
    pub holdout: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { method: FisherMethod::Ekfac, n_samples: 2000, damping_rel: RELATIVE_DAMPING, k: 1, seed: 0, holdout: None }
    }
}

/// Fits the Fisher factors of the selected layers on a seeded random subset
/// of `data` and calibrates the per-layer statistics.
pub fn fit_artifact<T: Scalar>(model: &VaeModel<T>, data: &ImageDataset, cfg: &FitConfig) -> Result<FisherArtifact> {
    let extra = cfg.holdout.unwrap_or(0);
    let requested = cfg.n_samples + extra;
    if cfg.n_samples == 0 || requested > data.len() {
        return Err(RoseError::Undersized { requested, available: data.len() });
    }
    if cfg.k == 0 {
        return Err(RoseError::Config("k must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(cfg.seed).shuffle(&mut order);
    let fisher_idx = order[..cfg.n_samples].to_vec();
    let calib_idx = match cfg.holdout {
        Some(m) => order[cfg.n_samples..cfg.n_samples + m].to_vec(),
        None => fisher_idx.clone(),
    };
    let mut stream = ModelGradients::new(model, data, fisher_idx, cfg.k, cfg.seed);
    let layers = fit(cfg.method, &mut stream, cfg.damping_rel)?;
    let mut artifact = FisherArtifact {
        method: cfg.method,
        layer_names: model.selected_layers().iter().map(|&r| model.layer_name(r)).collect(),
        layers,
        model_fingerprint: model_fingerprint(model),
        weights_checksum: weights_checksum(model),
        stats: None,
    };
    let raw = raw_scores(model, &artifact, data, &calib_idx, cfg.k, cfg.seed)?;
    artifact.stats = Some(calibrate(&raw)?);
    Ok(artifact)
}

/// Scores every sample of `data`: one backward pass each for the layer
/// scores, plus a forward-only importance-weighted NLL.
pub fn score_pipeline<T: Scalar>(
    model: &VaeModel<T>,
    artifact: &FisherArtifact,
    data: &ImageDataset,
    cfg: &ScoreConfig,
) -> Result<ScoreTable> {
    let fp = model_fingerprint(model);
    if fp != artifact.model_fingerprint {
        return Err(RoseError::Fingerprint { artifact: artifact.model_fingerprint, model: fp });
    }
    let wc = weights_checksum(model);
    if wc != artifact.weights_checksum {
        return Err(RoseError::Weights { artifact: artifact.weights_checksum, model: wc });
    }
    let stats = artifact.stats.as_ref().ok_or(RoseError::Uncalibrated)?;
    let layers = artifact.num_layers();
    if stats.num_layers() != layers {
        return Err(RoseError::LayerCount { expected: layers, found: stats.num_layers() });
    }
    cfg.rose.validate(layers)?;
    if cfg.k == 0 || cfg.nll_k == 0 {
        return Err(RoseError::Config("k and nll_k must be at least 1".into()));
    }

    let indices: Vec<usize> = (0..data.len()).collect();
    let source = ModelGradients::new(model, data, Vec::new(), cfg.k, cfg.seed);
    let chunks = indices
        .par_chunks(SCORE_BATCH)
        .map(|idx| -> Result<Vec<ScoreRow>> {
            let sets = source.batch(idx)?;
            let x = data.batch(idx).cast::<T>();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let eps = model.draw_noise(cfg.seed.wrapping_add(NLL_SEED_OFFSET), &ids, cfg.nll_k);
            let nll = model.iwae_nll_with_noise(&x, &eps)?;
            idx.iter()
                .zip(&sets)
                .zip(nll)
                .map(|((&id, set), nll)| {
                    let raw = artifact.layer_scores(set)?;
                    if raw.iter().any(|v| !v.is_finite()) {
                        return Err(RoseError::NonFinite { what: "layer score", id });
                    }
                    let hat = stats.normalize(&raw)?;
                    let rose = aggregate(&hat, &cfg.rose)?;
                    Ok(ScoreRow { id, raw, hat, rose, nll })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable { rows: chunks.into_iter().flatten().collect() })
}
