//! Coreset selection by cross-modal similarity rank.
//!
//! Each pair's self-similarity (cosine of its own image and text embeddings)
//! is ranked against the similarities between its image and a seeded sample
//! of distractor texts. A pair is kept when its rank is within the
//! threshold. The same operation serves both the pretraining-set filter
//! (threshold 50) and the looser fine-tuning-set filter (threshold 1800).

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embio::{EmbeddingMatrix, ManifestEntry};
use crate::error::{Error, Result};
use crate::linalg::{self, NormedRows};

pub const DEFAULT_RANK_THRESHOLD: usize = 50;
pub const FINETUNE_RANK_THRESHOLD: usize = 1800;
pub const DEFAULT_DISTRACTOR_COUNT: usize = 10_000;
pub const HISTOGRAM_BUCKETS: usize = 32;

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub image_embeddings: EmbeddingMatrix,
    pub text_embeddings: EmbeddingMatrix,
    pub pair_ids: Vec<String>,
}

impl PairedDataset {
    /// Pairs row `i` of `images` with row `i` of `texts`; pair ids are taken
    /// from the image ids.
    pub fn new(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> Result<Self> {
        let ids = images.ids().to_vec();
        Self::with_ids(images, texts, ids)
    }

    pub fn with_ids(images: EmbeddingMatrix, texts: EmbeddingMatrix, pair_ids: Vec<String>) -> Result<Self> {
        if images.rows() != texts.rows() || images.rows() != pair_ids.len() {
            return Err(Error::shape(
                "paired dataset rows",
                format!("{} images / {} ids", images.rows(), pair_ids.len()),
                format!("{} texts", texts.rows()),
            ));
        }
        if images.dim() != texts.dim() {
            return Err(Error::shape("paired dataset dims", images.dim(), texts.dim()));
        }
        Ok(Self {
            image_embeddings: images,
            text_embeddings: texts,
            pair_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.image_embeddings.dim()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            image_embeddings: self.image_embeddings.select_rows(indices),
            text_embeddings: self.text_embeddings.select_rows(indices),
            pair_ids: indices.iter().map(|&i| self.pair_ids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistractorPool {
    pub embeddings: EmbeddingMatrix,
    pub source_tag: String,
}

impl DistractorPool {
    pub fn new(embeddings: EmbeddingMatrix, source_tag: impl Into<String>) -> Self {
        Self {
            embeddings,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub rank_threshold: usize,
    pub distractor_count: usize,
    pub seed: u64,
    /// One distractor sample for every pair, instead of one per pair.
    pub shared_sample: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            distractor_count: DEFAULT_DISTRACTOR_COUNT,
            seed: 0,
            shared_sample: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.rank_threshold == 0 {
            return Err(Error::Config("rank_threshold must be >= 1".into()));
        }
        if self.distractor_count == 0 || self.distractor_count > pool_size {
            return Err(Error::Config(format!(
                "distractor_count {} must be in [1, {pool_size}] (pool size)",
                self.distractor_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub self_sim: f64,
    /// 1-based.
    pub rank: usize,
    pub max_distractor_sim: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub records: Vec<PairRecord>,
    pub retained: usize,
    pub total: usize,
    pub retention_rate: f64,
    pub config: FilterConfig,
    pub zero_vector_warnings: usize,
}

/// The JSON report written next to a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub retained: usize,
    pub total: usize,
    pub retention_rate: f64,
    pub config: FilterConfig,
    pub zero_vector_warnings: usize,
    pub histogram: Vec<HistogramBucket>,
}

impl FilterReport {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kept)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rank counts in log-spaced buckets spanning `[1, distractor_count + 1]`.
    pub fn rank_histogram(&self) -> Vec<HistogramBucket> {
        let max_rank = (self.config.distractor_count + 1) as f64;
        let edge = |k: usize| max_rank.powf(k as f64 / HISTOGRAM_BUCKETS as f64);
        let mut buckets: Vec<HistogramBucket> = (0..HISTOGRAM_BUCKETS)
            .map(|k| HistogramBucket {
                lower: edge(k),
                upper: edge(k + 1),
                count: 0,
            })
            .collect();
        let log_max = max_rank.ln();
        for r in &self.records {
            let k = if log_max > 0.0 {
                ((r.rank as f64).ln() / log_max * HISTOGRAM_BUCKETS as f64) as usize
            } else {
                0
            };
            buckets[k.min(HISTOGRAM_BUCKETS - 1)].count += 1;
        }
        buckets
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            retained: self.retained,
            total: self.total,
            retention_rate: self.retention_rate,
            config: self.config,
            zero_vector_warnings: self.zero_vector_warnings,
            histogram: self.rank_histogram(),
        }
    }
}

/// SplitMix64 output function, used to derive per-pair seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(cfg: &FilterConfig, pair_index: usize) -> u64 {
    if cfg.shared_sample {
        cfg.seed
    } else {
        mix64(cfg.seed ^ mix64(pair_index as u64))
    }
}

/// Distinct pool indices for one pair, drawn without replacement by a
/// partial Fisher-Yates shuffle over a xoshiro256++ stream.
pub fn sample_distractors(pool_size: usize, cfg: &FilterConfig, pair_index: usize) -> Result<Vec<usize>> {
    cfg.validate(pool_size)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(sample_seed(cfg, pair_index));
    let mut idx: Vec<usize> = (0..pool_size).collect();
    for i in 0..cfg.distractor_count {
        // u64 bounds keep the stream identical on 32- and 64-bit targets.
        let j = rng.random_range(i as u64..pool_size as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(cfg.distractor_count);
    Ok(idx)
}

/// `1 + #{d > self_sim}`; ties count in the pair's favor.
pub fn rank_pair(self_sim: f64, distractor_sims: &[f64]) -> usize {
    1 + distractor_sims.iter().filter(|&&d| d > self_sim).count()
}

pub fn filter_dataset(data: &PairedDataset, pool: &DistractorPool, cfg: &FilterConfig) -> Result<FilterReport> {
    if data.is_empty() {
        return Err(Error::Config("cannot filter an empty dataset".into()));
    }
    if pool.embeddings.dim() != data.dim() {
        return Err(Error::shape("distractor pool dim", pool.embeddings.dim(), data.dim()));
    }
    cfg.validate(pool.len())?;

    let images = data.image_embeddings.matrix();
    let texts = data.text_embeddings.matrix();
    let pool_rows = NormedRows::new(pool.embeddings.matrix());
    let shared = if cfg.shared_sample {
        Some(sample_distractors(pool.len(), cfg, 0)?)
    } else {
        None
    };

    let records = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<PairRecord> {
            let owned;
            let sample = match &shared {
                Some(s) => s,
                None => {
                    owned = sample_distractors(pool.len(), cfg, i)?;
                    &owned
                }
            };
            let img = images.row(i);
            let img_norm = linalg::norm(img);
            let self_sim = linalg::cosine_similarity(img, texts.row(i))?;
            let sims: Vec<f64> = sample.iter().map(|&p| pool_rows.cosine(img, img_norm, p)).collect();
            let rank = rank_pair(self_sim, &sims);
            Ok(PairRecord {
                pair_id: data.pair_ids[i].clone(),
                self_sim,
                rank,
                max_distractor_sim: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                kept: rank <= cfg.rank_threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let zero_rows = |m: &crate::linalg::Matrix| (0..m.rows()).filter(|&r| linalg::norm(m.row(r)) == 0.0).count();
    let zero_vector_warnings = zero_rows(images) + zero_rows(texts) + pool_rows.zero_rows();

    let retained = records.iter().filter(|r| r.kept).count();
    let total = records.len();
    Ok(FilterReport {
        records,
        retained,
        total,
        retention_rate: retained as f64 / total as f64,
        config: *cfg,
        zero_vector_warnings,
    })
}

/// Manifest entries for the retained pairs, in input order.
pub fn emit_manifest(report: &FilterReport, data: &PairedDataset) -> Result<Vec<ManifestEntry>> {
    if report.total != data.len() {
        return Err(Error::shape("manifest report", report.total, data.len()));
    }
    Ok(report
        .records
        .iter()
        .filter(|r| r.kept)
        .map(|r| ManifestEntry {
            pair_id: r.pair_id.clone(),
            self_sim: r.self_sim,
            rank: r.rank,
        })
        .collect())
}
