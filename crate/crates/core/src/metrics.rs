//! Recall@K and mean average precision over ranked retrieval results.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{top_k_indices, NormedRows};

/// Candidate list length used by [`build_rankings`] unless overridden.
pub const DEFAULT_CANDIDATES: usize = 128;
pub const EVAL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRanking {
    pub query_id: String,
    /// Gallery indices, best first.
    pub ranked_gallery: Vec<usize>,
    pub relevant: BTreeSet<usize>,
    /// Size of the gallery the candidates were drawn from.
    pub gallery_size: usize,
}

impl RetrievalRanking {
    /// A ranking over the whole gallery.
    pub fn full(query_id: impl Into<String>, ranked_gallery: Vec<usize>, relevant: BTreeSet<usize>) -> Self {
        let gallery_size = ranked_gallery.len();
        Self {
            query_id: query_id.into(),
            ranked_gallery,
            relevant,
            gallery_size,
        }
    }

    fn is_truncated(&self) -> bool {
        self.ranked_gallery.len() < self.gallery_size
    }

    /// 1-based position of the first relevant item, if it was ranked.
    pub fn first_hit(&self) -> Option<usize> {
        self.ranked_gallery
            .iter()
            .position(|g| self.relevant.contains(g))
            .map(|p| p + 1)
    }
}

fn check_k(rankings: &[RetrievalRanking], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Config("no rankings to evaluate".into()));
    }
    if let Some(r) = rankings.iter().find(|r| r.is_truncated() && k > r.ranked_gallery.len()) {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} candidates kept for query `{}`",
            r.ranked_gallery.len(),
            r.query_id
        )));
    }
    Ok(())
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(rankings: &[RetrievalRanking], k: usize) -> Result<f64> {
    check_k(rankings, k)?;
    let hits = rankings
        .iter()
        .filter(|r| r.first_hit().is_some_and(|p| p <= k))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Sum over relevant hit positions `p` of `hits(<= p) / p`, divided by the
/// number of relevant items. Relevant items missing from a truncated
/// candidate list contribute zero.
pub fn average_precision(r: &RetrievalRanking) -> Result<f64> {
    if r.relevant.is_empty() {
        return Err(Error::Config(format!("query `{}` has no relevant items", r.query_id)));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, g) in r.ranked_gallery.iter().enumerate() {
        if r.relevant.contains(g) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / r.relevant.len() as f64)
}

/// Mean of per-query average precision.
pub fn mean_average_precision(rankings: &[RetrievalRanking]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Config("no rankings to evaluate".into()));
    }
    let aps = rankings.iter().map(average_precision).collect::<Result<Vec<_>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Ranks the gallery for every query by cosine similarity and keeps the top
/// `k_candidates`. `relevance[q]` lists the gallery rows relevant to query `q`.
pub fn build_rankings(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    relevance: &[BTreeSet<usize>],
    k_candidates: usize,
) -> Result<Vec<RetrievalRanking>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::shape("build_rankings dims", queries.dim(), gallery.dim()));
    }
    if relevance.len() != queries.rows() {
        return Err(Error::shape("build_rankings relevance", relevance.len(), queries.rows()));
    }
    if k_candidates == 0 {
        return Err(Error::Config("k_candidates must be >= 1".into()));
    }
    if let Some(bad) = relevance.iter().flatten().find(|&&g| g >= gallery.rows()) {
        return Err(Error::Config(format!("relevant index {bad} outside gallery of {}", gallery.rows())));
    }
    let rows = NormedRows::new(gallery.matrix());
    (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let scores = rows.cosine_all(queries.matrix().row(q))?;
            Ok(RetrievalRanking {
                query_id: queries.ids()[q].clone(),
                ranked_gallery: top_k_indices(&scores, k_candidates),
                relevant: relevance[q].clone(),
                gallery_size: gallery.rows(),
            })
        })
        .collect()
}

/// Relevance by id equality: query `q` matches every gallery row whose id
/// equals the query's id.
pub fn relevance_by_id(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Vec<BTreeSet<usize>> {
    let mut by_id: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (i, id) in gallery.ids().iter().enumerate() {
        by_id.entry(id.as_str()).or_default().insert(i);
    }
    queries
        .ids()
        .iter()
        .map(|id| by_id.get(id.as_str()).cloned().unwrap_or_default())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub recall: BTreeMap<usize, f64>,
    pub map: f64,
    pub queries: usize,
}

pub fn evaluate(rankings: &[RetrievalRanking], ks: &[usize]) -> Result<EvalSummary> {
    let recall = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(rankings, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalSummary {
        recall,
        map: mean_average_precision(rankings)?,
        queries: rankings.len(),
    })
}
