//! Re-identification metrics (CMC rank-k, mAP) and the WC/BC overlap
//! diagnostic.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::Backbone;
use crate::data::{all_features, Sample};
use crate::dissimilarity::{bin_counts, distance_values, HISTOGRAM_BINS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Drop gallery items that share both identity and camera with the query.
    pub same_camera_filter: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            same_camera_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    /// WC/BC histogram overlap of the evaluated embeddings, grouped by identity.
    pub overlap: Option<f64>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rank1 = {}", self.rank1);
        let _ = writeln!(out, "rank5 = {}", self.rank5);
        let _ = writeln!(out, "rank10 = {}", self.rank10);
        let _ = writeln!(out, "map = {}", self.map);
        if let Some(o) = self.overlap {
            let _ = writeln!(out, "overlap = {o}");
        }
        let _ = writeln!(out, "queries = {}", self.per_query_ap.len());
        let aps: Vec<String> = self.per_query_ap.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "query_ap = {}", aps.join(","));
        out
    }
}

/// Average precision of a ranked relevance list: the mean of precision@k
/// over the ranks `k` holding a true match.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks each query's gallery by ascending Euclidean distance (ties by
/// gallery index) and scores the rankings.
pub fn evaluate_embeddings(
    query_emb: &Tensor,
    query: &[Sample],
    gallery_emb: &Tensor,
    gallery: &[Sample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Input("gallery is empty".into()));
    }
    if query.is_empty() {
        return Err(Error::Input("no queries".into()));
    }
    if query_emb.rows() != query.len() || gallery_emb.rows() != gallery.len() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{} query / {} gallery embeddings for {} / {} samples",
                query_emb.rows(),
                gallery_emb.rows(),
                query.len(),
                gallery.len()
            ),
        ));
    }
    if query_emb.cols() != gallery_emb.cols() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "query width {} vs gallery width {}",
                query_emb.cols(),
                gallery_emb.cols()
            ),
        ));
    }

    let mut hits = [0usize; 3];
    let mut aps = Vec::with_capacity(query.len());
    for (qi, q) in query.iter().enumerate() {
        let qrow = query_emb.row(qi);
        let mut order: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .filter(|(_, s)| !(config.same_camera_filter && s.identity == q.identity && s.camera == q.camera))
            .map(|(gi, _)| (gi, squared_distance(qrow, gallery_emb.row(gi))))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let relevant: Vec<bool> = order
            .iter()
            .map(|&(gi, _)| gallery[gi].identity == q.identity)
            .collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            return Err(Error::Input(format!(
                "query identity {} has no match in the gallery",
                q.identity
            )));
        };
        for (slot, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first < k {
                *slot += 1;
            }
        }
        aps.push(average_precision(&relevant));
    }
    let n = query.len() as f64;
    Ok(EvalReport {
        rank1: hits[0] as f64 / n,
        rank5: hits[1] as f64 / n,
        rank10: hits[2] as f64 / n,
        map: aps.iter().sum::<f64>() / n,
        per_query_ap: aps,
        overlap: None,
    })
}

/// Scores the query/gallery embeddings of `backbone`, then adds the WC/BC
/// overlap of the pooled embeddings grouped by identity.
pub fn evaluate(backbone: &Backbone, query: &[Sample], gallery: &[Sample], config: &EvalConfig) -> Result<EvalReport> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Input("query and gallery must be nonempty".into()));
    }
    let q = backbone.embed_batch(&all_features(query)?)?;
    let g = backbone.embed_batch(&all_features(gallery)?)?;
    let mut report = evaluate_embeddings(&q, query, &g, gallery, config)?;

    let pooled: Vec<Sample> = query.iter().chain(gallery).cloned().collect();
    let emb = Tensor::matrix(
        pooled.len(),
        q.cols(),
        q.data().iter().chain(g.data()).copied().collect(),
    )?;
    let ids: Vec<u32> = pooled.iter().map(|s| s.identity).collect();
    let (wc, bc) = distance_values(&emb, &ids);
    report.overlap = Some(overlap_coefficient(&wc, &bc)?);
    Ok(report)
}

/// Histogram intersection `Σ min(p_wc, p_bc)` of the two distance samples on
/// a shared grid of equal-width bins over `[0, max]`.
pub fn overlap_coefficient(wc: &[f64], bc: &[f64]) -> Result<f64> {
    if wc.is_empty() || bc.is_empty() {
        return Err(Error::Input("overlap needs two nonempty distance samples".into()));
    }
    if let Some(bad) = wc.iter().chain(bc).find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("distances must be finite and ≥ 0, got {bad}")));
    }
    let max = wc.iter().chain(bc).copied().fold(0.0, f64::max);
    let upper = if max > 0.0 { max } else { 1.0 };
    let cw = bin_counts(wc, upper, HISTOGRAM_BINS);
    let cb = bin_counts(bc, upper, HISTOGRAM_BINS);
    let (nw, nb) = (wc.len() as f64, bc.len() as f64);
    let overlap: f64 = cw
        .iter()
        .zip(&cb)
        .map(|(&a, &b)| (a as f64 / nw).min(b as f64 / nb))
        .sum();
    Ok(overlap.min(1.0))
}
