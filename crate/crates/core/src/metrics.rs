//! Gallery ranking, CMC / Rank-k / mAP retrieval metrics and classification
//! accuracy.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no queries")]
    NoQueries,
    #[error("query label {0} does not occur in the gallery")]
    QueryLabelAbsent(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Similarity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "euclidean" => Ok(Similarity::Euclidean),
            other => Err(format!("unknown similarity {other:?}")),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gallery indices from best to worst match. Cosine ranks by descending
/// similarity (zero vectors score 0), Euclidean by ascending distance. Ties
/// go to the lower gallery index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor, similarity: Similarity) -> Result<Vec<usize>, MetricsError> {
    let (g, d) = gallery
        .dims2()
        .ok_or_else(|| MetricsError::ShapeMismatch(format!("gallery shape {:?}", gallery.shape())))?;
    if g == 0 {
        return Err(MetricsError::EmptyGallery);
    }
    if query.len() != d {
        return Err(MetricsError::ShapeMismatch(format!(
            "query dim {} vs gallery dim {d}",
            query.len()
        )));
    }
    let qn = dot(query, query).sqrt();
    let scores: Vec<f64> = (0..g)
        .map(|i| {
            let row = gallery.row(i);
            match similarity {
                Similarity::Cosine => {
                    let denom = qn * dot(row, row).sqrt();
                    if denom > 0.0 { dot(query, row) / denom } else { 0.0 }
                }
                Similarity::Euclidean => -row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<Vec<usize>>,
    pub average_precision: Vec<f64>,
    /// `cmc[k - 1]` is the fraction of queries with a correct match in the
    /// top `k`.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

/// Average precision of one ranked list given per-position relevance.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 { 0.0 } else { total / hits as f64 }
}

pub fn evaluate_retrieval(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    max_rank: usize,
    similarity: Similarity,
) -> Result<RetrievalResult, MetricsError> {
    let (q, _) = queries
        .dims2()
        .ok_or_else(|| MetricsError::ShapeMismatch(format!("query shape {:?}", queries.shape())))?;
    let g = gallery.dims2().map_or(0, |(g, _)| g);
    if q == 0 {
        return Err(MetricsError::NoQueries);
    }
    if query_labels.len() != q || gallery_labels.len() != g {
        return Err(MetricsError::ShapeMismatch("label count differs from embedding count".into()));
    }
    if let Some(&l) = query_labels.iter().find(|l| !gallery_labels.contains(l)) {
        return Err(MetricsError::QueryLabelAbsent(l));
    }
    let mut ranked = Vec::with_capacity(q);
    let mut ap = Vec::with_capacity(q);
    let mut first_hit = Vec::with_capacity(q);
    for i in 0..q {
        let order = rank_gallery(queries.row(i), gallery, similarity)?;
        let rel: Vec<bool> = order.iter().map(|&j| gallery_labels[j] == query_labels[i]).collect();
        ap.push(average_precision(&rel));
        first_hit.push(rel.iter().position(|&r| r).expect("label present"));
        ranked.push(order);
    }
    let frac_within = |k: usize| first_hit.iter().filter(|&&h| h < k).count() as f64 / q as f64;
    Ok(RetrievalResult {
        cmc: (1..=max_rank).map(frac_within).collect(),
        rank1: frac_within(1),
        rank5: frac_within(5),
        rank10: frac_within(10),
        map: ap.iter().sum::<f64>() / q as f64,
        ranked,
        average_precision: ap,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `[N, K]` logits whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64, MetricsError> {
    let (n, k) = logits
        .dims2()
        .ok_or_else(|| MetricsError::ShapeMismatch(format!("logits shape {:?}", logits.shape())))?;
    if labels.len() != n {
        return Err(MetricsError::ShapeMismatch(format!("{n} rows vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(MetricsError::NoQueries);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(MetricsError::LabelOutOfRange { label, num_classes: k });
    }
    let correct = (0..n).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        let g = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(rank_gallery(&[0.0, 0.0, 1.0], &g, Similarity::Cosine).unwrap()[0], 2);
        let g2 = Tensor::from_rows(&[[0.3, 0.1], [2.0, -1.0], [0.5, 0.5]]);
        assert_eq!(rank_gallery(&[2.0, -1.0], &g2, Similarity::Cosine).unwrap()[0], 1);
        assert_eq!(rank_gallery(&[2.0, -1.0], &g2, Similarity::Euclidean).unwrap()[0], 1);
        let tied = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(rank_gallery(&[1.0, 0.0], &tied, Similarity::Cosine).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            rank_gallery(&[1.0], &g, Similarity::Cosine),
            Err(MetricsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ap_example() {
        let ap = average_precision(&[true, false, true]);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_retrieval() {
        let g = Tensor::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]);
        let q = Tensor::from_rows(&[[1.0, 0.05], [0.05, 1.0]]);
        let r = evaluate_retrieval(&q, &[0, 1], &g, &[0, 0, 1, 1], 4, Similarity::Cosine).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.cmc.iter().all(|&c| c == 1.0));
        assert!(matches!(
            evaluate_retrieval(&q, &[0, 7], &g, &[0, 0, 1, 1], 4, Similarity::Cosine),
            Err(MetricsError::QueryLabelAbsent(7))
        ));
    }

    #[test]
    fn accuracy_examples() {
        let labels = [0, 2, 1];
        let onehot = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        assert_eq!(accuracy(&onehot, &labels).unwrap(), 1.0);
        let shifted = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(accuracy(&shifted, &labels).unwrap(), 0.0);
        let rows: Vec<[f64; 2]> = (0..7).map(|i| if i < 5 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        assert!((accuracy(&Tensor::from_rows(&rows), &[0; 7]).unwrap() - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert!(matches!(
            accuracy(&onehot, &[0, 3, 1]),
            Err(MetricsError::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }
}
