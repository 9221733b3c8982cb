//! Embedding quality: kNN classification scores and trustworthiness.
//!
//! Neighbor searches are brute force over squared Euclidean distances. Equal
//! distances are ordered by the smaller row index, so all results are
//! deterministic and integer-exact up to the final division.

use std::io::Write;
use std::path::Path;

use crate::data::sq_dist;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::par;

/// Row indices of `points` ordered by distance from `query` (ties by index),
/// skipping `exclude`.
fn ranked_neighbors(points: &DenseMatrix, query: &[f64], exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..points.rows())
        .filter(|&j| Some(j) != exclude)
        .map(|j| (sq_dist(points.row(j), query), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, j)| j).collect()
}

/// Majority vote among the `k` nearest training rows. Vote ties go to the
/// smallest class id.
pub fn knn_predict(
    train_emb: &DenseMatrix,
    train_labels: &[usize],
    query_emb: &DenseMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    if train_emb.rows() == 0 {
        return Err(Error::arg("kNN needs a non-empty training set"));
    }
    if train_labels.len() != train_emb.rows() {
        return Err(Error::Consistency(format!(
            "{} training labels for {} rows",
            train_labels.len(),
            train_emb.rows()
        )));
    }
    if k == 0 || k > train_emb.rows() {
        return Err(Error::arg(format!(
            "k must lie in [1, {}], got {k}",
            train_emb.rows()
        )));
    }
    if query_emb.cols() != train_emb.cols() {
        return Err(Error::Shape {
            op: "knn_predict",
            left: train_emb.shape(),
            right: query_emb.shape(),
        });
    }
    let n_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    Ok(par::map_range(query_emb.rows(), |q| {
        let neighbors = ranked_neighbors(train_emb, query_emb.row(q), None);
        let mut votes = vec![0usize; n_classes];
        for &j in neighbors.iter().take(k) {
            votes[train_labels[j]] += 1;
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        votes.iter().position(|&v| v == best).unwrap_or(0)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\naccuracy,{}\nmacro_precision,{}\nmacro_recall,{}\nmacro_f1,{}\n",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        )
    }

    /// Confusion matrix as a CSV grid: rows are true classes, columns predicted.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut s = String::from("truth\\pred");
        for j in 0..c {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Accuracy plus macro-averaged precision, recall and F1. Undefined ratios
/// (0/0) count as 0.
pub fn classification_report(
    pred: &[usize],
    truth: &[usize],
    c: usize,
) -> Result<ClassificationReport> {
    if pred.len() != truth.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() || c == 0 {
        return Err(Error::arg(
            "classification report needs samples and classes",
        ));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= c) {
        return Err(Error::arg(format!("label {bad} outside [0, {c})")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (class, row) in confusion.iter().enumerate() {
        let tp = row[class];
        let predicted: usize = confusion.iter().map(|r| r[class]).sum();
        let actual: usize = row.iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sp += precision;
        sr += recall;
        sf += f1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let cf = c as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / pred.len() as f64,
        macro_precision: sp / cf,
        macro_recall: sr / cf,
        macro_f1: sf / cf,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustScore {
    pub value: f64,
    pub n_neighbors: usize,
}

/// Sum over samples of the rank penalties that define trustworthiness.
fn trust_penalty(x_high: &DenseMatrix, embedding: &DenseMatrix, k: usize) -> u64 {
    let n = x_high.rows();
    par::map_range(n, |i| {
        let high_order = ranked_neighbors(x_high, x_high.row(i), Some(i));
        let mut rank = vec![0usize; n];
        for (r, &j) in high_order.iter().enumerate() {
            rank[j] = r + 1;
        }
        ranked_neighbors(embedding, embedding.row(i), Some(i))
            .into_iter()
            .take(k)
            .filter(|&j| rank[j] > k)
            .map(|j| (rank[j] - k) as u64)
            .sum::<u64>()
    })
    .into_iter()
    .sum()
}

/// `T(k) = 1 - 2 / (n k (2n - 3k - 1)) * sum_i sum_{j in U_k(i)} (r(i, j) - k)`
/// where `U_k(i)` are the embedding-space neighbors of `i` outside its
/// input-space neighbors and `r(i, j)` is the input-space rank (from 1).
pub fn trustworthiness(
    x_high: &DenseMatrix,
    embedding: &DenseMatrix,
    k: usize,
) -> Result<TrustScore> {
    let n = x_high.rows();
    if embedding.rows() != n {
        return Err(Error::Shape {
            op: "trustworthiness",
            left: x_high.shape(),
            right: embedding.shape(),
        });
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::arg(format!(
            "trustworthiness needs 1 <= k < n/2, got k={k}, n={n}"
        )));
    }
    let penalty = trust_penalty(x_high, embedding, k) as f64;
    let (nf, kf) = (n as f64, k as f64);
    let value = 1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty;
    Ok(TrustScore {
        value,
        n_neighbors: k,
    })
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub parameter: usize,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,parameter,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.parameter, r.value));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
