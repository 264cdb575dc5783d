//! Precision, recall and F1 of point predictions against labelled boxes.
//!
//! A prediction is correct when its centre lies inside a ground-truth box
//! of the same class. Predictions claim boxes greedily in descending score
//! order, one box each. Aggregates sum counts before taking ratios.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CharacterBox, PageSample};
use crate::postprocess::Prediction;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for unknown page {0}")]
    UnknownPage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Scope {
    Page(String),
    Book(String),
    Overall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: Scope,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricsReport {
    pub fn from_counts(scope: Scope, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            scope,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Sums the counts of `reports` and recomputes the ratios.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>, scope: Scope) -> MetricsReport {
    let (tp, fp, fn_) = reports
        .into_iter()
        .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
    MetricsReport::from_counts(scope, tp, fp, fn_)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, box index)` per true positive, in claim order.
    pub pairs: Vec<(usize, usize)>,
}

pub fn match_page(predictions: &[Prediction], boxes: &[CharacterBox]) -> PageMatch {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
    let mut claimed = vec![false; boxes.len()];
    let mut pairs = Vec::new();
    for i in order {
        let p = &predictions[i];
        let hit = boxes
            .iter()
            .enumerate()
            .find(|(j, b)| !claimed[*j] && b.codepoint == p.codepoint && b.contains(p.x, p.y));
        if let Some((j, _)) = hit {
            claimed[j] = true;
            pairs.push((i, j));
        }
    }
    let tp = pairs.len();
    PageMatch {
        tp,
        fp: predictions.len() - tp,
        fn_: boxes.len() - tp,
        pairs,
    }
}

/// Per-page, per-book and overall metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pages: Vec<MetricsReport>,
    pub books: Vec<MetricsReport>,
    pub overall: MetricsReport,
}

/// Scores predictions against every labelled page. Unlabelled pages are
/// skipped along with any predictions made on them.
pub fn evaluate(pages: &[PageSample], predictions: &[Prediction]) -> Result<Evaluation, EvalError> {
    let mut by_page: HashMap<&str, Vec<Prediction>> = HashMap::new();
    for p in predictions {
        by_page.entry(p.page_id.as_str()).or_default().push(p.clone());
    }
    if let Some(unknown) = by_page.keys().find(|id| !pages.iter().any(|s| s.page_id == **id)) {
        return Err(EvalError::UnknownPage(unknown.to_string()));
    }
    let mut page_reports = Vec::new();
    let mut books: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for s in pages.iter().filter(|s| !s.is_excluded()) {
        let preds = by_page.get(s.page_id.as_str()).map_or(&[][..], Vec::as_slice);
        let m = match_page(preds, &s.boxes);
        books.entry(&s.book_id).or_default().push(page_reports.len());
        page_reports.push(MetricsReport::from_counts(
            Scope::Page(s.page_id.clone()),
            m.tp,
            m.fp,
            m.fn_,
        ));
    }
    let book_reports = books
        .iter()
        .map(|(b, idx)| aggregate(idx.iter().map(|&i| &page_reports[i]), Scope::Book(b.to_string())))
        .collect();
    Ok(Evaluation {
        overall: aggregate(&page_reports, Scope::Overall),
        pages: page_reports,
        books: book_reports,
    })
}

/// One row of the per-book comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookRow {
    pub book: String,
    pub classes: usize,
    pub ground_truth: usize,
    /// F1 per run label, in column order.
    pub f1: Vec<f64>,
}

/// Class and character counts of each book's labelled pages.
pub fn book_statistics(pages: &[PageSample]) -> BTreeMap<String, (usize, usize)> {
    let mut classes: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in pages.iter().filter(|s| !s.is_excluded()) {
        let set = classes.entry(&s.book_id).or_default();
        set.extend(s.boxes.iter().map(|b| b.codepoint.as_str()));
        *counts.entry(&s.book_id).or_default() += s.boxes.len();
    }
    classes
        .into_iter()
        .map(|(b, set)| (b.to_string(), (set.len(), counts[b])))
        .collect()
}

/// Builds table rows from one evaluation per labelled run.
pub fn book_rows(pages: &[PageSample], runs: &[(String, Evaluation)]) -> Vec<BookRow> {
    let mut rows: Vec<BookRow> = book_statistics(pages)
        .into_iter()
        .map(|(book, (classes, ground_truth))| BookRow {
            f1: runs
                .iter()
                .map(|(_, e)| {
                    e.books
                        .iter()
                        .find(|r| r.scope == Scope::Book(book.clone()))
                        .map_or(0.0, |r| r.f1)
                })
                .collect(),
            book,
            classes,
            ground_truth,
        })
        .collect();
    if rows.len() > 1 {
        let total_gt = rows.iter().map(|r| r.ground_truth).sum();
        let all_classes = pages
            .iter()
            .filter(|s| !s.is_excluded())
            .flat_map(|s| s.boxes.iter().map(|b| b.codepoint.as_str()))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        rows.push(BookRow {
            book: "overall".into(),
            classes: all_classes,
            ground_truth: total_gt,
            f1: runs.iter().map(|(_, e)| e.overall.f1).collect(),
        });
    }
    rows
}

/// Fixed-width text table: book, class count, ground-truth count, one F1 column per run.
pub fn render_table(labels: &[String], rows: &[BookRow]) -> String {
    let book_w = rows.iter().map(|r| r.book.len()).chain([4]).max().unwrap_or(4);
    let mut out = format!("{:<book_w$}  {:>7}  {:>12}", "Book", "Classes", "Ground truth");
    for l in labels {
        let _ = write!(out, "  {:>w$}", format!("{l} F1"), w = (l.len() + 3).max(6));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<book_w$}  {:>7}  {:>12}", r.book, r.classes, r.ground_truth);
        for (l, f) in labels.iter().zip(&r.f1) {
            let _ = write!(out, "  {:>w$.4}", f, w = (l.len() + 3).max(6));
        }
        out.push('\n');
    }
    out
}
