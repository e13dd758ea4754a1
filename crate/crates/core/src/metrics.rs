//! Ranking metrics and the per-category evaluation table.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};
use crate::io::{load_test_sample, DatasetLayout};
use crate::net::Network;
use crate::scoring::score;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "metric labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::invalid(format!("label {i} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by score, descending. Ties keep index order.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting 1/2.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "AUROC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    // Walk score blocks from the top; each positive in a block beats every
    // negative below it and ties with the negatives inside it.
    let idx = order_desc(scores);
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut p, mut q) = (0.0, 0.0);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                p += 1.0;
            } else {
                q += 1.0;
            }
            i += 1;
        }
        neg_below -= q;
        wins += p * (neg_below + 0.5 * q);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve. Thresholds sweep the
/// distinct scores from the top; equal scores enter as one block.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::invalid("AUPR needs at least one positive label"));
    }
    let idx = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let tp_before = tp;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > tp_before {
            area += (tp - tp_before) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// Mean rank of each method over categories. `table[m][c]` is method `m`'s
/// metric on category `c`; higher is better, rank 1 is best and ties share
/// the average of their positions.
pub fn mean_rank(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let methods = table.len();
    let cats = table.first().map_or(0, Vec::len);
    if methods == 0 || cats == 0 {
        return Err(Error::invalid("mean rank needs a non-empty table"));
    }
    if let Some(m) = table.iter().position(|row| row.len() != cats) {
        return Err(Error::ShapeMismatch {
            context: "mean rank table row",
            expected: cats,
            found: table[m].len(),
        });
    }
    let mut total = vec![0.0; methods];
    for c in 0..cats {
        let col: Vec<f64> = table.iter().map(|row| row[c]).collect();
        let idx = order_desc(&col);
        let mut i = 0;
        while i < methods {
            let mut j = i;
            while j < methods && col[idx[j]] == col[idx[i]] {
                j += 1;
            }
            // Positions i+1 ..= j share their mean.
            let r = (i + 1 + j) as f64 / 2.0;
            for &m in &idx[i..j] {
                total[m] += r;
            }
            i = j;
        }
    }
    Ok(total.into_iter().map(|t| t / cats as f64).collect())
}

/// How point scores are pooled for the point-level metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointPooling {
    /// Concatenate all points of a category.
    #[default]
    Category,
    /// Average the per-sample metric over samples that contain both classes.
    Sample,
}

/// Scores and ground truth of one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub object_score: f64,
    pub point_scores: Vec<f64>,
    /// Per-point ground truth, if available.
    pub mask: Option<Vec<u8>>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScores {
    pub name: String,
    pub samples: Vec<SampleScores>,
    /// Time spent scoring this category, excluding file I/O.
    pub scoring_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryResult {
    pub category: String,
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
    pub n_samples: usize,
    pub n_points: usize,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Unweighted means over the categories where each metric is defined.
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
    pub fps: f64,
    pub n_samples: usize,
    pub n_points: usize,
    pub categories: Vec<CategoryResult>,
    /// Human-readable reasons for metrics that could not be computed.
    pub notices: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn point_metric(
    cat: &CategoryScores,
    pooling: PointPooling,
    f: fn(&[f64], &[u8]) -> Result<f64>,
) -> Option<f64> {
    match pooling {
        PointPooling::Category => {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for smp in &cat.samples {
                s.extend_from_slice(&smp.point_scores);
                l.extend_from_slice(smp.mask.as_ref()?);
            }
            f(&s, &l).ok()
        }
        PointPooling::Sample => mean_of(
            cat.samples
                .iter()
                .map(|smp| f(&smp.point_scores, smp.mask.as_ref()?).ok()),
        ),
    }
}

/// Object- and point-level metrics for every category plus their means.
pub fn evaluate_scores(categories: &[CategoryScores], pooling: PointPooling) -> Result<EvalResult> {
    let mut rows = Vec::with_capacity(categories.len());
    let mut notices = Vec::new();
    for cat in categories {
        for smp in &cat.samples {
            if let Some(m) = &smp.mask {
                if m.len() != smp.point_scores.len() {
                    return Err(Error::ShapeMismatch {
                        context: "point mask",
                        expected: smp.point_scores.len(),
                        found: m.len(),
                    });
                }
            }
        }
        let obj: Vec<f64> = cat.samples.iter().map(|s| s.object_score).collect();
        let lab: Vec<u8> = cat.samples.iter().map(|s| s.label).collect();
        let o_auroc = auroc(&obj, &lab).ok();
        let o_aupr = aupr(&obj, &lab).ok();
        if o_auroc.is_none() {
            notices.push(format!(
                "{}: object-level metrics skipped (test set lacks one of the classes)",
                cat.name
            ));
        }
        let has_masks = cat.samples.iter().all(|s| s.mask.is_some());
        let (p_auroc, p_aupr) = if has_masks {
            (
                point_metric(cat, pooling, auroc),
                point_metric(cat, pooling, aupr),
            )
        } else {
            notices.push(format!(
                "{}: point-level metrics skipped (missing masks)",
                cat.name
            ));
            (None, None)
        };
        let n_samples = cat.samples.len();
        rows.push(CategoryResult {
            category: cat.name.clone(),
            o_auroc,
            p_auroc,
            o_aupr,
            p_aupr,
            n_samples,
            n_points: cat.samples.iter().map(|s| s.point_scores.len()).sum(),
            fps: n_samples as f64 / cat.scoring_seconds.max(f64::MIN_POSITIVE),
        });
    }
    let n_samples = rows.iter().map(|r| r.n_samples).sum();
    let seconds: f64 = categories.iter().map(|c| c.scoring_seconds).sum();
    Ok(EvalResult {
        o_auroc: mean_of(rows.iter().map(|r| r.o_auroc)),
        p_auroc: mean_of(rows.iter().map(|r| r.p_auroc)),
        o_aupr: mean_of(rows.iter().map(|r| r.o_aupr)),
        p_aupr: mean_of(rows.iter().map(|r| r.p_aupr)),
        fps: n_samples as f64 / seconds.max(f64::MIN_POSITIVE),
        n_samples,
        n_points: rows.iter().map(|r| r.n_points).sum(),
        categories: rows,
        notices,
    })
}

impl EvalResult {
    /// One row per category followed by a `mean` row. Undefined metrics are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("category,o_auroc,p_auroc,o_aupr,p_aupr,n_samples,n_points,fps\n");
        let mut row = |name: &str, a, b, c, d, ns: usize, np: usize, fps: f64| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{ns},{np},{fps:.3}",
                fmt_opt(a),
                fmt_opt(b),
                fmt_opt(c),
                fmt_opt(d)
            );
        };
        for r in &self.categories {
            row(
                &r.category,
                r.o_auroc,
                r.p_auroc,
                r.o_aupr,
                r.p_aupr,
                r.n_samples,
                r.n_points,
                r.fps,
            );
        }
        row(
            "mean",
            self.o_auroc,
            self.p_auroc,
            self.o_aupr,
            self.p_aupr,
            self.n_samples,
            self.n_points,
            self.fps,
        );
        out
    }
}

/// Normalized test clouds and masks of one class, loaded ahead of scoring.
#[derive(Debug, Clone)]
pub struct LoadedClass {
    pub name: String,
    pub samples: Vec<(String, PointCloud, Vec<u8>)>,
}

pub fn load_test_sets(layout: &DatasetLayout) -> Result<Vec<LoadedClass>> {
    layout
        .classes
        .iter()
        .map(|c| {
            let samples = c
                .test
                .iter()
                .map(|e| {
                    let (cloud, mask) = load_test_sample(e)?;
                    Ok((e.stem.clone(), normalize_cloud(&cloud), mask))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedClass {
                name: c.name.clone(),
                samples,
            })
        })
        .collect()
}

/// Scores every test cloud with `scorer` (point scores out) and computes the
/// metric table. Only the scoring calls are timed.
pub fn evaluate_with<F>(
    classes: &[LoadedClass],
    pooling: PointPooling,
    scorer: F,
) -> Result<EvalResult>
where
    F: Fn(&PointCloud, &[u8]) -> Result<Vec<f64>>,
{
    let mut cats = Vec::with_capacity(classes.len());
    for class in classes {
        let mut samples = Vec::with_capacity(class.samples.len());
        let mut seconds = 0.0;
        for (_, cloud, mask) in &class.samples {
            let t = Instant::now();
            let point_scores = scorer(cloud, mask)?;
            seconds += t.elapsed().as_secs_f64();
            samples.push(SampleScores {
                object_score: point_scores.iter().copied().fold(0.0, f64::max),
                point_scores,
                label: mask.iter().copied().max().unwrap_or(0),
                mask: Some(mask.clone()),
            });
        }
        cats.push(CategoryScores {
            name: class.name.clone(),
            samples,
            scoring_seconds: seconds,
        });
    }
    evaluate_scores(&cats, pooling)
}

/// Evaluates a trained network on the test split of every class.
pub fn evaluate(
    network: &Network,
    classes: &[LoadedClass],
    pooling: PointPooling,
) -> Result<EvalResult> {
    evaluate_with(classes, pooling, |c, _| Ok(score(network, c)?.point_scores))
}
