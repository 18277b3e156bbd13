//! Confusion matrices, precision/recall/F1, the k-NN baseline and
//! comparison tables.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::encoders::{pgm_bytes, ImageTensor};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true/pred");
        for j in 0..self.k {
            out.push(',');
            out.push_str(&name(j));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&name(i));
            for c in row {
                write!(out, ",{c}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized heat map, `cell_px` pixels per cell; white is 1.
    pub fn to_pgm(&self, cell_px: usize) -> Vec<u8> {
        let side = self.k * cell_px.max(1);
        let support = self.support();
        let mut data = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let (i, j) = (y / cell_px.max(1), x / cell_px.max(1));
                if support[i] > 0 {
                    data[y * side + x] = self.counts[i][j] as f64 / support[i] as f64;
                }
            }
        }
        pgm_bytes(&ImageTensor::square(side, data), 0.0, 1.0)
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!("{} true labels vs {} predictions", truth.len(), predicted.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::input(format!("label {} out of range for {k} classes", t.max(p))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes.
    pub macro_avg: ClassMetrics,
    pub support: Vec<u64>,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro metrics. Any ratio with a zero denominator is 0.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.k;
    let support = cm.support();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| if k == 0 { 0.0 } else { per_class.iter().map(f).sum::<f64>() / k as f64 };
    let macro_avg = ClassMetrics { precision: mean(|m| m.precision), recall: mean(|m| m.recall), f1: mean(|m| m.f1) };
    let correct: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    MetricsReport { per_class, macro_avg, support, accuracy: ratio(correct, cm.total()) }
}

/// Euclidean k-nearest-neighbour majority vote. A tied vote goes to the tied
/// class whose member ranks nearest; equal distances rank by training index.
pub fn knn_classify(train: &[&[f64]], train_labels: &[usize], queries: &[&[f64]], k_neighbors: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::input("k-NN needs a non-empty training set"));
    }
    if train.len() != train_labels.len() {
        return Err(Error::Shape(format!("{} training rows vs {} labels", train.len(), train_labels.len())));
    }
    if k_neighbors == 0 || k_neighbors > train.len() {
        return Err(Error::input(format!("k must lie in 1..={}, got {k_neighbors}", train.len())));
    }
    let dim = train[0].len();
    if train.iter().chain(queries).any(|r| r.len() != dim) {
        return Err(Error::Shape("k-NN rows differ in length".into()));
    }
    let n_classes = train_labels.iter().max().map_or(0, |m| m + 1);
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (t.iter().zip(*q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k_neighbors < d.len() {
                d.select_nth_unstable_by(k_neighbors - 1, cmp);
                d.truncate(k_neighbors);
            }
            d.sort_unstable_by(cmp);
            let mut votes = vec![0usize; n_classes];
            for &(_, i) in &d {
                votes[train_labels[i]] += 1;
            }
            let top = *votes.iter().max().expect("at least one class");
            d.iter()
                .map(|&(_, i)| train_labels[i])
                .find(|&l| votes[l] == top)
                .expect("some neighbour has the winning class")
        })
        .collect())
}

/// Summary table (macro precision, recall, F1 per approach) followed by a
/// per-class section with one row per (approach, class).
pub fn compare_report_csv(reports: &[(String, MetricsReport)], class_names: &[String]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::input("no reports to compare"));
    }
    let mut out = String::from("approach,precision,recall,f1\n");
    for (name, r) in reports {
        let m = r.macro_avg;
        writeln!(out, "{name},{:.6},{:.6},{:.6}", m.precision, m.recall, m.f1).expect("write to string");
    }
    out.push_str("\napproach,class,precision,recall,f1,support\n");
    for (name, r) in reports {
        for (c, m) in r.per_class.iter().enumerate() {
            let class = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            writeln!(out, "{name},{class},{:.6},{:.6},{:.6},{}", m.precision, m.recall, m.f1, r.support[c])
                .expect("write to string");
        }
    }
    out.push_str("\n# precision/recall/f1 in the first table are macro averages (unweighted class means)\n");
    out.push_str("# per-class localization quality is read from the f1 column of the second table\n");
    Ok(out)
}

pub fn compare_report(reports: &[(String, MetricsReport)], class_names: &[String], path: &Path) -> Result<()> {
    fs::write(path, compare_report_csv(reports, class_names)?)?;
    Ok(())
}

/// Per-class F1 scores ordered worst first, for quick diagnostics.
pub fn weakest_classes(report: &MetricsReport) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = report.per_class.iter().map(|m| m.f1).enumerate().collect();
    v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    v
}
