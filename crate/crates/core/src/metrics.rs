//! Confusion matrices and per-class / mean segmentation scores.

use std::fmt;

use crate::error::{Error, Result};

/// Label value excluded from metrics and loss.
pub const VOID: u8 = 255;
/// Class index of the background ("clutter") class in the default class set.
pub const CLUTTER: usize = 5;

pub const CLASS_NAMES: [&str; 6] = ["impervious", "building", "low_vegetation", "tree", "car", "clutter"];

pub fn class_name(i: usize) -> String {
    CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanScores {
    pub mf1: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix { n, counts: vec![0; n * n] }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn set(&mut self, truth: usize, pred: usize, count: u64) {
        self.counts[truth * self.n + pred] = count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-void pixel.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels but ground truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == VOID {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.n || t >= self.n {
                return Err(Error::Data(format!(
                    "pixel {i}: class pair (truth {t}, prediction {p}) outside 0..{}",
                    self.n
                )));
            }
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(TP, FP, FN)` for class `c`.
    pub fn counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.n).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// Scores for class `c`; `None` when the class never occurs in truth or prediction.
    pub fn class_scores(&self, c: usize) -> Result<Option<ClassScores>> {
        if c >= self.n {
            return Err(Error::Data(format!("class {c} outside 0..{}", self.n)));
        }
        Ok(scores_from_counts(self.counts(c)))
    }

    /// Unweighted means over the defined scores of `foreground`.
    pub fn mean_scores(&self, foreground: &[usize]) -> Result<MeanScores> {
        if foreground.is_empty() {
            return Err(Error::Data("foreground class set is empty".into()));
        }
        let mut defined = Vec::new();
        for &c in foreground {
            if let Some(s) = self.class_scores(c)? {
                defined.push(s);
            }
        }
        if defined.is_empty() {
            return Err(Error::Data("no foreground class occurs in truth or prediction".into()));
        }
        let n = defined.len() as f64;
        Ok(MeanScores {
            mf1: defined.iter().map(|s| s.f1).sum::<f64>() / n,
            miou: defined.iter().map(|s| s.iou).sum::<f64>() / n,
        })
    }
}

pub fn scores_from_counts((tp, fp, fn_): (u64, u64, u64)) -> Option<ClassScores> {
    if tp + fp + fn_ == 0 {
        return None;
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Some(ClassScores { precision, recall, f1, iou: ratio(tp, tp + fp + fn_) })
}

/// Every class except clutter, for a matrix with `n` classes.
pub fn foreground(n: usize) -> Vec<usize> {
    (0..n).filter(|&c| c != CLUTTER).collect()
}

/// Per-class table with mean scores.
#[derive(Debug, Clone)]
pub struct Report {
    pub cm: ConfusionMatrix,
    pub foreground: Vec<usize>,
}

impl Report {
    pub fn new(cm: ConfusionMatrix) -> Self {
        let foreground = foreground(cm.num_classes());
        Report { cm, foreground }
    }

    pub fn means(&self) -> Result<MeanScores> {
        self.cm.mean_scores(&self.foreground)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# segmentation metrics")?;
        writeln!(f, "# colors: impervious=white building=blue low_vegetation=cyan tree=green car=yellow clutter=red")?;
        writeln!(f, "pixels {}", self.cm.total())?;
        writeln!(f, "{:<16} {:>10} {:>10} {:>10} {:>10}  note", "class", "precision", "recall", "f1", "iou")?;
        for c in 0..self.cm.num_classes() {
            let note = if self.foreground.contains(&c) { "" } else { "excluded" };
            match self.cm.class_scores(c).ok().flatten() {
                Some(s) => writeln!(
                    f,
                    "{:<16} {:>10.6} {:>10.6} {:>10.6} {:>10.6}  {note}",
                    class_name(c),
                    s.precision,
                    s.recall,
                    s.f1,
                    s.iou
                )?,
                None => writeln!(f, "{:<16} {:>10} {:>10} {:>10} {:>10}  undefined", class_name(c), "-", "-", "-", "-")?,
            }
        }
        match self.means() {
            Ok(m) => {
                let row: Vec<String> = self
                    .foreground
                    .iter()
                    .map(|&c| match self.cm.class_scores(c).ok().flatten() {
                        Some(s) => format!("{:.2}", 100.0 * s.f1),
                        None => "-".into(),
                    })
                    .collect();
                writeln!(f, "row (F1 per class | mF1 | mIoU, %): {} | {:.2} | {:.2}", row.join(" | "), 100.0 * m.mf1, 100.0 * m.miou)?;
                writeln!(f, "mF1 {:.6}", m.mf1)?;
                writeln!(f, "mIoU {:.6}", m.miou)
            }
            Err(e) => writeln!(f, "means undefined: {e}"),
        }
    }
}
