//! Confusion matrices and per-class / aggregate segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

/// `counts[i][j]`: pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let c = names.len();
        Self {
            names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn with_classes(c: usize) -> Self {
        Self::new((0..c).map(|i| format!("class{i}")).collect())
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one prediction/ground-truth pair, skipping `ignore` pixels.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let c = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            for l in [p, g] {
                if l as usize >= c {
                    return Err(Error::Label { label: l, classes: c });
                }
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::Shape("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.names {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (n, row) in self.names.iter().zip(&self.counts) {
            out.push_str(n);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub recall: f64,
    pub precision: f64,
    pub iou: f64,
}

impl Scores {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            iou: ratio(tp, tp + fp + fn_),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub name: String,
    pub support: u64,
    /// `None` for classes absent from the ground truth.
    pub scores: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassWeights {
    InverseFrequency,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub classes: Vec<ClassScores>,
    pub global: Scores,
    pub weighted: Scores,
    pub accuracy: f64,
    pub pixels: u64,
}

pub fn compute_metrics(cm: &ConfusionMatrix, weights: &ClassWeights) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no pixels".into()));
    }
    let c = cm.classes();
    let col = |j: usize| -> u64 { (0..c).map(|i| cm.counts[i][j]).sum() };
    let mut classes = Vec::with_capacity(c);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for k in 0..c {
        let tp = cm.counts[k][k];
        let support: u64 = cm.counts[k].iter().sum();
        let fp = col(k) - tp;
        let fn_ = support - tp;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        classes.push(ClassScores {
            name: cm.names[k].clone(),
            support,
            scores: (support > 0).then(|| Scores::from_counts(tp, fp, fn_)),
        });
    }
    let raw: Vec<f64> = match weights {
        ClassWeights::InverseFrequency => classes
            .iter()
            .map(|cs| if cs.support > 0 { total as f64 / cs.support as f64 } else { 0.0 })
            .collect(),
        ClassWeights::Explicit(w) => {
            if w.len() != c || w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config(format!("need {c} non-negative class weights")));
            }
            w.iter()
                .zip(&classes)
                .map(|(&v, cs)| if cs.support > 0 { v } else { 0.0 })
                .collect()
        }
    };
    let norm: f64 = raw.iter().sum();
    if norm <= 0.0 {
        return Err(Error::Config("class weights vanish on every present class".into()));
    }
    let mut weighted = Scores::default();
    for (cs, w) in classes.iter().zip(&raw) {
        if let Some(s) = cs.scores {
            let w = w / norm;
            weighted.recall += w * s.recall;
            weighted.precision += w * s.precision;
            weighted.iou += w * s.iou;
        }
    }
    Ok(Metrics {
        classes,
        global: Scores::from_counts(tp_all, fp_all, fn_all),
        weighted,
        accuracy: tp_all as f64 / total as f64,
        pixels: total,
    })
}

impl Metrics {
    /// Rows per class plus `Global` and `Weighted`, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<14} {:>8} {:>10} {:>8}", "Class", "Recall", "Precision", "IoU").unwrap();
        let row = |out: &mut String, name: &str, s: &Scores| {
            writeln!(
                out,
                "{:<14} {:>8.2} {:>10.2} {:>8.2}",
                name,
                100.0 * s.recall,
                100.0 * s.precision,
                100.0 * s.iou
            )
            .unwrap();
        };
        for c in &self.classes {
            match &c.scores {
                Some(s) => row(&mut out, &c.name, s),
                None => writeln!(out, "{:<14} {:>8} {:>10} {:>8}", c.name, "-", "-", "-").unwrap(),
            }
        }
        row(&mut out, "Global", &self.global);
        row(&mut out, "Weighted", &self.weighted);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,support,recall,precision,iou\n");
        for c in &self.classes {
            match &c.scores {
                Some(s) => writeln!(out, "{},{},{},{},{}", c.name, c.support, s.recall, s.precision, s.iou),
                None => writeln!(out, "{},0,,,", c.name),
            }
            .unwrap();
        }
        for (name, s) in [("global", &self.global), ("weighted", &self.weighted)] {
            writeln!(out, "{name},{},{},{},{}", self.pixels, s.recall, s.precision, s.iou).unwrap();
        }
        out
    }
}
