//! Classification metrics: confusion matrices, F1 variants, CinC score, ROC
//! curves and AUC, and the serialized evaluation report.

mod plot;

pub use plot::{svg_confusion, svg_line_chart, svg_roc};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Head};
use crate::tensor::Tensor;

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c]
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.class_count()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {k} classes",
                t.max(p)
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Pooled true positive, false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, zero when both are zero.
    pub fn f1(&self) -> f64 {
        f1_from(self.precision(), self.recall())
    }
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub micro: f64,
    pub macro_: f64,
}

fn f1_from_counts(per_class: &[Counts]) -> F1Scores {
    let pooled = per_class.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let f1: Vec<f64> = per_class.iter().map(|c| c.f1()).collect();
    let macro_ = if f1.is_empty() {
        0.0
    } else {
        f1.iter().sum::<f64>() / f1.len() as f64
    };
    F1Scores {
        precision: per_class.iter().map(|c| c.precision()).collect(),
        recall: per_class.iter().map(|c| c.recall()).collect(),
        per_class: f1,
        micro: pooled.f1(),
        macro_,
    }
}

pub fn f1_scores(cm: &ConfusionMatrix) -> F1Scores {
    let counts: Vec<Counts> = (0..cm.class_count())
        .map(|c| Counts {
            tp: cm.true_positives(c),
            fp: cm.false_positives(c),
            fn_: cm.false_negatives(c),
        })
        .collect();
    f1_from_counts(&counts)
}

/// One-vs-rest `[[tn, fp], [fn, tp]]` per class for label sets.
pub fn one_vs_rest(y_true: &[Vec<usize>], y_pred: &[Vec<usize>], k: usize) -> Result<Vec<[[u64; 2]; 2]>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true label sets but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut out = vec![[[0u64; 2]; 2]; k];
    for (t, p) in y_true.iter().zip(y_pred) {
        if let Some(bad) = t.iter().chain(p).find(|c| **c >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        for (c, m) in out.iter_mut().enumerate() {
            m[t.contains(&c) as usize][p.contains(&c) as usize] += 1;
        }
    }
    Ok(out)
}

/// F1 scores from one-vs-rest matrices; micro pools all classes.
pub fn multilabel_f1(matrices: &[[[u64; 2]; 2]]) -> F1Scores {
    let counts: Vec<Counts> = matrices
        .iter()
        .map(|m| Counts {
            tp: m[1][1],
            fp: m[0][1],
            fn_: m[1][0],
        })
        .collect();
    f1_from_counts(&counts)
}

/// Mean per-class F1 over `classes`.
pub fn cinc_score(per_class_f1: &[f64], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("CinC score over an empty class set".into()));
    }
    let mut total = 0.0;
    for &c in classes {
        total += per_class_f1.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("class {c} has no F1 value ({} classes)", per_class_f1.len()))
        })?;
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Score cut-off of each point (`score >= threshold` is positive); the
    /// first point uses `+inf`.
    pub thresholds: Vec<f64>,
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one positive and one negative sample".into(),
        ));
    }
    Ok((pos, neg))
}

/// ROC points at every distinct score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut curve = RocCurve {
        fpr: vec![0.0],
        tpr: vec![0.0],
        thresholds: vec![f64::INFINITY],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.thresholds.push(t);
    }
    Ok(curve)
}

/// Area under a curve by the trapezoid rule.
pub fn trapezoid_auc(curve: &RocCurve) -> f64 {
    curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney statistic with mid-ranks).
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|k| labels[**k]).count() as f64;
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    let curve = roc_curve(scores, labels)?;
    let auc = rank_auc(scores, labels)?;
    Ok((curve, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Absent when the class is all-positive or all-negative in the data.
    pub auc: Option<f64>,
}

/// Everything the evaluation command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub parameter_count: usize,
    pub sample_count: usize,
    pub class_count: usize,
    pub head: Head,
    pub thresholds: Vec<f64>,
    /// `K x K` matrix for a softmax head.
    pub confusion: Option<ConfusionMatrix>,
    /// `[[tn, fp], [fn, tp]]` per class for a sigmoid head.
    pub one_vs_rest: Option<Vec<[[u64; 2]; 2]>>,
    pub per_class: Vec<ClassMetrics>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub cinc_score: f64,
    pub cinc_classes: Vec<usize>,
    pub mean_auc: Option<f64>,
}

/// ROC curves and the report for `scores` (`[B, K]`) against label sets.
pub fn evaluate(
    scores: &Tensor,
    labels: &[Vec<usize>],
    head: Head,
    thresholds: &[f64],
    cinc_classes: Option<&[usize]>,
    parameter_count: usize,
) -> Result<(EvalReport, Vec<(usize, RocCurve)>)> {
    let [b, k] = scores.shape()[..] else {
        return Err(Error::shape("evaluate", format!("scores must be [B, K], got {:?}", scores.shape())));
    };
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{b} score rows but {} label sets", labels.len())));
    }
    let predicted = predict(scores, head, thresholds)?;
    let (confusion, one_vs_rest, f1, accuracy, support): (_, _, F1Scores, f64, Vec<u64>) = match head {
        Head::Softmax => {
            let truth: Vec<usize> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| match l[..] {
                    [c] => Ok(c),
                    _ => Err(Error::InvalidArgument(format!(
                        "sample {i} has {} labels; a softmax head needs exactly one",
                        l.len()
                    ))),
                })
                .collect::<Result<_>>()?;
            let pred: Vec<usize> = predicted.iter().map(|p| p[0]).collect();
            let cm = confusion_matrix(&truth, &pred, k)?;
            let f1 = f1_scores(&cm);
            let support = (0..k).map(|c| cm.support(c)).collect();
            let acc = cm.accuracy();
            (Some(cm), None, f1, acc, support)
        }
        Head::Sigmoid => {
            let m = one_vs_rest(labels, &predicted, k)?;
            let f1 = multilabel_f1(&m);
            let exact = labels.iter().zip(&predicted).filter(|(t, p)| t == p).count();
            let acc = if b == 0 { 0.0 } else { exact as f64 / b as f64 };
            let support = m.iter().map(|x| x[1][0] + x[1][1]).collect();
            (None, Some(m), f1, acc, support)
        }
    };
    let mut curves = Vec::new();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let column: Vec<f64> = (0..b).map(|i| scores.data()[i * k + c]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        let auc = match roc_auc(&column, &truth) {
            Ok((curve, auc)) => {
                curves.push((c, curve));
                Some(auc)
            }
            Err(_) => None,
        };
        per_class.push(ClassMetrics {
            class: c,
            precision: f1.precision[c],
            recall: f1.recall[c],
            f1: f1.per_class[c],
            support: support[c],
            auc,
        });
    }
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let cinc_classes: Vec<usize> = cinc_classes.map_or_else(|| (0..k).collect(), |c| c.to_vec());
    let report = EvalReport {
        parameter_count,
        sample_count: b,
        class_count: k,
        head,
        thresholds: thresholds.to_vec(),
        confusion,
        one_vs_rest,
        micro_f1: f1.micro,
        macro_f1: f1.macro_,
        accuracy,
        cinc_score: cinc_score(&f1.per_class, &cinc_classes)?,
        cinc_classes,
        mean_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        per_class,
    };
    Ok((report, curves))
}

/// `class,threshold,fpr,tpr` rows.
pub fn roc_csv(curves: &[(usize, RocCurve)]) -> String {
    let mut out = String::from("class,threshold,fpr,tpr\n");
    for (c, curve) in curves {
        for i in 0..curve.fpr.len() {
            out.push_str(&format!("{c},{},{},{}\n", curve.thresholds[i], curve.fpr[i], curve.tpr[i]));
        }
    }
    out
}
