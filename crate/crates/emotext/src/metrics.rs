//! Multi-label evaluation: subset accuracy, the F1 family, per-label
//! confusion matrices, and Cohen's kappa agreement between annotators.
//!
//! Conventions (they matter for rare labels such as Anger):
//! - accuracy is exact-match subset accuracy;
//! - precision/recall/F1 are 0 whenever their denominator is 0;
//! - macro F1 averages per-label F1 over all five labels, including labels
//!   absent from both predictions and gold;
//! - samples F1 averages the per-example F1 2|P∩G|/(|P|+|G|).

use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, LabelSet, LABEL_NAMES, NUM_LABELS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and gold lengths differ: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("empty input")]
    Empty,
    #[error("need at least two annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("annotator {annotator:?} is missing ids: {missing:?}")]
    IdMisalignment {
        annotator: String,
        missing: Vec<String>,
    },
}

/// 2×2 confusion counts for one label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-label precision/recall/F1 next to the label name.
#[derive(Clone, Debug, Serialize)]
pub struct LabelMetrics {
    pub label: &'static str,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub subset_accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub samples_f1: f64,
    pub per_label: Vec<LabelMetrics>,
}

impl MetricsReport {
    /// Confusion matrices as CSV: label, TP, FP, FN, TN.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("label,tp,fp,fn,tn\n");
        for lm in &self.per_label {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                lm.label, lm.confusion.tp, lm.confusion.fp, lm.confusion.fn_, lm.confusion.tn
            ));
        }
        out
    }
}

/// Scores predictions against gold label sets.
pub fn evaluate(pred: &[LabelSet], gold: &[LabelSet]) -> Result<MetricsReport, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pred.len();

    let mut confusion = [Confusion::default(); NUM_LABELS];
    let mut exact = 0usize;
    let mut samples_sum = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        if p == g {
            exact += 1;
        }
        let inter = (p.bits() & g.bits()).count_ones() as usize;
        samples_sum += ratio(2 * inter, p.len() + g.len());
        for (l, c) in confusion.iter_mut().enumerate() {
            match (p.contains(l), g.contains(l)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }

    let per_label: Vec<LabelMetrics> = confusion
        .iter()
        .enumerate()
        .map(|(l, c)| LabelMetrics {
            label: LABEL_NAMES[l],
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            confusion: *c,
        })
        .collect();

    let pooled = confusion.iter().fold(Confusion::default(), |mut acc, c| {
        acc.tp += c.tp;
        acc.fp += c.fp;
        acc.fn_ += c.fn_;
        acc.tn += c.tn;
        acc
    });

    Ok(MetricsReport {
        examples: n,
        subset_accuracy: exact as f64 / n as f64,
        micro_f1: pooled.f1(),
        macro_f1: per_label.iter().map(|lm| lm.f1).sum::<f64>() / NUM_LABELS as f64,
        samples_f1: samples_sum / n as f64,
        per_label,
    })
}

/// Cohen's kappa between two binary raters: (p_o − p_e)/(1 − p_e) with
/// marginal-product chance agreement. When both raters are constant and
/// identical (p_e = 1, which forces p_o = 1) the score is 1.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            pred: a.len(),
            gold: b.len(),
        });
    }
    let n = a.len() as f64;
    let both_yes = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let both_no = a.iter().zip(b).filter(|(x, y)| !**x && !**y).count() as f64;
    let a_yes = a.iter().filter(|x| **x).count() as f64;
    let b_yes = b.iter().filter(|y| **y).count() as f64;
    let p_o = (both_yes + both_no) / n;
    let p_e = (a_yes / n) * (b_yes / n) + (1.0 - a_yes / n) * (1.0 - b_yes / n);
    if (1.0 - p_e).abs() < 1e-15 {
        // degenerate: identical constant raters
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// One annotator's label sets, aligned to a dataset by example id.
#[derive(Clone, Debug)]
pub struct AnnotationSet {
    pub annotator: String,
    /// `(example_id, labels)` pairs.
    pub labels: Vec<(String, LabelSet)>,
}

impl AnnotationSet {
    /// Parses the dataset line format with a trailing annotator column:
    /// `id<TAB>text<TAB>labels<TAB>annotator`. The text field may be empty.
    pub fn from_tsv(content: &str) -> Result<Vec<AnnotationSet>, crate::data::DataError> {
        use std::collections::BTreeMap;
        let mut by_annotator: BTreeMap<String, Vec<(String, LabelSet)>> = BTreeMap::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(crate::data::DataError::BadRecord {
                    line: lineno + 1,
                    expected: 4,
                    found: fields.len(),
                });
            }
            let labels = if fields[2].is_empty() {
                LabelSet::EMPTY
            } else {
                LabelSet::from_names(fields[2].split(','))?
            };
            by_annotator
                .entry(fields[3].to_string())
                .or_default()
                .push((fields[0].to_string(), labels));
        }
        Ok(by_annotator
            .into_iter()
            .map(|(annotator, labels)| AnnotationSet { annotator, labels })
            .collect())
    }

    /// Label sets in the order of `gold`'s example ids.
    fn aligned(&self, gold: &Dataset) -> Result<Vec<LabelSet>, MetricsError> {
        let by_id: std::collections::HashMap<&str, LabelSet> = self
            .labels
            .iter()
            .map(|(id, ls)| (id.as_str(), *ls))
            .collect();
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(gold.len());
        for ex in &gold.examples {
            match by_id.get(ex.id.as_str()) {
                Some(ls) => out.push(*ls),
                None => missing.push(ex.id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(MetricsError::IdMisalignment {
                annotator: self.annotator.clone(),
                missing,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AgreementReport {
    /// Mean pairwise kappa per label, in label order.
    pub per_label_kappa: [f64; NUM_LABELS],
    /// Each annotator scored against the gold labels.
    pub per_annotator: Vec<(String, MetricsReport)>,
}

/// Inter-annotator agreement (mean pairwise Cohen's kappa per label) plus
/// each annotator's metrics against gold.
pub fn agreement_report(
    annotations: &[AnnotationSet],
    gold: &Dataset,
) -> Result<AgreementReport, MetricsError> {
    if annotations.len() < 2 {
        return Err(MetricsError::TooFewAnnotators(annotations.len()));
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let aligned: Vec<(String, Vec<LabelSet>)> = annotations
        .iter()
        .map(|a| Ok((a.annotator.clone(), a.aligned(gold)?)))
        .collect::<Result<_, MetricsError>>()?;

    let mut per_label_kappa = [0.0; NUM_LABELS];
    for (l, slot) in per_label_kappa.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..aligned.len() {
            for j in i + 1..aligned.len() {
                let a: Vec<bool> = aligned[i].1.iter().map(|ls| ls.contains(l)).collect();
                let b: Vec<bool> = aligned[j].1.iter().map(|ls| ls.contains(l)).collect();
                sum += cohens_kappa(&a, &b)?;
                pairs += 1;
            }
        }
        *slot = sum / pairs as f64;
    }

    let gold_sets: Vec<LabelSet> = gold.examples.iter().map(|ex| ex.labels).collect();
    let per_annotator = aligned
        .into_iter()
        .map(|(name, sets)| Ok((name, evaluate(&sets, &gold_sets)?)))
        .collect::<Result<_, MetricsError>>()?;

    Ok(AgreementReport {
        per_label_kappa,
        per_annotator,
    })
}
