//! Fairness and utility measurement: accuracy, macro-F1, per-group
//! per-class false-positive rates, equality-of-opportunity gaps, and
//! adversary leakage.
//!
//! All functions are pure over immutable inputs. Cells whose denominator is
//! empty are reported as undefined with zero support, never as a silent 0.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{encode_batch, head_forward_batch, ModelParams};

/// Gold labels, predicted labels and protected labels for one evaluation,
/// with the set of target classes regarded as toxic (positive).
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub golds: Vec<usize>,
    pub preds: Vec<usize>,
    pub protected: Vec<usize>,
    pub k_y: usize,
    pub k_z: usize,
    pub toxic_classes: Vec<usize>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.golds.len();
        if n == 0 {
            return Err(Error::validation("empty prediction set"));
        }
        if self.preds.len() != n || self.protected.len() != n {
            return Err(Error::validation("prediction set sequences differ in length"));
        }
        if self.toxic_classes.is_empty() {
            return Err(Error::validation("toxic_classes must be non-empty"));
        }
        for &c in &self.toxic_classes {
            if c == 0 || c >= self.k_y {
                return Err(Error::validation(format!(
                    "toxic class {c} invalid: must be in [1, k_y) with 0 reserved for the non-toxic class"
                )));
            }
        }
        for i in 0..n {
            if self.golds[i] >= self.k_y || self.preds[i] >= self.k_y {
                return Err(Error::validation(format!("label out of range at {i}")));
            }
            if self.protected[i] >= self.k_z {
                return Err(Error::validation(format!("protected label out of range at {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.golds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.golds.is_empty()
    }
}

/// A rate with its denominator; `value` is None when the denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub value: Option<f64>,
    pub support: usize,
}

/// Fraction of positions where gold == predicted.
pub fn accuracy(p: &PredictionSet) -> f64 {
    let correct = p
        .golds
        .iter()
        .zip(&p.preds)
        .filter(|(g, pr)| g == pr)
        .count();
    correct as f64 / p.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroF1 {
    pub value: f64,
    /// Classes absent from both gold and predictions; they contribute F1 = 0.
    pub absent_classes: Vec<usize>,
}

/// Unweighted mean of per-class F1 over all k_y classes.
pub fn macro_f1(p: &PredictionSet) -> MacroF1 {
    let mut absent = Vec::new();
    let mut sum = 0.0;
    for c in 0..p.k_y {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for i in 0..p.len() {
            match (p.golds[i] == c, p.preds[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            absent.push(c);
            continue; // contributes 0
        }
        if tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    MacroF1 {
        value: sum / p.k_y as f64,
        absent_classes: absent,
    }
}

/// FPR(c, g) = |{gold != c, pred = c, group g}| / |{gold != c, group g}| for
/// every toxic class c and protected group g.
pub fn fpr_by_group(p: &PredictionSet) -> Vec<((usize, usize), RateCell)> {
    let mut out = Vec::new();
    for &c in &p.toxic_classes {
        for g in 0..p.k_z {
            let mut denom = 0usize;
            let mut num = 0usize;
            for i in 0..p.len() {
                if p.protected[i] == g && p.golds[i] != c {
                    denom += 1;
                    if p.preds[i] == c {
                        num += 1;
                    }
                }
            }
            let value = if denom > 0 {
                Some(num as f64 / denom as f64)
            } else {
                None
            };
            out.push(((c, g), RateCell { value, support: denom }));
        }
    }
    out
}

/// TPR(c, g) = recall of class c within group g.
pub fn tpr_by_group(p: &PredictionSet) -> Vec<((usize, usize), RateCell)> {
    let mut out = Vec::new();
    for &c in &p.toxic_classes {
        for g in 0..p.k_z {
            let mut denom = 0usize;
            let mut num = 0usize;
            for i in 0..p.len() {
                if p.protected[i] == g && p.golds[i] == c {
                    denom += 1;
                    if p.preds[i] == c {
                        num += 1;
                    }
                }
            }
            let value = if denom > 0 {
                Some(num as f64 / denom as f64)
            } else {
                None
            };
            out.push(((c, g), RateCell { value, support: denom }));
        }
    }
    out
}

/// A signed per-class gap (group 1 minus group 0); None when either side
/// has zero support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapCell {
    pub class: usize,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessGaps {
    /// FPR(c, 1) - FPR(c, 0): positive means more false positives for the
    /// protected group.
    pub fpr_gap: Vec<GapCell>,
    /// TPR(c, 1) - TPR(c, 0), the Equality of Opportunity gap.
    pub eoo_gap: Vec<GapCell>,
}

fn gap_from(rates: &[((usize, usize), RateCell)], toxic_classes: &[usize]) -> Vec<GapCell> {
    toxic_classes
        .iter()
        .map(|&c| {
            let get = |g: usize| {
                rates
                    .iter()
                    .find(|((cc, gg), _)| *cc == c && *gg == g)
                    .and_then(|(_, cell)| cell.value)
            };
            let value = match (get(1), get(0)) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            GapCell { class: c, value }
        })
        .collect()
}

/// Signed FPR and equality-of-opportunity gaps between groups 1 and 0.
pub fn fairness_gaps(p: &PredictionSet) -> FairnessGaps {
    FairnessGaps {
        fpr_gap: gap_from(&fpr_by_group(p), &p.toxic_classes),
        eoo_gap: gap_from(&tpr_by_group(p), &p.toxic_classes),
    }
}

/// Chunk size for read-only evaluation fan-out; fixed so that repeated
/// evaluations of the same data are bit-identical regardless of where the
/// pooled representations were computed.
pub const EVAL_CHUNK: usize = 256;

/// Pooled encoder outputs for a dataset, one (2*d_h, chunk) matrix per
/// EVAL_CHUNK block, computed with a deterministic parallel fan-out. The
/// training loop reuses these across the epochs of an adversary phase,
/// where the encoder is frozen.
pub fn encode_cache(params: &ModelParams, data: &[EncodedExample]) -> Result<Vec<Array2<f64>>> {
    data.par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            Ok(encode_batch(&params.encoder, &refs)?.h_out)
        })
        .collect()
}

/// Argmax class per example under the classifier head.
pub fn predict_classes(params: &ModelParams, data: &[EncodedExample]) -> Result<Vec<usize>> {
    let cache = encode_cache(params, data)?;
    Ok(cache
        .iter()
        .flat_map(|h| argmax_columns(&head_forward_batch(&params.classifier, h).p))
        .collect())
}

fn argmax_columns(p: &Array2<f64>) -> Vec<usize> {
    (0..p.ncols())
        .map(|i| {
            let col = p.column(i);
            let mut best = 0;
            for j in 1..col.len() {
                if col[j] > col[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of each current adversary at predicting the protected label
/// from the encoder output, plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageReport {
    pub per_adversary: Vec<f64>,
    pub mean: f64,
}

pub fn adversary_leakage(params: &ModelParams, data: &[EncodedExample]) -> Result<LeakageReport> {
    let cache = encode_cache(params, data)?;
    Ok(adversary_leakage_cached(params, &cache, data))
}

pub fn adversary_leakage_cached(
    params: &ModelParams,
    cache: &[Array2<f64>],
    data: &[EncodedExample],
) -> LeakageReport {
    let n = data.len() as f64;
    let per_adversary: Vec<f64> = params
        .adversaries
        .iter()
        .map(|adv| {
            let mut correct = 0usize;
            let mut idx = 0usize;
            for h in cache {
                for pred in argmax_columns(&head_forward_batch(adv, h).p) {
                    if pred == data[idx].protected {
                        correct += 1;
                    }
                    idx += 1;
                }
            }
            correct as f64 / n
        })
        .collect();
    let mean = per_adversary.iter().sum::<f64>() / per_adversary.len() as f64;
    LeakageReport { per_adversary, mean }
}

/// Full audit of a model on a dataset: classifier metrics plus (optionally)
/// current-adversary leakage, all from a single encoding pass.
pub fn audit(
    params: &ModelParams,
    data: &[EncodedExample],
    toxic_classes: &[usize],
    dataset_name: &str,
    include_adversary: bool,
) -> Result<AuditReport> {
    let cache = encode_cache(params, data)?;
    audit_cached(params, &cache, data, toxic_classes, dataset_name, include_adversary)
}

/// As [`audit`] but over precomputed pooled representations.
pub fn audit_cached(
    params: &ModelParams,
    cache: &[Array2<f64>],
    data: &[EncodedExample],
    toxic_classes: &[usize],
    dataset_name: &str,
    include_adversary: bool,
) -> Result<AuditReport> {
    let preds: Vec<usize> = cache
        .iter()
        .flat_map(|h| argmax_columns(&head_forward_batch(&params.classifier, h).p))
        .collect();
    let pset = PredictionSet {
        golds: data.iter().map(|ex| ex.target).collect(),
        preds,
        protected: data.iter().map(|ex| ex.protected).collect(),
        k_y: params.dims.k_y,
        k_z: params.dims.k_z,
        toxic_classes: toxic_classes.to_vec(),
    };
    let leakage = if include_adversary {
        Some(adversary_leakage_cached(params, cache, data))
    } else {
        None
    };
    AuditReport::from_predictions(dataset_name, &pset, leakage.as_ref())
}

/// The audit record behind the evaluation tables: utility, per-group FPR,
/// both fairness gaps, adversary leakage, and the support of every cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub dataset: String,
    pub n_examples: usize,
    pub k_y: usize,
    pub k_z: usize,
    pub toxic_classes: Vec<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_absent_classes: Vec<usize>,
    pub fpr: Vec<FprEntry>,
    pub tpr: Vec<FprEntry>,
    pub fpr_gap: Vec<GapCell>,
    pub eoo_gap: Vec<GapCell>,
    pub adversary_dev_accuracy: Option<f64>,
    pub adversary_dev_accuracy_per_head: Vec<f64>,
    /// (target, protected) contingency counts of the evaluated data.
    pub cell_counts: Vec<CellCount>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FprEntry {
    pub class: usize,
    pub group: usize,
    pub value: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellCount {
    pub target: usize,
    pub protected: usize,
    pub count: usize,
}

impl AuditReport {
    pub fn from_predictions(
        dataset: impl Into<String>,
        p: &PredictionSet,
        adversary: Option<&LeakageReport>,
    ) -> Result<AuditReport> {
        p.validate()?;
        let f1 = macro_f1(p);
        let gaps = fairness_gaps(p);
        let to_entries = |rates: Vec<((usize, usize), RateCell)>| {
            rates
                .into_iter()
                .map(|((class, group), cell)| FprEntry {
                    class,
                    group,
                    value: cell.value,
                    support: cell.support,
                })
                .collect::<Vec<_>>()
        };
        let mut counts = std::collections::BTreeMap::new();
        for i in 0..p.len() {
            *counts.entry((p.golds[i], p.protected[i])).or_insert(0usize) += 1;
        }
        Ok(AuditReport {
            dataset: dataset.into(),
            n_examples: p.len(),
            k_y: p.k_y,
            k_z: p.k_z,
            toxic_classes: p.toxic_classes.clone(),
            accuracy: accuracy(p),
            macro_f1: f1.value,
            macro_f1_absent_classes: f1.absent_classes,
            fpr: to_entries(fpr_by_group(p)),
            tpr: to_entries(tpr_by_group(p)),
            fpr_gap: gaps.fpr_gap,
            eoo_gap: gaps.eoo_gap,
            adversary_dev_accuracy: adversary.map(|l| l.mean),
            adversary_dev_accuracy_per_head: adversary
                .map(|l| l.per_adversary.clone())
                .unwrap_or_default(),
            cell_counts: counts
                .into_iter()
                .map(|((target, protected), count)| CellCount {
                    target,
                    protected,
                    count,
                })
                .collect(),
        })
    }

    /// Mean FPR over the toxic classes for one group; None when every cell
    /// is undefined. This is the checkpoint-selection scalar.
    pub fn mean_fpr_for_group(&self, group: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .fpr
            .iter()
            .filter(|e| e.group == group)
            .filter_map(|e| e.value)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// One record of structured text.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Flat CSV, one row per (metric, class, group) cell. Undefined cells
    /// keep an empty value column and their (zero) support.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,group,value,support\n");
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("accuracy,,,{},{}\n", self.accuracy, self.n_examples));
        out.push_str(&format!("macro_f1,,,{},{}\n", self.macro_f1, self.n_examples));
        for e in &self.fpr {
            out.push_str(&format!(
                "fpr,{},{},{},{}\n",
                e.class,
                e.group,
                fmt_opt(e.value),
                e.support
            ));
        }
        for e in &self.tpr {
            out.push_str(&format!(
                "tpr,{},{},{},{}\n",
                e.class,
                e.group,
                fmt_opt(e.value),
                e.support
            ));
        }
        for g in &self.fpr_gap {
            out.push_str(&format!("fpr_gap,{},,{},\n", g.class, fmt_opt(g.value)));
        }
        for g in &self.eoo_gap {
            out.push_str(&format!("eoo_gap,{},,{},\n", g.class, fmt_opt(g.value)));
        }
        if let Some(mean) = self.adversary_dev_accuracy {
            out.push_str(&format!("adversary_dev_accuracy,,,{},{}\n", mean, self.n_examples));
            for (j, v) in self.adversary_dev_accuracy_per_head.iter().enumerate() {
                out.push_str(&format!(
                    "adversary_dev_accuracy,,{j},{v},{}\n",
                    self.n_examples
                ));
            }
        }
        for c in &self.cell_counts {
            out.push_str(&format!(
                "cell_count,{},{},{},{}\n",
                c.target, c.protected, c.count, c.count
            ));
        }
        out
    }
}
