use serde::{Deserialize, Serialize};

use crate::data::class_name;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Ratio with the `0/0 → 0` convention.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassMetrics {
    pub fn from_counts(name: String, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            name,
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub threshold: f64,
    pub classes: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    /// Mean binary cross-entropy, when logits were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl MetricsReport {
    /// `predictions` and `labels` are row-major `[records, classes]` 0/1.
    pub fn from_binary(predictions: &[u8], labels: &[u8], classes: usize, threshold: f64) -> Result<Self> {
        if classes == 0 || predictions.len() != labels.len() || labels.len() % classes != 0 {
            return Err(Error::shape(
                "metrics",
                format!("{} predictions vs {} labels over {classes} classes", predictions.len(), labels.len()),
            ));
        }
        let records = labels.len() / classes;
        let mut counts = vec![[0u64; 4]; classes];
        for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
            let slot = match (p != 0, y != 0) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            counts[i % classes][slot] += 1;
        }
        let per_class: Vec<ClassMetrics> = counts
            .iter()
            .enumerate()
            .map(|(k, c)| ClassMetrics::from_counts(class_name(k), c[0], c[1], c[2], c[3]))
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
        let macro_avg = MacroMetrics {
            accuracy: mean(|c| c.accuracy),
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        };
        Ok(MetricsReport {
            records,
            threshold,
            classes: per_class,
            macro_avg,
            loss: None,
        })
    }

    /// Threshold `σ(logit) ≥ threshold` per entry.
    pub fn from_logits(logits: &[f64], labels: &[u8], classes: usize, threshold: f64) -> Result<Self> {
        let preds: Vec<u8> = logits.iter().map(|&z| (sigmoid(z) >= threshold) as u8).collect();
        Self::from_binary(&preds, labels, classes, threshold)
    }

    /// Per-class F1 as an aligned text table with a macro row.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10}{:>6}{:>6}{:>6}{:>6}{:>10}{:>10}{:>10}{:>10}\n", "class", "tp", "fp", "fn", "tn", "acc", "prec", "recall", "f1");
        for c in &self.classes {
            out += &format!(
                "{:<10}{:>6}{:>6}{:>6}{:>6}{:>10.4}{:>10.4}{:>10.4}{:>10.4}\n",
                c.name, c.tp, c.fp, c.fn_, c.tn, c.accuracy, c.precision, c.recall, c.f1
            );
        }
        let m = &self.macro_avg;
        out += &format!(
            "{:<10}{:>24}{:>10.4}{:>10.4}{:>10.4}{:>10.4}\n",
            "macro", "", m.accuracy, m.precision, m.recall, m.f1
        );
        out
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
