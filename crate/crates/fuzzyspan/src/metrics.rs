//! Entity-level evaluation and the metrics log written during training.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boundary::SpanAnnotation;
use crate::model::SpanPrediction;
use crate::{Error, Result};

/// Micro-averaged exact-match precision, recall, and F1 over entities.
///
/// An entity is the triple (start, end, type); a prediction counts as a true
/// positive only on exact agreement. Duplicate triples on either side count
/// with multiplicity. Empty prediction and reference sets yield (0, 0, 0).
pub fn entity_f1(
    predictions: &[Vec<SpanPrediction<f64>>],
    references: &[Vec<SpanAnnotation>],
) -> Result<(f64, f64, f64)> {
    if predictions.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prediction rows vs {} reference rows",
            predictions.len(),
            references.len()
        )));
    }
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_ref = 0usize;
    for (preds, refs) in predictions.iter().zip(references) {
        n_pred += preds.len();
        n_ref += refs.len();
        let mut counts: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for r in refs {
            *counts.entry((r.start, r.end, r.type_id)).or_default() += 1;
        }
        for p in preds {
            if let Some(c) = counts.get_mut(&(p.start, p.end, p.type_id)) {
                if *c > 0 {
                    *c -= 1;
                    tp += 1;
                }
            }
        }
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_ref == 0 { 0.0 } else { tp as f64 / n_ref as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Running mean of the boundary BCE term since the previous record.
    pub loss_ori: f64,
    /// Running mean of the fuzzy KL term since the previous record.
    pub loss_fs: f64,
    /// Effective span length l = delta * l_span per head, empty without FSA.
    pub head_l: Vec<f64>,
}

/// Serializes records as CSV with one `l_head{i}` column per head.
///
/// All records must agree on the number of heads. Floats are written with
/// `{:?}` so parsing the file back reproduces them bit for bit.
pub fn records_to_csv(records: &[MetricRecord]) -> Result<String> {
    let heads = records.first().map_or(0, |r| r.head_l.len());
    let mut out = String::from("step,split,precision,recall,f1,loss_ori,loss_fs");
    for i in 0..heads {
        write!(out, ",l_head{i}").unwrap();
    }
    out.push('\n');
    for r in records {
        if r.head_l.len() != heads {
            return Err(Error::LengthMismatch(format!(
                "record at step {} has {} head columns, expected {heads}",
                r.step,
                r.head_l.len()
            )));
        }
        write!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.split, r.precision, r.recall, r.f1, r.loss_ori, r.loss_fs
        )
        .unwrap();
        for l in &r.head_l {
            write!(out, ",{l:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
