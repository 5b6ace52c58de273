use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved class for predictions that contain no known label.
pub const NONE_CLASS: &str = "none";

/// Case-fold and collapse runs of whitespace to one space.
pub fn normalize(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether the normalized gold answer occurs inside the normalized
/// prediction.
pub fn is_correct(pred: &str, gold: &str) -> bool {
    normalize(pred).contains(&normalize(gold))
}

pub fn accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold answers",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| is_correct(p, g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Index of the first class (in the given order) contained in `pred`.
pub fn map_to_class(pred: &str, classes: &[String]) -> Option<usize> {
    let p = normalize(pred);
    classes.iter().position(|c| p.contains(&normalize(c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub weighted_f1: f64,
    pub per_class: BTreeMap<String, ClassStats>,
}

/// Support-weighted mean of per-class F1. Each prediction is assigned the
/// first class it contains, or [`NONE_CLASS`].
pub fn weighted_f1(preds: &[String], golds: &[String], classes: &[String]) -> Result<F1Report> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold answers",
            preds.len(),
            golds.len()
        )));
    }
    let norm: Vec<String> = classes.iter().map(|c| normalize(c)).collect();
    let k = classes.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (p, g) in preds.iter().zip(golds) {
        let gi = norm
            .iter()
            .position(|c| *c == normalize(g))
            .ok_or_else(|| Error::Label(format!("gold label `{g}` is not one of {classes:?}")))?;
        support[gi] += 1;
        match map_to_class(p, classes) {
            Some(pi) if pi == gi => tp[gi] += 1,
            Some(pi) => fp[pi] += 1,
            None => {}
        }
    }
    let n = golds.len();
    let mut weighted = 0.0;
    let mut per_class = BTreeMap::new();
    for c in 0..k {
        let precision = if tp[c] + fp[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        };
        let recall = if support[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / support[c] as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if n > 0 {
            weighted += support[c] as f64 / n as f64 * f1;
        }
        per_class.insert(
            classes[c].clone(),
            ClassStats {
                precision,
                recall,
                f1,
                support: support[c],
            },
        );
    }
    Ok(F1Report {
        weighted_f1: weighted,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn containment() {
        assert!(is_correct("The answer is positive.", "positive"));
        assert!(is_correct(
            "  POSITIVE\n\n sentiment",
            "Positive  sentiment"
        ));
        assert!(!is_correct("neg", "negative"));
    }

    #[test]
    fn hand_example() {
        let golds = s(&["A", "A", "B"]);
        let preds = s(&["A", "B", "B"]);
        assert!((accuracy(&preds, &golds).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = weighted_f1(&preds, &golds, &s(&["A", "B"])).unwrap();
        assert!((r.weighted_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class["A"].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_none_is_zero() {
        let r = weighted_f1(&s(&["x", "y"]), &s(&["A", "B"]), &s(&["A", "B"])).unwrap();
        assert_eq!(r.weighted_f1, 0.0);
    }

    #[test]
    fn unknown_gold() {
        assert!(matches!(
            weighted_f1(&s(&["A"]), &s(&["C"]), &s(&["A", "B"])),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            accuracy(&s(&["A"]), &s(&[])),
            Err(Error::Input(_))
        ));
    }
}
