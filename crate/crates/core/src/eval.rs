//! Pair-level classification metrics, binned breakdowns and the two
//! embedding-free / embedding-only baselines.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed_io::{cosine, EmbedError};
use crate::thesaurus::Thesaurus;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("{what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unknown descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

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
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub configuration: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold-positive pairs.
    pub support: usize,
    pub pairs: usize,
    pub confusion: Confusion,
    /// Unweighted mean over labels, when labels were supplied.
    pub macro_scores: Option<Scores>,
}

impl MetricsReport {
    fn from_confusion(configuration: &str, c: Confusion, macro_scores: Option<Scores>) -> Self {
        MetricsReport {
            configuration: configuration.to_string(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            support: c.tp + c.fn_,
            pairs: c.total(),
            confusion: c,
            macro_scores,
        }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), EvalError> {
    if expected == found {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { what, expected, found })
    }
}

pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Micro precision, recall and F1 over pairs, predicting true at
/// `score >= threshold`.
pub fn prf(scores: &[f64], gold: &[bool], threshold: f64) -> Result<MetricsReport, EvalError> {
    prf_predictions("", &threshold_predictions(scores, threshold), gold, None)
}

/// Micro scores from boolean predictions; `labels` (one per pair) adds the
/// macro-over-labels variant.
pub fn prf_predictions(
    configuration: &str,
    predicted: &[bool],
    gold: &[bool],
    labels: Option<&[&str]>,
) -> Result<MetricsReport, EvalError> {
    check_len("gold", predicted.len(), gold.len())?;
    if predicted.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let mut c = Confusion::default();
    for (&p, &g) in predicted.iter().zip(gold) {
        c.add(p, g);
    }
    let macro_scores = match labels {
        Some(labels) => {
            check_len("labels", predicted.len(), labels.len())?;
            let mut per: BTreeMap<&str, Confusion> = BTreeMap::new();
            for ((&p, &g), &l) in predicted.iter().zip(gold).zip(labels) {
                per.entry(l).or_default().add(p, g);
            }
            let n = per.len() as f64;
            let sum = per.values().fold((0.0, 0.0, 0.0), |acc, c| {
                (acc.0 + c.precision(), acc.1 + c.recall(), acc.2 + c.f1())
            });
            Some(Scores {
                precision: sum.0 / n,
                recall: sum.1 / n,
                f1: sum.2 / n,
            })
        }
        None => None,
    };
    Ok(MetricsReport::from_confusion(configuration, c, macro_scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub name: String,
    pub confusion: Confusion,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub axis: String,
    pub bins: Vec<Bin>,
}

impl BinnedReport {
    fn build(axis: &str, names: Vec<String>, assignment: &[usize], predicted: &[bool], gold: &[bool]) -> Self {
        let mut conf = vec![Confusion::default(); names.len()];
        for ((&b, &p), &g) in assignment.iter().zip(predicted).zip(gold) {
            conf[b].add(p, g);
        }
        BinnedReport {
            axis: axis.to_string(),
            bins: names
                .into_iter()
                .zip(conf)
                .map(|(name, c)| Bin {
                    name,
                    f1: c.f1(),
                    support: c.total(),
                    confusion: c,
                })
                .collect(),
        }
    }

    /// Sum of the per-bin confusion counts.
    pub fn combined(&self) -> Confusion {
        let mut c = Confusion::default();
        for b in &self.bins {
            c.merge(&b.confusion);
        }
        c
    }

    /// Plot-ready rows: axis, bin, support, tp, fp, fn, tn, f1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["axis", "bin", "support", "tp", "fp", "fn", "tn", "f1"])?;
        for b in &self.bins {
            out.write_record([
                self.axis.clone(),
                b.name.clone(),
                b.support.to_string(),
                b.confusion.tp.to_string(),
                b.confusion.fp.to_string(),
                b.confusion.fn_.to_string(),
                b.confusion.tn.to_string(),
                format!("{:.6}", b.f1),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub const FREQUENCY_BINS: [&str; 5] = ["0", "1", "(1,10]", "(10,100]", "(100,inf)"];

pub fn frequency_bin(count: usize) -> usize {
    match count {
        0 => 0,
        1 => 1,
        2..=10 => 2,
        11..=100 => 3,
        _ => 4,
    }
}

/// F1 per training-frequency bin of each pair's label; labels missing from
/// `train_counts` count as zero-shot.
pub fn f1_by_frequency(
    predicted: &[bool],
    gold: &[bool],
    labels: &[&str],
    train_counts: &BTreeMap<String, usize>,
) -> Result<BinnedReport, EvalError> {
    check_len("gold", predicted.len(), gold.len())?;
    check_len("labels", predicted.len(), labels.len())?;
    let assignment: Vec<usize> = labels
        .iter()
        .map(|l| frequency_bin(train_counts.get(*l).copied().unwrap_or(0)))
        .collect();
    let names = FREQUENCY_BINS.iter().map(|s| s.to_string()).collect();
    Ok(BinnedReport::build("train_frequency", names, &assignment, predicted, gold))
}

/// F1 per rounded mean depth of each pair's label, one bin per depth present.
pub fn f1_by_depth(predicted: &[bool], gold: &[bool], labels: &[&str], th: &Thesaurus) -> Result<BinnedReport, EvalError> {
    check_len("gold", predicted.len(), gold.len())?;
    check_len("labels", predicted.len(), labels.len())?;
    let depths: Vec<usize> = labels
        .iter()
        .map(|l| {
            th.get(l)
                .map(|d| d.depth().round() as usize)
                .ok_or_else(|| EvalError::UnknownDescriptor(l.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let present: Vec<usize> = {
        let mut v = depths.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let assignment: Vec<usize> = depths.iter().map(|d| present.binary_search(d).unwrap()).collect();
    let names = present.iter().map(|d| d.to_string()).collect();
    Ok(BinnedReport::build("depth", names, &assignment, predicted, gold))
}

/// True iff the lowercased label occurs in the lowercased abstract.
pub fn baseline_isin(label: &str, abstract_text: &str) -> bool {
    abstract_text.to_lowercase().contains(&label.to_lowercase())
}

pub fn baseline_cos_sim(label_emb: &[f64], doc_emb: &[f64], threshold: f64) -> Result<bool, EvalError> {
    Ok(cosine(label_emb, doc_emb)? >= threshold)
}

/// Threshold on the `[0, 1]` grid with step 0.01 that maximises F1; ties go
/// to the lowest threshold.
pub fn select_threshold(scores: &[f64], gold: &[bool]) -> Result<(f64, f64), EvalError> {
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let f1 = prf(scores, gold, t)?.f1;
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_confusion() {
        // tp=3 fp=1 fn=2 tn=4
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05, 0.0];
        let gold = [true, true, true, false, true, true, false, false, false, false];
        let r = prf(&scores, &gold, 0.5).unwrap();
        assert_eq!(r.confusion, Confusion { tp: 3, fp: 1, fn_: 2, tn: 4 });
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.6);
        assert!((r.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn degenerate_reports() {
        let gold = [true, false, true];
        let perfect = prf(&[1.0, 0.0, 1.0], &gold, 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = prf(&[0.0, 0.0, 0.0], &gold, 0.5).unwrap();
        assert_eq!((none.recall, none.f1), (0.0, 0.0));
        assert!(matches!(prf(&[], &[], 0.5), Err(EvalError::EmptyEvaluation)));
    }

    #[test]
    fn frequency_bins_partition_the_pairs() {
        let labels = ["a", "b", "c", "d", "e", "a"];
        let counts = BTreeMap::from([("b".to_string(), 1), ("c".to_string(), 7), ("d".to_string(), 50), ("e".to_string(), 500)]);
        let pred = [true, false, true, true, false, false];
        let gold = [true, true, true, false, false, true];
        let r = f1_by_frequency(&pred, &gold, &labels, &counts).unwrap();
        let supports: Vec<usize> = r.bins.iter().map(|b| b.support).collect();
        assert_eq!(supports, vec![2, 1, 1, 1, 1]);
        let global = prf_predictions("", &pred, &gold, None).unwrap().confusion;
        assert_eq!(r.combined(), global);
    }

    #[test]
    fn isin_is_case_insensitive() {
        assert!(baseline_isin("Treatment", "novel TREATMENT options"));
        assert!(!baseline_isin("Forecasting", "no such word"));
    }

    #[test]
    fn threshold_search_matches_grid_oracle() {
        let scores = [0.91, 0.72, 0.55, 0.43, 0.38, 0.12];
        let gold = [true, true, false, true, false, false];
        let (t, f1) = select_threshold(&scores, &gold).unwrap();
        let oracle = (0..=100)
            .map(|i| prf(&scores, &gold, i as f64 / 100.0).unwrap().f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(f1, oracle);
        assert_eq!(prf(&scores, &gold, t).unwrap().f1, oracle);
    }
}
