//! Precision, recall and F for predicted MWE spans.
//!
//! Two views: MWE-based (a prediction counts only if its position set equals
//! a gold span's) and token-based (every predicted token that is also a gold
//! token counts). Categories are ignored. All zero denominators give 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::MweSpan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Scores {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    #[serde(rename = "f")]
    pub f1: f64,
    pub tp: usize,
    #[serde(rename = "pred")]
    pub pred_count: usize,
    #[serde(rename = "gold")]
    pub gold_count: usize,
}

impl Scores {
    pub fn from_counts(tp: usize, pred_count: usize, gold_count: usize) -> Self {
        Self::from_split_counts(tp, tp, pred_count, gold_count)
    }

    /// `tp_pred` true predictions out of `pred_count`, `tp_gold` found gold
    /// spans out of `gold_count`.
    fn from_split_counts(tp_pred: usize, tp_gold: usize, pred_count: usize, gold_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp_pred, pred_count);
        let recall = ratio(tp_gold, gold_count);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            precision,
            recall,
            f1,
            tp: tp_gold,
            pred_count,
            gold_count,
        }
    }
}

fn check_lengths(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Exact matches within one sentence, each gold span used at most once.
fn exact_matches<'a>(gold: impl Iterator<Item = &'a MweSpan>, pred: impl Iterator<Item = &'a MweSpan>) -> usize {
    let mut remaining: BTreeMap<&[usize], usize> = BTreeMap::new();
    for g in gold {
        *remaining.entry(&g.positions).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = remaining.get_mut(p.positions.as_slice()) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    tp
}

fn filtered_prf(
    gold: &[Vec<MweSpan>],
    pred: &[Vec<MweSpan>],
    keep: impl Fn(&MweSpan) -> bool,
) -> Result<Scores> {
    check_lengths(gold, pred)?;
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        n_gold += g.iter().filter(|s| keep(s)).count();
        n_pred += p.iter().filter(|s| keep(s)).count();
        tp += exact_matches(g.iter().filter(|s| keep(s)), p.iter().filter(|s| keep(s)));
    }
    Ok(Scores::from_counts(tp, n_pred, n_gold))
}

pub fn mwe_based_prf(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<Scores> {
    filtered_prf(gold, pred, |_| true)
}

/// Set intersection of (sentence, position) pairs covered by spans.
pub fn token_based_prf(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<Scores> {
    check_lengths(gold, pred)?;
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gt: BTreeSet<usize> = g.iter().flat_map(|s| s.positions.iter().copied()).collect();
        let pt: BTreeSet<usize> = p.iter().flat_map(|s| s.positions.iter().copied()).collect();
        tp += gt.intersection(&pt).count();
        n_gold += gt.len();
        n_pred += pt.len();
    }
    Ok(Scores::from_counts(tp, n_pred, n_gold))
}

pub fn gap_size(span: &MweSpan) -> usize {
    span.gap_size()
}

/// MWE-based scores restricted to spans with a gap, on both sides.
pub fn discontinuous_scores(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<Scores> {
    filtered_prf(gold, pred, |s| s.gap_size() >= 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    /// Gap size; the top bucket also holds every larger gap.
    pub gap: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GapReport {
    pub max_bucket: usize,
    /// Non-empty buckets in increasing gap order.
    pub rows: Vec<GapRow>,
    /// Sum over buckets with gap >= 1.
    pub discontinuous: Scores,
}

impl GapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gap,precision,recall,f1,gold_count,pred_count\n");
        for row in &self.rows {
            let s = &row.scores;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.gap,
                s.precision, s.recall, s.f1, s.gold_count, s.pred_count
            );
        }
        out
    }
}

/// MWE-based scores bucketed by gap size (gaps >= `max_bucket` share the
/// top bucket). Gold spans are found against all predictions; predictions
/// are bucketed by their own gap. An exact match always lands in the same
/// bucket on both sides.
pub fn gap_report(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>], max_bucket: usize) -> Result<GapReport> {
    check_lengths(gold, pred)?;
    let max_bucket = max_bucket.max(1);
    let bucket = |s: &MweSpan| s.gap_size().min(max_bucket);
    // bucket -> (tp_gold, tp_pred, gold, pred)
    let mut counts: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        for (gi, gs) in g.iter().enumerate() {
            let c = counts.entry(bucket(gs)).or_default();
            c[2] += 1;
            // the k-th copy of a position set is found iff at least k
            // predictions carry it
            let rank = g[..gi].iter().filter(|o| o.positions == gs.positions).count();
            if p.iter().filter(|ps| ps.positions == gs.positions).count() > rank {
                c[0] += 1;
            }
        }
        for (pi, ps) in p.iter().enumerate() {
            let c = counts.entry(bucket(ps)).or_default();
            c[3] += 1;
            let rank = p[..pi].iter().filter(|o| o.positions == ps.positions).count();
            if g.iter().filter(|gs| gs.positions == ps.positions).count() > rank {
                c[1] += 1;
            }
        }
    }
    let rows: Vec<GapRow> = counts
        .iter()
        .map(|(&gap, c)| GapRow {
            gap,
            scores: Scores::from_split_counts(c[1], c[0], c[3], c[2]),
        })
        .collect();
    let disc = counts
        .iter()
        .filter(|(&gap, _)| gap >= 1)
        .fold([0; 4], |acc, (_, c)| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2], acc[3] + c[3]]);
    Ok(GapReport {
        max_bucket,
        rows,
        discontinuous: Scores::from_split_counts(disc[1], disc[0], disc[3], disc[2]),
    })
}

/// Reference MWE-based scorer for small inputs: tries every injective
/// assignment of predictions to gold spans and keeps the one with the most
/// exact matches.
pub fn brute_force_oracle(gold: &[Vec<MweSpan>], pred: &[Vec<MweSpan>]) -> Result<Scores> {
    check_lengths(gold, pred)?;
    fn best(pred: &[Vec<usize>], gold: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        let Some((first, rest)) = pred.split_first() else {
            return 0;
        };
        // leave this prediction unmatched
        let mut top = best(rest, gold, used);
        for j in 0..gold.len() {
            if !used[j] && gold[j] == *first {
                used[j] = true;
                top = top.max(1 + best(rest, gold, used));
                used[j] = false;
            }
        }
        top
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gp: Vec<Vec<usize>> = g.iter().map(|s| s.positions.clone()).collect();
        let pp: Vec<Vec<usize>> = p.iter().map(|s| s.positions.clone()).collect();
        tp += best(&pp, &gp, &mut vec![false; gp.len()]);
        n_gold += gp.len();
        n_pred += pp.len();
    }
    Ok(Scores::from_counts(tp, n_pred, n_gold))
}
