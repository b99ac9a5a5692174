//! Consistency metrics between predicted and human scores: pairwise order
//! accuracy, Kendall's tau-b, and Spearman's rho.
//!
//! Zero-variance inputs make the rank correlations undefined; those cases are
//! reported as an explicit marker (`MetricError::ZeroVariance`), never as 0.
//! [`metric_report`] folds the markers into `None` fields, which render as
//! `/` in tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{EvaluationRecord, TaskId};
use crate::gateway::ScoredPrediction;
use crate::util::format_metric;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("input lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 observations, got {n}")]
    TooFew { n: usize },
    #[error("non-finite value in {side} input")]
    NonFinite { side: &'static str },
    #[error("{side} input has zero variance; correlation undefined")]
    ZeroVariance { side: &'static str },
    #[error("no record pair with distinct gold scores; accuracy undefined")]
    NoEligiblePairs,
    #[error("empty prediction set")]
    EmptyPredictions,
    #[error("prediction references unknown record {id:?}")]
    UnknownRecord { id: String },
    #[error("record {id:?} has no human score")]
    UnlabeledRecord { id: String },
    #[error("prediction for record {id:?} is a parse-failure marker")]
    FailurePrediction { id: String },
    #[error("duplicate prediction for record {id:?}")]
    DuplicatePrediction { id: String },
}

/// How record pairs are formed for pairwise accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Pairs only within the same question (default).
    #[default]
    PerQuestion,
    /// Pairs across the whole prediction set.
    Global,
}

/// Metric bundle for one task. `n_records` counts every prediction
/// attempted; `n_failures` of those were parse-failure markers and are
/// excluded from all three metrics. `None` metric values are undefined
/// (zero variance or no eligible pair), rendered as `/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_id: TaskId,
    pub n_records: usize,
    pub n_failures: usize,
    pub accuracy: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub spearman_rho: Option<f64>,
}

/// Which single number summarizes a report when one must be picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Accuracy,
    Kendall,
    Spearman,
    #[default]
    MeanOfThree,
}

impl MetricReport {
    /// Value of the chosen selection metric; `None` when any component the
    /// metric needs is undefined.
    pub fn selection_value(&self, metric: SelectionMetric) -> Option<f64> {
        match metric {
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::Kendall => self.kendall_tau,
            SelectionMetric::Spearman => self.spearman_rho,
            SelectionMetric::MeanOfThree => {
                match (self.accuracy, self.kendall_tau, self.spearman_rho) {
                    (Some(a), Some(k), Some(s)) => Some((a + k + s) / 3.0),
                    _ => None,
                }
            }
        }
    }

    /// One row of `Acc. Ken. Spear.` cells, four decimals, `/` when undefined.
    pub fn table_row(&self) -> String {
        format!(
            "{} {} {}",
            format_metric(self.accuracy),
            format_metric(self.kendall_tau),
            format_metric(self.spearman_rho)
        )
    }
}

fn validate_vectors(xs: &[f64], ys: &[f64]) -> Result<(), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFew { n: xs.len() });
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { side: "first" });
    }
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { side: "second" });
    }
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return Err(MetricError::ZeroVariance { side: "first" });
    }
    if ys.windows(2).all(|w| w[0] == w[1]) {
        return Err(MetricError::ZeroVariance { side: "second" });
    }
    Ok(())
}

/// Kendall's tau-b rank correlation with tie correction.
///
/// Computed with the sort-and-merge counting scheme: sort by the first
/// coordinate, count tie runs, then count discordant pairs as merge-sort
/// swaps on the second coordinate.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    validate_vectors(xs, ys)?;
    let n = xs.len();

    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let run_pairs = |len: u64| len * (len - 1) / 2;

    // Tie runs in x, and joint (x, y) tie runs, over the x-sorted order.
    let mut tied_x: u64 = 0;
    let mut tied_xy: u64 = 0;
    let mut x_run: u64 = 1;
    let mut xy_run: u64 = 1;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            x_run += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                xy_run += 1;
            } else {
                tied_xy += run_pairs(xy_run);
                xy_run = 1;
            }
        } else {
            tied_x += run_pairs(x_run);
            x_run = 1;
            tied_xy += run_pairs(xy_run);
            xy_run = 1;
        }
    }
    tied_x += run_pairs(x_run);
    tied_xy += run_pairs(xy_run);

    // Merge sort on y counting swaps; equal keys never count as swaps, so the
    // swap total is exactly the number of discordant pairs.
    let mut keys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0f64; n];
    let mut swaps: u64 = 0;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid || j < end {
                if i < mid && (j >= end || keys[i] <= keys[j]) {
                    buf[k] = keys[i];
                    i += 1;
                } else {
                    buf[k] = keys[j];
                    j += 1;
                    swaps += (mid - i) as u64;
                }
                k += 1;
            }
            keys[start..end].copy_from_slice(&buf[start..end]);
            start = end;
        }
        width *= 2;
    }

    // Tie runs in y over the y-sorted order.
    let mut tied_y: u64 = 0;
    let mut y_run: u64 = 1;
    for i in 1..n {
        if keys[i] == keys[i - 1] {
            y_run += 1;
        } else {
            tied_y += run_pairs(y_run);
            y_run = 1;
        }
    }
    tied_y += run_pairs(y_run);

    let total = run_pairs(n as u64) as f64;
    let concordant_minus_discordant =
        total - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    let denom = ((total - tied_x as f64) * (total - tied_y as f64)).sqrt();
    Ok((concordant_minus_discordant / denom).clamp(-1.0, 1.0))
}

/// Average (mid) ranks, 1-based, ties share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean 1-based rank.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    validate_vectors(xs, ys)?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mean_x = rx.iter().sum::<f64>() / n;
    let mean_y = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    // Variance was checked on the raw values; ranks preserve it.
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of record pairs whose predicted order matches the human order.
///
/// Pairs are formed within each group (question or global), only between
/// records with distinct gold scores. A predicted tie on such a pair counts
/// as a disagreement. Groups without an eligible pair contribute nothing;
/// if no group has one the metric is undefined.
pub fn pairwise_accuracy(
    preds: &[ScoredPrediction],
    records: &[EvaluationRecord],
    grouping: Grouping,
) -> Result<f64, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::EmptyPredictions);
    }
    let by_id: BTreeMap<&str, &EvaluationRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();

    // (group key, gold, predicted)
    let mut entries: Vec<(&str, i16, i16)> = Vec::with_capacity(preds.len());
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for pred in preds {
        let id = pred.record_id.as_str();
        if seen.insert(id, ()).is_some() {
            return Err(MetricError::DuplicatePrediction { id: id.to_string() });
        }
        let record = by_id
            .get(id)
            .ok_or_else(|| MetricError::UnknownRecord { id: id.to_string() })?;
        let gold = record
            .human_score
            .ok_or_else(|| MetricError::UnlabeledRecord { id: id.to_string() })?;
        let predicted = pred
            .predicted_score
            .ok_or_else(|| MetricError::FailurePrediction { id: id.to_string() })?;
        let group = match grouping {
            Grouping::PerQuestion => record.question_id.as_str(),
            Grouping::Global => "",
        };
        entries.push((group, i16::from(gold), i16::from(predicted)));
    }

    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut eligible = 0u64;
    let mut agree = 0u64;
    let mut start = 0;
    while start < entries.len() {
        let mut end = start;
        while end + 1 < entries.len() && entries[end + 1].0 == entries[start].0 {
            end += 1;
        }
        for i in start..=end {
            for j in (i + 1)..=end {
                let (_, gold_i, pred_i) = entries[i];
                let (_, gold_j, pred_j) = entries[j];
                if gold_i == gold_j {
                    continue;
                }
                eligible += 1;
                if (pred_i - pred_j).signum() == (gold_i - gold_j).signum() {
                    agree += 1;
                }
            }
        }
        start = end + 1;
    }

    if eligible == 0 {
        return Err(MetricError::NoEligiblePairs);
    }
    Ok(agree as f64 / eligible as f64)
}

/// Bundle the three metrics plus counts for one task.
///
/// Parse-failure predictions are excluded from every metric and tallied in
/// `n_failures`. Undefined metrics (zero variance, no eligible pairs, fewer
/// than two scored records) become `None`; structural problems (unknown or
/// unlabeled records, duplicates) stay hard errors.
pub fn metric_report(
    task_id: TaskId,
    preds: &[ScoredPrediction],
    records: &[EvaluationRecord],
    grouping: Grouping,
) -> Result<MetricReport, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::EmptyPredictions);
    }
    let scored: Vec<ScoredPrediction> = preds
        .iter()
        .filter(|p| p.predicted_score.is_some())
        .cloned()
        .collect();
    let n_failures = preds.len() - scored.len();

    let soften = |r: Result<f64, MetricError>| -> Result<Option<f64>, MetricError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(
                MetricError::ZeroVariance { .. }
                | MetricError::NoEligiblePairs
                | MetricError::TooFew { .. }
                | MetricError::EmptyPredictions,
            ) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let by_id: BTreeMap<&str, &EvaluationRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut gold = Vec::with_capacity(scored.len());
    let mut predicted = Vec::with_capacity(scored.len());
    for pred in &scored {
        let record = by_id
            .get(pred.record_id.as_str())
            .ok_or_else(|| MetricError::UnknownRecord {
                id: pred.record_id.clone(),
            })?;
        let g = record
            .human_score
            .ok_or_else(|| MetricError::UnlabeledRecord {
                id: pred.record_id.clone(),
            })?;
        gold.push(f64::from(g));
        predicted.push(f64::from(pred.predicted_score.expect("filtered")));
    }

    let accuracy = soften(if scored.is_empty() {
        Err(MetricError::EmptyPredictions)
    } else {
        pairwise_accuracy(&scored, records, grouping)
    })?;
    let kendall = soften(kendall_tau(&gold, &predicted))?;
    let spearman = soften(spearman_rho(&gold, &predicted))?;

    Ok(MetricReport {
        task_id,
        n_records: preds.len(),
        n_failures,
        accuracy,
        kendall_tau: kendall,
        spearman_rho: spearman,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, score: Option<u8>) -> ScoredPrediction {
        ScoredPrediction {
            record_id: id.to_string(),
            backend_id: "mock".to_string(),
            instruction_version: 0,
            predicted_score: score,
            reason: String::new(),
            raw_response: String::new(),
            icl_example_ids: vec![],
        }
    }

    fn record(id: &str, qid: &str, gold: Option<u8>) -> EvaluationRecord {
        EvaluationRecord {
            task_id: TaskId::Dialogue,
            question_id: qid.to_string(),
            record_id: id.to_string(),
            question: format!("q {qid}"),
            answer: format!("a {id}"),
            human_score: gold,
        }
    }

    #[test]
    fn tau_identity_and_reversal() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
    }

    #[test]
    fn tau_mixed_case_matches_hand_count() {
        // Pairs of [1,2,3,4] vs [2,1,4,3]: 4 concordant, 2 discordant.
        let tau = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((tau - (4.0 - 2.0) / 6.0).abs() < 1e-15);
    }

    #[test]
    fn tau_errors() {
        assert_eq!(
            kendall_tau(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch { left: 2, right: 1 })
        );
        assert_eq!(kendall_tau(&[1.0], &[1.0]), Err(MetricError::TooFew { n: 1 }));
        assert_eq!(
            kendall_tau(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::ZeroVariance { side: "first" })
        );
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]),
            Err(MetricError::ZeroVariance { side: "second" })
        );
    }

    #[test]
    fn rho_monotone_transform_is_one() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let cubed: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        assert!((spearman_rho(&xs, &cubed).unwrap() - 1.0).abs() < 1e-12);
        let reversed: Vec<f64> = xs.iter().rev().copied().collect();
        assert!((spearman_rho(&xs, &reversed).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_with_ties_matches_definition() {
        // xs = [1,2,2,3] -> ranks [1, 2.5, 2.5, 4]; ys = [1,3,2,4] -> ranks
        // [1,3,2,4]. Pearson of those rank vectors:
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        let rx = [1.0, 2.5, 2.5, 4.0];
        let ry = [1.0, 3.0, 2.0, 4.0];
        let mx = 2.5;
        let my = 2.5;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        assert!((rho - cov / (vx * vy).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_perfect_and_reversed() {
        let records: Vec<_> = (1..=4).map(|i| record(&format!("r{i}"), "q", Some(i))).collect();
        let perfect: Vec<_> = (1..=4).map(|i| pred(&format!("r{i}"), Some(i))).collect();
        assert_eq!(
            pairwise_accuracy(&perfect, &records, Grouping::PerQuestion).unwrap(),
            1.0
        );
        let reversed: Vec<_> = (1..=4).map(|i| pred(&format!("r{i}"), Some(6 - i))).collect();
        assert_eq!(
            pairwise_accuracy(&reversed, &records, Grouping::PerQuestion).unwrap(),
            0.0
        );
    }

    #[test]
    fn accuracy_predicted_tie_counts_as_error() {
        let records = vec![record("r1", "q", Some(1)), record("r2", "q", Some(5))];
        let preds = vec![pred("r1", Some(3)), pred("r2", Some(3))];
        assert_eq!(
            pairwise_accuracy(&preds, &records, Grouping::PerQuestion).unwrap(),
            0.0
        );
    }

    #[test]
    fn accuracy_gold_ties_excluded() {
        let records = vec![record("r1", "q", Some(3)), record("r2", "q", Some(3))];
        let preds = vec![pred("r1", Some(1)), pred("r2", Some(5))];
        assert_eq!(
            pairwise_accuracy(&preds, &records, Grouping::PerQuestion),
            Err(MetricError::NoEligiblePairs)
        );
    }

    #[test]
    fn accuracy_grouping_matters() {
        // Cross-question pair ordered wrongly; within-question pairs correct.
        let records = vec![
            record("r1", "qa", Some(1)),
            record("r2", "qa", Some(5)),
            record("r3", "qb", Some(5)),
        ];
        let preds = vec![pred("r1", Some(2)), pred("r2", Some(4)), pred("r3", Some(1))];
        assert_eq!(
            pairwise_accuracy(&preds, &records, Grouping::PerQuestion).unwrap(),
            1.0
        );
        // Global pairing adds (r1,r3) disagree; (r2,r3) is a gold tie and
        // stays excluded.
        assert!(
            (pairwise_accuracy(&preds, &records, Grouping::Global).unwrap() - 0.5).abs() < 1e-15
        );
    }

    #[test]
    fn accuracy_validation_errors() {
        let records = vec![record("r1", "q", Some(1)), record("r2", "q", None)];
        let preds = vec![pred("r1", Some(1)), pred("r2", Some(2))];
        assert_eq!(
            pairwise_accuracy(&preds, &records, Grouping::PerQuestion),
            Err(MetricError::UnlabeledRecord { id: "r2".into() })
        );
        let preds = vec![pred("rX", Some(1))];
        assert_eq!(
            pairwise_accuracy(&preds, &records, Grouping::PerQuestion),
            Err(MetricError::UnknownRecord { id: "rX".into() })
        );
        assert_eq!(
            pairwise_accuracy(&[], &records, Grouping::PerQuestion),
            Err(MetricError::EmptyPredictions)
        );
    }

    #[test]
    fn report_perfect_predictions() {
        let records: Vec<_> = (1..=5).map(|i| record(&format!("r{i}"), "q", Some(i))).collect();
        let preds: Vec<_> = (1..=5).map(|i| pred(&format!("r{i}"), Some(i))).collect();
        let report = metric_report(TaskId::Dialogue, &preds, &records, Grouping::PerQuestion)
            .unwrap();
        assert_eq!(report.accuracy, Some(1.0));
        assert_eq!(report.kendall_tau, Some(1.0));
        assert_eq!(report.spearman_rho, Some(1.0));
        assert_eq!(report.n_records, 5);
        assert_eq!(report.n_failures, 0);
        assert_eq!(report.table_row(), "1.0000 1.0000 1.0000");
    }

    #[test]
    fn report_tallies_failures_and_excludes_them() {
        let records: Vec<_> = (1..=4).map(|i| record(&format!("r{i}"), "q", Some(i))).collect();
        let mut preds: Vec<_> = (1..=3).map(|i| pred(&format!("r{i}"), Some(i))).collect();
        preds.push(pred("r4", None));
        let report = metric_report(TaskId::Dialogue, &preds, &records, Grouping::PerQuestion)
            .unwrap();
        assert_eq!(report.n_records, 4);
        assert_eq!(report.n_failures, 1);
        assert_eq!(report.accuracy, Some(1.0));
    }

    #[test]
    fn report_constant_predictions_are_undefined_not_zero() {
        let records: Vec<_> = (1..=4).map(|i| record(&format!("r{i}"), "q", Some(i))).collect();
        let preds: Vec<_> = (1..=4).map(|i| pred(&format!("r{i}"), Some(3))).collect();
        let report = metric_report(TaskId::Dialogue, &preds, &records, Grouping::PerQuestion)
            .unwrap();
        assert_eq!(report.kendall_tau, None);
        assert_eq!(report.spearman_rho, None);
        // Constant predictions disagree with every strict gold order.
        assert_eq!(report.accuracy, Some(0.0));
        assert_eq!(report.table_row(), "0.0000 / /");
    }

    #[test]
    fn report_empty_is_error() {
        let records = vec![record("r1", "q", Some(1))];
        assert_eq!(
            metric_report(TaskId::Dialogue, &[], &records, Grouping::PerQuestion),
            Err(MetricError::EmptyPredictions)
        );
    }

    #[test]
    fn selection_value_mean_of_three() {
        let report = MetricReport {
            task_id: TaskId::Summary,
            n_records: 10,
            n_failures: 0,
            accuracy: Some(0.9),
            kendall_tau: Some(0.6),
            spearman_rho: Some(0.3),
        };
        assert!((report.selection_value(SelectionMetric::MeanOfThree).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(report.selection_value(SelectionMetric::Accuracy), Some(0.9));
        let undefined = MetricReport {
            kendall_tau: None,
            ..report
        };
        assert_eq!(undefined.selection_value(SelectionMetric::MeanOfThree), None);
        assert_eq!(undefined.selection_value(SelectionMetric::Accuracy), Some(0.9));
    }
}
