//! Selection and voting invariants: argmax scale-invariance, sum/mean
//! equivalence, voting determinism, and parse totality.

mod support;

use proptest::prelude::*;
use std::collections::BTreeMap;

use refeval_core::collaboration::{select_by_value, vote_integrate, VoteOutcome};
use refeval_core::dataset::{RecordSet, TaskId};
use refeval_core::gateway::{parse_score, MockBackend, RetryPolicy};
use support::record;

proptest! {
    /// Scaling every defined value by a positive constant never changes the
    /// argmax winner.
    #[test]
    fn argmax_invariant_under_positive_scaling(
        values in prop::collection::btree_map("[a-z]{1,6}", prop::option::of(0.0f64..1.0), 1..8),
        scale in 0.01f64..100.0
    ) {
        let base: Vec<(&str, Option<f64>)> =
            values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let scaled: Vec<(&str, Option<f64>)> = values
            .iter()
            .map(|(k, v)| (k.as_str(), v.map(|x| x * scale)))
            .collect();
        prop_assert_eq!(select_by_value(base), select_by_value(scaled));
    }

    /// With a fixed record count per backend, the argmax over per-record
    /// metric sums equals the argmax over means.
    #[test]
    fn sum_and_mean_argmax_agree(
        per_backend in prop::collection::btree_map(
            "[a-z]{1,6}",
            prop::collection::vec(0.0f64..1.0, 10),
            1..6
        )
    ) {
        let sums: Vec<(&str, Option<f64>)> = per_backend
            .iter()
            .map(|(k, v)| (k.as_str(), Some(v.iter().sum::<f64>())))
            .collect();
        let means: Vec<(&str, Option<f64>)> = per_backend
            .iter()
            .map(|(k, v)| (k.as_str(), Some(v.iter().sum::<f64>() / v.len() as f64)))
            .collect();
        prop_assert_eq!(select_by_value(sums), select_by_value(means));
    }

    /// Score extraction never panics, whatever the backend replies.
    #[test]
    fn parse_score_is_total(raw in ".{0,400}") {
        if let Ok((score, _)) = parse_score(&raw) { prop_assert!((1..=5).contains(&score)) }
    }
}

#[test]
fn voting_is_deterministic_with_mock_members() {
    let records: Vec<_> = (1..=3)
        .map(|i| record(TaskId::Dialogue, "q", &format!("r{i}"), Some(i)))
        .collect();
    let set = RecordSet::new(records.clone(), "train");
    let table_a: BTreeMap<String, u8> = [("r1".to_string(), 2u8)].into();
    let table_b: BTreeMap<String, u8> = [("r1".to_string(), 4u8)].into();
    let m1 = MockBackend::fixture_from_records("m1", &records, &table_a).unwrap();
    let m2 = MockBackend::fixture_from_records("m2", &records, &table_b).unwrap();
    let integrator = MockBackend::average_integrator("integ");
    let retry = RetryPolicy::immediate(1);
    let run = || {
        match vote_integrate(&set.records()[0], &[&m1, &m2], &integrator, &retry, "inst", 0, &[])
            .unwrap()
        {
            VoteOutcome::Bundle(bundle) => bundle,
            other => panic!("expected bundle, got {other:?}"),
        }
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    assert_eq!(first.final_score, 3);
}
