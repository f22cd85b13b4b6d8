use proptest::prelude::*;

use sae_core::model::{aggregate_score, best_score, CaseVerdict, Submission, SubmissionStatus, Weight};

// Oracle: weights as (numer, denom) pairs, brought to a common denominator
// by multiplying out, then integer floor division. No rational library.
fn oracle_score(cases: &[((u64, u64), bool)], max: u32) -> u32 {
    let common: u128 = cases.iter().map(|((_, d), _)| *d as u128).product();
    let scaled = |(n, d): (u64, u64)| n as u128 * (common / d as u128);
    let total: u128 = cases.iter().map(|(w, _)| scaled(*w)).sum();
    let passed: u128 = cases.iter().filter(|(_, p)| *p).map(|(w, _)| scaled(*w)).sum();
    (max as u128 * passed / total) as u32
}

fn verdict(pass: bool, fail_as: usize) -> CaseVerdict {
    if pass {
        return CaseVerdict::Pass;
    }
    [
        CaseVerdict::WrongOutput,
        CaseVerdict::RuntimeError,
        CaseVerdict::TimeLimit,
        CaseVerdict::MemoryLimit,
        CaseVerdict::CheckerError,
    ][fail_as % 5]
}

const WEIGHTS: [(u64, u64); 6] = [(1, 1), (2, 1), (3, 1), (1, 2), (2, 3), (5, 7)];

#[test]
fn brute_force_over_all_patterns_of_up_to_four_cases() {
    let mut checked = 0;
    for n in 1..=4usize {
        // every weight assignment from WEIGHTS, every pass/fail pattern
        let combos = WEIGHTS.len().pow(n as u32);
        for code in 0..combos {
            let mut c = code;
            let weights: Vec<(u64, u64)> = (0..n)
                .map(|_| {
                    let w = WEIGHTS[c % WEIGHTS.len()];
                    c /= WEIGHTS.len();
                    w
                })
                .collect();
            for pattern in 0..(1u32 << n) {
                let cases: Vec<_> = weights.iter().enumerate().map(|(i, w)| (*w, pattern & (1 << i) != 0)).collect();
                for max in [1, 7, 100, 1000] {
                    let got = aggregate_score(
                        cases
                            .iter()
                            .enumerate()
                            .map(|(i, ((nu, de), p))| (verdict(*p, i + code), Weight::new(*nu, *de).unwrap())),
                        max,
                    );
                    assert_eq!(got, oracle_score(&cases, max), "{cases:?} max {max}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 20_000);
}

#[test]
fn frozen_examples() {
    let w = Weight::integer;
    let all = |v: CaseVerdict| (0..4).map(move |_| (v, w(1)));
    assert_eq!(aggregate_score(all(CaseVerdict::Pass), 100), 100);
    assert_eq!(aggregate_score(all(CaseVerdict::WrongOutput), 100), 0);
    let mixed = [(CaseVerdict::Pass, w(2)), (CaseVerdict::WrongOutput, w(1)), (CaseVerdict::RuntimeError, w(1))];
    assert_eq!(aggregate_score(mixed, 100), 50);
    // crash on case 2 of 4
    let crash = [CaseVerdict::Pass, CaseVerdict::RuntimeError, CaseVerdict::Pass, CaseVerdict::Pass];
    assert_eq!(aggregate_score(crash.map(|v| (v, w(1))), 100), 75);
}

#[test]
fn one_failure_in_n_equal_cases() {
    // floor(100 (n-1) / n), values worked out by hand
    let frozen = [(1, 0), (2, 50), (3, 66), (4, 75), (5, 80), (6, 83), (7, 85), (8, 87), (9, 88), (10, 90), (12, 91)];
    for (n, expected) in frozen {
        let cases =
            (0..n).map(|i| (if i == 0 { CaseVerdict::RuntimeError } else { CaseVerdict::Pass }, Weight::integer(1)));
        assert_eq!(aggregate_score(cases, 100), expected, "n = {n}");
    }
}

fn evaluated(score: u32) -> Submission {
    use sae_core::model::EvaluationReport;
    Submission {
        submission_id: format!("s{score}"),
        user_id: "u".into(),
        task_id: "t".into(),
        files: Default::default(),
        language: "python3".into(),
        submitted_at: chrono::DateTime::UNIX_EPOCH,
        status: SubmissionStatus::Evaluated,
        results: Some(EvaluationReport { per_case: vec![], score, max_score: 100 }),
        failure: None,
    }
}

#[test]
fn best_score_examples() {
    let hist = |s: &[u32]| s.iter().map(|&x| evaluated(x)).collect::<Vec<_>>();
    assert_eq!(best_score(&hist(&[40, 100])), 100);
    assert_eq!(best_score(&hist(&[])), 0);
    assert_eq!(best_score(&hist(&[70, 70, 30])), 70);
    let mut pending = hist(&[20]);
    let mut queued = evaluated(90);
    queued.status = SubmissionStatus::Queued;
    queued.results = None;
    pending.push(queued);
    assert_eq!(best_score(&pending), 20);
}

proptest! {
    #[test]
    fn best_score_is_the_plain_maximum(scores in prop::collection::vec(0u32..=100, 0..12)) {
        let subs: Vec<_> = scores.iter().map(|&s| evaluated(s)).collect();
        prop_assert_eq!(best_score(&subs), scores.iter().copied().max().unwrap_or(0));
    }

    #[test]
    fn agrees_with_oracle_on_larger_lists(
        cases in prop::collection::vec(((1u64..20, 1u64..6), any::<bool>()), 1..9),
        max in 1u32..10_000,
    ) {
        let got = aggregate_score(cases.iter().map(|((n, d), p)| (verdict(*p, 0), Weight::new(*n, *d).unwrap())), max);
        prop_assert_eq!(got, oracle_score(&cases, max));
    }
}
