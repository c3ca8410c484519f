mod common;

use common::{exhaustive_nic_check, nic_fires, reference_fires, Step};
use proptest::prelude::*;

#[test]
fn small_scenarios_match_reference_exhaustively() {
    let (cases, bad) = exhaustive_nic_check();
    assert!(cases > 100_000, "only {cases} cases");
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![Just(Step::Enqueue), (0..2usize).prop_map(Step::Bump)]
}

proptest! {
    #[test]
    fn longer_scenarios_match_reference(
        ops in prop::collection::vec((0..2usize, 1..6u64, 0..2usize), 1..6),
        extra in prop::collection::vec(step(), 0..12),
    ) {
        // every op gets enqueued somewhere in the schedule
        let mut steps: Vec<Step> = extra.into_iter().filter(|s| *s != Step::Enqueue).collect();
        for (i, _) in ops.iter().enumerate() {
            let at = (i * 7) % (steps.len() + 1);
            steps.insert(at, Step::Enqueue);
        }
        let want = reference_fires(&ops, &steps);
        let got = nic_fires(&ops, &steps).map_err(TestCaseError::fail)?;
        prop_assert_eq!(got, want);
    }
}
