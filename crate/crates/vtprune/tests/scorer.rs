use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtprune::scorer::{ExternalScorer, ScoreRecord};
use vtprune_core::calibration::synthetic_score;
use vtprune_core::{CategoryId, IndexSet};

#[test]
fn subprocess_matches_in_process_score() {
    let cmd = format!("{} synth-scorer", env!("CARGO_BIN_EXE_vtprune"));
    let mut ext = ExternalScorer::spawn(&cmd, Duration::from_secs(10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..100 {
        let n = rng.gen_range(1..300);
        let retained: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
        let evidence: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.1)).collect();
        let want = synthetic_score(&IndexSet::from_unsorted(retained.clone()), &IndexSet::from_unsorted(evidence.clone()));
        let rec = ScoreRecord {
            sample_id: format!("s{i}"),
            prompt: "How many \"quoted\" birds?\n".into(),
            category: CategoryId::new(i % 9).unwrap(),
            retained,
            evidence,
        };
        let got = ext.request(&rec).unwrap();
        assert_eq!(got.to_bits(), want.to_bits(), "instance {i}");
    }
}
