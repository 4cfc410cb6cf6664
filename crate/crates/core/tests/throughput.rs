//! Timing checks. Kept as a single test in its own binary so no other test
//! competes for the core while the clock runs.

use mcft::encoder::{count_costs, init_head, EncoderConfig, EncoderState, ParamMap};
use mcft::eval::measure_throughput;

type Model<'a> = (&'a EncoderState<f32>, &'a ParamMap<f32>, usize);

/// Host speed drifts over seconds, so the two sides are measured in
/// alternating rounds and compared round by round.
fn rounds_won(a: Model, b: Model, rounds: usize) -> (usize, Vec<(f64, f64)>) {
    let mut pairs = Vec::new();
    for _ in 0..rounds {
        let x = measure_throughput(a.0, Some(a.1), a.2, 2, 12).unwrap().median;
        let y = measure_throughput(b.0, Some(b.1), b.2, 2, 12).unwrap().median;
        pairs.push((x, y));
    }
    (pairs.iter().filter(|(x, y)| x > y).count(), pairs)
}

#[test]
fn throughput_contracts() {
    let config = EncoderConfig::default();
    let full = EncoderState::<f32>::new(config.clone(), 0).unwrap();
    let head = init_head::<f32>(&config, 1);
    let mut masked = full.clone();
    masked.layer_mask[5] = false;
    let pruned = masked.compact().unwrap();

    let before = count_costs(&full, Some(&head));
    let after = count_costs(&pruned, Some(&head));
    assert!(after.param_count < before.param_count);
    assert!(after.flops_per_forward < before.flops_per_forward);

    // settle the clock before anything is compared
    measure_throughput(&full, Some(&head), 32, 4, 24).unwrap();

    let (wins, pairs) = rounds_won((&pruned, &head, 32), (&full, &head, 32), 3);
    assert!(wins >= 2, "pruned vs full fps per round: {pairs:?}");

    let (wins, pairs) = rounds_won((&full, &head, 32), (&full, &head, 1), 3);
    assert!(wins >= 2, "batch 32 vs batch 1 fps per round: {pairs:?}");

    let a = measure_throughput(&full, Some(&head), 32, 2, 12).unwrap();
    let b = measure_throughput(&full, Some(&head), 32, 2, 12).unwrap();
    let ratio = b.median / a.median;
    assert!((0.8..=1.25).contains(&ratio), "repeat ratio {ratio:.3}");
}
