//! Sequence length, quadratic attention cost and the largest frame count
//! that fits a fixed budget, for the uniform baseline, sparse clips and
//! deformable sampling.

use deformqa::harness::memory::{max_frames, reference_budget, reference_table};
use deformqa::harness::{CostModelInput, CostStrategy};

fn main() -> deformqa::Result<()> {
    println!(
        "{:<9} {:>6} {:>8} {:>14} {:>10}",
        "strategy", "frames", "seq len", "cost", "max frames"
    );
    for frames in [8, 32, 128] {
        for row in reference_table(frames)? {
            println!(
                "{:<9} {:>6} {:>8} {:>14.0} {:>10}",
                row.strategy.to_string(),
                row.frames,
                row.sequence_len,
                row.cost,
                row.max_frames
            );
        }
    }

    // The budget is what the baseline spends at 60 frames. Halving it:
    let half = reference_budget() / 2.0;
    for s in [CostStrategy::Baseline, CostStrategy::Sparse, CostStrategy::Dsr] {
        println!(
            "{s} fits {} frames in half the budget",
            max_frames(&CostModelInput::reference(s, 1), half)
        );
    }
    Ok(())
}
