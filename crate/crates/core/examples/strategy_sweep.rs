//! A small paired comparison of visual-token strategies: deformable
//! sampling with and without a diversity regularizer against sparse random
//! clips, over several seeds.
//!
//! `dfqa sweep` runs the same thing from a config file; the default
//! configuration is much larger than this one.

use deformqa::harness::task::SyntheticTaskConfig;
use deformqa::harness::{run_experiment_with, Arm, ExperimentConfig};
use deformqa::regularizer::{RegConfig, RegKind};

fn main() -> deformqa::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.task = SyntheticTaskConfig {
        frames: 16,
        train_size: 200,
        test_size: 100,
        ..cfg.task
    };
    cfg.train.epochs = 4;
    cfg.arms = vec![
        Arm::dense(RegConfig::new(RegKind::So, 1e-7)),
        Arm::dense(RegConfig::new(RegKind::None, 0.0)),
        Arm::sparse(1),
        Arm::sparse(4),
    ];
    cfg.seeds = vec![0, 1, 2];

    let report = run_experiment_with(&cfg, |t| match (t.test_accuracy, &t.error) {
        (Some(acc), _) => println!("{:<11} seed {}: accuracy {acc:.3}", t.arm, t.seed),
        (None, Some(e)) => println!("{:<11} seed {}: failed: {e}", t.arm, t.seed),
        _ => {}
    })?;

    println!();
    for s in &report.summaries {
        print!("{:<11} mean accuracy {:.3}", s.arm, s.mean_accuracy.unwrap_or(f64::NAN));
        if let Some(gram) = s.mean_gram_offdiag {
            print!(", mean |cos| {gram:.3}");
        }
        println!();
    }
    for c in &report.comparisons {
        println!("{} vs {}: {}-{} ({} ties)", c.a, c.b, c.a_wins, c.b_wins, c.ties);
    }
    Ok(())
}
