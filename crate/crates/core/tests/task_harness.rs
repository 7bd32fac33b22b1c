use deformqa::harness::experiment::summarize;
use deformqa::harness::memory::{max_frames, reference_budget};
use deformqa::harness::task::{
    answer_from_events, build_example, generate_task, question_parse, signatures, PlantedEvent, SyntheticTaskConfig,
    Template, Vocabulary, ALL_TEMPLATES,
};
use deformqa::harness::{run_experiment, Arm, CostModelInput, CostStrategy, ExperimentConfig, TrialRecord};
use deformqa::model::Strategy;
use deformqa::regularizer::{RegConfig, RegKind};
use deformqa::Precision;

fn event(archetype: usize, start_frame: usize) -> PlantedEvent {
    PlantedEvent {
        archetype,
        start_frame,
        frames: 4,
        y: 0,
        x: 0,
    }
}

#[test]
fn ordering_answers_from_planted_events() {
    let events = [event(4, 20), event(2, 3)];
    assert_eq!(answer_from_events(Template::Before, Some(4), &events), Some(2));
    assert_eq!(answer_from_events(Template::After, Some(2), &events), Some(4));
    assert_eq!(answer_from_events(Template::Before, Some(2), &events), None);
    assert_eq!(answer_from_events(Template::After, Some(4), &events), None);
    assert_eq!(answer_from_events(Template::First, None, &events), Some(2));
    assert_eq!(answer_from_events(Template::Last, None, &events), Some(4));
}

fn all_templates(train: usize, test: usize) -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        frames: 16,
        height: 4,
        width: 4,
        channels: 8,
        event_frames: 2,
        templates: ALL_TEMPLATES.to_vec(),
        train_size: train,
        test_size: test,
        ..SyntheticTaskConfig::default()
    }
}

#[test]
fn stored_answers_are_recomputable() {
    let data = generate_task(&all_templates(60, 30)).unwrap();
    let mut seen = std::collections::HashSet::new();
    for m in &data.meta {
        assert_eq!(
            answer_from_events(m.template, m.subject, &m.events),
            Some(m.label),
            "{m:?}"
        );
        assert_eq!(m.events.len(), data.config.events_per_video);
        let kinds: std::collections::HashSet<_> = m.events.iter().map(|e| e.archetype).collect();
        assert_eq!(kinds.len(), m.events.len(), "distinct archetypes");
        for w in m.events.windows(2) {
            assert!(
                w[0].start_frame + w[0].frames <= w[1].start_frame,
                "disjoint, sorted slots"
            );
        }
        seen.insert(m.template);
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn answers_are_balanced_within_five_percent() {
    let data = generate_task(&all_templates(300, 120)).unwrap();
    let h = data.label_histogram();
    let total: usize = h.iter().sum();
    let even = total as f64 / h.len() as f64;
    for &count in &h {
        assert!((count as f64 - even).abs() <= 0.05 * even, "{h:?}");
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let cfg = all_templates(8, 4);
    let (a, b) = (generate_task(&cfg).unwrap(), generate_task(&cfg).unwrap());
    assert_eq!(a.train, b.train);
    assert_eq!(a.meta, b.meta);
    let c = generate_task(&SyntheticTaskConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.train[0].volume, c.train[0].volume);
}

#[test]
fn any_item_rebuilds_from_its_metadata() {
    let cfg = all_templates(6, 3);
    let data = generate_task(&cfg).unwrap();
    let sigs = signatures(cfg.num_archetypes, cfg.channels, cfg.seed).unwrap();
    let vocab = Vocabulary::for_task(cfg.num_archetypes).unwrap();
    let ex = build_example(&cfg, &sigs, &vocab, &data.meta[7]).unwrap();
    assert_eq!(ex, data.test[1]);
    let mut wrong = data.meta[7].clone();
    wrong.label = (wrong.label + 1) % cfg.num_archetypes;
    assert!(build_example(&cfg, &sigs, &vocab, &wrong).is_err());
}

#[test]
fn signatures_are_orthogonal_with_fixed_norm() {
    let d = 16;
    let s = signatures(6, d, 3).unwrap();
    for (i, a) in s.iter().enumerate() {
        let norm2: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm2 - d as f64).abs() < 1e-9);
        for b in &s[i + 1..] {
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d as f64;
            assert!(cos.abs() < 1e-9);
        }
    }
}

#[test]
fn question_parses_follow_templates() {
    let p = question_parse(Template::After, Some(0)).unwrap();
    assert_eq!(p.words, ["what", "did", "they", "do", "after", "running"]);
    assert_eq!(p.num_subwords(), 7);
    assert!(question_parse(Template::First, Some(0)).is_err());
    assert!(question_parse(Template::Before, None).is_err());
}

#[test]
fn impossible_layouts_are_config_errors() {
    let too_many = SyntheticTaskConfig {
        frames: 8,
        event_frames: 4,
        events_per_video: 3,
        ..SyntheticTaskConfig::default()
    };
    assert!(generate_task(&too_many).is_err());
    let big_patch = SyntheticTaskConfig {
        patch: 9,
        ..SyntheticTaskConfig::default()
    };
    assert!(generate_task(&big_patch).is_err());
    let no_templates = SyntheticTaskConfig {
        templates: vec![],
        ..SyntheticTaskConfig::default()
    };
    assert!(generate_task(&no_templates).is_err());
}

#[test]
fn memory_cost_grows_and_the_ratio_widens() {
    let mut prev_ratio = 0.0;
    let mut prev = [0.0; 3];
    for t in 2..=256 {
        let cost = |s| CostModelInput::reference(s, t).cost();
        let now = [
            cost(CostStrategy::Baseline),
            cost(CostStrategy::Sparse),
            cost(CostStrategy::Dsr),
        ];
        for i in 0..3 {
            assert!(now[i] > prev[i], "cost must grow with T");
        }
        let ratio = now[0] / now[2];
        assert!(ratio > prev_ratio, "baseline/dsr ratio must grow with T");
        prev = now;
        prev_ratio = ratio;
    }
}

#[test]
fn max_frames_respects_any_budget() {
    for budget in [1e5, reference_budget(), 1e8] {
        let mf = |s| max_frames(&CostModelInput::reference(s, 1), budget);
        let (b, s, d) = (
            mf(CostStrategy::Baseline),
            mf(CostStrategy::Sparse),
            mf(CostStrategy::Dsr),
        );
        assert!(b < s && s < d, "{budget}: {b} {s} {d}");
        let inside = CostModelInput::reference(CostStrategy::Dsr, d);
        assert!(inside.cost() <= budget && inside.with_frames(d + 1).cost() > budget);
    }
}

fn quick_experiment(arms: Vec<Arm>, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = SyntheticTaskConfig {
        frames: 8,
        height: 3,
        width: 3,
        channels: 8,
        event_frames: 2,
        patch: 2,
        train_size: 6,
        test_size: 4,
        ..SyntheticTaskConfig::default()
    };
    cfg.model = cfg.model.with_d_model(8);
    cfg.model.num_heads = 2;
    cfg.model.sampler.num_queries = 4;
    cfg.model.sampler.num_layers = 1;
    cfg.model.dependency.num_heads = 2;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 3;
    cfg.train.precision = Precision::F64;
    cfg.arms = arms;
    cfg.seeds = seeds;
    cfg
}

#[test]
fn report_bookkeeping_and_reproducibility() {
    let cfg = quick_experiment(
        vec![
            Arm::dense(RegConfig::new(RegKind::So, 1e-4)),
            Arm::dense(RegConfig::new(RegKind::None, 0.0)),
            Arm::sparse(4),
        ],
        (0..5).collect(),
    );
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.trials.len(), 15);
    assert!(report
        .trials
        .iter()
        .all(|t| t.error.is_none() && t.test_accuracy.is_some()));
    for t in &report.trials {
        assert_eq!(
            t.diversity.is_some(),
            t.strategy == Strategy::DeformableDense,
            "{}",
            t.arm
        );
        assert_eq!(t.epoch_loss.len(), 1);
    }
    assert_eq!(report.trial("sparse-4", 2).unwrap().sequence_lengths.len(), 4);
    let cmp = report.comparison("dense-so", "sparse-4").unwrap();
    assert_eq!(cmp.a_wins + cmp.b_wins + cmp.ties, 5);
    assert_eq!(report.summary("dense-none").unwrap().completed, 5);

    let again = run_experiment(&cfg).unwrap();
    let json = |r| serde_json::to_string(r).unwrap();
    assert_eq!(json(&report), json(&again), "bit-identical in 64-bit mode");
}

#[test]
fn failed_trials_are_recorded_not_fatal() {
    let mut cfg = quick_experiment(vec![Arm::dense(RegConfig::default()), Arm::sparse(1)], vec![0]);
    // Clips longer than the video fail only the sparse arm.
    cfg.model.clip_frames = 9;
    let report = run_experiment(&cfg).unwrap();
    let sparse = report.trial("sparse-1", 0).unwrap();
    assert!(sparse.error.is_some() && sparse.test_accuracy.is_none());
    assert!(report.trial("dense-none", 0).unwrap().test_accuracy.is_some());
    assert_eq!(report.summary("sparse-1").unwrap().completed, 0);
}

#[test]
fn summaries_use_completed_trials_only() {
    let cfg = quick_experiment(vec![Arm::sparse(1), Arm::sparse(4)], vec![0, 1]);
    let trial = |arm: &str, seed, acc: Option<f64>| TrialRecord {
        arm: arm.into(),
        seed,
        strategy: Strategy::SparseRandom,
        num_clips: 1,
        regularizer: RegKind::None,
        lambda: 0.0,
        test_accuracy: acc,
        epoch_loss: vec![],
        diversity: None,
        sequence_lengths: vec![],
        error: acc.is_none().then(|| "diverged".into()),
    };
    let report = summarize(
        cfg,
        vec![
            trial("sparse-1", 0, Some(0.5)),
            trial("sparse-4", 0, Some(0.25)),
            trial("sparse-1", 1, None),
            trial("sparse-4", 1, Some(0.75)),
        ],
    );
    assert_eq!(report.summary("sparse-1").unwrap().mean_accuracy, Some(0.5));
    assert_eq!(report.summary("sparse-4").unwrap().mean_accuracy, Some(0.5));
    let c = report.comparison("sparse-1", "sparse-4").unwrap();
    assert_eq!((c.a_wins, c.b_wins, c.ties), (1, 0, 0));
    assert_eq!(c.mean_difference, Some(0.25));
}
