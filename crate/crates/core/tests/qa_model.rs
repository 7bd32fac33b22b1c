mod common;

use deformqa::dependency::DepMode;
use deformqa::harness::task::{generate_task, SyntheticTaskConfig};
use deformqa::model::qa::batch_loss;
use deformqa::model::train::evaluate;
use deformqa::model::{Example, ModelConfig, QaModel, Strategy, TrainConfig, Trainer};
use deformqa::regularizer::RegKind;
use deformqa::sampler::FeatureVolume;
use deformqa::verify::tiny_question;
use deformqa::{Graph, ParamStore, Precision, Tensor};
use rand::Rng;

use common::{random_volume, rng};

fn small_task() -> (SyntheticTaskConfig, deformqa::harness::Dataset) {
    let task = SyntheticTaskConfig {
        frames: 8,
        height: 3,
        width: 3,
        channels: 16,
        event_frames: 2,
        patch: 2,
        train_size: 12,
        test_size: 6,
        ..SyntheticTaskConfig::default()
    };
    let data = generate_task(&task).unwrap();
    (task, data)
}

fn model_for(data: &deformqa::harness::Dataset, strategy: Strategy) -> (QaModel, ParamStore) {
    let mut cfg = ModelConfig::desk(data.num_classes(), data.vocabulary.len()).with_d_model(16);
    cfg.strategy = strategy;
    cfg.sampler.num_queries = 5;
    cfg.sampler.num_layers = 2;
    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, cfg, &mut rng(3)).unwrap();
    (model, store)
}

fn logits(model: &QaModel, store: &ParamStore, ex: &Example, precision: Precision) -> Vec<f64> {
    let mut g = Graph::new(precision);
    let v = g.constant(ex.volume.tensor().clone());
    let out = model.forward(&mut g, store, v, &ex.question, &mut rng(0)).unwrap();
    g.value(out.logits).data().to_vec()
}

#[test]
fn logits_are_finite_with_one_entry_per_class() {
    let (_, data) = small_task();
    for strategy in [
        Strategy::DeformableDense,
        Strategy::UniformDense,
        Strategy::SparseRandom,
    ] {
        let (model, store) = model_for(&data, strategy);
        let l = logits(&model, &store, &data.train[0], Precision::F32);
        assert_eq!(l.len(), data.num_classes());
        assert!(l.iter().all(|v| v.is_finite()), "{strategy:?}: {l:?}");
    }
}

#[test]
fn zero_answer_head_gives_uniform_prediction() {
    let (_, data) = small_task();
    let (model, mut store) = model_for(&data, Strategy::DeformableDense);
    for id in [model.head.fc2.weight, model.head.fc2.bias.unwrap()] {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let mut g = Graph::new(Precision::F64);
    let v = g.constant(data.train[0].volume.tensor().clone());
    let out = model
        .forward(&mut g, &store, v, &data.train[0].question, &mut rng(0))
        .unwrap();
    let ce = g.cross_entropy(out.logits, data.train[0].label).unwrap();
    let c = data.num_classes() as f64;
    assert!((g.value(ce).item().unwrap() - c.ln()).abs() < 1e-12);
    let p = g.softmax(out.logits, 0).unwrap();
    for &pi in g.value(p).data() {
        assert!((pi - 1.0 / c).abs() < 1e-12);
    }
}

#[test]
fn deformable_sequence_layout() {
    let (task, data) = small_task();
    let (model, store) = model_for(&data, Strategy::DeformableDense);
    let ex = &data.train[0];
    let mut g = Graph::new(Precision::F32);
    let v = g.constant(ex.volume.tensor().clone());
    let out = model.forward(&mut g, &store, v, &ex.question, &mut rng(0)).unwrap();
    // [CLS] + per-frame global tokens + sampled tokens + [SEP] + question.
    let want = 1 + task.frames + 5 + 1 + ex.question.len();
    assert_eq!(out.sequence_lengths, vec![want]);
    let set = out.sampled.unwrap().token_set(&g);
    let (dev, min) = set.weight_normalization();
    assert!(dev < 1e-6 && min >= 0.0);
}

#[test]
fn gold_dependency_attention_is_the_adjacency() {
    let (_, data) = small_task();
    let (model, store) = model_for(&data, Strategy::DeformableDense);
    assert_eq!(model.config.dependency.mode, DepMode::Gold);
    let q = &data.train[0].question;
    let mut g = Graph::new(Precision::F64);
    let enc = model.encode_question(&mut g, &store, q).unwrap();
    assert_eq!(g.value(enc.attention[0][0]), &q.adjacency().unwrap().to_tensor());
    for map in &enc.attention[0][1..] {
        for row in g.value(*map).data().chunks_exact(q.len()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn one_two_frame_clip_matches_all_tokens() {
    // With a 2-frame video the single flattened clip holds every cell.
    let (_, data) = small_task();
    let mut r = rng(9);
    let volume = random_volume(&mut r, [16, 2, 3, 3]);
    let q = data.train[0].question.clone();
    let (sparse, store) = model_for(&data, Strategy::SparseRandom);
    let mut uniform = sparse.clone();
    uniform.config.strategy = Strategy::UniformDense;
    let run = |m: &QaModel, starts: Option<&[usize]>| {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(volume.tensor().clone());
        let out = match starts {
            Some(s) => m.sparse_random_forward(&mut g, &store, v, &q, s).unwrap(),
            None => m.uniform_forward(&mut g, &store, v, &q).unwrap(),
        };
        g.value(out.logits).data().to_vec()
    };
    let a = run(&sparse, Some(&[0]));
    let b = run(&uniform, None);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn sparse_logits_average_the_clips() {
    let (_, data) = small_task();
    let (model, store) = model_for(&data, Strategy::SparseRandom);
    let ex = &data.train[1];
    let run = |starts: &[usize]| {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(ex.volume.tensor().clone());
        let out = model
            .sparse_random_forward(&mut g, &store, v, &ex.question, starts)
            .unwrap();
        assert_eq!(out.sequence_lengths.len(), starts.len());
        g.value(out.logits).data().to_vec()
    };
    let (a, b, both) = (run(&[0]), run(&[5]), run(&[0, 5]));
    for i in 0..a.len() {
        assert!((both[i] - (a[i] + b[i]) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let (_, data) = small_task();
    let (model, mut store) = model_for(&data, Strategy::DeformableDense);
    let before = store.clone();
    let mut cfg = TrainConfig {
        batch_size: 4,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = 0.0;
    let mut trainer = Trainer::new(cfg, &store, 3).unwrap();
    trainer.train_epoch(&model, &mut store, &data.train).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_lowers_the_loss_and_is_reproducible() {
    let (_, data) = small_task();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 4,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let run = || {
        let (model, mut store) = model_for(&data, Strategy::DeformableDense);
        let curve = deformqa::model::train::train(&model, &mut store, &data.train, &cfg, |_| {}).unwrap();
        let acc = evaluate(&model, &store, &data.test, Precision::F64, 0).unwrap();
        (curve, acc)
    };
    let (a, acc_a) = run();
    let (b, acc_b) = run();
    assert_eq!(a, b);
    assert_eq!(acc_a, acc_b);
    let first: f64 = a[..3].iter().map(|m| m.loss).sum();
    let last: f64 = a[a.len() - 3..].iter().map(|m| m.loss).sum();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn regularizer_joins_the_loss() {
    let (_, data) = small_task();
    let (mut model, store) = model_for(&data, Strategy::DeformableDense);
    let batch = &data.train[..2];
    let eval = |m: &QaModel| {
        let mut g = Graph::new(Precision::F64);
        let mut outs = Vec::new();
        let mut vols = Vec::new();
        for ex in batch {
            let v = g.constant(ex.volume.tensor().clone());
            outs.push(m.forward(&mut g, &store, v, &ex.question, &mut rng(0)).unwrap());
            vols.push(v);
        }
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let bl = batch_loss(&mut g, m, &outs, &vols, &labels).unwrap();
        (g.value(bl.loss).item().unwrap(), bl.cross_entropy, bl.regularizer)
    };
    let (loss, ce, reg) = eval(&model);
    assert_eq!(reg, 0.0);
    assert_eq!(loss, ce);
    model.config.regularizer_mut().kind = RegKind::So;
    let (loss, ce2, reg) = eval(&model);
    assert_eq!(ce, ce2);
    assert!(reg > 0.0);
    assert!((loss - (ce + reg)).abs() < 1e-12);
}

#[test]
fn bad_inputs_are_rejected() {
    let (_, data) = small_task();
    let (model, store) = model_for(&data, Strategy::DeformableDense);
    let mut g = Graph::new(Precision::F32);
    let wrong_channels = g.constant(Tensor::zeros(&[8, 8, 3, 3]));
    assert!(model
        .forward(&mut g, &store, wrong_channels, &data.train[0].question, &mut rng(0))
        .is_err());
    let v = g.constant(data.train[0].volume.tensor().clone());
    let mut q = data.train[0].question.clone();
    q.token_ids[0] = model.config.vocab_size;
    assert!(model.forward(&mut g, &store, v, &q, &mut rng(0)).is_err());
    let mut sparse = model.clone();
    sparse.config.strategy = Strategy::SparseRandom;
    assert!(sparse
        .sparse_random_forward(&mut g, &store, v, &data.train[0].question, &[7])
        .is_err());
}

#[test]
fn tiny_config_runs_every_strategy_on_two_frames() {
    let q = tiny_question(3).unwrap();
    let mut r = rng(1);
    let vol = FeatureVolume::from_fn(8, 2, 2, 2, |_, _, _, _| r.random_range(-1.0..1.0)).unwrap();
    for strategy in [
        Strategy::DeformableDense,
        Strategy::UniformDense,
        Strategy::SparseRandom,
    ] {
        let mut cfg = ModelConfig::tiny(3, 3);
        cfg.strategy = strategy;
        let mut store = ParamStore::new();
        let model = QaModel::new(&mut store, cfg, &mut rng(2)).unwrap();
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(vol.tensor().clone());
        let out = model.forward(&mut g, &store, v, &q, &mut rng(0)).unwrap();
        assert_eq!(g.value(out.logits).len(), 3);
    }
}
