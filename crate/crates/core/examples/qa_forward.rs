//! End to end on a small synthetic ordering task: generate videos with
//! planted events, train the deformable QA model, and answer questions.

use deformqa::harness::task::{generate_task, SyntheticTaskConfig, EVENT_WORDS};
use deformqa::model::train::{evaluate, train};
use deformqa::model::{ModelConfig, QaModel, TrainConfig};
use deformqa::{Graph, ParamStore, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deformqa::Result<()> {
    let task = SyntheticTaskConfig {
        frames: 16,
        train_size: 400,
        test_size: 100,
        ..SyntheticTaskConfig::default()
    };
    let data = generate_task(&task)?;
    let config = ModelConfig::desk(data.num_classes(), data.vocabulary.len()).with_d_model(task.channels);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, config, &mut rng)?;
    println!("{} parameters", store.iter().map(|(_, p)| p.value.len()).sum::<usize>());

    let train_cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let per_epoch = data.train.len().div_ceil(train_cfg.batch_size);
    let curve = train(&model, &mut store, &data.train, &train_cfg, |m| {
        if (m.step + 1) % per_epoch == 0 {
            println!("epoch {}: loss {:.3}", (m.step + 1) / per_epoch, m.loss);
        }
    })?;
    println!("{} steps", curve.len());
    println!(
        "test accuracy {:.3}",
        evaluate(&model, &store, &data.test, Precision::F32, 0)?
    );

    for ex in &data.test[..4] {
        let mut g = Graph::new(Precision::F32);
        let v = g.constant(ex.volume.tensor().clone());
        let out = model.forward(&mut g, &store, v, &ex.question, &mut rng)?;
        let logits = g.value(out.logits).data();
        let guess = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap_or(0);
        println!(
            "{:<28} -> {:<10} (answer {}, sequence length {})",
            ex.question.parse.words.join(" "),
            EVENT_WORDS[guess],
            EVENT_WORDS[ex.label],
            out.sequence_lengths[0]
        );
    }
    Ok(())
}
