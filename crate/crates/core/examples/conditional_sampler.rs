//! Question-conditioned deformable sampling: a fixed number of learnable
//! queries pick reference points in a video volume and read tokens from
//! offsets around them.

use deformqa::regularizer::diversity_metrics;
use deformqa::sampler::dump::records;
use deformqa::sampler::{ConditionalSampler, FeatureVolume, SamplerConfig};
use deformqa::{Graph, ParamStore, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> deformqa::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = SamplerConfig {
        num_queries: 6,
        num_heads: 2,
        num_points: 4,
        num_layers: 2,
        d_model: 16,
        ffn_dim: 32,
        ..SamplerConfig::default()
    };
    let mut store = ParamStore::new();
    let sampler = ConditionalSampler::new(&mut store, "sampler", config, &mut rng)?;

    let volume = FeatureVolume::from_fn(16, 12, 4, 4, |_, _, _, _| rng.random_range(-1.0..1.0))?;
    let sample = |question_scale: f64| -> deformqa::Result<_> {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(volume.tensor().clone());
        let q = g.constant(Tensor::full(&[5, 16], question_scale));
        let out = sampler.sample_visual_tokens(&mut g, &store, v, q)?;
        Ok(out.token_set(&g))
    };

    let set = sample(0.5)?;
    println!("{} tokens of width {}", set.num_tokens(), set.tokens.shape()[1]);
    for (i, p) in set.reference_points.iter().enumerate() {
        println!("query {i}: reference [t, y, x] = {p:.3?}");
    }
    let (dev, min) = set.weight_normalization();
    println!("attention weights: max |sum - 1| = {dev:.1e}, min weight {min:.3}");
    let m = diversity_metrics(&set)?;
    println!(
        "mean |cos| between tokens {:.3}, closest reference points {:.3} apart",
        m.gram_offdiag, m.min_location_distance
    );

    let first = &records(&set)[..4];
    println!("first sampling points of query 0, head 0:");
    for r in first {
        println!("  {}", serde_json::to_string(r).expect("record serializes"));
    }

    // A different question moves the reference points.
    let other = sample(-0.5)?;
    let shift: f64 = set
        .reference_points
        .iter()
        .zip(&other.reference_points)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / set.reference_points.len() as f64;
    println!("mean reference-point shift under another question: {shift:.4}");
    Ok(())
}
