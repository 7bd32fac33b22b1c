use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::tensor::Precision;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_volume(d: usize, t: usize, h: usize, w: usize, seed: u64) -> FeatureVolume {
    let mut r = rng(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    FeatureVolume::from_fn(d, t, h, w, |_, _, _, _| n.sample(&mut r)).unwrap()
}

fn small_config(d: usize, heads: usize, points: usize, layers: usize, queries: usize) -> SamplerConfig {
    SamplerConfig {
        num_queries: queries,
        num_heads: heads,
        num_points: points,
        num_layers: layers,
        d_model: d,
        ffn_dim: 2 * d,
        ..SamplerConfig::default()
    }
}

fn matvec_rows(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (i, o) = w.dims2().unwrap();
    (0..o).map(|c| (0..i).map(|r| x[r] * w.at2(r, c)).sum()).collect()
}

#[test]
fn pool_question_examples() {
    let mut g = Graph::new(Precision::F64);
    let one = g.constant(Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap());
    let p = pool_question(&mut g, one).unwrap();
    assert_eq!(g.value(p).data(), &[0.3, -1.0]);
    let two = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let p = pool_question(&mut g, two).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    let swapped = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    let q = pool_question(&mut g, swapped).unwrap();
    assert_eq!(g.value(p).data(), g.value(q).data());
    let empty = g.constant(Tensor::zeros(&[0, 2]));
    assert!(pool_question(&mut g, empty).is_err());
}

#[test]
fn condition_queries_examples() {
    let mut g = Graph::new(Precision::F64);
    let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let c = condition_queries(&mut g, z, zero).unwrap();
    assert_eq!(g.value(c).data(), g.value(z).data());
    let zq = g.constant(Tensor::zeros(&[3, 2]));
    let l = g.constant(Tensor::vector(vec![0.25, -0.5]));
    let c = condition_queries(&mut g, zq, l).unwrap();
    assert_eq!(g.value(c).data(), &[0.25, -0.5, 0.25, -0.5, 0.25, -0.5]);
    let bad = g.constant(Tensor::vector(vec![1.0; 3]));
    assert!(condition_queries(&mut g, z, bad).is_err());
}

#[test]
fn reference_points_follow_the_logistic() {
    let mut store = ParamStore::new();
    let s = ConditionalSampler::new(&mut store, "s", small_config(8, 2, 2, 1, 3), &mut rng(1)).unwrap();
    store.value_mut(s.reference.weight).data_mut().fill(0.0);
    let mut g = Graph::new(Precision::F64);
    let z = g.constant(random_volume(1, 3, 8, 1, 4).into_tensor().reshape(vec![3, 8]).unwrap());
    let p = s.predict_reference_points(&mut g, &store, z).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.5));

    store.value_mut(s.reference.bias.unwrap()).data_mut().fill(20.0);
    let mut g = Graph::new(Precision::F64);
    let z = g.constant(Tensor::zeros(&[3, 8]));
    let p = s.predict_reference_points(&mut g, &store, z).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (1.0 - v) < 1e-8 && v < 1.0));
}

#[test]
fn trilinear_sample_examples() {
    let x = FeatureVolume::from_fn(1, 2, 1, 1, |_, t, _, _| 10.0 * t as f64).unwrap();
    assert_eq!(trilinear_sample(&x, [0.5, 0.0, 0.0]).unwrap(), vec![5.0]);

    let x = random_volume(3, 5, 3, 4, 9);
    for t in 0..5 {
        for y in 0..3 {
            for w in 0..4 {
                let p = [
                    FeatureVolume::normalized(t, 5),
                    FeatureVolume::normalized(y, 3),
                    FeatureVolume::normalized(w, 4),
                ];
                assert_eq!(trilinear_sample(&x, p).unwrap(), x.cell(t, y, w));
            }
        }
    }
    assert_eq!(
        trilinear_sample(&x, [-0.3, 0.5, 1.7]).unwrap(),
        trilinear_sample(&x, [0.0, 0.5, 1.0]).unwrap()
    );
    assert!(trilinear_sample(&x, [f64::NAN, 0.0, 0.0]).is_err());
}

#[test]
fn single_head_single_point_reduces_to_two_projections() {
    let mut store = ParamStore::new();
    let cfg = small_config(4, 1, 1, 1, 3);
    let s = ConditionalSampler::new(&mut store, "s", cfg, &mut rng(2)).unwrap();
    let layer = &s.layers[0];
    for b in [layer.value.bias.unwrap(), layer.output.bias.unwrap()] {
        store.value_mut(b).data_mut().fill(0.0);
    }
    let x = random_volume(4, 3, 2, 2, 3);
    let mut g = Graph::new(Precision::F64);
    let vol = g.constant(x.tensor().clone());
    let q = g.constant(random_volume(1, 3, 4, 1, 5).into_tensor().reshape(vec![3, 4]).unwrap());
    let r = g.constant(Tensor::from_rows(&[vec![0.2, 0.4, 0.6], vec![0.5, 0.5, 0.5], vec![0.9, 0.1, 0.3]]).unwrap());
    let (out, trace) = cda_attention(&mut g, &store, layer, q, r, vol).unwrap();
    assert!(g.value(trace.weights).data().iter().all(|&w| w == 1.0));
    let wv = store.value(layer.value.weight);
    let wo = store.value(layer.output.weight);
    for qi in 0..3 {
        let loc = g.value(trace.locations).row(qi);
        let sample = trilinear_sample(&x, [loc[0], loc[1], loc[2]]).unwrap();
        let want = matvec_rows(&matvec_rows(&sample, wv), wo);
        for (a, b) in g.value(out).row(qi).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_offsets_sample_at_reference_points() {
    let mut store = ParamStore::new();
    let s = ConditionalSampler::new(&mut store, "s", small_config(8, 2, 3, 1, 4), &mut rng(3)).unwrap();
    store.value_mut(s.layers[0].offsets.bias.unwrap()).data_mut().fill(0.0);
    let mut g = Graph::new(Precision::F64);
    let vol = g.constant(random_volume(8, 4, 3, 3, 1).into_tensor());
    let q = g.constant(random_volume(1, 2, 8, 1, 7).into_tensor().reshape(vec![2, 8]).unwrap());
    let out = s.sample_visual_tokens(&mut g, &store, vol, q).unwrap();
    let set = out.token_set(&g);
    for qi in 0..4 {
        for m in 0..2 {
            for k in 0..3 {
                assert_eq!(set.location(0, qi, m, k), set.reference_points[qi]);
            }
        }
    }
}

#[test]
fn constant_volume_makes_cross_attention_location_free() {
    let mut store = ParamStore::new();
    let s = ConditionalSampler::new(&mut store, "s", small_config(8, 2, 4, 1, 5), &mut rng(4)).unwrap();
    let layer = &s.layers[0];
    // Non-trivial offsets and weights so locations actually vary.
    let mut r = rng(5);
    let n = Normal::new(0.0, 0.5).unwrap();
    for id in [layer.offsets.weight, layer.weights.weight] {
        for v in store.value_mut(id).data_mut() {
            *v = n.sample(&mut r);
        }
    }
    let c: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let x = FeatureVolume::from_fn(8, 3, 4, 4, |ch, _, _, _| c[ch]).unwrap();
    let mut g = Graph::new(Precision::F64);
    let vol = g.constant(x.into_tensor());
    let q = g.constant(random_volume(1, 5, 8, 1, 6).into_tensor().reshape(vec![5, 8]).unwrap());
    let refs = g.constant(
        random_volume(1, 5, 3, 1, 8)
            .into_tensor()
            .reshape(vec![5, 3])
            .unwrap()
            .map(|v| 1.0 / (1.0 + (-v).exp())),
    );
    let (out, _) = cda_attention(&mut g, &store, layer, q, refs, vol).unwrap();
    // Σ_m W_m (W'_m c + b'_m) + b: the full value projection of c, then the output projection.
    let mut v = matvec_rows(&c, store.value(layer.value.weight));
    for (a, b) in v.iter_mut().zip(store.value(layer.value.bias.unwrap()).data()) {
        *a += b;
    }
    let mut want = matvec_rows(&v, store.value(layer.output.weight));
    for (a, b) in want.iter_mut().zip(store.value(layer.output.bias.unwrap()).data()) {
        *a += b;
    }
    for qi in 0..5 {
        for (a, b) in g.value(out).row(qi).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn default_sampler_on_full_sized_volume() {
    let mut store = ParamStore::new();
    let cfg = SamplerConfig {
        d_model: 16,
        ffn_dim: 32,
        ..SamplerConfig::default()
    };
    let s = ConditionalSampler::new(&mut store, "s", cfg, &mut rng(11)).unwrap();
    let x = random_volume(16, 30, 7, 7, 12);
    assert_eq!(x.dims().cells(), 1470);
    let run = || {
        let mut g = Graph::new(Precision::F64);
        let vol = g.constant(x.tensor().clone());
        let q = g.constant(
            random_volume(1, 6, 16, 1, 13)
                .into_tensor()
                .reshape(vec![6, 16])
                .unwrap(),
        );
        let out = s.sample_visual_tokens(&mut g, &store, vol, q).unwrap();
        out.token_set(&g)
    };
    let set = run();
    assert_eq!(set.tokens.shape(), &[25, 16]);
    assert_eq!(set.layers.len(), 4);
    assert_eq!(set.layers[0].locations.len(), 25 * 4 * 8);
    let (dev, min) = set.weight_normalization();
    assert!(dev < 1e-12 && min >= 0.0);
    for layer in &set.layers {
        assert!(layer.locations.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(set, run());
}

#[test]
fn question_context_moves_sampling_locations() {
    let mut store = ParamStore::new();
    let s = ConditionalSampler::new(&mut store, "s", small_config(8, 2, 2, 2, 4), &mut rng(21)).unwrap();
    let x = random_volume(8, 4, 3, 3, 22);
    let locations = |ctx: Vec<f64>| {
        let mut g = Graph::new(Precision::F64);
        let vol = g.constant(x.tensor().clone());
        let z = g.param(&store, s.queries);
        let c = g.constant(Tensor::vector(ctx));
        let out = s.sample_with_context(&mut g, &store, vol, z, c).unwrap();
        out.token_set(&g).layers
    };
    let a = locations(vec![0.0; 8]);
    let b = locations(vec![0.5; 8]);
    let diff = a[1]
        .locations
        .iter()
        .flatten()
        .zip(b[1].locations.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn global_context_examples() {
    let mut g = Graph::new(Precision::F64);
    let x = FeatureVolume::from_fn(1, 1, 2, 2, |_, _, y, w| (2 * y + w + 1) as f64).unwrap();
    let v = g.constant(x.into_tensor());
    let gc = global_context(&mut g, v).unwrap();
    assert_eq!(g.value(gc).data(), &[2.5]);

    let x = random_volume(3, 4, 1, 1, 2);
    let v = g.constant(x.tensor().clone());
    let gc = global_context(&mut g, v).unwrap();
    assert_eq!(g.value(gc).shape(), &[4, 3]);
    for t in 0..4 {
        assert_eq!(g.value(gc).row(t), x.cell(t, 0, 0).as_slice());
    }

    let x = FeatureVolume::from_fn(2, 3, 2, 3, |c, t, _, _| (c * 10 + t) as f64).unwrap();
    let v = g.constant(x.into_tensor());
    let gc = global_context(&mut g, v).unwrap();
    assert_eq!(g.value(gc).data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
}

#[test]
fn fusion_examples() {
    let mut g = Graph::new(Precision::F64);
    let global = g.constant(Tensor::zeros(&[32, 4]));
    let local = g.constant(Tensor::full(&[25, 4], 1.0));
    let f = fuse_global_local(&mut g, global, Some(local)).unwrap();
    assert_eq!(g.shape(f.tokens), &[57, 4]);
    assert_eq!(f.sources[0], TokenSource::Global { frame: 0 });
    assert_eq!(f.sources[32], TokenSource::Local { query: 0 });
    assert_eq!(g.value(f.tokens).row(31), &[0.0; 4]);

    let f = fuse_global_local(&mut g, global, None).unwrap();
    assert_eq!(f.tokens, global);
    let none = g.constant(Tensor::zeros(&[0, 4]));
    assert_eq!(fuse_global_local(&mut g, global, Some(none)).unwrap().tokens, global);

    let empty = g.constant(Tensor::zeros(&[0, 4]));
    assert!(fuse_global_local(&mut g, empty, Some(local)).is_err());
    let wrong = g.constant(Tensor::zeros(&[2, 3]));
    assert!(fuse_global_local(&mut g, global, Some(wrong)).is_err());
}

#[test]
fn stencil_directions_are_distinct() {
    let s = offset_stencil(4, 8, 0.1);
    let pts: Vec<&[f64]> = s.chunks_exact(3).collect();
    for (i, a) in pts.iter().enumerate() {
        let r: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r - 0.1).abs() < 1e-12);
        for b in &pts[i + 1..] {
            assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
        }
    }
}

#[test]
fn dump_round_trip() {
    let mut store = ParamStore::new();
    let s = ConditionalSampler::new(&mut store, "s", small_config(4, 2, 2, 2, 3), &mut rng(31)).unwrap();
    let mut g = Graph::new(Precision::F64);
    let vol = g.constant(random_volume(4, 2, 2, 2, 3).into_tensor());
    let q = g.constant(Tensor::full(&[2, 4], 0.3));
    let set = s.sample_visual_tokens(&mut g, &store, vol, q).unwrap().token_set(&g);
    let mut buf = Vec::new();
    let n = dump::write_records(&set, &mut buf).unwrap();
    assert_eq!(n, 2 * 3 * 2 * 2);
    let back = dump::read_records(buf.as_slice()).unwrap();
    assert_eq!(back, dump::records(&set));
    let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
    assert!(first.starts_with("{\"query_id\":0,\"layer\":0,\"head\":0,\"point\":0,\"location\":["));
}
