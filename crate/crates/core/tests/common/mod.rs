//! Oracles shared by the integration tests. Written from the definitions,
//! independent of the library's own kernels and checkers.

#![allow(dead_code)]

use deformqa::sampler::FeatureVolume;
use deformqa::{Graph, NodeId, ParamStore, Precision, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(index, weight)` pairs of the two grid cells bracketing normalized
/// coordinate `p` on an axis of extent `n` (align-corners, clamped).
fn axis_corners(p: f64, n: usize) -> Vec<(usize, f64)> {
    if n == 1 {
        return vec![(0, 1.0)];
    }
    let u = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let i0 = (u.floor() as usize).min(n - 2);
    let f = u - i0 as f64;
    vec![(i0, 1.0 - f), (i0 + 1, f)]
}

/// Sum over the 8 surrounding cells weighted by the product of per-axis
/// distances.
pub fn trilinear_oracle(volume: &FeatureVolume, p: [f64; 3]) -> Vec<f64> {
    let d = volume.dims();
    let mut out = vec![0.0; d.channels];
    for &(t, wt) in &axis_corners(p[0], d.frames) {
        for &(y, wy) in &axis_corners(p[1], d.height) {
            for &(x, wx) in &axis_corners(p[2], d.width) {
                let w = wt * wy * wx;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * volume.at(c, t, y, x);
                }
            }
        }
    }
    out
}

pub fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureVolume {
    let [c, t, h, w] = shape;
    FeatureVolume::from_fn(c, t, h, w, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type Objective<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId> + 'a;

fn eval(store: &ParamStore, f: &Objective) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, store).unwrap();
    g.value(out).item().unwrap()
}

/// Largest `|a − n| / max(|a|, |n|, 1e-3)` over every parameter
/// coordinate, with `n` the central difference at step 1e-5.
pub fn central_difference_error(store: &ParamStore, f: &Objective) -> (f64, String) {
    let h = 1e-5;
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, store).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = (0.0f64, String::new());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut probe = store.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&probe, f);
            probe.value_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&probe, f);
            probe.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if err > worst.0 {
                worst = (err, store.get(id).name.clone());
            }
        }
    }
    worst
}
