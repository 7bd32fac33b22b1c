//! Trilinear interpolation of a `d × t × h × w` feature volume at
//! normalized `[t, y, x]` locations.

use deformqa::sampler::{trilinear_sample, FeatureVolume};
use deformqa::verify::brute_force_trilinear;

fn main() -> deformqa::Result<()> {
    // Channel c at cell (t, y, x) holds c*1000 + t*100 + y*10 + x, so sampled
    // values are easy to read off.
    let volume = FeatureVolume::from_fn(2, 4, 3, 5, |c, t, y, x| (c * 1000 + t * 100 + y * 10 + x) as f64)?;

    let cell = [
        FeatureVolume::normalized(2, 4),
        FeatureVolume::normalized(1, 3),
        FeatureVolume::normalized(3, 5),
    ];
    println!(
        "grid cell (2, 1, 3) at {cell:.3?}: {:?}",
        trilinear_sample(&volume, cell)?
    );

    for p in [[0.5, 0.5, 0.5], [0.1, 0.9, 0.25], [1.0, 0.0, 1.0], [1.4, -0.2, 0.5]] {
        let fast = trilinear_sample(&volume, p)?;
        let oracle = brute_force_trilinear(&volume, p);
        println!("{p:?} -> {fast:.3?} (8-corner sum {oracle:.3?})");
    }
    // The last point lies outside the unit cube and is clamped to its surface.
    Ok(())
}
