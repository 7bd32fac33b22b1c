//! Fixed sinusoidal position codes.
//!
//! Text positions use the usual interleaved sine/cosine code over integer
//! positions. Visual positions are normalized `(τ, η, ω)` coordinates; each
//! axis owns a band of `⌊d/3⌋` slots filled with `sin(π c 2^i)` and
//! `cos(π c 2^i)` pairs, and any leftover slots are zero. Because
//! `cos(π c)` is injective on `[0, 1]`, distinct points get distinct codes
//! whenever `d ≥ 6`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub fn positional_embedding_1d(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn positional_embedding_3d(location: [f64; 3], d: usize) -> Result<Vec<f64>> {
    if location.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidInput(format!(
            "positional coordinates must lie in [0,1]^3, got {location:?}"
        )));
    }
    let band = d / 3;
    let mut out = vec![0.0; d];
    for (axis, &c) in location.iter().enumerate() {
        for j in 0..band {
            let angle = std::f64::consts::PI * c * f64::powi(2.0, (j / 2) as i32);
            out[axis * band + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(out)
}

/// Normalized grid coordinate of frame `t`, row `y`, column `x`.
pub fn grid_location(t: usize, y: usize, x: usize, frames: usize, height: usize, width: usize) -> [f64; 3] {
    let n = |i: usize, n: usize| if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    [n(t, frames), n(y, height), n(x, width)]
}

/// Location of the global token of frame `t`: temporal position, centred
/// spatially.
pub fn global_location(t: usize, frames: usize) -> [f64; 3] {
    let tau = if frames <= 1 {
        0.0
    } else {
        t as f64 / (frames - 1) as f64
    };
    [tau, 0.5, 0.5]
}

/// Stacks 3-D codes for a list of locations into an `n × d` tensor.
pub fn positional_table_3d(locations: &[[f64; 3]], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(locations.len() * d);
    for &loc in locations {
        data.extend(positional_embedding_3d(loc, d)?);
    }
    Tensor::new(vec![locations.len(), d], data)
}

/// [`positional_embedding_3d`] of every row of an `n × 3` location node,
/// differentiable in the locations. Rows must lie in the unit cube.
pub fn positional_code_3d(g: &mut Graph, locations: NodeId, d: usize) -> Result<NodeId> {
    let n = match *g.shape(locations) {
        [n, 3] => n,
        _ => {
            return Err(Error::InvalidInput(format!(
                "locations must be n × 3, got {:?}",
                g.shape(locations)
            )))
        }
    };
    if let Some(c) = g.value(locations).data().iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidInput(format!("positional coordinate {c} outside [0,1]")));
    }
    let band = d / 3;
    let mut freq = vec![0.0; 3 * d];
    let mut sin_mask = vec![0.0; n * d];
    let mut cos_mask = vec![0.0; n * d];
    for axis in 0..3 {
        for j in 0..band {
            let col = axis * band + j;
            freq[axis * d + col] = std::f64::consts::PI * f64::powi(2.0, (j / 2) as i32);
            for r in 0..n {
                if j % 2 == 0 {
                    sin_mask[r * d + col] = 1.0;
                } else {
                    cos_mask[r * d + col] = 1.0;
                }
            }
        }
    }
    let freq = g.constant(Tensor::matrix(3, d, freq)?);
    let angles = g.matmul(locations, freq)?;
    let s = g.sin(angles);
    let c = g.cos(angles);
    let sm = g.constant(Tensor::matrix(n, d, sin_mask)?);
    let cm = g.constant(Tensor::matrix(n, d, cos_mask)?);
    let s = g.mul(s, sm)?;
    let c = g.mul(c, cm)?;
    g.add(s, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_d_codes() {
        let a = positional_embedding_3d([0.0, 0.0, 0.0], 64).unwrap();
        let b = positional_embedding_3d([1.0, 0.0, 0.0], 64).unwrap();
        assert_eq!(a, positional_embedding_3d([0.0, 0.0, 0.0], 64).unwrap());
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) > 0.0);
        assert!(positional_embedding_3d([1.2, 0.0, 0.0], 64).is_err());
        assert_eq!(a.len(), 64);
        assert_eq!(a[63], 0.0);
    }

    #[test]
    fn distinct_grid_points_distinct_codes() {
        let (t, h, w) = (4, 3, 3);
        let mut codes = Vec::new();
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    codes.push(positional_embedding_3d(grid_location(ti, y, x, t, h, w), 6).unwrap());
                }
            }
        }
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let diff = codes[i]
                    .iter()
                    .zip(&codes[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff > 1e-9, "{i} {j}");
            }
        }
    }

    #[test]
    fn graph_code_matches_table() {
        let locs = [[0.1, 0.5, 0.9], [1.0, 0.0, 0.33]];
        let mut g = Graph::new(crate::tensor::Precision::F64);
        let l = g.constant(Tensor::from_rows(&locs.map(|r| r.to_vec())).unwrap());
        let code = positional_code_3d(&mut g, l, 20).unwrap();
        let table = positional_table_3d(&locs, 20).unwrap();
        assert!(g.value(code).max_abs_diff(&table) < 1e-15);
    }

    #[test]
    fn one_d_code_at_zero() {
        let p = positional_embedding_1d(0, 4);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
