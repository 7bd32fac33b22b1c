//! The three token-diversity regularizers on spread-out and collapsed
//! token sets.

use deformqa::regularizer::{contrastive, maximal_coding_rate, mean_abs_offdiag, soft_orthogonality};
use deformqa::{Graph, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: usize = 6;
const D: usize = 16;

fn tokens(rng: &mut ChaCha8Rng, collapse: f64) -> Tensor {
    let shared: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(L * D);
    for _ in 0..L {
        for s in &shared {
            let own: f64 = rng.random_range(-1.0..1.0);
            data.push(((1.0 - collapse) * own + collapse * s) / (D as f64).sqrt());
        }
    }
    Tensor::new(vec![L, D], data).expect("shape matches data")
}

fn main() -> deformqa::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>12}",
        "collapse", "mean|cos|", "so", "mcr", "contrastive"
    );
    for collapse in [0.0, 0.5, 0.9, 1.0] {
        let batch: Vec<Tensor> = (0..3).map(|_| tokens(&mut rng, collapse)).collect();
        let volumes: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(
                    vec![D, 2, 2, 2],
                    (0..D * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect::<deformqa::Result<_>>()?;

        let mut g = Graph::new(Precision::F64);
        let t: Vec<_> = batch.iter().map(|x| g.constant(x.clone())).collect();
        let v: Vec<_> = volumes.iter().map(|x| g.constant(x.clone())).collect();
        let so = soft_orthogonality(&mut g, &t, 1.0)?;
        let mcr = maximal_coding_rate(&mut g, &t, 1.0, 0.5)?;
        let con = contrastive(&mut g, &t, &v, 1.0, 0.1, false)?;
        println!(
            "{collapse:<10} {:>10.3} {:>10.3} {:>10.3} {:>12.3}",
            mean_abs_offdiag(&batch[0])?,
            g.value(so).item()?,
            g.value(mcr).item()?,
            g.value(con).item()?
        );
    }
    // Collapsed sets score higher than spread-out ones on both the
    // orthogonality penalty and the coding-rate term (a negative log-volume).
    Ok(())
}
