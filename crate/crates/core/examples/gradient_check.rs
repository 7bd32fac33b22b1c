//! Finite-difference checks of the analytic backward passes.
//!
//! Runs the built-in gradient checks (trilinear sampling, a sampler layer,
//! the three regularizers, the biaffine head and the full QA model), then
//! checks a hand-written objective the same way.

use deformqa::gradcheck::{finite_diff_check, GradCheckOptions};
use deformqa::{Init, ParamStore, Tensor};

fn main() -> deformqa::Result<()> {
    for outcome in deformqa::verify::gradient_checks(&[1]) {
        println!(
            "{:<28} {} max rel err {:.2e} (tol {:.0e})",
            outcome.name,
            if outcome.passed { "ok  " } else { "FAIL" },
            outcome.measured,
            outcome.tolerance
        );
    }

    // sum(softmax(W x) * y) for a 4x3 weight matrix.
    let mut store = ParamStore::new();
    let w = store.add(
        "w",
        Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?,
        Init::Values("example"),
        1.0,
    )?;
    let objective = move |g: &mut deformqa::Graph, s: &ParamStore| {
        let w = g.param(s, w);
        let x = g.constant(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0])?);
        let y = g.constant(Tensor::new(vec![4, 1], vec![1.0, 0.0, -2.0, 3.0])?);
        let logits = g.matmul(w, x)?;
        let p = g.softmax(logits, 0)?;
        let py = g.mul(p, y)?;
        Ok(g.sum_all(py))
    };
    let report = finite_diff_check(&store, objective, &GradCheckOptions::default())?;
    println!(
        "custom objective: max rel err {:.2e}, passed {}",
        report.max_rel_error, report.passed
    );
    Ok(())
}
