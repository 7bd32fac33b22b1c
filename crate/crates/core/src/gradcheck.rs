//! Central finite-difference verification of recorded gradients.
//!
//! For a scalar function `f` of the parameters in a [`ParamStore`], every
//! checked coordinate `θᵢ` is compared against
//! `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h`. The per-coordinate error is
//!
//! ```text
//! |analytic − numeric| / max(|analytic|, |numeric|, floor)
//! ```
//!
//! The floor keeps coordinates whose true derivative is zero (or nearly so)
//! from turning rounding noise into huge ratios. Checks always run in
//! 64-bit mode.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Precision;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many coordinates per parameter (chosen at random
    /// with `seed`); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Restrict the check to these parameters.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
            only: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate and its analytic/numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, store)?;
    g.value(out).item()
}

/// Analytic gradients of `f` for every parameter of `store` (zero for
/// parameters the computation never touches).
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let out = f(&mut g, store)?;
    let value = g.value(out).item()?;
    let grads = g.backward(out)?;
    let all = store
        .ids()
        .map(|id| {
            grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.value(id).len()])
        })
        .collect();
    Ok((value, all))
}

pub fn finite_diff_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let (f0, analytic) = analytic_gradients(store, &f)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at the unperturbed point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.ids().collect(),
    };
    for id in ids {
        let name = store.get(id).name.clone();
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            id,
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        };
        for &i in &coords {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work, &f)?;
            work.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective after perturbing `{name}`[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = err;
                check.worst = Some((i, a, numeric));
            }
        }
        check.passed = check.max_rel_error <= opts.tolerance;
        params.push(check);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: params.iter().all(|p| p.passed),
        params,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Init;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.75, -0.3]).unwrap(),
                Init::Values("test"),
                1.0,
            )
            .unwrap();
        let f = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, -1.5]).unwrap());
            let wn = g.param(s, w);
            let y = g.matmul(wn, x)?;
            Ok(g.sum_all(y))
        };
        let report = finite_diff_check(&store, f, &GradCheckOptions::default().with_tolerance(1e-8)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_finite_objective_names_the_parameter() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1e-6), Init::Values("test"), 1.0).unwrap();
        let f = |g: &mut Graph, s: &ParamStore| {
            let xn = g.param(s, x);
            Ok(g.ln(xn))
        };
        let opts = GradCheckOptions {
            step: 1e-3,
            ..Default::default()
        };
        let err = finite_diff_check(&store, f, &opts).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }
}
