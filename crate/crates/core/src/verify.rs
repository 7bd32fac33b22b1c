//! Self-checks run by the `check` command: finite-difference gradient checks
//! of every differentiable component, a brute-force interpolation oracle,
//! closed-form regularizer values, dependency and memory-model invariants.
//!
//! Each check yields one [`CheckOutcome`]; `measured` is the quantity
//! compared against `tolerance` (an error for numeric checks, a violation
//! count for structural ones).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dependency::{reindex_for_subwords, DepMode, DependencyHead, DependencyParse};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions};
use crate::graph::{Graph, NodeId};
use crate::harness::memory::{max_frames, reference_budget, CostModelInput, CostStrategy};
use crate::model::qa::batch_loss;
use crate::model::{ModelConfig, QaModel, QuestionRecord};
use crate::param::{Init, ParamStore};
use crate::regularizer::{contrastive, maximal_coding_rate, soft_orthogonality};
use crate::sampler::{cda_layer, trilinear_sample, CdaLayerParams, FeatureVolume, SamplerConfig};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: crate::Error) -> Self {
        Self {
            name: name.into(),
            passed: false,
            measured: f64::NAN,
            tolerance: 0.0,
            detail: err.to_string(),
        }
    }
}

/// Tolerance for checks whose forward pass interpolates.
pub const INTERPOLATING_TOL: f64 = 1e-4;
/// Tolerance for checks built from smooth algebra only.
pub const SMOOTH_TOL: f64 = 1e-6;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = gaussian(&mut rng, g.shape(x), 1.0);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    Ok(g.sum_all(p))
}

fn grad_outcome(
    name: &str,
    tol: f64,
    seeds: &[u64],
    build: impl Fn(u64) -> Result<(ParamStore, Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>)>,
) -> CheckOutcome {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for &seed in seeds {
        let mut run = || -> Result<f64> {
            let (store, f) = build(seed)?;
            let report = finite_diff_check(&store, f, &GradCheckOptions::default().with_tolerance(tol))?;
            if let Some(p) = report.worst() {
                if p.max_rel_error >= worst {
                    detail = format!("worst parameter `{}` at point {seed}", p.name);
                }
            }
            Ok(report.max_rel_error)
        };
        match run() {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckOutcome::failed(name, e),
        }
    }
    CheckOutcome::at_most(name, worst, tol, detail)
}

type Objective = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

/// Trilinear sampling, differentiated with respect to both the volume and
/// interior sampling locations.
pub fn trilinear_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vol = store.add(
        "volume",
        gaussian(&mut rng, &[3, 3, 4, 5], 1.0),
        Init::Values("random"),
        1.0,
    )?;
    let loc = store.add(
        "locations",
        uniform(&mut rng, &[6, 3], 0.05, 0.95),
        Init::Values("random"),
        1.0,
    )?;
    let f: Objective = Box::new(move |g, s| {
        let v = g.param(s, vol);
        let l = g.param(s, loc);
        let out = g.trilinear(v, l)?;
        project(g, out, seed)
    });
    Ok((store, f))
}

/// One full sampler layer on a small volume, with queries, reference
/// points and the volume all treated as parameters.
pub fn cda_layer_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SamplerConfig {
        num_queries: 3,
        num_heads: 2,
        num_points: 2,
        num_layers: 1,
        d_model: 4,
        ffn_dim: 8,
        ..SamplerConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = CdaLayerParams::new(&mut store, "layer", &cfg, &mut rng)?;
    // Nonzero offset and weight projections so their gradients are exercised.
    for name in ["layer.offsets.weight", "layer.weights.weight"] {
        let id = store.lookup(name).expect("layer parameter");
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = gaussian(&mut rng, &shape, 0.05);
    }
    let q = store.add("queries", gaussian(&mut rng, &[3, 4], 1.0), Init::Values("random"), 1.0)?;
    let r = store.add(
        "reference",
        uniform(&mut rng, &[3, 3], 0.25, 0.75),
        Init::Values("random"),
        1.0,
    )?;
    let v = store.add(
        "volume",
        gaussian(&mut rng, &[4, 3, 3, 3], 1.0),
        Init::Values("random"),
        1.0,
    )?;
    let f: Objective = Box::new(move |g, s| {
        let (qn, rn, vn) = (g.param(s, q), g.param(s, r), g.param(s, v));
        let (out, _) = cda_layer(g, s, &layer, qn, rn, vn)?;
        project(g, out, seed)
    });
    Ok((store, f))
}

fn token_batch(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    n: usize,
    lv: usize,
    d: usize,
    std: f64,
) -> Result<Vec<crate::ParamId>> {
    (0..n)
        .map(|i| {
            store.add(
                format!("tokens{i}"),
                gaussian(rng, &[lv, d], std),
                Init::Values("random"),
                1.0,
            )
        })
        .collect()
}

pub fn soft_orthogonality_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = token_batch(&mut store, &mut rng, 2, 3, 4, 0.5)?;
    let f: Objective = Box::new(move |g, s| {
        let t: Vec<NodeId> = ids.iter().map(|&i| g.param(s, i)).collect();
        soft_orthogonality(g, &t, 0.01)
    });
    Ok((store, f))
}

pub fn coding_rate_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = token_batch(&mut store, &mut rng, 2, 3, 4, 0.5)?;
    let f: Objective = Box::new(move |g, s| {
        let t: Vec<NodeId> = ids.iter().map(|&i| g.param(s, i)).collect();
        maximal_coding_rate(g, &t, 0.01, 0.5)
    });
    Ok((store, f))
}

pub fn contrastive_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = token_batch(&mut store, &mut rng, 3, 3, 4, 1.0)?;
    let vols: Vec<_> = (0..3)
        .map(|i| {
            store.add(
                format!("volume{i}"),
                gaussian(&mut rng, &[4, 2, 2, 2], 1.0),
                Init::Values("random"),
                1.0,
            )
        })
        .collect::<Result<_>>()?;
    let f: Objective = Box::new(move |g, s| {
        let t: Vec<NodeId> = ids.iter().map(|&i| g.param(s, i)).collect();
        let v: Vec<NodeId> = vols.iter().map(|&i| g.param(s, i)).collect();
        contrastive(g, &t, &v, 0.01, 0.1, false)
    });
    Ok((store, f))
}

/// Learned bi-affine dependency attention `softmax(Q U Kᵀ)`.
pub fn biaffine_gradient(seed: u64) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = DependencyHead::new(&mut store, "dep", 4, 2, &mut rng)?;
    let o = store.add("inputs", gaussian(&mut rng, &[4, 4], 1.0), Init::Values("random"), 1.0)?;
    let f: Objective = Box::new(move |g, s| {
        let on = g.param(s, o);
        let a = head.biaffine_scores(g, s, on)?;
        let out = head.forward(g, s, on, a)?;
        let p1 = project(g, a, seed)?;
        let p2 = project(g, out, seed + 1)?;
        g.add(p1, p2)
    });
    Ok((store, f))
}

/// A 3-word question `what happened first` with its tree.
pub fn tiny_question(vocab: usize) -> Result<QuestionRecord> {
    let parse = DependencyParse::unsplit(&["what", "happened", "first"], &[Some(1), None, Some(1)])?;
    QuestionRecord::new(vec![0, 1 % vocab, 2 % vocab], parse)
}

/// Loss of the whole model on the tiny configuration (hidden 8, two
/// frames of 2×2, 3 question tokens, 3 classes) with soft orthogonality
/// switched on. `mode` selects gold or learned dependency attention.
pub fn qa_gradient(seed: u64, mode: DepMode) -> Result<(ParamStore, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny(3, 3);
    cfg.dependency.mode = mode;
    cfg.regularizer_mut().kind = crate::regularizer::RegKind::So;
    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, cfg, &mut rng)?;
    // Sampler projections start at zero; perturb them so every path carries gradient.
    let zero_init: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with("offsets.weight") || p.name.ends_with("weights.weight"))
        .map(|(id, _)| id)
        .collect();
    for id in zero_init {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = gaussian(&mut rng, &shape, 0.05);
    }
    let volume = FeatureVolume::new(gaussian(&mut rng, &[8, 2, 2, 2], 1.0))?;
    let question = tiny_question(3)?;
    let label = rng.random_range(0..3);
    let f: Objective = Box::new(move |g, s| {
        let v = g.constant(volume.tensor().clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(g, s, v, &question, &mut r)?;
        Ok(batch_loss(g, &model, &[out], &[v], &[label])?.loss)
    });
    Ok((store, f))
}

/// Finite-difference checks of every differentiable component at the given
/// random points.
pub fn gradient_checks(seeds: &[u64]) -> Vec<CheckOutcome> {
    vec![
        grad_outcome("gradient/trilinear", INTERPOLATING_TOL, seeds, trilinear_gradient),
        grad_outcome("gradient/cda_layer", INTERPOLATING_TOL, seeds, cda_layer_gradient),
        grad_outcome(
            "gradient/soft_orthogonality",
            SMOOTH_TOL,
            seeds,
            soft_orthogonality_gradient,
        ),
        grad_outcome("gradient/coding_rate", SMOOTH_TOL, seeds, coding_rate_gradient),
        grad_outcome("gradient/contrastive", SMOOTH_TOL, seeds, contrastive_gradient),
        grad_outcome("gradient/biaffine", SMOOTH_TOL, seeds, biaffine_gradient),
        grad_outcome("gradient/qa_gold", INTERPOLATING_TOL, seeds, |s| {
            qa_gradient(s, DepMode::Gold)
        }),
        grad_outcome("gradient/qa_learned", INTERPOLATING_TOL, seeds, |s| {
            qa_gradient(s, DepMode::Learned)
        }),
    ]
}

/// Weighted sum over the eight surrounding grid cells, written directly
/// from the definition.
pub fn brute_force_trilinear(volume: &FeatureVolume, p: [f64; 3]) -> Vec<f64> {
    let d = volume.dims();
    let ext = [d.frames, d.height, d.width];
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = p[a].clamp(0.0, 1.0) * (ext[a] - 1) as f64;
        lo[a] = (u.floor() as usize).min(ext[a].saturating_sub(2));
        frac[a] = if ext[a] == 1 { 0.0 } else { u - lo[a] as f64 };
    }
    let mut out = vec![0.0; d.channels];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            idx[a] = (lo[a] + bit).min(ext[a] - 1);
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * volume.at(c, idx[0], idx[1], idx[2]);
        }
    }
    out
}

/// Interpolation against the brute-force oracle on random points, exactness
/// at grid points and linearity in the volume.
pub fn interpolation_checks(points: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [[3, 4, 5, 6], [2, 1, 3, 3], [2, 5, 1, 1]];
    let (mut oracle, mut grid, mut linear) = (0.0f64, 0.0f64, 0.0f64);
    for s in shapes {
        let a = FeatureVolume::new(gaussian(&mut rng, &s, 1.0)).expect("valid shape");
        let b = FeatureVolume::new(gaussian(&mut rng, &s, 1.0)).expect("valid shape");
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = FeatureVolume::new(
            Tensor::new(
                s.to_vec(),
                a.tensor()
                    .data()
                    .iter()
                    .zip(b.tensor().data())
                    .map(|(x, y)| alpha * x + beta * y)
                    .collect(),
            )
            .expect("same shape"),
        )
        .expect("valid shape");
        for _ in 0..points {
            let p = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let got = trilinear_sample(&a, p).expect("finite point");
            let want = brute_force_trilinear(&a, p);
            oracle = oracle.max(got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let lhs = trilinear_sample(&combo, p).expect("finite point");
            let gb = trilinear_sample(&b, p).expect("finite point");
            for c in 0..lhs.len() {
                linear = linear.max((lhs[c] - (alpha * got[c] + beta * gb[c])).abs());
            }
        }
        let d = a.dims();
        for t in 0..d.frames {
            for y in 0..d.height {
                for x in 0..d.width {
                    let p = [
                        FeatureVolume::normalized(t, d.frames),
                        FeatureVolume::normalized(y, d.height),
                        FeatureVolume::normalized(x, d.width),
                    ];
                    let got = trilinear_sample(&a, p).expect("finite point");
                    for (c, v) in got.iter().enumerate() {
                        grid = grid.max((v - a.at(c, t, y, x)).abs());
                    }
                }
            }
        }
    }
    vec![
        CheckOutcome::at_most(
            "interpolation/oracle",
            oracle,
            1e-12,
            format!("{points} points per shape"),
        ),
        CheckOutcome::at_most("interpolation/grid_points", grid, 0.0, "exact at every grid point"),
        CheckOutcome::at_most(
            "interpolation/linearity",
            linear,
            1e-10,
            "αA+βB sampled vs combined samples",
        ),
    ]
}

/// Closed-form values of the three regularizers.
pub fn regularizer_checks() -> Vec<CheckOutcome> {
    let lambda = 0.01;
    let eval = |build: &dyn Fn(&mut Graph) -> Result<NodeId>| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let n = build(&mut g)?;
        g.value(n).item()
    };
    let mut out = Vec::new();
    let so_zero = eval(&|g| {
        let t = g.constant(Tensor::zeros(&[4, 6]));
        let u = g.constant(Tensor::zeros(&[4, 6]));
        soft_orthogonality(g, &[t, u], lambda)
    });
    out.push(match so_zero {
        Ok(v) => CheckOutcome::at_most(
            "regularizer/so_zero_tokens",
            (v - lambda * 2.0 * 4.0).abs(),
            1e-12,
            "λ·N·L_v",
        ),
        Err(e) => CheckOutcome::failed("regularizer/so_zero_tokens", e),
    });
    let so_orth = eval(&|g| {
        let mut rows = vec![vec![0.0; 5]; 3];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i + 1] = 1.0;
        }
        let t = g.constant(Tensor::from_rows(&rows)?);
        soft_orthogonality(g, &[t], lambda)
    });
    out.push(match so_orth {
        Ok(v) => CheckOutcome::at_most("regularizer/so_orthonormal", v.abs(), 1e-12, "orthonormal tokens"),
        Err(e) => CheckOutcome::failed("regularizer/so_orthonormal", e),
    });
    let mcr_zero = eval(&|g| {
        let t = g.constant(Tensor::zeros(&[3, 4]));
        maximal_coding_rate(g, &[t], lambda, 0.5)
    });
    out.push(match mcr_zero {
        Ok(v) => CheckOutcome::at_most("regularizer/mcr_zero_tokens", v.abs(), 1e-12, "log det I = 0"),
        Err(e) => CheckOutcome::failed("regularizer/mcr_zero_tokens", e),
    });
    let v = [0.3, -1.2, 0.7, 2.0];
    let mcr_one = eval(&|g| {
        let t = g.constant(Tensor::matrix(1, 4, v.to_vec())?);
        maximal_coding_rate(g, &[t], lambda, 0.5)
    });
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    let want = -lambda * 0.5 * (1.0 + 4.0 / 0.25 * norm2).ln();
    out.push(match mcr_one {
        Ok(x) => CheckOutcome::at_most(
            "regularizer/mcr_single_token",
            (x - want).abs(),
            1e-9,
            "−λ/2·log(1+d‖v‖²/ε²)",
        ),
        Err(e) => CheckOutcome::failed("regularizer/mcr_single_token", e),
    });
    let con = eval(&|g| {
        let e = |i: usize| {
            let mut r = vec![0.0; 4];
            r[i] = 1.0;
            r
        };
        let t0 = g.constant(Tensor::from_rows(&[e(0)])?);
        let t1 = g.constant(Tensor::from_rows(&[e(1)])?);
        let mut v0 = Tensor::zeros(&[4, 1, 1, 1]);
        v0.data_mut()[0] = 1.0;
        let mut v1 = Tensor::zeros(&[4, 1, 1, 1]);
        v1.data_mut()[1] = 1.0;
        let (v0, v1) = (g.constant(v0), g.constant(v1));
        contrastive(g, &[t0, t1], &[v0, v1], lambda, 0.1, false)
    });
    out.push(match con {
        Ok(x) => CheckOutcome::at_most(
            "regularizer/contrastive_aligned",
            (x + 20.0 * lambda).abs(),
            1e-9,
            "−20λ at τ=0.1",
        ),
        Err(e) => CheckOutcome::failed("regularizer/contrastive_aligned", e),
    });
    out
}

/// Subword re-indexing rules over random segmentations of random trees:
/// the last piece of a word points at the last piece of the word's
/// governor, the others point at their right neighbour.
pub fn dependency_checks(cases: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut not_one_hot = 0usize;
    for _ in 0..cases {
        let n = rng.random_range(1..8);
        // Attach words in random order, each to an already attached word.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut govs = vec![None; n];
        for i in 1..n {
            govs[order[i]] = Some(order[rng.random_range(0..i)]);
        }
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..4)).collect();
        let parse = match DependencyParse::new(words, govs.clone(), &counts) {
            Ok(p) => p,
            Err(_) => {
                violations += 1;
                continue;
            }
        };
        let adj = match reindex_for_subwords(&parse) {
            Ok(a) => a,
            Err(_) => {
                violations += 1;
                continue;
            }
        };
        let mut start = Vec::with_capacity(n);
        let mut acc = 0;
        for &c in &counts {
            start.push(acc);
            acc += c;
        }
        let last = |w: usize| start[w] + counts[w] - 1;
        for w in 0..n {
            for j in 0..counts[w] {
                let s = start[w] + j;
                let want = if j + 1 < counts[w] {
                    s + 1
                } else {
                    match govs[w] {
                        Some(g) => last(g),
                        None => s,
                    }
                };
                if adj.target(s) != want {
                    violations += 1;
                }
                let row_sum: usize = (0..adj.len()).map(|c| adj.get(s, c) as usize).sum();
                if row_sum != 1 {
                    not_one_hot += 1;
                }
            }
        }
    }
    vec![
        CheckOutcome::at_most(
            "dependency/subword_rules",
            violations as f64,
            0.0,
            format!("{cases} random segmentations"),
        ),
        CheckOutcome::at_most(
            "dependency/rows_one_hot",
            not_one_hot as f64,
            0.0,
            "every row has a single 1",
        ),
    ]
}

/// Max-frame ordering under one calibrated budget and cost ordering at T=32.
pub fn memory_model_checks() -> Vec<CheckOutcome> {
    let budget = reference_budget();
    let mf = |s| max_frames(&CostModelInput::reference(s, 1), budget);
    let (b, s, d) = (
        mf(CostStrategy::Baseline),
        mf(CostStrategy::Sparse),
        mf(CostStrategy::Dsr),
    );
    let cost = |st| CostModelInput::reference(st, 32).cost();
    let (cb, cs, cd) = (
        cost(CostStrategy::Baseline),
        cost(CostStrategy::Sparse),
        cost(CostStrategy::Dsr),
    );
    let ordered = b == 60 && s > b && d > s;
    let costs = cd < cs && cs < cb;
    vec![
        CheckOutcome::at_most(
            "memory/max_frames_order",
            if ordered { 0.0 } else { 1.0 },
            0.0,
            format!("baseline {b}, sparse {s}, dsr {d}"),
        ),
        CheckOutcome::at_most(
            "memory/cost_order_t32",
            if costs { 0.0 } else { 1.0 },
            0.0,
            format!("dsr {cd}, sparse {cs}, baseline {cb}"),
        ),
    ]
}

/// Everything `check` runs.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = gradient_checks(&[1, 2, 3]);
    out.extend(interpolation_checks(1000, 7));
    out.extend(regularizer_checks());
    out.extend(dependency_checks(60, 11));
    out.extend(memory_model_checks());
    out
}
