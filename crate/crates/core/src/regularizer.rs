//! Sampling-diversity regularizers over a batch of sampled token sets.
//!
//! Each batch item is an `L_v × d` node holding one sampled token per row,
//! so the token Gram matrix `VᵀV` is `T Tᵀ` here.
//!
//! ```text
//! SO  = λ Σ_i ‖V_iᵀV_i − I‖²_F
//! MCR = −λ Σ_i ½ log det(I + d/(L_v ε²) · V_iᵀV_i)
//! CON = −λ Σ_i log[ exp(s(V̂_i, X̂_i)/τ) / Σ_{j≠i} exp(s(V̂_i, X̂_j)/τ) ]
//! ```
//!
//! `V̂` and `X̂` are mean-pooled token sets and feature volumes and `s` is
//! cosine similarity. The contrastive denominator leaves out the positive
//! pair; `inclusive_denominator` switches to the usual form that keeps it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::sampler::SampledTokenSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    #[default]
    None,
    /// Soft orthogonality.
    So,
    /// Maximal coding rate.
    Mcr,
    Contrastive,
}

impl std::str::FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "so" => Ok(Self::So),
            "mcr" => Ok(Self::Mcr),
            "contrastive" | "con" => Ok(Self::Contrastive),
            other => Err(Error::Config(format!(
                "unknown regularizer `{other}` (expected none, so, mcr or contrastive)"
            ))),
        }
    }
}

impl std::fmt::Display for RegKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::So => "so",
            Self::Mcr => "mcr",
            Self::Contrastive => "contrastive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub inclusive_denominator: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            kind: RegKind::None,
            lambda: 0.01,
            epsilon: 0.5,
            tau: 0.1,
            inclusive_denominator: false,
        }
    }
}

impl RegConfig {
    pub fn new(kind: RegKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "regularizer weight must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "coding-rate epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "contrastive temperature must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Whether the term contributes to the loss at all.
    pub fn active(&self) -> bool {
        self.kind != RegKind::None && self.lambda > 0.0
    }
}

fn token_dims(g: &Graph, tokens: NodeId) -> Result<(usize, usize)> {
    match *g.shape(tokens) {
        [l, d] if l >= 1 => Ok((l, d)),
        _ => Err(Error::InvalidInput(format!(
            "token set must be L_v × d with L_v >= 1, got {:?}",
            g.shape(tokens)
        ))),
    }
}

fn gram(g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
    let t = g.transpose(tokens)?;
    g.matmul(tokens, t)
}

pub fn soft_orthogonality(g: &mut Graph, batch: &[NodeId], lambda: f64) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(batch.len());
    for &tokens in batch {
        let (l, _) = token_dims(g, tokens)?;
        let eye = g.constant(Tensor::identity(l));
        let gm = gram(g, tokens)?;
        let diff = g.sub(gm, eye)?;
        let sq = g.mul(diff, diff)?;
        terms.push(g.sum_all(sq));
    }
    sum_scaled(g, &terms, lambda)
}

pub fn maximal_coding_rate(g: &mut Graph, batch: &[NodeId], lambda: f64, epsilon: f64) -> Result<NodeId> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("coding-rate epsilon must be > 0, got {epsilon}")));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &tokens in batch {
        let (l, d) = token_dims(g, tokens)?;
        let eye = g.constant(Tensor::identity(l));
        let gm = gram(g, tokens)?;
        let gm = g.scale(gm, d as f64 / (l as f64 * epsilon * epsilon));
        let m = g.add(eye, gm)?;
        terms.push(g.logdet_spd(m)?);
    }
    sum_scaled(g, &terms, -0.5 * lambda)
}

/// `λ · Σ terms` (zero for an empty batch).
fn sum_scaled(g: &mut Graph, terms: &[NodeId], factor: f64) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let stacked = g.stack_scalars(terms)?;
    let total = g.sum_all(stacked);
    Ok(g.scale(total, factor))
}

/// Unit-normalizes a `1 × d` row, failing on a zero vector.
fn unit_row(g: &mut Graph, row: NodeId, what: &str) -> Result<NodeId> {
    let sq = g.mul(row, row)?;
    let norm2 = g.sum_all(sq);
    let n2 = g.value(norm2).item()?;
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cosine similarity undefined: {what} has zero or non-finite norm"
        )));
    }
    let norm = g.sqrt(norm2);
    let one = g.constant(Tensor::scalar(1.0));
    let inv = g.div(one, norm)?;
    let inv = g.reshape(inv, &[1, 1])?;
    g.matmul(inv, row)
}

/// Mean over the tokens of an `L_v × d` node, as a `1 × d` row.
fn pool_tokens(g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
    let (_, d) = token_dims(g, tokens)?;
    let m = g.mean_axis(tokens, 0)?;
    g.reshape(m, &[1, d])
}

/// Mean over all cells of a `d × t × h × w` node, as a `1 × d` row.
fn pool_volume(g: &mut Graph, volume: NodeId) -> Result<NodeId> {
    let shape = g.shape(volume).to_vec();
    let d = *shape
        .first()
        .ok_or_else(|| Error::InvalidInput("empty feature volume".into()))?;
    let cells: usize = shape[1..].iter().product();
    let flat = g.reshape(volume, &[d, cells])?;
    let m = g.mean_axis(flat, 1)?;
    g.reshape(m, &[1, d])
}

pub fn contrastive(
    g: &mut Graph,
    tokens: &[NodeId],
    volumes: &[NodeId],
    lambda: f64,
    tau: f64,
    inclusive_denominator: bool,
) -> Result<NodeId> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive regularizer needs a batch of at least 2, got {n}"
        )));
    }
    if volumes.len() != n {
        return Err(Error::InvalidInput(format!(
            "contrastive regularizer got {n} token sets but {} volumes",
            volumes.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("contrastive temperature must be > 0, got {tau}")));
    }
    let mut anchors = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for i in 0..n {
        let v = pool_tokens(g, tokens[i])?;
        anchors.push(unit_row(g, v, &format!("pooled tokens of item {i}"))?);
        let x = pool_volume(g, volumes[i])?;
        keys.push(unit_row(g, x, &format!("pooled volume of item {i}"))?);
    }
    let a = g.concat(&anchors)?;
    let k = g.concat(&keys)?;
    let kt = g.transpose(k)?;
    let sims = g.matmul(a, kt)?;
    let sims = g.scale(sims, 1.0 / tau);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let pos = g.pick(sims, i * n + i)?;
        let denom: Vec<NodeId> = (0..n)
            .filter(|&j| inclusive_denominator || j != i)
            .map(|j| g.pick(sims, i * n + j))
            .collect::<Result<_>>()?;
        let denom = g.stack_scalars(&denom)?;
        let lse = g.logsumexp(denom)?;
        terms.push(g.sub(pos, lse)?);
    }
    sum_scaled(g, &terms, -lambda)
}

/// The configured regularizer, or `None` when it is switched off.
pub fn regularize(g: &mut Graph, cfg: &RegConfig, tokens: &[NodeId], volumes: &[NodeId]) -> Result<Option<NodeId>> {
    if !cfg.active() {
        return Ok(None);
    }
    let node = match cfg.kind {
        RegKind::None => unreachable!("inactive regularizer"),
        RegKind::So => soft_orthogonality(g, tokens, cfg.lambda)?,
        RegKind::Mcr => maximal_coding_rate(g, tokens, cfg.lambda, cfg.epsilon)?,
        RegKind::Contrastive => contrastive(g, tokens, volumes, cfg.lambda, cfg.tau, cfg.inclusive_denominator)?,
    };
    Ok(Some(node))
}

/// How spread out a sampled token set is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    /// Mean `|cos|` between distinct tokens.
    pub gram_offdiag: f64,
    /// Smallest Euclidean distance between the reference points of two
    /// queries.
    pub min_location_distance: f64,
}

pub fn diversity_metrics(set: &SampledTokenSet) -> Result<DiversityMetrics> {
    let (l, _) = set.tokens.dims2()?;
    if l < 2 {
        return Err(Error::InvalidInput(format!(
            "diversity metrics need at least 2 tokens, got {l}"
        )));
    }
    Ok(DiversityMetrics {
        gram_offdiag: mean_abs_offdiag(&set.tokens)?,
        min_location_distance: min_pairwise_distance(&set.reference_points),
    })
}

/// Mean `|⟨u_i, u_j⟩|` over `i ≠ j` for unit-normalized rows `u`. Zero rows
/// contribute zero similarity.
pub fn mean_abs_offdiag(tokens: &Tensor) -> Result<f64> {
    let (l, _) = tokens.dims2()?;
    if l < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 tokens, got {l}")));
    }
    let units: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let r = tokens.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect();
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..l {
            if i != j {
                total += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>().abs();
            }
        }
    }
    Ok(total / (l * (l - 1)) as f64)
}

pub fn min_pairwise_distance(points: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn eval(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> f64 {
        let mut g = Graph::new(Precision::F64);
        let out = build(&mut g).unwrap();
        g.value(out).item().unwrap()
    }

    fn rows(g: &mut Graph, rows: &[Vec<f64>]) -> NodeId {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn so_examples() {
        let lambda = 0.01;
        let basis = eval(|g| {
            let t = rows(g, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
            soft_orthogonality(g, &[t], lambda)
        });
        assert_eq!(basis, 0.0);
        let dup = eval(|g| {
            let t = rows(g, &[vec![0.6, 0.8], vec![0.6, 0.8]]);
            soft_orthogonality(g, &[t], lambda)
        });
        assert!((dup - 2.0 * lambda).abs() < 1e-12, "{dup}");
        let zero = eval(|g| {
            let a = g.constant(Tensor::zeros(&[3, 4]));
            let b = g.constant(Tensor::zeros(&[3, 4]));
            soft_orthogonality(g, &[a, b], lambda)
        });
        assert!((zero - lambda * 2.0 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn mcr_examples() {
        let (lambda, eps) = (0.01, 0.5);
        let zero = eval(|g| {
            let a = g.constant(Tensor::zeros(&[3, 4]));
            maximal_coding_rate(g, &[a], lambda, eps)
        });
        assert_eq!(zero, 0.0);
        let v = [0.3, -0.2, 0.5, 0.1];
        let got = eval(|g| {
            let a = rows(g, &[v.to_vec()]);
            maximal_coding_rate(g, &[a], lambda, eps)
        });
        let n2: f64 = v.iter().map(|x| x * x).sum();
        let want = -lambda * 0.5 * (1.0 + 4.0 / (eps * eps) * n2).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mcr_prefers_orthogonal_additions() {
        let (lambda, eps) = (1.0, 0.5);
        let base = vec![0.0, 0.7, 0.0];
        let run = |extra: Vec<f64>| {
            eval(|g| {
                let t = rows(g, &[vec![0.7, 0.0, 0.0], base.clone(), extra]);
                maximal_coding_rate(g, &[t], lambda, eps)
            })
        };
        let two = eval(|g| {
            let t = rows(g, &[vec![0.7, 0.0, 0.0], base.clone()]);
            maximal_coding_rate(g, &[t], lambda, eps)
        });
        let duplicate = run(base.clone());
        let orthogonal = run(vec![0.0, 0.0, 0.7]);
        assert!(orthogonal < duplicate, "{orthogonal} vs {duplicate}");
        assert!(orthogonal < two);
    }

    #[test]
    fn contrastive_examples() {
        let lambda = 0.01;
        let aligned = eval(|g| {
            let v0 = rows(g, &[vec![1.0, 0.0]]);
            let v1 = rows(g, &[vec![0.0, 1.0]]);
            let x0 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap());
            let x1 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 1.0]).unwrap());
            contrastive(g, &[v0, v1], &[x0, x1], lambda, 0.1, false)
        });
        assert!((aligned + 20.0 * lambda).abs() < 1e-12, "{aligned}");
        let same = eval(|g| {
            let v0 = rows(g, &[vec![1.0, 2.0]]);
            let v1 = rows(g, &[vec![1.0, 2.0]]);
            let x0 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 2.0]).unwrap());
            let x1 = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 2.0]).unwrap());
            contrastive(g, &[v0, v1], &[x0, x1], lambda, 0.1, false)
        });
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_small_batches_and_zero_vectors() {
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let x = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap());
        assert!(contrastive(&mut g, &[v], &[x], 0.1, 0.1, false).is_err());
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let err = contrastive(&mut g, &[v, z], &[x, x], 0.1, 0.1, false).unwrap_err();
        assert!(err.to_string().contains("zero"), "{err}");
    }

    #[test]
    fn offdiag_metric_examples() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!((mean_abs_offdiag(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = Tensor::identity(3);
        assert_eq!(mean_abs_offdiag(&orth).unwrap(), 0.0);
        assert!(mean_abs_offdiag(&Tensor::zeros(&[1, 3])).is_err());
        assert_eq!(min_pairwise_distance(&[[0.0; 3], [0.0; 3]]), 0.0);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SO".parse::<RegKind>().unwrap(), RegKind::So);
        assert!("foo".parse::<RegKind>().is_err());
        assert_eq!(RegKind::Mcr.to_string(), "mcr");
    }
}
