//! Question-conditioned 3-D deformable sampling of visual tokens.
//!
//! A small set of learnable queries, shifted by the pooled question vector,
//! each predict a reference point in the normalized `(t, y, x)` cube. Every
//! layer then lets each query look at `K` offset locations per head around
//! its reference point, reads the volume there by trilinear interpolation,
//! and mixes the reads with softmax weights predicted from the query:
//!
//! ```text
//! CDA(z, p, X) = Σ_m W_m [ Σ_k A_mqk · W'_m X(p_q + Δp_mqk) ]
//! A_mq· = softmax_k(W^A_m z̄_q),   Δp_mqk = W^Δp_m z̄_q
//! ```
//!
//! Reference points are predicted once from the conditioned queries and are
//! fixed for all layers. Offsets are in normalized units and the shifted
//! location is clamped to the unit cube. Because interpolation is linear,
//! the value projection `W'_m` is applied after the weighted sum of raw
//! samples, which is algebraically identical and much cheaper.

pub mod dump;
pub mod trilinear;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Activation, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::param::{Init, ParamId, ParamStore};
use crate::regularizer::RegConfig;
use crate::tensor::Tensor;

pub use trilinear::VolumeDims;

/// How normalized coordinates map onto grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoordinateConvention {
    /// `0 ↔ index 0` and `1 ↔ index n−1` on every axis.
    #[default]
    AlignCorners,
}

/// A dense `d × t × h × w` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    tensor: Tensor,
    dims: VolumeDims,
    pub convention: CoordinateConvention,
}

impl FeatureVolume {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = VolumeDims::from_shape(tensor.shape())?;
        Ok(Self {
            tensor,
            dims,
            convention: CoordinateConvention::AlignCorners,
        })
    }

    /// Builds a volume from `f(channel, t, y, x)`.
    pub fn from_fn(
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * frames * height * width);
        for c in 0..channels {
            for t in 0..frames {
                for y in 0..height {
                    for x in 0..width {
                        data.push(f(c, t, y, x));
                    }
                }
            }
        }
        Self::new(Tensor::new(vec![channels, frames, height, width], data)?)
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn at(&self, c: usize, t: usize, y: usize, x: usize) -> f64 {
        let d = self.dims;
        self.tensor.data()[((c * d.frames + t) * d.height + y) * d.width + x]
    }

    /// The feature vector stored at one grid cell.
    pub fn cell(&self, t: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.dims.channels).map(|c| self.at(c, t, y, x)).collect()
    }

    /// Normalized coordinate of a grid index on an axis of extent `n`.
    pub fn normalized(index: usize, n: usize) -> f64 {
        if n <= 1 {
            0.0
        } else {
            index as f64 / (n - 1) as f64
        }
    }
}

/// Trilinear interpolation of `volume` at the normalized point `p`
/// (clamped to the unit cube). Returns the `d` interpolated channels.
pub fn trilinear_sample(volume: &FeatureVolume, p: [f64; 3]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampling point {p:?}")));
    }
    Ok(trilinear::forward(volume.tensor.data(), volume.dims, &p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of learnable queries, i.e. sampled tokens (`L_v`).
    pub num_queries: usize,
    pub num_heads: usize,
    /// Sampling points per head (`K`).
    pub num_points: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// Radius of the initial offset stencil, in normalized units.
    pub offset_radius: f64,
    /// Learning-rate multiplier of the reference-point and offset projections.
    pub offset_lr_mult: f64,
    pub regularizer: RegConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_queries: 25,
            num_heads: 4,
            num_points: 8,
            num_layers: 4,
            d_model: 64,
            ffn_dim: 128,
            offset_radius: 0.1,
            offset_lr_mult: 0.1,
            regularizer: RegConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_heads == 0 || self.num_points == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "sampler needs at least one query, head, point and layer".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "sampler hidden size {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        self.regularizer.validate()
    }
}

/// Unit directions on a Fibonacci sphere; distinct for any `n`.
fn sphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [z, r * phi.sin(), r * phi.cos()]
        })
        .collect()
}

/// Initial offset bias: every (head, point) pair gets its own direction at
/// radius `radius`, laid out as `[m][k][axis]`.
pub fn offset_stencil(heads: usize, points: usize, radius: f64) -> Vec<f64> {
    sphere_directions(heads * points)
        .into_iter()
        .flat_map(|d| d.map(|v| v * radius))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CdaLayerParams {
    pub self_attention: SelfAttention,
    pub norm1: LayerNorm,
    /// `W^Δp`: query → `M·K·3` offsets.
    pub offsets: Linear,
    /// `W^A`: query → `M·K` attention logits.
    pub weights: Linear,
    /// `W'`: per-head value projections, head `m` owns columns `m·d_h..(m+1)·d_h`.
    pub value: Linear,
    /// `W`: output projection over the concatenated heads.
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
    pub num_heads: usize,
    pub num_points: usize,
}

impl CdaLayerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &SamplerConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let (m, k) = (cfg.num_heads, cfg.num_points);
        let offsets = Linear::with_std(
            store,
            &format!("{name}.offsets"),
            d,
            m * k * 3,
            true,
            0.0,
            cfg.offset_lr_mult,
            rng,
        )?;
        if let Some(b) = offsets.bias {
            let p = store.get_mut(b);
            p.value = Tensor::vector(offset_stencil(m, k, cfg.offset_radius));
            p.init = Init::Values("star stencil");
        }
        Ok(Self {
            self_attention: SelfAttention::new(store, &format!("{name}.self_attention"), d, m, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            offsets,
            weights: Linear::with_std(store, &format!("{name}.weights"), d, m * k, true, 0.0, 1.0, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, Activation::Relu, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, rng)?,
            num_heads: m,
            num_points: k,
        })
    }
}

/// Nodes recorded by one deformable attention call.
#[derive(Debug, Clone, Copy)]
pub struct CdaTrace {
    /// `(L_v·M·K) × 3` unclamped sampling locations, rows ordered `(q, m, k)`.
    pub locations: NodeId,
    /// `(L_v·M) × K` point weights, rows ordered `(q, m)`.
    pub weights: NodeId,
}

fn check_cols(g: &Graph, x: NodeId, d: usize, what: &str) -> Result<usize> {
    match *g.shape(x) {
        [n, c] if c == d => Ok(n),
        _ => Err(Error::ShapeMismatch {
            op: "sampler",
            lhs: g.shape(x).to_vec(),
            rhs: vec![0, d],
        })
        .map_err(|e| Error::InvalidInput(format!("{what}: {e}"))),
    }
}

/// The deformable cross-attention of one layer. `query` is `L_v × d`,
/// `reference` is `L_v × 3`, `volume` is a `d × t × h × w` node.
pub fn cda_attention(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CdaLayerParams,
    query: NodeId,
    reference: NodeId,
    volume: NodeId,
) -> Result<(NodeId, CdaTrace)> {
    let d = layer.value.in_dim;
    let lv = check_cols(g, query, d, "queries")?;
    if g.shape(reference) != [lv, 3] {
        return Err(Error::ShapeMismatch {
            op: "cda_attention",
            lhs: g.shape(reference).to_vec(),
            rhs: vec![lv, 3],
        });
    }
    let vdims = VolumeDims::from_shape(g.shape(volume))?;
    if vdims.channels != d {
        return Err(Error::ShapeMismatch {
            op: "cda_attention",
            lhs: g.shape(volume).to_vec(),
            rhs: vec![d],
        });
    }
    let (m, k) = (layer.num_heads, layer.num_points);
    let dh = d / m;

    let offsets = layer.offsets.forward(g, store, query)?;
    let offsets = g.reshape(offsets, &[lv * m * k, 3])?;
    let owner: Vec<usize> = (0..lv).flat_map(|q| std::iter::repeat_n(q, m * k)).collect();
    let anchors = g.gather_rows(reference, &owner)?;
    let locations = g.add(anchors, offsets)?;

    let logits = layer.weights.forward(g, store, query)?;
    let logits = g.reshape(logits, &[lv * m, k])?;
    let weights = g.softmax(logits, 1)?;

    let samples = g.trilinear(volume, locations)?;
    let mixed = g.weighted_point_sum(samples, weights)?;

    let w_value = g.param(store, layer.value.weight);
    let b_value = match layer.value.bias {
        Some(b) => {
            let b = g.param(store, b);
            Some(g.reshape(b, &[1, d])?)
        }
        None => None,
    };
    let mut heads = Vec::with_capacity(m);
    for head in 0..m {
        let rows: Vec<usize> = (0..lv).map(|q| q * m + head).collect();
        let x = g.gather_rows(mixed, &rows)?;
        let w = g.slice_cols(w_value, head * dh, dh)?;
        let mut h = g.matmul(x, w)?;
        if let Some(b) = b_value {
            let b = g.slice_cols(b, head * dh, dh)?;
            h = g.add_row(h, b)?;
        }
        heads.push(h);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = layer.output.forward(g, store, cat)?;
    Ok((out, CdaTrace { locations, weights }))
}

/// One sampler layer: query self-attention, deformable cross-attention and a
/// feed-forward block, each with a residual connection and layer norm.
pub fn cda_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CdaLayerParams,
    query: NodeId,
    reference: NodeId,
    volume: NodeId,
) -> Result<(NodeId, CdaTrace)> {
    let (sa, _) = layer.self_attention.forward(g, store, query)?;
    let x = g.add(query, sa)?;
    let x = layer.norm1.forward(g, store, x)?;
    let (ca, trace) = cda_attention(g, store, layer, x, reference, volume)?;
    let x = g.add(x, ca)?;
    let x = layer.norm2.forward(g, store, x)?;
    let f = layer.ffn.forward(g, store, x)?;
    let x = g.add(x, f)?;
    Ok((layer.norm3.forward(g, store, x)?, trace))
}

/// Mean over question tokens (`L_q × d` → `d`).
pub fn pool_question(g: &mut Graph, question: NodeId) -> Result<NodeId> {
    match *g.shape(question) {
        [0, _] => Err(Error::InvalidInput("cannot pool an empty question".into())),
        [_, _] => g.mean_axis(question, 0),
        _ => Err(Error::InvalidInput(format!(
            "question features must be L_q × d, got {:?}",
            g.shape(question)
        ))),
    }
}

/// `z̄_q = z_q ⊕ L̂`: adds the pooled question vector to every query row.
pub fn condition_queries(g: &mut Graph, queries: NodeId, context: NodeId) -> Result<NodeId> {
    g.add_row(queries, context)
}

/// The learnable parameters of the whole sampler.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    pub config: SamplerConfig,
    /// `L_v × d` learnable queries.
    pub queries: ParamId,
    /// Conditioned query → reference point logits.
    pub reference: Linear,
    pub layers: Vec<CdaLayerParams>,
}

impl ConditionalSampler {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: SamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let queries = store.init(
            format!("{name}.queries"),
            &[config.num_queries, d],
            Init::Normal { std: 1.0 },
            1.0,
            rng,
        )?;
        let reference = Linear::with_std(
            store,
            &format!("{name}.reference"),
            d,
            3,
            true,
            1.0 / (d as f64).sqrt(),
            config.offset_lr_mult,
            rng,
        )?;
        let layers = (0..config.num_layers)
            .map(|i| CdaLayerParams::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            queries,
            reference,
            layers,
        })
    }

    /// `p_q = σ(W_ref z̄_q + b_ref)`, strictly inside the unit cube.
    pub fn predict_reference_points(&self, g: &mut Graph, store: &ParamStore, conditioned: NodeId) -> Result<NodeId> {
        let logits = self.reference.forward(g, store, conditioned)?;
        Ok(g.sigmoid(logits))
    }

    /// Runs the full sampler on a volume node and `L_q × d` question features.
    pub fn sample_visual_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        question: NodeId,
    ) -> Result<SamplerOutput> {
        let context = pool_question(g, question)?;
        let z = g.param(store, self.queries);
        self.sample_with_context(g, store, volume, z, context)
    }

    /// Like [`Self::sample_visual_tokens`] with explicit queries and pooled
    /// question context.
    pub fn sample_with_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        queries: NodeId,
        context: NodeId,
    ) -> Result<SamplerOutput> {
        let d = self.config.d_model;
        if g.value(context).len() != d {
            return Err(Error::ShapeMismatch {
                op: "condition_queries",
                lhs: g.shape(context).to_vec(),
                rhs: vec![d],
            });
        }
        let mut x = condition_queries(g, queries, context)?;
        let reference = self.predict_reference_points(g, store, x)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, trace) = cda_layer(g, store, layer, x, reference, volume)?;
            traces.push(trace);
            x = y;
        }
        Ok(SamplerOutput {
            tokens: x,
            reference,
            traces,
            num_heads: self.config.num_heads,
            num_points: self.config.num_points,
        })
    }
}

/// Graph nodes produced by a sampler forward pass.
#[derive(Debug, Clone)]
pub struct SamplerOutput {
    /// `L_v × d` sampled tokens (one per row).
    pub tokens: NodeId,
    /// `L_v × 3` reference points.
    pub reference: NodeId,
    pub traces: Vec<CdaTrace>,
    pub num_heads: usize,
    pub num_points: usize,
}

impl SamplerOutput {
    pub fn token_set(&self, g: &Graph) -> SampledTokenSet {
        let reference_points = g
            .value(self.reference)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let layers = self
            .traces
            .iter()
            .map(|t| LayerSamples {
                locations: g
                    .value(t.locations)
                    .data()
                    .chunks_exact(3)
                    .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)])
                    .collect(),
                weights: g.value(t.weights).data().to_vec(),
            })
            .collect();
        SampledTokenSet {
            tokens: g.value(self.tokens).clone(),
            reference_points,
            num_heads: self.num_heads,
            num_points: self.num_points,
            layers,
        }
    }
}

/// Sampling locations and weights of one layer, ordered `(query, head, point)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSamples {
    pub locations: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Sampled tokens together with where they were read from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTokenSet {
    /// `L_v × d`, one token per row.
    pub tokens: Tensor,
    pub reference_points: Vec<[f64; 3]>,
    pub num_heads: usize,
    pub num_points: usize,
    pub layers: Vec<LayerSamples>,
}

impl SampledTokenSet {
    pub fn num_tokens(&self) -> usize {
        self.reference_points.len()
    }

    fn flat(&self, query: usize, head: usize, point: usize) -> usize {
        (query * self.num_heads + head) * self.num_points + point
    }

    /// Clamped sampling location.
    pub fn location(&self, layer: usize, query: usize, head: usize, point: usize) -> [f64; 3] {
        self.layers[layer].locations[self.flat(query, head, point)]
    }

    pub fn weight(&self, layer: usize, query: usize, head: usize, point: usize) -> f64 {
        self.layers[layer].weights[self.flat(query, head, point)]
    }

    /// Largest `|Σ_k A_mqk − 1|` over all layers, heads and queries, and
    /// the smallest weight seen.
    pub fn weight_normalization(&self) -> (f64, f64) {
        let mut worst = 0.0f64;
        let mut min = f64::INFINITY;
        for layer in &self.layers {
            for row in layer.weights.chunks_exact(self.num_points) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                min = row.iter().copied().fold(min, f64::min);
            }
        }
        (worst, min)
    }
}

/// Spatial mean per frame: `d × t × h × w` volume → `t × d` tokens.
pub fn global_context(g: &mut Graph, volume: NodeId) -> Result<NodeId> {
    let dims = VolumeDims::from_shape(g.shape(volume))?;
    let (d, t) = (dims.channels, dims.frames);
    let flat = g.reshape(volume, &[d * t, dims.height * dims.width])?;
    let pooled = g.mean_axis(flat, 1)?;
    let pooled = g.reshape(pooled, &[d, t])?;
    g.transpose(pooled)
}

/// Where a fused visual token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    Global { frame: usize },
    Local { query: usize },
}

#[derive(Debug, Clone)]
pub struct FusedTokens {
    /// `(t + L_v) × d`: global block first, then local block.
    pub tokens: NodeId,
    pub sources: Vec<TokenSource>,
}

/// Concatenates global (`t × d`) and optional local (`L_v × d`) tokens.
pub fn fuse_global_local(g: &mut Graph, global: NodeId, local: Option<NodeId>) -> Result<FusedTokens> {
    let (t, d) = match *g.shape(global) {
        [t, d] => (t, d),
        _ => {
            return Err(Error::InvalidInput(format!(
                "global context must be t × d, got {:?}",
                g.shape(global)
            )))
        }
    };
    if t == 0 {
        return Err(Error::InvalidInput("global context needs at least one frame".into()));
    }
    let mut sources: Vec<TokenSource> = (0..t).map(|frame| TokenSource::Global { frame }).collect();
    let Some(local) = local else {
        return Ok(FusedTokens {
            tokens: global,
            sources,
        });
    };
    let lv = match *g.shape(local) {
        [n, c] if c == d => n,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "fuse_global_local",
                lhs: g.shape(global).to_vec(),
                rhs: g.shape(local).to_vec(),
            })
        }
    };
    if lv == 0 {
        return Ok(FusedTokens {
            tokens: global,
            sources,
        });
    }
    sources.extend((0..lv).map(|query| TokenSource::Local { query }));
    Ok(FusedTokens {
        tokens: g.concat(&[global, local])?,
        sources,
    })
}

#[cfg(test)]
mod tests;
