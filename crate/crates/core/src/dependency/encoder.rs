//! Question encoder whose first head in the first layer is tied to the
//! dependency structure.
//!
//! The dependency head projects the layer input `O` into `Q = O W^Q`,
//! `K = O W^K`, `V = O W^V` (all `d × d_head`). In learned mode its
//! attention is the bi-affine `softmax(Q U Kᵀ)`; in gold mode it is the
//! adjacency matrix itself, so row `i` of the head output is the value
//! vector of `i`'s governor. The remaining heads are ordinary scaled
//! dot-product heads; all head outputs are concatenated and projected as in
//! standard multi-head attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AdjacencyMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{attention_head, Activation, EncoderLayer, FeedForward, LayerNorm, Linear};
use crate::param::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepMode {
    /// Attention fixed to the gold adjacency, in training and inference.
    #[default]
    Gold,
    /// Bi-affine attention learned from data.
    Learned,
}

impl std::str::FromStr for DepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gold" => Ok(Self::Gold),
            "learned" => Ok(Self::Learned),
            other => Err(Error::Config(format!("unknown dependency mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub mode: DepMode,
}

impl Default for DepConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 128,
            mode: DepMode::Gold,
        }
    }
}

impl DepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "dependency encoder needs >= 1 layer and a head count dividing {} (got {} layers, {} heads)",
                self.d_model, self.num_layers, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Projections of the dependency-constrained head.
#[derive(Debug, Clone)]
pub struct DependencyHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// Bi-affine interaction `U` (`d_head × d_head`).
    pub biaffine: ParamId,
}

impl DependencyHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, dh: usize, rng: &mut R) -> Result<Self> {
        let std = Init::Normal {
            std: 1.0 / (d as f64).sqrt(),
        };
        Ok(Self {
            query: store.init(format!("{name}.query"), &[d, dh], std, 1.0, rng)?,
            key: store.init(format!("{name}.key"), &[d, dh], std, 1.0, rng)?,
            value: store.init(format!("{name}.value"), &[d, dh], std, 1.0, rng)?,
            biaffine: store.init(
                format!("{name}.biaffine"),
                &[dh, dh],
                Init::Normal {
                    std: 1.0 / (dh as f64).sqrt(),
                },
                1.0,
                rng,
            )?,
        })
    }

    /// `V_dep = O W^V`.
    pub fn values(&self, g: &mut Graph, store: &ParamStore, o: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.value);
        g.matmul(o, w)
    }

    /// Pre-softmax bi-affine scores `Q U Kᵀ` (`L_q × L_q`).
    pub fn biaffine_logits(&self, g: &mut Graph, store: &ParamStore, o: NodeId) -> Result<NodeId> {
        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let u = g.param(store, self.biaffine);
        let q = g.matmul(o, wq)?;
        let k = g.matmul(o, wk)?;
        let qu = g.matmul(q, u)?;
        let kt = g.transpose(k)?;
        g.matmul(qu, kt)
    }

    /// Learned dependency attention `softmax(Q U Kᵀ)` over keys.
    pub fn biaffine_scores(&self, g: &mut Graph, store: &ParamStore, o: NodeId) -> Result<NodeId> {
        let s = self.biaffine_logits(g, store, o)?;
        g.softmax(s, 1)
    }

    /// `A · V_dep` for a row-stochastic attention node `a`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, o: NodeId, a: NodeId) -> Result<NodeId> {
        let n = g.shape(o)[0];
        if g.shape(a) != [n, n] {
            return Err(Error::ShapeMismatch {
                op: "dependency_head",
                lhs: g.shape(a).to_vec(),
                rhs: vec![n, n],
            });
        }
        for (i, row) in g.value(a).data().chunks_exact(n).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "dependency attention row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        let v = self.values(g, store, o)?;
        g.matmul(a, v)
    }
}

/// First encoder layer: one dependency head plus `n_head − 1` ordinary heads.
#[derive(Debug, Clone)]
pub struct DependencyLayer {
    pub dep: DependencyHead,
    /// Joint projections of the ordinary heads (`d → (n_head − 1)·d_head`).
    pub others: Option<[Linear; 3]>,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl DependencyLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DepConfig, rng: &mut R) -> Result<Self> {
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let rest = (cfg.num_heads - 1) * dh;
        let others = if rest > 0 {
            Some([
                Linear::new(store, &format!("{name}.heads.query"), d, rest, true, rng)?,
                Linear::new(store, &format!("{name}.heads.key"), d, rest, true, rng)?,
                Linear::new(store, &format!("{name}.heads.value"), d, rest, true, rng)?,
            ])
        } else {
            None
        };
        Ok(Self {
            dep: DependencyHead::new(store, &format!("{name}.dep"), d, dh, rng)?,
            others,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, Activation::Gelu, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            num_heads: cfg.num_heads,
            head_dim: dh,
        })
    }

    /// Returns the layer output and the attention map of every head, the
    /// dependency head first.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: DepMode,
        adjacency: Option<&AdjacencyMatrix>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let n = g.shape(x)[0];
        let a = match mode {
            DepMode::Gold => {
                let adj = adjacency
                    .ok_or_else(|| Error::InvalidInput("gold dependency mode requires an adjacency matrix".into()))?;
                if adj.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "dependency_encoder",
                        lhs: vec![adj.len(), adj.len()],
                        rhs: vec![n, n],
                    });
                }
                g.constant(adj.to_tensor())
            }
            DepMode::Learned => self.dep.biaffine_scores(g, store, x)?,
        };
        let mut outs = vec![self.dep.forward(g, store, x, a)?];
        let mut maps = vec![a];
        if let Some([wq, wk, wv]) = &self.others {
            let q = wq.forward(g, store, x)?;
            let k = wk.forward(g, store, x)?;
            let v = wv.forward(g, store, x)?;
            let dh = self.head_dim;
            for h in 0..self.num_heads - 1 {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let (o, m) = attention_head(g, qh, kh, vh)?;
                outs.push(o);
                maps.push(m);
            }
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let att = self.output.forward(g, store, cat)?;
        let h = g.add(x, att)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, h)?;
        let h = g.add(h, f)?;
        Ok((self.norm2.forward(g, store, h)?, maps))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `L_q × d` encoded question.
    pub output: NodeId,
    /// `attention[layer][head]`, each `L_q × L_q`; `attention[0][0]` is the
    /// dependency head.
    pub attention: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct DependencyEncoder {
    pub config: DepConfig,
    pub first: DependencyLayer,
    pub rest: Vec<EncoderLayer>,
}

impl DependencyEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: DepConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let first = DependencyLayer::new(store, &format!("{name}.layer0"), &config, rng)?;
        let rest = (1..config.num_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    config.d_model,
                    config.num_heads,
                    config.ffn_dim,
                    Activation::Gelu,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, first, rest })
    }

    /// Encodes `L_q × d` question embeddings. `adjacency` is the subword-level
    /// gold matrix and is required in gold mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        adjacency: Option<&AdjacencyMatrix>,
    ) -> Result<EncoderOutput> {
        match *g.shape(x) {
            [n, d] if n >= 1 && d == self.config.d_model => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "dependency_encoder",
                    lhs: g.shape(x).to_vec(),
                    rhs: vec![0, self.config.d_model],
                })
            }
        }
        let (mut h, maps) = self.first.forward(g, store, x, self.config.mode, adjacency)?;
        let mut attention = vec![maps];
        for layer in &self.rest {
            let (y, maps) = layer.forward(g, store, h)?;
            attention.push(maps);
            h = y;
        }
        Ok(EncoderOutput { output: h, attention })
    }
}
