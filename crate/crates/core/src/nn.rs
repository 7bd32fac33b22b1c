//! Layers shared by the sampler, the question encoder and the cross-modal
//! transformer. Token sequences are `n × d` matrices, one token per row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Init, ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Scaled-Gaussian weights (`std = 1/√in`) and zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_std(
            store,
            name,
            in_dim,
            out_dim,
            bias,
            1.0 / (in_dim as f64).sqrt(),
            1.0,
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        lr_mult: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = if std > 0.0 {
            store.init(
                format!("{name}.weight"),
                &[in_dim, out_dim],
                Init::Normal { std },
                lr_mult,
                rng,
            )?
        } else {
            store.init(format!("{name}.weight"), &[in_dim, out_dim], Init::Zeros, lr_mult, rng)?
        };
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[out_dim], Init::Zeros, lr_mult, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.init(format!("{name}.gamma"), &[d], Init::Ones, 1.0, rng)?,
            beta: store.init(format!("{name}.beta"), &[d], Init::Zeros, 1.0, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention of one head: `softmax(Q Kᵀ/√d_h) V`.
/// Returns the output and the attention matrix node.
pub fn attention_head(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let dh = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 1)?;
    Ok((g.matmul(attn, v)?, attn))
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: hidden size {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            heads,
        })
    }

    /// Returns the projected output and one attention map per head.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let d = self.query.out_dim;
        let dh = d / self.heads;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let (o, a) = attention_head(g, qh, kh, vh)?;
            outs.push(o);
            maps.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((self.output.forward(g, store, cat)?, maps))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, x)?;
        let h = self.activation.apply(g, h);
        self.fc2.forward(g, store, h)
    }
}

/// Post-norm transformer encoder layer:
/// `x ← LN(x + MHA(x))`, then `x ← LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: SelfAttention::new(store, &format!("{name}.attention"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, activation, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let (a, maps) = self.attention.forward(g, store, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        Ok((self.norm2.forward(g, store, x)?, maps))
    }
}
