//! The cross-modal question-answering model.
//!
//! Visual tokens (chosen by the configured [`Strategy`]) and the
//! dependency-encoded question are laid out as
//! `[CLS] visual… [SEP] question…`, tagged with a learned type embedding
//! (visual vs. text) and a fixed position code, normalized and run through
//! a post-norm transformer. A two-layer head maps the `[CLS]` output to
//! answer logits.

use rand::Rng;

use super::config::{ClipPooling, ModelConfig, Strategy};
use super::embed::{global_location, grid_location, positional_code_3d, positional_embedding_1d, positional_table_3d};
use crate::dependency::{reindex_for_subwords, AdjacencyMatrix, DependencyEncoder, DependencyParse, EncoderOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Activation, EncoderLayer, LayerNorm, Linear};
use crate::param::{Init, ParamId, ParamStore};
use crate::regularizer;
use crate::sampler::{fuse_global_local, global_context, ConditionalSampler, SamplerOutput, VolumeDims};
use crate::tensor::Tensor;

/// A tokenized question with its dependency parse. `token_ids` has one
/// entry per subword of the parse.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord {
    pub token_ids: Vec<usize>,
    pub parse: DependencyParse,
}

impl QuestionRecord {
    pub fn new(token_ids: Vec<usize>, parse: DependencyParse) -> Result<Self> {
        if token_ids.len() != parse.num_subwords() {
            return Err(Error::InvalidInput(format!(
                "{} token ids for {} subwords",
                token_ids.len(),
                parse.num_subwords()
            )));
        }
        Ok(Self { token_ids, parse })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Subword-level gold adjacency.
    pub fn adjacency(&self) -> Result<AdjacencyMatrix> {
        reindex_for_subwords(&self.parse)
    }
}

/// `Linear(d, d) → GELU → Linear(d, C)` over the `[CLS]` output.
#[derive(Debug, Clone)]
pub struct AnswerHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AnswerHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d, classes, true, rng)?,
        })
    }

    /// `1 × d` → logits of length `C`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_cls: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, h_cls)?;
        let h = g.gelu(h);
        let logits = self.fc2.forward(g, store, h)?;
        g.reshape(logits, &[self.fc2.out_dim])
    }
}

#[derive(Debug, Clone)]
pub struct QaModel {
    pub config: ModelConfig,
    /// `vocab × d` subword embeddings.
    pub token_embedding: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    /// Row 0: `[CLS]` and visual tokens; row 1: `[SEP]` and text tokens.
    pub type_embedding: ParamId,
    pub embed_norm: LayerNorm,
    pub encoder: DependencyEncoder,
    pub sampler: Option<ConditionalSampler>,
    pub layers: Vec<EncoderLayer>,
    pub head: AnswerHead,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct QaOutput {
    /// Answer logits, length `C`.
    pub logits: NodeId,
    /// Sampler trace (deformable strategy only).
    pub sampled: Option<SamplerOutput>,
    pub question: EncoderOutput,
    /// Transformer sequence length of each pass (one per clip for sparse).
    pub sequence_lengths: Vec<usize>,
}

const VISUAL: usize = 0;
const TEXT: usize = 1;

impl QaModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let unit = Init::Normal { std: 1.0 };
        let token_embedding = store.init("embed.tokens", &[config.vocab_size, d], unit, 1.0, rng)?;
        let cls = store.init("embed.cls", &[d], unit, 1.0, rng)?;
        let sep = store.init("embed.sep", &[d], unit, 1.0, rng)?;
        let type_embedding = store.init("embed.types", &[2, d], unit, 1.0, rng)?;
        let embed_norm = LayerNorm::new(store, "embed.norm", d, rng)?;
        let encoder = DependencyEncoder::new(store, "question", config.dependency.clone(), rng)?;
        let sampler = match config.strategy {
            Strategy::DeformableDense => Some(ConditionalSampler::new(store, "sampler", config.sampler.clone(), rng)?),
            _ => None,
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("fusion.layer{i}"),
                    d,
                    config.num_heads,
                    config.ffn_dim,
                    Activation::Gelu,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let head = AnswerHead::new(store, "answer", d, config.num_classes, rng)?;
        Ok(Self {
            config,
            token_embedding,
            cls,
            sep,
            type_embedding,
            embed_norm,
            encoder,
            sampler,
            layers,
            head,
        })
    }

    fn check_volume(&self, g: &Graph, volume: NodeId) -> Result<VolumeDims> {
        let dims = VolumeDims::from_shape(g.shape(volume))?;
        if dims.channels != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "qa_forward",
                lhs: g.shape(volume).to_vec(),
                rhs: vec![self.config.d_model],
            });
        }
        Ok(dims)
    }

    /// Token + position embeddings run through the dependency encoder.
    pub fn encode_question(&self, g: &mut Graph, store: &ParamStore, q: &QuestionRecord) -> Result<EncoderOutput> {
        let n = q.len();
        if n == 0 || n > self.config.max_question_len {
            return Err(Error::InvalidInput(format!(
                "question has {n} subwords; allowed 1..={}",
                self.config.max_question_len
            )));
        }
        if let Some(&bad) = q.token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.d_model;
        let table = g.param(store, self.token_embedding);
        let emb = g.gather_rows(table, &q.token_ids)?;
        let pos: Vec<f64> = (0..n).flat_map(|i| positional_embedding_1d(i, d)).collect();
        let pos = g.constant(Tensor::new(vec![n, d], pos)?);
        let x = g.add(emb, pos)?;
        let adjacency = q.adjacency()?;
        self.encoder.forward(g, store, x, Some(&adjacency))
    }

    /// Builds the normalized `[CLS] visual [SEP] question` input. Visual
    /// rows are positioned by fixed grid locations.
    pub fn assemble_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: NodeId,
        visual_locations: &[[f64; 3]],
        question: NodeId,
    ) -> Result<NodeId> {
        let pos = g.constant(positional_table_3d(visual_locations, self.config.d_model)?);
        self.assemble_with_positions(g, store, visual, pos, question)
    }

    /// Like [`Self::assemble_sequence`] with the `n_v × d` visual position
    /// code given as a node.
    pub fn assemble_with_positions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: NodeId,
        visual_positions: NodeId,
        question: NodeId,
    ) -> Result<NodeId> {
        let d = self.config.d_model;
        let (nv, nq) = match (g.shape(visual), g.shape(question)) {
            (&[nv, dv], &[nq, dq]) if dv == d && dq == d => (nv, nq),
            (a, b) => {
                return Err(Error::ShapeMismatch {
                    op: "assemble_sequence",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
        if g.shape(visual_positions) != [nv, d] {
            return Err(Error::ShapeMismatch {
                op: "assemble_sequence",
                lhs: g.shape(visual_positions).to_vec(),
                rhs: vec![nv, d],
            });
        }
        let cls = g.param(store, self.cls);
        let cls = g.reshape(cls, &[1, d])?;
        let sep = g.param(store, self.sep);
        let sep = g.reshape(sep, &[1, d])?;
        let tokens = g.concat(&[cls, visual, sep, question])?;

        let mut types = vec![VISUAL; nv + 1];
        types.extend(std::iter::repeat_n(TEXT, nq + 1));
        let type_table = g.param(store, self.type_embedding);
        let type_rows = g.gather_rows(type_table, &types)?;

        let zero = g.constant(Tensor::zeros(&[1, d]));
        let text = g.constant(Tensor::new(
            vec![nq, d],
            (0..nq).flat_map(|i| positional_embedding_1d(i, d)).collect(),
        )?);
        let pos = g.concat(&[zero, visual_positions, zero, text])?;

        let x = g.add(tokens, type_rows)?;
        let x = g.add(x, pos)?;
        self.embed_norm.forward(g, store, x)
    }

    /// Cross-modal transformer plus answer head; returns logits.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, sequence: NodeId) -> Result<NodeId> {
        let mut h = sequence;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?.0;
        }
        let cls = g.slice_rows(h, 0, 1)?;
        self.head.forward(g, store, cls)
    }

    /// Runs the configured strategy. Sparse sampling draws its clip starts
    /// from `rng`; the other strategies ignore it.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        question: &QuestionRecord,
        rng: &mut R,
    ) -> Result<QaOutput> {
        match self.config.strategy {
            Strategy::DeformableDense => self.deformable_forward(g, store, volume, question),
            Strategy::UniformDense => self.uniform_forward(g, store, volume, question),
            Strategy::SparseRandom => {
                let dims = self.check_volume(g, volume)?;
                let starts = sample_clip_starts(rng, dims.frames, self.config.num_clips, self.config.clip_frames)?;
                self.sparse_random_forward(g, store, volume, question, &starts)
            }
        }
    }

    /// Question-conditioned deformable tokens fused with per-frame global
    /// tokens.
    pub fn deformable_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        question: &QuestionRecord,
    ) -> Result<QaOutput> {
        let dims = self.check_volume(g, volume)?;
        let sampler = self
            .sampler
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a deformable sampler".into()))?;
        let encoded = self.encode_question(g, store, question)?;
        let sampled = sampler.sample_visual_tokens(g, store, volume, encoded.output)?;
        // Local tokens are positioned at their reference points.
        let d = self.config.d_model;
        let local_pos = positional_code_3d(g, sampled.reference, d)?;
        let (visual, positions) = if self.config.global_context {
            let global = global_context(g, volume)?;
            let fused = fuse_global_local(g, global, Some(sampled.tokens))?;
            let locs: Vec<[f64; 3]> = (0..dims.frames).map(|t| global_location(t, dims.frames)).collect();
            let global_pos = g.constant(positional_table_3d(&locs, d)?);
            (fused.tokens, g.concat(&[global_pos, local_pos])?)
        } else {
            (sampled.tokens, local_pos)
        };
        let seq = self.assemble_with_positions(g, store, visual, positions, encoded.output)?;
        let len = g.shape(seq)[0];
        let logits = self.classify(g, store, seq)?;
        Ok(QaOutput {
            logits,
            sampled: Some(sampled),
            question: encoded,
            sequence_lengths: vec![len],
        })
    }

    /// Every cell of the volume as a token.
    pub fn uniform_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        question: &QuestionRecord,
    ) -> Result<QaOutput> {
        let dims = self.check_volume(g, volume)?;
        let encoded = self.encode_question(g, store, question)?;
        let flat = g.reshape(volume, &[dims.channels, dims.cells()])?;
        let tokens = g.transpose(flat)?;
        let mut locs = Vec::with_capacity(dims.cells());
        for t in 0..dims.frames {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    locs.push(grid_location(t, y, x, dims.frames, dims.height, dims.width));
                }
            }
        }
        let seq = self.assemble_sequence(g, store, tokens, &locs, encoded.output)?;
        let len = g.shape(seq)[0];
        let logits = self.classify(g, store, seq)?;
        Ok(QaOutput {
            logits,
            sampled: None,
            question: encoded,
            sequence_lengths: vec![len],
        })
    }

    /// Tokens of one clip starting at frame `start`, with their locations in
    /// whole-video coordinates.
    pub fn clip_tokens(&self, g: &mut Graph, volume: NodeId, start: usize) -> Result<(NodeId, Vec<[f64; 3]>)> {
        let dims = self.check_volume(g, volume)?;
        let f = self.config.clip_frames;
        if start + f > dims.frames {
            return Err(Error::InvalidInput(format!(
                "clip of {f} frames at {start} runs past a {}-frame video",
                dims.frames
            )));
        }
        let (d, t, hw) = (dims.channels, dims.frames, dims.height * dims.width);
        let rows = g.reshape(volume, &[d * t, hw])?;
        let idx: Vec<usize> = (0..d)
            .flat_map(|c| (start..start + f).map(move |tau| c * t + tau))
            .collect();
        let clip = g.gather_rows(rows, &idx)?;
        let spatial = |tau: f64, locs: &mut Vec<[f64; 3]>| {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let [_, yy, xx] = grid_location(0, y, x, 1, dims.height, dims.width);
                    locs.push([tau, yy, xx]);
                }
            }
        };
        let norm_t = |tau: f64| if t <= 1 { 0.0 } else { tau / (t - 1) as f64 };
        let mut locs = Vec::new();
        let tokens = match self.config.clip_pooling {
            ClipPooling::Flatten => {
                let flat = g.reshape(clip, &[d, f * hw])?;
                for tau in start..start + f {
                    spatial(norm_t(tau as f64), &mut locs);
                }
                g.transpose(flat)?
            }
            ClipPooling::TemporalMean => {
                let cube = g.reshape(clip, &[d, f, hw])?;
                let mean = g.mean_axis(cube, 1)?;
                spatial(norm_t(start as f64 + (f - 1) as f64 / 2.0), &mut locs);
                g.transpose(mean)?
            }
        };
        Ok((tokens, locs))
    }

    /// Each clip goes through the shared transformer on its own; the final
    /// logits are the mean of the clip logits.
    pub fn sparse_random_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        volume: NodeId,
        question: &QuestionRecord,
        starts: &[usize],
    ) -> Result<QaOutput> {
        if starts.is_empty() {
            return Err(Error::InvalidInput("sparse sampling needs at least one clip".into()));
        }
        let encoded = self.encode_question(g, store, question)?;
        let mut logits = Vec::with_capacity(starts.len());
        let mut lengths = Vec::with_capacity(starts.len());
        for &s in starts {
            let (tokens, locs) = self.clip_tokens(g, volume, s)?;
            let seq = self.assemble_sequence(g, store, tokens, &locs, encoded.output)?;
            lengths.push(g.shape(seq)[0]);
            logits.push(self.classify(g, store, seq)?);
        }
        let logits = if logits.len() == 1 {
            logits[0]
        } else {
            let c = self.config.num_classes;
            let rows: Vec<NodeId> = logits.iter().map(|&l| g.reshape(l, &[1, c])).collect::<Result<_>>()?;
            let stacked = g.concat(&rows)?;
            let mean = g.mean_axis(stacked, 0)?;
            g.reshape(mean, &[c])?
        };
        Ok(QaOutput {
            logits,
            sampled: None,
            question: encoded,
            sequence_lengths: lengths,
        })
    }
}

/// Uniformly random clip starts, each clip fully inside the video.
pub fn sample_clip_starts<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    clips: usize,
    clip_frames: usize,
) -> Result<Vec<usize>> {
    if clip_frames == 0 || clip_frames > frames {
        return Err(Error::InvalidInput(format!(
            "clip of {clip_frames} frames does not fit a {frames}-frame video"
        )));
    }
    Ok((0..clips).map(|_| rng.random_range(0..=frames - clip_frames)).collect())
}

/// `−log p_label` plus the regularizer term when present.
pub fn total_loss(g: &mut Graph, logits: NodeId, label: usize, reg: Option<NodeId>) -> Result<NodeId> {
    let ce = g.cross_entropy(logits, label)?;
    match reg {
        Some(r) => g.add(ce, r),
        None => Ok(ce),
    }
}

/// Loss of a batch: mean cross-entropy plus the configured regularizer over
/// every sampled token set in the batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub loss: NodeId,
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub correct: usize,
}

pub fn batch_loss(
    g: &mut Graph,
    model: &QaModel,
    outputs: &[QaOutput],
    volumes: &[NodeId],
    labels: &[usize],
) -> Result<BatchLoss> {
    if outputs.is_empty() || outputs.len() != labels.len() || volumes.len() != labels.len() {
        return Err(Error::InvalidInput("batch sizes disagree or batch is empty".into()));
    }
    let mut ces = Vec::with_capacity(outputs.len());
    let mut correct = 0;
    for (out, &label) in outputs.iter().zip(labels) {
        ces.push(g.cross_entropy(out.logits, label)?);
        if argmax(g.value(out.logits).data()) == label {
            correct += 1;
        }
    }
    let stacked = g.stack_scalars(&ces)?;
    let ce = g.mean_all(stacked);
    let ce_value = g.value(ce).item()?;
    let tokens: Vec<NodeId> = outputs
        .iter()
        .filter_map(|o| o.sampled.as_ref().map(|s| s.tokens))
        .collect();
    let reg = if tokens.len() == outputs.len() {
        regularizer::regularize(g, model.config.regularizer(), &tokens, volumes)?
    } else {
        None
    };
    let reg_value = match reg {
        Some(r) => g.value(r).item()?,
        None => 0.0,
    };
    let loss = match reg {
        Some(r) => g.add(ce, r)?,
        None => ce,
    };
    Ok(BatchLoss {
        loss,
        cross_entropy: ce_value,
        regularizer: reg_value,
        correct,
    })
}

/// Index of the largest value (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
