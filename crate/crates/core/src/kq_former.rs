//! Knowledge querying transformer.
//!
//! A fixed set of learnable queries is refined by a weight-shared stack of
//! blocks. Each block runs pre-norm query self-attention, cross-attention
//! from the queries to the (projected) visual tokens, and a feed-forward
//! layer, all with residual connections. The result is `q × d_k` knowledge
//! tokens per input feature array, independent of the number of patches.
//!
//! Parameter names: `kq.queries`, `kq.visual_proj`, `kq.block{i}.self_attn`,
//! `kq.block{i}.cross_attn`, `kq.block{i}.ffn`, `kq.block{i}.ln{1,2,3}`,
//! `kq.final_norm`.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, LoadReport, TensorMap};
use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::backbone::VisualFeatures;
use crate::data::Source;
use crate::error::{Error, Result};
use crate::nn::{embedding_init, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Matrix;

pub const PREFIX: &str = "kq";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KQFormerConfig {
    /// Number of learnable queries `q`.
    pub queries: usize,
    /// Query width `d_k`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_width: usize,
    #[serde(default)]
    pub knowledge_init: Option<PathBuf>,
    /// Bypass residuals, feed-forward layers and the final norm, so each
    /// block emits its raw cross-attention output.
    #[serde(default)]
    pub diagnostic: bool,
}

impl Default for KQFormerConfig {
    fn default() -> Self {
        Self {
            queries: 8,
            dim: 64,
            blocks: 2,
            heads: 4,
            ffn_width: 256,
            knowledge_init: None,
            diagnostic: false,
        }
    }
}

impl KQFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.blocks == 0 {
            return Err(Error::InvalidConfig("query transformer needs queries and blocks".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "query width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTokens {
    pub tokens: Matrix,
    pub source: Source,
}

#[derive(Clone, Debug)]
struct KqBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

/// Attention probabilities and output of one forward pass.
#[derive(Clone, Debug)]
pub struct KqTrace {
    pub output: Var,
    /// Per block, one `q × q` matrix per head.
    pub self_weights: Vec<Vec<Var>>,
    /// Per block, one `q × n` matrix per head.
    pub cross_weights: Vec<Vec<Var>>,
    /// Per block, the cross-attention sublayer output (`q × d_k`).
    pub cross_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct KQFormer {
    config: KQFormerConfig,
    queries: ParamId,
    visual_proj: Linear,
    blocks: Vec<KqBlock>,
    final_norm: LayerNorm,
}

impl KQFormer {
    pub fn new(store: &mut ParamStore, config: &KQFormerConfig, visual_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let queries = store.add(format!("{PREFIX}.queries"), embedding_init(config.queries, d, rng), false);
        let visual_proj = Linear::new(store, &format!("{PREFIX}.visual_proj"), visual_dim, d, rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let name = format!("{PREFIX}.block{i}");
                KqBlock {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, d, config.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, d, config.heads, rng),
                    ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.ffn_width, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{PREFIX}.final_norm"), d);
        Ok(Self {
            config: config.clone(),
            queries,
            visual_proj,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &KQFormerConfig {
        &self.config
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    pub fn visual_proj(&self) -> &Linear {
        &self.visual_proj
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_proj.in_dim
    }

    /// Cross-attention layer of block `i`, for inspection.
    pub fn cross_attention(&self, i: usize) -> &MultiHeadAttention {
        &self.blocks[i].cross_attn
    }

    pub fn forward(&self, g: &mut Graph, visual: Var) -> Result<KqTrace> {
        let width = g.shape(visual).1;
        if width != self.visual_dim() {
            return Err(Error::ShapeMismatch(format!(
                "query transformer expects {}-wide visual tokens, got {width}",
                self.visual_dim()
            )));
        }
        let memory = self.visual_proj.forward(g, visual);
        let mut x = g.param(self.queries);
        let mut trace = KqTrace {
            output: x,
            self_weights: Vec::new(),
            cross_weights: Vec::new(),
            cross_outputs: Vec::new(),
        };
        let residual = !self.config.diagnostic;
        for block in &self.blocks {
            let h = block.ln1.forward(g, x);
            let sa = block.self_attn.forward(g, h, h, Mask::None);
            x = if residual { g.add(x, sa.output) } else { sa.output };
            let h = block.ln2.forward(g, x);
            let ca = block.cross_attn.forward(g, h, memory, Mask::None);
            x = if residual { g.add(x, ca.output) } else { ca.output };
            if residual {
                let h = block.ln3.forward(g, x);
                let h = block.ffn.forward(g, h);
                x = g.add(x, h);
            }
            trace.self_weights.push(sa.weights);
            trace.cross_weights.push(ca.weights);
            trace.cross_outputs.push(ca.output);
        }
        trace.output = if residual { self.final_norm.forward(g, x) } else { x };
        Ok(trace)
    }

    pub fn kq_forward(&self, store: &ParamStore, visual: &VisualFeatures) -> Result<KnowledgeTokens> {
        let mut g = Graph::new(store);
        let v = g.input(visual.tokens.clone());
        let trace = self.forward(&mut g, v)?;
        Ok(KnowledgeTokens {
            tokens: g.value(trace.output).clone(),
            source: visual.source,
        })
    }

    /// One pass per feature array, all through the same weights.
    pub fn kq_encode_triple(&self, store: &ParamStore, features: &[VisualFeatures]) -> Result<Vec<KnowledgeTokens>> {
        features.iter().map(|f| self.kq_forward(store, f)).collect()
    }
}

fn is_text_encoder_layer(name: &str) -> bool {
    name.contains(".self_attn.") || name.contains(".ffn.") || name.contains(".ln1.") || name.contains(".ln3.")
}

/// Initializes self-attention, feed-forward and their norms from a text
/// encoder archive. Cross-attention, queries and the visual projection have
/// no text-encoder counterpart and keep their seeded values. A missing
/// archive leaves everything random.
pub fn load_knowledge_init(store: &mut ParamStore, path: &Path) -> Result<LoadReport> {
    let tensors = match archive::read_archive(path) {
        Ok(t) => t,
        Err(Error::ArchiveMissing(p)) => {
            log::warn!("knowledge archive {} not found, keeping random init", p.display());
            return Ok(archive::load_matching(store, &format!("{PREFIX}."), &TensorMap::new()));
        }
        Err(e) => return Err(e),
    };
    let usable: TensorMap = tensors
        .into_iter()
        .filter(|(name, _)| is_text_encoder_layer(name))
        .collect();
    let report = archive::load_matching(store, &format!("{PREFIX}."), &usable);
    for name in &report.shape_incompatible {
        log::warn!("knowledge archive tensor {name} has the wrong shape, randomized");
    }
    Ok(report)
}
