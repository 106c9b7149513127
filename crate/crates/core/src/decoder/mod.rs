//! Causal language decoder conditioned on visual tokens and a question.
//!
//! The input sequence is
//!
//! ```text
//! [adapter(visual) ; embed(question) ; SEP ; embed(answer[..T-1])]
//! ```
//!
//! with learned positions and causal self-attention throughout. The logit
//! row at position `prefix_len - 1 + t` predicts answer token `t`. Only
//! answer positions contribute to the loss.
//!
//! Parameter names: `decoder.tok_emb`, `decoder.pos_emb`, `decoder.adapter`,
//! `decoder.block{i}`, `decoder.ln_f`, `decoder.lm_head`.

pub mod beam;
pub mod tokenizer;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax, softmax_rows, Graph, Mask, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{embedding_init, LayerNorm, Linear, TransformerBlock};
use crate::tensor::Matrix;

pub use beam::{beam_search, greedy_search, Hypothesis};
pub use tokenizer::{split_pieces, Tokenizer, WordTokenizer, BOS, EOS, PAD, SEP, UNK};

pub const PREFIX: &str = "decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Longest answer in tokens, EOS included.
    pub max_len: usize,
    /// Budget for visual tokens + question tokens + SEP.
    pub max_prefix: usize,
    /// Filled in from the tokenizer when a model is built.
    #[serde(default)]
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 4,
            max_len: 64,
            max_prefix: 96,
            vocab_size: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= SEP {
            return Err(Error::InvalidConfig(format!("vocabulary of {} tokens", self.vocab_size)));
        }
        if self.blocks == 0 || self.max_len == 0 || self.max_prefix == 0 {
            return Err(Error::InvalidConfig("decoder needs blocks, max_len and max_prefix".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Tokenized answer with the terminating EOS.
pub fn answer_targets(tokenizer: &impl Tokenizer, answer: &str, max_len: usize) -> Result<Vec<usize>> {
    let mut ids = tokenizer.encode(answer);
    if ids.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::InvalidConfig(format!(
            "answer {answer:?} has {} tokens, max_len is {max_len}",
            ids.len()
        )));
    }
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    visual_width: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    adapter: Linear,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    lm_head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: &DecoderConfig, visual_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let positions = config.max_prefix + config.max_len;
        Ok(Self {
            config: config.clone(),
            visual_width,
            tok_emb: store.add(format!("{PREFIX}.tok_emb"), embedding_init(config.vocab_size, d, rng), false),
            pos_emb: store.add(format!("{PREFIX}.pos_emb"), embedding_init(positions, d, rng), false),
            adapter: Linear::new(store, &format!("{PREFIX}.adapter"), visual_width, d, rng),
            blocks: (0..config.blocks)
                .map(|i| TransformerBlock::new(store, &format!("{PREFIX}.block{i}"), d, config.heads, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{PREFIX}.ln_f"), d),
            lm_head: Linear::new(store, &format!("{PREFIX}.lm_head"), d, config.vocab_size, rng),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn adapter(&self) -> &Linear {
        &self.adapter
    }

    pub fn lm_head(&self) -> &Linear {
        &self.lm_head
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Prefix embeddings `[adapter(visual); embed(question); embed(SEP)]`.
    pub fn condition(&self, g: &mut Graph, visual: Var, question: &[usize]) -> Result<Var> {
        let (m, width) = g.shape(visual);
        if width != self.visual_width {
            return Err(Error::ShapeMismatch(format!(
                "decoder adapter expects {}-wide visual tokens, got {width}",
                self.visual_width
            )));
        }
        let len = m + question.len() + 1;
        if len > self.config.max_prefix {
            return Err(Error::PrefixTooLong {
                len,
                max: self.config.max_prefix,
            });
        }
        self.check_ids(question)?;
        let v = self.adapter.forward(g, visual);
        let table = g.param(self.tok_emb);
        let mut ids = question.to_vec();
        ids.push(SEP);
        let q = g.rows(table, &ids);
        Ok(g.concat_rows(&[v, q]))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::InvalidConfig(format!(
                "token id {t} is outside the vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Logits predicting answer tokens `0..=answer_inputs.len()` given the
    /// prefix and the teacher-forced `answer_inputs`.
    pub fn logits(&self, g: &mut Graph, prefix: Var, answer_inputs: &[usize]) -> Result<Var> {
        let prefix_len = g.shape(prefix).0;
        if answer_inputs.len() >= self.config.max_len {
            return Err(Error::InvalidConfig(format!(
                "{} answer tokens exceed max_len {}",
                answer_inputs.len() + 1,
                self.config.max_len
            )));
        }
        self.check_ids(answer_inputs)?;
        let mut x = prefix;
        if !answer_inputs.is_empty() {
            let table = g.param(self.tok_emb);
            let a = g.rows(table, answer_inputs);
            x = g.concat_rows(&[prefix, a]);
        }
        let len = g.shape(x).0;
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.rows(pos_table, &positions);
        x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, x, Mask::Causal).0;
        }
        let answer_rows: Vec<usize> = (prefix_len - 1..len).collect();
        let h = g.rows(x, &answer_rows);
        let h = self.ln_f.forward(g, h);
        Ok(self.lm_head.forward(g, h))
    }

    /// Summed negative log-likelihood of `answer` (EOS-terminated) as a
    /// `1 × 1` node.
    pub fn nll(&self, g: &mut Graph, prefix: Var, answer: &[usize]) -> Result<Var> {
        if answer.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        let logits = self.logits(g, prefix, &answer[..answer.len() - 1])?;
        let targets = answer.iter().map(|&t| (t != PAD).then_some(t)).collect();
        Ok(g.cross_entropy(logits, targets))
    }

    /// Probability rows for every answer position.
    pub fn answer_distribution(&self, store: &ParamStore, prefix: &Matrix, answer: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let p = g.input(prefix.clone());
        let logits = self.logits(&mut g, p, answer)?;
        Ok(softmax_rows(g.value(logits), Mask::None))
    }

    /// Log-probabilities of the next answer token.
    pub fn next_token_log_probs(&self, store: &ParamStore, prefix: &Matrix, answer_so_far: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let p = g.input(prefix.clone());
        let logits = self.logits(&mut g, p, answer_so_far)?;
        let last = g.value(logits);
        Ok(log_softmax(last.row(last.rows() - 1)))
    }

    /// Beam search over answer tokens from a precomputed prefix.
    pub fn beam_search(&self, store: &ParamStore, prefix: &Matrix, width: usize, max_len: usize) -> Result<Hypothesis> {
        let max_len = max_len.min(self.config.max_len);
        let mut failure = None;
        let best = beam_search(width, max_len, EOS, |seq| {
            match self.next_token_log_probs(store, prefix, seq) {
                Ok(lp) => lp,
                Err(e) => {
                    failure.get_or_insert(e);
                    vec![0.0; self.vocab_size()]
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(best),
        }
    }
}
