//! End-to-end answer model: backbone → (query transformer) → fusion →
//! decoder.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{ImageTriple, Source};
use crate::decoder::{answer_targets, Decoder, DecoderConfig, Hypothesis, Tokenizer, WordTokenizer};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionStrategy, ProjectionHead};
use crate::kq_former::{self, KQFormer, KQFormerConfig};
use crate::tensor::Matrix;

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "fusion.phi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub fusion: FusionStrategy,
    /// `None` feeds backbone tokens straight into fusion.
    #[serde(default)]
    pub kq: Option<KQFormerConfig>,
    pub decoder: DecoderConfig,
    /// Hidden width of the concat projection head; twice the token width
    /// when unset.
    #[serde(default)]
    pub projection_hidden: Option<usize>,
    /// Views the model is built and trained on.
    #[serde(default = "all_sources")]
    pub sources: BTreeSet<Source>,
    #[serde(default)]
    pub seed: u64,
}

fn all_sources() -> BTreeSet<Source> {
    Source::TRIPLE.into_iter().collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            backbone: BackboneConfig::default(),
            fusion: FusionStrategy::Concat,
            kq: None,
            decoder: DecoderConfig::default(),
            projection_hidden: None,
            sources: all_sources(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width of the tokens entering fusion.
    pub fn token_width(&self) -> usize {
        self.kq.as_ref().map_or(self.backbone.embed_dim, |k| k.dim)
    }

    /// Number of visual tokens in the decoder prefix.
    pub fn visual_tokens(&self) -> usize {
        self.kq
            .as_ref()
            .map_or(self.backbone.tokens(self.image_size.0, self.image_size.1), |k| k.queries)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        self.backbone.validate(h, w)?;
        if let Some(kq) = &self.kq {
            kq.validate()?;
        }
        if self.sources.is_empty() || self.sources.contains(&Source::ChannelFused) {
            return Err(Error::InvalidConfig(
                "sources must be a non-empty subset of original, anomaly, reconstruction".into(),
            ));
        }
        Ok(())
    }
}

/// Whether the anomaly map is shown to the model at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    WithAnomaly,
    WithoutAnomaly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::WithAnomaly => "with_anomaly",
            Ablation::WithoutAnomaly => "without_anomaly",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub width: usize,
    pub max_len: usize,
    pub ablation: Ablation,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            width: 5,
            max_len: 64,
            ablation: Ablation::WithAnomaly,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub answer: String,
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    head: Option<ProjectionHead>,
    kq: Option<KQFormer>,
    decoder: Decoder,
    tokenizer: WordTokenizer,
}

impl VqaModel {
    /// Builds a model with seeded random weights, then applies any
    /// configured pretrained archives.
    pub fn new(config: &ModelConfig, tokenizer: WordTokenizer) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.decoder.vocab_size = tokenizer.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, BACKBONE_PREFIX, &config.backbone, config.image_size, &mut rng)?;
        let kq = match &config.kq {
            Some(k) => Some(KQFormer::new(&mut params, k, config.backbone.embed_dim, &mut rng)?),
            None => None,
        };
        let width = config.token_width();
        let head = (config.fusion == FusionStrategy::Concat).then(|| {
            let k = config.sources.len();
            let hidden = config.projection_hidden.unwrap_or(2 * width);
            ProjectionHead::new(&mut params, HEAD_PREFIX, k * width, hidden, width, &mut rng)
        });
        let decoder = Decoder::new(&mut params, &config.decoder, width, &mut rng)?;
        if let Some(path) = &config.backbone.pretrained_weights {
            let report = Backbone::load_pretrained(&mut params, &format!("{BACKBONE_PREFIX}."), path)?;
            log::info!("backbone weights: {} loaded, {} random", report.loaded.len(), report.randomized.len());
        }
        if let Some(path) = config.kq.as_ref().and_then(|k| k.knowledge_init.as_ref()) {
            let report = kq_former::load_knowledge_init(&mut params, path)?;
            log::info!("knowledge init: {} loaded, {} random", report.loaded.len(), report.randomized.len());
        }
        if config.backbone.freeze {
            params.set_trainable(BACKBONE_PREFIX, false);
        }
        Ok(Self {
            config,
            params,
            backbone,
            head,
            kq,
            decoder,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> Option<&ProjectionHead> {
        self.head.as_ref()
    }

    pub fn kq(&self) -> Option<&KQFormer> {
        self.kq.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    /// Views actually fed to the model under `ablation`.
    pub fn active_sources(&self, ablation: Ablation) -> BTreeSet<Source> {
        let mut active = self.config.sources.clone();
        if ablation == Ablation::WithoutAnomaly {
            active.remove(&Source::Anomaly);
        }
        active
    }

    fn encode_one(&self, g: &mut Graph, image: &crate::data::Image) -> Result<Var> {
        let tokens = self.backbone.encode_var(g, image)?;
        match &self.kq {
            Some(kq) => Ok(kq.forward(g, tokens)?.output),
            None => Ok(tokens),
        }
    }

    /// Fused visual tokens of `triple` as a graph node.
    pub fn visual_var(&self, g: &mut Graph, triple: &ImageTriple, ablation: Ablation) -> Result<Var> {
        let active = self.active_sources(ablation);
        let fallback = *active.iter().next().ok_or(Error::EmptySources)?;
        match self.config.fusion {
            FusionStrategy::Channel => {
                let image = fusion::fuse_channel(triple, &active)?;
                self.encode_one(g, &image)
            }
            FusionStrategy::Average => {
                let parts = active
                    .iter()
                    .map(|&s| self.encode_one(g, triple.image(s)))
                    .collect::<Result<Vec<_>>>()?;
                fusion::average_vars(g, &parts)
            }
            FusionStrategy::Concat => {
                let mut encoded: BTreeMap<Source, Var> = BTreeMap::new();
                let mut parts = Vec::with_capacity(self.config.sources.len());
                for &slot in &self.config.sources {
                    let s = if active.contains(&slot) { slot } else { fallback };
                    let v = match encoded.get(&s) {
                        Some(&v) => v,
                        None => {
                            let v = self.encode_one(g, triple.image(s))?;
                            encoded.insert(s, v);
                            v
                        }
                    };
                    parts.push(v);
                }
                let head = self.head.as_ref().expect("concat model has a head");
                fusion::concat_vars(g, &parts, head)
            }
        }
    }

    pub fn question_ids(&self, question: &str) -> Vec<usize> {
        self.tokenizer.encode(question)
    }

    pub fn answer_ids(&self, answer: &str) -> Result<Vec<usize>> {
        answer_targets(&self.tokenizer, answer, self.config.decoder.max_len)
    }

    /// Summed answer NLL of one sample and its token count.
    pub fn sample_loss(&self, g: &mut Graph, triple: &ImageTriple, question: &str, answer: &str) -> Result<(Var, usize)> {
        let targets = self.answer_ids(answer)?;
        let visual = self.visual_var(g, triple, Ablation::WithAnomaly)?;
        let prefix = self.decoder.condition(g, visual, &self.question_ids(question))?;
        Ok((self.decoder.nll(g, prefix, &targets)?, targets.len()))
    }

    /// Evaluates `sample_loss` without gradients.
    pub fn loss_value(&self, triple: &ImageTriple, question: &str, answer: &str) -> Result<(f64, usize)> {
        let mut g = Graph::new(&self.params);
        let (loss, tokens) = self.sample_loss(&mut g, triple, question, answer)?;
        Ok((g.value(loss).item(), tokens))
    }

    /// Decoder prefix embeddings for one case and question.
    pub fn prefix(&self, triple: &ImageTriple, question: &str, ablation: Ablation) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let visual = self.visual_var(&mut g, triple, ablation)?;
        let prefix = self.decoder.condition(&mut g, visual, &self.question_ids(question))?;
        Ok(g.value(prefix).clone())
    }

    pub fn generate(&self, triple: &ImageTriple, question: &str, options: &DecodeOptions) -> Result<Generation> {
        let prefix = self.prefix(triple, question, options.ablation)?;
        let Hypothesis { tokens, log_score } =
            self.decoder.beam_search(&self.params, &prefix, options.width, options.max_len)?;
        Ok(Generation {
            answer: self.tokenizer.decode(&tokens),
            tokens,
            log_score,
        })
    }
}
