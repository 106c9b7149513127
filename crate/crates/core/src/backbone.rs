//! Visual backbones mapping an `H × W × C` image to `n × d` patch tokens.
//!
//! Both kinds start with the same patchifying stem (a `P × P`, stride-`P`
//! projection, equivalently a strided convolution) plus a learned positional
//! table, so they share the `n = (H/P)·(W/P)` token contract:
//!
//! * `patch_transformer`: pre-norm self-attention blocks over the tokens.
//! * `conv_stack`: residual 3×3 convolution blocks over the token grid,
//!   flattened spatially back into tokens.
//!
//! Inputs are always widened to three channels; grayscale is replicated.

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, LoadReport};
use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::data::{Image, ImageTriple, Source};
use crate::error::{Error, Result};
use crate::nn::{embedding_init, LayerNorm, Linear, TransformerBlock};
use crate::tensor::Matrix;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    PatchTransformer,
    ConvStack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
    /// Exclude backbone weights from optimization.
    #[serde(default)]
    pub freeze: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::PatchTransformer,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            pretrained_weights: None,
            freeze: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch size {p} does not divide a {height}x{width} image"
            )));
        }
        if self.depth == 0 {
            return Err(Error::InvalidConfig("backbone depth must be at least 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens(&self, height: usize, width: usize) -> usize {
        (height / self.patch_size) * (width / self.patch_size)
    }
}

/// Patch-token embedding of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Matrix,
    pub source: Source,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    norm: LayerNorm,
    conv1: Linear,
    conv2: Linear,
}

#[derive(Clone, Debug)]
enum Stage {
    Transformer(Vec<TransformerBlock>),
    Conv(Vec<ConvBlock>),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    image_size: (usize, usize),
    grid: (usize, usize),
    patch_embed: Linear,
    pos_embed: ParamId,
    stage: Stage,
    final_norm: LayerNorm,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        image_size: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (h, w) = image_size;
        config.validate(h, w)?;
        let p = config.patch_size;
        let d = config.embed_dim;
        let grid = (h / p, w / p);
        let n = grid.0 * grid.1;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), p * p * INPUT_CHANNELS, d, rng);
        let pos_embed = store.add(format!("{prefix}.pos_embed"), embedding_init(n, d, rng), false);
        let stage = match config.kind {
            BackboneKind::PatchTransformer => Stage::Transformer(
                (0..config.depth)
                    .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), d, config.heads, rng))
                    .collect(),
            ),
            BackboneKind::ConvStack => Stage::Conv(
                (0..config.depth)
                    .map(|i| {
                        let name = format!("{prefix}.conv{i}");
                        ConvBlock {
                            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
                            conv1: Linear::new(store, &format!("{name}.conv1"), 9 * d, d, rng),
                            conv2: Linear::new(store, &format!("{name}.conv2"), 9 * d, d, rng),
                        }
                    })
                    .collect(),
            ),
        };
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d);
        if config.freeze {
            store.set_trainable(prefix, false);
        }
        Ok(Self {
            config: config.clone(),
            image_size,
            grid,
            patch_embed,
            pos_embed,
            stage,
            final_norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn patch_embed(&self) -> &Linear {
        &self.patch_embed
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn check_image(&self, dims: (usize, usize, usize)) -> Result<()> {
        let (h, w, c) = dims;
        self.config.validate(h, w)?;
        if (h, w) != self.image_size {
            return Err(Error::ShapeMismatch(format!(
                "backbone built for {}x{} images, got {h}x{w}",
                self.image_size.0, self.image_size.1
            )));
        }
        if c != 1 && c != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch(format!("{c}-channel image")));
        }
        Ok(())
    }

    /// Splits an `(H·W) × C` image node into `n × (P·P·3)` patch rows,
    /// replicating single-channel input across the three input channels.
    fn patchify(&self, g: &mut Graph, image: Var, channels: usize) -> Var {
        let p = self.config.patch_size;
        let (gh, gw) = self.grid;
        let width = self.image_size.1;
        let feat = p * p * INPUT_CHANNELS;
        let mut index = Vec::with_capacity(gh * gw * feat);
        for py in 0..gh {
            for px in 0..gw {
                for i in 0..p {
                    for j in 0..p {
                        let pixel = (py * p + i) * width + px * p + j;
                        for c in 0..INPUT_CHANNELS {
                            index.push(Some(pixel * channels + c % channels));
                        }
                    }
                }
            }
        }
        g.gather(image, gh * gw, feat, index)
    }

    /// Patch projection plus positional table, before any block.
    pub fn embed(&self, g: &mut Graph, image: Var, dims: (usize, usize, usize)) -> Result<Var> {
        self.check_image(dims)?;
        let patches = self.patchify(g, image, dims.2);
        let tokens = self.patch_embed.forward(g, patches);
        let pos = g.param(self.pos_embed);
        Ok(g.add(tokens, pos))
    }

    /// Full encoder on an `(H·W) × C` image node.
    pub fn forward(&self, g: &mut Graph, image: Var, dims: (usize, usize, usize)) -> Result<Var> {
        let mut x = self.embed(g, image, dims)?;
        match &self.stage {
            Stage::Transformer(blocks) => {
                for block in blocks {
                    x = block.forward(g, x, Mask::None).0;
                }
            }
            Stage::Conv(blocks) => {
                for block in blocks {
                    let h = block.norm.forward(g, x);
                    let h = self.im2col(g, h);
                    let h = block.conv1.forward(g, h);
                    let h = g.gelu(h);
                    let h = self.im2col(g, h);
                    let h = block.conv2.forward(g, h);
                    x = g.add(x, h);
                }
            }
        }
        Ok(self.final_norm.forward(g, x))
    }

    /// 3×3 zero-padded neighbourhoods of every grid cell: `n × 9d`.
    fn im2col(&self, g: &mut Graph, x: Var) -> Var {
        let (gh, gw) = self.grid;
        let d = self.config.embed_dim;
        let mut index = Vec::with_capacity(gh * gw * 9 * d);
        for y in 0..gh as isize {
            for x_ in 0..gw as isize {
                for ky in -1..=1 {
                    for kx in -1..=1 {
                        let (sy, sx) = (y + ky, x_ + kx);
                        let inside = sy >= 0 && sx >= 0 && sy < gh as isize && sx < gw as isize;
                        for c in 0..d {
                            index.push(inside.then(|| (sy as usize * gw + sx as usize) * d + c));
                        }
                    }
                }
            }
        }
        g.gather(x, gh * gw, 9 * d, index)
    }

    pub fn image_input(g: &mut Graph, image: &Image) -> Var {
        g.input(image.to_matrix())
    }

    /// Graph-level encode of one image.
    pub fn encode_var(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        let input = Self::image_input(g, image);
        self.forward(g, input, image.dims())
    }

    pub fn encode(&self, store: &ParamStore, image: &Image, source: Source) -> Result<VisualFeatures> {
        let mut g = Graph::new(store);
        let out = self.encode_var(&mut g, image)?;
        Ok(VisualFeatures {
            tokens: g.value(out).clone(),
            source,
        })
    }

    /// Encodes original, anomaly map and reconstruction with shared weights.
    pub fn encode_triple(&self, store: &ParamStore, triple: &ImageTriple) -> Result<[VisualFeatures; 3]> {
        let [o, a, r] = Source::TRIPLE;
        Ok([
            self.encode(store, triple.image(o), o)?,
            self.encode(store, triple.image(a), a)?,
            self.encode(store, triple.image(r), r)?,
        ])
    }

    /// Initializes every parameter under `prefix` found with a matching
    /// shape in the archive.
    pub fn load_pretrained(store: &mut ParamStore, prefix: &str, path: &std::path::Path) -> Result<LoadReport> {
        let tensors = archive::read_archive(path)?;
        Ok(archive::load_matching(store, prefix, &tensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(config: &BackboneConfig, size: (usize, usize)) -> (ParamStore, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let b = Backbone::new(&mut store, "backbone", config, size, &mut rng).unwrap();
        (store, b)
    }

    fn cfg(kind: BackboneKind, p: usize, d: usize, depth: usize, heads: usize) -> BackboneConfig {
        BackboneConfig {
            kind,
            patch_size: p,
            embed_dim: d,
            depth,
            heads,
            ..Default::default()
        }
    }

    #[test]
    fn patch_transformer_token_shape() {
        let (store, b) = build(&cfg(BackboneKind::PatchTransformer, 8, 16, 1, 2), (32, 32));
        let img = Image::from_fn(32, 32, |y, x| ((y * 3 + x) % 7) as f64 / 7.0);
        let f = b.encode(&store, &img, Source::Original).unwrap();
        assert_eq!(f.tokens.shape(), (16, 16));
        assert!(f.tokens.is_finite());
    }

    #[test]
    fn conv_stack_shares_the_token_contract() {
        let (store, b) = build(&cfg(BackboneKind::ConvStack, 4, 8, 2, 2), (16, 8));
        let img = Image::from_fn(16, 8, |y, x| (y + x) as f64 / 22.0);
        let f = b.encode(&store, &img, Source::Anomaly).unwrap();
        assert_eq!(f.tokens.shape(), (8, 8));
    }

    #[test]
    fn indivisible_patch_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let err = Backbone::new(
            &mut store,
            "b",
            &cfg(BackboneKind::PatchTransformer, 5, 8, 1, 2),
            (16, 16),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn grayscale_equals_replicated_rgb() {
        let (store, b) = build(&cfg(BackboneKind::PatchTransformer, 4, 8, 1, 2), (8, 8));
        let gray = Image::from_fn(8, 8, |y, x| (y * 8 + x) as f64 / 63.0);
        let rgb_data = gray.data().iter().flat_map(|&v| [v, v, v]).collect();
        let rgb = Image::new(8, 8, 3, rgb_data).unwrap();
        let a = b.encode(&store, &gray, Source::Original).unwrap();
        let c = b.encode(&store, &rgb, Source::Original).unwrap();
        assert_eq!(a.tokens, c.tokens);
    }

    #[test]
    fn zero_image_through_zero_projection_gives_positions() {
        let (mut store, b) = build(&cfg(BackboneKind::PatchTransformer, 4, 8, 1, 2), (8, 8));
        let (w, bias) = (b.patch_embed().weight, b.patch_embed().bias);
        *store.get_mut(w) = Matrix::zeros(48, 8);
        *store.get_mut(bias) = Matrix::zeros(1, 8);
        let mut g = Graph::new(&store);
        let img = Image::zeros(8, 8, 1);
        let input = Backbone::image_input(&mut g, &img);
        let tokens = b.embed(&mut g, input, img.dims()).unwrap();
        assert_eq!(g.value(tokens), store.get(b.pos_embed()));
    }

    #[test]
    fn triple_with_equal_images_gives_equal_tokens() {
        let (store, b) = build(&cfg(BackboneKind::PatchTransformer, 4, 8, 1, 2), (8, 8));
        let img = Image::from_fn(8, 8, |y, _| y as f64 / 7.0);
        let map = Image::from_fn(8, 8, |_, x| x as f64 / 7.0);
        let t = ImageTriple::new("c", img.clone(), map, img).unwrap();
        let [o, a, r] = b.encode_triple(&store, &t).unwrap();
        assert_eq!(o.tokens, r.tokens);
        assert_ne!(o.tokens, a.tokens);
        assert_eq!(o.tokens.shape(), a.tokens.shape());
        assert_eq!((o.source, a.source, r.source), (Source::Original, Source::Anomaly, Source::Reconstruction));
    }
}
