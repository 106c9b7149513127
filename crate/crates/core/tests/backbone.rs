mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use anomaly_vqa::autograd::{Graph, ParamStore};
use anomaly_vqa::backbone::{Backbone, BackboneConfig, BackboneKind};
use anomaly_vqa::data::{Image, ImageTriple};
use anomaly_vqa::nn::glorot;
use anomaly_vqa::Matrix;

use common::{bare, numeric_grad, relative_error};

fn backbone(config: &BackboneConfig, size: (usize, usize), seed: u64) -> (ParamStore, Backbone) {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, "backbone", config, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, b)
}

fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let m = glorot(1, h * w * c, &mut ChaCha8Rng::seed_from_u64(seed));
    Image::new(h, w, c, m.data().iter().map(|v| 0.5 + 0.5 * v.tanh()).collect()).unwrap()
}

#[test]
fn vit_b16_geometry() {
    let config = BackboneConfig {
        patch_size: 16,
        embed_dim: 768,
        depth: 1,
        heads: 12,
        ..BackboneConfig::default()
    };
    let (store, b) = backbone(&config, (224, 224), 0);
    let out = b.encode(&store, &noise(224, 224, 3, 1), anomaly_vqa::data::Source::Original).unwrap();
    assert_eq!(out.tokens.shape(), (196, 768));
    assert!(out.tokens.is_finite());
}

#[test]
fn token_count_is_content_independent() {
    for kind in [BackboneKind::PatchTransformer, BackboneKind::ConvStack] {
        let config = BackboneConfig {
            kind,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            ..BackboneConfig::default()
        };
        let (store, b) = backbone(&config, (32, 32), 0);
        for seed in 0..3 {
            let out = b.encode(&store, &noise(32, 32, 1, seed), anomaly_vqa::data::Source::Anomaly).unwrap();
            assert_eq!(out.tokens.shape(), (16, 16));
        }
    }
}

/// Weighted sum of the three encodings; the weights keep the final layer
/// norm from cancelling the gradient.
fn triple_loss(store: &ParamStore, b: &Backbone, images: &[Image], weights: &Matrix) -> f64 {
    let mut g = Graph::new(store);
    let w = g.input(weights.clone());
    let parts: Vec<_> = images
        .iter()
        .map(|img| {
            let v = b.encode_var(&mut g, img).unwrap();
            let y = g.mul(v, w);
            g.sum(y)
        })
        .collect();
    let total = g.mean(&parts);
    g.value(total).item() * parts.len() as f64
}

#[test]
fn triple_gradient_accumulates_over_all_images() {
    let config = BackboneConfig {
        patch_size: 4,
        embed_dim: 6,
        depth: 1,
        heads: 2,
        ..BackboneConfig::default()
    };
    // two patches
    let (mut store, b) = backbone(&config, (4, 8), 3);
    let triple = ImageTriple::new("t", noise(4, 8, 1, 1), noise(4, 8, 1, 2), noise(4, 8, 1, 3)).unwrap();
    let images = vec![triple.original.clone(), triple.anomaly_map.clone(), triple.reconstruction.clone()];
    let weights = glorot(2, 6, &mut ChaCha8Rng::seed_from_u64(9));
    let id = b.patch_embed().weight;

    let grad_of = |imgs: &[Image]| {
        let mut g = Graph::new(&store);
        let w = g.input(weights.clone());
        let parts: Vec<_> = imgs
            .iter()
            .map(|img| {
                let v = b.encode_var(&mut g, img).unwrap();
                let y = g.mul(v, w);
                g.sum(y)
            })
            .collect();
        let total = g.mean(&parts);
        let total = g.scale(total, parts.len() as f64);
        g.backward(total).into_params().remove(&id).unwrap()
    };
    let joint = grad_of(&images);
    let mut separate = Matrix::zeros(joint.rows(), joint.cols());
    for img in &images {
        separate.add_assign(&grad_of(std::slice::from_ref(img)));
    }
    assert!(joint.max_abs_diff(&separate) < 1e-12);

    let loss = |s: &ParamStore| triple_loss(s, &b, &images, &weights);
    let numeric = numeric_grad(&mut store, bare, id, 1e-5, &loss);
    let err = relative_error(&joint, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn encoding_is_bitwise_deterministic() {
    let (store, b) = backbone(&BackboneConfig::default(), (16, 16), 5);
    let img = noise(16, 16, 1, 4);
    let a = b.encode(&store, &img, anomaly_vqa::data::Source::Original).unwrap();
    let c = b.encode(&store, &img, anomaly_vqa::data::Source::Original).unwrap();
    assert_eq!(a, c);
}
