#![allow(dead_code)]

use anomaly_vqa::autograd::{ParamId, ParamStore};
use anomaly_vqa::backbone::{BackboneConfig, BackboneKind};
use anomaly_vqa::data::{generate_synthetic, Dataset, QuestionTemplate, Source, SyntheticConfig};
use anomaly_vqa::decoder::DecoderConfig;
use anomaly_vqa::fusion::FusionStrategy;
use anomaly_vqa::kq_former::KQFormerConfig;
use anomaly_vqa::model::ModelConfig;
use anomaly_vqa::Matrix;

pub const CATEGORIES: [&str; 4] = ["healthy", "tumor", "edema", "resection"];

/// Small enough for finite differences over whole tensors.
pub fn micro_config(fusion: FusionStrategy, kq: bool) -> ModelConfig {
    ModelConfig {
        image_size: (8, 8),
        backbone: BackboneConfig {
            kind: BackboneKind::PatchTransformer,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            pretrained_weights: None,
            freeze: false,
        },
        fusion,
        kq: kq.then(|| KQFormerConfig {
            queries: 2,
            dim: 8,
            blocks: 1,
            heads: 2,
            ffn_width: 16,
            knowledge_init: None,
            diagnostic: false,
        }),
        decoder: DecoderConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            max_len: 24,
            max_prefix: 40,
            vocab_size: 0,
        },
        projection_hidden: None,
        sources: Source::TRIPLE.into_iter().collect(),
        seed: 3,
    }
}

/// Large enough to memorize a handful of cases in a few hundred steps.
pub fn toy_config(fusion: FusionStrategy, kq: bool) -> ModelConfig {
    ModelConfig {
        image_size: (16, 16),
        backbone: BackboneConfig {
            kind: BackboneKind::PatchTransformer,
            patch_size: 4,
            embed_dim: 32,
            depth: 1,
            heads: 4,
            pretrained_weights: None,
            freeze: false,
        },
        fusion,
        kq: kq.then(|| KQFormerConfig {
            queries: 8,
            dim: 32,
            blocks: 1,
            heads: 4,
            ffn_width: 64,
            knowledge_init: None,
            diagnostic: false,
        }),
        decoder: DecoderConfig {
            d_model: 32,
            blocks: 2,
            heads: 4,
            max_len: 24,
            max_prefix: 48,
            vocab_size: 0,
        },
        projection_hidden: None,
        sources: Source::TRIPLE.into_iter().collect(),
        seed: 0,
    }
}

/// Four cases (one per category) × four questions = 16 samples.
pub fn sixteen_sample_dataset(image: (usize, usize), seed: u64) -> Dataset {
    let mut cfg = SyntheticConfig::new(4, image, &CATEGORIES, seed);
    cfg.templates = vec![
        QuestionTemplate::IsNormal,
        QuestionTemplate::DescribeCondition,
        QuestionTemplate::Severity,
        QuestionTemplate::MapReflectsDisease,
    ];
    generate_synthetic(&cfg).unwrap()
}

/// Central finite differences of `f` with respect to every entry of the
/// parameter `id` of the store reached through `store`.
pub fn numeric_grad<T>(
    target: &mut T,
    store: fn(&mut T) -> &mut ParamStore,
    id: ParamId,
    h: f64,
    f: &dyn Fn(&T) -> f64,
) -> Matrix {
    let (rows, cols) = store(target).get(id).shape();
    let mut grad = Matrix::zeros(rows, cols);
    for k in 0..rows * cols {
        let orig = store(target).get(id).data()[k];
        store(target).get_mut(id).data_mut()[k] = orig + h;
        let plus = f(target);
        store(target).get_mut(id).data_mut()[k] = orig - h;
        let minus = f(target);
        store(target).get_mut(id).data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.sum_squares().sqrt().max(b.sum_squares().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Store accessor for tests that hold a bare [`ParamStore`].
pub fn bare(store: &mut ParamStore) -> &mut ParamStore {
    store
}
