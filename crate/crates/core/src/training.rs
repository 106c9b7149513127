//! Optimization loop, early stopping and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{self, TensorMap};
use crate::autograd::{Graph, ParamId, ParamStore};
use crate::data::{Dataset, DatasetSplit, QaSample};
use crate::decoder::WordTokenizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VqaModel};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub monitor: Monitor,
    pub beam_width_eval: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-5,
            weight_decay: 0.05,
            max_epochs: 40,
            patience: 10,
            batch_size: 8,
            seed: 0,
            monitor: Monitor::ValLoss,
            beam_width_eval: 5,
            max_steps: None,
            grad_clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a no-op optimizer
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.beam_width_eval == 0 {
            return Err(Error::InvalidConfig("batch size and beam width must be positive".into()));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl AdamW {
    /// One update of every trainable parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Matrix>, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let param = store.param(id);
            if !param.trainable {
                continue;
            }
            let name = param.name.clone();
            let decay = param.decay;
            let (rows, cols) = param.value.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v.entry(name).or_insert_with(|| Matrix::zeros(rows, cols));
            let value = store.get_mut(id);
            let shrink = if decay { 1.0 - config.lr * config.weight_decay } else { 1.0 };
            let grad = grads.get(&id);
            for k in 0..value.len() {
                let gk = grad.map_or(0.0, |g| g.data()[k]);
                let mk = config.beta1 * m.data()[k] + (1.0 - config.beta1) * gk;
                let vk = config.beta2 * v.data()[k] + (1.0 - config.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + config.eps);
                let p = &mut value.data_mut()[k];
                *p = *p * shrink - config.lr * update;
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<ParamId, Matrix>, max_norm: f64) -> f64 {
    // fixed summation order keeps runs bitwise reproducible
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    let norm = ids.iter().map(|id| grads[id].sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Loss, answer token count and parameter gradients of one sample.
pub fn sample_gradients(model: &VqaModel, dataset: &Dataset, sample: &QaSample) -> Result<(f64, usize, HashMap<ParamId, Matrix>)> {
    let triple = dataset.triple(&sample.case_id)?;
    let mut g = Graph::new(model.params());
    let (loss, tokens) = model.sample_loss(&mut g, triple, &sample.question, &sample.answer)?;
    let value = g.value(loss).item();
    Ok((value, tokens, g.backward(loss).into_params()))
}

/// Mean summed-answer NLL and total answer-token NLL over `samples`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSummary {
    pub per_sample: f64,
    pub per_token: f64,
}

pub fn evaluate_loss(model: &VqaModel, dataset: &Dataset, samples: &[&QaSample]) -> Result<LossSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let losses = samples
        .par_iter()
        .map(|s| {
            let triple = dataset.triple(&s.case_id)?;
            model.loss_value(triple, &s.question, &s.answer)
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = losses.iter().map(|l| l.0).sum();
    let tokens: usize = losses.iter().map(|l| l.1).sum();
    Ok(LossSummary {
        per_sample: total / samples.len() as f64,
        per_token: total / tokens as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Train loss per answer token, measured with the end-of-epoch weights.
    pub train_token_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }
}

/// Model weights plus everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VqaModel,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    pub train_config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: History,
}

/// Builds the tokenizer over every question and answer of `dataset`.
pub fn corpus_tokenizer(dataset: &Dataset) -> WordTokenizer {
    WordTokenizer::from_corpus(
        dataset
            .samples()
            .iter()
            .flat_map(|s| [s.question.as_str(), s.answer.as_str()]),
    )
}

pub fn train(dataset: &Dataset, split: &DatasetSplit, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = VqaModel::new(model_config, corpus_tokenizer(dataset))?;
    let train_samples = dataset.select(&split.train)?;
    let val_samples = dataset.select(&split.val)?;
    train_model(model, dataset, &train_samples, &val_samples, config)
}

/// Trains an already built model. The returned checkpoint holds the weights
/// of the epoch with the lowest validation loss.
pub fn train_model(
    mut model: VqaModel,
    dataset: &Dataset,
    train_samples: &[&QaSample],
    val_samples: &[&QaSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_samples.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let mut optimizer = AdamW::default();
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    let mut bad_epochs = 0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut stop = false;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, dataset, train_samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grads: HashMap<ParamId, Matrix> = HashMap::new();
            for (l, _, g) in results {
                loss += l * scale;
                for (id, mut m) in g {
                    m.scale_assign(scale);
                    match grads.get_mut(&id) {
                        Some(acc) => acc.add_assign(&m),
                        None => {
                            grads.insert(id, m);
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: steps + 1 });
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            optimizer.step(model.params_mut(), &grads, config);
            steps += 1;
            epoch_loss += loss;
            batches += 1;
            if config.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let val = evaluate_loss(&model, dataset, val_samples)?;
        let train_eval = evaluate_loss(&model, dataset, train_samples)?;
        if !val.per_sample.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: steps });
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_loss: val.per_sample,
            train_token_loss: train_eval.per_token,
            steps,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} ({} steps)",
            record.train_loss,
            record.val_loss,
            steps
        );
        history.epochs.push(record);
        let improved = best.as_ref().is_none_or(|b| val.per_sample < b.best_val_loss);
        if improved {
            bad_epochs = 0;
            best = Some(Checkpoint {
                model: model.clone(),
                optimizer: optimizer.clone(),
                epoch,
                best_val_loss: val.per_sample,
                seed: config.seed,
                train_config: config.clone(),
            });
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break 'epochs;
            }
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        history,
    })
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    tokenizer: WordTokenizer,
    train_config: TrainConfig,
    epoch: usize,
    optimizer_step: u64,
    /// `None` before any validation pass.
    best_val_loss: Option<f64>,
    seed: u64,
}

/// `weights.safetensors` → `weights.meta.json`
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl Checkpoint {
    /// Wraps an untrained model, e.g. for evaluation of random weights.
    pub fn from_model(model: VqaModel) -> Self {
        Self {
            model,
            optimizer: AdamW::default(),
            epoch: 0,
            best_val_loss: f64::INFINITY,
            seed: 0,
            train_config: TrainConfig::default(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = archive::store_tensors(self.model.params());
        for (name, m) in &self.optimizer.m {
            tensors.insert(format!("{MOMENT_M}{name}"), m.clone());
        }
        for (name, v) in &self.optimizer.v {
            tensors.insert(format!("{MOMENT_V}{name}"), v.clone());
        }
        archive::write_archive(path, &tensors)?;
        let meta = CheckpointMeta {
            model_config: self.model.config().clone(),
            tokenizer: self.model.tokenizer().clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            best_val_loss: self.best_val_loss.is_finite().then_some(self.best_val_loss),
            seed: self.seed,
        };
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_inner(path, None)
    }

    /// Loads the weights into a model built from `config` instead of the
    /// stored one; shape disagreements are reported per tensor.
    pub fn load_with_config(path: &Path, config: &ModelConfig) -> Result<Self> {
        Self::load_inner(path, Some(config))
    }

    fn load_inner(path: &Path, config: Option<&ModelConfig>) -> Result<Self> {
        let tensors = archive::read_archive(path).map_err(|e| match e {
            Error::ArchiveMissing(p) => Error::CorruptArchive(format!("checkpoint {} not found", p.display())),
            other => other,
        })?;
        let meta_file = meta_path(path);
        let meta: CheckpointMeta = match std::fs::read_to_string(&meta_file) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::CorruptArchive(format!("{}: {e}", meta_file.display())))?,
            Err(_) => return Err(Error::CorruptArchive(format!("missing metadata {}", meta_file.display()))),
        };
        let mut model_config = config.cloned().unwrap_or(meta.model_config);
        // weights come from the checkpoint, not from pretrained archives
        model_config.backbone.pretrained_weights = None;
        if let Some(kq) = model_config.kq.as_mut() {
            kq.knowledge_init = None;
        }
        let mut model = VqaModel::new(&model_config, meta.tokenizer)?;
        let mut weights = TensorMap::new();
        let mut optimizer = AdamW {
            step: meta.optimizer_step,
            ..AdamW::default()
        };
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix(MOMENT_M) {
                optimizer.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                optimizer.v.insert(n.to_string(), t);
            } else {
                weights.insert(name, t);
            }
        }
        archive::load_exact(model.params_mut(), &weights)?;
        Ok(Self {
            model,
            optimizer,
            epoch: meta.epoch,
            best_val_loss: meta.best_val_loss.unwrap_or(f64::INFINITY),
            seed: meta.seed,
            train_config: meta.train_config,
        })
    }
}
