use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use anomaly_vqa::backbone::BackboneConfig;
use anomaly_vqa::data::{
    generate_synthetic, load_manifest, save_manifest, split_patientwise, Dataset, DatasetSplit, SyntheticConfig,
    DEFAULT_RATIO,
};
use anomaly_vqa::decoder::tokenizer::split_pieces;
use anomaly_vqa::decoder::DecoderConfig;
use anomaly_vqa::evaluation::{
    evaluate, render_table1, render_table2, EvalOptions, Grouping, NliJudge, StubJudge, SubprocessJudge,
};
use anomaly_vqa::kq_former::KQFormerConfig;
use anomaly_vqa::model::{Ablation, DecodeOptions, ModelConfig, VqaModel};
use anomaly_vqa::training::{train, Checkpoint, TrainConfig};

use crate::args::{DecodeArgs, EvalArgs, GenerateArgs, ModelArgs, ServeArgs, SplitArg, SynthArgs, TrainArgs};
use crate::service::{self, ServiceState};

pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const HISTORY_FILE: &str = "history.csv";
pub const SPLIT_FILE: &str = "split.json";

pub fn synth(args: &SynthArgs) -> Result<()> {
    let categories: Vec<&str> = args.categories.iter().map(String::as_str).collect();
    let mut cfg = SyntheticConfig::new(args.patients, (args.image_size, args.image_size), &categories, args.seed);
    cfg.cases_per_patient = args.cases_per_patient;
    cfg.unknown_categories = args.unknown_categories.clone();
    cfg.healthy_cases = args.healthy_cases;
    cfg.signal_only_in_anomaly = args.signal_only_in_anomaly;
    cfg.shared_anatomy = args.shared_anatomy;
    if !args.templates.is_empty() {
        cfg.templates = args.templates.iter().map(|&t| t.into()).collect();
    }
    let data = generate_synthetic(&cfg)?;
    let path = save_manifest(&data, &args.out)?;
    println!("wrote {}: {}", path.display(), data.summary());
    Ok(())
}

fn image_size(data: &Dataset) -> Result<(usize, usize)> {
    let triple = data.triples().first().context("manifest has no cases")?;
    let (h, w, _) = triple.dims();
    Ok((h, w))
}

/// Architecture from flags, sized to the dataset's images and questions.
pub fn model_config(args: &ModelArgs, data: &Dataset, seed: u64) -> Result<ModelConfig> {
    if let Some(path) = &args.model_config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let mut config = ModelConfig {
        image_size: image_size(data)?,
        backbone: BackboneConfig {
            kind: args.backbone.into(),
            patch_size: args.patch_size,
            embed_dim: args.embed_dim,
            depth: args.depth,
            heads: args.heads,
            pretrained_weights: args.backbone_weights.clone(),
            freeze: args.freeze_backbone,
        },
        fusion: args.fusion.into(),
        kq: args.kq.then(|| KQFormerConfig {
            queries: args.kq_queries,
            dim: args.kq_dim,
            blocks: args.kq_blocks,
            heads: args.kq_heads,
            ffn_width: 4 * args.kq_dim,
            knowledge_init: args.knowledge_init.clone(),
            diagnostic: false,
        }),
        decoder: DecoderConfig {
            d_model: args.d_model,
            blocks: args.decoder_blocks,
            heads: args.decoder_heads,
            max_len: args.max_len,
            max_prefix: 0,
            vocab_size: 0,
        },
        seed,
        ..ModelConfig::default()
    };
    config.validate()?;
    let longest = data
        .samples()
        .iter()
        .map(|s| split_pieces(&s.question).len())
        .max()
        .unwrap_or(0);
    // room for unseen questions at serving time
    config.decoder.max_prefix = config.visual_tokens() + (2 * longest).max(64) + 1;
    Ok(config)
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = load_manifest(&args.manifest)?;
    let model_config = model_config(&args.model, &data, args.seed)?;
    let split = if args.no_split {
        let all: Vec<String> = data.samples().iter().map(|s| s.sample_id.clone()).collect();
        DatasetSplit {
            train: all.clone(),
            val: all.clone(),
            test: all,
            seed: args.split_seed,
        }
    } else {
        split_patientwise(data.samples(), DEFAULT_RATIO, args.split_seed)?
    };
    let config = TrainConfig {
        lr: args.lr,
        weight_decay: args.weight_decay,
        max_epochs: args.epochs,
        patience: args.patience,
        batch_size: args.batch_size,
        max_steps: args.max_steps,
        seed: args.seed,
        ..TrainConfig::default()
    };
    log::info!(
        "training on {} samples, validating on {}",
        split.train.len(),
        split.val.len()
    );
    let outcome = train(&data, &split, &model_config, &config)?;
    fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    outcome.best.save(&ckpt_path)?;
    outcome.history.write_csv(&args.out.join(HISTORY_FILE))?;
    fs::write(args.out.join(SPLIT_FILE), serde_json::to_string_pretty(&split)?)?;
    println!(
        "best epoch {} (val loss {:.6}) after {} epochs; wrote {}",
        outcome.best.epoch,
        outcome.best.best_val_loss,
        outcome.history.epochs.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn decode_options(args: &DecodeArgs, model: &VqaModel, ablation: Ablation) -> DecodeOptions {
    DecodeOptions {
        width: args.beam_width,
        max_len: args.max_len.unwrap_or(model.config().decoder.max_len),
        ablation,
    }
}

fn load_split(args: &EvalArgs, data: &Dataset) -> Result<DatasetSplit> {
    let default_file = args.checkpoint.parent().map(|d| d.join(SPLIT_FILE));
    let file = args.split_file.clone().or(default_file.filter(|p| p.exists()));
    match file {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(split_patientwise(data.samples(), DEFAULT_RATIO, args.split_seed)?),
    }
}

fn parse_judge(spec: &str) -> Result<SubprocessJudge> {
    let Some((name, command)) = spec.split_once('=') else {
        bail!("judge {spec:?} is not NAME=COMMAND");
    };
    let mut words = command.split_whitespace();
    let program = words.next().with_context(|| format!("judge {name} has an empty command"))?;
    let rest: Vec<String> = words.map(str::to_string).collect();
    Ok(SubprocessJudge::spawn(name, program, &rest)?)
}

/// Row label for report tables, e.g. `concat+KQ`.
pub fn method_name(config: &ModelConfig) -> String {
    let kq = if config.kq.is_some() { "+KQ" } else { "" };
    format!("{}{kq}", config.fusion)
}

pub fn report_path(out: &Path, ablation: Ablation) -> PathBuf {
    out.join(format!("report_{}.json", ablation.as_str()))
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_manifest(&args.manifest)?;
    let ids = if args.split == SplitArg::All {
        data.samples().iter().map(|s| s.sample_id.clone()).collect()
    } else {
        let split = load_split(args, &data)?;
        match args.split {
            SplitArg::Train => split.train,
            SplitArg::Val => split.val,
            _ => split.test,
        }
    };
    let external: Vec<SubprocessJudge> = args.judge.iter().map(|j| parse_judge(j)).collect::<Result<_>>()?;
    let mut judges: Vec<&dyn NliJudge> = Vec::new();
    if !args.no_stub_judge {
        judges.push(&StubJudge);
    }
    judges.extend(external.iter().map(|j| j as &dyn NliJudge));
    let options = EvalOptions {
        grouping: Grouping::ALL,
        ablation: args.ablation,
        decode: decode_options(&args.decode, &ckpt.model, Ablation::WithAnomaly),
    };
    let outcome = evaluate(&ckpt.model, &data, &ids, &options, &judges)?;

    fs::create_dir_all(&args.out)?;
    for (mode, report) in &outcome.reports {
        fs::write(report_path(&args.out, *mode), serde_json::to_string_pretty(report)?)?;
        let lines: Vec<String> = outcome.predictions[mode]
            .iter()
            .map(serde_json::to_string)
            .collect::<serde_json::Result<_>>()?;
        fs::write(
            args.out.join(format!("predictions_{}.jsonl", mode.as_str())),
            lines.join("\n") + "\n",
        )?;
    }
    let with = &outcome.reports[&Ablation::WithAnomaly];
    let table1 = render_table1(&[(method_name(ckpt.model.config()), with)]);
    fs::write(args.out.join("table1.md"), &table1)?;
    print!("{table1}");
    if let Some(without) = outcome.reports.get(&Ablation::WithoutAnomaly) {
        let table2 = render_table2(with, without);
        fs::write(args.out.join("table2.md"), &table2)?;
        println!();
        print!("{table2}");
    }
    Ok(())
}

pub fn generate_cmd(args: &GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_manifest(&args.manifest)?;
    let triple = data.triple(&args.case_id)?;
    let ablation = if args.without_anomaly {
        Ablation::WithoutAnomaly
    } else {
        Ablation::WithAnomaly
    };
    let options = decode_options(&args.decode, &ckpt.model, ablation);
    let g = ckpt.model.generate(triple, &args.question, &options)?;
    if args.json {
        let body = serde_json::json!({ "answer": g.answer, "log_score": g.log_score });
        println!("{body}");
    } else {
        println!("{}", g.answer);
    }
    Ok(())
}

pub async fn serve_cmd(args: &ServeArgs) -> Result<()> {
    let data = load_manifest(&args.manifest)?;
    let model = match &args.checkpoint {
        Some(path) => Some(Arc::new(Checkpoint::load(path)?.model)),
        None => {
            log::warn!("no checkpoint given; /ask will answer 503");
            None
        }
    };
    let options = model
        .as_ref()
        .map(|m| decode_options(&args.decode, m, Ablation::WithAnomaly))
        .unwrap_or_default();
    let state = ServiceState::new(model, data, options);
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, service::router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
