//! Answer generation over a split, metric reports and table rendering.

pub mod metrics;
pub mod nli;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QaSample, QuestionKind};
use crate::error::{Error, Result};
use crate::model::{Ablation, DecodeOptions, VqaModel};

pub use metrics::{
    bleu, cider, closed_metrics, match_class, normalize_answer, open_metrics, rouge_l, ClosedMetrics, EvalTokenizer,
    OpenMetrics, SimpleTokenizer, UNMATCHED,
};
pub use nli::{nli_ratios, NliJudge, NliLabel, NliPair, NliRatios, StubJudge, SubprocessJudge};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: QaSample,
    pub prediction: String,
    pub log_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub closed: Option<ClosedMetrics>,
    pub open: Option<OpenMetrics>,
    /// Judge name → label ratios over the open questions.
    pub nli: BTreeMap<String, NliRatios>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, EvalReport>,
}

/// Which partitions get their own sub-report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub known: bool,
    pub health: bool,
    pub kind: bool,
}

impl Grouping {
    pub const ALL: Grouping = Grouping {
        known: true,
        health: true,
        kind: true,
    };
    pub const NONE: Grouping = Grouping {
        known: false,
        health: false,
        kind: false,
    };
}

fn flat_report(
    preds: &[&Prediction],
    vocabulary: &[String],
    judges: &[&dyn NliJudge],
    tok: &dyn EvalTokenizer,
) -> Result<EvalReport> {
    let closed_pairs: Vec<(&str, &QaSample)> = preds
        .iter()
        .filter(|p| p.sample.kind == QuestionKind::Closed)
        .map(|p| (p.prediction.as_str(), &p.sample))
        .collect();
    let open: Vec<&&Prediction> = preds.iter().filter(|p| p.sample.kind == QuestionKind::Open).collect();
    let closed = if closed_pairs.is_empty() {
        None
    } else {
        Some(closed_metrics(&closed_pairs, vocabulary)?)
    };
    let (open_scores, nli) = if open.is_empty() {
        (None, BTreeMap::new())
    } else {
        let cands: Vec<&str> = open.iter().map(|p| p.prediction.as_str()).collect();
        let refs: Vec<&str> = open.iter().map(|p| p.sample.answer.as_str()).collect();
        let pairs: Vec<NliPair> = open
            .iter()
            .map(|p| NliPair {
                sample_id: &p.sample.sample_id,
                prediction: &p.prediction,
                gold: &p.sample.answer,
            })
            .collect();
        (Some(open_metrics(&cands, &refs, tok)?), nli_ratios(&pairs, judges)?)
    };
    Ok(EvalReport {
        n_samples: preds.len(),
        closed,
        open: open_scores,
        nli,
        groups: BTreeMap::new(),
    })
}

/// Overall metrics plus one sub-report per non-empty group.
pub fn build_report(
    preds: &[Prediction],
    vocabulary: &[String],
    judges: &[&dyn NliJudge],
    tok: &dyn EvalTokenizer,
    grouping: Grouping,
) -> Result<EvalReport> {
    let all: Vec<&Prediction> = preds.iter().collect();
    let mut report = flat_report(&all, vocabulary, judges, tok)?;
    let mut partitions: Vec<(&str, Box<dyn Fn(&QaSample) -> bool>)> = Vec::new();
    if grouping.known {
        partitions.push(("known", Box::new(|s: &QaSample| s.known)));
        partitions.push(("unknown", Box::new(|s: &QaSample| !s.known)));
    }
    if grouping.health {
        partitions.push(("healthy", Box::new(QaSample::is_healthy)));
        partitions.push(("unhealthy", Box::new(|s: &QaSample| !s.is_healthy())));
    }
    if grouping.kind {
        partitions.push(("closed", Box::new(|s: &QaSample| s.kind == QuestionKind::Closed)));
        partitions.push(("open", Box::new(|s: &QaSample| s.kind == QuestionKind::Open)));
    }
    for (label, keep) in partitions {
        let subset: Vec<&Prediction> = preds.iter().filter(|p| keep(&p.sample)).collect();
        if !subset.is_empty() {
            report
                .groups
                .insert(label.to_string(), flat_report(&subset, vocabulary, judges, tok)?);
        }
    }
    Ok(report)
}

pub fn generate_predictions(
    model: &VqaModel,
    dataset: &Dataset,
    samples: &[&QaSample],
    options: &DecodeOptions,
) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| {
            let triple = dataset.triple(&s.case_id)?;
            let g = model.generate(triple, &s.question, options)?;
            Ok(Prediction {
                sample: (*s).clone(),
                prediction: g.answer,
                log_score: g.log_score,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub grouping: Grouping,
    /// Also evaluate with the anomaly map withheld.
    pub ablation: bool,
    pub decode: DecodeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grouping: Grouping::ALL,
            ablation: false,
            decode: DecodeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub reports: BTreeMap<Ablation, EvalReport>,
    pub predictions: BTreeMap<Ablation, Vec<Prediction>>,
}

pub fn evaluate(
    model: &VqaModel,
    dataset: &Dataset,
    sample_ids: &[String],
    options: &EvalOptions,
    judges: &[&dyn NliJudge],
) -> Result<EvalOutcome> {
    if sample_ids.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let samples = dataset.select(sample_ids)?;
    let mut modes = vec![Ablation::WithAnomaly];
    if options.ablation {
        modes.push(Ablation::WithoutAnomaly);
    }
    let mut outcome = EvalOutcome {
        reports: BTreeMap::new(),
        predictions: BTreeMap::new(),
    };
    for mode in modes {
        let decode = DecodeOptions {
            ablation: mode,
            ..options.decode
        };
        let preds = generate_predictions(model, dataset, &samples, &decode)?;
        let report = build_report(&preds, dataset.class_vocabulary(), judges, &SimpleTokenizer, options.grouping)?;
        outcome.reports.insert(mode, report);
        outcome.predictions.insert(mode, preds);
    }
    Ok(outcome)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn grid(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub const TABLE1_HEADER: [&str; 9] = ["Method", "ACC", "F1", "B1", "B2", "B3", "B4", "ROUGE-L", "CIDEr"];

/// One row per method: closed ACC/F1 and open BLEU-1..4, ROUGE-L, CIDEr.
pub fn render_table1(rows: &[(String, &EvalReport)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let c = r.closed;
            let o = r.open;
            vec![
                name.clone(),
                cell(c.map(|c| c.acc)),
                cell(c.map(|c| c.f1_macro)),
                cell(o.map(|o| o.bleu1)),
                cell(o.map(|o| o.bleu2)),
                cell(o.map(|o| o.bleu3)),
                cell(o.map(|o| o.bleu4)),
                cell(o.map(|o| o.rouge_l)),
                cell(o.map(|o| o.cider)),
            ]
        })
        .collect();
    grid(&TABLE1_HEADER, &body)
}

/// Side-by-side scores with and without the anomaly map, overall and per
/// group.
pub fn render_table2(with: &EvalReport, without: &EvalReport) -> String {
    let header = [
        "Group", "ACC w/ Ano", "ACC w/o Ano", "F1 w/ Ano", "F1 w/o Ano", "B4 w/ Ano", "B4 w/o Ano", "NLI ent. w/ Ano",
        "NLI ent. w/o Ano",
    ];
    let mut pairs = vec![("overall".to_string(), with, without)];
    for (name, g) in &with.groups {
        if let Some(h) = without.groups.get(name) {
            pairs.push((name.clone(), g, h));
        }
    }
    let entail = |r: &EvalReport| r.nli.values().next().map(|n| n.entailment_ratio);
    let body: Vec<Vec<String>> = pairs
        .into_iter()
        .map(|(name, a, b)| {
            vec![
                name,
                cell(a.closed.map(|c| c.acc)),
                cell(b.closed.map(|c| c.acc)),
                cell(a.closed.map(|c| c.f1_macro)),
                cell(b.closed.map(|c| c.f1_macro)),
                cell(a.open.map(|o| o.bleu4)),
                cell(b.open.map(|o| o.bleu4)),
                cell(entail(a)),
                cell(entail(b)),
            ]
        })
        .collect();
    let mut out = String::new();
    writeln!(out, "{}", grid(&header, &body).trim_end()).expect("write to string");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, kind: QuestionKind, answer: &str, class: Option<&str>, known: bool, category: &str) -> QaSample {
        QaSample {
            sample_id: id.into(),
            case_id: "c".into(),
            patient_id: "p".into(),
            question: "q".into(),
            answer: answer.into(),
            kind,
            closed_class: class.map(str::to_string),
            category: category.into(),
            known,
        }
    }

    fn preds() -> Vec<Prediction> {
        let p = |s: QaSample, pred: &str| Prediction {
            sample: s,
            prediction: pred.into(),
            log_score: -1.0,
        };
        vec![
            p(sample("a", QuestionKind::Closed, "Yes.", Some("Yes"), true, "healthy"), "Yes."),
            p(sample("b", QuestionKind::Closed, "No.", Some("No"), false, "cyst"), "Yes."),
            p(sample("c", QuestionKind::Open, "A lesion.", None, true, "tumor"), "A lesion."),
        ]
    }

    #[test]
    fn groups_partition_the_samples() {
        let vocab = vec!["Yes".to_string(), "No".to_string()];
        let r = build_report(&preds(), &vocab, &[&StubJudge], &SimpleTokenizer, Grouping::ALL).unwrap();
        assert_eq!(r.n_samples, 3);
        for (a, b) in [("known", "unknown"), ("healthy", "unhealthy"), ("closed", "open")] {
            assert_eq!(r.groups[a].n_samples + r.groups[b].n_samples, 3);
        }
        assert_eq!(r.closed.unwrap().acc, 0.5);
        assert_eq!(r.nli["stub"].entailment_ratio, 1.0);
        assert!(r.groups["open"].closed.is_none());
    }

    #[test]
    fn report_json_round_trip() {
        let vocab = vec!["Yes".to_string(), "No".to_string()];
        let r = build_report(&preds(), &vocab, &[&StubJudge], &SimpleTokenizer, Grouping::ALL).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn tables_have_one_line_per_row() {
        let vocab = vec!["Yes".to_string(), "No".to_string()];
        let r = build_report(&preds(), &vocab, &[&StubJudge], &SimpleTokenizer, Grouping::ALL).unwrap();
        let t1 = render_table1(&[("a".into(), &r), ("b".into(), &r)]);
        assert_eq!(t1.lines().count(), 4);
        assert!(t1.starts_with("| Method"));
        let t2 = render_table2(&r, &r);
        assert_eq!(t2.lines().count(), 2 + 1 + r.groups.len());
    }
}
