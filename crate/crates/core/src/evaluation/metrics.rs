//! Closed-question classification scores and n-gram generation metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{QaSample, QuestionKind};
use crate::error::{Error, Result};

/// Tokenization shared by every open-answer metric.
pub trait EvalTokenizer: Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on every non-alphanumeric character; punctuation
/// is dropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct SimpleTokenizer;

impl EvalTokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }
}

/// Lowercase, trim, strip trailing punctuation, trim again.
pub fn normalize_answer(text: &str) -> String {
    text.trim()
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .trim()
        .to_string()
}

pub const UNMATCHED: &str = "unmatched";

/// Maps a prediction onto the class vocabulary, or [`UNMATCHED`].
pub fn match_class(prediction: &str, vocabulary: &[String]) -> String {
    let p = normalize_answer(prediction);
    vocabulary
        .iter()
        .find(|c| normalize_answer(c) == p)
        .cloned()
        .unwrap_or_else(|| UNMATCHED.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedMetrics {
    pub acc: f64,
    pub f1_macro: f64,
    pub n: usize,
}

pub fn closed_metrics(pairs: &[(&str, &QaSample)], vocabulary: &[String]) -> Result<ClosedMetrics> {
    if pairs.is_empty() {
        return Err(Error::NoClosedSamples);
    }
    let mut labelled = Vec::with_capacity(pairs.len());
    for (pred, sample) in pairs {
        let gold = match (&sample.kind, &sample.closed_class) {
            (QuestionKind::Closed, Some(c)) => c.clone(),
            _ => {
                return Err(Error::SchemaViolation(format!(
                    "sample {} is not a closed question",
                    sample.sample_id
                )))
            }
        };
        labelled.push((match_class(pred, vocabulary), gold));
    }
    let correct = labelled.iter().filter(|(p, g)| p == g).count();
    let classes: HashSet<&String> = labelled.iter().map(|(_, g)| g).collect();
    let mut f1_sum = 0.0;
    for c in &classes {
        let tp = labelled.iter().filter(|(p, g)| p == *c && g == *c).count() as f64;
        let fp = labelled.iter().filter(|(p, g)| p == *c && g != *c).count() as f64;
        let fn_ = labelled.iter().filter(|(p, g)| p != *c && g == *c).count() as f64;
        f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    Ok(ClosedMetrics {
        acc: correct as f64 / labelled.len() as f64,
        f1_macro: f1_sum / classes.len() as f64,
        n: labelled.len(),
    })
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn tokenize_corpus(tok: &dyn EvalTokenizer, texts: &[&str]) -> Vec<Vec<String>> {
    texts.iter().map(|t| tok.tokenize(t)).collect()
}

fn check_corpus(candidates: &[&str], references: &[&str]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU-1..4 with clipped counts, no smoothing, and brevity penalty
/// `1` if `c > r` else `exp(1 - r/c)`.
pub fn bleu(candidates: &[&str], references: &[&str], tok: &dyn EvalTokenizer) -> Result<[f64; 4]> {
    check_corpus(candidates, references)?;
    let cands = tokenize_corpus(tok, candidates);
    let refs = tokenize_corpus(tok, references);
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    for (c, r) in cands.iter().zip(&refs) {
        for n in 1..=4 {
            let cn = ngrams(c, n);
            let rn = ngrams(r, n);
            for (g, &count) in &cn {
                matched[n - 1] += count.min(rn.get(g).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for k in 0..4 {
        if matched[k] == 0 {
            // zero precision at this order zeroes every higher order too
            break;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        out[k] = bp * (log_sum / (k + 1) as f64).exp();
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean sentence-level ROUGE-L F-score.
pub fn rouge_l(candidates: &[&str], references: &[&str], tok: &dyn EvalTokenizer) -> Result<f64> {
    check_corpus(candidates, references)?;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut total = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (tok.tokenize(c), tok.tokenize(r));
        let l = lcs(&c, &r) as f64;
        if l > 0.0 {
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            total += (1.0 + b2) * p * rec / (rec + b2 * p);
        }
    }
    Ok(total / candidates.len() as f64)
}

/// CIDEr with one reference per candidate: TF-IDF cosine per n-gram order
/// 1..4, averaged over orders and over the corpus, times ten. Document
/// frequencies come from the references; `idf = ln(N / max(1, df))`.
pub fn cider(candidates: &[&str], references: &[&str], tok: &dyn EvalTokenizer) -> Result<f64> {
    check_corpus(candidates, references)?;
    let cands = tokenize_corpus(tok, candidates);
    let refs = tokenize_corpus(tok, references);
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let ref_grams: Vec<HashMap<&[String], usize>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for grams in &ref_grams {
            for g in grams.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (c, rg) in cands.iter().zip(&ref_grams) {
            let cg = ngrams(c, n);
            let vc: HashMap<&[String], f64> = cg.iter().map(|(g, &k)| (*g, k as f64 * idf(g))).collect();
            let vr: HashMap<&[String], f64> = rg.iter().map(|(g, &k)| (*g, k as f64 * idf(g))).collect();
            let norm_c = vc.values().map(|v| v * v).sum::<f64>().sqrt();
            let norm_r = vr.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm_c > 0.0 && norm_r > 0.0 {
                let dot: f64 = vc.iter().map(|(g, v)| v * vr.get(g).copied().unwrap_or(0.0)).sum();
                total += dot / (norm_c * norm_r);
            }
        }
    }
    Ok(10.0 * total / (4.0 * cands.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n: usize,
}

pub fn open_metrics(candidates: &[&str], references: &[&str], tok: &dyn EvalTokenizer) -> Result<OpenMetrics> {
    let [bleu1, bleu2, bleu3, bleu4] = bleu(candidates, references, tok)?;
    Ok(OpenMetrics {
        bleu1,
        bleu2,
        bleu3,
        bleu4,
        rouge_l: rouge_l(candidates, references, tok)?,
        cider: cider(candidates, references, tok)?,
        n: candidates.len(),
    })
}
