//! Dataset schema: image triples, question/answer records and the
//! containers that tie them together.

mod image;
mod manifest;
mod split;
mod synthetic;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::{luminance, Image};
pub use self::manifest::{load_manifest, save_manifest, MANIFEST_FILE};
pub use self::split::{patient_counts, split_patientwise, DatasetSplit, DEFAULT_RATIO};
pub use self::synthetic::{
    generate_synthetic_dataset, generate_synthetic, QuestionTemplate, SyntheticConfig,
    SEVERITY_CLASSES,
};

/// Which member of an image triple a tensor came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Anomaly,
    Reconstruction,
    ChannelFused,
}

impl Source {
    pub const TRIPLE: [Source; 3] = [Source::Original, Source::Anomaly, Source::Reconstruction];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Anomaly => "anomaly",
            Source::Reconstruction => "reconstruction",
            Source::ChannelFused => "channel_fused",
        }
    }
}

/// Original image, anomaly map and pseudo-healthy reconstruction of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriple {
    pub case_id: String,
    pub original: Image,
    pub anomaly_map: Image,
    pub reconstruction: Image,
}

impl ImageTriple {
    pub fn new(case_id: impl Into<String>, original: Image, anomaly_map: Image, reconstruction: Image) -> Result<Self> {
        let triple = Self {
            case_id: case_id.into(),
            original,
            anomaly_map,
            reconstruction,
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.original.dims();
        for source in [Source::Anomaly, Source::Reconstruction] {
            let other = self.image(source).dims();
            if other != dims {
                return Err(Error::ShapeMismatch(format!(
                    "case {}: {} is {:?} but original is {:?}",
                    self.case_id,
                    source.as_str(),
                    other,
                    dims
                )));
            }
        }
        for source in Source::TRIPLE {
            if !self.image(source).in_unit_range() {
                return Err(Error::SchemaViolation(format!(
                    "case {}: {} has pixels outside [0, 1]",
                    self.case_id,
                    source.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Panics on [`Source::ChannelFused`], which is not a member of the triple.
    pub fn image(&self, source: Source) -> &Image {
        match source {
            Source::Original => &self.original,
            Source::Anomaly => &self.anomaly_map,
            Source::Reconstruction => &self.reconstruction,
            Source::ChannelFused => panic!("a triple has no channel-fused member"),
        }
    }

    /// `(height, width, channels)` shared by all three images.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.original.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Closed,
    Open,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub case_id: String,
    pub patient_id: String,
    pub question: String,
    pub answer: String,
    pub kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_class: Option<String>,
    /// Anomaly category of the case, `healthy` for normal cases.
    pub category: String,
    /// `false` for open-set categories held out from training.
    pub known: bool,
}

impl QaSample {
    pub fn is_healthy(&self) -> bool {
        is_healthy_category(&self.category)
    }
}

pub fn is_healthy_category(category: &str) -> bool {
    category.eq_ignore_ascii_case("healthy")
}

/// Per-case facts derived from its QA records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub case_id: String,
    pub patient_id: String,
    pub category: String,
    pub known: bool,
}

/// Image triples plus their QA records and the closed-answer vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    triples: Vec<ImageTriple>,
    samples: Vec<QaSample>,
    class_vocabulary: Vec<String>,
    case_index: HashMap<String, usize>,
    sample_index: HashMap<String, usize>,
    case_patients: HashMap<String, String>,
}

impl Dataset {
    /// Validates the cross-record invariants: unique ids, resolvable cases,
    /// non-empty patient ids, and closed classes drawn from the vocabulary.
    pub fn new(
        triples: Vec<ImageTriple>,
        samples: Vec<QaSample>,
        class_vocabulary: Vec<String>,
    ) -> Result<Self> {
        let mut case_index = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            t.validate()?;
            if case_index.insert(t.case_id.clone(), i).is_some() {
                return Err(Error::SchemaViolation(format!("duplicate case_id {}", t.case_id)));
            }
        }
        let vocab: HashSet<&str> = class_vocabulary.iter().map(String::as_str).collect();
        let mut sample_index = HashMap::new();
        let mut case_patients: HashMap<String, String> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if sample_index.insert(s.sample_id.clone(), i).is_some() {
                return Err(Error::SchemaViolation(format!("duplicate sample_id {}", s.sample_id)));
            }
            if s.patient_id.trim().is_empty() {
                return Err(Error::SchemaViolation(format!("sample {} has an empty patient_id", s.sample_id)));
            }
            if !case_index.contains_key(&s.case_id) {
                return Err(Error::SchemaViolation(format!(
                    "sample {} references unknown case {}",
                    s.sample_id, s.case_id
                )));
            }
            match (&s.kind, &s.closed_class) {
                (QuestionKind::Closed, None) => {
                    return Err(Error::SchemaViolation(format!(
                        "closed sample {} has no closed_class",
                        s.sample_id
                    )))
                }
                (QuestionKind::Closed, Some(c)) if !vocab.contains(c.as_str()) => {
                    return Err(Error::ClassNotInVocabulary {
                        sample_id: s.sample_id.clone(),
                        class: c.clone(),
                    })
                }
                _ => {}
            }
            match case_patients.get(&s.case_id) {
                Some(p) if *p != s.patient_id => {
                    return Err(Error::SchemaViolation(format!(
                        "case {} is assigned to patients {} and {}",
                        s.case_id, p, s.patient_id
                    )))
                }
                Some(_) => {}
                None => {
                    case_patients.insert(s.case_id.clone(), s.patient_id.clone());
                }
            }
        }
        Ok(Self {
            triples,
            samples,
            class_vocabulary,
            case_index,
            sample_index,
            case_patients,
        })
    }

    pub fn triples(&self) -> &[ImageTriple] {
        &self.triples
    }

    pub fn samples(&self) -> &[QaSample] {
        &self.samples
    }

    pub fn class_vocabulary(&self) -> &[String] {
        &self.class_vocabulary
    }

    pub fn triple(&self, case_id: &str) -> Result<&ImageTriple> {
        self.case_index
            .get(case_id)
            .map(|&i| &self.triples[i])
            .ok_or_else(|| Error::UnknownCase(case_id.to_string()))
    }

    pub fn sample(&self, sample_id: &str) -> Result<&QaSample> {
        self.sample_index
            .get(sample_id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::UnknownSample(sample_id.to_string()))
    }

    /// Resolves a list of sample ids, preserving order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&QaSample>> {
        ids.iter().map(|id| self.sample(id)).collect()
    }

    /// Case metadata in triple order. Cases without QA records report the
    /// category `unlabeled`.
    pub fn cases(&self) -> Vec<CaseInfo> {
        let mut first: HashMap<&str, &QaSample> = HashMap::new();
        for s in &self.samples {
            first.entry(s.case_id.as_str()).or_insert(s);
        }
        self.triples
            .iter()
            .map(|t| match first.get(t.case_id.as_str()) {
                Some(s) => CaseInfo {
                    case_id: t.case_id.clone(),
                    patient_id: s.patient_id.clone(),
                    category: s.category.clone(),
                    known: s.known,
                },
                None => CaseInfo {
                    case_id: t.case_id.clone(),
                    patient_id: self.case_patients.get(&t.case_id).cloned().unwrap_or_default(),
                    category: "unlabeled".into(),
                    known: true,
                },
            })
            .collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let cases = self.cases();
        let healthy = cases.iter().filter(|c| is_healthy_category(&c.category)).count();
        let categories: BTreeSet<&str> = cases
            .iter()
            .filter(|c| !is_healthy_category(&c.category))
            .map(|c| c.category.as_str())
            .collect();
        let patients: BTreeSet<&str> = self.samples.iter().map(|s| s.patient_id.as_str()).collect();
        let closed = self.samples.iter().filter(|s| s.kind == QuestionKind::Closed).count();
        DatasetSummary {
            cases: cases.len(),
            patients: patients.len(),
            healthy_cases: healthy,
            unhealthy_cases: cases.len() - healthy,
            anomaly_categories: categories.len(),
            samples: self.samples.len(),
            closed_samples: closed,
            open_samples: self.samples.len() - closed,
            classes: self.class_vocabulary.len(),
        }
    }

    /// Returns a copy holding only the given samples (and every triple).
    pub fn with_samples(&self, samples: Vec<QaSample>) -> Result<Self> {
        Self::new(self.triples.clone(), samples, self.class_vocabulary.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub cases: usize,
    pub patients: usize,
    pub healthy_cases: usize,
    pub unhealthy_cases: usize,
    pub anomaly_categories: usize,
    pub samples: usize,
    pub closed_samples: usize,
    pub open_samples: usize,
    pub classes: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} cases from {} patients ({} healthy, {} unhealthy, {} anomaly categories); \
             {} QA samples ({} closed, {} open); {} answer classes",
            self.cases,
            self.patients,
            self.healthy_cases,
            self.unhealthy_cases,
            self.anomaly_categories,
            self.samples,
            self.closed_samples,
            self.open_samples,
            self.classes
        )
    }
}
