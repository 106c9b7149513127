//! Desk-scale stand-in for real anomaly-detection outputs.
//!
//! Each case is a textured ellipse ("brain"). Unhealthy cases get a bright
//! disc whose position and size depend on the category; the disc appears in
//! the original and in the anomaly map but never in the reconstruction.
//! Healthy anomaly maps are all zero.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_healthy_category, Dataset, Image, ImageTriple, QaSample, QuestionKind};
use crate::error::{Error, Result};

pub const SEVERITY_CLASSES: [&str; 4] = [
    "Clinically irrelevant",
    "Potentially clinically relevant",
    "Clinically relevant",
    "Not applicable",
];

const REGIONS: [&str; 8] = [
    "right frontal lobe",
    "right parietal lobe",
    "right occipital lobe",
    "posterior fossa",
    "left occipital lobe",
    "left parietal lobe",
    "left frontal lobe",
    "anterior midline",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionTemplate {
    IsNormal,
    DescribeCondition,
    Severity,
    MapReflectsDisease,
    DescribeDifferences,
}

impl QuestionTemplate {
    pub const ALL: [QuestionTemplate; 5] = [
        QuestionTemplate::IsNormal,
        QuestionTemplate::DescribeCondition,
        QuestionTemplate::Severity,
        QuestionTemplate::MapReflectsDisease,
        QuestionTemplate::DescribeDifferences,
    ];

    pub fn question(self) -> &'static str {
        match self {
            QuestionTemplate::IsNormal => "Is the case normal?",
            QuestionTemplate::DescribeCondition => "Please describe the condition of the brain.",
            QuestionTemplate::Severity => "Can you comment on the severity of the pathology?",
            QuestionTemplate::MapReflectsDisease => {
                "Do the anomaly maps accurately reflect the selected disease?"
            }
            QuestionTemplate::DescribeDifferences => {
                "Can you describe the differences highlighted between anomaly maps and the original image?"
            }
        }
    }

    pub fn kind(self) -> QuestionKind {
        match self {
            QuestionTemplate::IsNormal | QuestionTemplate::DescribeCondition | QuestionTemplate::Severity => {
                QuestionKind::Closed
            }
            _ => QuestionKind::Open,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub image_size: (usize, usize),
    /// Category labels; `healthy` marks normal cases.
    pub categories: Vec<String>,
    pub seed: u64,
    /// Exact number of healthy cases; the rest cycle through the anomaly
    /// categories. `None` cycles through `categories` in order.
    pub healthy_cases: Option<usize>,
    /// Categories flagged as open-set (`known = false`).
    pub unknown_categories: Vec<String>,
    pub cases_per_patient: usize,
    /// Keep the lesion out of the original image too, so the class is
    /// visible only in the anomaly map.
    pub signal_only_in_anomaly: bool,
    /// Use one brain texture for every case, so healthy anatomy carries no
    /// case identity.
    pub shared_anatomy: bool,
    pub templates: Vec<QuestionTemplate>,
}

impl SyntheticConfig {
    pub fn new(n_patients: usize, image_size: (usize, usize), categories: &[&str], seed: u64) -> Self {
        Self {
            n_patients,
            image_size,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            seed,
            healthy_cases: None,
            unknown_categories: Vec::new(),
            cases_per_patient: 1,
            signal_only_in_anomaly: false,
            shared_anatomy: false,
            templates: QuestionTemplate::ALL.to_vec(),
        }
    }

    fn anomaly_categories(&self) -> Vec<&str> {
        self.categories
            .iter()
            .map(String::as_str)
            .filter(|c| !is_healthy_category(c))
            .collect()
    }

    /// Every class string the templates can produce.
    pub fn class_vocabulary(&self) -> Vec<String> {
        let mut vocab = vec!["Yes".to_string(), "No".to_string()];
        let mut labels: Vec<&str> = self.categories.iter().map(String::as_str).collect();
        if self.healthy_cases.is_some() && !labels.iter().any(|c| is_healthy_category(c)) {
            labels.insert(0, "healthy");
        }
        vocab.extend(labels.iter().map(|c| format!("It's {c}")));
        vocab.extend(SEVERITY_CLASSES.iter().map(|s| s.to_string()));
        vocab
    }
}

/// Convenience wrapper with default options.
pub fn generate_synthetic_dataset(
    n_patients: usize,
    image_size: (usize, usize),
    categories: &[&str],
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic(&SyntheticConfig::new(n_patients, image_size, categories, seed))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let (h, w) = cfg.image_size;
    if cfg.n_patients == 0 {
        return Err(Error::InvalidConfig("need at least one patient".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!("image size {h}x{w} is below 8x8")));
    }
    if cfg.categories.is_empty() || cfg.cases_per_patient == 0 {
        return Err(Error::InvalidConfig("need categories and at least one case per patient".into()));
    }
    let anomalies = cfg.anomaly_categories();
    let n_cases = cfg.n_patients * cfg.cases_per_patient;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let labels: Vec<String> = match cfg.healthy_cases {
        Some(healthy) => {
            if healthy > n_cases || (healthy < n_cases && anomalies.is_empty()) {
                return Err(Error::InvalidConfig("healthy case count does not fit".into()));
            }
            let mut labels: Vec<String> = (0..n_cases)
                .map(|i| {
                    if i < healthy {
                        "healthy".to_string()
                    } else {
                        anomalies[(i - healthy) % anomalies.len()].to_string()
                    }
                })
                .collect();
            labels.shuffle(&mut rng);
            labels
        }
        None => (0..n_cases).map(|i| cfg.categories[i % cfg.categories.len()].clone()).collect(),
    };

    let shared = cfg.shared_anatomy.then(|| brain(h, w, &mut rng));
    let mut triples = Vec::with_capacity(n_cases);
    let mut samples = Vec::new();
    for (case_idx, category) in labels.iter().enumerate() {
        let case_id = format!("case{case_idx:04}");
        let patient_id = format!("patient{:04}", case_idx / cfg.cases_per_patient);
        let base = match &shared {
            Some(b) => b.clone(),
            None => brain(h, w, &mut rng),
        };
        let lesion = anomalies
            .iter()
            .position(|c| c == category)
            .map(|k| Lesion::for_category(k, anomalies.len(), h, w));
        let (original, anomaly) = match &lesion {
            Some(l) => {
                let mask = l.mask(h, w);
                let original = if cfg.signal_only_in_anomaly {
                    base.clone()
                } else {
                    Image::from_fn(h, w, |y, x| {
                        (base.get(y, x, 0) + 0.4 * mask.get(y, x, 0)).min(1.0)
                    })
                };
                (original, mask)
            }
            None => (base.clone(), Image::zeros(h, w, 1)),
        };
        triples.push(ImageTriple::new(case_id.clone(), original, anomaly, base)?);

        let known = !cfg.unknown_categories.iter().any(|c| c == category);
        let region = lesion.as_ref().map(|l| l.region);
        for (q, template) in cfg.templates.iter().enumerate() {
            let (answer, closed_class) = answer_for(*template, category, lesion.as_ref().map(|l| l.index), region);
            samples.push(QaSample {
                sample_id: format!("{case_id}_q{q}"),
                case_id: case_id.clone(),
                patient_id: patient_id.clone(),
                question: template.question().to_string(),
                answer,
                kind: template.kind(),
                closed_class,
                category: category.clone(),
                known,
            });
        }
    }
    Dataset::new(triples, samples, cfg.class_vocabulary())
}

fn answer_for(
    template: QuestionTemplate,
    category: &str,
    anomaly_index: Option<usize>,
    region: Option<&str>,
) -> (String, Option<String>) {
    let healthy = anomaly_index.is_none();
    let closed = |class: String| (format!("{class}."), Some(class));
    match template {
        QuestionTemplate::IsNormal => closed(if healthy { "Yes" } else { "No" }.to_string()),
        QuestionTemplate::DescribeCondition => closed(format!("It's {category}")),
        QuestionTemplate::Severity => closed(
            match anomaly_index {
                None => SEVERITY_CLASSES[3],
                Some(k) => SEVERITY_CLASSES[k % 3],
            }
            .to_string(),
        ),
        QuestionTemplate::MapReflectsDisease => match region {
            Some(r) => (format!("Yes, the anomaly is marked in the {r}."), None),
            None => ("No anomaly is marked.".to_string(), None),
        },
        QuestionTemplate::DescribeDifferences => match region {
            Some(r) => (format!("A bright lesion is highlighted in the {r}."), None),
            None => ("No relevant differences are highlighted.".to_string(), None),
        },
    }
}

/// Smooth ellipse with a per-case texture, values in roughly [0, 0.6].
fn brain(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let freq: f64 = rng.random_range(2.0..4.0);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ry, rx) = (0.45 * h as f64, 0.38 * w as f64);
    Image::from_fn(h, w, |y, x| {
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        let r2 = dy * dy + dx * dx;
        if r2 > 1.0 {
            return 0.0;
        }
        let texture = 0.05 * (freq * (dx + dy) * PI + phase).sin();
        0.45 + texture - 0.1 * r2
    })
}

struct Lesion {
    index: usize,
    cy: f64,
    cx: f64,
    radius: f64,
    region: &'static str,
}

impl Lesion {
    fn for_category(index: usize, count: usize, h: usize, w: usize) -> Self {
        let angle = 2.0 * PI * index as f64 / count.max(1) as f64;
        let size = h.min(w) as f64;
        let radius = size * (0.12 + 0.04 * (index % 3) as f64);
        let region_slot = ((angle / (2.0 * PI)) * REGIONS.len() as f64).round() as usize % REGIONS.len();
        Self {
            index,
            cy: (h as f64 - 1.0) / 2.0 - 0.22 * h as f64 * angle.cos(),
            cx: (w as f64 - 1.0) / 2.0 + 0.2 * w as f64 * angle.sin(),
            radius: radius.max(1.5),
            region: REGIONS[region_slot],
        }
    }

    fn mask(&self, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            let d = ((y as f64 - self.cy).powi(2) + (x as f64 - self.cx).powi(2)).sqrt();
            if d <= self.radius {
                1.0
            } else {
                0.0
            }
        })
    }
}
