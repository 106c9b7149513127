//! JSON manifest ingestion.
//!
//! ```json
//! {
//!   "class_vocabulary": ["Yes", "No", "..."],
//!   "cases": [{
//!     "case_id": "c1",
//!     "patient_id": "p1",
//!     "images": {"original": "images/c1_o.png", "anomaly": "...", "reconstruction": "..."},
//!     "qa": [{"sample_id": "s1", "question": "...", "answer": "...", "kind": "closed",
//!             "closed_class": "Yes", "category": "healthy", "known": true}]
//!   }]
//! }
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, ImageTriple, QaSample, QuestionKind};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_vocabulary: Vec<String>,
    cases: Vec<ManifestCase>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCase {
    case_id: String,
    patient_id: String,
    images: ManifestImages,
    qa: Vec<ManifestQa>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImages {
    original: PathBuf,
    anomaly: PathBuf,
    reconstruction: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestQa {
    sample_id: String,
    question: String,
    answer: String,
    kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    closed_class: Option<String>,
    category: String,
    known: bool,
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    let mut triples = Vec::with_capacity(manifest.cases.len());
    let mut samples = Vec::new();
    for case in manifest.cases {
        let load = |p: &Path| Image::load(&root.join(p));
        triples.push(ImageTriple::new(
            case.case_id.clone(),
            load(&case.images.original)?,
            load(&case.images.anomaly)?,
            load(&case.images.reconstruction)?,
        )?);
        samples.extend(case.qa.into_iter().map(|qa| QaSample {
            sample_id: qa.sample_id,
            case_id: case.case_id.clone(),
            patient_id: case.patient_id.clone(),
            question: qa.question,
            answer: qa.answer,
            kind: qa.kind,
            closed_class: qa.closed_class,
            category: qa.category,
            known: qa.known,
        }));
    }
    let dataset = Dataset::new(triples, samples, manifest.class_vocabulary)?;
    log::info!("loaded {}: {}", path.display(), dataset.summary());
    Ok(dataset)
}

/// Writes `dir/manifest.json` plus 16-bit PNGs under `dir/images/`.
/// Returns the manifest path.
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut cases = Vec::with_capacity(dataset.triples().len());
    for (triple, info) in dataset.triples().iter().zip(dataset.cases()) {
        let rel = |suffix: &str| PathBuf::from("images").join(format!("{}_{suffix}.png", triple.case_id));
        let images = ManifestImages {
            original: rel("original"),
            anomaly: rel("anomaly"),
            reconstruction: rel("reconstruction"),
        };
        triple.original.save(&dir.join(&images.original))?;
        triple.anomaly_map.save(&dir.join(&images.anomaly))?;
        triple.reconstruction.save(&dir.join(&images.reconstruction))?;
        let qa = dataset
            .samples()
            .iter()
            .filter(|s| s.case_id == triple.case_id)
            .map(|s| ManifestQa {
                sample_id: s.sample_id.clone(),
                question: s.question.clone(),
                answer: s.answer.clone(),
                kind: s.kind,
                closed_class: s.closed_class.clone(),
                category: s.category.clone(),
                known: s.known,
            })
            .collect();
        cases.push(ManifestCase {
            case_id: triple.case_id.clone(),
            patient_id: info.patient_id,
            images,
            qa,
        });
    }
    let manifest = Manifest {
        class_vocabulary: dataset.class_vocabulary().to_vec(),
        cases,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
