use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::QaSample;
use crate::error::{Error, Result};

pub const DEFAULT_RATIO: [u32; 3] = [7, 1, 2];
const MIN_PATIENTS: usize = 10;

/// Train/validation/test sample ids. No patient appears in two lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Patients per split by largest remainder: floor every quota, then hand
/// the leftover patients to the largest fractional parts (earlier split on
/// ties). Each count is within one patient of its exact quota.
pub fn patient_counts(patients: usize, ratio: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratio.iter().map(|&r| u64::from(r)).sum();
    assert!(total > 0, "ratio must not be all zero");
    let mut counts = [0usize; 3];
    let mut remainders = [(0u64, 0usize); 3];
    for (i, &r) in ratio.iter().enumerate() {
        let scaled = patients as u64 * u64::from(r);
        counts[i] = (scaled / total) as usize;
        remainders[i] = (scaled % total, i);
    }
    let leftover = patients - counts.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles the distinct patients with `seed`, cuts them by
/// [`patient_counts`], and carries every sample along with its patient.
/// Sample order within each split follows the input order.
pub fn split_patientwise(samples: &[QaSample], ratio: [u32; 3], seed: u64) -> Result<DatasetSplit> {
    let mut patients: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < MIN_PATIENTS {
        return Err(Error::TooFewPatients {
            found: patients.len(),
            required: MIN_PATIENTS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let [n_train, n_val, _] = patient_counts(patients.len(), ratio);
    let assignment: HashMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (p, bucket)
        })
        .collect();

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for s in samples {
        let list = match assignment[s.patient_id.as_str()] {
            0 => &mut split.train,
            1 => &mut split.val,
            _ => &mut split.test,
        };
        list.push(s.sample_id.clone());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuestionKind;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn samples(per_patient: &[usize]) -> Vec<QaSample> {
        let mut out = Vec::new();
        for (p, &n) in per_patient.iter().enumerate() {
            for k in 0..n {
                out.push(QaSample {
                    sample_id: format!("p{p}_s{k}"),
                    case_id: format!("c{p}"),
                    patient_id: format!("p{p}"),
                    question: "q".into(),
                    answer: "a".into(),
                    kind: QuestionKind::Open,
                    closed_class: None,
                    category: "healthy".into(),
                    known: true,
                });
            }
        }
        out
    }

    fn patients_of(ids: &[String]) -> HashSet<String> {
        ids.iter().map(|id| id.split('_').next().unwrap().to_string()).collect()
    }

    #[test]
    fn ten_patients_split_seven_one_two() {
        let split = split_patientwise(&samples(&[1; 10]), DEFAULT_RATIO, 0).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (7, 1, 2));
    }

    #[test]
    fn unequal_patients_never_overlap() {
        let counts: Vec<usize> = (0..20).map(|i| 1 + i % 4).collect();
        let split = split_patientwise(&samples(&counts), DEFAULT_RATIO, 3).unwrap();
        let (a, b, c) = (patients_of(&split.train), patients_of(&split.val), patients_of(&split.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(split.total(), counts.iter().sum::<usize>());
    }

    #[test]
    fn too_few_patients() {
        let err = split_patientwise(&samples(&[2; 9]), DEFAULT_RATIO, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewPatients { found: 9, .. }));
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(patient_counts(10, DEFAULT_RATIO), [7, 1, 2]);
        assert_eq!(patient_counts(440, DEFAULT_RATIO), [308, 44, 88]);
        // 11 * (0.7, 0.1, 0.2) = (7.7, 1.1, 2.2): the .7 remainder wins.
        assert_eq!(patient_counts(11, DEFAULT_RATIO), [8, 1, 2]);
        assert_eq!(patient_counts(13, DEFAULT_RATIO), [9, 1, 3]);
    }

    proptest! {
        #[test]
        fn counts_within_one_of_quota(n in 0usize..2000, a in 1u32..10, b in 0u32..10, c in 0u32..10) {
            let counts = patient_counts(n, [a, b, c]);
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            let total = f64::from(a + b + c);
            for (count, r) in counts.iter().zip([a, b, c]) {
                let quota = n as f64 * f64::from(r) / total;
                prop_assert!((*count as f64 - quota).abs() < 1.0 + 1e-9);
            }
        }
    }
}
