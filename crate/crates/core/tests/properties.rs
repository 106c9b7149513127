mod common;

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use anomaly_vqa::autograd::{log_softmax, Graph, Mask, ParamStore};
use anomaly_vqa::backbone::VisualFeatures;
use anomaly_vqa::data::{split_patientwise, Image, ImageTriple, QaSample, QuestionKind, Source, DEFAULT_RATIO};
use anomaly_vqa::decoder::{beam_search, Decoder, DecoderConfig};
use anomaly_vqa::fusion::{fuse_average, fuse_channel, fuse_concat, ProjectionHead};
use anomaly_vqa::nn::{glorot, TransformerBlock};
use anomaly_vqa::Matrix;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    glorot(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn feats(ms: &[Matrix]) -> Vec<VisualFeatures> {
    ms.iter()
        .zip(Source::TRIPLE)
        .map(|(m, source)| VisualFeatures {
            tokens: m.clone(),
            source,
        })
        .collect()
}

fn samples(patient_sizes: &[usize]) -> Vec<QaSample> {
    let mut out = Vec::new();
    for (p, &n) in patient_sizes.iter().enumerate() {
        for k in 0..n {
            out.push(QaSample {
                sample_id: format!("p{p}_{k}"),
                case_id: format!("c{p}"),
                patient_id: format!("p{p}"),
                question: "q".into(),
                answer: "a".into(),
                kind: QuestionKind::Open,
                closed_class: None,
                category: "x".into(),
                known: true,
            });
        }
    }
    out
}

/// Every sequence up to `max_len` tokens, closed by `eos` or by length.
fn enumerate_best(vocab: usize, max_len: usize, eos: usize, table: &HashMap<Vec<usize>, Vec<f64>>) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((seq, score)) = stack.pop() {
        let lp = &table[&seq];
        for t in 0..vocab {
            let mut next = seq.clone();
            next.push(t);
            let s = score + lp[t];
            if t == eos || next.len() == max_len {
                let better = best.as_ref().is_none_or(|(bs, bv)| s > *bv || (s == *bv && next < *bs));
                if better {
                    best = Some((next, s));
                }
            } else {
                stack.push((next, s));
            }
        }
    }
    best.unwrap()
}

fn random_table(vocab: usize, max_len: usize, seed: u64) -> HashMap<Vec<usize>, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in frontier {
            let logits = glorot(1, vocab, &mut rng).map(|v| 3.0 * v);
            table.insert(seq.clone(), log_softmax(logits.row(0)));
            for t in 0..vocab {
                let mut s: Vec<usize> = seq.clone();
                s.push(t);
                next.push(s);
            }
        }
        frontier = next;
    }
    table
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn average_ignores_order(seed in any::<u64>(), n in 1usize..6, d in 1usize..6) {
        let ms: Vec<Matrix> = (0..3).map(|i| matrix(n, d, seed.wrapping_add(i))).collect();
        let a = fuse_average(&feats(&ms)).unwrap().tokens;
        let b = fuse_average(&feats(&[ms[2].clone(), ms[0].clone(), ms[1].clone()])).unwrap().tokens;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.is_finite());
    }

    #[test]
    fn concat_depends_on_block_order(seed in any::<u64>(), n in 1usize..5, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = ProjectionHead::new(&mut store, "phi", 3 * d, 2 * d, d, &mut rng);
        let ms: Vec<Matrix> = (0..3).map(|i| matrix(n, d, seed.wrapping_add(10 + i))).collect();
        let a = fuse_concat(&store, &feats(&ms), &head).unwrap().tokens;
        let b = fuse_concat(&store, &feats(&[ms[1].clone(), ms[0].clone(), ms[2].clone()]), &head).unwrap().tokens;
        prop_assert_eq!(a.shape(), (n, d));
        prop_assert!(a.max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn dropping_the_anomaly_map_changes_every_strategy(seed in any::<u64>()) {
        let ms: Vec<Matrix> = (0..3).map(|i| matrix(4, 3, seed.wrapping_add(i))).collect();
        let with = fuse_average(&feats(&ms)).unwrap().tokens;
        let without = fuse_average(&[feats(&ms)[0].clone(), feats(&ms)[2].clone()]).unwrap().tokens;
        prop_assert!(with.max_abs_diff(&without) > 0.0);

        let img = |k: u64| {
            let m = matrix(1, 16, seed.wrapping_add(k));
            Image::new(4, 4, 1, m.data().iter().map(|v| 0.5 + 0.5 * v.tanh()).collect()).unwrap()
        };
        let triple = ImageTriple::new("c", img(1), img(2), img(3)).unwrap();
        let all: BTreeSet<Source> = Source::TRIPLE.into_iter().collect();
        let mut no_anomaly = all.clone();
        no_anomaly.remove(&Source::Anomaly);
        prop_assert_ne!(fuse_channel(&triple, &all).unwrap(), fuse_channel(&triple, &no_anomaly).unwrap());
    }

    #[test]
    fn split_is_disjoint_balanced_and_idempotent(
        sizes in prop::collection::vec(1usize..6, 10..60),
        seed in any::<u64>(),
    ) {
        let s = samples(&sizes);
        let split = split_patientwise(&s, DEFAULT_RATIO, seed).unwrap();
        prop_assert_eq!(&split, &split_patientwise(&s, DEFAULT_RATIO, seed).unwrap());
        let patient = |id: &String| id.split('_').next().unwrap().to_string();
        let sets: Vec<BTreeSet<String>> =
            [&split.train, &split.val, &split.test].iter().map(|ids| ids.iter().map(patient).collect()).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        for (set, r) in sets.iter().zip(DEFAULT_RATIO) {
            let quota = sizes.len() as f64 * r as f64 / 10.0;
            prop_assert!((set.len() as f64 - quota).abs() <= 1.0);
        }
        prop_assert_eq!(split.total(), s.len());
    }

    #[test]
    fn exhaustive_width_beam_equals_enumeration(
        seed in any::<u64>(),
        vocab in 2usize..6,
        max_len in 1usize..4,
        eos in 0usize..2,
    ) {
        let table = random_table(vocab, max_len, seed);
        let width = vocab.pow(max_len as u32);
        let hyp = beam_search(width, max_len, eos, |seq| table[seq].clone());
        let (tokens, score) = enumerate_best(vocab, max_len, eos, &table);
        prop_assert_eq!(hyp.tokens, tokens);
        prop_assert!((hyp.log_score - score).abs() < 1e-9);
    }

    #[test]
    fn raising_gold_logits_lowers_the_loss(seed in any::<u64>(), bump in 0.01f64..5.0) {
        let config = DecoderConfig { d_model: 8, blocks: 1, heads: 2, max_len: 6, max_prefix: 8, vocab_size: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &config, 4, &mut rng).unwrap();
        let visual = glorot(2, 4, &mut rng);
        let answer = [5usize, 5, 5];
        let loss = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let v = g.input(visual.clone());
            let p = dec.condition(&mut g, v, &[6]).unwrap();
            let l = dec.nll(&mut g, p, &answer).unwrap();
            g.value(l).item()
        };
        let before = loss(&store);
        let bias = dec.lm_head().bias;
        store.get_mut(bias).data_mut()[5] += bump;
        prop_assert!(loss(&store) < before);
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..9, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.input(glorot(n, 8, &mut rng).map(|v| v * scale));
        for mask in [Mask::None, Mask::Causal] {
            let (_, trace) = block.forward(&mut g, x, mask);
            for w in trace.weights {
                let m = g.value(w);
                for r in 0..m.rows() {
                    prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
