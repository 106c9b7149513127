//! Beam search over an arbitrary next-token log-probability function.
//!
//! Hypotheses are ranked by summed log-probability with no length
//! normalization. Equal scores are ordered by lexicographic token ids. A
//! hypothesis closes when it emits EOS; hypotheses still open after
//! `max_len` tokens are closed as they are.

use std::cmp::Ordering;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the closing EOS when one was emitted.
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

impl Hypothesis {
    /// Ranking order: higher score first, then smaller token sequence.
    pub fn rank(&self, other: &Self) -> Ordering {
        other
            .log_score
            .total_cmp(&self.log_score)
            .then_with(|| self.tokens.cmp(&other.tokens))
    }

    pub fn ends_with(&self, eos: usize) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

pub fn beam_search(
    width: usize,
    max_len: usize,
    eos: usize,
    mut log_probs: impl FnMut(&[usize]) -> Vec<f64>,
) -> Hypothesis {
    assert!(width >= 1, "beam width must be at least 1");
    let mut open = vec![Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
    }];
    let mut closed: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(open.len() * 8);
        for hyp in &open {
            for (token, lp) in log_probs(&hyp.tokens).into_iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                candidates.push(Hypothesis {
                    tokens,
                    log_score: hyp.log_score + lp,
                });
            }
        }
        candidates.sort_by(Hypothesis::rank);
        candidates.truncate(width);
        open.clear();
        for c in candidates {
            if c.ends_with(eos) {
                closed.push(c);
            } else {
                open.push(c);
            }
        }
        if open.is_empty() {
            break;
        }
        // extensions only lower the score, so a strictly better closed
        // hypothesis can no longer be overtaken
        let best_closed = closed.iter().map(|h| h.log_score).fold(f64::NEG_INFINITY, f64::max);
        if open.iter().all(|h| h.log_score < best_closed) {
            break;
        }
    }
    closed.extend(open);
    closed.sort_by(Hypothesis::rank);
    closed.into_iter().next().expect("at least one hypothesis")
}

/// Argmax decoding; identical to a beam of width one.
pub fn greedy_search(max_len: usize, eos: usize, log_probs: impl FnMut(&[usize]) -> Vec<f64>) -> Hypothesis {
    beam_search(1, max_len, eos, log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EOS: usize = 0;

    /// Next-token table keyed by the full history, fixed per seed.
    fn random_model(vocab: usize, seed: u64) -> impl Fn(&[usize]) -> Vec<f64> {
        move |seq: &[usize]| {
            let mut key = seed;
            for &t in seq {
                key = key.wrapping_mul(31).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
            crate::autograd::log_softmax(&logits)
        }
    }

    fn exhaustive(vocab: usize, max_len: usize, model: &dyn Fn(&[usize]) -> Vec<f64>) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((seq, score)) = stack.pop() {
            let lp = model(&seq);
            for t in 0..vocab {
                let mut next: Vec<usize> = seq.clone();
                next.push(t);
                let s = score + lp[t];
                if t == EOS || next.len() == max_len {
                    let h = Hypothesis {
                        tokens: next,
                        log_score: s,
                    };
                    if best.as_ref().is_none_or(|b| h.rank(b) == Ordering::Less) {
                        best = Some(h);
                    }
                } else {
                    stack.push((next, s));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn width_one_is_greedy() {
        let model = random_model(5, 9);
        let beam = beam_search(1, 4, EOS, &model);
        let mut seq = Vec::new();
        let mut score = 0.0;
        while seq.len() < 4 {
            let lp = model(&seq);
            let (t, v) = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            seq.push(t);
            score += v;
            if t == EOS {
                break;
            }
        }
        assert_eq!(beam.tokens, seq);
        assert_eq!(beam.log_score, score);
    }

    #[test]
    fn forced_chain_is_followed() {
        let chain = [3usize, 1, 2, EOS];
        let beam = beam_search(3, 8, EOS, |seq| {
            let mut lp = vec![f64::NEG_INFINITY; 4];
            lp[chain[seq.len()]] = 0.0;
            lp
        });
        assert_eq!(beam.tokens, chain);
        assert_eq!(beam.log_score, 0.0);
    }

    #[test]
    fn open_hypotheses_close_at_max_len() {
        let beam = beam_search(2, 3, EOS, |_| vec![f64::NEG_INFINITY, 0.0, -1.0]);
        assert_eq!(beam.tokens, vec![1, 1, 1]);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        let beam = beam_search(4, 2, EOS, |seq| {
            if seq.is_empty() {
                vec![f64::NEG_INFINITY, 0.5f64.ln(), 0.5f64.ln()]
            } else {
                vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
            }
        });
        assert_eq!(beam.tokens, vec![1, EOS]);
    }

    #[test]
    fn exhaustive_width_matches_enumeration() {
        for seed in 0..50 {
            let vocab = 2 + (seed as usize % 4);
            let max_len = 1 + (seed as usize % 4);
            let model = random_model(vocab, seed);
            let width = vocab.pow(max_len as u32);
            let beam = beam_search(width, max_len, EOS, &model);
            let oracle = exhaustive(vocab, max_len, &model);
            assert_eq!(beam.tokens, oracle.tokens, "seed {seed}");
            assert!((beam.log_score - oracle.log_score).abs() < 1e-12);
        }
    }
}
