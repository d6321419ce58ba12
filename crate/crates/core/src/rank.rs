//! Symbol ↔ rank transform under a model distribution.
//!
//! Symbols are totally ordered by probability (descending), ties by symbol id
//! (ascending). Rank 0 is the most probable symbol.

use std::cmp::Ordering;

use crate::ingest::FramedSequence;
use crate::model::{forward_trace, with_start, IncrementalDecoder, ModelError, ModelParams};

/// Ranks of one frame's predicted symbols (real bytes plus the end marker).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RankSequence {
    pub ranks: Vec<u16>,
}

impl RankSequence {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RankError {
    #[error("rank {rank} is outside the {vocab}-symbol alphabet")]
    RankOutOfRange { rank: u16, vocab: usize },
    #[error("{ranks} ranks supplied for a frame of {valid_len} valid symbols")]
    LengthMismatch { ranks: usize, valid_len: usize },
    #[error("frame of {valid_len} valid symbols does not fit frame length {len}")]
    FrameTooLong { valid_len: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of `a` relative to `b` in the rank order.
fn order(probs: &[f32], a: usize, b: usize) -> Ordering {
    probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
}

pub fn rank_of(probs: &[f32], symbol: u16) -> u16 {
    let s = symbol as usize;
    assert!(s < probs.len(), "symbol {symbol} outside distribution of {}", probs.len());
    (0..probs.len()).filter(|&c| order(probs, c, s) == Ordering::Less).count() as u16
}

pub fn symbol_at_rank(probs: &[f32], rank: u16) -> u16 {
    let r = rank as usize;
    assert!(r < probs.len(), "rank {rank} outside distribution of {}", probs.len());
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    let (_, nth, _) = ids.select_nth_unstable_by(r, |&a, &b| order(probs, a, b));
    *nth as u16
}

/// Ranks every valid symbol of `frame` with one causal forward pass.
pub fn encode_frame(params: &ModelParams, frame: &FramedSequence) -> Result<RankSequence, RankError> {
    let valid = frame.valid();
    if valid.is_empty() {
        return Ok(RankSequence::default());
    }
    if valid.len() > params.config.context_len {
        return Err(RankError::FrameTooLong { valid_len: valid.len(), len: params.config.context_len });
    }
    let trace = forward_trace(params, &with_start(&valid[..valid.len() - 1]))?;
    let v = params.config.vocab;
    let ranks = valid
        .iter()
        .enumerate()
        .map(|(i, &s)| rank_of(&trace.probs[i * v..(i + 1) * v], s))
        .collect();
    Ok(RankSequence { ranks })
}

/// Replays the model over already decoded symbols and maps each rank back to
/// a symbol. The result is padded to `len`.
pub fn decode_frame(params: &ModelParams, ranks: &[u16], len: usize) -> Result<FramedSequence, RankError> {
    if ranks.len() > len || len > params.config.context_len {
        return Err(RankError::FrameTooLong { valid_len: ranks.len(), len });
    }
    let v = params.config.vocab;
    let mut symbols = Vec::with_capacity(ranks.len());
    let mut dec = IncrementalDecoder::new(params);
    let mut input = crate::PAD;
    for &r in ranks {
        if r as usize >= v {
            return Err(RankError::RankOutOfRange { rank: r, vocab: v });
        }
        let probs = dec.push(input)?;
        input = symbol_at_rank(&probs, r);
        symbols.push(input);
    }
    Ok(FramedSequence::from_symbols(&symbols, len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::frame;
    use crate::model::{next_distribution, ModelConfig};
    use crate::{END_MARKER, VOCAB};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference order: a stable sort on probability alone keeps ids ascending among ties.
    fn oracle_order(probs: &[f32]) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        ids
    }

    fn random_dist(rng: &mut ChaCha8Rng) -> Vec<f32> {
        match rng.gen_range(0..4) {
            // a handful of distinct levels: many exact ties
            0 => {
                let levels: Vec<f32> = (0..rng.gen_range(1..5)).map(|_| rng.gen::<f32>()).collect();
                (0..VOCAB).map(|_| levels[rng.gen_range(0..levels.len())]).collect()
            }
            1 => vec![1.0 / VOCAB as f32; VOCAB],
            // one-hot with zeros elsewhere
            2 => {
                let mut p = vec![0.0; VOCAB];
                p[rng.gen_range(0..VOCAB)] = 1.0;
                p
            }
            _ => {
                let raw: Vec<f32> = (0..VOCAB).map(|_| rng.gen::<f32>().powi(4)).collect();
                let s: f32 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            }
        }
    }

    #[test]
    fn spec_examples() {
        let p = [0.7, 0.2, 0.1];
        assert_eq!(rank_of(&p, 1), 1);
        assert_eq!(symbol_at_rank(&p, 0), 0);
        let u = vec![1.0 / 258.0; 258];
        for k in 0..258u16 {
            assert_eq!(rank_of(&u, k), k);
            assert_eq!(symbol_at_rank(&u, k), k);
        }
    }

    #[test]
    fn matches_stable_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = random_dist(&mut rng);
            let ord = oracle_order(&p);
            for (r, &s) in ord.iter().enumerate() {
                assert_eq!(rank_of(&p, s as u16) as usize, r);
                assert_eq!(symbol_at_rank(&p, r as u16) as usize, s);
            }
        }
    }

    #[test]
    fn bijection_over_many_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2_000 {
            let p = random_dist(&mut rng);
            let mut seen = vec![false; VOCAB];
            for s in 0..VOCAB as u16 {
                let r = rank_of(&p, s);
                assert!(!seen[r as usize]);
                seen[r as usize] = true;
                assert_eq!(symbol_at_rank(&p, r), s);
            }
        }
    }

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::custom(2, 1, 8, Some(16)).with_context(32), seed).unwrap()
    }

    #[test]
    fn encode_matches_per_position_distributions() {
        let p = model(1);
        let f = &frame(&[10, 20, 30, 40], 32)[0];
        let ranks = encode_frame(&p, f).unwrap();
        assert_eq!(ranks.len(), 5);
        for i in 0..5 {
            let d = next_distribution(&p, &f.symbols[..i]).unwrap();
            assert_eq!(ranks.ranks[i], rank_of(&d.probs, f.symbols[i]));
        }
    }

    #[test]
    fn zero_ranks_follow_the_greedy_chain() {
        let p = model(2);
        let out = decode_frame(&p, &[0; 6], 32).unwrap();
        let mut ctx = Vec::new();
        for i in 0..6 {
            let d = next_distribution(&p, &ctx).unwrap();
            assert_eq!(out.symbols[i], d.argmax());
            ctx.push(d.argmax());
        }
        assert_eq!(out.valid_len, 6);
        assert!(out.symbols[6..].iter().all(|&s| s == crate::PAD));
    }

    #[test]
    fn out_of_range_rank() {
        assert!(matches!(decode_frame(&model(3), &[258], 32), Err(RankError::RankOutOfRange { rank: 258, .. })));
    }

    #[test]
    fn frame_too_long_for_model() {
        let p = model(4);
        let f = FramedSequence::from_symbols(&[1; 40], 40);
        assert!(matches!(encode_frame(&p, &f), Err(RankError::FrameTooLong { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frame_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..70), seed in 0u64..4) {
            let p = model(seed);
            for f in frame(&bytes, 32) {
                let ranks = encode_frame(&p, &f).unwrap();
                prop_assert_eq!(ranks.len(), f.valid_len);
                let back = decode_frame(&p, &ranks.ranks, 32).unwrap();
                prop_assert_eq!(&back, &f);
            }
        }

        #[test]
        fn ranks_are_a_permutation(p in proptest::collection::vec(0.0f32..1.0, 1..300)) {
            let mut ranks: Vec<u16> = (0..p.len() as u16).map(|s| rank_of(&p, s)).collect();
            ranks.sort_unstable();
            prop_assert!(ranks.iter().enumerate().all(|(i, &r)| r as usize == i));
        }
    }

    #[test]
    fn marker_is_ranked() {
        let p = model(5);
        let f = &frame(&[1, 2], 32)[0];
        assert_eq!(f.symbols[2], END_MARKER);
        assert_eq!(encode_frame(&p, f).unwrap().len(), 3);
    }
}
