use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{IngestError, PacketCorpus};

/// Disjoint train/test partition of a corpus. The test side is evaluated
/// in consecutive groups of `group_size` packets.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: PacketCorpus,
    pub test: PacketCorpus,
    pub group_size: usize,
}

impl CorpusSplit {
    /// Wraps an already separate test corpus (train side empty).
    pub fn test_only(test: PacketCorpus, group_size: usize) -> Self {
        Self { train: PacketCorpus::default(), test, group_size: group_size.max(1) }
    }

    /// Test groups in order; the last may be short.
    pub fn groups(&self) -> Vec<PacketCorpus> {
        let packets = self.test.packets();
        (0..packets.len())
            .step_by(self.group_size)
            .enumerate()
            .map(|(g, start)| {
                let end = (start + self.group_size).min(packets.len());
                let idx: Vec<usize> = (start..end).collect();
                self.test.select(&idx, format!("{} group {}", self.test.source, g + 1))
            })
            .collect()
    }
}

/// Draws `test_count` packets for testing, the rest for training.
///
/// The selection is a seeded shuffle; both sides keep their original corpus
/// order, so groups are contiguous runs of test packets in file order.
pub fn split_corpus(
    corpus: &PacketCorpus,
    test_count: usize,
    group_size: usize,
    seed: u64,
) -> Result<CorpusSplit, IngestError> {
    if test_count > corpus.len() {
        return Err(IngestError::InsufficientPackets { requested: test_count, available: corpus.len() });
    }
    if group_size == 0 {
        return Err(IngestError::InvalidArgument("group size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at_mut(test_count);
    test.sort_unstable();
    train.sort_unstable();
    Ok(CorpusSplit {
        train: corpus.select(train, format!("{} [train]", corpus.source)),
        test: corpus.select(test, format!("{} [test]", corpus.source)),
        group_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthHistogram {
    /// `(bin start, count)`, ascending by bin.
    pub bins: Vec<(usize, usize)>,
    pub mean: f64,
}

/// Packet-length histogram with bins `[k·w, (k+1)·w)`.
pub fn length_histogram(corpus: &PacketCorpus, bin_width: usize) -> Result<LengthHistogram, IngestError> {
    if bin_width == 0 {
        return Err(IngestError::InvalidArgument("bin width must be at least 1".into()));
    }
    let mut bins = BTreeMap::new();
    for p in corpus.packets() {
        *bins.entry(p.len() / bin_width * bin_width).or_insert(0usize) += 1;
    }
    let mean = if corpus.is_empty() { 0.0 } else { corpus.total_bytes() as f64 / corpus.len() as f64 };
    Ok(LengthHistogram { bins: bins.into_iter().collect(), mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(n: usize) -> PacketCorpus {
        PacketCorpus::new((0..n).map(|i| vec![(i % 251) as u8; 1 + i % 7]).collect(), "c").unwrap()
    }

    #[test]
    fn ten_groups_of_256() {
        let c = corpus_of(3000);
        let s = split_corpus(&c, 2560, 256, 1).unwrap();
        let groups = s.groups();
        assert_eq!(groups.len(), 10);
        assert!(groups.iter().all(|g| g.len() == 256));
        assert_eq!(s.train.len(), 440);
    }

    #[test]
    fn short_last_group() {
        let s = split_corpus(&corpus_of(100), 70, 32, 3).unwrap();
        let sizes: Vec<usize> = s.groups().iter().map(PacketCorpus::len).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
    }

    #[test]
    fn zero_test_count() {
        let c = corpus_of(10);
        let s = split_corpus(&c, 0, 256, 0).unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.train.packets(), c.packets());
        assert!(s.groups().is_empty());
    }

    #[test]
    fn deterministic_and_disjoint() {
        let c = corpus_of(500);
        let a = split_corpus(&c, 100, 10, 42).unwrap();
        let b = split_corpus(&c, 100, 10, 42).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train, b.train);
        let other = split_corpus(&c, 100, 10, 43).unwrap();
        assert_ne!(a.test, other.test);
        assert_eq!(a.train.len() + a.test.len(), c.len());
    }

    #[test]
    fn insufficient_packets() {
        assert!(matches!(
            split_corpus(&corpus_of(5), 6, 2, 0),
            Err(IngestError::InsufficientPackets { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn histogram_arithmetic() {
        let c = PacketCorpus::new(vec![vec![0; 10], vec![0; 10], vec![0; 300]], "h").unwrap();
        let h = length_histogram(&c, 100).unwrap();
        assert_eq!(h.bins, vec![(0, 2), (300, 1)]);
        assert!((h.mean - 106.666_666_7).abs() < 1e-6);
        assert_eq!(h.bins.iter().map(|b| b.1).sum::<usize>(), 3);

        let empty = length_histogram(&PacketCorpus::default(), 10).unwrap();
        assert!(empty.bins.is_empty());
    }
}
