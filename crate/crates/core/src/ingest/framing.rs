use crate::{END_MARKER, PAD};

/// A fixed-length symbol sequence holding one packet chunk.
///
/// `symbols[..valid_len]` are real bytes, optionally closed by the end
/// marker; the rest is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramedSequence {
    pub symbols: Vec<u16>,
    pub valid_len: usize,
}

impl FramedSequence {
    /// Frames `chunk` into `len` symbols, appending the end marker when
    /// `with_marker` is set.
    pub fn from_chunk(chunk: &[u8], with_marker: bool, len: usize) -> Self {
        let valid_len = chunk.len() + usize::from(with_marker);
        assert!(valid_len <= len, "chunk of {} bytes does not fit a frame of {len}", chunk.len());
        let mut symbols = Vec::with_capacity(len);
        symbols.extend(chunk.iter().map(|&b| u16::from(b)));
        if with_marker {
            symbols.push(END_MARKER);
        }
        symbols.resize(len, PAD);
        Self { symbols, valid_len }
    }

    /// Builds a frame directly from a symbol prefix, padding to `len`.
    pub fn from_symbols(prefix: &[u16], len: usize) -> Self {
        let mut symbols = prefix.to_vec();
        symbols.resize(len, PAD);
        Self { symbols, valid_len: prefix.len() }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn valid(&self) -> &[u16] {
        &self.symbols[..self.valid_len]
    }

    pub fn has_marker(&self) -> bool {
        self.valid_len > 0 && self.symbols[self.valid_len - 1] == END_MARKER
    }

    /// Real bytes of the frame, without marker or padding.
    pub fn bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.symbols.iter().filter(|&&s| s < 256).map(|&s| s as u8)
    }

    /// Checks the framing invariants.
    pub fn is_well_formed(&self) -> bool {
        if self.valid_len > self.symbols.len() {
            return false;
        }
        let (valid, pad) = self.symbols.split_at(self.valid_len);
        let marker_ok = match valid.iter().position(|&s| s == END_MARKER) {
            None => true,
            Some(i) => i + 1 == valid.len(),
        };
        marker_ok && valid.iter().all(|&s| s <= END_MARKER) && pad.iter().all(|&s| s == PAD)
    }
}

/// Number of frames a packet of `packet_len` bytes occupies at frame length `len`.
pub fn frame_count(packet_len: usize, len: usize) -> usize {
    let chunk = len - 1;
    packet_len.div_ceil(chunk).max(1)
}

/// Valid lengths of the frames for a packet of `packet_len` bytes, derived
/// from the length alone. Every frame but the last holds `len - 1` bytes; the
/// last also holds the end marker.
pub fn frame_lengths(packet_len: usize, len: usize) -> impl Iterator<Item = usize> {
    let chunk = len - 1;
    let n = frame_count(packet_len, len);
    (0..n).map(move |i| if i + 1 < n { chunk } else { packet_len - chunk * (n - 1) + 1 })
}

/// Frames a packet into one or more fixed-length sequences.
///
/// Packets of at most `len - 1` bytes become a single frame. Longer packets
/// are cut into `len - 1` byte chunks framed independently, with the end
/// marker only in the final chunk.
pub fn frame(packet: &[u8], len: usize) -> Vec<FramedSequence> {
    assert!(len >= 2, "frame length must be at least 2");
    let chunk = len - 1;
    if packet.len() <= chunk {
        return vec![FramedSequence::from_chunk(packet, true, len)];
    }
    let n = frame_count(packet.len(), len);
    packet
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| FramedSequence::from_chunk(c, i + 1 == n, len))
        .collect()
}

/// Concatenates the real bytes of a packet's frames.
pub fn unframe(frames: &[FramedSequence]) -> Vec<u8> {
    frames.iter().flat_map(FramedSequence::bytes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_byte_frame() {
        let f = frame(&[0x41], 4);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].symbols, vec![65, 256, 257, 257]);
        assert_eq!(f[0].valid_len, 2);
    }

    #[test]
    fn boundary_fills_frame() {
        let f = frame(&[7u8; 255], 256);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].valid_len, 256);
        assert_eq!(f[0].symbols[255], END_MARKER);
        assert!(!f[0].symbols.contains(&PAD));
    }

    #[test]
    fn long_packet_is_chunked() {
        let packet: Vec<u8> = (0..300).map(|i| i as u8).collect();
        let f = frame(&packet, 256);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].valid_len, 255);
        assert!(!f[0].has_marker());
        assert_eq!(f[0].symbols[255], PAD);
        assert_eq!(f[1].valid_len, 46);
        assert_eq!(f[1].symbols[45], END_MARKER);
        assert_eq!(f[1].symbols[46..].iter().filter(|&&s| s == PAD).count(), 210);
        assert_eq!(frame_lengths(300, 256).collect::<Vec<_>>(), vec![255, 46]);
    }

    #[test]
    fn exact_multiple_keeps_marker_in_last_chunk() {
        let f = frame(&[1u8; 510], 256);
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].valid_len, 256);
        assert!(f[1].has_marker());
        assert_eq!(frame_lengths(510, 256).collect::<Vec<_>>(), vec![255, 256]);
    }

    proptest! {
        #[test]
        fn framing_round_trips(len in 2usize..40, seed in any::<u64>(), mult in 1usize..=10) {
            let plen = 1 + (seed as usize) % (mult * (len - 1));
            let packet: Vec<u8> = (0..plen).map(|i| (seed.rotate_left(i as u32) ^ i as u64) as u8).collect();
            let frames = frame(&packet, len);
            prop_assert_eq!(unframe(&frames), packet.clone());
            prop_assert_eq!(frames.len(), frame_count(plen, len));
            let lens: Vec<usize> = frames.iter().map(|f| f.valid_len).collect();
            prop_assert_eq!(lens, frame_lengths(plen, len).collect::<Vec<_>>());
            for f in &frames {
                prop_assert_eq!(f.len(), len);
                prop_assert!(f.is_well_formed());
                prop_assert!(f.symbols.iter().all(|&s| s <= PAD));
            }
            prop_assert_eq!(frames.iter().filter(|f| f.has_marker()).count(), 1);
        }
    }
}
