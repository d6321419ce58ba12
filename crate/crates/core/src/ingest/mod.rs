//! Packet corpora: on-disk formats, framing into model sequences, and
//! train/test splitting.
//!
//! Three corpus formats are understood:
//!
//! * separator-framed: packets joined by `00 FF 00 FF`
//! * length-prefixed: `"RPKT"`, `u8` version 1, then `[u32 BE length, payload]*`
//! * classic pcap (either byte order), payload = captured bytes

mod framing;
mod pcap;
mod split;

use std::fs;
use std::io;
use std::path::Path;

pub use framing::{frame, frame_count, frame_lengths, unframe, FramedSequence};
pub use pcap::{load_pcap, parse_pcap, write_pcap};
pub use split::{length_histogram, split_corpus, CorpusSplit, LengthHistogram};

/// Packet separator used by separator-framed corpus files.
pub const SEPARATOR: [u8; 4] = [0x00, 0xFF, 0x00, 0xFF];
/// Magic for the length-prefixed corpus format.
pub const RPKT_MAGIC: &[u8; 4] = b"RPKT";
pub const RPKT_VERSION: u8 = 1;
/// Largest packet accepted by any corpus format.
pub const MAX_PACKET_LEN: usize = 65535;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt framing: {0}")]
    CorruptFraming(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("packet {index} contains the separator sequence 00 FF 00 FF")]
    SeparatorInPacket { index: usize },
    #[error("packet {index} overlaps a separator at its edge; use the length-prefixed format")]
    AmbiguousSeparator { index: usize },
    #[error("invalid packet {index}: {reason}")]
    InvalidPacket { index: usize, reason: String },
    #[error("insufficient packets: requested {requested}, corpus has {available}")]
    InsufficientPackets { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// An ordered collection of non-empty packets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PacketCorpus {
    packets: Vec<Vec<u8>>,
    pub source: String,
}

impl PacketCorpus {
    /// Builds a corpus, rejecting empty or oversized packets.
    pub fn new(packets: Vec<Vec<u8>>, source: impl Into<String>) -> Result<Self, IngestError> {
        for (index, p) in packets.iter().enumerate() {
            if p.is_empty() {
                return Err(IngestError::InvalidPacket { index, reason: "empty packet".into() });
            }
            if p.len() > MAX_PACKET_LEN {
                return Err(IngestError::InvalidPacket {
                    index,
                    reason: format!("length {} exceeds {}", p.len(), MAX_PACKET_LEN),
                });
            }
        }
        Ok(Self { packets, source: source.into() })
    }

    pub fn packets(&self) -> &[Vec<u8>] {
        &self.packets
    }

    pub fn into_packets(self) -> Vec<Vec<u8>> {
        self.packets
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.packets.iter().map(Vec::len).sum()
    }

    /// All packet bytes back to back, without boundaries.
    pub fn concatenated(&self) -> Vec<u8> {
        self.packets.concat()
    }

    /// A new corpus holding the packets at `indices`, in that order.
    pub fn select(&self, indices: &[usize], source: impl Into<String>) -> PacketCorpus {
        PacketCorpus {
            packets: indices.iter().map(|&i| self.packets[i].clone()).collect(),
            source: source.into(),
        }
    }
}

/// On-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Separated,
    LengthPrefixed,
    Pcap,
}

impl CorpusFormat {
    pub fn name(self) -> &'static str {
        match self {
            CorpusFormat::Separated => "separated",
            CorpusFormat::LengthPrefixed => "rpkt",
            CorpusFormat::Pcap => "pcap",
        }
    }
}

/// Guesses the format of `bytes` from its leading magic. Anything that is
/// neither RPKT nor pcap is treated as separator-framed.
pub fn detect_format(bytes: &[u8]) -> Result<CorpusFormat, IngestError> {
    if bytes.starts_with(RPKT_MAGIC) {
        return Ok(CorpusFormat::LengthPrefixed);
    }
    if bytes.len() >= 4 {
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if pcap::is_pcap_magic(magic) {
            return Ok(CorpusFormat::Pcap);
        }
        if magic == pcap::PCAPNG_MAGIC {
            return Err(IngestError::UnsupportedFormat("pcapng is not supported".into()));
        }
    }
    Ok(CorpusFormat::Separated)
}

/// Loads a corpus, auto-detecting the format unless `format` is given.
pub fn load_corpus(path: &Path, format: Option<CorpusFormat>) -> Result<PacketCorpus, IngestError> {
    let bytes = fs::read(path)?;
    let format = match format {
        Some(f) => f,
        None => detect_format(&bytes)?,
    };
    let source = path.display().to_string();
    match format {
        CorpusFormat::Separated => parse_separated(&bytes, source),
        CorpusFormat::LengthPrefixed => parse_length_prefixed(&bytes, source),
        CorpusFormat::Pcap => parse_pcap(&bytes, source),
    }
}

/// Writes a corpus in the given format.
pub fn save_corpus(corpus: &PacketCorpus, path: &Path, format: CorpusFormat) -> Result<(), IngestError> {
    let bytes = match format {
        CorpusFormat::Separated => encode_separated(corpus)?,
        CorpusFormat::LengthPrefixed => encode_length_prefixed(corpus),
        CorpusFormat::Pcap => pcap::encode_pcap(corpus),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_separated(path: &Path) -> Result<PacketCorpus, IngestError> {
    let bytes = fs::read(path)?;
    parse_separated(&bytes, path.display().to_string())
}

pub fn save_separated(corpus: &PacketCorpus, path: &Path) -> Result<(), IngestError> {
    fs::write(path, encode_separated(corpus)?)?;
    Ok(())
}

pub fn load_length_prefixed(path: &Path) -> Result<PacketCorpus, IngestError> {
    let bytes = fs::read(path)?;
    parse_length_prefixed(&bytes, path.display().to_string())
}

pub fn save_length_prefixed(corpus: &PacketCorpus, path: &Path) -> Result<(), IngestError> {
    fs::write(path, encode_length_prefixed(corpus))?;
    Ok(())
}

fn find_separator(bytes: &[u8], from: usize) -> Option<usize> {
    bytes[from..].windows(SEPARATOR.len()).position(|w| w == SEPARATOR).map(|p| p + from)
}

/// Splits `bytes` on the separator; empty runs are dropped.
///
/// A file that begins with the separator's 3-byte tail (`FF 00 FF`) or ends
/// with its 3-byte head (`00 FF 00`) is rejected as cut mid-separator.
pub fn parse_separated(bytes: &[u8], source: impl Into<String>) -> Result<PacketCorpus, IngestError> {
    let n = SEPARATOR.len();
    if bytes.starts_with(&SEPARATOR[1..]) && !bytes.starts_with(&SEPARATOR) {
        return Err(IngestError::CorruptFraming("file begins mid-separator".into()));
    }
    if bytes.ends_with(&SEPARATOR[..n - 1]) {
        return Err(IngestError::CorruptFraming("file ends mid-separator".into()));
    }

    let mut packets = Vec::new();
    let mut start = 0;
    while let Some(pos) = find_separator(bytes, start) {
        if pos > start {
            packets.push(bytes[start..pos].to_vec());
        }
        start = pos + n;
    }
    if start < bytes.len() {
        packets.push(bytes[start..].to_vec());
    }
    PacketCorpus::new(packets, source)
}

/// Joins packets with the separator.
///
/// Fails if a packet contains the separator, or if a packet edge overlaps
/// a separator so that the file would not split back into the same packets
/// (e.g. a packet ending in `00 FF`).
pub fn encode_separated(corpus: &PacketCorpus) -> Result<Vec<u8>, IngestError> {
    let mut out = Vec::with_capacity(corpus.total_bytes() + corpus.len() * SEPARATOR.len());
    for (index, p) in corpus.packets().iter().enumerate() {
        if find_separator(p, 0).is_some() {
            return Err(IngestError::SeparatorInPacket { index });
        }
        if index > 0 {
            out.extend_from_slice(&SEPARATOR);
        }
        out.extend_from_slice(p);
    }
    let reparsed = parse_separated(&out, "").map(PacketCorpus::into_packets).unwrap_or_default();
    if reparsed.as_slice() != corpus.packets() {
        let index = corpus
            .packets()
            .iter()
            .zip(reparsed.iter().map(Some).chain(std::iter::repeat(None)))
            .position(|(a, b)| Some(a) != b)
            .unwrap_or(0);
        return Err(IngestError::AmbiguousSeparator { index });
    }
    Ok(out)
}

pub fn parse_length_prefixed(bytes: &[u8], source: impl Into<String>) -> Result<PacketCorpus, IngestError> {
    if !bytes.starts_with(RPKT_MAGIC) {
        return Err(IngestError::UnsupportedFormat("missing RPKT magic".into()));
    }
    match bytes.get(4) {
        Some(&RPKT_VERSION) => {}
        Some(v) => return Err(IngestError::UnsupportedFormat(format!("RPKT version {v}"))),
        None => return Err(IngestError::CorruptFraming("truncated RPKT header".into())),
    }
    let mut packets = Vec::new();
    let mut rest = &bytes[5..];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(IngestError::CorruptFraming("truncated length field".into()));
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(IngestError::CorruptFraming(format!(
                "packet {} declares {} bytes, {} remain",
                packets.len(),
                len,
                rest.len()
            )));
        }
        packets.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    PacketCorpus::new(packets, source)
}

pub fn encode_length_prefixed(corpus: &PacketCorpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + corpus.total_bytes() + 4 * corpus.len());
    out.extend_from_slice(RPKT_MAGIC);
    out.push(RPKT_VERSION);
    for p in corpus.packets() {
        out.extend_from_slice(&(p.len() as u32).to_be_bytes());
        out.extend_from_slice(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(packets: &[&[u8]]) -> PacketCorpus {
        PacketCorpus::new(packets.iter().map(|p| p.to_vec()).collect(), "test").unwrap()
    }

    #[test]
    fn separator_split() {
        let mut file = vec![0xAA, 0xBB];
        file.extend_from_slice(&SEPARATOR);
        file.push(0xCC);
        let c = parse_separated(&file, "t").unwrap();
        assert_eq!(c.packets(), &[vec![0xAA, 0xBB], vec![0xCC]]);
    }

    #[test]
    fn leading_empty_run_dropped() {
        let mut file = SEPARATOR.to_vec();
        file.push(0x01);
        let c = parse_separated(&file, "t").unwrap();
        assert_eq!(c.packets(), &[vec![0x01]]);
    }

    #[test]
    fn consecutive_separators_drop_empty_runs() {
        let mut file = vec![1];
        file.extend_from_slice(&SEPARATOR);
        file.extend_from_slice(&SEPARATOR);
        file.push(2);
        file.extend_from_slice(&SEPARATOR);
        let c = parse_separated(&file, "t").unwrap();
        assert_eq!(c.packets(), &[vec![1], vec![2]]);
    }

    #[test]
    fn truncated_separator_is_corrupt() {
        let mut file = vec![1, 2];
        file.extend_from_slice(&SEPARATOR);
        file.extend_from_slice(&[0x00, 0xFF, 0x00]);
        assert!(matches!(parse_separated(&file, "t"), Err(IngestError::CorruptFraming(_))));

        let mut file = vec![0xFF, 0x00, 0xFF];
        file.push(7);
        assert!(matches!(parse_separated(&file, "t"), Err(IngestError::CorruptFraming(_))));

        // a trailing full separator is fine
        let mut file = vec![7];
        file.extend_from_slice(&SEPARATOR);
        assert_eq!(parse_separated(&file, "t").unwrap().packets(), &[vec![7]]);
    }

    #[test]
    fn edge_overlap_rejected_on_write() {
        let c = corpus(&[&[0x00, 0xFF], &[0x01]]);
        assert!(matches!(encode_separated(&c), Err(IngestError::AmbiguousSeparator { index: 0 })));
        let c = corpus(&[&[0x05], &[0x01, 0x00, 0xFF, 0x00]]);
        assert!(encode_separated(&c).is_err());
    }

    #[test]
    fn save_rejects_separator_content() {
        let c = corpus(&[&[1, 2], &[9, 0x00, 0xFF, 0x00, 0xFF, 9]]);
        assert!(matches!(encode_separated(&c), Err(IngestError::SeparatorInPacket { index: 1 })));
        // the length-prefixed format has no such restriction
        let bytes = encode_length_prefixed(&c);
        assert_eq!(parse_length_prefixed(&bytes, "t").unwrap(), PacketCorpus { source: "t".into(), ..c });
    }

    #[test]
    fn rpkt_layout_is_exact() {
        let c = corpus(&[&[0xAB], &[1, 2, 3]]);
        assert_eq!(
            encode_length_prefixed(&c),
            [b'R', b'P', b'K', b'T', 1, 0, 0, 0, 1, 0xAB, 0, 0, 0, 3, 1, 2, 3]
        );
    }

    #[test]
    fn rpkt_truncation_detected() {
        let c = corpus(&[&[1, 2, 3]]);
        let bytes = encode_length_prefixed(&c);
        for cut in 5..bytes.len() {
            if cut == 5 {
                continue; // header only: an empty corpus
            }
            assert!(parse_length_prefixed(&bytes[..cut], "t").is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn rejects_empty_packets() {
        assert!(matches!(
            PacketCorpus::new(vec![vec![1], vec![]], "t"),
            Err(IngestError::InvalidPacket { index: 1, .. })
        ));
    }

    #[test]
    fn detects_formats() {
        assert_eq!(detect_format(b"RPKT\x01").unwrap(), CorpusFormat::LengthPrefixed);
        assert_eq!(detect_format(&[0xd4, 0xc3, 0xb2, 0xa1, 0, 0]).unwrap(), CorpusFormat::Pcap);
        assert_eq!(detect_format(&[0xa1, 0xb2, 0xc3, 0xd4, 0, 0]).unwrap(), CorpusFormat::Pcap);
        assert_eq!(detect_format(&[1, 2, 3]).unwrap(), CorpusFormat::Separated);
        assert!(matches!(
            detect_format(&[0x0a, 0x0d, 0x0d, 0x0a, 0, 0]),
            Err(IngestError::UnsupportedFormat(_))
        ));
    }
}
