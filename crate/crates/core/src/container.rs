//! Rank serialization, the Deflate stage, and the `BTRC` container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BTRC" | u8 version | u64 fingerprint | u32 crc32(rank stream) | u32 count | count × u32 length | zlib
//! ```

use std::io::{Read, Write};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;

use crate::ingest::{frame, frame_count, frame_lengths, FramedSequence, PacketCorpus, MAX_PACKET_LEN};
use crate::model::{ModelError, ModelParams};
use crate::rank::{decode_frame, encode_frame, RankError};
use crate::{END_MARKER, PAD};

pub const CONTAINER_MAGIC: &[u8; 4] = b"BTRC";
pub const CONTAINER_VERSION: u8 = 1;
pub const DEFAULT_LEVEL: u32 = 9;
const ESCAPE: u8 = 0xFF;
/// Bytes before the length table.
pub const FIXED_HEADER_LEN: usize = 4 + 1 + 8 + 4 + 4;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("model fingerprint mismatch: container needs {expected:016x}, model is {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("rank stream checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("rank count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("malformed escape at byte {offset}")]
    MalformedEscape { offset: usize },
    #[error("invalid rank {0}")]
    InvalidRank(u16),
    #[error("model is not finite: {0}")]
    NonFiniteModel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<RankError> for ContainerError {
    fn from(e: RankError) -> Self {
        match e {
            RankError::Model(m) => ContainerError::Model(m),
            RankError::RankOutOfRange { rank, .. } => ContainerError::InvalidRank(rank),
            other => ContainerError::CorruptStream(other.to_string()),
        }
    }
}

impl ContainerError {
    /// Integrity failures, as opposed to a wrong model or a model error.
    pub fn is_corruption(&self) -> bool {
        !matches!(self, ContainerError::FingerprintMismatch { .. } | ContainerError::Model(_) | ContainerError::NonFiniteModel(_))
    }
}

/// Escape coding: `r ≤ 254` is one byte, `r ≥ 255` is `FF (r − 255)`.
pub fn serialize_ranks(ranks: &[u16], out: &mut Vec<u8>) -> Result<(), ContainerError> {
    for &r in ranks {
        match r {
            0..=254 => out.push(r as u8),
            255..=257 => out.extend_from_slice(&[ESCAPE, (r - 255) as u8]),
            _ => return Err(ContainerError::InvalidRank(r)),
        }
    }
    Ok(())
}

pub fn deserialize_ranks(bytes: &[u8], expected_count: usize) -> Result<Vec<u16>, ContainerError> {
    let mut ranks = Vec::with_capacity(expected_count.min(bytes.len()));
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == ESCAPE {
            match bytes.get(i + 1) {
                Some(&b) if b <= 2 => ranks.push(255 + u16::from(b)),
                _ => return Err(ContainerError::MalformedEscape { offset: i }),
            }
            i += 2;
        } else {
            ranks.push(u16::from(bytes[i]));
            i += 1;
        }
    }
    if ranks.len() != expected_count {
        return Err(ContainerError::CountMismatch { expected: expected_count, found: ranks.len() });
    }
    Ok(ranks)
}

/// zlib-wrapped Deflate at `level` (0..=9).
pub fn deflate(bytes: &[u8], level: u32) -> Vec<u8> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(level.min(9)));
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn inflate(bytes: &[u8]) -> Result<Vec<u8>, ContainerError> {
    inflate_limited(bytes, usize::MAX)
}

/// Inflates, refusing more than `limit` output bytes or trailing input.
pub fn inflate_limited(bytes: &[u8], limit: usize) -> Result<Vec<u8>, ContainerError> {
    let mut dec = ZlibDecoder::new(bytes);
    let mut out = Vec::new();
    (&mut dec)
        .take(limit.saturating_add(1) as u64)
        .read_to_end(&mut out)
        .map_err(|e| ContainerError::CorruptStream(e.to_string()))?;
    if out.len() > limit {
        return Err(ContainerError::CorruptStream(format!("stream inflates past {limit} bytes")));
    }
    if dec.total_in() as usize != bytes.len() {
        return Err(ContainerError::CorruptStream(format!(
            "{} bytes follow the end of the stream",
            bytes.len() - dec.total_in() as usize
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedContainer {
    pub version: u8,
    pub fingerprint: u64,
    pub crc32: u32,
    pub lengths: Vec<u32>,
    pub payload: Vec<u8>,
}

impl CompressedContainer {
    pub fn header_len(&self) -> usize {
        FIXED_HEADER_LEN + 4 * self.lengths.len()
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + self.payload.len()
    }

    pub fn original_bytes(&self) -> usize {
        self.lengths.iter().map(|&l| l as usize).sum()
    }

    /// Ranks the payload must hold: one per byte plus one end marker per packet.
    pub fn expected_rank_count(&self) -> usize {
        self.lengths.iter().map(|&l| l as usize + 1).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.crc32.to_le_bytes());
        out.extend_from_slice(&(self.lengths.len() as u32).to_le_bytes());
        for l in &self.lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(ContainerError::Truncated(format!("{} byte header", bytes.len())));
        }
        let version = bytes[4];
        if version != CONTAINER_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let fingerprint = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let crc32 = u32_at(13);
        let count = u32_at(17) as usize;
        let table_end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(FIXED_HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| ContainerError::Truncated(format!("length table for {count} packets")))?;
        let lengths: Vec<u32> = (FIXED_HEADER_LEN..table_end).step_by(4).map(u32_at).collect();
        if let Some(l) = lengths.iter().find(|&&l| l == 0 || l as usize > MAX_PACKET_LEN) {
            return Err(ContainerError::CorruptStream(format!("packet length {l} out of range")));
        }
        Ok(Self { version, fingerprint, crc32, lengths, payload: bytes[table_end..].to_vec() })
    }
}

/// Ranks of every packet, frame by frame, in corpus order.
pub fn encode_corpus(corpus: &PacketCorpus, params: &ModelParams) -> Result<Vec<Vec<u16>>, ContainerError> {
    if !params.is_finite() {
        return Err(ContainerError::NonFiniteModel("weights contain NaN or infinity".into()));
    }
    let len = params.config.context_len;
    let frames: Vec<(usize, FramedSequence)> = corpus
        .packets()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| frame(p, len).into_iter().map(move |f| (i, f)))
        .collect();
    let encoded: Vec<Vec<u16>> = frames
        .par_iter()
        .map(|(_, f)| encode_frame(params, f).map(|r| r.ranks))
        .collect::<Result<_, _>>()?;
    let mut per_packet = vec![Vec::new(); corpus.len()];
    for ((i, _), ranks) in frames.iter().zip(encoded) {
        per_packet[*i].extend(ranks);
    }
    Ok(per_packet)
}

/// Builds a container from precomputed per-packet ranks.
pub fn pack_ranks(
    lengths: Vec<u32>,
    ranks: &[Vec<u16>],
    fingerprint: u64,
    level: u32,
) -> Result<CompressedContainer, ContainerError> {
    let mut stream = Vec::new();
    for r in ranks {
        serialize_ranks(r, &mut stream)?;
    }
    Ok(CompressedContainer {
        version: CONTAINER_VERSION,
        fingerprint,
        crc32: crc32fast::hash(&stream),
        lengths,
        payload: deflate(&stream, level),
    })
}

pub fn pack(corpus: &PacketCorpus, params: &ModelParams) -> Result<CompressedContainer, ContainerError> {
    pack_with_level(corpus, params, DEFAULT_LEVEL).map(|(c, _)| c)
}

/// Packs and also returns the per-packet ranks.
pub fn pack_with_level(
    corpus: &PacketCorpus,
    params: &ModelParams,
    level: u32,
) -> Result<(CompressedContainer, Vec<Vec<u16>>), ContainerError> {
    let ranks = encode_corpus(corpus, params)?;
    let lengths = corpus.packets().iter().map(|p| p.len() as u32).collect();
    let c = pack_ranks(lengths, &ranks, params.fingerprint(), level)?;
    Ok((c, ranks))
}

/// Deflate ignores some bits (stored-block and final-byte padding), so a
/// flipped bit there still inflates cleanly. Requiring the payload to be
/// exactly what this build's encoder emits at some level closes that gap.
fn is_canonical(stream: &[u8], payload: &[u8]) -> bool {
    std::iter::once(DEFAULT_LEVEL).chain(0..DEFAULT_LEVEL).any(|level| deflate(stream, level) == payload)
}

/// Checks a decoded frame against what its position in the packet requires.
fn check_frame(f: &FramedSequence, last: bool) -> Result<(), ContainerError> {
    let bad = f.valid().iter().enumerate().position(|(i, &s)| {
        let is_marker_slot = last && i + 1 == f.valid_len;
        if is_marker_slot { s != END_MARKER } else { s >= END_MARKER }
    });
    match bad {
        None => Ok(()),
        Some(i) => Err(ContainerError::CorruptStream(format!(
            "decoded {} at frame position {i}",
            match f.symbols[i] {
                END_MARKER => "a misplaced end marker".to_string(),
                PAD => "padding".to_string(),
                b => format!("byte {b} where the end marker belongs"),
            }
        ))),
    }
}

pub fn unpack(container: &CompressedContainer, params: &ModelParams) -> Result<PacketCorpus, ContainerError> {
    let found = params.fingerprint();
    if container.fingerprint != found {
        return Err(ContainerError::FingerprintMismatch { expected: container.fingerprint, found });
    }
    let expected = container.expected_rank_count();
    let stream = inflate_limited(&container.payload, expected.saturating_mul(2))?;
    let computed = crc32fast::hash(&stream);
    if computed != container.crc32 {
        return Err(ContainerError::CrcMismatch { stored: container.crc32, computed });
    }
    if !is_canonical(&stream, &container.payload) {
        return Err(ContainerError::CorruptStream("payload is not the deflate encoding of its rank stream".into()));
    }
    let ranks = deserialize_ranks(&stream, expected)?;

    let len = params.config.context_len;
    let mut packets = Vec::with_capacity(container.lengths.len());
    let mut pos = 0;
    for &plen in &container.lengths {
        let n = frame_count(plen as usize, len);
        let mut packet = Vec::with_capacity(plen as usize);
        for (k, valid_len) in frame_lengths(plen as usize, len).enumerate() {
            let f = decode_frame(params, &ranks[pos..pos + valid_len], len)?;
            check_frame(&f, k + 1 == n)?;
            packet.extend(f.bytes());
            pos += valid_len;
        }
        packets.push(packet);
    }
    PacketCorpus::new(packets, "container").map_err(|e| ContainerError::CorruptStream(e.to_string()))
}
