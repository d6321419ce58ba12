//! Classic libpcap files. Only the record payloads are kept.

use std::fs;
use std::path::Path;

use super::{IngestError, PacketCorpus};

const MAGIC_USEC: u32 = 0xa1b2_c3d4;
const MAGIC_NSEC: u32 = 0xa1b2_3c4d;
pub(crate) const PCAPNG_MAGIC: [u8; 4] = [0x0a, 0x0d, 0x0d, 0x0a];
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

pub(crate) fn is_pcap_magic(magic: [u8; 4]) -> bool {
    let le = u32::from_le_bytes(magic);
    let be = u32::from_be_bytes(magic);
    [MAGIC_USEC, MAGIC_NSEC].iter().any(|&m| m == le || m == be)
}

pub fn load_pcap(path: &Path) -> Result<PacketCorpus, IngestError> {
    let bytes = fs::read(path)?;
    parse_pcap(&bytes, path.display().to_string())
}

pub fn parse_pcap(bytes: &[u8], source: impl Into<String>) -> Result<PacketCorpus, IngestError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        if bytes.starts_with(&PCAPNG_MAGIC) {
            return Err(IngestError::UnsupportedFormat("pcapng is not supported".into()));
        }
        return Err(IngestError::UnsupportedFormat("file too short for a pcap header".into()));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let big_endian = if magic == PCAPNG_MAGIC {
        return Err(IngestError::UnsupportedFormat("pcapng is not supported".into()));
    } else if [MAGIC_USEC, MAGIC_NSEC].contains(&u32::from_le_bytes(magic)) {
        false
    } else if [MAGIC_USEC, MAGIC_NSEC].contains(&u32::from_be_bytes(magic)) {
        true
    } else {
        return Err(IngestError::UnsupportedFormat(format!("unknown magic {:02x?}", magic)));
    };
    let read_u32 = |b: &[u8]| {
        let a = [b[0], b[1], b[2], b[3]];
        if big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    };

    let mut packets = Vec::new();
    let mut rest = &bytes[GLOBAL_HEADER_LEN..];
    while !rest.is_empty() {
        if rest.len() < RECORD_HEADER_LEN {
            return Err(IngestError::CorruptFraming("truncated pcap record header".into()));
        }
        let caplen = read_u32(&rest[8..12]) as usize;
        rest = &rest[RECORD_HEADER_LEN..];
        if rest.len() < caplen {
            return Err(IngestError::CorruptFraming(format!(
                "record {} declares caplen {caplen}, {} bytes remain",
                packets.len(),
                rest.len()
            )));
        }
        // zero-length captures carry nothing to compress
        if caplen > 0 {
            packets.push(rest[..caplen].to_vec());
        }
        rest = &rest[caplen..];
    }
    PacketCorpus::new(packets, source)
}

/// Serializes a corpus as a classic pcap file (LINKTYPE_RAW, zero timestamps).
pub fn encode_pcap_with_order(corpus: &PacketCorpus, big_endian: bool) -> Vec<u8> {
    let put32 = |out: &mut Vec<u8>, v: u32| {
        out.extend_from_slice(&if big_endian { v.to_be_bytes() } else { v.to_le_bytes() })
    };
    let put16 = |out: &mut Vec<u8>, v: u16| {
        out.extend_from_slice(&if big_endian { v.to_be_bytes() } else { v.to_le_bytes() })
    };
    let mut out = Vec::new();
    put32(&mut out, MAGIC_USEC);
    put16(&mut out, 2);
    put16(&mut out, 4);
    put32(&mut out, 0); // thiszone
    put32(&mut out, 0); // sigfigs
    put32(&mut out, 65535); // snaplen
    put32(&mut out, 101); // LINKTYPE_RAW
    for p in corpus.packets() {
        put32(&mut out, 0);
        put32(&mut out, 0);
        put32(&mut out, p.len() as u32);
        put32(&mut out, p.len() as u32);
        out.extend_from_slice(p);
    }
    out
}

pub(crate) fn encode_pcap(corpus: &PacketCorpus) -> Vec<u8> {
    encode_pcap_with_order(corpus, false)
}

pub fn write_pcap(corpus: &PacketCorpus, path: &Path, big_endian: bool) -> Result<(), IngestError> {
    fs::write(path, encode_pcap_with_order(corpus, big_endian))?;
    Ok(())
}
