//! Deterministic synthetic corpora standing in for captured device traffic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::PacketCorpus;

/// Length of the shared header template.
pub const HEADER_LEN: usize = 40;
const DEVICES: usize = 8;
const MAX_READINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    RepetitiveHeaders,
    Mixed,
    Random,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::RepetitiveHeaders => "repetitive-headers",
            CorpusKind::Mixed => "mixed",
            CorpusKind::Random => "random",
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repetitive-headers" => Ok(CorpusKind::RepetitiveHeaders),
            "mixed" => Ok(CorpusKind::Mixed),
            "random" => Ok(CorpusKind::Random),
            other => Err(format!("unknown corpus kind {other:?} (repetitive-headers, mixed, random)")),
        }
    }
}

/// Per-device state for the structured generator.
struct Device {
    addr: [u8; 4],
    port: u16,
    kind: u8,
    ip_id: u16,
    clock: u32,
    /// Resting level of each reading slot.
    baseline: [u8; MAX_READINGS],
}

struct Structured {
    devices: Vec<Device>,
}

impl Structured {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let devices = (0..DEVICES)
            .map(|i| Device {
                addr: [10, 0, 1, 10 + i as u8],
                port: 49152 + rng.gen_range(0..1024),
                kind: (i % 4) as u8 + 1,
                ip_id: rng.gen_range(0..4096),
                clock: 1_700_000_000 + rng.gen_range(0..1000),
                baseline: std::array::from_fn(|_| rng.gen()),
            })
            .collect();
        Self { devices }
    }

    /// IPv4 (20) + UDP (8) + application header (12), then 4 to 40 one-byte readings.
    fn packet(&mut self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let dev = &mut self.devices[rng.gen_range(0..DEVICES)];
        let payload_len = rng.gen_range(4..=MAX_READINGS);
        let total = (HEADER_LEN + payload_len) as u16;
        let mut p = Vec::with_capacity(total as usize);

        p.extend_from_slice(&[0x45, 0x00]);
        p.extend_from_slice(&total.to_be_bytes());
        p.extend_from_slice(&dev.ip_id.to_be_bytes());
        // header checksum left to the NIC, as on offloading devices
        p.extend_from_slice(&[0x40, 0x00, 64, 17, 0, 0]);
        p.extend_from_slice(&dev.addr);
        p.extend_from_slice(&[10, 0, 0, 1]);

        p.extend_from_slice(&dev.port.to_be_bytes());
        p.extend_from_slice(&5683u16.to_be_bytes());
        p.extend_from_slice(&(total - 20).to_be_bytes());
        p.extend_from_slice(&[0, 0]);

        p.extend_from_slice(b"IoMT");
        p.push(1);
        p.push(dev.kind);
        p.push(rng.gen_range(1..=3));
        p.push(dev.ip_id as u8);
        p.extend_from_slice(&dev.clock.to_be_bytes());
        debug_assert_eq!(p.len(), HEADER_LEN);

        // sensor readings: noisy around the device's resting levels
        p.extend(dev.baseline[..payload_len].iter().map(|&b| b.wrapping_add(rng.gen_range(0..16)).wrapping_sub(8)));
        dev.ip_id = dev.ip_id.wrapping_add(1);
        dev.clock = dev.clock.wrapping_add(rng.gen_range(1..=3));
        p
    }
}

fn random_packet(rng: &mut ChaCha8Rng, lengths: std::ops::RangeInclusive<usize>) -> Vec<u8> {
    let n = rng.gen_range(lengths);
    (0..n).map(|_| rng.gen()).collect()
}

/// Generates `count` packets of `kind`; identical for identical seeds.
pub fn generate(kind: CorpusKind, count: usize, seed: u64) -> PacketCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut structured = Structured::new(&mut rng);
    let packets = (0..count)
        .map(|_| match kind {
            CorpusKind::RepetitiveHeaders => structured.packet(&mut rng),
            CorpusKind::Mixed => {
                if rng.gen_bool(0.5) {
                    structured.packet(&mut rng)
                } else {
                    random_packet(&mut rng, 20..=200)
                }
            }
            CorpusKind::Random => random_packet(&mut rng, 1..=512),
        })
        .collect();
    PacketCorpus::new(packets, format!("{kind} seed {seed}")).expect("generated packets are non-empty and short")
}
