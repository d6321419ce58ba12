//! Lossless packet compression with a byte-level Transformer decoder.
//!
//! Packets are framed into fixed-length symbol sequences, every symbol is
//! replaced by its rank under the model's next-symbol distribution, and the
//! rank stream is Deflate-coded inside a small self-describing container.
//! Decompression replays the model autoregressively and maps ranks back to
//! symbols, so losslessness never depends on how good the model is.
//!
//! ```text
//! packets ─▶ frame ─▶ model ranks ─▶ escape-serialize ─▶ zlib ─▶ BTRC container
//! ```

pub mod container;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod rank;
pub mod synth;
pub mod train;

pub use container::{pack, unpack, CompressedContainer, ContainerError};
pub use ingest::{frame, FramedSequence, IngestError, PacketCorpus};
pub use model::{Distribution, ModelConfig, ModelError, ModelParams};
pub use rank::{decode_frame, encode_frame, rank_of, symbol_at_rank, RankSequence};
pub use train::{train, TrainConfig, TrainError, TrainReport};

/// Byte values occupy symbols `0..=255`.
pub const END_MARKER: u16 = 256;
/// Padding symbol; also reused as the start-of-frame token at model input position 0.
pub const PAD: u16 = 257;
/// Size of the symbol alphabet (256 bytes + end marker + padding).
pub const VOCAB: usize = 258;
/// Default frame length and model context.
pub const DEFAULT_CONTEXT: usize = 256;

/// Top-level error for callers that drive the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}
