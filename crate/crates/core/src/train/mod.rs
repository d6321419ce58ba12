//! Cross-entropy training of the byte model.

mod backward;
mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backward::{batch_loss, grad, loss, CHUNK_FRAMES, PROB_FLOOR};
pub use optim::{clip_global_norm, global_norm, sgd_step, Adam};

use crate::ingest::{frame, FramedSequence, PacketCorpus};
use crate::model::{ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam_betas: (f64, f64),
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 10,
            learning_rate: 3e-4,
            seed: 0,
            optimizer: Optimizer::Adam,
            adam_betas: (0.9, 0.999),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Frame-weighted mean loss of each epoch, in nats.
    pub epoch_losses: Vec<f64>,
    pub wall_time_seconds: f64,
    pub final_fingerprint: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every frame of every packet at the model's frame length.
pub fn frames_of(corpus: &PacketCorpus, len: usize) -> Vec<FramedSequence> {
    corpus.packets().iter().flat_map(|p| frame(p, len)).collect()
}

/// Mean per-frame loss over a corpus.
pub fn mean_loss(params: &ModelParams, corpus: &PacketCorpus) -> Result<f64, ModelError> {
    batch_loss(params, &frames_of(corpus, params.config.context_len))
}

pub fn train(
    corpus: &PacketCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    train_with_progress(corpus, model_cfg, cfg, |_, _| {})
}

/// Trains from a seeded initialization; `progress(epoch, mean_loss)` runs
/// after each epoch (epochs count from 1).
pub fn train_with_progress(
    corpus: &PacketCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let start = Instant::now();
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let frames = frames_of(corpus, model_cfg.context_len);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4531);
    let mut adam = Adam::new(&params, cfg.adam_betas);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<FramedSequence> = idx.iter().map(|&i| frames[i].clone()).collect();
            let (mut g, loss) = grad(&params, &batch)?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b + 1, loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut g, c);
            }
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut params, &g, cfg.learning_rate),
                Optimizer::Sgd => sgd_step(&mut params, &g, cfg.learning_rate),
            }
            if !params.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b + 1, loss: f64::NAN });
            }
            total += loss * batch.len() as f64;
        }
        let mean = total / frames.len() as f64;
        epoch_losses.push(mean);
        progress(epoch, mean);
    }

    let report = TrainReport {
        epoch_losses,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        final_fingerprint: params.fingerprint(),
    };
    Ok((params, report))
}

/// `epoch<TAB>mean_loss` per line.
pub fn loss_sidecar(report: &TrainReport) -> String {
    let mut s = String::new();
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "{}\t{:.6}", i + 1, l);
    }
    s
}

pub fn write_loss_sidecar(report: &TrainReport, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, loss_sidecar(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::next_distribution;

    fn small() -> ModelConfig {
        ModelConfig::custom(2, 1, 16, Some(32)).with_context(32)
    }

    fn fast(epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: 4, epochs, learning_rate: 1e-2, seed: 1, ..Default::default() }
    }

    #[test]
    fn repeated_packet_is_learned() {
        let corpus = PacketCorpus::new(vec![b"hello packet".to_vec(); 16], "r").unwrap();
        let (_, report) = train(&corpus, &small(), &fast(8)).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < 0.1 * first, "{:?}", report.epoch_losses);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let corpus = PacketCorpus::new(vec![vec![1, 2, 3]], "z").unwrap();
        let (p, report) = train(&corpus, &small(), &fast(0)).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(p, ModelParams::init(&small(), 1).unwrap());
        assert_eq!(report.final_fingerprint, p.fingerprint());
    }

    #[test]
    fn seed_determinism() {
        let corpus = PacketCorpus::new((0..12u8).map(|i| vec![i, i ^ 0x55, 7, 9]).collect(), "d").unwrap();
        let (a, ra) = train(&corpus, &small(), &fast(2)).unwrap();
        let (b, rb) = train(&corpus, &small(), &fast(2)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        let (c, _) = train(&corpus, &small(), &TrainConfig { seed: 2, ..fast(2) }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn alternating_pattern_predicts_next() {
        let corpus = PacketCorpus::new(vec![b"ABABABABAB".to_vec(); 8], "ab").unwrap();
        let (p, _) = train(&corpus, &small(), &fast(15)).unwrap();
        let d = next_distribution(&p, &[b'A' as u16, b'B' as u16, b'A' as u16]).unwrap();
        assert_eq!(d.argmax(), b'B' as u16);
    }

    #[test]
    fn larger_model_reaches_threshold_no_later() {
        let packets: Vec<Vec<u8>> = (0..24u8).map(|i| [b"HDR:".as_slice(), &[i % 4, 0x10, i]].concat()).collect();
        let corpus = PacketCorpus::new(packets, "s").unwrap();
        let epochs_to = |cfg: &ModelConfig, threshold: f64| {
            let (_, r) = train(&corpus, cfg, &fast(12)).unwrap();
            r.epoch_losses.iter().position(|&l| l < threshold).map_or(usize::MAX, |e| e + 1)
        };
        let small_cfg = ModelConfig::custom(2, 1, 8, Some(16)).with_context(16);
        let big_cfg = ModelConfig::custom(2, 2, 32, Some(64)).with_context(16);
        let threshold = 2.0;
        let small_epochs = epochs_to(&small_cfg, threshold);
        assert!(small_epochs != usize::MAX, "small model never reached {threshold}");
        assert!(epochs_to(&big_cfg, threshold) <= small_epochs);
    }

    #[test]
    fn config_validation() {
        let corpus = PacketCorpus::new(vec![vec![1]], "v").unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { grad_clip: Some(-1.0), ..Default::default() },
        ] {
            assert!(matches!(train(&corpus, &small(), &bad), Err(TrainError::InvalidConfig(_))));
        }
        assert!(matches!(train(&PacketCorpus::default(), &small(), &fast(1)), Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn divergence_detected() {
        let corpus = PacketCorpus::new(vec![vec![1, 2, 3]; 4], "x").unwrap();
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 1e30, grad_clip: None, ..fast(3) };
        assert!(matches!(train(&corpus, &small(), &cfg), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn sidecar_format() {
        let r = TrainReport { epoch_losses: vec![5.5, 2.25], wall_time_seconds: 0.0, final_fingerprint: 0 };
        assert_eq!(loss_sidecar(&r), "1\t5.500000\n2\t2.250000\n");
    }
}
