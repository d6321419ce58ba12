//! Byte-level Transformer decoder.
//!
//! Token embedding plus sinusoidal positions, `n_layers` post-norm blocks
//! (masked multi-head self-attention, then a ReLU feed-forward network, each
//! wrapped as `LayerNorm(x + sublayer(x))`), and a linear + softmax head over
//! the 258-symbol alphabet.
//!
//! The numeric code is generic over [`Scalar`] so the same forward and
//! backward passes can run in `f64` for gradient checking. Inference and the
//! rank codec always use `f32` ([`ModelParams`]).

mod forward;
mod io;
pub mod ops;

use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forward::{forward, forward_trace, next_distribution, with_start, IncrementalDecoder, LayerTrace, Trace};
pub use io::{fingerprint_of, load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};

use crate::{DEFAULT_CONTEXT, VOCAB};

/// Floating-point type the model can be evaluated in.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::ops::AddAssign + std::iter::Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context overflow: {len} symbols exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("symbol {0} outside the vocabulary")]
    InvalidSymbol(u16),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u8),
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("non-finite weight in tensor {0}")]
    NonFinite(String),
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub context_len: usize,
    pub preset_name: String,
}

/// Named presets: `(name, heads, layers, d_model, d_ff, batch size)`.
///
/// Heads, layers, width and batch size are the published table values. The
/// FFN width is not published; these values bring each preset's parameter
/// count close to its nominal size.
pub const PRESETS: [(&str, usize, usize, usize, usize, usize); 4] = [
    ("0.5M", 8, 3, 32, 2048, 256),
    ("5M", 8, 6, 128, 3072, 256),
    ("55M", 8, 12, 512, 3072, 128),
    ("103M", 12, 12, 768, 3072, 64),
];

impl ModelConfig {
    pub fn preset(name: &str) -> Option<Self> {
        PRESETS.iter().find(|p| p.0.eq_ignore_ascii_case(name)).map(|&(name, h, l, d, ff, _)| Self {
            n_heads: h,
            n_layers: l,
            d_model: d,
            d_ff: ff,
            vocab: VOCAB,
            context_len: DEFAULT_CONTEXT,
            preset_name: name.to_string(),
        })
    }

    /// Batch size paired with a preset, if `name` is one.
    pub fn preset_batch_size(name: &str) -> Option<usize> {
        PRESETS.iter().find(|p| p.0.eq_ignore_ascii_case(name)).map(|p| p.5)
    }

    /// A custom configuration; `d_ff` defaults to `4 * d_model`.
    pub fn custom(n_heads: usize, n_layers: usize, d_model: usize, d_ff: Option<usize>) -> Self {
        Self {
            n_heads,
            n_layers,
            d_model,
            d_ff: d_ff.unwrap_or(4 * d_model),
            vocab: VOCAB,
            context_len: DEFAULT_CONTEXT,
            preset_name: "custom".into(),
        }
    }

    pub fn with_context(mut self, context_len: usize) -> Self {
        self.context_len = context_len;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab != VOCAB {
            return bad(format!("vocab must be {VOCAB}, got {}", self.vocab));
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2".into());
        }
        Ok(())
    }

    /// Total number of learned scalars.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab);
        let per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
        v * d + self.n_layers * per_layer + d * v + v
    }
}

/// Weights of one decoder block. Matrices are row-major `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
}

/// All model weights. The same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub tok_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
}

/// Inference weights.
pub type ModelParams = Params<f32>;

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let z = |n: usize| vec![T::zero(); n];
        let layer = || LayerParams {
            wq: z(d * d),
            wk: z(d * d),
            wv: z(d * d),
            wo: z(d * d),
            w1: z(d * f),
            b1: z(f),
            w2: z(f * d),
            b2: z(d),
            ln1_g: z(d),
            ln1_b: z(d),
            ln2_g: z(d),
            ln2_b: z(d),
        };
        Self {
            config: config.clone(),
            tok_emb: z(v * d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            w_out: z(d * v),
            b_out: z(v),
        }
    }

    /// Xavier-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let mut xavier = |w: &mut Vec<T>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = T::from_f64(rng.gen_range(-limit..limit));
            }
        };
        xavier(&mut p.tok_emb, v, d);
        for l in &mut p.layers {
            xavier(&mut l.wq, d, d);
            xavier(&mut l.wk, d, d);
            xavier(&mut l.wv, d, d);
            xavier(&mut l.wo, d, d);
            xavier(&mut l.w1, d, f);
            xavier(&mut l.w2, f, d);
            l.ln1_g.fill(T::one());
            l.ln2_g.fill(T::one());
        }
        xavier(&mut p.w_out, d, v);
        Ok(p)
    }

    /// Tensors in file/declaration order, with their names.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("tok_emb".into(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
            ] {
                out.push((format!("layer{i}.{name}"), t.as_slice()));
            }
        }
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    /// Mutable tensors in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flat view of every scalar in declaration order (copies).
    pub fn flatten(&self) -> Vec<T> {
        self.named_tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    /// Mutable access to the `index`-th scalar in flattened order.
    pub fn scalar_mut(&mut self, mut index: usize) -> &mut T {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Params<T>) {
        let others = other.named_tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(others) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Converts every weight to another float type.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::<U>::zeros(&self.config);
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = U::from_f64(b.as_f64());
            }
        }
        out
    }
}

impl Params<f32> {
    /// 64-bit hash binding containers to these exact weights.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(self)
    }
}

/// Next-symbol probabilities over the 258-symbol alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f32>,
}

impl Distribution {
    pub fn new(probs: Vec<f32>) -> Self {
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f32; n] }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().map(|&p| p as f64).sum()
    }

    /// Most probable symbol, lowest id on ties.
    pub fn argmax(&self) -> u16 {
        crate::rank::symbol_at_rank(&self.probs, 0)
    }
}
