use super::ops::{add_bias, attend_row, layer_norm, matmul, positional_encoding, softmax_row, LnCache};
use super::{Distribution, ModelError, ModelParams, Params, Scalar};
use crate::PAD;

/// Intermediates of one decoder block, kept for backprop.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    /// Block input `[n × d]`.
    pub input: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention weights `[head][query][key]`, zero above the diagonal.
    pub attn: Vec<T>,
    /// Concatenated head outputs `[n × d]`.
    pub concat: Vec<T>,
    pub ln1: LnCache<T>,
    /// Output of the first residual + norm `[n × d]`.
    pub y1: Vec<T>,
    /// FFN pre-activation `[n × d_ff]`.
    pub h1: Vec<T>,
    pub ln2: LnCache<T>,
    /// Block output `[n × d]`.
    pub output: Vec<T>,
}

/// Full forward pass record.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub tokens: Vec<u16>,
    pub layers: Vec<LayerTrace<T>>,
    /// Output-head logits `[n × vocab]`.
    pub logits: Vec<T>,
    /// Softmax of `logits`, row-wise.
    pub probs: Vec<T>,
    /// Per row, `max + ln Σ exp(l - max)`; `logits[i][c] - log_norm[i]` is `ln p`.
    pub log_norm: Vec<f64>,
}

impl<T: Scalar> Trace<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `ln p(symbol)` at row `i`, in `f64`.
    pub fn log_prob(&self, i: usize, symbol: u16) -> f64 {
        let v = self.logits.len() / self.tokens.len();
        self.logits[i * v + symbol as usize].as_f64() - self.log_norm[i]
    }
}

fn check_input<T>(params: &Params<T>, tokens: &[u16]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > params.config.context_len {
        return Err(ModelError::ContextOverflow { len: tokens.len(), max: params.config.context_len });
    }
    if let Some(&s) = tokens.iter().find(|&&s| s as usize >= params.config.vocab) {
        return Err(ModelError::InvalidSymbol(s));
    }
    Ok(())
}

fn embed_row<T: Scalar>(params: &Params<T>, token: u16, pos: usize, out: &mut [T]) {
    let d = params.config.d_model;
    let e = &params.tok_emb[token as usize * d..(token as usize + 1) * d];
    for (c, (o, &w)) in out.iter_mut().zip(e).enumerate() {
        *o = w + T::from_f64(positional_encoding(pos, c, d));
    }
}

fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Runs the decoder over `tokens` and records every intermediate.
///
/// Row `i` of the result is the distribution of the symbol following
/// `tokens[i]`, computed from `tokens[..=i]` only.
pub fn forward_trace<T: Scalar>(params: &Params<T>, tokens: &[u16]) -> Result<Trace<T>, ModelError> {
    check_input(params, tokens)?;
    let cfg = &params.config;
    let (n, d, ff, vocab, heads) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_heads);
    let dk = d / heads;

    let mut x = vec![T::zero(); n * d];
    for (i, &t) in tokens.iter().enumerate() {
        embed_row(params, t, i, &mut x[i * d..(i + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let q = matmul(&x, n, d, &lp.wq, d);
        let k = matmul(&x, n, d, &lp.wk, d);
        let v = matmul(&x, n, d, &lp.wv, d);
        let mut attn = vec![T::zero(); heads * n * n];
        let mut concat = vec![T::zero(); n * d];
        let mut head_out = vec![T::zero(); dk];
        for h in 0..heads {
            for i in 0..n {
                let w = &mut attn[(h * n + i) * n..(h * n + i) * n + i + 1];
                attend_row(&q[i * d + h * dk..i * d + (h + 1) * dk], &k, &v, d, h * dk, i + 1, |_| true, w, &mut head_out);
                concat[i * d + h * dk..i * d + (h + 1) * dk].copy_from_slice(&head_out);
            }
        }
        let a = matmul(&concat, n, d, &lp.wo, d);
        let (y1, ln1) = layer_norm(&add(&x, &a), d, &lp.ln1_g, &lp.ln1_b);
        let mut h1 = matmul(&y1, n, d, &lp.w1, ff);
        add_bias(&mut h1, &lp.b1);
        let mut f = matmul(&relu(&h1), n, ff, &lp.w2, d);
        add_bias(&mut f, &lp.b2);
        let (output, ln2) = layer_norm(&add(&y1, &f), d, &lp.ln2_g, &lp.ln2_b);
        let input = std::mem::replace(&mut x, output.clone());
        layers.push(LayerTrace { input, q, k, v, attn, concat, ln1, y1, h1, ln2, output });
    }

    let mut logits = matmul(&x, n, d, &params.w_out, vocab);
    add_bias(&mut logits, &params.b_out);
    let mut probs = vec![T::zero(); n * vocab];
    let mut log_norm = vec![0.0; n];
    for i in 0..n {
        let (max, lse) = softmax_row(&logits[i * vocab..(i + 1) * vocab], &mut probs[i * vocab..(i + 1) * vocab]);
        log_norm[i] = max.as_f64() + lse;
    }
    Ok(Trace { tokens: tokens.to_vec(), layers, logits, probs, log_norm })
}

/// One distribution per input position.
///
/// `tokens` is the raw model input; framed data starts with the start token
/// (see [`with_start`]).
pub fn forward(params: &ModelParams, tokens: &[u16]) -> Result<Vec<Distribution>, ModelError> {
    let trace = forward_trace(params, tokens)?;
    let v = params.config.vocab;
    Ok(trace.probs.chunks(v).map(|p| Distribution::new(p.to_vec())).collect())
}

/// Model input for a frame context: the start token followed by the context.
pub fn with_start(context: &[u16]) -> Vec<u16> {
    let mut t = Vec::with_capacity(context.len() + 1);
    t.push(PAD);
    t.extend_from_slice(context);
    t
}

/// Distribution of the symbol following `context` within a frame. The empty
/// context predicts the frame's first symbol from the start token alone.
pub fn next_distribution(params: &ModelParams, context: &[u16]) -> Result<Distribution, ModelError> {
    if context.len() + 1 > params.config.context_len {
        return Err(ModelError::ContextOverflow { len: context.len() + 1, max: params.config.context_len });
    }
    let mut all = forward(params, &with_start(context))?;
    Ok(all.pop().expect("non-empty input"))
}

/// Position-at-a-time decoder that keeps per-layer keys and values, so each
/// step costs one row instead of a full prefix recompute.
///
/// Each step runs the same kernels on the same operands as row `pos` of
/// [`forward_trace`], so its output is bit-identical to the batched pass.
pub struct IncrementalDecoder<'a, T> {
    params: &'a Params<T>,
    pos: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    weights: Vec<T>,
}

impl<'a, T: Scalar> IncrementalDecoder<'a, T> {
    pub fn new(params: &'a Params<T>) -> Self {
        let cfg = &params.config;
        let cap = cfg.context_len * cfg.d_model;
        Self {
            params,
            pos: 0,
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            weights: vec![T::zero(); cfg.context_len],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one input token and returns the distribution of the next symbol.
    pub fn push(&mut self, token: u16) -> Result<Vec<T>, ModelError> {
        let cfg = &self.params.config;
        if self.pos >= cfg.context_len {
            return Err(ModelError::ContextOverflow { len: self.pos + 1, max: cfg.context_len });
        }
        if token as usize >= cfg.vocab {
            return Err(ModelError::InvalidSymbol(token));
        }
        let (d, ff, vocab, heads) = (cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_heads);
        let dk = d / heads;
        let n_keys = self.pos + 1;

        let mut x = vec![T::zero(); d];
        embed_row(self.params, token, self.pos, &mut x);
        let mut head_out = vec![T::zero(); dk];
        for (l, lp) in self.params.layers.iter().enumerate() {
            let q = matmul(&x, 1, d, &lp.wq, d);
            let k = matmul(&x, 1, d, &lp.wk, d);
            let v = matmul(&x, 1, d, &lp.wv, d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let mut concat = vec![T::zero(); d];
            for h in 0..heads {
                attend_row(
                    &q[h * dk..(h + 1) * dk],
                    &self.keys[l],
                    &self.values[l],
                    d,
                    h * dk,
                    n_keys,
                    |_| true,
                    &mut self.weights[..n_keys],
                    &mut head_out,
                );
                concat[h * dk..(h + 1) * dk].copy_from_slice(&head_out);
            }
            let a = matmul(&concat, 1, d, &lp.wo, d);
            let (y1, _) = layer_norm(&add(&x, &a), d, &lp.ln1_g, &lp.ln1_b);
            let mut h1 = matmul(&y1, 1, d, &lp.w1, ff);
            add_bias(&mut h1, &lp.b1);
            let mut f = matmul(&relu(&h1), 1, ff, &lp.w2, d);
            add_bias(&mut f, &lp.b2);
            x = layer_norm(&add(&y1, &f), d, &lp.ln2_g, &lp.ln2_b).0;
        }
        let mut logits = matmul(&x, 1, d, &self.params.w_out, vocab);
        add_bias(&mut logits, &self.params.b_out);
        let mut probs = vec![T::zero(); vocab];
        softmax_row(&logits, &mut probs);
        self.pos += 1;
        Ok(probs)
    }
}
