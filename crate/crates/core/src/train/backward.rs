//! Reverse-mode gradients of the next-symbol cross-entropy.

use rayon::prelude::*;

use crate::ingest::FramedSequence;
use crate::model::ops::{matmul_at_acc, matmul_bt, LnCache};
use crate::model::{forward_trace, with_start, ModelError, Params, Scalar, Trace};

/// Probabilities below this are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Frames per gradient work unit. Fixed so the reduction order never
/// depends on the thread count.
pub const CHUNK_FRAMES: usize = 8;

/// Model input and targets for a frame: `[257] ++ valid[..n-1]` predicts `valid`.
fn io_of(frame: &FramedSequence) -> Option<(Vec<u16>, &[u16])> {
    let valid = frame.valid();
    if valid.is_empty() {
        return None;
    }
    Some((with_start(&valid[..valid.len() - 1]), valid))
}

/// `−ln p(target)` per row, floored; `None` where the floor applies.
fn target_nll<T: Scalar>(trace: &Trace<T>, targets: &[u16]) -> Vec<(f64, bool)> {
    let floor = PROB_FLOOR.ln();
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let lp = trace.log_prob(i, t);
            if lp < floor {
                (-floor, true)
            } else {
                (-lp, false)
            }
        })
        .collect()
}

/// Mean negative log-probability of every non-padding target in `frame`.
/// A frame with no targets has loss 0.
pub fn loss<T: Scalar>(params: &Params<T>, frame: &FramedSequence) -> Result<f64, ModelError> {
    let Some((input, targets)) = io_of(frame) else { return Ok(0.0) };
    let trace = forward_trace(params, &input)?;
    let nll = target_nll(&trace, targets);
    Ok(nll.iter().map(|x| x.0).sum::<f64>() / targets.len() as f64)
}

/// Mean of per-frame losses over the batch.
pub fn batch_loss<T: Scalar>(params: &Params<T>, batch: &[FramedSequence]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for f in batch {
        total += loss(params, f)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

fn ln_backward<T: Scalar>(dy: &[T], cache: &LnCache<T>, gain: &[T], dgain: &mut [T], dbias: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (i, rstd) in cache.rstd.iter().enumerate() {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let dxh = dyr[j] * gain[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh = mean_dxh * inv_d;
        mean_dxh_xh = mean_dxh_xh * inv_d;
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dx[i * d + j] = *rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn col_sum_acc<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Adds `weight · ∂loss(frame)/∂θ` into `grads`; returns the frame loss.
fn accumulate_frame<T: Scalar>(
    params: &Params<T>,
    frame: &FramedSequence,
    weight: f64,
    grads: &mut Params<T>,
) -> Result<f64, ModelError> {
    let Some((input, targets)) = io_of(frame) else { return Ok(0.0) };
    let trace = forward_trace(params, &input)?;
    let cfg = &params.config;
    let (n, d, ff, v, heads) = (input.len(), cfg.d_model, cfg.d_ff, cfg.vocab, cfg.n_heads);
    let dk = d / heads;
    let nll = target_nll(&trace, targets);
    let frame_loss = nll.iter().map(|x| x.0).sum::<f64>() / n as f64;
    let w = T::from_f64(weight / n as f64);

    // softmax + cross-entropy
    let mut dlogits = vec![T::zero(); n * v];
    for (i, &t) in targets.iter().enumerate() {
        if nll[i].1 {
            continue;
        }
        let row = &mut dlogits[i * v..(i + 1) * v];
        for (g, &p) in row.iter_mut().zip(&trace.probs[i * v..(i + 1) * v]) {
            *g = p * w;
        }
        row[t as usize] = row[t as usize] - w;
    }

    let top = trace.layers.last().map_or_else(|| unreachable!("at least one layer"), |l| &l.output);
    matmul_at_acc(top, n, d, &dlogits, v, &mut grads.w_out);
    col_sum_acc(&dlogits, v, &mut grads.b_out);
    let mut dx = matmul_bt(&dlogits, n, v, &params.w_out, d);

    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut grads.layers[l];

        let du2 = ln_backward(&dx, &lt.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let relu: Vec<T> = lt.h1.iter().map(|&h| if h > T::zero() { h } else { T::zero() }).collect();
        matmul_at_acc(&relu, n, ff, &du2, d, &mut gl.w2);
        col_sum_acc(&du2, d, &mut gl.b2);
        let mut dh1 = matmul_bt(&du2, n, d, &lp.w2, ff);
        for (g, &h) in dh1.iter_mut().zip(&lt.h1) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        matmul_at_acc(&lt.y1, n, d, &dh1, ff, &mut gl.w1);
        col_sum_acc(&dh1, ff, &mut gl.b1);
        let mut dy1 = matmul_bt(&dh1, n, ff, &lp.w1, d);
        for (a, &b) in dy1.iter_mut().zip(&du2) {
            *a += b;
        }

        let du1 = ln_backward(&dy1, &lt.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        matmul_at_acc(&lt.concat, n, d, &du1, d, &mut gl.wo);
        let dconcat = matmul_bt(&du1, n, d, &lp.wo, d);

        let mut dq = vec![T::zero(); n * d];
        let mut dk_ = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dw = vec![T::zero(); n];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..n {
                let wrow = &lt.attn[(h * n + i) * n..(h * n + i) * n + i + 1];
                let dout = &dconcat[i * d + cols.start..i * d + cols.end];
                let mut inner = T::zero();
                for j in 0..=i {
                    let vj = &lt.v[j * d + cols.start..j * d + cols.end];
                    let mut s = T::zero();
                    for c in 0..dk {
                        s += dout[c] * vj[c];
                        dv[j * d + cols.start + c] += wrow[j] * dout[c];
                    }
                    dw[j] = s;
                    inner += wrow[j] * s;
                }
                for j in 0..=i {
                    let ds = wrow[j] * (dw[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in cols.clone() {
                        dq[i * d + c] += ds * lt.k[j * d + c];
                        dk_[j * d + c] += ds * lt.q[i * d + c];
                    }
                }
            }
        }
        matmul_at_acc(&lt.input, n, d, &dq, d, &mut gl.wq);
        matmul_at_acc(&lt.input, n, d, &dk_, d, &mut gl.wk);
        matmul_at_acc(&lt.input, n, d, &dv, d, &mut gl.wv);
        let mut dinput = du1;
        for (m, g) in [(&lp.wq, &dq), (&lp.wk, &dk_), (&lp.wv, &dv)] {
            for (a, b) in dinput.iter_mut().zip(matmul_bt(g, n, d, m, d)) {
                *a += b;
            }
        }
        dx = dinput;
    }

    for (i, &tok) in input.iter().enumerate() {
        let row = &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        for (g, &x) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
            *g += x;
        }
    }
    Ok(frame_loss)
}

/// Gradient of the mean batch loss, and that loss.
///
/// Frames are processed in fixed chunks that may run in parallel; chunk
/// results are summed in chunk order, so the result is identical for any
/// thread count.
pub fn grad<T: Scalar>(params: &Params<T>, batch: &[FramedSequence]) -> Result<(Params<T>, f64), ModelError> {
    let weight = 1.0 / batch.len().max(1) as f64;
    let partials: Vec<(Params<T>, f64)> = batch
        .par_chunks(CHUNK_FRAMES)
        .map(|chunk| {
            let mut g = Params::zeros(&params.config);
            let mut loss = 0.0;
            for f in chunk {
                loss += accumulate_frame(params, f, weight, &mut g)?;
            }
            Ok((g, loss))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut loss) = iter.next().unwrap_or_else(|| (Params::zeros(&params.config), 0.0));
    for (g, l) in iter {
        total.add_assign(&g);
        loss += l;
    }
    Ok((total, loss * weight))
}
