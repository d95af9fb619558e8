//! Forward pass with activation cache and reverse-mode gradients, generic
//! over the scalar type.
//!
//! Inputs are assumed validated by the caller (`ModelState` does that).

use alloc::vec;
use alloc::vec::Vec;

use super::ops::{gelu, gelu_grad, matmul, matmul_a_bt_acc, matmul_at_b_acc, softmax_in_place};
use super::params::Params;
use crate::sample::HeadId;
use crate::scalar::{Real, PROB_FLOOR};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    pub out: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `n × n`, row-stochastic, zero above the diagonal.
    pub attn: Vec<T>,
    pub o: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub heads: Vec<HeadCache<T>>,
    pub ln2: LnCache<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub n: usize,
    pub layers: Vec<LayerCache<T>>,
    pub lnf: LnCache<T>,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> LnCache<T> {
    let n = x.len() / d;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; n];
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::ONE / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let xh = (row[c] - mean) * r;
            xhat[i * d + c] = xh;
            out[i * d + c] = xh * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Accumulates the input gradient into `dx` and, when given, parameter gradients.
fn layer_norm_backward<T: Real>(
    cache: &LnCache<T>,
    gain: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    mut dparams: Option<(&mut [T], &mut [T])>,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for (i, dy_row) in dy.chunks_exact(d).enumerate() {
        if dy_row.iter().all(|&v| v == T::ZERO) {
            continue;
        }
        let xhat = &cache.xhat[i * d..(i + 1) * d];
        if let Some((dg, db)) = dparams.as_mut() {
            for c in 0..d {
                dg[c] += dy_row[c] * xhat[c];
                db[c] += dy_row[c];
            }
        }
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for c in 0..d {
            dxhat[c] = dy_row[c] * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let r = cache.rstd[i];
        for c in 0..d {
            dx[i * d + c] += r * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
}

/// Runs the network over `tokens`, keeping every activation needed for the
/// backward pass.
pub fn forward<T: Real>(p: &Params<T>, tokens: &[TokenId]) -> ForwardCache<T> {
    let cfg = &p.cfg;
    let n = tokens.len();
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let f = cfg.ff_dim();
    let scale = T::from_f64(1.0 / libm::sqrt(hd as f64));

    let mut x = vec![T::ZERO; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let te = &p.tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &p.pos_emb[i * d..(i + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c];
        }
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut tmp = vec![T::ZERO; n * d];
    for lp in &p.layers {
        let ln1 = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias, d);
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for hw in &lp.heads {
            let mut q = vec![T::ZERO; n * hd];
            let mut k = vec![T::ZERO; n * hd];
            let mut v = vec![T::ZERO; n * hd];
            matmul(&ln1.out, &hw.wq, n, d, hd, &mut q);
            matmul(&ln1.out, &hw.wk, n, d, hd, &mut k);
            matmul(&ln1.out, &hw.wv, n, d, hd, &mut v);
            let mut attn = vec![T::ZERO; n * n];
            for i in 0..n {
                let qi = &q[i * hd..(i + 1) * hd];
                let row = &mut attn[i * n..i * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = super::ops::dot(qi, &k[j * hd..(j + 1) * hd]) * scale;
                }
                softmax_in_place(row);
            }
            let mut o = vec![T::ZERO; n * hd];
            matmul(&attn, &v, n, n, hd, &mut o);
            matmul(&o, &hw.wo, n, hd, d, &mut tmp);
            for (xv, &t) in x.iter_mut().zip(&tmp) {
                *xv += t;
            }
            heads.push(HeadCache { q, k, v, attn, o });
        }
        let ln2 = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias, d);
        let mut ff_pre = vec![T::ZERO; n * f];
        matmul(&ln2.out, &lp.ff_w1, n, d, f, &mut ff_pre);
        for row in ff_pre.chunks_exact_mut(f) {
            for (v, &b) in row.iter_mut().zip(&lp.ff_b1) {
                *v += b;
            }
        }
        let ff_act: Vec<T> = ff_pre.iter().map(|&v| gelu(v)).collect();
        matmul(&ff_act, &lp.ff_w2, n, f, d, &mut tmp);
        for (i, row) in tmp.chunks_exact(d).enumerate() {
            for c in 0..d {
                x[i * d + c] += row[c] + lp.ff_b2[c];
            }
        }
        layers.push(LayerCache {
            ln1,
            heads,
            ln2,
            ff_pre,
            ff_act,
        });
    }
    let lnf = layer_norm(&x, &p.lnf_gain, &p.lnf_bias, d);
    ForwardCache { n, layers, lnf }
}

/// Logits of one position.
pub fn logits_at<T: Real>(p: &Params<T>, cache: &ForwardCache<T>, pos: usize) -> Vec<T> {
    let d = p.cfg.model_dim;
    let v = p.cfg.vocab_size;
    let mut out = vec![T::ZERO; v];
    matmul_a_bt_acc(&cache.lnf.out[pos * d..(pos + 1) * d], &p.tok_emb, 1, d, v, &mut out);
    out
}

/// Where gradients go.
pub enum GradSink<'a, T> {
    /// Accumulate into every parameter.
    Full(&'a mut Params<T>),
    /// Accumulate only into one head's query/key projections; everything else
    /// is a constant. With `freeze_key` the key gradient is left untouched.
    HeadQk {
        head: HeadId,
        dwq: &'a mut [T],
        dwk: &'a mut [T],
        freeze_key: bool,
    },
}

/// Backpropagates `dlogits` (the loss gradient w.r.t. the logits of
/// position `pos`) through the cached forward pass.
pub fn backward_from<T: Real>(
    p: &Params<T>,
    cache: &ForwardCache<T>,
    tokens: &[TokenId],
    pos: usize,
    dlogits: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let cfg = &p.cfg;
    let n = cache.n;
    let d = cfg.model_dim;
    let hd = cfg.head_dim();
    let f = cfg.ff_dim();
    let vocab = cfg.vocab_size;
    let scale = T::from_f64(1.0 / libm::sqrt(hd as f64));

    let mut dhf = vec![T::ZERO; n * d];
    matmul_at_b_acc(dlogits, &p.tok_emb, vocab, 1, d, &mut dhf[pos * d..(pos + 1) * d]);
    let mut dx = vec![T::ZERO; n * d];
    match sink {
        GradSink::Full(g) => {
            matmul_at_b_acc(dlogits, &cache.lnf.out[pos * d..(pos + 1) * d], 1, vocab, d, &mut g.tok_emb);
            layer_norm_backward(
                &cache.lnf,
                &p.lnf_gain,
                &dhf,
                d,
                &mut dx,
                Some((&mut g.lnf_gain, &mut g.lnf_bias)),
            );
        }
        GradSink::HeadQk { .. } => {
            layer_norm_backward(&cache.lnf, &p.lnf_gain, &dhf, d, &mut dx, None);
        }
    }

    let stop_layer = match sink {
        GradSink::Full(_) => 0,
        GradSink::HeadQk { head, .. } => head.layer,
    };

    for l in (stop_layer..cfg.num_layers).rev() {
        let lp = &p.layers[l];
        let lc = &cache.layers[l];

        // feed-forward block
        let mut d_act = vec![T::ZERO; n * f];
        matmul_a_bt_acc(&dx, &lp.ff_w2, n, d, f, &mut d_act);
        let d_pre: Vec<T> = d_act
            .iter()
            .zip(&lc.ff_pre)
            .map(|(&g, &x)| g * gelu_grad(x))
            .collect();
        let mut dh2 = vec![T::ZERO; n * d];
        matmul_a_bt_acc(&d_pre, &lp.ff_w1, n, f, d, &mut dh2);
        let mut dx_mid = dx.clone();
        if let GradSink::Full(g) = sink {
            let gl = &mut g.layers[l];
            for row in dx.chunks_exact(d) {
                for (b, &v) in gl.ff_b2.iter_mut().zip(row) {
                    *b += v;
                }
            }
            matmul_at_b_acc(&lc.ff_act, &dx, n, f, d, &mut gl.ff_w2);
            for row in d_pre.chunks_exact(f) {
                for (b, &v) in gl.ff_b1.iter_mut().zip(row) {
                    *b += v;
                }
            }
            matmul_at_b_acc(&lc.ln2.out, &d_pre, n, d, f, &mut gl.ff_w1);
            layer_norm_backward(
                &lc.ln2,
                &lp.ln2_gain,
                &dh2,
                d,
                &mut dx_mid,
                Some((&mut gl.ln2_gain, &mut gl.ln2_bias)),
            );
        } else {
            layer_norm_backward(&lc.ln2, &lp.ln2_gain, &dh2, d, &mut dx_mid, None);
        }

        // attention block
        let at_target = l == stop_layer && matches!(sink, GradSink::HeadQk { .. });
        let mut dh = vec![T::ZERO; n * d];
        for (hh, (hw, hc)) in lp.heads.iter().zip(&lc.heads).enumerate() {
            if let GradSink::HeadQk { head, .. } = sink {
                if at_target && hh != head.head {
                    continue;
                }
            }
            let mut d_o = vec![T::ZERO; n * hd];
            matmul_a_bt_acc(&dx_mid, &hw.wo, n, d, hd, &mut d_o);
            let mut d_attn = vec![T::ZERO; n * n];
            matmul_a_bt_acc(&d_o, &hc.v, n, hd, n, &mut d_attn);
            // softmax backward, folded with the score scale
            let mut d_scores = d_attn;
            for i in 0..n {
                let a = &hc.attn[i * n..(i + 1) * n];
                let row = &mut d_scores[i * n..(i + 1) * n];
                let s: T = a[..=i].iter().zip(&row[..=i]).map(|(&x, &y)| x * y).sum();
                for j in 0..n {
                    row[j] = if j <= i { a[j] * (row[j] - s) * scale } else { T::ZERO };
                }
            }
            let mut dq = vec![T::ZERO; n * hd];
            matmul(&d_scores, &hc.k, n, n, hd, &mut dq);
            let mut dk = vec![T::ZERO; n * hd];
            matmul_at_b_acc(&d_scores, &hc.q, n, n, hd, &mut dk);

            if at_target {
                if let GradSink::HeadQk {
                    dwq,
                    dwk,
                    freeze_key,
                    ..
                } = sink
                {
                    matmul_at_b_acc(&lc.ln1.out, &dq, n, d, hd, dwq);
                    if !*freeze_key {
                        matmul_at_b_acc(&lc.ln1.out, &dk, n, d, hd, dwk);
                    }
                }
                continue;
            }

            let mut dv = vec![T::ZERO; n * hd];
            matmul_at_b_acc(&hc.attn, &d_o, n, n, hd, &mut dv);
            if let GradSink::Full(g) = sink {
                let gh = &mut g.layers[l].heads[hh];
                matmul_at_b_acc(&hc.o, &dx_mid, n, hd, d, &mut gh.wo);
                matmul_at_b_acc(&lc.ln1.out, &dq, n, d, hd, &mut gh.wq);
                matmul_at_b_acc(&lc.ln1.out, &dk, n, d, hd, &mut gh.wk);
                matmul_at_b_acc(&lc.ln1.out, &dv, n, d, hd, &mut gh.wv);
            }
            matmul_a_bt_acc(&dq, &hw.wq, n, hd, d, &mut dh);
            matmul_a_bt_acc(&dk, &hw.wk, n, hd, d, &mut dh);
            matmul_a_bt_acc(&dv, &hw.wv, n, hd, d, &mut dh);
        }
        if at_target {
            return;
        }

        dx = dx_mid;
        if let GradSink::Full(g) = sink {
            let gl = &mut g.layers[l];
            layer_norm_backward(
                &lc.ln1,
                &lp.ln1_gain,
                &dh,
                d,
                &mut dx,
                Some((&mut gl.ln1_gain, &mut gl.ln1_bias)),
            );
        } else {
            layer_norm_backward(&lc.ln1, &lp.ln1_gain, &dh, d, &mut dx, None);
        }
    }

    if let GradSink::Full(g) = sink {
        for (i, &t) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let te = &mut g.tok_emb[t as usize * d..(t as usize + 1) * d];
            for (a, &b) in te.iter_mut().zip(row) {
                *a += b;
            }
            let pe = &mut g.pos_emb[i * d..(i + 1) * d];
            for (a, &b) in pe.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}

/// Negative log-likelihood of `answer` at the position after `prompt`.
/// When `sink` is given, accumulates `weight ×` its gradient there.
pub fn answer_nll<T: Real>(
    p: &Params<T>,
    prompt: &[TokenId],
    answer: TokenId,
    sink: Option<(&mut GradSink<'_, T>, T)>,
) -> f64 {
    let cache = forward(p, prompt);
    let pos = prompt.len() - 1;
    let mut probs = logits_at(p, &cache, pos);
    softmax_in_place(&mut probs);
    let p_ans = probs[answer as usize].to_f64();
    let loss = -crate::scalar::clamped_ln(p_ans);
    if let Some((sink, weight)) = sink {
        // the clamp is flat below the floor, so no gradient flows there
        if p_ans >= PROB_FLOOR {
            let mut dlogits = probs;
            dlogits[answer as usize] -= T::ONE;
            for v in dlogits.iter_mut() {
                *v = *v * weight;
            }
            backward_from(p, &cache, prompt, pos, &dlogits, sink);
        }
    }
    loss
}
