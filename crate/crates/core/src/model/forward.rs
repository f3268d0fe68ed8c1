//! Full-sequence forward pass over a packed batch of layouts, and its exact
//! reverse-mode gradient.
//!
//! Rows of all sequences are stacked so the dense projections run as one
//! matrix product; attention runs per row over that row's visible keys only,
//! in ascending key order, so masked keys never enter a sum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::{
    add_bias, col_sum_acc, dot, gelu, gelu_grad, layer_norm_row, matmul, matmul_at_acc, matmul_bt, Scalar,
};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::seqlayout::{AttentionMask, LayoutSequence};

pub enum Mode<'a> {
    Eval,
    /// Records a tape; dropout draws from the given generator.
    Train(&'a mut ChaCha8Rng),
}

struct LayerTape<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    att: Vec<F>,
    drop_o: Option<Vec<F>>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    h2: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
    drop_f: Option<Vec<F>>,
}

/// Intermediates of one training-mode forward pass. [`backward`] consumes
/// it, so a tape cannot be replayed.
pub struct Tape<'p, F> {
    params: &'p ModelParams<F>,
    rows: usize,
    tokens: Vec<usize>,
    positions: Vec<usize>,
    modality: Vec<usize>,
    keys: Vec<u32>,
    key_off: Vec<usize>,
    drop_emb: Option<Vec<F>>,
    layers: Vec<LayerTape<F>>,
    xhat_f: Vec<F>,
    rstd_f: Vec<F>,
    h_f: Vec<F>,
}

pub struct ForwardOutput<'p, F> {
    pub logits: Vec<F>,
    pub rows: usize,
    pub vocab_size: usize,
    /// Row offset of each packed sequence.
    pub offsets: Vec<usize>,
    pub tape: Option<Tape<'p, F>>,
}

impl<F> ForwardOutput<'_, F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    /// Logits of the `s`-th packed sequence.
    pub fn sequence(&self, s: usize) -> &[F] {
        let end = self.offsets.get(s + 1).copied().unwrap_or(self.rows);
        &self.logits[self.offsets[s] * self.vocab_size..end * self.vocab_size]
    }
}

fn dropout_mask<F: Scalar>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect()
}

fn check_finite<F: Scalar>(x: &[F], layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

pub fn forward<'p, F: Scalar>(
    params: &'p ModelParams<F>,
    layout: &LayoutSequence,
    mask: &AttentionMask,
    mode: Mode<'_>,
) -> Result<ForwardOutput<'p, F>> {
    forward_batch(params, &[(layout, mask)], mode)
}

pub fn forward_batch<'p, F: Scalar>(
    params: &'p ModelParams<F>,
    items: &[(&LayoutSequence, &AttentionMask)],
    mut mode: Mode<'_>,
) -> Result<ForwardOutput<'p, F>> {
    let cfg = params.config();
    let (d, ff, v, nh, dk) = (cfg.d_model, cfg.d_ff, cfg.vocab_size(), cfg.n_heads, cfg.head_dim());
    let lay = params.layout();

    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut modality = Vec::new();
    let mut keys: Vec<u32> = Vec::new();
    let mut key_off = vec![0usize];
    let mut offsets = Vec::with_capacity(items.len());
    for (layout, mask) in items {
        let n = layout.len();
        if mask.size() != n {
            return Err(Error::Shape(format!("mask side {} for layout length {n}", mask.size())));
        }
        if layout.positions.len() != n || layout.modality.len() != n {
            return Err(Error::Shape("layout fields disagree in length".into()));
        }
        let start = tokens.len();
        offsets.push(start);
        for i in 0..n {
            let tok = layout.inputs[i];
            if tok >= cfg.vocab.total() {
                return Err(Error::TokenOutOfRange { id: tok, total: cfg.vocab.total() });
            }
            if layout.positions[i] >= cfg.max_positions {
                return Err(Error::PositionOverflow { position: layout.positions[i], max: cfg.max_positions });
            }
            tokens.push(tok as usize);
            positions.push(layout.positions[i]);
            modality.push(layout.modality[i] as usize);
            keys.extend(mask.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| (start + j) as u32));
            key_off.push(keys.len());
        }
    }
    let rows = tokens.len();
    let n_keys = keys.len();
    let train = matches!(mode, Mode::Train(_));
    let p_drop = if train { cfg.dropout_p } else { 0.0 };

    // embeddings
    let mut x = vec![F::zero(); rows * d];
    for r in 0..rows {
        let te = params.slice(lay.tok + tokens[r] * d, d);
        let pe = params.slice(lay.pos + positions[r] * d, d);
        let me = params.slice(lay.modality + modality[r] * d, d);
        for c in 0..d {
            x[r * d + c] = te[c] + pe[c] + me[c];
        }
    }
    let mut draw = |n: usize| -> Option<Vec<F>> {
        match &mut mode {
            Mode::Train(rng) if p_drop > 0.0 => Some(dropout_mask(n, p_drop, rng)),
            _ => None,
        }
    };
    let drop_emb = draw(rows * d);
    if let Some(m) = &drop_emb {
        x.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
    }

    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut layer_tapes = Vec::with_capacity(cfg.n_layers);
    let mut scores: Vec<F> = Vec::new();
    for (li, lo) in lay.layers.iter().enumerate() {
        let mut xhat1 = vec![F::zero(); rows * d];
        let mut h1 = vec![F::zero(); rows * d];
        let mut rstd1 = vec![F::zero(); rows];
        let (g1, b1) = (params.slice(lo.ln1_g, d), params.slice(lo.ln1_b, d));
        for r in 0..rows {
            let s = r * d..(r + 1) * d;
            rstd1[r] = layer_norm_row(&x[s.clone()], g1, b1, &mut xhat1[s.clone()], &mut h1[s]);
        }
        let mut qkv = vec![F::zero(); rows * 3 * d];
        matmul(&h1, params.slice(lo.w_qkv, d * 3 * d), rows, d, 3 * d, &mut qkv);
        add_bias(&mut qkv, params.slice(lo.b_qkv, 3 * d));

        let mut probs = vec![F::zero(); nh * n_keys];
        let mut att = vec![F::zero(); rows * d];
        for r in 0..rows {
            let ks = &keys[key_off[r]..key_off[r + 1]];
            if ks.is_empty() {
                continue;
            }
            for h in 0..nh {
                let q = &qkv[r * 3 * d + h * dk..r * 3 * d + (h + 1) * dk];
                scores.clear();
                scores.extend(ks.iter().map(|&j| {
                    let j = j as usize;
                    dot(q, &qkv[j * 3 * d + d + h * dk..j * 3 * d + d + (h + 1) * dk]) * scale
                }));
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let p_row = &mut probs[h * n_keys + key_off[r]..h * n_keys + key_off[r + 1]];
                let out = &mut att[r * d + h * dk..r * d + (h + 1) * dk];
                for (idx, &j) in ks.iter().enumerate() {
                    let p = scores[idx] / sum;
                    p_row[idx] = p;
                    let j = j as usize;
                    let vj = &qkv[j * 3 * d + 2 * d + h * dk..j * 3 * d + 2 * d + (h + 1) * dk];
                    for c in 0..dk {
                        out[c] += p * vj[c];
                    }
                }
            }
        }
        let mut o = vec![F::zero(); rows * d];
        matmul(&att, params.slice(lo.w_o, d * d), rows, d, d, &mut o);
        add_bias(&mut o, params.slice(lo.b_o, d));
        let drop_o = draw(rows * d);
        match &drop_o {
            Some(m) => x.iter_mut().zip(&o).zip(m).for_each(|((a, &b), &k)| *a += b * k),
            None => x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b),
        }

        let mut xhat2 = vec![F::zero(); rows * d];
        let mut h2 = vec![F::zero(); rows * d];
        let mut rstd2 = vec![F::zero(); rows];
        let (g2, b2) = (params.slice(lo.ln2_g, d), params.slice(lo.ln2_b, d));
        for r in 0..rows {
            let s = r * d..(r + 1) * d;
            rstd2[r] = layer_norm_row(&x[s.clone()], g2, b2, &mut xhat2[s.clone()], &mut h2[s]);
        }
        let mut f1 = vec![F::zero(); rows * ff];
        matmul(&h2, params.slice(lo.w_1, d * ff), rows, d, ff, &mut f1);
        add_bias(&mut f1, params.slice(lo.b_1, ff));
        let g: Vec<F> = f1.iter().map(|&z| gelu(z)).collect();
        let mut f2 = vec![F::zero(); rows * d];
        matmul(&g, params.slice(lo.w_2, ff * d), rows, ff, d, &mut f2);
        add_bias(&mut f2, params.slice(lo.b_2, d));
        let drop_f = draw(rows * d);
        match &drop_f {
            Some(m) => x.iter_mut().zip(&f2).zip(m).for_each(|((a, &b), &k)| *a += b * k),
            None => x.iter_mut().zip(&f2).for_each(|(a, &b)| *a += b),
        }
        check_finite(&x, li)?;
        if train {
            layer_tapes.push(LayerTape { xhat1, rstd1, h1, qkv, probs, att, drop_o, xhat2, rstd2, h2, f1, g, drop_f });
        }
    }

    let mut xhat_f = vec![F::zero(); rows * d];
    let mut h_f = vec![F::zero(); rows * d];
    let mut rstd_f = vec![F::zero(); rows];
    let (gf, bf) = (params.slice(lay.lnf_g, d), params.slice(lay.lnf_b, d));
    for r in 0..rows {
        let s = r * d..(r + 1) * d;
        rstd_f[r] = layer_norm_row(&x[s.clone()], gf, bf, &mut xhat_f[s.clone()], &mut h_f[s]);
    }
    let mut logits = vec![F::zero(); rows * v];
    matmul(&h_f, params.slice(lay.w_out, d * v), rows, d, v, &mut logits);
    add_bias(&mut logits, params.slice(lay.b_out, v));
    check_finite(&logits, cfg.n_layers)?;

    let tape = train.then(|| Tape {
        params,
        rows,
        tokens,
        positions,
        modality,
        keys,
        key_off,
        drop_emb,
        layers: layer_tapes,
        xhat_f,
        rstd_f,
        h_f,
    });
    Ok(ForwardOutput { logits, rows, vocab_size: v, offsets, tape })
}

/// Backward through a layer norm; accumulates gain/offset gradients and
/// writes (or adds, if `accumulate`) the input gradient into `dx`.
fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    d_gain: &mut [F],
    d_bias: &mut [F],
    dx: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let s = r * d..(r + 1) * d;
        let (dyr, xr) = (&dy[s.clone()], &xhat[s.clone()]);
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_x = F::zero();
        for c in 0..d {
            d_gain[c] += dyr[c] * xr[c];
            d_bias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_x += dxhat[c] * xr[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_x *= inv_d;
        let out = &mut dx[s];
        for c in 0..d {
            out[c] += rs * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_x);
        }
    }
}

/// Gradients of all parameters given `d loss / d logits`.
pub fn backward<F: Scalar>(tape: Tape<'_, F>, dlogits: &[F]) -> Result<Vec<F>> {
    let params = tape.params;
    let cfg = params.config();
    let lay = params.layout();
    let (d, ff, v, nh, dk) = (cfg.d_model, cfg.d_ff, cfg.vocab_size(), cfg.n_heads, cfg.head_dim());
    let rows = tape.rows;
    if dlogits.len() != rows * v {
        return Err(Error::Shape(format!("upstream gradient has {} values, expected {}", dlogits.len(), rows * v)));
    }
    let mut grad = vec![F::zero(); params.len()];
    let n_keys = tape.keys.len();
    let scale = F::of(1.0 / (dk as f64).sqrt());

    // output projection and final norm
    matmul_at_acc(&tape.h_f, dlogits, rows, d, v, &mut grad[lay.w_out..lay.w_out + d * v]);
    col_sum_acc(dlogits, v, &mut grad[lay.b_out..lay.b_out + v]);
    let mut dh = vec![F::zero(); rows * d];
    matmul_bt(dlogits, params.slice(lay.w_out, d * v), rows, d, v, &mut dh);
    let mut dx = vec![F::zero(); rows * d];
    {
        let (dg, rest) = grad[lay.lnf_g..].split_at_mut(d);
        layer_norm_backward(&dh, &tape.xhat_f, &tape.rstd_f, params.slice(lay.lnf_g, d), dg, &mut rest[..d], &mut dx);
    }

    let mut dp: Vec<F> = Vec::new();
    for (lo, lt) in lay.layers.iter().zip(&tape.layers).rev() {
        // x_out = x_mid + drop(ffn(ln2(x_mid)))
        let df2: Vec<F> = match &lt.drop_f {
            Some(m) => dx.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => dx.clone(),
        };
        matmul_at_acc(&lt.g, &df2, rows, ff, d, &mut grad[lo.w_2..lo.w_2 + ff * d]);
        col_sum_acc(&df2, d, &mut grad[lo.b_2..lo.b_2 + d]);
        let mut dg = vec![F::zero(); rows * ff];
        matmul_bt(&df2, params.slice(lo.w_2, ff * d), rows, ff, d, &mut dg);
        for (g, &z) in dg.iter_mut().zip(&lt.f1) {
            *g *= gelu_grad(z);
        }
        matmul_at_acc(&lt.h2, &dg, rows, d, ff, &mut grad[lo.w_1..lo.w_1 + d * ff]);
        col_sum_acc(&dg, ff, &mut grad[lo.b_1..lo.b_1 + ff]);
        matmul_bt(&dg, params.slice(lo.w_1, d * ff), rows, d, ff, &mut dh);
        {
            let (dgain, rest) = grad[lo.ln2_g..].split_at_mut(d);
            let dbias = &mut rest[lo.ln2_b - lo.ln2_g - d..][..d];
            layer_norm_backward(&dh, &lt.xhat2, &lt.rstd2, params.slice(lo.ln2_g, d), dgain, dbias, &mut dx);
        }

        // x_mid = x_in + drop(attn(ln1(x_in)))
        let d_o: Vec<F> = match &lt.drop_o {
            Some(m) => dx.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => dx.clone(),
        };
        matmul_at_acc(&lt.att, &d_o, rows, d, d, &mut grad[lo.w_o..lo.w_o + d * d]);
        col_sum_acc(&d_o, d, &mut grad[lo.b_o..lo.b_o + d]);
        let mut datt = vec![F::zero(); rows * d];
        matmul_bt(&d_o, params.slice(lo.w_o, d * d), rows, d, d, &mut datt);

        let mut dqkv = vec![F::zero(); rows * 3 * d];
        for r in 0..rows {
            let ks = &tape.keys[tape.key_off[r]..tape.key_off[r + 1]];
            for h in 0..nh {
                let p_row = &lt.probs[h * n_keys + tape.key_off[r]..h * n_keys + tape.key_off[r + 1]];
                let da = &datt[r * d + h * dk..r * d + (h + 1) * dk];
                dp.clear();
                let mut sum_pdp = F::zero();
                for (idx, &j) in ks.iter().enumerate() {
                    let j = j as usize;
                    let vj = &lt.qkv[j * 3 * d + 2 * d + h * dk..j * 3 * d + 2 * d + (h + 1) * dk];
                    let g = dot(da, vj);
                    sum_pdp += p_row[idx] * g;
                    dp.push(g);
                    let dv = &mut dqkv[j * 3 * d + 2 * d + h * dk..j * 3 * d + 2 * d + (h + 1) * dk];
                    for c in 0..dk {
                        dv[c] += p_row[idx] * da[c];
                    }
                }
                let q_off = r * 3 * d + h * dk;
                for (idx, &j) in ks.iter().enumerate() {
                    let ds = p_row[idx] * (dp[idx] - sum_pdp) * scale;
                    let j = j as usize;
                    let k_off = j * 3 * d + d + h * dk;
                    for c in 0..dk {
                        let kc = lt.qkv[k_off + c];
                        let qc = lt.qkv[q_off + c];
                        dqkv[q_off + c] += ds * kc;
                        dqkv[k_off + c] += ds * qc;
                    }
                }
            }
        }
        matmul_at_acc(&lt.h1, &dqkv, rows, d, 3 * d, &mut grad[lo.w_qkv..lo.w_qkv + d * 3 * d]);
        col_sum_acc(&dqkv, 3 * d, &mut grad[lo.b_qkv..lo.b_qkv + 3 * d]);
        matmul_bt(&dqkv, params.slice(lo.w_qkv, d * 3 * d), rows, d, 3 * d, &mut dh);
        {
            let (dgain, rest) = grad[lo.ln1_g..].split_at_mut(d);
            let dbias = &mut rest[lo.ln1_b - lo.ln1_g - d..][..d];
            layer_norm_backward(&dh, &lt.xhat1, &lt.rstd1, params.slice(lo.ln1_g, d), dgain, dbias, &mut dx);
        }
    }

    if let Some(m) = &tape.drop_emb {
        dx.iter_mut().zip(m).for_each(|(a, &b)| *a *= b);
    }
    for r in 0..rows {
        let g = &dx[r * d..(r + 1) * d];
        for (base, idx) in [(lay.tok, tape.tokens[r]), (lay.pos, tape.positions[r]), (lay.modality, tape.modality[r])] {
            let dst = &mut grad[base + idx * d..base + (idx + 1) * d];
            for c in 0..d {
                dst[c] += g[c];
            }
        }
    }
    Ok(grad)
}
