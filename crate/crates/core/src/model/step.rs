//! One-token-at-a-time inference with split key/value caches.
//!
//! Speech-stream tokens attend only to the speech cache. A text-slot query
//! attends to the first `speech_visible` speech entries followed by the
//! text cache, which is the same key order the full forward pass uses.

use super::scalar::{add_bias, dot, gelu, layer_norm_row, matmul, Scalar};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::seqlayout::Modality;
use crate::tokens::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamCache<F> {
    d: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
    last_position: Option<usize>,
}

impl<F: Scalar> StreamCache<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let cfg = params.config();
        Self {
            d: cfg.d_model,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
            last_position: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_position(&self) -> Option<usize> {
        self.last_position
    }

    fn truncate(&mut self, len: usize) {
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.d);
            v.truncate(len * self.d);
        }
    }
}

/// Speech-stream and text-slot caches of one decoding stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache<F> {
    pub speech: StreamCache<F>,
    pub text: StreamCache<F>,
}

impl<F: Scalar> StepCache<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self { speech: StreamCache::new(params), text: StreamCache::new(params) }
    }
}

fn check_position<F: Scalar>(
    params: &ModelParams<F>,
    cache: &StreamCache<F>,
    position: usize,
    stream: &'static str,
) -> Result<()> {
    let max = params.config().max_positions;
    if position >= max {
        return Err(Error::PositionOverflow { position, max });
    }
    match cache.last_position {
        Some(last) if position < last => Err(Error::PositionRegression { stream, position, last }),
        _ => Ok(()),
    }
}

fn step_core<F: Scalar>(
    params: &ModelParams<F>,
    token: TokenId,
    position: usize,
    modality: Modality,
    own: &mut StreamCache<F>,
    prefix: Option<(&StreamCache<F>, usize)>,
) -> Result<Vec<F>> {
    let cfg = params.config();
    let lay = params.layout();
    let (d, ff, v, nh, dk) = (cfg.d_model, cfg.d_ff, cfg.vocab_size(), cfg.n_heads, cfg.head_dim());
    if token >= cfg.vocab.total() {
        return Err(Error::TokenOutOfRange { id: token, total: cfg.vocab.total() });
    }
    let scale = F::of(1.0 / (dk as f64).sqrt());

    let te = params.slice(lay.tok + token as usize * d, d);
    let pe = params.slice(lay.pos + position * d, d);
    let me = params.slice(lay.modality + modality as usize * d, d);
    let mut x: Vec<F> = (0..d).map(|c| te[c] + pe[c] + me[c]).collect();
    let mut xhat = vec![F::zero(); d];
    let mut h = vec![F::zero(); d];
    let mut qkv = vec![F::zero(); 3 * d];
    let mut att = vec![F::zero(); d];
    let mut o = vec![F::zero(); d];
    let mut f1 = vec![F::zero(); ff];
    let mut scores: Vec<F> = Vec::new();

    for (l, lo) in lay.layers.iter().enumerate() {
        layer_norm_row(&x, params.slice(lo.ln1_g, d), params.slice(lo.ln1_b, d), &mut xhat, &mut h);
        matmul(&h, params.slice(lo.w_qkv, d * 3 * d), 1, d, 3 * d, &mut qkv);
        add_bias(&mut qkv, params.slice(lo.b_qkv, 3 * d));
        own.keys[l].extend_from_slice(&qkv[d..2 * d]);
        own.values[l].extend_from_slice(&qkv[2 * d..]);

        let (pre_k, pre_v, pre_n): (&[F], &[F], usize) = match prefix {
            Some((c, n)) => (&c.keys[l][..n * d], &c.values[l][..n * d], n),
            None => (&[], &[], 0),
        };
        let own_n = own.len + 1;
        let (own_k, own_v) = (&own.keys[l][..], &own.values[l][..]);
        att.iter_mut().for_each(|a| *a = F::zero());
        for hd in 0..nh {
            let hs = hd * dk..(hd + 1) * dk;
            let q = &qkv[hs.clone()];
            scores.clear();
            scores.extend((0..pre_n).map(|j| dot(q, &pre_k[j * d + hd * dk..j * d + (hd + 1) * dk]) * scale));
            scores.extend((0..own_n).map(|j| dot(q, &own_k[j * d + hd * dk..j * d + (hd + 1) * dk]) * scale));
            let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut att[hs];
            for (idx, &e) in scores.iter().enumerate() {
                let p = e / sum;
                let vj = if idx < pre_n {
                    &pre_v[idx * d + hd * dk..idx * d + (hd + 1) * dk]
                } else {
                    let j = idx - pre_n;
                    &own_v[j * d + hd * dk..j * d + (hd + 1) * dk]
                };
                for c in 0..dk {
                    out[c] += p * vj[c];
                }
            }
        }
        matmul(&att, params.slice(lo.w_o, d * d), 1, d, d, &mut o);
        add_bias(&mut o, params.slice(lo.b_o, d));
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);

        layer_norm_row(&x, params.slice(lo.ln2_g, d), params.slice(lo.ln2_b, d), &mut xhat, &mut h);
        matmul(&h, params.slice(lo.w_1, d * ff), 1, d, ff, &mut f1);
        add_bias(&mut f1, params.slice(lo.b_1, ff));
        f1.iter_mut().for_each(|z| *z = gelu(*z));
        matmul(&f1, params.slice(lo.w_2, ff * d), 1, ff, d, &mut o);
        add_bias(&mut o, params.slice(lo.b_2, d));
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
        if !x.iter().all(|z| z.is_finite()) {
            own.truncate(own.len);
            return Err(Error::NonFinite { layer: l });
        }
    }
    layer_norm_row(&x, params.slice(lay.lnf_g, d), params.slice(lay.lnf_b, d), &mut xhat, &mut h);
    let mut logits = vec![F::zero(); v];
    matmul(&h, params.slice(lay.w_out, d * v), 1, d, v, &mut logits);
    add_bias(&mut logits, params.slice(lay.b_out, v));
    own.len += 1;
    own.last_position = Some(position);
    Ok(logits)
}

/// Appends one speech-stream token (speech frame or BOUNDARY).
pub fn speech_step<F: Scalar>(
    params: &ModelParams<F>,
    speech: &mut StreamCache<F>,
    token: TokenId,
    position: usize,
) -> Result<Vec<F>> {
    check_position(params, speech, position, "speech")?;
    step_core(params, token, position, Modality::SpeechStream, speech, None)
}

/// Issues one text-slot query seeing the first `speech_visible` stream entries.
pub fn text_step<F: Scalar>(
    params: &ModelParams<F>,
    speech: &StreamCache<F>,
    text: &mut StreamCache<F>,
    token: TokenId,
    position: usize,
    speech_visible: usize,
) -> Result<Vec<F>> {
    if speech_visible > speech.len() {
        return Err(Error::VisibleExceedsCache { visible: speech_visible, cached: speech.len() });
    }
    check_position(params, text, position, "text")?;
    step_core(params, token, position, Modality::TextSlot, text, Some((speech, speech_visible)))
}

/// Single entry point dispatching on modality; `speech_visible` is only
/// read for text-slot queries.
pub fn forward_step<F: Scalar>(
    params: &ModelParams<F>,
    cache: &mut StepCache<F>,
    token: TokenId,
    position: usize,
    modality: Modality,
    speech_visible: usize,
) -> Result<Vec<F>> {
    match modality {
        Modality::SpeechStream => speech_step(params, &mut cache.speech, token, position),
        Modality::TextSlot => text_step(params, &cache.speech, &mut cache.text, token, position, speech_visible),
    }
}
