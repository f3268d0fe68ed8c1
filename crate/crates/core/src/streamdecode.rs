//! Incremental decoders: boundary-triggered BTI emission (greedy or beam
//! over text slots), interleaved TTI greedy decoding, and a full-context
//! decoder for the non-streaming layout.
//!
//! Latency is reported in original input frames. With de-duplication on,
//! the decoder sees the collapsed stream and maps every emission back
//! through the run remap.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::augment::global_dedup;
use crate::error::{Error, Result};
use crate::model::{forward, speech_step, text_step, Mode, ModelParams, Scalar, StreamCache};
use crate::seqlayout::{build_mask, end_of_text, LayoutKind, LayoutSequence, LossKind, MaskVariant, Modality};
use crate::tokens::{TokenId, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: LayoutKind,
    /// Speech frames consumed after a trigger before its text query runs.
    pub delta: usize,
    pub beam: usize,
    pub dedup: bool,
    /// TTI: longest run of text tokens after one speech frame.
    pub max_consecutive_text: usize,
    /// Extra trigger condition: BOUNDARY probability at least this value.
    pub boundary_threshold: Option<f64>,
    /// Non-streaming: cap on emitted tokens.
    pub max_text: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: LayoutKind::Bti,
            delta: 0,
            beam: 1,
            dedup: true,
            max_consecutive_text: 8,
            boundary_threshold: None,
            max_text: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_consecutive_text == 0 || self.max_text == 0 {
            return Err(Error::Config("text caps must be positive".into()));
        }
        if let Some(t) = self.boundary_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("boundary_threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BoundaryTriggered,
    TextEmitted,
    /// TTI: the text run after one frame hit `max_consecutive_text`.
    TextCapReached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeEvent {
    pub kind: EventKind,
    /// Index in the decoder's stream: the BOUNDARY's own index for a
    /// trigger, the visible stream extent for a BTI text query.
    pub stream_index: usize,
    pub consumed_inputs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub text: Vec<TokenId>,
    pub events: Vec<DecodeEvent>,
    /// Input frames left unprocessed because the position budget ran out.
    #[serde(default)]
    pub dropped_inputs: usize,
}

/// What the BTI and TTI engines need from a model.
pub trait StreamModel {
    type Speech;
    type Text: Clone;

    fn vocab(&self) -> VocabSpec;
    fn max_positions(&self) -> usize;
    fn new_speech(&self) -> Self::Speech;
    fn new_text(&self) -> Self::Text;
    /// Appends a speech-stream token and returns next-token logits.
    fn speech_step(&self, speech: &mut Self::Speech, token: TokenId, position: usize) -> Result<Vec<f64>>;
    /// Runs a text-slot query over the first `visible` stream entries.
    fn text_step(
        &self,
        speech: &Self::Speech,
        text: &mut Self::Text,
        token: TokenId,
        position: usize,
        visible: usize,
    ) -> Result<Vec<f64>>;
}

impl<F: Scalar> StreamModel for ModelParams<F> {
    type Speech = StreamCache<F>;
    type Text = StreamCache<F>;

    fn vocab(&self) -> VocabSpec {
        self.config().vocab
    }

    fn max_positions(&self) -> usize {
        self.config().max_positions
    }

    fn new_speech(&self) -> Self::Speech {
        StreamCache::new(self)
    }

    fn new_text(&self) -> Self::Text {
        StreamCache::new(self)
    }

    fn speech_step(&self, speech: &mut Self::Speech, token: TokenId, position: usize) -> Result<Vec<f64>> {
        Ok(speech_step(self, speech, token, position)?.into_iter().map(F::f64).collect())
    }

    fn text_step(
        &self,
        speech: &Self::Speech,
        text: &mut Self::Text,
        token: TokenId,
        position: usize,
        visible: usize,
    ) -> Result<Vec<f64>> {
        Ok(text_step(self, speech, text, token, position, visible)?.into_iter().map(F::f64).collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

struct Hyp<T> {
    text: T,
    tokens: Vec<TokenId>,
    score: f64,
}

struct Pending {
    slot: usize,
    remaining: usize,
}

struct SlotRecord {
    stream_index: usize,
    consumed: usize,
    /// Index of the slot's event in the event log.
    event: usize,
}

/// Shared BTI machinery, driven frame by frame on the (possibly collapsed)
/// input stream.
struct BtiEngine<'m, M: StreamModel> {
    model: &'m M,
    config: DecodeConfig,
    vocab: VocabSpec,
    speech: M::Speech,
    pos: usize,
    consumed: usize,
    hyps: Vec<Hyp<M::Text>>,
    pending: VecDeque<Pending>,
    slots: Vec<SlotRecord>,
    events: Vec<DecodeEvent>,
    dropped: usize,
}

impl<'m, M: StreamModel> BtiEngine<'m, M> {
    fn new(model: &'m M, config: DecodeConfig) -> Self {
        Self {
            model,
            vocab: model.vocab(),
            speech: model.new_speech(),
            pos: 0,
            consumed: 0,
            hyps: vec![Hyp { text: model.new_text(), tokens: Vec::new(), score: 0.0 }],
            pending: VecDeque::new(),
            slots: Vec::new(),
            events: Vec::new(),
            dropped: 0,
            config,
        }
    }

    /// Room for one more stream entry and a text query right after it.
    fn has_room(&self) -> bool {
        self.pos + 2 <= self.model.max_positions()
    }

    /// Feeds one speech frame; `consumed_after` counts original inputs up to it.
    fn push_frame(&mut self, token: TokenId, consumed_after: usize) -> Result<()> {
        self.consumed = consumed_after;
        if !self.has_room() {
            self.dropped += 1;
            return Ok(());
        }
        let logits = self.model.speech_step(&mut self.speech, token, self.pos)?;
        self.pos += 1;
        for p in self.pending.iter_mut() {
            p.remaining = p.remaining.saturating_sub(1);
        }
        while self.pending.front().is_some_and(|p| p.remaining == 0) {
            let p = self.pending.pop_front().expect("front checked");
            self.issue(p.slot)?;
        }
        if self.triggers(&logits) && self.has_room() {
            let at = self.pos;
            self.model.speech_step(&mut self.speech, self.vocab.boundary(), at)?;
            self.pos += 1;
            self.events.push(DecodeEvent {
                kind: EventKind::BoundaryTriggered,
                stream_index: at,
                consumed_inputs: self.consumed,
                token: None,
            });
            let slot = self.slots.len();
            self.slots.push(SlotRecord { stream_index: 0, consumed: 0, event: 0 });
            if self.config.delta == 0 {
                self.issue(slot)?;
            } else {
                self.pending.push_back(Pending { slot, remaining: self.config.delta });
            }
        }
        Ok(())
    }

    fn triggers(&self, logits: &[f64]) -> bool {
        let b = self.vocab.boundary() as usize;
        if argmax(logits) != b {
            return false;
        }
        match self.config.boundary_threshold {
            None => true,
            Some(t) => log_softmax(logits)[b].exp() >= t,
        }
    }

    /// Text query for `slot` over the current stream extent.
    fn issue(&mut self, slot: usize) -> Result<()> {
        let visible = self.pos;
        let position = visible;
        let text_ids = self.vocab.text_range();
        let width = self.config.beam;
        let mut expansions: Vec<(f64, usize, TokenId, M::Text)> = Vec::new();
        for (h, hyp) in self.hyps.iter().enumerate() {
            let input = hyp.tokens.last().copied().unwrap_or(self.vocab.sos_text());
            let mut text = hyp.text.clone();
            let logits = self.model.text_step(&self.speech, &mut text, input, position, visible)?;
            if width == 1 {
                let ix = argmax(&logits[text_ids.start as usize..text_ids.end as usize]);
                let tok = text_ids.start + ix as TokenId;
                expansions.push((hyp.score, h, tok, text));
                continue;
            }
            let lp = log_softmax(&logits);
            let mut cands: Vec<TokenId> = text_ids.clone().collect();
            cands.sort_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b)));
            for &tok in cands.iter().take(width) {
                expansions.push((hyp.score + lp[tok as usize], h, tok, text.clone()));
            }
        }
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        expansions.truncate(width);
        let old = std::mem::take(&mut self.hyps);
        self.hyps = expansions
            .into_iter()
            .map(|(score, h, tok, text)| {
                let mut tokens = old[h].tokens.clone();
                tokens.push(tok);
                Hyp { text, tokens, score }
            })
            .collect();
        let token = (width == 1).then(|| *self.hyps[0].tokens.last().expect("just pushed"));
        self.slots[slot] = SlotRecord { stream_index: visible, consumed: self.consumed, event: self.events.len() };
        self.events.push(DecodeEvent {
            kind: EventKind::TextEmitted,
            stream_index: visible,
            consumed_inputs: self.consumed,
            token,
        });
        Ok(())
    }

    /// Issues queries still waiting on lookahead, over the whole stream.
    fn finish(mut self, total_inputs: usize) -> Result<DecodeOutput> {
        self.consumed = total_inputs;
        while let Some(p) = self.pending.pop_front() {
            self.issue(p.slot)?;
        }
        let best = self.hyps.swap_remove(0);
        for (rec, &tok) in self.slots.iter().zip(&best.tokens) {
            debug_assert_eq!(self.events[rec.event].stream_index, rec.stream_index);
            debug_assert_eq!(self.events[rec.event].consumed_inputs, rec.consumed);
            self.events[rec.event].token = Some(tok);
        }
        Ok(DecodeOutput { text: best.tokens, events: self.events, dropped_inputs: self.dropped })
    }
}

/// Boundary-triggered decoding of one utterance.
pub fn decode_bti<M: StreamModel>(model: &M, speech: &[TokenId], config: &DecodeConfig) -> Result<DecodeOutput> {
    config.validate()?;
    let mut engine = BtiEngine::new(model, config.clone());
    if config.dedup {
        let (frames, remap) = global_dedup(speech);
        for (j, &tok) in frames.iter().enumerate() {
            engine.push_frame(tok, remap.to_orig[j] + 1)?;
        }
    } else {
        for (i, &tok) in speech.iter().enumerate() {
            engine.push_frame(tok, i + 1)?;
        }
    }
    engine.finish(speech.len())
}

/// Push-style BTI decoder for one stream.
pub struct DecoderState<'m, M: StreamModel> {
    engine: Option<BtiEngine<'m, M>>,
    last: Option<TokenId>,
    fed: usize,
    reported: usize,
}

impl<'m, M: StreamModel> DecoderState<'m, M> {
    pub fn new(model: &'m M, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { engine: Some(BtiEngine::new(model, config)), last: None, fed: 0, reported: 0 })
    }

    /// Feeds one input frame and returns the events it settled. With beam
    /// search, text tokens are only known at [`finalize`](Self::finalize).
    pub fn feed(&mut self, token: TokenId) -> Result<Vec<DecodeEvent>> {
        let engine = self.engine.as_mut().ok_or(Error::FeedAfterFinalize)?;
        self.fed += 1;
        let repeat = engine.config.dedup && self.last == Some(token);
        self.last = Some(token);
        if !repeat {
            engine.push_frame(token, self.fed)?;
        }
        Ok(self.take_settled())
    }

    fn take_settled(&mut self) -> Vec<DecodeEvent> {
        let engine = self.engine.as_ref().expect("live engine");
        let mut out = Vec::new();
        while self.reported < engine.events.len() {
            let ev = &engine.events[self.reported];
            if ev.kind == EventKind::TextEmitted && ev.token.is_none() {
                break;
            }
            out.push(ev.clone());
            self.reported += 1;
        }
        out
    }

    /// Ends the stream; the output holds the complete event log.
    pub fn finalize(&mut self) -> Result<DecodeOutput> {
        let engine = self.engine.take().ok_or(Error::FeedAfterFinalize)?;
        engine.finish(self.fed)
    }
}

/// Interleaved greedy decoding on one stream.
pub fn decode_tti<M: StreamModel>(model: &M, speech: &[TokenId], config: &DecodeConfig) -> Result<DecodeOutput> {
    config.validate()?;
    let vocab = model.vocab();
    let (frames, to_orig): (Vec<TokenId>, Vec<usize>) = if config.dedup {
        let (f, remap) = global_dedup(speech);
        (f, remap.to_orig)
    } else {
        (speech.to_vec(), (0..speech.len()).collect())
    };
    let max = model.max_positions();
    let mut cache = model.new_speech();
    let mut out = DecodeOutput::default();
    let mut pos = 0;
    for (j, &tok) in frames.iter().enumerate() {
        if pos >= max {
            out.dropped_inputs = speech.len() - to_orig[j];
            break;
        }
        let consumed = to_orig[j] + 1;
        let mut logits = model.speech_step(&mut cache, tok, pos)?;
        pos += 1;
        let mut run = 0;
        loop {
            let next = argmax(&logits) as TokenId;
            if !vocab.is_text(next) || pos >= max {
                break;
            }
            if run == config.max_consecutive_text {
                out.events.push(DecodeEvent {
                    kind: EventKind::TextCapReached,
                    stream_index: pos,
                    consumed_inputs: consumed,
                    token: None,
                });
                break;
            }
            out.text.push(next);
            out.events.push(DecodeEvent {
                kind: EventKind::TextEmitted,
                stream_index: pos,
                consumed_inputs: consumed,
                token: Some(next),
            });
            logits = model.speech_step(&mut cache, next, pos)?;
            pos += 1;
            run += 1;
        }
    }
    Ok(out)
}

/// Prefix-LM query layout: the speech frames, then `[SOS, prefix..]`.
fn nonstreaming_query(frames: &[TokenId], prefix: &[TokenId], vocab: &VocabSpec) -> LayoutSequence {
    let n = frames.len();
    let slots = prefix.len() + 1;
    let mut inputs = frames.to_vec();
    inputs.push(vocab.sos_text());
    inputs.extend_from_slice(prefix);
    LayoutSequence {
        kind: LayoutKind::NonStreaming,
        positions: (0..n + slots).collect(),
        modality: std::iter::repeat(Modality::SpeechStream)
            .take(n)
            .chain(std::iter::repeat(Modality::TextSlot).take(slots))
            .collect(),
        targets: vec![None; n + slots],
        loss_kind: vec![LossKind::None; n + slots],
        stream_len: n,
        triggers: vec![n - 1; slots],
        text_bounds: vec![n - 1; slots],
        inputs,
    }
}

/// Full-context decoding for the non-streaming layout: repeated masked
/// forwards until the end-of-text token.
pub fn decode_nonstreaming<F: Scalar>(
    params: &ModelParams<F>,
    speech: &[TokenId],
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    let vocab = params.config().vocab;
    let mut out = DecodeOutput::default();
    if speech.is_empty() {
        return Ok(out);
    }
    let mut frames = if config.dedup { global_dedup(speech).0 } else { speech.to_vec() };
    let max = params.config().max_positions;
    if frames.len() + 1 > max {
        out.dropped_inputs = frames.len() + 1 - max;
        frames.truncate(max - 1);
    }
    let end = end_of_text(&vocab) as usize;
    let text_ids = vocab.text_range();
    while out.text.len() < config.max_text && frames.len() + out.text.len() < max {
        let layout = nonstreaming_query(&frames, &out.text, &vocab);
        let mask = build_mask(&layout, MaskVariant::Global)?;
        let fw = forward(params, &layout, &mask, Mode::Eval)?;
        let logits: Vec<f64> = fw.row(layout.len() - 1).iter().map(|x| x.f64()).collect();
        let ix = argmax(&logits[text_ids.start as usize..text_ids.end as usize]);
        let tok = text_ids.start + ix as TokenId;
        if logits[end] >= logits[tok as usize] {
            break;
        }
        out.events.push(DecodeEvent {
            kind: EventKind::TextEmitted,
            stream_index: layout.positions[layout.len() - 1],
            consumed_inputs: speech.len(),
            token: Some(tok),
        });
        out.text.push(tok);
    }
    Ok(out)
}

/// Decodes with the engine matching `config.mode`.
pub fn decode<F: Scalar>(params: &ModelParams<F>, speech: &[TokenId], config: &DecodeConfig) -> Result<DecodeOutput> {
    match config.mode {
        LayoutKind::Bti => decode_bti(params, speech, config),
        LayoutKind::Tti => decode_tti(params, speech, config),
        LayoutKind::NonStreaming => decode_nonstreaming(params, speech, config),
    }
}
