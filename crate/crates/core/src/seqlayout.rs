//! Training sequences (TTI, BTI, non-streaming) and their attention masks.
//!
//! A BTI layout is a speech stream of `T + L` tokens (speech frames with a
//! BOUNDARY after every segment) followed by `L` text slots. Text slot `k`
//! may look at the stream up to its bound `r_k` and at text slots `<= k`.

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::tokens::{TokenId, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    SpeechStream = 0,
    TextSlot = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    None,
    SpeechCE,
    BoundaryCE,
    TextCE,
}

/// Right-context policy for text slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPolicy {
    /// Lookahead equals the frame count of the next segment (zero for the last).
    Dynamic,
    /// Lookahead of `n` speech frames past the boundary; BOUNDARY tokens on
    /// the way are not counted.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Tti,
    Bti,
    NonStreaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPositionMode {
    /// Text slot `k` sits at position `r_k + 1`, where a streaming decoder
    /// issues the query.
    #[default]
    StreamPoint,
    /// Text slots take positions `T+L, ..., T+2L-1` after the stream.
    Trailing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    Global,
    Causal,
    RightChunk,
}

impl MaskVariant {
    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::Global => "global",
            MaskVariant::Causal => "causal",
            MaskVariant::RightChunk => "right_chunk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSequence {
    pub kind: LayoutKind,
    pub inputs: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
    pub targets: Vec<Option<TokenId>>,
    pub loss_kind: Vec<LossKind>,
    /// Rows `[0, stream_len)` form the speech stream; text slots follow.
    pub stream_len: usize,
    /// Stream index of the BOUNDARY that triggers each text slot.
    pub triggers: Vec<usize>,
    /// Largest stream index each text slot may attend to.
    pub text_bounds: Vec<usize>,
}

impl LayoutSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.text_bounds.len()
    }

    /// Text slot index of a row, if the row is a text slot.
    pub fn slot_of(&self, row: usize) -> Option<usize> {
        (self.modality[row] == Modality::TextSlot).then(|| row - self.stream_len)
    }

    pub fn max_position(&self) -> usize {
        self.positions.iter().copied().max().unwrap_or(0)
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_kind.iter().filter(|k| **k != LossKind::None).count()
    }
}

/// Marks where boundary tokens sit in the BTI stream: boundary `i` (0-based)
/// lands at `t_i + i + 1`, right after its segment's last frame.
pub fn boundary_path(utt: &Utterance) -> Vec<bool> {
    let mut path = vec![false; utt.num_frames() + utt.num_text()];
    for (i, &t) in utt.boundaries.iter().enumerate() {
        path[t + i + 1] = true;
    }
    path
}

fn bti_stream(utt: &Utterance, vocab: &VocabSpec) -> (Vec<TokenId>, Vec<usize>) {
    let mut stream = Vec::with_capacity(utt.num_frames() + utt.num_text());
    let mut triggers = Vec::with_capacity(utt.num_text());
    for seg in utt.segments() {
        stream.extend_from_slice(&utt.speech[seg]);
        triggers.push(stream.len());
        stream.push(vocab.boundary());
    }
    (stream, triggers)
}

/// Stream index of the `n`-th speech frame after `from`, skipping BOUNDARY
/// tokens, clamped to the stream end.
fn lookahead_bound(stream: &[TokenId], from: usize, n: usize, boundary: TokenId) -> usize {
    if n == 0 {
        return from;
    }
    let mut seen = 0;
    for (j, &tok) in stream.iter().enumerate().skip(from + 1) {
        if tok != boundary {
            seen += 1;
            if seen == n {
                return j;
            }
        }
    }
    stream.len() - 1
}

fn stream_rows(layout: &mut LayoutSequence, stream: &[TokenId], boundary: TokenId, with_loss: bool) {
    let n = stream.len();
    for (p, &tok) in stream.iter().enumerate() {
        layout.inputs.push(tok);
        layout.positions.push(p);
        layout.modality.push(Modality::SpeechStream);
        if with_loss && p + 1 < n {
            let next = stream[p + 1];
            layout.targets.push(Some(next));
            layout.loss_kind.push(if next == boundary { LossKind::BoundaryCE } else { LossKind::SpeechCE });
        } else {
            layout.targets.push(None);
            layout.loss_kind.push(LossKind::None);
        }
    }
}

fn empty_layout(kind: LayoutKind, stream_len: usize) -> LayoutSequence {
    LayoutSequence {
        kind,
        inputs: Vec::new(),
        positions: Vec::new(),
        modality: Vec::new(),
        targets: Vec::new(),
        loss_kind: Vec::new(),
        stream_len,
        triggers: Vec::new(),
        text_bounds: Vec::new(),
    }
}

pub fn build_bti_layout(
    utt: &Utterance,
    policy: DeltaPolicy,
    position_mode: TextPositionMode,
    vocab: &VocabSpec,
) -> Result<LayoutSequence> {
    utt.check_structure()?;
    let (stream, triggers) = bti_stream(utt, vocab);
    let n = stream.len();
    let segment_lens: Vec<usize> = utt.segments().map(|s| s.len()).collect();
    let bounds: Vec<usize> = triggers
        .iter()
        .enumerate()
        .map(|(k, &t)| match policy {
            DeltaPolicy::Dynamic => (t + segment_lens.get(k + 1).copied().unwrap_or(0)).min(n - 1),
            DeltaPolicy::Fixed(d) => lookahead_bound(&stream, t, d, vocab.boundary()),
        })
        .collect();

    let mut layout = empty_layout(LayoutKind::Bti, n);
    stream_rows(&mut layout, &stream, vocab.boundary(), true);
    for (k, &y) in utt.text.iter().enumerate() {
        layout.inputs.push(if k == 0 { vocab.sos_text() } else { utt.text[k - 1] });
        layout.positions.push(match position_mode {
            TextPositionMode::StreamPoint => bounds[k] + 1,
            TextPositionMode::Trailing => n + k,
        });
        layout.modality.push(Modality::TextSlot);
        layout.targets.push(Some(y));
        layout.loss_kind.push(LossKind::TextCE);
    }
    layout.triggers = triggers;
    layout.text_bounds = bounds;
    Ok(layout)
}

/// Stand-in for an end-of-text token: the non-streaming text stream is
/// closed by predicting BOUNDARY after the last character.
pub fn end_of_text(vocab: &VocabSpec) -> TokenId {
    vocab.boundary()
}

/// Non-streaming layout: the plain speech frames, then `L + 1` text slots
/// `[SOS, y_1..y_L]` predicting `[y_1..y_L, END]`, each seeing the whole
/// stream. Stream rows carry no loss since the global mask lets them see
/// their own targets.
pub fn build_nonstreaming_layout(utt: &Utterance, vocab: &VocabSpec) -> Result<LayoutSequence> {
    utt.check_structure()?;
    let n = utt.num_frames();
    let mut layout = empty_layout(LayoutKind::NonStreaming, n);
    stream_rows(&mut layout, &utt.speech, vocab.boundary(), false);
    let l = utt.num_text();
    for k in 0..=l {
        layout.inputs.push(if k == 0 { vocab.sos_text() } else { utt.text[k - 1] });
        layout.positions.push(n + k);
        layout.modality.push(Modality::TextSlot);
        layout.targets.push(Some(if k < l { utt.text[k] } else { end_of_text(vocab) }));
        layout.loss_kind.push(LossKind::TextCE);
        layout.triggers.push(n - 1);
        layout.text_bounds.push(n - 1);
    }
    Ok(layout)
}

/// Interleaved layout: `y_i` follows frame `min(t_i + delay, T - 1)`, every
/// row predicts the next token. The whole sequence is one stream.
pub fn build_tti_layout(utt: &Utterance, delay: usize, vocab: &VocabSpec) -> Result<LayoutSequence> {
    utt.check_structure()?;
    let t_len = utt.num_frames();
    let mut seq = Vec::with_capacity(t_len + utt.num_text());
    let mut next_text = 0;
    for (t, &x) in utt.speech.iter().enumerate() {
        seq.push(x);
        while next_text < utt.num_text() && (utt.boundaries[next_text] + delay).min(t_len - 1) == t {
            seq.push(utt.text[next_text]);
            next_text += 1;
        }
    }
    let n = seq.len();
    let mut layout = empty_layout(LayoutKind::Tti, n);
    for (p, &tok) in seq.iter().enumerate() {
        layout.inputs.push(tok);
        layout.positions.push(p);
        layout.modality.push(Modality::SpeechStream);
        match seq.get(p + 1) {
            Some(&next) => {
                layout.targets.push(Some(next));
                layout.loss_kind.push(if vocab.is_text(next) { LossKind::TextCE } else { LossKind::SpeechCE });
            }
            None => {
                layout.targets.push(None);
                layout.loss_kind.push(LossKind::None);
            }
        }
    }
    Ok(layout)
}

/// Square visibility matrix; `get(i, j)` is true iff query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self { n, bits }
    }

    pub fn full(n: usize) -> Self {
        Self { n, bits: vec![true; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    /// Visible key indices for a query row, ascending.
    pub fn visible(&self, i: usize) -> Vec<usize> {
        self.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.n * self.n * 2);
        for i in 0..self.n {
            let row: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain (ASCII) portable bitmap; visible entries are black.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn build_mask(layout: &LayoutSequence, variant: MaskVariant) -> Result<AttentionMask> {
    let n = layout.len();
    if layout.kind == LayoutKind::Tti {
        return match variant {
            MaskVariant::Causal => Ok(AttentionMask::from_fn(n, |i, j| j <= i)),
            MaskVariant::Global => Ok(AttentionMask::full(n)),
            MaskVariant::RightChunk => Err(Error::MaskVariant("right_chunk")),
        };
    }
    let s = layout.stream_len;
    Ok(AttentionMask::from_fn(n, |i, j| {
        let key_in_stream = j < s;
        if i < s {
            key_in_stream && (variant == MaskVariant::Global || j <= i)
        } else {
            let k = i - s;
            if key_in_stream {
                match variant {
                    MaskVariant::Global => true,
                    MaskVariant::Causal => j <= layout.triggers[k],
                    MaskVariant::RightChunk => j <= layout.text_bounds[k],
                }
            } else {
                j - s <= k
            }
        }
    }))
}
