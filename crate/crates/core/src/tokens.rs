//! Unified vocabulary layout.
//!
//! Speech cluster ids come first, then text ids, then the three specials:
//! `[0, n_speech)` speech, `[n_speech, n_speech + n_text)` text, then
//! BOUNDARY, PAD and SOS_TEXT.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Speech,
    Text,
    Boundary,
    Pad,
    SosText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct VocabSpec {
    n_speech: u32,
    n_text: u32,
}

impl VocabSpec {
    pub fn new(n_speech: u32, n_text: u32) -> Result<Self> {
        if n_speech < 2 {
            return Err(Error::InvalidVocab(format!("n_speech must be at least 2, got {n_speech}")));
        }
        if n_text < 2 {
            return Err(Error::InvalidVocab(format!("n_text must be at least 2, got {n_text}")));
        }
        if n_speech.checked_add(n_text).and_then(|s| s.checked_add(3)).is_none() {
            return Err(Error::InvalidVocab("vocabulary size overflows".into()));
        }
        Ok(Self { n_speech, n_text })
    }

    pub fn n_speech(&self) -> u32 {
        self.n_speech
    }

    pub fn n_text(&self) -> u32 {
        self.n_text
    }

    pub fn total(&self) -> u32 {
        self.n_speech + self.n_text + 3
    }

    pub fn boundary(&self) -> TokenId {
        self.n_speech + self.n_text
    }

    pub fn pad(&self) -> TokenId {
        self.boundary() + 1
    }

    pub fn sos_text(&self) -> TokenId {
        self.boundary() + 2
    }

    pub fn speech_range(&self) -> Range<TokenId> {
        0..self.n_speech
    }

    pub fn text_range(&self) -> Range<TokenId> {
        self.n_speech..self.n_speech + self.n_text
    }

    pub fn is_speech(&self, id: TokenId) -> bool {
        id < self.n_speech
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        self.text_range().contains(&id)
    }

    /// Text id for a zero-based character index.
    pub fn text_id(&self, index: u32) -> Result<TokenId> {
        if index < self.n_text {
            Ok(self.n_speech + index)
        } else {
            Err(Error::UnknownTextId(self.n_speech.saturating_add(index)))
        }
    }

    /// Zero-based character index of a text id.
    pub fn text_index(&self, id: TokenId) -> Result<u32> {
        if self.is_text(id) {
            Ok(id - self.n_speech)
        } else {
            Err(Error::UnknownTextId(id))
        }
    }

    pub fn kind(&self, id: TokenId) -> Result<TokenKind> {
        let b = self.boundary();
        Ok(match id {
            _ if id < self.n_speech => TokenKind::Speech,
            _ if id < b => TokenKind::Text,
            _ if id == b => TokenKind::Boundary,
            _ if id == b + 1 => TokenKind::Pad,
            _ if id == b + 2 => TokenKind::SosText,
            _ => return Err(Error::TokenOutOfRange { id, total: self.total() }),
        })
    }
}

/// Free-function spelling of [`VocabSpec::new`].
pub fn build_vocab(n_speech: u32, n_text: u32) -> Result<VocabSpec> {
    VocabSpec::new(n_speech, n_text)
}

/// On-disk form; the derived ids are written out for readers in other
/// languages and checked on the way back in.
#[derive(Serialize, Deserialize)]
struct VocabRepr {
    n_speech: u32,
    n_text: u32,
    boundary: TokenId,
    pad: TokenId,
    sos_text: TokenId,
    total_vocab: u32,
}

impl From<VocabSpec> for VocabRepr {
    fn from(v: VocabSpec) -> Self {
        Self {
            n_speech: v.n_speech,
            n_text: v.n_text,
            boundary: v.boundary(),
            pad: v.pad(),
            sos_text: v.sos_text(),
            total_vocab: v.total(),
        }
    }
}

impl TryFrom<VocabRepr> for VocabSpec {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let v = VocabSpec::new(r.n_speech, r.n_text)?;
        if (r.boundary, r.pad, r.sos_text, r.total_vocab) != (v.boundary(), v.pad(), v.sos_text(), v.total()) {
            return Err(Error::InvalidVocab("special ids do not match the layout rule".into()));
        }
        Ok(v)
    }
}
