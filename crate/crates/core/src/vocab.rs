//! The unified discrete token space.
//!
//! Every modality shares one id space laid out as three contiguous ranges:
//!
//! ```text
//! [0, text) ‖ [text, text + vision) ‖ [text + vision, total)
//! ```
//!
//! Special tokens (mask, end-of-sequence, delimiters, thinking-mode switches)
//! are carved out of the top of the text range, in declaration order. Speech
//! is always the last range so that a layout extended with speech keeps every
//! pre-existing id, which is what makes row-wise checkpoint merging possible.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Vision,
    Speech,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Speech => "speech",
        };
        f.write_str(s)
    }
}

/// Well-known special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Mask,
    Eos,
    User,
    Assistant,
    Image,
    StartOfText,
    EndOfText,
    StartOfSpeech,
    EndOfSpeech,
    Think,
    NoThink,
}

impl Special {
    pub const ALL: [Special; 11] = [
        Special::Mask,
        Special::Eos,
        Special::User,
        Special::Assistant,
        Special::Image,
        Special::StartOfText,
        Special::EndOfText,
        Special::StartOfSpeech,
        Special::EndOfSpeech,
        Special::Think,
        Special::NoThink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Mask => "[MASK]",
            Special::Eos => "<EOS>",
            Special::User => "<|user|>",
            Special::Assistant => "<|assistant|>",
            Special::Image => "<image>",
            Special::StartOfText => "<|startoftext|>",
            Special::EndOfText => "<|endoftext|>",
            Special::StartOfSpeech => "<|startofspeech|>",
            Special::EndOfSpeech => "<|endofspeech|>",
            Special::Think => "\\think",
            Special::NoThink => "\\no_think",
        }
    }

    /// Names of the full special set, in canonical declaration order.
    pub fn standard_names() -> Vec<String> {
        Self::ALL.iter().map(|s| s.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    text_size: usize,
    vision_size: usize,
    speech_size: usize,
    /// (name, id) in declaration order.
    specials: Vec<(String, TokenId)>,
}

impl VocabLayout {
    /// Builds a layout. Special ids occupy `[text_size - n, text_size)` in
    /// the order the names are given.
    pub fn build(
        text_size: usize,
        vision_size: usize,
        speech_size: usize,
        special_names: &[String],
    ) -> Result<Self> {
        if text_size == 0 {
            return Err(Error::Layout("text range must be non-empty".into()));
        }
        if special_names.len() > text_size {
            return Err(Error::Layout(format!(
                "{} special tokens do not fit in a text range of {}",
                special_names.len(),
                text_size
            )));
        }
        for (i, name) in special_names.iter().enumerate() {
            if special_names[..i].contains(name) {
                return Err(Error::Layout(format!("duplicate special token {name}")));
            }
        }
        for required in [Special::Mask, Special::Eos] {
            if !special_names.iter().any(|n| n == required.name()) {
                return Err(Error::Layout(format!("missing special token {}", required.name())));
            }
        }
        let base = text_size - special_names.len();
        let specials = special_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), (base + i) as TokenId))
            .collect();
        let layout = Self { text_size, vision_size, speech_size, specials };
        layout.validate()?;
        Ok(layout)
    }

    /// Layout with the full standard special set.
    pub fn standard(text_size: usize, vision_size: usize, speech_size: usize) -> Result<Self> {
        Self::build(text_size, vision_size, speech_size, &Special::standard_names())
    }

    /// Re-checks every invariant. Used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.text_size == 0 {
            return Err(Error::Layout("text range must be non-empty".into()));
        }
        let total = self.total_size();
        if total > TokenId::MAX as usize {
            return Err(Error::Layout("vocabulary exceeds the 32-bit id space".into()));
        }
        for (i, (name, id)) in self.specials.iter().enumerate() {
            if *id as usize >= self.text_size {
                return Err(Error::Layout(format!("special {name} ({id}) outside the text range")));
            }
            if self.specials[..i].iter().any(|(n, other)| n == name || other == id) {
                return Err(Error::Layout(format!("special {name} ({id}) is not unique")));
            }
        }
        let mask = self.special_by_name(Special::Mask.name());
        let eos = self.special_by_name(Special::Eos.name());
        match (mask, eos) {
            (Some(m), Some(e)) if m != e => Ok(()),
            (Some(_), Some(_)) => Err(Error::Layout("MASK and EOS share an id".into())),
            _ => Err(Error::Layout("MASK and EOS are required".into())),
        }
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn vision_size(&self) -> usize {
        self.vision_size
    }

    pub fn speech_size(&self) -> usize {
        self.speech_size
    }

    pub fn total_size(&self) -> usize {
        self.text_size + self.vision_size + self.speech_size
    }

    pub fn vision_offset(&self) -> usize {
        self.text_size
    }

    pub fn speech_offset(&self) -> usize {
        self.text_size + self.vision_size
    }

    pub fn specials(&self) -> &[(String, TokenId)] {
        &self.specials
    }

    /// Number of text ids not taken by special tokens.
    pub fn plain_text_size(&self) -> usize {
        self.text_size - self.specials.len()
    }

    pub fn special_by_name(&self, name: &str) -> Option<TokenId> {
        self.specials.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn special(&self, s: Special) -> Result<TokenId> {
        self.special_by_name(s.name())
            .ok_or_else(|| Error::Layout(format!("layout has no {} token", s.name())))
    }

    pub fn mask(&self) -> TokenId {
        self.special_by_name(Special::Mask.name()).expect("validated layout has MASK")
    }

    pub fn eos(&self) -> TokenId {
        self.special_by_name(Special::Eos.name()).expect("validated layout has EOS")
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.iter().any(|(_, s)| *s == id)
    }

    pub fn modality_of(&self, id: TokenId) -> Result<Modality> {
        let i = id as usize;
        if i < self.text_size {
            Ok(Modality::Text)
        } else if i < self.speech_offset() {
            Ok(Modality::Vision)
        } else if i < self.total_size() {
            Ok(Modality::Speech)
        } else {
            Err(Error::TokenOutOfRange { id, total: self.total_size() })
        }
    }

    pub fn range_of(&self, modality: Modality) -> std::ops::Range<usize> {
        match modality {
            Modality::Text => 0..self.text_size,
            Modality::Vision => self.vision_offset()..self.speech_offset(),
            Modality::Speech => self.speech_offset()..self.total_size(),
        }
    }

    /// Appends a speech range. Text and vision ids, and every special id,
    /// are unchanged.
    pub fn extend_with_speech(&self, speech_size: usize) -> Result<Self> {
        if self.speech_size != 0 {
            return Err(Error::Layout("layout already has a speech range".into()));
        }
        let mut extended = self.clone();
        extended.speech_size = speech_size;
        extended.validate()?;
        Ok(extended)
    }
}
