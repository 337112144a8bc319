//! Deterministic toy tokenizers and the synthetic world that feeds them.
//!
//! The image tokenizer is the identity map from a grid cell's color code to
//! a vision id (raster order), videos are per-frame concatenations, and
//! speech is a fixed character → unit table where every character emits
//! `rate` consecutive copies of its unit.

mod world;

use serde::{Deserialize, Serialize};

pub use world::{
    caption, describe, edit_pair, running_sums, sample_chat, sample_scene, sample_utterance, video_caption,
    ChatConfig, EditOp, Object, Scene, SpeechTaskConfig, SyntheticWorld, VideoConfig, WorldConfig,
};

use crate::error::{Error, Result};
use crate::vocab::{Modality, TokenId, VocabLayout};

/// Character alphabet of the toy text tokenizer; character `i` is token id `i`.
pub const TEXT_ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789,=";

pub fn char_id(layout: &VocabLayout, c: char) -> Result<TokenId> {
    let idx = TEXT_ALPHABET
        .chars()
        .position(|a| a == c)
        .ok_or_else(|| Error::Tokenize(format!("character {c:?} is not in the text alphabet")))?;
    if idx >= layout.plain_text_size() {
        return Err(Error::Tokenize(format!(
            "character {c:?} (index {idx}) does not fit the {} plain text ids of this layout",
            layout.plain_text_size()
        )));
    }
    Ok(idx as TokenId)
}

pub fn encode_text(layout: &VocabLayout, text: &str) -> Result<Vec<TokenId>> {
    text.chars().map(|c| char_id(layout, c)).collect()
}

/// Lossy decode for evaluation: anything that is not a plain character
/// becomes `?`.
pub fn decode_text(layout: &VocabLayout, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| {
            let i = t as usize;
            if i < layout.plain_text_size() {
                TEXT_ALPHABET.chars().nth(i).unwrap_or('?')
            } else {
                '?'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridImage {
    side: usize,
    /// Row-major color codes.
    cells: Vec<u32>,
}

impl GridImage {
    pub fn new(side: usize, cells: Vec<u32>) -> Result<Self> {
        if side == 0 || cells.len() != side * side {
            return Err(Error::Tokenize(format!(
                "grid of side {side} needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(Self { side, cells })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let side = rows.len();
        if rows.iter().any(|r| r.len() != side) {
            return Err(Error::Tokenize("grid rows must form a square".into()));
        }
        Self::new(side, rows.concat())
    }

    pub fn blank(side: usize) -> Self {
        Self { side, cells: vec![0; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, code: u32) {
        self.cells[row * self.side + col] = code;
    }

    pub fn token_len(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoClip {
    pub frames: Vec<GridImage>,
}

pub fn tokenize_image(layout: &VocabLayout, img: &GridImage) -> Result<Vec<TokenId>> {
    let offset = layout.vision_offset() as TokenId;
    img.cells
        .iter()
        .map(|&c| {
            if (c as usize) < layout.vision_size() {
                Ok(offset + c)
            } else {
                Err(Error::Tokenize(format!(
                    "color code {c} outside the vision codebook of {}",
                    layout.vision_size()
                )))
            }
        })
        .collect()
}

pub fn detokenize_image(layout: &VocabLayout, tokens: &[TokenId], side: usize) -> Result<GridImage> {
    if tokens.len() != side * side {
        return Err(Error::Tokenize(format!(
            "{} tokens cannot form a {side}x{side} grid",
            tokens.len()
        )));
    }
    let offset = layout.vision_offset() as TokenId;
    let cells = tokens
        .iter()
        .map(|&t| match layout.modality_of(t)? {
            Modality::Vision => Ok(t - offset),
            m => Err(Error::Tokenize(format!("token {t} is {m}, not vision"))),
        })
        .collect::<Result<Vec<_>>>()?;
    GridImage::new(side, cells)
}

pub fn tokenize_video(layout: &VocabLayout, clip: &VideoClip) -> Result<Vec<TokenId>> {
    let Some(first) = clip.frames.first() else {
        return Ok(Vec::new());
    };
    if clip.frames.iter().any(|f| f.side != first.side) {
        return Err(Error::Tokenize("video frames have inconsistent sides".into()));
    }
    let mut out = Vec::with_capacity(clip.frames.len() * first.token_len());
    for frame in &clip.frames {
        out.extend(tokenize_image(layout, frame)?);
    }
    Ok(out)
}

/// Character ↔ unit table for toy speech.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechCodec {
    pub alphabet: String,
    /// Units emitted per character.
    pub rate: usize,
}

impl Default for SpeechCodec {
    fn default() -> Self {
        Self { alphabet: "abcdefgh".into(), rate: 2 }
    }
}

impl SpeechCodec {
    pub fn unit_of(&self, c: char) -> Result<u32> {
        self.alphabet
            .chars()
            .position(|a| a == c)
            .map(|p| p as u32)
            .ok_or_else(|| Error::Tokenize(format!("character {c:?} is not in the speech alphabet")))
    }

    pub fn char_of(&self, unit: u32) -> Option<char> {
        self.alphabet.chars().nth(unit as usize)
    }

    /// Unit indices (not token ids) for `text`.
    pub fn units(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len() * self.rate);
        for c in text.chars() {
            let u = self.unit_of(c)?;
            out.extend(std::iter::repeat_n(u, self.rate));
        }
        Ok(out)
    }

    fn check_fits(&self, layout: &VocabLayout) -> Result<()> {
        let n = self.alphabet.chars().count();
        if n > layout.speech_size() {
            return Err(Error::Tokenize(format!(
                "speech alphabet of {n} does not fit {} speech ids",
                layout.speech_size()
            )));
        }
        if self.rate == 0 {
            return Err(Error::Tokenize("speech rate must be positive".into()));
        }
        Ok(())
    }
}

pub fn units_to_tokens(layout: &VocabLayout, units: &[u32]) -> Result<Vec<TokenId>> {
    let offset = layout.speech_offset() as TokenId;
    units
        .iter()
        .map(|&u| {
            if (u as usize) < layout.speech_size() {
                Ok(offset + u)
            } else {
                Err(Error::Tokenize(format!("speech unit {u} outside the speech range")))
            }
        })
        .collect()
}

pub fn tokenize_speech(layout: &VocabLayout, codec: &SpeechCodec, text: &str) -> Result<Vec<TokenId>> {
    codec.check_fits(layout)?;
    units_to_tokens(layout, &codec.units(text)?)
}

/// Collapses each run of identical units to one character. Run lengths other
/// than `rate` are tolerated.
pub fn detokenize_speech(layout: &VocabLayout, codec: &SpeechCodec, tokens: &[TokenId]) -> Result<String> {
    let offset = layout.speech_offset() as TokenId;
    let mut out = String::new();
    let mut prev = None;
    for &t in tokens {
        if layout.modality_of(t)? != Modality::Speech {
            return Err(Error::Tokenize(format!("token {t} is not a speech unit")));
        }
        if prev == Some(t) {
            continue;
        }
        prev = Some(t);
        let c = codec
            .char_of(t - offset)
            .ok_or_else(|| Error::Tokenize(format!("unit {} has no character", t - offset)))?;
        out.push(c);
    }
    Ok(out)
}
