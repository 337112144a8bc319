//! Input–output template families and their assembly into token sequences.
//!
//! Each family fixes a delimiter pattern, a conditioning prefix that is never
//! corrupted, and a target span that is right-padded with `<EOS>` up to a
//! fixed capacity. Whether padding is scored depends on the training stage:
//! stage 1 never scores `<EOS>`, later stages do.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{encode_text, tokenize_image, units_to_tokens, GridImage};
use crate::vocab::{Special, TokenId, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateFamily {
    #[serde(rename = "v2t")]
    VideoToText,
    #[serde(rename = "asr")]
    SpeechToText,
    #[serde(rename = "tts")]
    TextToSpeech,
    #[serde(rename = "chat")]
    TextChat,
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2i")]
    ImageToImage,
    #[serde(rename = "think")]
    ThinkingMode,
}

impl TemplateFamily {
    pub const ALL: [TemplateFamily; 8] = [
        TemplateFamily::VideoToText,
        TemplateFamily::SpeechToText,
        TemplateFamily::TextToSpeech,
        TemplateFamily::TextChat,
        TemplateFamily::ImageToText,
        TemplateFamily::TextToImage,
        TemplateFamily::ImageToImage,
        TemplateFamily::ThinkingMode,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            TemplateFamily::VideoToText => "v2t",
            TemplateFamily::SpeechToText => "asr",
            TemplateFamily::TextToSpeech => "tts",
            TemplateFamily::TextChat => "chat",
            TemplateFamily::ImageToText => "i2t",
            TemplateFamily::TextToImage => "t2i",
            TemplateFamily::ImageToImage => "i2i",
            TemplateFamily::ThinkingMode => "think",
        }
    }

    /// Families whose target is an image: decoded as one fully parallel block.
    pub fn generates_image(self) -> bool {
        matches!(self, TemplateFamily::TextToImage | TemplateFamily::ImageToImage)
    }

    pub fn generates_speech(self) -> bool {
        self == TemplateFamily::TextToSpeech
    }

    /// Families that involve the speech range at all.
    pub fn uses_speech(self) -> bool {
        matches!(self, TemplateFamily::SpeechToText | TemplateFamily::TextToSpeech)
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|f| f.short_name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TemplateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.short_name() == s).ok_or_else(|| {
            Error::Template(format!("unknown family {s:?}; valid: {}", Self::valid_names()))
        })
    }
}

/// Training stage. `Backbone` is the text/image pretraining that precedes
/// vocabulary extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Stage {
    pub fn allows(self, family: TemplateFamily) -> bool {
        use TemplateFamily::*;
        match self {
            Stage::Backbone => matches!(family, TextChat | ImageToText | TextToImage | ImageToImage),
            Stage::One => matches!(family, VideoToText | SpeechToText | TextToSpeech),
            Stage::Two => family != ThinkingMode,
            Stage::Three => true,
        }
    }

    /// Scheduled padding: `<EOS>` is scored everywhere except stage 1.
    pub fn scores_eos(self) -> bool {
        self != Stage::One
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Backbone => f.write_str("backbone pretraining"),
            Stage::One => f.write_str("stage 1"),
            Stage::Two => f.write_str("stage 2"),
            Stage::Three => f.write_str("stage 3"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" | "0" => Ok(Stage::Backbone),
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "3" => Ok(Stage::Three),
            _ => Err(Error::Template(format!("unknown stage {s:?}; valid: backbone, 1, 2, 3"))),
        }
    }
}

/// How termination tokens in the target are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EosPolicy {
    /// Follow the stage schedule.
    #[default]
    Scheduled,
    /// Never score termination tokens (stage-1 behaviour at every stage).
    Excluded,
}

impl EosPolicy {
    pub fn scores_eos(self, stage: Stage) -> bool {
        match self {
            EosPolicy::Scheduled => stage.scores_eos(),
            EosPolicy::Excluded => false,
        }
    }
}

/// Raw parts of one training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum Sample {
    #[serde(rename = "v2t")]
    VideoToText { frames: Vec<GridImage>, prompt: String, response: String },
    #[serde(rename = "asr")]
    SpeechToText { units: Vec<u32>, text: String },
    #[serde(rename = "tts")]
    TextToSpeech { text: String, units: Vec<u32> },
    #[serde(rename = "chat")]
    TextChat { prompt: String, response: String },
    #[serde(rename = "i2t")]
    ImageToText { image: GridImage, prompt: String, response: String },
    #[serde(rename = "t2i")]
    TextToImage { instruction: String, image: GridImage },
    #[serde(rename = "i2i")]
    ImageToImage { source: GridImage, instruction: String, target: GridImage },
    #[serde(rename = "think")]
    ThinkingMode { prompt: String, think: bool, response: String },
}

impl Sample {
    pub fn family(&self) -> TemplateFamily {
        match self {
            Sample::VideoToText { .. } => TemplateFamily::VideoToText,
            Sample::SpeechToText { .. } => TemplateFamily::SpeechToText,
            Sample::TextToSpeech { .. } => TemplateFamily::TextToSpeech,
            Sample::TextChat { .. } => TemplateFamily::TextChat,
            Sample::ImageToText { .. } => TemplateFamily::ImageToText,
            Sample::TextToImage { .. } => TemplateFamily::TextToImage,
            Sample::ImageToImage { .. } => TemplateFamily::ImageToImage,
            Sample::ThinkingMode { .. } => TemplateFamily::ThinkingMode,
        }
    }
}

/// Target-span lengths per family. Image families ignore this and use the
/// exact image token count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Capacities(pub BTreeMap<TemplateFamily, usize>);

impl Default for Capacities {
    fn default() -> Self {
        use TemplateFamily::*;
        Self(BTreeMap::from([
            (VideoToText, 32),
            (SpeechToText, 32),
            (TextToSpeech, 64),
            (TextChat, 32),
            (ImageToText, 32),
            (ThinkingMode, 32),
        ]))
    }
}

impl Capacities {
    pub fn get(&self, family: TemplateFamily) -> Result<usize> {
        self.0
            .get(&family)
            .copied()
            .ok_or_else(|| Error::Template(format!("no target capacity configured for {family}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledSequence {
    pub tokens: Vec<TokenId>,
    /// Positions that contribute to the loss when masked.
    pub supervised: Vec<bool>,
    /// Positions the forward process may mask.
    pub corruptible: Vec<bool>,
    pub family: TemplateFamily,
    /// Half-open response region.
    pub target_span: (usize, usize),
    /// Half-open span of the conditioning text (prompt or instruction).
    pub prompt_span: Option<(usize, usize)>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target(&self) -> &[TokenId] {
        &self.tokens[self.target_span.0..self.target_span.1]
    }

    pub fn conditioning_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.corruptible[i])
    }

    /// Copy with the whole target span replaced by `[MASK]`: the starting
    /// point of generation.
    pub fn with_masked_target(&self, mask: TokenId) -> Self {
        let mut out = self.clone();
        for t in &mut out.tokens[self.target_span.0..self.target_span.1] {
            *t = mask;
        }
        out
    }
}

struct Builder<'a> {
    layout: &'a VocabLayout,
    tokens: Vec<TokenId>,
    supervised: Vec<bool>,
    corruptible: Vec<bool>,
    prompt_span: Option<(usize, usize)>,
}

impl<'a> Builder<'a> {
    fn new(layout: &'a VocabLayout) -> Self {
        Self { layout, tokens: Vec::new(), supervised: Vec::new(), corruptible: Vec::new(), prompt_span: None }
    }

    fn cond(&mut self, toks: &[TokenId]) {
        self.tokens.extend_from_slice(toks);
        self.supervised.extend(std::iter::repeat_n(false, toks.len()));
        self.corruptible.extend(std::iter::repeat_n(false, toks.len()));
    }

    fn special(&mut self, s: Special) -> Result<()> {
        let id = self.layout.special(s)?;
        self.cond(&[id]);
        Ok(())
    }

    fn prompt(&mut self, text: &str) -> Result<()> {
        let start = self.tokens.len();
        self.cond(&encode_text(self.layout, text)?);
        self.prompt_span = Some((start, self.tokens.len()));
        Ok(())
    }

    fn target(&mut self, toks: &[TokenId], scored: bool) {
        self.tokens.extend_from_slice(toks);
        self.supervised.extend(std::iter::repeat_n(scored, toks.len()));
        self.corruptible.extend(std::iter::repeat_n(true, toks.len()));
    }

    /// Response, optional closing marker, then `<EOS>` up to `capacity`.
    fn padded_target(
        &mut self,
        content: &[TokenId],
        closer: Option<TokenId>,
        capacity: usize,
        score_eos: bool,
    ) -> Result<(usize, usize)> {
        let used = content.len() + usize::from(closer.is_some());
        if used > capacity {
            return Err(Error::Template(format!(
                "target of {used} tokens exceeds capacity {capacity}"
            )));
        }
        let start = self.tokens.len();
        self.target(content, true);
        if let Some(c) = closer {
            self.target(&[c], score_eos);
        }
        let eos = self.layout.eos();
        self.target(&vec![eos; capacity - used], score_eos);
        Ok((start, self.tokens.len()))
    }

    fn finish(self, family: TemplateFamily, target_span: (usize, usize)) -> AssembledSequence {
        AssembledSequence {
            tokens: self.tokens,
            supervised: self.supervised,
            corruptible: self.corruptible,
            family,
            target_span,
            prompt_span: self.prompt_span,
        }
    }
}

pub fn assemble(
    layout: &VocabLayout,
    sample: &Sample,
    stage: Stage,
    capacities: &Capacities,
) -> Result<AssembledSequence> {
    assemble_with_policy(layout, sample, stage, capacities, EosPolicy::Scheduled)
}

pub fn assemble_with_policy(
    layout: &VocabLayout,
    sample: &Sample,
    stage: Stage,
    capacities: &Capacities,
    policy: EosPolicy,
) -> Result<AssembledSequence> {
    let family = sample.family();
    if !stage.allows(family) {
        return Err(Error::FamilyUnavailable { family, stage });
    }
    let score_eos = policy.scores_eos(stage);
    let mut b = Builder::new(layout);
    let span = match sample {
        Sample::VideoToText { frames, prompt, response } => {
            for frame in frames {
                b.special(Special::Image)?;
                b.cond(&tokenize_image(layout, frame)?);
            }
            b.special(Special::User)?;
            b.prompt(prompt)?;
            b.special(Special::Assistant)?;
            let content = encode_text(layout, response)?;
            b.padded_target(&content, None, capacities.get(family)?, score_eos)?
        }
        Sample::SpeechToText { units, text } => {
            b.special(Special::StartOfSpeech)?;
            b.cond(&units_to_tokens(layout, units)?);
            b.special(Special::EndOfSpeech)?;
            b.special(Special::StartOfText)?;
            let content = encode_text(layout, text)?;
            b.padded_target(&content, None, capacities.get(family)?, score_eos)?
        }
        Sample::TextToSpeech { text, units } => {
            b.special(Special::StartOfText)?;
            b.prompt(text)?;
            b.special(Special::EndOfText)?;
            b.special(Special::StartOfSpeech)?;
            let content = units_to_tokens(layout, units)?;
            let closer = layout.special(Special::EndOfSpeech)?;
            b.padded_target(&content, Some(closer), capacities.get(family)?, score_eos)?
        }
        Sample::TextChat { prompt, response } => {
            b.special(Special::User)?;
            b.prompt(prompt)?;
            b.special(Special::Assistant)?;
            let content = encode_text(layout, response)?;
            b.padded_target(&content, None, capacities.get(family)?, score_eos)?
        }
        Sample::ImageToText { image, prompt, response } => {
            b.special(Special::Image)?;
            b.cond(&tokenize_image(layout, image)?);
            b.special(Special::User)?;
            b.prompt(prompt)?;
            b.special(Special::Assistant)?;
            let content = encode_text(layout, response)?;
            b.padded_target(&content, None, capacities.get(family)?, score_eos)?
        }
        Sample::TextToImage { instruction, image } => {
            b.special(Special::StartOfText)?;
            b.prompt(instruction)?;
            b.special(Special::EndOfText)?;
            let start = b.tokens.len();
            b.target(&tokenize_image(layout, image)?, true);
            (start, b.tokens.len())
        }
        Sample::ImageToImage { source, instruction, target } => {
            b.special(Special::Image)?;
            b.cond(&tokenize_image(layout, source)?);
            b.special(Special::StartOfText)?;
            b.prompt(instruction)?;
            b.special(Special::EndOfText)?;
            let start = b.tokens.len();
            b.target(&tokenize_image(layout, target)?, true);
            (start, b.tokens.len())
        }
        Sample::ThinkingMode { prompt, think, response } => {
            b.special(Special::User)?;
            b.prompt(prompt)?;
            b.special(if *think { Special::Think } else { Special::NoThink })?;
            b.special(Special::Assistant)?;
            let content = encode_text(layout, response)?;
            b.padded_target(&content, None, capacities.get(family)?, score_eos)?
        }
    };
    Ok(b.finish(family, span))
}

/// Longest prefix before the first `<EOS>`.
pub fn truncate_at_eos<'a>(layout: &VocabLayout, tokens: &'a [TokenId]) -> &'a [TokenId] {
    let eos = layout.eos();
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}
