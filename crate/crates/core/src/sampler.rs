//! Reverse process: iterative parallel unmasking with confidence-based
//! remasking, block by block.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::diffusion::unconditional;
use crate::error::{Error, Result};
use crate::templates::{AssembledSequence, TemplateFamily};
use crate::vocab::{Modality, Special, TokenId, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remask {
    LowConfidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub steps: usize,
    /// Tokens per block; image spans are always a single block.
    pub block_length: usize,
    pub schedule: Schedule,
    /// 0 decodes greedily.
    pub temperature: f64,
    /// Guidance strength; 1 disables guidance.
    pub cfg_scale: f64,
    pub remask: Remask,
    pub seed: u64,
}

impl DecodeConfig {
    /// Defaults per family: linear blocks for text and speech, one cosine
    /// block with guidance for images.
    pub fn for_family(family: TemplateFamily, steps: usize) -> Self {
        let image = family.generates_image();
        Self {
            steps,
            block_length: if image { 1024 } else if family.generates_speech() { 64 } else { 8 },
            schedule: if image { Schedule::Cosine } else { Schedule::Linear },
            temperature: 0.0,
            cfg_scale: if image { 3.5 } else { 1.0 },
            remask: Remask::LowConfidence,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.block_length == 0 {
            return Err(Error::Decode("steps and block_length must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Decode(format!("invalid temperature {}", self.temperature)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Decode(format!("invalid guidance scale {}", self.cfg_scale)));
        }
        Ok(())
    }

    fn guided(&self, family: TemplateFamily) -> bool {
        family.generates_image() && self.cfg_scale != 1.0
    }
}

/// Tokens finalized at each of `steps` steps for a block of `n` positions.
/// Sums to `n`; every count is at least 1 when `steps ≤ n`.
pub fn schedule_counts(n: usize, steps: usize, schedule: Schedule) -> Vec<usize> {
    if steps == 0 {
        return Vec::new();
    }
    match schedule {
        Schedule::Linear => (0..steps).map(|i| n / steps + usize::from(i >= steps - n % steps)).collect(),
        Schedule::Cosine => {
            let frac = |i: usize| (std::f64::consts::FRAC_PI_2 * i as f64 / steps as f64).cos();
            let quotas: Vec<f64> = (1..=steps).map(|i| n as f64 * (frac(i - 1) - frac(i)).max(0.0)).collect();
            let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
            let mut order: Vec<usize> = (0..steps).collect();
            order.sort_by(|&a, &b| {
                let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
                fb.total_cmp(&fa).then(b.cmp(&a))
            });
            let mut missing = n.saturating_sub(counts.iter().sum());
            for &i in order.iter().cycle() {
                if missing == 0 {
                    break;
                }
                counts[i] += 1;
                missing -= 1;
            }
            if steps <= n {
                while let Some(z) = counts.iter().position(|&c| c == 0) {
                    let big = (0..steps).max_by_key(|&i| (counts[i], i)).expect("nonempty");
                    counts[big] -= 1;
                    counts[z] = 1;
                }
            }
            counts.sort_unstable();
            counts
        }
    }
}

/// Splits `total` steps across blocks in proportion to their lengths, with at
/// least one and at most `len` steps per block. The result sums to the
/// effective budget `total.clamp(blocks, positions)`.
pub fn apportion_steps(lengths: &[usize], total: usize) -> Vec<usize> {
    let n: usize = lengths.iter().sum();
    if lengths.is_empty() || n == 0 {
        return vec![0; lengths.len()];
    }
    let s = total.clamp(lengths.len(), n);
    let quotas: Vec<f64> = lengths.iter().map(|&l| s as f64 * l as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(lengths)
        .map(|(q, &l)| (q.floor() as usize).clamp(1, l))
        .collect();
    let mut by_remainder: Vec<usize> = (0..lengths.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while alloc.iter().sum::<usize>() < s {
        let i = *by_remainder.iter().find(|&&i| alloc[i] < lengths[i]).expect("capacity remains");
        alloc[i] += 1;
        by_remainder.retain(|&j| j != i);
        by_remainder.push(i);
    }
    while alloc.iter().sum::<usize>() > s {
        let i = *by_remainder.iter().rev().find(|&&i| alloc[i] > 1).expect("slack remains");
        alloc[i] -= 1;
        by_remainder.retain(|&j| j != i);
        by_remainder.insert(0, i);
    }
    alloc
}

/// Decoding plan: half-open block ranges and per-step finalize counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub blocks: Vec<((usize, usize), Vec<usize>)>,
}

impl Plan {
    pub fn new(span: (usize, usize), family: TemplateFamily, config: &DecodeConfig) -> Result<Self> {
        config.validate()?;
        let (a, b) = span;
        let block = if family.generates_image() { (b - a).max(1) } else { config.block_length };
        let ranges: Vec<(usize, usize)> = (a..b).step_by(block).map(|s| (s, (s + block).min(b))).collect();
        let lengths: Vec<usize> = ranges.iter().map(|r| r.1 - r.0).collect();
        let steps = apportion_steps(&lengths, config.steps);
        let blocks = ranges
            .into_iter()
            .zip(steps)
            .map(|(r, s)| (r, schedule_counts(r.1 - r.0, s, config.schedule)))
            .collect();
        Ok(Self { blocks })
    }

    pub fn total_steps(&self) -> usize {
        self.blocks.iter().map(|(_, c)| c.len()).sum()
    }
}

/// Forward calls the sampler will make under `config`.
pub fn forward_budget(span: (usize, usize), family: TemplateFamily, config: &DecodeConfig) -> Result<usize> {
    let per_step = if config.guided(family) { 2 } else { 1 };
    Ok(Plan::new(span, family, config)?.total_steps() * per_step)
}

/// `l_u + s·(l_c − l_u)`, exact at `s ∈ {0, 1}`.
pub fn combine_guidance(cond: &[f32], uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::Decode(format!("guidance logits differ in length: {} vs {}", cond.len(), uncond.len())));
    }
    if s == 1.0 {
        return Ok(cond.to_vec());
    }
    if s == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (u as f64 + s * (c as f64 - u as f64)) as f32)
        .collect())
}

pub fn guided_logits<D: Denoiser + ?Sized>(model: &D, cond: &[TokenId], uncond: &[TokenId], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::Decode("conditional and unconditional sequences differ in length".into()));
    }
    if s == 1.0 {
        return model.logits(cond);
    }
    combine_guidance(&model.logits(cond)?, &model.logits(uncond)?, s)
}

/// Token ids a target position of `family` may take. `[MASK]` is never among
/// them.
pub fn allowed_tokens(layout: &VocabLayout, family: TemplateFamily) -> Vec<TokenId> {
    let mask = layout.mask();
    let ids: Vec<TokenId> = if family.generates_image() {
        layout.range_of(Modality::Vision).map(|i| i as TokenId).collect()
    } else if family.generates_speech() {
        let mut v: Vec<TokenId> = layout.range_of(Modality::Speech).map(|i| i as TokenId).collect();
        v.extend(layout.special(Special::EndOfSpeech).ok());
        v.push(layout.eos());
        v
    } else {
        layout.range_of(Modality::Text).map(|i| i as TokenId).collect()
    };
    ids.into_iter().filter(|&t| t != mask).collect()
}

/// Picks a token among `allowed` from one row of logits. Returns the token
/// and its probability (the confidence).
fn choose<R: Rng + ?Sized>(row: &[f32], allowed: &[TokenId], temperature: f64, rng: &mut R) -> (TokenId, f64) {
    let max = allowed.iter().map(|&t| row[t as usize] as f64).fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = allowed.iter().map(|&t| (row[t as usize] as f64 - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    let pick = if temperature == 0.0 {
        // First maximum: lowest token id wins ties.
        let mut best = 0;
        for (i, &t) in allowed.iter().enumerate() {
            if row[t as usize] as f64 > row[allowed[best] as usize] as f64 {
                best = i;
            }
        }
        best
    } else {
        let tempered: Vec<f64> = allowed.iter().map(|&t| ((row[t as usize] as f64 - max) / temperature).exp()).collect();
        let total: f64 = tempered.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = allowed.len() - 1;
        for (i, w) in tempered.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        pick
    };
    (allowed[pick], probs[pick] / z)
}

/// One refinement step on the active block: predicts every masked position in
/// `block`, keeps the `k` most confident (lowest position on ties) and leaves
/// the rest masked. Finalized positions are untouched.
#[allow(clippy::too_many_arguments)]
pub fn step<R: Rng + ?Sized>(
    logits: &[f32],
    vocab: usize,
    tokens: &mut [TokenId],
    block: (usize, usize),
    k: usize,
    mask: TokenId,
    allowed: &[TokenId],
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<()> {
    let masked: Vec<usize> = (block.0..block.1).filter(|&i| tokens[i] == mask).collect();
    if k == 0 || k > masked.len() {
        return Err(Error::Decode(format!("cannot finalize {k} of {} masked positions", masked.len())));
    }
    if logits.len() != tokens.len() * vocab {
        return Err(Error::Decode("logits do not cover the sequence".into()));
    }
    let mut proposals: Vec<(usize, TokenId, f64)> = masked
        .iter()
        .map(|&i| {
            let (tok, conf) = choose(&logits[i * vocab..(i + 1) * vocab], allowed, config.temperature, rng);
            (i, tok, conf)
        })
        .collect();
    if config.remask == Remask::Random {
        for p in &mut proposals {
            p.2 = rng.random::<f64>();
        }
    }
    proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    for &(i, tok, _) in &proposals[..k] {
        tokens[i] = tok;
    }
    Ok(())
}

/// Result of one decoding run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub forward_calls: usize,
    /// Masked positions left in the target after each step.
    pub masked_after_step: Vec<usize>,
}

impl Generation {
    pub fn target<'a>(&'a self, prompt: &AssembledSequence) -> &'a [TokenId] {
        &self.tokens[prompt.target_span.0..prompt.target_span.1]
    }
}

/// Denoises the fully masked target span of `prompt`.
pub fn generate<D: Denoiser + ?Sized>(
    model: &D,
    layout: &VocabLayout,
    prompt: &AssembledSequence,
    config: &DecodeConfig,
) -> Result<Generation> {
    config.validate()?;
    let family = prompt.family;
    if !family.generates_image() && config.cfg_scale != 1.0 {
        return Err(Error::Decode(format!("guidance applies to image generation only, not {family}")));
    }
    let mask = layout.mask();
    let (a, b) = prompt.target_span;
    if prompt.tokens[a..b].iter().any(|&t| t != mask) {
        return Err(Error::Decode("target span is not fully masked".into()));
    }
    if model.vocab_size() != layout.total_size() {
        return Err(Error::Decode("model and layout vocabularies differ".into()));
    }
    let plan = Plan::new(prompt.target_span, family, config)?;
    let allowed = allowed_tokens(layout, family);
    let guided = config.guided(family);
    let uncond_base = if guided { Some(unconditional(layout, prompt)) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tokens = prompt.tokens.clone();
    let mut calls = 0;
    let mut trace = Vec::with_capacity(plan.total_steps());
    let v = model.vocab_size();
    for (block, counts) in &plan.blocks {
        for &k in counts {
            let logits = match &uncond_base {
                Some(u) => {
                    let mut uncond = u.tokens.clone();
                    uncond[a..b].copy_from_slice(&tokens[a..b]);
                    calls += 2;
                    combine_guidance(&model.logits(&tokens)?, &model.logits(&uncond)?, config.cfg_scale)?
                }
                None => {
                    calls += 1;
                    model.logits(&tokens)?
                }
            };
            step(&logits, v, &mut tokens, *block, k, mask, &allowed, config, &mut rng)?;
            trace.push(tokens[a..b].iter().filter(|&&t| t == mask).count());
        }
    }
    Ok(Generation { tokens, forward_calls: calls, masked_after_step: trace })
}

/// Wraps a denoiser and counts forward calls.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(tokens)
    }
}
