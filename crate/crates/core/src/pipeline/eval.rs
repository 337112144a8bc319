//! Per-task evaluation on held-out synthetic samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::backbone::Denoiser;
use crate::error::{Error, Result};
use crate::sampler::{generate, DecodeConfig};
use crate::synth::{decode_text, describe, detokenize_image, detokenize_speech, SyntheticWorld};
use crate::templates::{assemble, truncate_at_eos, Capacities, Sample, Stage, TemplateFamily};
use crate::vocab::{Modality, TokenId, VocabLayout};

/// Normalized edit distance between `hyp` and `reference`, clamped to [0, 1].
pub fn cer(hyp: &str, reference: &str) -> f64 {
    let n = reference.chars().count();
    if n == 0 {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    (strsim::levenshtein(hyp, reference) as f64 / n as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub capacities: Capacities,
    #[serde(default)]
    pub world: SyntheticWorld,
    /// Decoding settings per family; families absent here use their
    /// defaults with `default_steps`.
    #[serde(default)]
    pub decode: BTreeMap<TemplateFamily, DecodeConfig>,
    pub default_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { capacities: Capacities::default(), world: SyntheticWorld::default(), decode: BTreeMap::new(), default_steps: 64 }
    }
}

impl EvalConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn decode_for(&self, family: TemplateFamily) -> DecodeConfig {
        self.decode
            .get(&family)
            .copied()
            .unwrap_or_else(|| DecodeConfig::for_family(family, self.default_steps))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub family: TemplateFamily,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    pub fn get(&self, family: TemplateFamily, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.family == family && r.metric == metric).map(|r| r.value)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?).expect("writing to a String");
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Headline metric of a family.
pub fn primary_metric(family: TemplateFamily) -> &'static str {
    match family {
        TemplateFamily::TextToSpeech => "cer",
        TemplateFamily::TextToImage => "scene_match",
        _ => "exact_match",
    }
}

pub fn higher_is_better(metric: &str) -> bool {
    !metric.ends_with("cer") && metric != "forward_calls"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub value: f64,
    pub forward_calls: f64,
}

/// Evaluates `family` once per step budget. Budgets are sorted and
/// deduplicated first.
pub fn sweep<D: Denoiser + ?Sized>(
    model: &D,
    layout: &VocabLayout,
    data: &Dataset,
    config: &EvalConfig,
    family: TemplateFamily,
    steps: &[usize],
    metric: &str,
) -> Result<Vec<SweepPoint>> {
    let samples = data
        .by_family
        .get(&family)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Pipeline(format!("suite has no {family} samples")))?;
    let subset = Dataset { by_family: BTreeMap::from([(family, samples.clone())]) };
    let mut budgets = steps.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    budgets
        .into_iter()
        .map(|n| {
            let mut cfg = config.clone();
            cfg.decode.insert(family, DecodeConfig { steps: n, ..config.decode_for(family) });
            let report = evaluate(model, layout, &subset, &cfg)?;
            let value = report
                .get(family, metric)
                .ok_or_else(|| Error::Pipeline(format!("{family} has no metric {metric}")))?;
            let forward_calls = report.get(family, "forward_calls").unwrap_or(0.0);
            Ok(SweepPoint { steps: n, value, forward_calls })
        })
        .collect()
}

/// Shape of a sweep curve, oriented so that larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct Trend {
    /// Consecutive pairs that drop by more than the noise band.
    pub drops: Vec<(usize, usize)>,
    /// Last minus first.
    pub gain: f64,
    /// Smallest budget from which every later value is within the band of
    /// the best.
    pub plateau_from: usize,
}

impl Trend {
    pub fn analyze(points: &[SweepPoint], higher_better: bool, band: f64) -> Option<Self> {
        let (first, last) = (points.first()?, points.last()?);
        let v = |p: &SweepPoint| if higher_better { p.value } else { -p.value };
        let best = points.iter().map(v).fold(f64::NEG_INFINITY, f64::max);
        let drops = points
            .windows(2)
            .filter(|w| v(&w[1]) < v(&w[0]) - band)
            .map(|w| (w[0].steps, w[1].steps))
            .collect();
        let plateau = points.iter().rposition(|p| v(p) < best - band).map_or(0, |i| i + 1);
        Some(Self { drops, gain: v(last) - v(first), plateau_from: points[plateau.min(points.len() - 1)].steps })
    }

    pub fn monotone(&self) -> bool {
        self.drops.is_empty()
    }
}

/// Scores for one generated sample.
type Scores = Vec<(&'static str, f64)>;

fn text_scores(layout: &VocabLayout, out: &[TokenId], reference: &str) -> Scores {
    let hyp = decode_text(layout, truncate_at_eos(layout, out));
    let full = decode_text(layout, out);
    let prefix: String = full.chars().take(reference.chars().count()).collect();
    vec![
        ("exact_match", f64::from(u8::from(hyp == reference))),
        ("cer", cer(&hyp, reference)),
        ("prefix_cer", cer(&prefix, reference)),
    ]
}

fn speech_text(layout: &VocabLayout, world: &SyntheticWorld, units: &[TokenId]) -> String {
    detokenize_speech(layout, &world.speech.codec, units).unwrap_or_default()
}

fn speech_scores(layout: &VocabLayout, world: &SyntheticWorld, out: &[TokenId], text: &str, ref_units: usize) -> Scores {
    let spoken = out
        .iter()
        .position(|&t| layout.modality_of(t).map_or(true, |m| m != Modality::Speech))
        .unwrap_or(out.len());
    let units = &out[..spoken];
    let hyp = speech_text(layout, world, units);
    let prefix = speech_text(layout, world, &units[..ref_units.min(units.len())]);
    vec![
        ("cer", cer(&hyp, text)),
        ("length_accuracy", f64::from(u8::from(units.len().abs_diff(ref_units) <= 1))),
        ("prefix_cer", cer(&prefix, text)),
    ]
}

fn token_accuracy(out: &[TokenId], reference: &[TokenId]) -> f64 {
    let hits = out.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len().max(1) as f64
}

fn score(layout: &VocabLayout, world: &SyntheticWorld, sample: &Sample, out: &[TokenId], reference: &[TokenId]) -> Scores {
    let side = world.image.side;
    match sample {
        Sample::VideoToText { response, .. }
        | Sample::TextChat { response, .. }
        | Sample::ImageToText { response, .. }
        | Sample::ThinkingMode { response, .. } => text_scores(layout, out, response),
        Sample::SpeechToText { text, .. } => text_scores(layout, out, text),
        Sample::TextToSpeech { text, units } => speech_scores(layout, world, out, text, units.len()),
        Sample::TextToImage { instruction, .. } => {
            let matched = detokenize_image(layout, out, side)
                .ok()
                .and_then(|img| world.image.scene_from_image(&img))
                .is_some_and(|scene| describe(&scene) == *instruction);
            vec![("token_accuracy", token_accuracy(out, reference)), ("scene_match", f64::from(u8::from(matched)))]
        }
        Sample::ImageToImage { .. } => vec![
            ("exact_match", f64::from(u8::from(out == reference))),
            ("token_accuracy", token_accuracy(out, reference)),
        ],
    }
}

/// Generates every sample's target from its fully masked template and
/// scores it. Records come out grouped by family in a fixed order, so the
/// same model, data and config give identical reports.
pub fn evaluate<D: Denoiser + ?Sized>(
    model: &D,
    layout: &VocabLayout,
    data: &Dataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    for (&family, samples) in &data.by_family {
        if samples.is_empty() {
            continue;
        }
        let decode = config.decode_for(family);
        decode.validate()?;
        let results = samples
            .par_iter()
            .enumerate()
            .map(|(i, sample)| -> Result<(Scores, usize)> {
                let seq = assemble(layout, sample, Stage::Three, &config.capacities)?;
                let span = seq.target_span.1 - seq.target_span.0;
                if family.generates_image() && decode.block_length < span {
                    return Err(Error::Decode(format!(
                        "{family} needs a single block of {span} tokens, got block_length {}",
                        decode.block_length
                    )));
                }
                let prompt = seq.with_masked_target(layout.mask());
                let cfg = DecodeConfig { seed: decode.seed.wrapping_add(i as u64), ..decode };
                let g = generate(model, layout, &prompt, &cfg)?;
                Ok((score(layout, &config.world, sample, g.target(&prompt), seq.target()), g.forward_calls))
            })
            .collect::<Result<Vec<_>>>()?;

        let n = results.len();
        let mut sums: Vec<(&'static str, f64)> = results[0].0.iter().map(|&(m, _)| (m, 0.0)).collect();
        for (scores, _) in &results {
            for (acc, (_, v)) in sums.iter_mut().zip(scores) {
                acc.1 += v;
            }
        }
        for (metric, total) in sums {
            records.push(MetricRecord { family, metric: metric.into(), value: total / n as f64, n });
        }
        let calls: usize = results.iter().map(|r| r.1).sum();
        records.push(MetricRecord { family, metric: "forward_calls".into(), value: calls as f64 / n as f64, n });
    }
    Ok(EvalReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Model, ModelConfig};
    use crate::sampler::DecodeConfig;

    #[test]
    fn trend_analysis() {
        let pts = |vals: &[f64]| -> Vec<SweepPoint> {
            vals.iter().enumerate().map(|(i, &value)| SweepPoint { steps: 1 << i, value, forward_calls: 0.0 }).collect()
        };
        let t = Trend::analyze(&pts(&[0.1, 0.5, 0.8, 0.79, 0.8]), true, 0.02).unwrap();
        assert!(t.monotone());
        assert!((t.gain - 0.7).abs() < 1e-12);
        assert_eq!(t.plateau_from, 4);
        let t = Trend::analyze(&pts(&[0.1, 0.5, 0.4]), true, 0.02).unwrap();
        assert_eq!(t.drops, vec![(2, 4)]);
        // Lower is better: falling error is an improvement.
        let t = Trend::analyze(&pts(&[0.9, 0.3, 0.3]), false, 0.02).unwrap();
        assert!(t.monotone() && t.gain > 0.5);
        assert!(Trend::analyze(&[], true, 0.02).is_none());
    }

    #[test]
    fn sweep_dedups_budgets() {
        let (layout, world, _, config) = setup();
        let data = Dataset::generate(&world, &[TemplateFamily::TextChat], 3, 5).unwrap();
        let model = Model::init(ModelConfig { dim: 8, layers: 1, heads: 2, max_len: 96, seed: 0, vocab: layout.clone() }).unwrap();
        let pts = sweep(&model, &layout, &data, &config, TemplateFamily::TextChat, &[32, 8, 32, 16], "exact_match").unwrap();
        assert_eq!(pts.iter().map(|p| p.steps).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert!(pts.windows(2).all(|w| w[0].forward_calls < w[1].forward_calls));
        assert!(sweep(&model, &layout, &data, &config, TemplateFamily::TextToImage, &[1], "scene_match").is_err());
    }

    #[test]
    fn cer_values() {
        assert_eq!(cer("abc", "abc"), 0.0);
        assert_eq!(cer("abd", "abc"), 1.0 / 3.0);
        assert_eq!(cer("", "abc"), 1.0);
        assert_eq!(cer("abcdefgh", "ab"), 1.0);
        assert_eq!(cer("", ""), 0.0);
        assert_eq!(cer("x", ""), 1.0);
    }

    /// Knows the answer to every sequence in a reference set: emits a large
    /// logit for the reference token wherever the query is consistent with
    /// exactly one reference, and flat logits otherwise.
    struct Oracle {
        vocab: usize,
        mask: TokenId,
        refs: Vec<Vec<TokenId>>,
    }

    impl Denoiser for Oracle {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
            let mut out = vec![0.0; tokens.len() * self.vocab];
            let hits: Vec<&Vec<TokenId>> = self
                .refs
                .iter()
                .filter(|r| r.len() == tokens.len() && r.iter().zip(tokens).all(|(a, &b)| b == self.mask || *a == b))
                .collect();
            if let [r] = hits[..] {
                for (i, &t) in r.iter().enumerate() {
                    out[i * self.vocab + t as usize] = 10.0;
                }
            }
            Ok(out)
        }
    }

    fn setup() -> (VocabLayout, SyntheticWorld, Dataset, EvalConfig) {
        let layout = VocabLayout::standard(64, 16, 8).unwrap();
        let world = SyntheticWorld::default();
        let data = Dataset::generate(&world, &TemplateFamily::ALL, 6, 11).unwrap();
        let config = EvalConfig {
            capacities: Capacities(TemplateFamily::ALL.iter().map(|&f| (f, 44)).collect()),
            world: world.clone(),
            decode: BTreeMap::new(),
            default_steps: 64,
        };
        (layout, world, data, config)
    }

    #[test]
    fn oracle_scores_perfectly() {
        let (layout, _, data, config) = setup();
        let refs = data
            .by_family
            .values()
            .flatten()
            .map(|s| assemble(&layout, s, Stage::Three, &config.capacities).unwrap().tokens)
            .collect();
        let oracle = Oracle { vocab: layout.total_size(), mask: layout.mask(), refs };
        let report = evaluate(&oracle, &layout, &data, &config).unwrap();
        for r in &report.records {
            match r.metric.as_str() {
                "exact_match" | "scene_match" | "token_accuracy" | "length_accuracy" => {
                    assert_eq!(r.value, 1.0, "{} {}", r.family, r.metric)
                }
                "cer" | "prefix_cer" => assert_eq!(r.value, 0.0, "{} {}", r.family, r.metric),
                "forward_calls" => assert!(r.value >= 1.0),
                other => panic!("unexpected metric {other}"),
            }
            assert_eq!(r.n, 6);
        }
        assert!(report.get(TemplateFamily::TextToImage, "scene_match").is_some());
        assert!(report.get(TemplateFamily::TextToSpeech, "length_accuracy").is_some());
    }

    #[test]
    fn untrained_model_report_is_deterministic_and_bounded() {
        let (layout, _, data, config) = setup();
        let model = Model::init(ModelConfig { dim: 16, layers: 1, heads: 2, max_len: 96, seed: 2, vocab: layout.clone() })
            .unwrap();
        let a = evaluate(&model, &layout, &data, &config).unwrap().to_jsonl().unwrap();
        let b = evaluate(&model, &layout, &data, &config).unwrap().to_jsonl().unwrap();
        assert_eq!(a, b);
        let report = EvalReport::from_jsonl(&a).unwrap();
        for r in &report.records {
            if r.metric != "forward_calls" {
                assert!((0.0..=1.0).contains(&r.value), "{r:?}");
            }
        }
    }

    #[test]
    fn image_tasks_reject_multi_block_configs() {
        let (layout, world, _, mut config) = setup();
        let data = Dataset::generate(&world, &[TemplateFamily::TextToImage], 1, 0).unwrap();
        config.decode.insert(TemplateFamily::TextToImage, DecodeConfig { block_length: 4, ..DecodeConfig::for_family(TemplateFamily::TextToImage, 8) });
        let model = Model::init(ModelConfig { dim: 8, layers: 1, heads: 2, max_len: 96, seed: 0, vocab: layout.clone() }).unwrap();
        assert!(matches!(evaluate(&model, &layout, &data, &config), Err(Error::Decode(_))));
    }
}
