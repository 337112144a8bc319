//! Forward masking process and the masked-diffusion training objective.

use rand::Rng;

use crate::backbone::{Denoiser, Example, Model, Target};
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Real};
use crate::templates::{AssembledSequence, TemplateFamily};
use crate::vocab::{TokenId, VocabLayout};

/// Lower bound on the sampled masking ratio; keeps the `1/t` weight finite.
pub const T_MIN: f64 = 1e-3;

/// Mask-pattern redraws before a contributing position is forced.
const MAX_REDRAWS: usize = 64;

pub const DEFAULT_P_DROP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionDraw {
    pub t: f64,
    /// Masked positions in increasing order.
    pub masked: Vec<usize>,
    pub corrupted: Vec<TokenId>,
}

impl CorruptionDraw {
    /// Masked positions that carry loss.
    pub fn contributing<'a>(&'a self, seq: &'a AssembledSequence) -> impl Iterator<Item = usize> + 'a {
        self.masked.iter().copied().filter(|&i| seq.supervised[i])
    }
}

/// Masks every corruptible position whose uniform falls below `t`. Because
/// the uniforms are shared across `t`, a larger ratio masks a superset.
pub fn corrupt_with_uniforms(layout: &VocabLayout, seq: &AssembledSequence, t: f64, uniforms: &[f64]) -> CorruptionDraw {
    let mask = layout.mask();
    let mut corrupted = seq.tokens.clone();
    let mut masked = Vec::new();
    for (i, (&u, &c)) in uniforms.iter().zip(&seq.corruptible).enumerate() {
        if c && u < t {
            corrupted[i] = mask;
            masked.push(i);
        }
    }
    CorruptionDraw { t, masked, corrupted }
}

/// Draws `t ~ U(T_MIN, 1]` (unless overridden) and masks each corruptible
/// position independently with probability `t`. Draws that leave no
/// supervised position masked are redrawn at the same `t`; after repeated
/// failures one supervised position is masked outright.
pub fn corrupt<R: Rng + ?Sized>(
    rng: &mut R,
    layout: &VocabLayout,
    seq: &AssembledSequence,
    t_override: Option<f64>,
) -> Result<CorruptionDraw> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq.corruptible[i] && seq.supervised[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Diffusion("sequence has no corruptible supervised positions".into()));
    }
    let t = match t_override {
        Some(t) if t > 0.0 && t <= 1.0 => t,
        Some(t) => return Err(Error::Diffusion(format!("masking ratio {t} outside (0, 1]"))),
        None => T_MIN + (1.0 - T_MIN) * (1.0 - rng.random::<f64>()),
    };
    let mut uniforms = vec![0.0; seq.len()];
    for _ in 0..MAX_REDRAWS {
        uniforms.iter_mut().for_each(|u| *u = rng.random::<f64>());
        let draw = corrupt_with_uniforms(layout, seq, t, &uniforms);
        if draw.contributing(seq).next().is_some() {
            return Ok(draw);
        }
    }
    let forced = candidates[rng.random_range(0..candidates.len())];
    uniforms.iter_mut().for_each(|u| *u = 1.0);
    uniforms[forced] = 0.0;
    Ok(corrupt_with_uniforms(layout, seq, t, &uniforms))
}

fn contributing_targets(seq: &AssembledSequence, draw: &CorruptionDraw, weight: f64) -> Vec<Target> {
    draw.contributing(seq)
        .map(|i| Target { position: i, token: seq.tokens[i], weight })
        .collect()
}

/// `(1/t) · Σ −log p(x₀ᵢ | x_t)` over masked, supervised positions.
pub fn loss<D: Denoiser + ?Sized>(model: &D, seq: &AssembledSequence, draw: &CorruptionDraw) -> Result<f64> {
    let targets = contributing_targets(seq, draw, 1.0 / draw.t);
    if targets.is_empty() {
        return Err(Error::Diffusion("no masked supervised positions".into()));
    }
    let logits = model.logits(&draw.corrupted)?;
    let v = model.vocab_size();
    let mut total = 0.0;
    for t in targets {
        let row = &logits[t.position * v..(t.position + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
        total += t.weight * (lse - row[t.token as usize] as f64);
    }
    Ok(total)
}

/// Mean of per-sequence losses over the batch, with its exact gradient.
pub fn batch_loss_and_grad<T: Real>(
    model: &Model<T>,
    batch: &[(AssembledSequence, CorruptionDraw)],
) -> Result<(f64, ParamMap<T>)> {
    if batch.is_empty() {
        return Err(Error::Diffusion("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let examples = batch
        .iter()
        .map(|(seq, draw)| {
            let targets = contributing_targets(seq, draw, scale / draw.t);
            if targets.is_empty() {
                return Err(Error::Diffusion("no masked supervised positions".into()));
            }
            Ok(Example { tokens: draw.corrupted.clone(), targets })
        })
        .collect::<Result<Vec<_>>>()?;
    model.loss_and_grad(&examples)
}

/// With probability `p_drop`, hides the conditioning caption of an
/// image-generation sequence behind `[MASK]`; delimiters stay in place.
pub fn drop_condition<R: Rng + ?Sized>(
    rng: &mut R,
    layout: &VocabLayout,
    seq: &AssembledSequence,
    p_drop: f64,
) -> AssembledSequence {
    let guided = matches!(seq.family, TemplateFamily::TextToImage | TemplateFamily::ImageToImage);
    if !guided || rng.random::<f64>() >= p_drop {
        return seq.clone();
    }
    unconditional(layout, seq)
}

/// The caption-free context used as the unconditional branch of guidance.
pub fn unconditional(layout: &VocabLayout, seq: &AssembledSequence) -> AssembledSequence {
    let mut out = seq.clone();
    if let Some((a, b)) = seq.prompt_span {
        out.tokens[a..b].iter_mut().for_each(|t| *t = layout.mask());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GridImage;
    use crate::templates::{assemble, Capacities, Sample, Stage};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> VocabLayout {
        VocabLayout::standard(32, 16, 8).unwrap()
    }

    fn chat(layout: &VocabLayout, stage: Stage) -> AssembledSequence {
        let s = Sample::TextChat { prompt: "ab".into(), response: "cd".into() };
        let caps = Capacities(std::iter::once((TemplateFamily::TextChat, 20)).collect());
        assemble(layout, &s, stage, &caps).unwrap()
    }

    fn t2i(layout: &VocabLayout) -> AssembledSequence {
        let img = GridImage::new(2, vec![1, 0, 3, 2]).unwrap();
        let s = Sample::TextToImage { instruction: "ab".into(), image: img };
        assemble(layout, &s, Stage::Two, &Capacities::default()).unwrap()
    }

    struct Uniform(usize);

    impl Denoiser for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
            Ok(vec![0.0; tokens.len() * self.0])
        }
    }

    struct Perfect(Vec<TokenId>, usize);

    impl Denoiser for Perfect {
        fn vocab_size(&self) -> usize {
            self.1
        }
        fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
            let mut out = vec![-1e4; tokens.len() * self.1];
            for (i, &t) in self.0.iter().enumerate() {
                out[i * self.1 + t as usize] = 0.0;
            }
            Ok(out)
        }
    }

    #[test]
    fn full_ratio_masks_every_corruptible_position() {
        let l = layout();
        let seq = chat(&l, Stage::Two);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = corrupt(&mut rng, &l, &seq, Some(1.0)).unwrap();
        for i in 0..seq.len() {
            assert_eq!(d.corrupted[i] == l.mask(), seq.corruptible[i]);
        }
    }

    #[test]
    fn tiny_ratio_forces_exactly_one_position() {
        let l = layout();
        let seq = chat(&l, Stage::Two);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = corrupt(&mut rng, &l, &seq, Some(1e-12)).unwrap();
        assert_eq!(d.masked.len(), 1);
        assert!(seq.supervised[d.masked[0]]);
    }

    #[test]
    fn per_position_rate_matches_ratio() {
        let l = layout();
        let seq = chat(&l, Stage::Two);
        assert_eq!(seq.corruptible.iter().filter(|&&c| c).count(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0usize; seq.len()];
        let n = 100_000;
        let mut u = vec![0.0; seq.len()];
        for _ in 0..n {
            u.iter_mut().for_each(|x| *x = rng.random::<f64>());
            for i in corrupt_with_uniforms(&l, &seq, 0.3, &u).masked {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            if seq.corruptible[i] {
                assert!((c as f64 / n as f64 - 0.3).abs() < 0.01);
            } else {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn uniform_predictor_loss_is_closed_form() {
        let l = layout();
        let v = l.total_size();
        assert_eq!(v, 56);
        let seq = chat(&l, Stage::Two);
        let (a, _) = seq.target_span;
        let mut u = vec![1.0; seq.len()];
        u[a] = 0.1;
        u[a + 1] = 0.2;
        u[a + 5] = 0.3;
        let d = corrupt_with_uniforms(&l, &seq, 0.5, &u);
        let got = loss(&Uniform(v), &seq, &d).unwrap();
        assert!((got - 2.0 * 3.0 * (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let l = layout();
        let seq = chat(&l, Stage::Two);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = corrupt(&mut rng, &l, &seq, Some(0.7)).unwrap();
        let got = loss(&Perfect(seq.tokens.clone(), l.total_size()), &seq, &d).unwrap();
        assert!(got.abs() < 1e-9);
    }

    #[test]
    fn unscored_padding_never_contributes() {
        let l = layout();
        let s = Sample::TextChat { prompt: "ab".into(), response: "cd".into() };
        let caps = Capacities(std::iter::once((TemplateFamily::TextChat, 20)).collect());
        let seq = crate::templates::assemble_with_policy(&l, &s, Stage::Two, &caps, crate::templates::EosPolicy::Excluded)
            .unwrap();
        let (a, b) = seq.target_span;
        let mut u = vec![1.0; seq.len()];
        for x in &mut u[a + 3..b] {
            *x = 0.0;
        }
        let d = corrupt_with_uniforms(&l, &seq, 0.5, &u);
        assert!(!d.masked.is_empty());
        assert!(loss(&Uniform(l.total_size()), &seq, &d).is_err());
    }

    #[test]
    fn no_corruptible_positions_is_an_error() {
        let l = layout();
        let mut seq = chat(&l, Stage::Two);
        seq.corruptible.iter_mut().for_each(|c| *c = false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(corrupt(&mut rng, &l, &seq, None).is_err());
    }

    #[test]
    fn drop_condition_extremes_and_rate() {
        let l = layout();
        let seq = t2i(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(drop_condition(&mut rng, &l, &seq, 0.0), seq);
        let dropped = drop_condition(&mut rng, &l, &seq, 1.0);
        let (a, b) = seq.prompt_span.unwrap();
        for i in 0..seq.len() {
            if (a..b).contains(&i) {
                assert_eq!(dropped.tokens[i], l.mask());
            } else {
                assert_eq!(dropped.tokens[i], seq.tokens[i]);
            }
        }
        assert_eq!(dropped.supervised, seq.supervised);
        assert_eq!(dropped.corruptible, seq.corruptible);

        let n = 10_000;
        let hits = (0..n).filter(|_| drop_condition(&mut rng, &l, &seq, 0.1) != seq).count();
        assert!((hits as f64 / n as f64 - 0.1).abs() < 0.01);

        let text = chat(&l, Stage::Two);
        assert_eq!(drop_condition(&mut rng, &l, &text, 1.0), text);
    }

    #[test]
    fn batch_mean_is_invariant_to_duplication() {
        let l = layout();
        let cfg = crate::backbone::ModelConfig { dim: 8, layers: 1, heads: 2, max_len: 32, seed: 0, vocab: l.clone() };
        let model = Model::init(cfg).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs = [chat(&l, Stage::Two), t2i(&l)];
        let batch: Vec<_> = seqs.iter().map(|s| (s.clone(), corrupt(&mut rng, &l, s, None).unwrap())).collect();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (l1, g1) = batch_loss_and_grad(&model, &batch).unwrap();
        let (l2, g2) = batch_loss_and_grad(&model, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let mut diff = g1.clone();
        diff.add_scaled(&g2, -1.0).unwrap();
        assert!(diff.global_norm() < 1e-12);
        assert!(batch_loss_and_grad(&model, &[]).is_err());

        let want = batch.iter().map(|(s, d)| loss(&model, s, d).unwrap()).sum::<f64>() / 2.0;
        assert!((l1 - want).abs() < 1e-4 * want);
    }

    proptest! {
        #[test]
        fn masks_are_nested_in_ratio(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let l = layout();
            let seq = chat(&l, Stage::Two);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..seq.len()).map(|_| rng.random()).collect();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let small = corrupt_with_uniforms(&l, &seq, lo, &u);
            let large = corrupt_with_uniforms(&l, &seq, hi, &u);
            prop_assert!(small.masked.iter().all(|i| large.masked.contains(i)));
        }

        #[test]
        fn conditioning_is_never_corrupted(seed in any::<u64>(), fam in 0usize..8) {
            let l = VocabLayout::standard(64, 16, 8).unwrap();
            let world = crate::synth::SyntheticWorld::default();
            let family = TemplateFamily::ALL[fam];
            let stage = if family == TemplateFamily::ThinkingMode { Stage::Three } else { Stage::Two };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = world.sample(family, &mut rng).unwrap();
            let caps = Capacities(TemplateFamily::ALL.iter().map(|&f| (f, 64)).collect());
            let seq = assemble(&l, &sample, stage, &caps).unwrap();
            let d = corrupt(&mut rng, &l, &seq, None).unwrap();
            prop_assert!(d.t >= T_MIN && d.t <= 1.0);
            prop_assert!(!d.masked.is_empty());
            for i in seq.conditioning_positions() {
                prop_assert_eq!(d.corrupted[i], seq.tokens[i]);
            }
            for &i in &d.masked {
                prop_assert_eq!(d.corrupted[i], l.mask());
            }
        }
    }
}
