//! Linear checkpoint interpolation across a vocabulary extension.

use serde::{Deserialize, Serialize};

use crate::backbone::{vocab_axis, Model};
use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.6;

/// Treatment of vocabulary-indexed tensors ("embed" rows, "head" columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeStrategy {
    /// Interpolate the original slice, take new entries from θ⁽¹⁾.
    Shared,
    /// Take the whole tensor from θ⁽¹⁾.
    Stage1Only,
    /// Original slice from θ⁽⁰⁾, new entries from θ⁽¹⁾.
    ModalityDisentangled,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 3] =
        [MergeStrategy::Shared, MergeStrategy::Stage1Only, MergeStrategy::ModalityDisentangled];

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Shared => "shared",
            MergeStrategy::Stage1Only => "stage1-only",
            MergeStrategy::ModalityDisentangled => "modality-disentangled",
        }
    }
}

impl std::fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Merge(format!(
                "unknown strategy {s:?}; expected one of shared, stage1-only, modality-disentangled"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Weight on the backbone θ⁽⁰⁾.
    pub alpha: f64,
    pub strategy: MergeStrategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, strategy: MergeStrategy::ModalityDisentangled }
    }
}

fn lerp(a: f32, b: f32, alpha: f64) -> f32 {
    if alpha == 1.0 {
        return a;
    }
    if alpha == 0.0 {
        return b;
    }
    // On a 2⁻³² grid both weights are exact in f64, so swapping the operands
    // and complementing alpha reproduces the same two products.
    let w = (alpha * 4_294_967_296.0).round() / 4_294_967_296.0;
    (w * a as f64 + (1.0 - w) * b as f64) as f32
}

/// `α·a + (1−α)·b`, exact at both endpoints.
pub fn interpolate(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if a.shape() != b.shape() {
        return Err(Error::Merge(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| lerp(x, y, alpha)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Merge(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Merges a vocabulary tensor whose `axis` indexes tokens. `a` covers the
/// first `v0` entries; `b` covers all of them.
fn merge_vocab_tensor(a: &Tensor, b: &Tensor, axis: usize, config: &MergeConfig) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1 - axis] != sb[1 - axis] || sa[axis] > sb[axis] {
        return Err(Error::Merge(format!("vocabulary tensors do not nest: {sa:?} vs {sb:?}")));
    }
    let mut out = b.clone();
    let cols_b = sb[1];
    let cols_a = sa[1];
    for r in 0..sa[0] {
        for c in 0..cols_a {
            let old = a.data()[r * cols_a + c];
            let new = b.data()[r * cols_b + c];
            let merged = match config.strategy {
                MergeStrategy::Shared => lerp(old, new, config.alpha),
                MergeStrategy::Stage1Only => new,
                MergeStrategy::ModalityDisentangled => old,
            };
            out.data_mut()[r * cols_b + c] = merged;
        }
    }
    Ok(out)
}

/// Merges `theta0` (backbone vocabulary) into `theta1` (extended vocabulary).
pub fn merge_params(theta0: &ParamMap, theta1: &ParamMap, config: &MergeConfig) -> Result<ParamMap> {
    check_alpha(config.alpha)?;
    for name in theta0.names().chain(theta1.names()) {
        if !theta0.contains(name) || !theta1.contains(name) {
            return Err(Error::Merge(format!("tensor {name} is present in only one checkpoint")));
        }
    }
    let mut out = ParamMap::new();
    for (name, a) in theta0.iter() {
        let b = theta1.get(name)?;
        let merged = match vocab_axis(name) {
            Some(axis) => merge_vocab_tensor(a, b, axis, config)?,
            None => interpolate(a, b, config.alpha).map_err(|e| Error::Merge(format!("{name}: {e}")))?,
        };
        out.insert(name, merged);
    }
    Ok(out)
}

/// Merged model on θ⁽¹⁾'s configuration.
pub fn merge(theta0: &Model, theta1: &Model, config: &MergeConfig) -> Result<Model> {
    let (c0, c1) = (&theta0.config, &theta1.config);
    if (c0.dim, c0.layers, c0.heads, c0.max_len) != (c1.dim, c1.layers, c1.heads, c1.max_len) {
        return Err(Error::Merge("models differ in architecture".into()));
    }
    let (v0, v1) = (&c0.vocab, &c1.vocab);
    if v0.total_size() > v1.total_size()
        || v0.text_size() != v1.text_size()
        || v0.vision_size() != v1.vision_size()
        || v0.specials() != v1.specials()
    {
        return Err(Error::Merge("θ⁽¹⁾'s vocabulary does not extend θ⁽⁰⁾'s".into()));
    }
    Model::new(c1.clone(), merge_params(&theta0.params, &theta1.params, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Denoiser, ModelConfig};
    use crate::vocab::VocabLayout;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Model, Model) {
        let v0 = VocabLayout::standard(32, 10, 0).unwrap();
        let c0 = ModelConfig { dim: 8, layers: 1, heads: 2, max_len: 6, seed: 1, vocab: v0.clone() };
        let c1 = ModelConfig { seed: 2, vocab: v0.extend_with_speech(6).unwrap(), ..c0.clone() };
        (Model::init(c0).unwrap(), Model::init(c1).unwrap())
    }

    fn slice_rows(t: &Tensor, rows: std::ops::Range<usize>) -> Vec<f32> {
        rows.flat_map(|r| t.row(r).to_vec()).collect()
    }

    fn slice_cols(t: &Tensor, cols: std::ops::Range<usize>) -> Vec<f32> {
        (0..t.rows()).flat_map(|r| t.row(r)[cols.clone()].to_vec()).collect()
    }

    #[test]
    fn interpolation_formula_and_endpoints() {
        let a = Tensor::filled(&[1], 2.0f32);
        let b = Tensor::filled(&[1], 4.0f32);
        assert!((interpolate(&a, &b, 0.6).unwrap().data()[0] - 2.8).abs() < 1e-6);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert!(interpolate(&a, &Tensor::zeros(&[2]), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_symmetric(xs in proptest::collection::vec(-10.0f32..10.0, 1..64), alpha in 0.0f64..=1.0) {
            let a = Tensor::from_vec(&[xs.len()], xs.clone()).unwrap();
            let b = Tensor::from_vec(&[xs.len()], xs.iter().map(|x| x * 0.3 - 1.0).collect()).unwrap();
            let ab = interpolate(&a, &b, alpha).unwrap();
            let ba = interpolate(&b, &a, 1.0 - alpha).unwrap();
            for (x, y) in ab.data().iter().zip(ba.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn disentangled_keeps_backbone_rows_and_new_rows() {
        let (m0, m1) = pair();
        let v0 = m0.vocab_size();
        let v1 = m1.vocab_size();
        assert_ne!(m0.config.dim, v0);
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            let cfg = MergeConfig { alpha, strategy: MergeStrategy::ModalityDisentangled };
            let m = merge(&m0, &m1, &cfg).unwrap();
            let (e, e0, e1) = (m.params.get("embed").unwrap(), m0.params.get("embed").unwrap(), m1.params.get("embed").unwrap());
            assert_eq!(slice_rows(e, 0..v0), slice_rows(e0, 0..v0));
            assert_eq!(slice_rows(e, v0..v1), slice_rows(e1, v0..v1));
            let (h, h0, h1) = (m.params.get("head").unwrap(), m0.params.get("head").unwrap(), m1.params.get("head").unwrap());
            assert_eq!(slice_cols(h, 0..v0), slice_cols(h0, 0..v0));
            assert_eq!(slice_cols(h, v0..v1), slice_cols(h1, v0..v1));
        }
    }

    #[test]
    fn disentangled_ignores_stage1_backbone_rows() {
        let (m0, m1) = pair();
        let cfg = MergeConfig::default();
        let base = merge(&m0, &m1, &cfg).unwrap();
        let mut perturbed = m1.clone();
        let v0 = m0.vocab_size();
        for x in &mut perturbed.params.get_mut("embed").unwrap().data_mut()[..v0 * 8] {
            *x += 1.0;
        }
        let again = merge(&m0, &perturbed, &cfg).unwrap();
        assert!(base.params.get("embed").unwrap() == again.params.get("embed").unwrap());
    }

    #[test]
    fn stage1_only_at_alpha_one() {
        let (m0, m1) = pair();
        let m = merge(&m0, &m1, &MergeConfig { alpha: 1.0, strategy: MergeStrategy::Stage1Only }).unwrap();
        assert_eq!(m.params.get("embed").unwrap(), m1.params.get("embed").unwrap());
        assert_eq!(m.params.get("head").unwrap(), m1.params.get("head").unwrap());
        assert_eq!(m.params.get("blocks.0.W1").unwrap(), m0.params.get("blocks.0.W1").unwrap());
    }

    #[test]
    fn alpha_zero_recovers_stage1_for_every_strategy() {
        let (m0, m1) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for strategy in MergeStrategy::ALL {
            let m = merge(&m0, &m1, &MergeConfig { alpha: 0.0, strategy }).unwrap();
            if strategy != MergeStrategy::ModalityDisentangled {
                assert!(m.params.bit_eq(&m1.params), "{strategy}");
                for _ in 0..20 {
                    let toks: Vec<u32> = (0..6).map(|_| rng.random_range(0..m1.vocab_size() as u32)).collect();
                    assert_eq!(m.logits(&toks).unwrap(), m1.logits(&toks).unwrap());
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_checkpoints() {
        let (m0, m1) = pair();
        let mut extra = m1.params.clone();
        extra.insert("stray", Tensor::zeros(&[1]));
        assert!(matches!(merge_params(&m0.params, &extra, &MergeConfig::default()), Err(Error::Merge(_))));
        let mut bad = m1.params.clone();
        bad.insert("embed", Tensor::zeros(&[3, 8]));
        assert!(merge_params(&m0.params, &bad, &MergeConfig::default()).is_err());
        assert!(merge(&m1, &m0, &MergeConfig::default()).is_err());
        assert!(merge(&m0, &m1, &MergeConfig { alpha: -0.1, ..MergeConfig::default() }).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MergeStrategy::ALL {
            assert_eq!(s.name().parse::<MergeStrategy>().unwrap(), s);
        }
        assert!("average".parse::<MergeStrategy>().is_err());
    }
}
