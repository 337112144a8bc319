//! Staged curriculum: mixed-task batches, training loop, persistence and
//! evaluation.

mod checkpoint;
mod eval;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{vocab_extension_init, Checkpoint, Metadata, FORMAT_VERSION, MAGIC};
pub use eval::{cer, evaluate, higher_is_better, primary_metric, sweep, EvalConfig, EvalReport, MetricRecord, SweepPoint, Trend};

use crate::backbone::{AdamW, AdamWConfig, Model, ModelConfig};
use crate::diffusion::{batch_loss_and_grad, corrupt, drop_condition, DEFAULT_P_DROP};
use crate::error::{Error, Result};
use crate::synth::SyntheticWorld;
use crate::templates::{assemble_with_policy, Capacities, EosPolicy, Sample, Stage, TemplateFamily};
use crate::vocab::VocabLayout;

/// Architecture of a fresh backbone on a text and vision vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub text_size: usize,
    pub vision_size: usize,
    pub seed: u64,
    /// Speech ids added before the first speech stage.
    pub speech_size: usize,
    pub extension_seed: u64,
}

impl ModelSpec {
    pub fn config(&self) -> Result<ModelConfig> {
        let config = ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            seed: self.seed,
            vocab: VocabLayout::standard(self.text_size, self.vision_size, 0)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn init(&self) -> Result<Checkpoint> {
        let mut meta = Metadata { seed: self.seed, ..Metadata::default() };
        meta.history.push(format!("init seed={}", self.seed));
        Ok(Checkpoint::new(Model::init(self.config()?)?, meta))
    }

    pub fn extend(&self, backbone: &Checkpoint) -> Result<Checkpoint> {
        vocab_extension_init(backbone, self.speech_size, self.extension_seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn default_p_drop() -> f64 {
    DEFAULT_P_DROP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    /// Sampling weight per task family.
    pub mixture: BTreeMap<TemplateFamily, f64>,
    /// `excluded` trains without termination supervision at any stage.
    #[serde(default)]
    pub eos_policy: EosPolicy,
    pub capacities: Capacities,
    #[serde(default)]
    pub world: SyntheticWorld,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability of hiding the caption of image-generation examples.
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Pipeline("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Pipeline(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        let mut total = 0.0;
        for (&family, &w) in &self.mixture {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Pipeline(format!("invalid weight {w} for {family}")));
            }
            if w > 0.0 && !self.stage.allows(family) {
                return Err(Error::FamilyUnavailable { family, stage: self.stage });
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Pipeline("task mixture has no positive weight".into()));
        }
        self.world.validate()
    }

    pub fn active_families(&self) -> Vec<(TemplateFamily, f64)> {
        self.mixture.iter().filter(|(_, &w)| w > 0.0).map(|(&f, &w)| (f, w)).collect()
    }

    pub fn scores_eos(&self) -> bool {
        self.eos_policy.scores_eos(self.stage)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Pre-generated samples grouped by family.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub by_family: BTreeMap<TemplateFamily, Vec<Sample>>,
}

impl Dataset {
    pub fn generate(world: &SyntheticWorld, families: &[TemplateFamily], per_family: usize, seed: u64) -> Result<Self> {
        world.validate()?;
        let mut by_family = BTreeMap::new();
        for &family in families {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(family as u64 + 1);
            let samples = (0..per_family).map(|_| world.sample(family, &mut rng)).collect::<Result<Vec<_>>>()?;
            by_family.insert(family, samples);
        }
        Ok(Self { by_family })
    }

    pub fn len(&self) -> usize {
        self.by_family.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `<family>.jsonl` per family into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        for (family, samples) in &self.by_family {
            let mut out = std::io::BufWriter::new(fs::File::create(dir.as_ref().join(format!("{family}.jsonl")))?);
            for s in samples {
                serde_json::to_writer(&mut out, s)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Ok(())
    }

    /// Reads every `<family>.jsonl` in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let mut by_family = BTreeMap::new();
        for family in TemplateFamily::ALL {
            let path = dir.as_ref().join(format!("{family}.jsonl"));
            if !path.exists() {
                continue;
            }
            let mut samples = Vec::new();
            for line in BufReader::new(fs::File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let s: Sample = serde_json::from_str(&line)?;
                if s.family() != family {
                    return Err(Error::Pipeline(format!("{} holds a {} record", path.display(), s.family())));
                }
                samples.push(s);
            }
            by_family.insert(family, samples);
        }
        Ok(Self { by_family })
    }

    fn pick(&self, family: TemplateFamily, rng: &mut ChaCha8Rng) -> Result<Sample> {
        self.by_family
            .get(&family)
            .and_then(|s| s.choose(rng))
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("dataset has no {family} samples")))
    }
}

/// Per-example rng: independent of batch composition and thread count.
fn example_rng(seed: u64, step: usize, index: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step * batch + index) as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// Batch-mean training loss per step.
    pub losses: Vec<f64>,
}

/// Trains `init` for `config.steps` optimizer steps. Examples come from
/// `data` when given, otherwise straight from the synthetic world.
pub fn run_stage(
    config: &StageConfig,
    init: &Checkpoint,
    data: Option<&Dataset>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<StageOutcome> {
    config.validate()?;
    let layout = init.layout().clone();
    let families = config.active_families();
    if let Some((f, _)) = families.iter().find(|(f, _)| f.uses_speech()) {
        if layout.speech_size() == 0 {
            return Err(Error::Pipeline(format!(
                "{f} needs speech tokens but the initial checkpoint has none; extend or merge it first"
            )));
        }
    }
    let weights = WeightedIndex::new(families.iter().map(|(_, w)| *w))
        .map_err(|e| Error::Pipeline(format!("task mixture: {e}")))?;
    let policy = config.eos_policy;

    let mut model = init.model.clone();
    let opt_config = AdamWConfig { total_steps: config.steps, ..config.optimizer };
    let mut opt = AdamW::new(opt_config, &model.params);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .into_par_iter()
            .map(|i| {
                let mut rng = example_rng(config.seed, step, i, config.batch_size);
                let family = families[weights.sample(&mut rng)].0;
                let sample = match data {
                    Some(d) => d.pick(family, &mut rng)?,
                    None => config.world.sample(family, &mut rng)?,
                };
                let seq = assemble_with_policy(&layout, &sample, config.stage, &config.capacities, policy)?;
                let seq = drop_condition(&mut rng, &layout, &seq, config.p_drop);
                let draw = corrupt(&mut rng, &layout, &seq, None)?;
                Ok((seq, draw))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_loss_and_grad(&model, &batch)?;
        opt.step(&mut model.params, &grads)?;
        losses.push(loss);
        on_step(step, loss);
    }

    let mut meta = init.meta.clone();
    meta.stage = Some(config.stage);
    meta.steps = config.steps;
    meta.seed = config.seed;
    meta.history.push(format!("{} steps={} seed={}", config.stage, config.steps, config.seed));
    Ok(StageOutcome { checkpoint: Checkpoint::new(model, meta), losses })
}
