//! `omnimask`: data generation, staged training, merging, evaluation and
//! decoding demos for the masked-diffusion toy model.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use omnimask_core::merging::{merge, MergeConfig, MergeStrategy, DEFAULT_ALPHA};
use omnimask_core::pipeline::{
    evaluate, higher_is_better, primary_metric, run_stage, sweep, Checkpoint, Dataset, EvalConfig, Metadata,
    ModelSpec, StageConfig, Trend,
};
use omnimask_core::sampler::{generate, DecodeConfig};
use omnimask_core::synth::{decode_text, describe, detokenize_image, detokenize_speech, GridImage, SyntheticWorld};
use omnimask_core::templates::{assemble, truncate_at_eos, Sample, Stage, TemplateFamily};
use omnimask_core::vocab::Modality;

const RUN_CONFIG: &str = "run_config.json";
const CHECKPOINT: &str = "checkpoint.omdf";

#[derive(Parser)]
#[command(name = "omnimask", version, about = "Masked discrete diffusion over text, image and speech tokens")]
struct Cli {
    /// Base directory for relative output paths.
    #[arg(long, env = "OMNIMASK_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, one JSON-lines file per family.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated family names.
        #[arg(long, value_delimiter = ',', default_value = "v2t,asr,tts,chat,i2t,t2i,i2i,think")]
        families: Vec<TemplateFamily>,
        #[arg(long, default_value_t = 100)]
        per_family: usize,
        /// World settings (JSON); a stage config file also works.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Overrides the image grid side.
        #[arg(long)]
        grid_side: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train one stage.
    Train {
        /// Stage config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the stage named in the config.
        #[arg(long)]
        stage: Option<Stage>,
        /// Starting checkpoint. Without it a fresh backbone is built from --model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Model spec (JSON). With --init at stage 1, extends a text/image
        /// checkpoint with speech tokens.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory; samples are drawn on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Merge a backbone with a stage-1 checkpoint.
    Merge {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        /// Weight on the backbone, in [0, 1].
        #[arg(long, default_value_t = DEFAULT_ALPHA, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, default_value = "modality-disentangled")]
        strategy: MergeStrategy,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a held-out suite.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        suite: PathBuf,
        /// Evaluation config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these families.
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<TemplateFamily>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        /// Guidance scale; image families only.
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate one family over a list of step budgets.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        task: TemplateFamily,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        steps: Vec<usize>,
        /// Defaults to the family's headline metric.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Decode one prompt and print the result.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        family: TemplateFamily,
        /// Text prompt, instruction, utterance or digit string.
        #[arg(long, default_value = "")]
        prompt: String,
        /// Input grid as rows separated by '/', e.g. "010/000/002". Repeat for
        /// video frames.
        #[arg(long)]
        image: Vec<String>,
        /// Ask for a worked answer (think family).
        #[arg(long)]
        think: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-run a recorded run_config.json into a new output directory.
    Replay {
        run_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha {a} is outside [0, 1]"))
    }
}

/// Fully resolved parameters of a run; re-running one reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum RunConfig {
    GenData { seed: u64, families: Vec<TemplateFamily>, per_family: usize, world: SyntheticWorld },
    Train { stage: StageConfig, init: Option<PathBuf>, model: Option<ModelSpec>, data: Option<PathBuf> },
    Merge { backbone: PathBuf, stage1: PathBuf, merge: MergeConfig },
    Eval { ckpt: PathBuf, suite: PathBuf, families: Option<Vec<TemplateFamily>>, eval: EvalConfig },
    Sweep { ckpt: PathBuf, suite: PathBuf, task: TemplateFamily, steps: Vec<usize>, metric: String, eval: EvalConfig },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn resolve_out(root: Option<&Path>, out: &Path) -> PathBuf {
    match root {
        Some(r) if out.is_relative() => r.join(out),
        _ => out.to_path_buf(),
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        bail!("{} already exists and is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run_config(dir: &Path, rc: &RunConfig) -> Result<()> {
    fs::write(dir.join(RUN_CONFIG), serde_json::to_string_pretty(rc)? + "\n")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let world = v.get("world").cloned().unwrap_or(v);
    Ok(serde_json::from_value(world)?)
}

fn load_eval_config(path: Option<&Path>) -> Result<EvalConfig> {
    match path {
        Some(p) => EvalConfig::load(p).with_context(|| format!("reading eval config {}", p.display())),
        None => Ok(EvalConfig::default()),
    }
}

/// Seed recorded by gen-data next to a suite, if any.
fn suite_seed(suite: &Path) -> Option<u64> {
    let rc: RunConfig = serde_json::from_slice(&fs::read(suite.join(RUN_CONFIG)).ok()?).ok()?;
    match rc {
        RunConfig::GenData { seed, .. } => Some(seed),
        _ => None,
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg).exit()
}

fn apply_decode_overrides(
    eval: &mut EvalConfig,
    families: &[TemplateFamily],
    steps: Option<usize>,
    block: Option<usize>,
    cfg_scale: Option<f64>,
) {
    if cfg_scale.is_some() {
        if let Some(f) = families.iter().find(|f| !f.generates_image()) {
            usage_error(format!("--cfg-scale applies to image families only, not {f}"));
        }
    }
    for &f in families {
        let mut d = eval.decode_for(f);
        d.steps = steps.unwrap_or(d.steps);
        d.block_length = block.unwrap_or(d.block_length);
        d.cfg_scale = cfg_scale.unwrap_or(d.cfg_scale);
        eval.decode.insert(f, d);
    }
}

fn execute(rc: &RunConfig, out: &Path) -> Result<()> {
    match rc {
        RunConfig::GenData { seed, families, per_family, world } => {
            let data = Dataset::generate(world, families, *per_family, *seed)?;
            data.save(out)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        RunConfig::Train { stage, init, model, data } => {
            let start = match (init, model) {
                (Some(path), spec) => {
                    let ck = load_checkpoint(path)?;
                    match spec {
                        Some(spec) if stage.stage == Stage::One && ck.layout().speech_size() == 0 => spec.extend(&ck)?,
                        _ => ck,
                    }
                }
                (None, Some(spec)) => spec.init()?,
                (None, None) => bail!("train needs --init or --model"),
            };
            let data = data.as_deref().map(Dataset::load).transpose()?;
            let mut csv = String::from("step,loss\n");
            let every = (stage.steps / 20).max(1);
            let outcome = run_stage(stage, &start, data.as_ref(), |step, loss| {
                csv.push_str(&format!("{step},{loss}\n"));
                if step % every == 0 {
                    eprintln!("step {step:>6}  loss {loss:.4}");
                }
            })?;
            outcome.checkpoint.save(out.join(CHECKPOINT))?;
            fs::write(out.join("losses.csv"), csv)?;
            eprintln!("saved {}", out.join(CHECKPOINT).display());
        }
        RunConfig::Merge { backbone, stage1, merge: config } => {
            let (b, s) = (load_checkpoint(backbone)?, load_checkpoint(stage1)?);
            let model = merge(&b.model, &s.model, config)?;
            let mut meta = Metadata { stage: s.meta.stage, steps: 0, seed: s.meta.seed, history: s.meta.history.clone() };
            meta.history.push(format!("merge alpha={} strategy={}", config.alpha, config.strategy));
            Checkpoint::new(model, meta).save(out.join(CHECKPOINT))?;
            eprintln!("saved {}", out.join(CHECKPOINT).display());
        }
        RunConfig::Eval { ckpt, suite, families, eval } => {
            let ck = load_checkpoint(ckpt)?;
            let data = select(Dataset::load(suite)?, families.as_deref())?;
            let report = evaluate(&ck.model, ck.layout(), &data, eval)?;
            let text = report.to_jsonl()?;
            fs::write(out.join("report.jsonl"), &text)?;
            print!("{text}");
        }
        RunConfig::Sweep { ckpt, suite, task, steps, metric, eval } => {
            let ck = load_checkpoint(ckpt)?;
            let data = Dataset::load(suite)?;
            let points = sweep(&ck.model, ck.layout(), &data, eval, *task, steps, metric)?;
            let mut csv = format!("steps,{metric},forward_calls\n");
            for p in &points {
                csv.push_str(&format!("{},{},{}\n", p.steps, p.value, p.forward_calls));
            }
            fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
            let trend = Trend::analyze(&points, higher_is_better(metric), 0.02).expect("at least one budget");
            println!(
                "# trend: {} within a 2-point band, gain {:+.3} from {} to {} steps, plateau from {} steps",
                if trend.monotone() { "monotone" } else { "not monotone" },
                trend.gain,
                points[0].steps,
                points[points.len() - 1].steps,
                trend.plateau_from
            );
            for (a, b) in &trend.drops {
                println!("# drop between {a} and {b} steps");
            }
        }
    }
    Ok(())
}

fn select(data: Dataset, families: Option<&[TemplateFamily]>) -> Result<Dataset> {
    let Some(fams) = families else { return Ok(data) };
    let mut by_family = std::collections::BTreeMap::new();
    for f in fams {
        let samples = data.by_family.get(f).with_context(|| format!("suite has no {f} samples"))?;
        by_family.insert(*f, samples.clone());
    }
    Ok(Dataset { by_family })
}

fn parse_grid(s: &str) -> Result<GridImage> {
    let rows = s
        .split('/')
        .map(|row| {
            if row.contains(',') {
                row.split(',').map(|c| c.trim().parse::<u32>().context("grid cell")).collect::<Result<Vec<_>>>()
            } else {
                row.chars().map(|c| c.to_digit(10).context("grid cells must be digits")).collect()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridImage::from_rows(&rows)?)
}

fn render_grid(img: &GridImage) -> String {
    let mut out = String::new();
    for r in 0..img.side() {
        let row: Vec<String> = (0..img.side())
            .map(|c| match img.get(r, c) {
                0 => ".".into(),
                v => v.to_string(),
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_generate(
    ckpt: &Path,
    family: TemplateFamily,
    prompt: &str,
    images: &[String],
    think: bool,
    steps: Option<usize>,
    block: Option<usize>,
    cfg_scale: Option<f64>,
    seed: u64,
    config: Option<&Path>,
) -> Result<()> {
    if cfg_scale.is_some() && !family.generates_image() {
        usage_error(format!("--cfg-scale applies to image families only, not {family}"));
    }
    let mut eval = load_eval_config(config)?;
    apply_decode_overrides(&mut eval, &[family], steps, block, cfg_scale);
    let ck = load_checkpoint(ckpt)?;
    let layout = ck.layout();
    let world = &eval.world;
    let grids = images.iter().map(|s| parse_grid(s)).collect::<Result<Vec<_>>>()?;
    let first_grid = || grids.first().cloned().context("this family needs --image");
    let blank = GridImage::blank(world.image.side);
    let sample = match family {
        TemplateFamily::VideoToText => {
            if grids.is_empty() {
                bail!("v2t needs one --image per frame");
            }
            Sample::VideoToText { frames: grids.clone(), prompt: or_default(prompt, "track"), response: String::new() }
        }
        TemplateFamily::SpeechToText => {
            Sample::SpeechToText { units: world.speech.codec.units(prompt)?, text: String::new() }
        }
        TemplateFamily::TextToSpeech => Sample::TextToSpeech { text: prompt.into(), units: Vec::new() },
        TemplateFamily::TextChat => Sample::TextChat { prompt: prompt.into(), response: String::new() },
        TemplateFamily::ImageToText => {
            Sample::ImageToText { image: first_grid()?, prompt: or_default(prompt, "caption"), response: String::new() }
        }
        TemplateFamily::TextToImage => Sample::TextToImage { instruction: prompt.into(), image: blank },
        TemplateFamily::ImageToImage => {
            let source = first_grid()?;
            let target = GridImage::blank(source.side());
            Sample::ImageToImage { source, instruction: prompt.into(), target }
        }
        TemplateFamily::ThinkingMode => Sample::ThinkingMode { prompt: prompt.into(), think, response: String::new() },
    };
    let seq = assemble(layout, &sample, Stage::Three, &eval.capacities)?;
    let masked = seq.with_masked_target(layout.mask());
    let decode = DecodeConfig { seed, ..eval.decode_for(family) };
    let g = generate(&ck.model, layout, &masked, &decode)?;
    let target = g.target(&masked);
    let mut stdout = std::io::stdout().lock();
    if family.generates_image() {
        let side = (target.len() as f64).sqrt().round() as usize;
        let img = detokenize_image(layout, target, side)?;
        write!(stdout, "{}", render_grid(&img))?;
        if let Some(scene) = world.image.scene_from_image(&img) {
            writeln!(stdout, "scene: {}", describe(&scene))?;
        }
    } else if family.generates_speech() {
        let end = target
            .iter()
            .position(|&t| layout.modality_of(t).map_or(true, |m| m != Modality::Speech))
            .unwrap_or(target.len());
        let offset = layout.speech_offset() as u32;
        let units: Vec<String> = target[..end].iter().map(|t| (t - offset).to_string()).collect();
        writeln!(stdout, "units: {}", units.join(" "))?;
        writeln!(stdout, "text: {}", detokenize_speech(layout, &world.speech.codec, &target[..end])?)?;
    } else {
        writeln!(stdout, "{}", decode_text(layout, truncate_at_eos(layout, target)))?;
    }
    eprintln!("{} forward calls", g.forward_calls);
    Ok(())
}

fn or_default(s: &str, d: &str) -> String {
    if s.is_empty() { d.into() } else { s.into() }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root.as_deref();
    let (rc, out, force) = match cli.command {
        Command::GenData { seed, out, families, per_family, world, grid_side, force } => {
            let mut world = match world {
                Some(p) => load_world(&p).with_context(|| format!("reading world from {}", p.display()))?,
                None => SyntheticWorld::default(),
            };
            if let Some(side) = grid_side {
                world.image.side = side;
            }
            let mut families = families;
            families.sort();
            families.dedup();
            (RunConfig::GenData { seed, families, per_family, world }, out, force)
        }
        Command::Train { config, stage, init, model, data, out, force } => {
            let mut sc = StageConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = stage {
                sc.stage = s;
            }
            let model = model.map(|p| ModelSpec::load(&p).with_context(|| format!("reading {}", p.display()))).transpose()?;
            let init = init.as_deref().map(absolute).transpose()?;
            let data = data.as_deref().map(absolute).transpose()?;
            (RunConfig::Train { stage: sc, init, model, data }, out, force)
        }
        Command::Merge { backbone, stage1, alpha, strategy, out, force } => {
            let rc = RunConfig::Merge {
                backbone: absolute(&backbone)?,
                stage1: absolute(&stage1)?,
                merge: MergeConfig { alpha, strategy },
            };
            (rc, out, force)
        }
        Command::Eval { ckpt, suite, config, families, steps, block, cfg_scale, out, force } => {
            let mut eval = load_eval_config(config.as_deref())?;
            let selected = match &families {
                Some(f) => f.clone(),
                None => Dataset::load(&suite)?.by_family.keys().copied().collect(),
            };
            apply_decode_overrides(&mut eval, &selected, steps, block, cfg_scale);
            let ck = load_checkpoint(&ckpt)?;
            if suite_seed(&suite) == Some(ck.meta.seed) && ck.meta.stage.is_some() {
                bail!("suite seed {} equals the checkpoint's training seed; generate a held-out suite", ck.meta.seed);
            }
            let rc = RunConfig::Eval { ckpt: absolute(&ckpt)?, suite: absolute(&suite)?, families, eval };
            (rc, out, force)
        }
        Command::Sweep { ckpt, suite, task, steps, metric, config, out, force } => {
            if steps.contains(&0) {
                usage_error("step budgets must be positive");
            }
            let eval = load_eval_config(config.as_deref())?;
            let mut steps = steps;
            steps.sort_unstable();
            steps.dedup();
            let metric = metric.unwrap_or_else(|| primary_metric(task).into());
            let rc = RunConfig::Sweep { ckpt: absolute(&ckpt)?, suite: absolute(&suite)?, task, steps, metric, eval };
            (rc, out, force)
        }
        Command::Generate { ckpt, family, prompt, image, think, steps, block, cfg_scale, seed, config } => {
            return run_generate(&ckpt, family, &prompt, &image, think, steps, block, cfg_scale, seed, config.as_deref());
        }
        Command::Replay { run_config, out, force } => {
            let rc: RunConfig = serde_json::from_slice(&fs::read(&run_config)?)
                .with_context(|| format!("reading {}", run_config.display()))?;
            (rc, out, force)
        }
    };
    let out = resolve_out(root, &out);
    prepare_out(&out, force)?;
    write_run_config(&out, &rc)?;
    execute(&rc, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
