use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rln2::commands::{self, AblateArgs, Cell, EvalArgs, GenerateArgs, InferArgs, ModelSource, TrainArgs};
use rln2::manifest::DATA_ROOT_ENV;
use rln2::{exit_code, DataDescriptor, ExperimentManifest};
use rln2_core::synthdata::{DatasetSpec, Split};
use rln2_core::{Error, Fusion, Guidance, ModelConfig, Variant};

#[derive(Parser)]
#[command(name = "rln2", version, about = "Ambient lighting normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with scene-disjoint splits.
    Generate(GenerateCmd),
    /// Train the run described by a manifest.
    Train(TrainCmd),
    /// Score a checkpoint (or the untrained identity model) on one split.
    Eval(EvalCmd),
    /// Train and score every cell of a guidance x fusion grid.
    Ablate(AblateCmd),
    /// Restore a single image.
    Infer(InferCmd),
    /// Print multiply-accumulate counts per forward pass.
    Macs(MacsCmd),
}

#[derive(Args, Clone, Default)]
struct ModelOpts {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    guidance: Option<Guidance>,
    #[arg(long)]
    fusion: Option<Fusion>,
    /// Channel width of the first encoder stage.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
}

impl ModelOpts {
    fn is_empty(&self) -> bool {
        self.variant.is_none()
            && self.guidance.is_none()
            && self.fusion.is_none()
            && self.width.is_none()
            && self.stages.is_none()
    }

    fn apply(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.context_backbone = v.default_backbone();
        }
        if let Some(g) = self.guidance {
            cfg.guidance = g;
        }
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(w) = self.width {
            cfg.base_width = w;
        }
        if let Some(s) = self.stages {
            cfg.stages = s;
        }
        cfg
    }
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Take the dataset parameters from an experiment manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    samples_per_scene: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    lights_per_scene: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Parent directory for the run, replacing the manifest's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root, replacing the manifest's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for both initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelOpts,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalCmd {
    /// Without a checkpoint the freshly initialized model is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root; defaults to the manifest's data, then to RLN2_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated cells such as `none,rgb-concat,hsv-cdffa`; defaults
    /// to the five standard rows.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long, default_value_t = 128)]
    patch: usize,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct MacsCmd {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    patch: usize,
    #[command(flatten)]
    model: ModelOpts,
}

fn load_manifest(path: &PathBuf) -> Result<ExperimentManifest> {
    Ok(ExperimentManifest::load(path)?)
}

fn data_from(root: Option<PathBuf>, manifest: Option<&ExperimentManifest>) -> DataDescriptor {
    match (root, manifest) {
        (Some(r), _) => DataDescriptor::directory(Some(r)),
        (None, Some(m)) => m.data.clone(),
        (None, None) => DataDescriptor::directory(None),
    }
}

fn fresh_model(opts: &ModelOpts, manifest: Option<&ExperimentManifest>, seed: Option<u64>) -> ModelConfig {
    let base = manifest.map_or_else(ModelConfig::default, |m| m.model.clone());
    let cfg = opts.apply(base);
    match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    }
}

fn model_source(
    checkpoint: Option<PathBuf>,
    opts: &ModelOpts,
    manifest: Option<&ExperimentManifest>,
    seed: Option<u64>,
) -> Result<ModelSource> {
    match checkpoint {
        Some(p) if opts.is_empty() => Ok(ModelSource::Checkpoint(p)),
        Some(_) => Err(Error::Config("model flags cannot be combined with --checkpoint".into()).into()),
        None => Ok(ModelSource::Fresh(fresh_model(opts, manifest, seed))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let manifest = c.manifest.as_ref().map(load_manifest).transpose()?;
            let mut spec = manifest.as_ref().map_or_else(DatasetSpec::default, |m| m.data.spec.clone());
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            if let Some(n) = c.count {
                spec.scenes = n;
            }
            if let Some(n) = c.samples_per_scene {
                spec.samples_per_scene = n;
            }
            if let Some(r) = c.resolution {
                spec.height = r;
                spec.width = r;
            }
            if let Some(l) = c.lights_per_scene {
                spec.lights_per_scene = l;
            }
            let out = c
                .out
                .or_else(|| manifest.as_ref().and_then(|m| m.data.root.clone()))
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                .ok_or_else(|| Error::Config(format!("no output directory: pass --out or set {DATA_ROOT_ENV}")))?;
            let summary = commands::generate(&GenerateArgs { out, spec, force: c.force })?;
            println!(
                "wrote {} (scenes train/val/test = {}/{}/{}, samples = {}/{}/{})",
                summary.root.display(),
                summary.scenes[0],
                summary.scenes[1],
                summary.scenes[2],
                summary.samples[0],
                summary.samples[1],
                summary.samples[2]
            );
        }
        Command::Train(c) => {
            let mut m = load_manifest(&c.manifest)?;
            if let Some(out) = c.out {
                m.out_dir = out;
            }
            if let Some(root) = c.data {
                m.data = DataDescriptor::directory(Some(root));
            }
            if let Some(s) = c.seed {
                m.model.seed = s;
                m.train.seed = s;
            }
            m.model = c.model.apply(m.model);
            let outcome = commands::train(&m, &TrainArgs { resume: c.resume, max_steps: c.max_steps })?;
            if let Some(last) = outcome.history.last() {
                println!("step {} loss {:.6} lr {:.3e}", last.step + 1, last.loss, last.lr);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            if let Some(ev) = &outcome.validation {
                print!("{}", commands::format_evaluation(ev));
            }
        }
        Command::Eval(c) => {
            let manifest = c.manifest.as_ref().map(load_manifest).transpose()?;
            let out = c.out.clone().unwrap_or_else(|| match &c.checkpoint {
                Some(p) => p.parent().map_or_else(PathBuf::new, PathBuf::from),
                None => PathBuf::from("."),
            });
            let model = model_source(c.checkpoint, &c.model, manifest.as_ref(), c.seed)?;
            let args = EvalArgs { model, data: data_from(c.data, manifest.as_ref()), split: c.split, out };
            let ev = commands::eval(&args)?;
            print!("{}", commands::format_evaluation(&ev));
        }
        Command::Ablate(c) => {
            let mut m = load_manifest(&c.manifest)?;
            if let Some(out) = c.out {
                m.out_dir = out;
            }
            if let Some(root) = c.data {
                m.data = DataDescriptor::directory(Some(root));
            }
            if let Some(s) = c.seed {
                m.model.seed = s;
                m.train.seed = s;
            }
            m.model = c.model.apply(m.model);
            let cells = match &c.grid {
                Some(g) => commands::parse_grid(g)?,
                None => Cell::DEFAULT_GRID.to_vec(),
            };
            let table = commands::ablate(&m, &AblateArgs { cells, split: c.split, mac_patch: c.patch })?;
            print!("{}", table.to_csv());
            if table.rows.iter().all(|r| r.result.is_err()) {
                return Err(anyhow::anyhow!("every ablation cell failed"));
            }
        }
        Command::Infer(c) => {
            let model = model_source(c.checkpoint, &c.model, None, c.seed)?;
            let (h, w) = commands::infer(&InferArgs { model, image: c.image, out: c.out.clone() })?;
            println!("wrote {} ({w}x{h})", c.out.display());
        }
        Command::Macs(c) => {
            let manifest = c.manifest.as_ref().map(load_manifest).transpose()?;
            let configs = if manifest.is_some() || !c.model.is_empty() {
                vec![fresh_model(&c.model, manifest.as_ref(), None)]
            } else {
                let mut v: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| ModelConfig::for_variant(v)).collect();
                v.extend(
                    Cell::DEFAULT_GRID
                        .iter()
                        .map(|cell| ModelConfig::for_variant(Variant::Sf).with_guidance(cell.guidance, cell.fusion)),
                );
                let mut unique = Vec::with_capacity(v.len());
                for c in v {
                    if !unique.contains(&c) {
                        unique.push(c);
                    }
                }
                unique
            };
            let rows = commands::macs(&configs, c.patch).context("counting MACs")?;
            print!("{}", commands::format_macs(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
