//! The subcommands as plain functions, so that tests drive exactly what the
//! binary runs.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rln2_core::kv::KvMap;
use rln2_core::metrics::MetricReport;
use rln2_core::model::checkpoint::Checkpoint;
use rln2_core::model::count_macs;
use rln2_core::synthdata::io::{load_dataset, read_image, write_image, write_sample};
use rln2_core::synthdata::{DatasetSpec, Split};
use rln2_core::training::{evaluate, history_csv, Evaluation, TrainPair, TrainRecord, Trainer};
use rln2_core::{Error, Fusion, Guidance, Model, ModelConfig};

use crate::manifest::{code_version, DataDescriptor, ExperimentManifest};

pub const DATASET_MANIFEST: &str = "dataset.txt";
pub const RUN_MANIFEST: &str = "manifest.txt";
pub const HISTORY: &str = "history.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ABLATION_TABLE: &str = "ablation.csv";

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub out: PathBuf,
    pub spec: DatasetSpec,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub root: PathBuf,
    /// Scenes per split, in train/val/test order.
    pub scenes: [usize; 3],
    pub samples: [usize; 3],
}

/// Renders the dataset, writes it under `out` and reads every split back
/// through the loader before returning.
pub fn generate(args: &GenerateArgs) -> Result<DatasetSummary> {
    let out = &args.out;
    if out.exists() {
        let occupied = fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?.next().is_some();
        if occupied && !args.force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())).into());
        }
        if args.force {
            for s in Split::ALL {
                let d = out.join(s.as_str());
                if d.exists() {
                    fs::remove_dir_all(&d).with_context(|| format!("clearing {}", d.display()))?;
                }
            }
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let samples = args.spec.generate()?;
    for s in Split::ALL {
        fs::create_dir_all(out.join(s.as_str()))?;
    }
    for s in &samples {
        write_sample(out, s).with_context(|| format!("writing sample {}", s.triplet.id()))?;
    }
    let mut meta = KvMap::new();
    meta.set("code_version", code_version());
    meta.merge_prefixed("data", &args.spec.to_kv());
    let scenes = args.spec.split_counts();
    let mut counts = [0usize; 3];
    for (i, s) in Split::ALL.iter().enumerate() {
        counts[i] = samples.iter().filter(|g| g.split == *s).count();
        meta.set(format!("split.{s}.scenes"), scenes[i]);
        meta.set(format!("split.{s}.samples"), counts[i]);
    }
    fs::write(out.join(DATASET_MANIFEST), meta.to_text())?;

    for (i, s) in Split::ALL.iter().enumerate() {
        let mut n = 0;
        for t in load_dataset(out, *s)? {
            t.with_context(|| format!("verifying the {s} split"))?;
            n += 1;
        }
        if n != counts[i] {
            return Err(Error::Integrity(format!("{s} split has {n} triplets on disk, expected {}", counts[i])).into());
        }
    }
    Ok(DatasetSummary { root: out.clone(), scenes, samples: counts })
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    /// Stop early at this step; the run can be resumed from `last.ckpt`.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub step: usize,
    pub completed: bool,
    pub checkpoint: PathBuf,
    pub history: Vec<TrainRecord>,
    /// Present once the run reaches its final step and the validation split
    /// is non-empty.
    pub validation: Option<Evaluation>,
}

pub fn train(manifest: &ExperimentManifest, args: &TrainArgs) -> Result<TrainOutcome> {
    manifest.validate()?;
    let mut data = manifest.data.load(&[Split::Train, Split::Val])?;
    let val = data.pop().expect("two splits");
    let train_set = data.pop().expect("two splits");
    train_with_data(manifest, args, &train_set, &val).with_context(|| format!("training run `{}`", manifest.run_id))
}

/// [`train`] on data that is already in memory.
pub fn train_with_data(
    manifest: &ExperimentManifest,
    args: &TrainArgs,
    train_set: &[TrainPair],
    val: &[TrainPair],
) -> Result<TrainOutcome> {
    manifest.validate()?;
    if train_set.is_empty() {
        return Err(Error::Integrity("the training split is empty".into()).into());
    }
    let run_dir = manifest.run_dir();
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    manifest.save(&run_dir.join(RUN_MANIFEST))?;

    let mut trainer = match &args.resume {
        None => Trainer::new(Model::build(manifest.model.clone())?, manifest.train.clone())?,
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.model_config()? != manifest.model {
                return Err(Error::Config(format!("{} was trained with a different model config", path.display())).into());
            }
            let t = Trainer::resume(&ck)?;
            if t.config != manifest.train {
                return Err(Error::Config(format!("{} was trained with a different recipe", path.display())).into());
            }
            t
        }
    };
    let history_path = run_dir.join(HISTORY);
    let resumed_from = trainer.step();
    let until = args.max_steps.unwrap_or(usize::MAX).min(manifest.train.total_steps);
    let result = trainer.run_until(train_set, until, Some(&ckpt_dir));
    write_history(&history_path, &trainer.history, resumed_from > 0)?;
    result?;

    let completed = trainer.step() >= manifest.train.total_steps;
    let checkpoint = run_dir.join(if completed { FINAL_CHECKPOINT } else { LAST_CHECKPOINT });
    trainer.checkpoint().save(&checkpoint)?;
    let validation = if completed && !val.is_empty() {
        let ev = evaluate(&trainer.model, val)?;
        write_report(&run_dir, "val", &ev)?;
        Some(ev)
    } else {
        None
    };
    Ok(TrainOutcome { run_dir, step: trainer.step(), completed, checkpoint, history: trainer.history, validation })
}

/// A resumed run appends to the curve already on disk, so the file always
/// holds one row per optimizer step.
fn write_history(path: &Path, records: &[TrainRecord], append: bool) -> Result<()> {
    let csv = history_csv(records);
    if append && path.is_file() {
        let mut existing = fs::read_to_string(path)?;
        let first = records.first().map(|r| r.step);
        // Drop rows at or past the resume point left by an earlier attempt.
        let kept: Vec<&str> = existing
            .lines()
            .enumerate()
            .filter(|(i, line)| {
                *i == 0
                    || first.is_none_or(|f| {
                        line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < f)
                    })
            })
            .map(|(_, l)| l)
            .collect();
        existing = kept.join("\n");
        existing.push('\n');
        for line in csv.lines().skip(1) {
            existing.push_str(line);
            existing.push('\n');
        }
        fs::write(path, existing)?;
    } else {
        fs::write(path, csv)?;
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

/// Where a command gets its model from.
#[derive(Clone, Debug)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    /// A freshly initialized network, which is the identity map.
    Fresh(ModelConfig),
}

impl ModelSource {
    pub fn load(&self) -> Result<Model> {
        match self {
            ModelSource::Checkpoint(p) => {
                let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                Ok(ck.to_model()?)
            }
            ModelSource::Fresh(cfg) => Ok(Model::build(cfg.clone())?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub model: ModelSource,
    pub data: DataDescriptor,
    pub split: Split,
    pub out: PathBuf,
}

pub fn eval(args: &EvalArgs) -> Result<Evaluation> {
    let model = args.model.load()?;
    let pairs = args.data.load(&[args.split])?.pop().expect("one split");
    let ev = evaluate(&model, &pairs).with_context(|| format!("evaluating the {} split", args.split))?;
    write_report(&args.out, args.split.as_str(), &ev)?;
    Ok(ev)
}

/// `<name>_report.txt` holds both rows; `<name>_metrics.csv` one line per
/// sample with the model and unprocessed scores side by side.
pub fn write_report(dir: &Path, name: &str, ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut kv = KvMap::new();
    kv.merge_prefixed("unprocessed", &ev.unprocessed.to_kv());
    kv.merge_prefixed("model", &ev.model.to_kv());
    kv.set("code_version", code_version());
    fs::write(dir.join(format!("{name}_report.txt")), kv.to_text())?;
    fs::write(dir.join(format!("{name}_metrics.csv")), comparison_csv(&ev.model, &ev.unprocessed))?;
    Ok(())
}

fn comparison_csv(model: &MetricReport, unprocessed: &MetricReport) -> String {
    let mut s = String::from("sample_id,psnr,ssim,unprocessed_psnr,unprocessed_ssim\n");
    for (m, u) in model.per_sample.iter().zip(&unprocessed.per_sample) {
        let _ = writeln!(s, "{},{},{},{},{}", m.sample_id, m.psnr, m.ssim, u.psnr, u.ssim);
    }
    s
}

/// Two-row text table in the shape of a results table.
pub fn format_evaluation(ev: &Evaluation) -> String {
    let mut s = format!("{:<12} {:>9} {:>7}\n", "method", "psnr_db", "ssim");
    for (name, r) in [("unprocessed", &ev.unprocessed), ("model", &ev.model)] {
        let _ = writeln!(s, "{name:<12} {:>9.3} {:>7.4}", r.psnr_db, r.ssim);
    }
    s
}

// ------------------------------------------------------------------ ablate

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub guidance: Guidance,
    pub fusion: Fusion,
}

impl Cell {
    /// The five rows of the guidance/fusion ablation.
    pub const DEFAULT_GRID: [Cell; 5] = [
        Cell { guidance: Guidance::None, fusion: Fusion::Concat },
        Cell { guidance: Guidance::Rgb, fusion: Fusion::Concat },
        Cell { guidance: Guidance::Lab, fusion: Fusion::Concat },
        Cell { guidance: Guidance::Hsv, fusion: Fusion::Concat },
        Cell { guidance: Guidance::Hsv, fusion: Fusion::Cdffa },
    ];
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.guidance == Guidance::None {
            f.write_str("none")
        } else {
            write!(f, "{}-{}", self.guidance, self.fusion)
        }
    }
}

impl std::str::FromStr for Cell {
    type Err = Error;

    /// `none`, or `<guidance>-<fusion>` such as `hsv-cdffa`.
    fn from_str(s: &str) -> rln2_core::Result<Self> {
        let s = s.trim();
        match s.split_once('-') {
            None if s.eq_ignore_ascii_case("none") => Ok(Cell { guidance: Guidance::None, fusion: Fusion::Concat }),
            None => Err(Error::Config(format!("grid cell `{s}` must be `none` or `<guidance>-<fusion>`"))),
            Some((g, f)) => Ok(Cell { guidance: g.parse()?, fusion: f.parse()? }),
        }
    }
}

pub fn parse_grid(text: &str) -> rln2_core::Result<Vec<Cell>> {
    let cells: Vec<Cell> = text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    if cells.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub cells: Vec<Cell>,
    pub split: Split,
    /// Patch side used for the MAC column.
    pub mac_patch: usize,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: Cell,
    pub macs: u64,
    pub run_dir: PathBuf,
    pub result: Result<MetricReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub unprocessed: MetricReport,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `guidance,fusion,macs,psnr,ssim,status`, with the unprocessed input
    /// as the first row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("guidance,fusion,macs,psnr,ssim,status\n");
        let u = &self.unprocessed;
        let _ = writeln!(s, "unprocessed,,0,{},{},ok", u.psnr_db, u.ssim);
        for r in &self.rows {
            let fusion = if r.cell.guidance == Guidance::None { String::new() } else { r.cell.fusion.to_string() };
            match &r.result {
                Ok(m) => {
                    let _ = writeln!(s, "{},{fusion},{},{},{},ok", r.cell.guidance, r.macs, m.psnr_db, m.ssim);
                }
                Err(e) => {
                    let msg = e.replace([',', '\n'], ";");
                    let _ = writeln!(s, "{},{fusion},{},,,failed: {msg}", r.cell.guidance, r.macs);
                }
            }
        }
        s
    }
}

/// One training run per cell under the base manifest's budget; the runs
/// live in `<out_dir>/<run_id>/<cell>`. A failing cell is recorded and the
/// grid carries on.
pub fn ablate(base: &ExperimentManifest, args: &AblateArgs) -> Result<AblationTable> {
    base.model.validate()?;
    for c in &args.cells {
        base.model.clone().with_guidance(c.guidance, c.fusion).validate()?;
    }
    let mut data = base.data.load(&[Split::Train, Split::Val, args.split])?;
    let eval_set = data.pop().expect("three splits");
    let val = data.pop().expect("three splits");
    let train_set = data.pop().expect("three splits");
    let root = base.run_dir();
    fs::create_dir_all(&root)?;
    base.save(&root.join(RUN_MANIFEST))?;

    let unprocessed = evaluate(&Model::build(base.model.clone())?, &eval_set)?.unprocessed;
    let mut rows = Vec::with_capacity(args.cells.len());
    for &cell in &args.cells {
        let mut m = base.clone();
        m.model = m.model.with_guidance(cell.guidance, cell.fusion);
        m.run_id = cell.to_string();
        m.out_dir = root.clone();
        let macs = count_macs(&m.model, args.mac_patch).unwrap_or(0);
        let result = run_cell(&m, &train_set, &val, &eval_set, args.split).map_err(|e| format!("{e:#}"));
        if let Err(e) = &result {
            eprintln!("ablation cell {cell} failed: {e}");
        }
        rows.push(AblationRow { cell, macs, run_dir: m.run_dir(), result });
    }
    let table = AblationTable { unprocessed, rows };
    fs::write(root.join(ABLATION_TABLE), table.to_csv())?;
    Ok(table)
}

fn run_cell(
    m: &ExperimentManifest,
    train_set: &[TrainPair],
    val: &[TrainPair],
    eval_set: &[TrainPair],
    split: Split,
) -> Result<MetricReport> {
    let outcome = train_with_data(m, &TrainArgs::default(), train_set, val)?;
    let model = ModelSource::Checkpoint(outcome.checkpoint).load()?;
    let ev = evaluate(&model, eval_set)?;
    write_report(&outcome.run_dir, split.as_str(), &ev)?;
    Ok(ev.model)
}

// ------------------------------------------------------------------- infer

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub model: ModelSource,
    pub image: PathBuf,
    pub out: PathBuf,
}

/// Whole-image forward pass; the model pads internally, so the output has
/// the input's resolution.
pub fn infer(args: &InferArgs) -> Result<(usize, usize)> {
    let model = args.model.load()?;
    let img = read_image(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let out = model.forward(&img)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_image(&args.out, &out.restored).with_context(|| format!("writing {}", args.out.display()))?;
    Ok((out.restored.height(), out.restored.width()))
}

// -------------------------------------------------------------------- macs

#[derive(Clone, Debug, PartialEq)]
pub struct MacRow {
    pub config: ModelConfig,
    pub patch: usize,
    pub macs: u64,
    pub params: usize,
}

pub fn macs(configs: &[ModelConfig], patch: usize) -> Result<Vec<MacRow>> {
    configs
        .iter()
        .map(|c| {
            Ok(MacRow {
                config: c.clone(),
                patch,
                macs: count_macs(c, patch)?,
                params: Model::build(c.clone())?.param_count(),
            })
        })
        .collect()
}

pub fn format_macs(rows: &[MacRow]) -> String {
    let mut s = format!(
        "{:<7} {:<8} {:<7} {:>5} {:>14} {:>8} {:>10}\n",
        "variant", "guidance", "fusion", "patch", "macs", "gmacs", "params"
    );
    for r in rows {
        let fusion = r.config.effective_fusion().map_or("-".to_string(), |f| f.to_string());
        let _ = writeln!(
            s,
            "{:<7} {:<8} {:<7} {:>5} {:>14} {:>8.3} {:>10}",
            r.config.variant.to_string(),
            r.config.guidance.to_string(),
            fusion,
            r.patch,
            r.macs,
            r.macs as f64 / 1e9,
            r.params
        );
    }
    s
}
