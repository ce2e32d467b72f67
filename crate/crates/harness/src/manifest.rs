//! Experiment manifests: one key-value file that pins the model, the
//! training recipe and the data a run consumes.
//!
//! ```text
//! run_id = sf-hsv-cdffa
//! code_version = rln2 0.1.0 (rln2-synth-1)
//! out_dir = runs
//! data.kind = synthetic
//! data.scenes = 60
//! model.variant = Sf
//! train.total_steps = 2000
//! ```

use std::path::{Path, PathBuf};

use rln2_core::kv::KvMap;
use rln2_core::synthdata::io::load_split;
use rln2_core::synthdata::{DatasetSpec, Split, GENERATOR_VERSION};
use rln2_core::training::{TrainConfig, TrainPair};
use rln2_core::{Error, ModelConfig, Result};

pub const DATA_ROOT_ENV: &str = "RLN2_DATA_ROOT";

pub fn code_version() -> String {
    format!("rln2 {} ({GENERATOR_VERSION})", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Rendered on demand from `spec`, or read from `root` when it was
    /// written to disk by `rln2 generate`.
    Synthetic,
    /// An existing directory tree; `root` falls back to `RLN2_DATA_ROOT`.
    Directory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataDescriptor {
    pub kind: DataKind,
    pub root: Option<PathBuf>,
    pub spec: DatasetSpec,
}

impl DataDescriptor {
    pub fn synthetic(spec: DatasetSpec) -> Self {
        Self { kind: DataKind::Synthetic, root: None, spec }
    }

    pub fn directory(root: Option<PathBuf>) -> Self {
        Self { kind: DataKind::Directory, root, spec: DatasetSpec::default() }
    }

    /// The on-disk root, if any. A `Directory` source without one consults
    /// the environment.
    pub fn resolved_root(&self) -> Option<PathBuf> {
        match (&self.root, self.kind) {
            (Some(r), _) => Some(r.clone()),
            (None, DataKind::Directory) => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from),
            (None, DataKind::Synthetic) => None,
        }
    }

    /// Loads the given splits in order.
    pub fn load(&self, splits: &[Split]) -> Result<Vec<Vec<TrainPair>>> {
        match self.resolved_root() {
            Some(root) => splits
                .iter()
                .map(|&s| Ok(load_split(&root, s)?.iter().map(TrainPair::from).collect()))
                .collect(),
            None if self.kind == DataKind::Directory => Err(Error::Config(format!(
                "directory dataset without `data.root` and {DATA_ROOT_ENV} is unset"
            ))),
            None => {
                let all = self.spec.generate()?;
                Ok(splits
                    .iter()
                    .map(|&s| all.iter().filter(|g| g.split == s).map(|g| TrainPair::from(&g.triplet)).collect())
                    .collect())
            }
        }
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("kind", if self.kind == DataKind::Synthetic { "synthetic" } else { "directory" });
        if let Some(r) = &self.root {
            kv.set("root", r.display());
        }
        if self.kind == DataKind::Synthetic {
            for (k, v) in self.spec.to_kv().iter() {
                kv.set(k, v);
            }
        }
        kv
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        let kind = match kv.get("kind").unwrap_or("synthetic") {
            "synthetic" => DataKind::Synthetic,
            "directory" => DataKind::Directory,
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        };
        let spec = if kind == DataKind::Synthetic { DatasetSpec::from_kv(kv)? } else { DatasetSpec::default() };
        Ok(Self { kind, root: kv.get("root").map(PathBuf::from), spec })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub code_version: String,
    /// Parent of the per-run directory `out_dir/run_id`.
    pub out_dir: PathBuf,
    pub data: DataDescriptor,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentManifest {
    pub fn new(run_id: impl Into<String>, model: ModelConfig, train: TrainConfig, data: DataDescriptor) -> Self {
        Self { run_id: run_id.into(), code_version: code_version(), out_dir: PathBuf::from("runs"), data, model, train }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// Config errors for anything that would fail later, so that nothing is
    /// computed on a broken manifest.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id `{}` must be a plain non-empty name", self.run_id)));
        }
        self.model.validate()?;
        self.train.validate(self.model.size_multiple())?;
        if self.data.kind == DataKind::Synthetic {
            self.data.spec.validate().map_err(as_config)?;
            let largest = self.train.patch_schedule.iter().map(|&(_, p)| p).max().unwrap_or(0);
            if largest > self.data.spec.height.min(self.data.spec.width) {
                return Err(Error::Config(format!(
                    "patch {largest} exceeds the {}x{} synthetic resolution",
                    self.data.spec.height, self.data.spec.width
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("run_id", &self.run_id);
        kv.set("code_version", &self.code_version);
        kv.set("out_dir", self.out_dir.display());
        kv.merge_prefixed("data", &self.data.to_kv());
        kv.merge_prefixed("model", &self.model.to_kv());
        kv.merge_prefixed("train", &self.train.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let m = Self {
            run_id: kv.require("run_id")?.to_string(),
            code_version: kv.get("code_version").map(str::to_string).unwrap_or_else(code_version),
            out_dir: PathBuf::from(kv.get("out_dir").unwrap_or("runs")),
            data: DataDescriptor::from_kv(&kv.section("data"))?,
            model: ModelConfig::from_kv(&kv.section("model"))?,
            train: TrainConfig::from_kv(&kv.section("train"))?,
        };
        Ok(m)
    }

    /// Reads and validates a manifest. Any problem with the file itself is
    /// reported as a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let kv = KvMap::parse_text(&text).map_err(as_config)?;
        let m = Self::from_kv(&kv).map_err(as_config)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv().to_text())?;
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
