//! Run configuration: a TOML file, `--set key=value` overrides and the
//! resolved snapshot written next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use derl::config::{ModelConfig, TrainConfig};
use derl::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SNAPSHOT_FILE: &str = "resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset directory; empty means synthetic data.
    pub path: String,
    pub samples: usize,
    pub lens: [usize; 3],
    pub dims: [usize; 3],
    pub redundancy: f64,
    pub noise: f64,
    pub split: [f64; 2],
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            path: String::new(),
            samples: s.samples,
            lens: s.lens,
            dims: s.dims,
            redundancy: s.redundancy,
            noise: s.noise,
            split: [s.split.0, s.split.1],
            seed: s.seed,
        }
    }
}

impl DataSection {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            samples: self.samples,
            lens: self.lens,
            dims: self.dims,
            redundancy: self.redundancy,
            noise: self.noise,
            split: (self.split[0], self.split[1]),
            seed: self.seed,
        }
    }

    /// Loads `path`, or generates the synthetic dataset in memory.
    pub fn dataset(&self) -> Result<Dataset> {
        if self.path.is_empty() {
            Ok(generate_synthetic(&self.synthetic())?.0)
        } else {
            load_dataset(Path::new(&self.path)).with_context(|| format!("loading dataset {}", self.path))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Seed of the fixed evaluation masks.
    pub seed: u64,
    /// Ablation variants to run; empty means all.
    pub variants: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            variants: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub experts: Vec<usize>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            experts: (1..=5).collect(),
            rates: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default = "default_out")]
    out: String,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: Table,
    #[serde(default)]
    train: Table,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    sweep: SweepSection,
}

fn default_out() -> String {
    "runs".into()
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: String,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets a dotted `key` in `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not key=value"))?;
    set_dotted(table, k.trim(), parse_value(v.trim()))
}

/// Recursively overlays `top` onto `base`; keys absent from `base` are errors.
fn overlay(base: &mut Table, top: &Table, path: &str) -> Result<()> {
    for (k, v) in top {
        let here = format!("{path}.{k}");
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t, &here)?,
            (Some(slot), _) => *slot = v.clone(),
            (None, _) => bail!("unknown setting {here:?}"),
        }
    }
    Ok(())
}

fn resolve_train(raw: &Table) -> Result<TrainConfig> {
    let mut table: Table = toml::from_str(&toml::to_string(&TrainConfig::toy())?)?;
    overlay(&mut table, raw, "train")?;
    let cfg: TrainConfig = table.try_into().context("train settings")?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_model(raw: &Table, data: &Dataset) -> Result<ModelConfig> {
    let mut raw = raw.clone();
    let preset = match raw.remove("preset") {
        Some(Value::String(s)) => s,
        Some(other) => bail!("model.preset must be a string, got {other}"),
        None => "toy".into(),
    };
    let base = ModelConfig::preset(&preset, data.dims, data.lens)
        .ok_or_else(|| anyhow!("unknown model preset {preset:?} (expected toy, mosi or mosei)"))?;
    let mut table: Table = toml::from_str(&base.to_toml())?;
    overlay(&mut table, &raw, "model")?;
    let cfg: ModelConfig = table.try_into().context("model settings")?;
    if cfg.input_dims != data.dims || cfg.seq_lens != data.lens {
        bail!(
            "model expects widths {:?} and lengths {:?} but the dataset has {:?} and {:?}",
            cfg.input_dims,
            cfg.seq_lens,
            data.dims,
            data.lens
        );
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any), applies overrides in order and resolves presets
/// against the dataset. Returns the config and the loaded dataset.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, Dataset)> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let file: RunFile = table.try_into().context("config")?;
    let train = resolve_train(&file.train)?;
    let data = file.data.dataset()?;
    let model = resolve_model(&file.model, &data)?;
    Ok((
        RunConfig {
            out: file.out,
            data: file.data,
            model,
            train,
            eval: file.eval,
            sweep: file.sweep,
        },
        data,
    ))
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the snapshot into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
