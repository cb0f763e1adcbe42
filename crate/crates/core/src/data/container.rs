//! Directory container: `manifest.txt` with `key: value` lines plus flat
//! little-endian f64 binaries, one per (split, modality) laid out as
//! `[samples x T_m x D_m]`, and one `[samples]` label file per split.
//!
//! ```text
//! format: derl-dataset
//! version: 1
//! endianness: little
//! dtype: f64
//! provenance: synthetic
//! len.t: 8
//! dim.t: 16
//! count.train: 358
//! features.train.t: train_t.f64
//! labels.train: train_labels.f64
//! ```
//!
//! Optional `mask.<split>.<m>` entries name one-byte-per-token presence files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Modality, ModalityBundle, ModalityFeatures, Provenance, Result, Split};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "derl-dataset";
const VERSION: &str = "1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(file: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn f64_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    let mut line = |k: &str, v: &str| {
        manifest.push_str(k);
        manifest.push_str(": ");
        manifest.push_str(v);
        manifest.push('\n');
    };
    line("format", FORMAT);
    line("version", VERSION);
    line("endianness", "little");
    line("dtype", "f64");
    line("provenance", dataset.provenance.name());
    for m in Modality::ALL {
        line(&format!("len.{m}"), &dataset.lens[m.index()].to_string());
        line(&format!("dim.{m}"), &dataset.dims[m.index()].to_string());
    }
    for s in Split::ALL {
        let samples = dataset.split(s);
        let name = s.name();
        line(&format!("count.{name}"), &samples.len().to_string());
        for m in Modality::ALL {
            let file = format!("{name}_{m}.f64");
            let bytes = f64_bytes(samples.iter().flat_map(|b| b.get(m).data.iter().copied()));
            write_file(&dir.join(&file), &bytes)?;
            line(&format!("features.{name}.{m}"), &file);
            if samples.iter().any(|b| !b.get(m).is_pristine()) {
                let file = format!("{name}_{m}.mask");
                let bytes: Vec<u8> = samples
                    .iter()
                    .flat_map(|b| b.get(m).present.iter().map(|&p| p as u8))
                    .collect();
                write_file(&dir.join(&file), &bytes)?;
                line(&format!("mask.{name}.{m}"), &file);
            }
        }
        let file = format!("{name}_labels.f64");
        write_file(&dir.join(&file), &f64_bytes(samples.iter().map(|b| b.label)))?;
        line(&format!("labels.{name}"), &file);
    }
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, manifest.as_bytes())
}

struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once(':')
                .ok_or_else(|| format_err(path, format!("line {}: expected `key: value`", no + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !known_key(&k) {
                return Err(format_err(path, format!("line {}: unknown key `{k}`", no + 1)));
            }
            if entries.insert(k.clone(), v).is_some() {
                return Err(format_err(path, format!("line {}: duplicate key `{k}`", no + 1)));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err(&self.path, format!("missing key `{key}`")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| format_err(&self.path, format!("`{key}` must be a non-negative integer, got `{v}`")))
    }

    fn expect(&self, key: &str, want: &str) -> Result<()> {
        let v = self.get(key)?;
        if v != want {
            return Err(format_err(&self.path, format!("`{key}` must be `{want}`, got `{v}`")));
        }
        Ok(())
    }
}

fn known_key(k: &str) -> bool {
    let parts: Vec<&str> = k.split('.').collect();
    let is_mod = |s: &str| Modality::from_tag(s).is_some();
    let is_split = |s: &str| Split::ALL.iter().any(|x| x.name() == s);
    match parts.as_slice() {
        ["format" | "version" | "endianness" | "dtype" | "provenance"] => true,
        ["len" | "dim", m] => is_mod(m),
        ["count" | "labels", s] => is_split(s),
        ["features" | "mask", s, m] => is_split(s) && is_mod(m),
        _ => false,
    }
}

fn read_f64s(path: &Path, expected: usize, shape: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 8 {
        let detail = if bytes.len() % 8 == 0 {
            format!("{} values", bytes.len() / 8)
        } else {
            format!("{} bytes (not a whole number of f64 values)", bytes.len())
        };
        return Err(format_err(
            path,
            format!("expected shape {shape} = {expected} f64 values, found {detail}"),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Loads a dataset from a container directory or its manifest file.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mf = Manifest::parse(&manifest_path, &text)?;
    mf.expect("format", FORMAT)?;
    mf.expect("version", VERSION)?;
    mf.expect("endianness", "little")?;
    mf.expect("dtype", "f64")?;
    let provenance = match mf.entries.get("provenance").map(String::as_str) {
        None => Provenance::External,
        Some("synthetic") => Provenance::Synthetic,
        Some("external") => Provenance::External,
        Some(other) => return Err(format_err(&manifest_path, format!("unknown provenance `{other}`"))),
    };
    let mut lens = [0; 3];
    let mut dims = [0; 3];
    for m in Modality::ALL {
        lens[m.index()] = mf.usize(&format!("len.{m}"))?;
        dims[m.index()] = mf.usize(&format!("dim.{m}"))?;
        if lens[m.index()] == 0 || dims[m.index()] == 0 {
            return Err(format_err(&manifest_path, format!("modality {m} must have positive length and dim")));
        }
    }
    let mut dataset = Dataset {
        lens,
        dims,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        provenance,
    };
    for s in Split::ALL {
        let name = s.name();
        let count = mf.usize(&format!("count.{name}"))?;
        let mut per_mod: Vec<(Vec<f64>, Option<Vec<u8>>)> = Vec::new();
        for m in Modality::ALL {
            let (t, d) = (lens[m.index()], dims[m.index()]);
            let file = dir.join(mf.get(&format!("features.{name}.{m}"))?);
            let data = read_f64s(&file, count * t * d, &format!("[{count} x {t} x {d}]"))?;
            if let Some(i) = data.iter().position(|x| !x.is_finite()) {
                return Err(format_err(&file, format!("non-finite value at index {i}")));
            }
            let mask = match mf.entries.get(&format!("mask.{name}.{m}")) {
                None => None,
                Some(f) => {
                    let file = dir.join(f);
                    let bytes = fs::read(&file).map_err(io_err(&file))?;
                    if bytes.len() != count * t || bytes.iter().any(|&b| b > 1) {
                        return Err(format_err(
                            &file,
                            format!("expected shape [{count} x {t}] of 0/1 bytes, found {} bytes", bytes.len()),
                        ));
                    }
                    Some(bytes)
                }
            };
            per_mod.push((data, mask));
        }
        let file = dir.join(mf.get(&format!("labels.{name}"))?);
        let labels = read_f64s(&file, count, &format!("[{count}]"))?;
        if let Some(i) = labels.iter().position(|y| !(-3.0..=3.0).contains(y)) {
            return Err(format_err(&file, format!("label {} at index {i} outside [-3, 3]", labels[i])));
        }
        let out = dataset.split_mut(s);
        for (i, &label) in labels.iter().enumerate() {
            let modalities = [0, 1, 2].map(|k| {
                let (t, d) = (lens[k], dims[k]);
                let (data, mask) = &per_mod[k];
                let mut f = ModalityFeatures::new(t, d, data[i * t * d..(i + 1) * t * d].to_vec()).expect("checked length");
                if let Some(mask) = mask {
                    f.present = mask[i * t..(i + 1) * t].iter().map(|&b| b == 1).collect();
                }
                f
            });
            out.push(ModalityBundle { modalities, label });
        }
    }
    Ok(dataset)
}
