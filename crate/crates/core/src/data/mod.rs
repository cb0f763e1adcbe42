//! Multimodal samples, the on-disk dataset container, synthetic data and the
//! missing-modality corruption simulators.

mod container;
mod missing;
mod synthetic;

use std::fmt;
use std::path::PathBuf;

pub use container::{load_dataset, save_dataset, MANIFEST_FILE};
pub use missing::{corrupt_split, masked_count, random_missing, MissingMode, MissingSpec, RateSpec};
pub use synthetic::{generate_synthetic, planted_cosines, PlantedDirections, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("bundle is already corrupted; corruption only applies to pristine samples")]
    AlreadyCorrupted,
    #[error("format error in {}: {reason}", file.display())]
    Format { file: PathBuf, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Lower and upper bound of sentiment labels.
pub const LABEL_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Visual => "v",
            Modality::Audio => "a",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Subset of {t, v, a}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const FULL: ModalitySet = ModalitySet(0b111);

    pub fn new(mods: &[Modality]) -> Self {
        Self(mods.iter().fold(0, |acc, m| acc | (1 << m.index())))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self) -> bool {
        self == Self::FULL
    }

    /// The seven non-empty subsets in reporting order:
    /// {t}, {v}, {a}, {t,v}, {t,a}, {v,a}, {t,v,a}.
    pub fn all_nonempty() -> [ModalitySet; 7] {
        use Modality::*;
        [
            Self::new(&[Text]),
            Self::new(&[Visual]),
            Self::new(&[Audio]),
            Self::new(&[Text, Visual]),
            Self::new(&[Text, Audio]),
            Self::new(&[Visual, Audio]),
            Self::FULL,
        ]
    }

    /// Label such as `t+v`.
    pub fn label(self) -> String {
        Modality::ALL
            .iter()
            .filter(|m| self.contains(**m))
            .map(|m| m.tag())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn parse(label: &str) -> Option<Self> {
        let mut mods = Vec::new();
        for part in label.split(['+', ',']) {
            mods.push(Modality::from_tag(part.trim())?);
        }
        let set = Self::new(&mods);
        (!set.is_empty()).then_some(set)
    }
}

/// One modality's feature sequence: `len x dim` row-major values plus a
/// per-token presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub present: Vec<bool>,
}

impl ModalityFeatures {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 || data.len() != len * dim {
            return Err(DataError::Invariant(format!(
                "feature sequence {len}x{dim} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            len,
            dim,
            data,
            present: vec![true; len],
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn is_pristine(&self) -> bool {
        self.present.iter().all(|&p| p)
    }
}

/// One sample: text, visual and audio sequences with a sentiment label.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub modalities: [ModalityFeatures; 3],
    pub label: f64,
}

impl ModalityBundle {
    pub fn get(&self, m: Modality) -> &ModalityFeatures {
        &self.modalities[m.index()]
    }

    pub fn is_pristine(&self) -> bool {
        self.modalities.iter().all(ModalityFeatures::is_pristine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    External,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Synthetic => "synthetic",
            Provenance::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-modality sequence length `T_m`.
    pub lens: [usize; 3],
    /// Per-modality feature width `D_m`.
    pub dims: [usize; 3],
    pub train: Vec<ModalityBundle>,
    pub valid: Vec<ModalityBundle>,
    pub test: Vec<ModalityBundle>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ModalityBundle] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<ModalityBundle> {
        match s {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shape agreement, finiteness and label range for every sample.
    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            for (i, b) in self.split(s).iter().enumerate() {
                for m in Modality::ALL {
                    let f = b.get(m);
                    if f.len != self.lens[m.index()] || f.dim != self.dims[m.index()] {
                        return Err(DataError::Invariant(format!(
                            "{} sample {i} modality {m}: {}x{} but dataset declares {}x{}",
                            s.name(),
                            f.len,
                            f.dim,
                            self.lens[m.index()],
                            self.dims[m.index()]
                        )));
                    }
                    if f.data.len() != f.len * f.dim || f.present.len() != f.len {
                        return Err(DataError::Invariant(format!(
                            "{} sample {i} modality {m}: buffer sizes disagree",
                            s.name()
                        )));
                    }
                    if f.data.iter().any(|x| !x.is_finite()) {
                        return Err(DataError::Invariant(format!(
                            "{} sample {i} modality {m}: non-finite feature",
                            s.name()
                        )));
                    }
                }
                if !(LABEL_RANGE.0..=LABEL_RANGE.1).contains(&b.label) {
                    return Err(DataError::Invariant(format!(
                        "{} sample {i}: label {} outside [-3, 3]",
                        s.name(),
                        b.label
                    )));
                }
            }
        }
        Ok(())
    }
}
