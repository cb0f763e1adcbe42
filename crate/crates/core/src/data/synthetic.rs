use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{DataError, Dataset, ModalityBundle, ModalityFeatures, Provenance, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub lens: [usize; 3],
    pub dims: [usize; 3],
    /// Fraction of the signal direction shared across modalities.
    pub redundancy: f64,
    /// Standard deviation of the per-element Gaussian noise.
    pub noise: f64,
    /// Train and validation fractions; the test split takes the rest.
    pub split: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 512,
            lens: [8, 8, 8],
            dims: [16, 12, 8],
            redundancy: 0.5,
            noise: 0.3,
            split: (0.7, 0.1),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        if self.lens.iter().any(|&t| t == 0) {
            return bad(format!("sequence lengths must be positive, got {:?}", self.lens));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("feature dims must be at least 2, got {:?}", self.dims));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return bad(format!("redundancy {} outside [0, 1]", self.redundancy));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        let (tr, va) = self.split;
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split fractions ({tr}, {va}) invalid"));
        }
        Ok(())
    }

    /// Split sizes (train, valid, test).
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples as f64;
        let tr = (n * self.split.0).round() as usize;
        let va = ((n * self.split.1).round() as usize).min(self.samples - tr);
        (tr, va, self.samples - tr - va)
    }
}

/// Unit signal directions planted in each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedDirections {
    /// Shared unit vector over the first `min(dims)` coordinates.
    pub shared: Vec<f64>,
    /// Per-modality unit direction `sqrt(rho) s + sqrt(1 - rho) p_m`.
    pub directions: [Vec<f64>; 3],
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn plant<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> PlantedDirections {
    let common = *spec.dims.iter().min().unwrap();
    let mut shared = gaussian_vec(rng, common);
    normalize(&mut shared);
    let (a, b) = (spec.redundancy.sqrt(), (1.0 - spec.redundancy).sqrt());
    let directions = spec.dims.map(|d| {
        // private part: Gaussian vector orthogonalized against the embedded shared one
        let mut p = gaussian_vec(rng, d);
        let proj: f64 = shared.iter().zip(&p).map(|(s, x)| s * x).sum();
        for (x, s) in p.iter_mut().zip(&shared) {
            *x -= proj * s;
        }
        normalize(&mut p);
        let mut dir: Vec<f64> = p.iter().map(|x| b * x).collect();
        for (x, s) in dir.iter_mut().zip(&shared) {
            *x += a * s;
        }
        dir
    });
    PlantedDirections { shared, directions }
}

/// Pairwise cosines of the planted directions restricted to the common
/// coordinates, in the order (t,v), (t,a), (v,a).
pub fn planted_cosines(p: &PlantedDirections) -> [f64; 3] {
    let k = p.shared.len();
    let cos = |i: usize, j: usize| {
        let (x, y) = (&p.directions[i][..k], &p.directions[j][..k]);
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nx * ny).max(1e-300)
    };
    [cos(0, 1), cos(0, 2), cos(1, 2)]
}

/// Draws a dataset whose label `y ~ U[-3, 3]` is embedded in every token of
/// every modality as `y * dir_m + noise`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, PlantedDirections)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = plant(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let y: f64 = rng.random_range(-3.0..=3.0);
        let modalities = [0, 1, 2].map(|m| {
            let (len, dim) = (spec.lens[m], spec.dims[m]);
            let dir = &planted.directions[m];
            let mut data = Vec::with_capacity(len * dim);
            for _ in 0..len {
                for d in dir {
                    data.push(y * d + noise.sample(&mut rng));
                }
            }
            ModalityFeatures::new(len, dim, data).expect("validated shape")
        });
        samples.push(ModalityBundle { modalities, label: y });
    }
    let (tr, va, _) = spec.split_sizes();
    let test = samples.split_off(tr + va);
    let valid = samples.split_off(tr);
    let dataset = Dataset {
        lens: spec.lens,
        dims: spec.dims,
        train: samples,
        valid,
        test,
        provenance: Provenance::Synthetic,
    };
    Ok((dataset, planted))
}
