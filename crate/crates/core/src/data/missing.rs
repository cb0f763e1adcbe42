use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Modality, ModalityBundle, ModalitySet, Result};

/// Per-modality missing rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateSpec {
    Fixed(f64),
    /// Drawn from `U[0, 1]` independently per sample and modality.
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MissingMode {
    /// Token-level masking within each modality.
    Intra { rates: [RateSpec; 3] },
    /// Whole-modality removal; only `available` modalities survive.
    Inter { available: ModalitySet },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MissingSpec {
    pub mode: MissingMode,
    pub seed: u64,
    /// Replacement row for masked text tokens; `None` means the zero vector.
    pub text_substitute: Option<Vec<f64>>,
}

impl MissingSpec {
    /// The same fixed rate for all three modalities.
    pub fn intra(rate: f64, seed: u64) -> Self {
        Self {
            mode: MissingMode::Intra {
                rates: [RateSpec::Fixed(rate); 3],
            },
            seed,
            text_substitute: None,
        }
    }

    /// Training-time augmentation: every modality drops a uniformly random
    /// fraction of its tokens.
    pub fn intra_random(seed: u64) -> Self {
        Self {
            mode: MissingMode::Intra {
                rates: [RateSpec::UniformRandom; 3],
            },
            seed,
            text_substitute: None,
        }
    }

    pub fn inter(available: ModalitySet, seed: u64) -> Self {
        Self {
            mode: MissingMode::Inter { available },
            seed,
            text_substitute: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            MissingMode::Intra { rates } => {
                for r in rates {
                    if let RateSpec::Fixed(x) = r {
                        if !(0.0..=1.0).contains(x) {
                            return Err(DataError::InvalidSpec(format!("missing rate {x} outside [0, 1]")));
                        }
                    }
                }
            }
            MissingMode::Inter { available } => {
                if available.is_empty() {
                    return Err(DataError::InvalidSpec("inter-modal availability set is empty".into()));
                }
            }
        }
        Ok(())
    }
}

/// Number of masked tokens for rate `rate` over `len` tokens:
/// `rate * len` rounded half away from zero.
///
/// The product is first snapped to 1e-9 so decimal rates such as 0.7 round
/// as their exact value would (0.7 * 45 is 31.499999999999996 in binary).
pub fn masked_count(rate: f64, len: usize) -> usize {
    let x = rate * len as f64;
    let snapped = (x * 1e9).round() / 1e9;
    (snapped.round() as usize).min(len)
}

fn substitute_row(bundle: &mut ModalityBundle, m: Modality, t: usize, text_sub: Option<&[f64]>) {
    let f = &mut bundle.modalities[m.index()];
    let dim = f.dim;
    let row = &mut f.data[t * dim..(t + 1) * dim];
    match (m, text_sub) {
        (Modality::Text, Some(sub)) => row.copy_from_slice(sub),
        _ => row.fill(0.0),
    }
    f.present[t] = false;
}

fn corrupt_with<R: Rng>(bundle: &ModalityBundle, spec: &MissingSpec, rng: &mut R) -> Result<ModalityBundle> {
    spec.validate()?;
    if !bundle.is_pristine() {
        return Err(DataError::AlreadyCorrupted);
    }
    let text_sub = spec.text_substitute.as_deref();
    if let Some(sub) = text_sub {
        if sub.len() != bundle.get(Modality::Text).dim {
            return Err(DataError::InvalidSpec(format!(
                "text substitute has width {} but text features are {} wide",
                sub.len(),
                bundle.get(Modality::Text).dim
            )));
        }
    }
    let mut out = bundle.clone();
    match &spec.mode {
        MissingMode::Intra { rates } => {
            for m in Modality::ALL {
                let rate = match rates[m.index()] {
                    RateSpec::Fixed(r) => r,
                    RateSpec::UniformRandom => rng.random_range(0.0..=1.0),
                };
                let len = bundle.get(m).len;
                let n = masked_count(rate, len);
                for t in sample(rng, len, n) {
                    substitute_row(&mut out, m, t, text_sub);
                }
            }
        }
        MissingMode::Inter { available } => {
            for m in Modality::ALL {
                if !available.contains(m) {
                    for t in 0..bundle.get(m).len {
                        substitute_row(&mut out, m, t, text_sub);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Corrupts one pristine sample. Deterministic given `spec.seed`.
pub fn random_missing(bundle: &ModalityBundle, spec: &MissingSpec) -> Result<ModalityBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corrupt_with(bundle, spec, &mut rng)
}

/// Corrupts a whole split; sample `i` draws from ChaCha stream `i` of the
/// seed, so the result for one sample does not depend on the others.
pub fn corrupt_split(samples: &[ModalityBundle], spec: &MissingSpec) -> Result<Vec<ModalityBundle>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            corrupt_with(b, spec, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::ModalityFeatures;

    fn bundle(lens: [usize; 3], dims: [usize; 3]) -> ModalityBundle {
        let mk = |i: usize| {
            let n = lens[i] * dims[i];
            ModalityFeatures::new(lens[i], dims[i], (0..n).map(|k| 1.0 + k as f64 + i as f64 * 100.0).collect()).unwrap()
        };
        ModalityBundle {
            modalities: [mk(0), mk(1), mk(2)],
            label: 1.5,
        }
    }

    fn masked(b: &ModalityBundle, m: Modality) -> Vec<usize> {
        b.get(m)
            .present
            .iter()
            .enumerate()
            .filter(|(_, p)| !**p)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn half_rate_masks_two_of_four() {
        let b = bundle([4, 4, 4], [3, 2, 2]);
        let c = random_missing(&b, &MissingSpec::intra(0.5, 9)).unwrap();
        for m in Modality::ALL {
            assert_eq!(masked(&c, m).len(), 2);
            for t in masked(&c, m) {
                assert!(c.get(m).row(t).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let b = bundle([4, 5, 6], [3, 2, 2]);
        let c = random_missing(&b, &MissingSpec::intra(0.0, 1)).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn text_only_availability_zeroes_visual_and_audio() {
        let b = bundle([4, 5, 6], [3, 2, 2]);
        let c = random_missing(&b, &MissingSpec::inter(ModalitySet::new(&[Modality::Text]), 1)).unwrap();
        assert_eq!(c.get(Modality::Text), b.get(Modality::Text));
        for m in [Modality::Visual, Modality::Audio] {
            assert!(c.get(m).data.iter().all(|&x| x == 0.0));
            assert!(c.get(m).present.iter().all(|&p| !p));
        }
    }

    #[test]
    fn rate_point_nine_of_four_masks_all() {
        // 3.6 rounds to 4
        assert_eq!(masked_count(0.9, 4), 4);
        let b = bundle([4, 4, 4], [2, 2, 2]);
        let c = random_missing(&b, &MissingSpec::intra(0.9, 3)).unwrap();
        assert_eq!(masked(&c, Modality::Audio).len(), 4);
    }

    #[test]
    fn rounding_matches_exact_rational_rule_on_grid() {
        for k in 0..=10u64 {
            let rate = k as f64 * 0.1;
            for len in 1..=64usize {
                // half away from zero of k*len/10 in integer arithmetic
                let expected = ((k as usize * len) + 5) / 10;
                assert_eq!(masked_count(rate, len), expected, "rate {rate} len {len}");
                let also = masked_count(k as f64 / 10.0, len);
                assert_eq!(also, expected);
            }
        }
    }

    #[test]
    fn remasking_is_rejected() {
        let b = bundle([4, 4, 4], [2, 2, 2]);
        let c = random_missing(&b, &MissingSpec::intra(0.5, 3)).unwrap();
        assert!(matches!(
            random_missing(&c, &MissingSpec::intra(0.5, 4)),
            Err(DataError::AlreadyCorrupted)
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let b = bundle([4, 4, 4], [2, 2, 2]);
        assert!(random_missing(&b, &MissingSpec::intra(1.5, 0)).is_err());
        assert!(random_missing(&b, &MissingSpec::inter(ModalitySet::new(&[]), 0)).is_err());
    }

    #[test]
    fn text_substitute_vector_is_used() {
        let b = bundle([4, 4, 4], [3, 2, 2]);
        let mut spec = MissingSpec::intra(1.0, 0);
        spec.text_substitute = Some(vec![7.0, 8.0, 9.0]);
        let c = random_missing(&b, &spec).unwrap();
        for t in 0..4 {
            assert_eq!(c.get(Modality::Text).row(t), &[7.0, 8.0, 9.0]);
        }
        assert!(c.get(Modality::Visual).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn different_seeds_give_different_masks() {
        let b = bundle([8, 8, 8], [1, 1, 1]);
        let mut differ = 0;
        for s in 0..1000u64 {
            let x = random_missing(&b, &MissingSpec::intra(0.5, 2 * s)).unwrap();
            let y = random_missing(&b, &MissingSpec::intra(0.5, 2 * s + 1)).unwrap();
            let sets = |b: &ModalityBundle| Modality::ALL.map(|m| masked(b, m));
            if sets(&x) != sets(&y) {
                differ += 1;
            }
        }
        // the bundle's index sets coincide with probability (1/70)^3
        assert!(differ as f64 / 1000.0 >= 0.99, "{differ}");
    }

    proptest! {
        #[test]
        fn corruption_is_reproducible_and_preserves_label_and_lengths(
            seed in any::<u64>(),
            r in 0.0f64..=1.0,
            lens in proptest::array::uniform3(1usize..12),
        ) {
            let b = bundle(lens, [2, 3, 1]);
            let spec = MissingSpec::intra(r, seed);
            let x = random_missing(&b, &spec).unwrap();
            let y = random_missing(&b, &spec).unwrap();
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(x.label, b.label);
            for m in Modality::ALL {
                prop_assert_eq!(x.get(m).len, b.get(m).len);
                prop_assert_eq!(masked(&x, m).len(), masked_count(r, lens[m.index()]));
            }
        }
    }
}
