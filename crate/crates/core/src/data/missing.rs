use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, SamplePair};
use crate::error::{Error, Result};

/// Which modality the incomplete samples lack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// Incomplete samples keep only their text.
    MissingImage,
    /// Incomplete samples keep only their image.
    MissingText,
    /// Incomplete samples split evenly between image-only and text-only.
    MissingBoth,
}

impl MissingMode {
    pub const ALL: [MissingMode; 3] = [
        MissingMode::MissingImage,
        MissingMode::MissingText,
        MissingMode::MissingBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MissingMode::MissingImage => "missing_image",
            MissingMode::MissingText => "missing_text",
            MissingMode::MissingBoth => "missing_both",
        }
    }
}

/// `(image_only, text_only)` counts for `n` samples at rate `eta` percent.
///
/// Single-modality modes take `floor(eta% * n)`; the mixed mode takes
/// `floor(eta/2 % * n)` of each kind. The rest stay complete.
pub fn missing_counts(n: usize, eta: f64, mode: MissingMode) -> (usize, usize) {
    let floor_pct = |pct: f64| -> usize { ((pct * n as f64) / 100.0 + 1e-9).floor() as usize };
    match mode {
        MissingMode::MissingImage => (0, floor_pct(eta)),
        MissingMode::MissingText => (floor_pct(eta), 0),
        MissingMode::MissingBoth => {
            let half = floor_pct(eta / 2.0);
            (half, half)
        }
    }
}

/// Drops modalities from a seeded selection of samples.
///
/// Inputs should be complete; samples that are already incomplete keep
/// whatever they have and are still counted as selected.
pub fn apply_missing_pattern(
    samples: &[SamplePair],
    eta: f64,
    mode: MissingMode,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    if !(0.0..=100.0).contains(&eta) {
        return Err(Error::Config(format!("missing rate {eta} outside [0, 100]")));
    }
    let (image_only, text_only) = missing_counts(samples.len(), eta, mode);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = samples.to_vec();
    for &i in &order[..image_only] {
        *out[i].feature_mut(Modality::Text) = None;
    }
    for &i in &order[image_only..image_only + text_only] {
        *out[i].feature_mut(Modality::Image) = None;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Availability;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn complete(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| SamplePair::complete(format!("s{i}"), Array1::from_elem(2, i as f64), Array1::from_elem(3, -(i as f64)), i % 3))
            .collect()
    }

    fn tally(s: &[SamplePair]) -> (usize, usize, usize) {
        let count = |a| s.iter().filter(|p| p.availability() == a).count();
        (
            count(Availability::Complete),
            count(Availability::ImageOnly),
            count(Availability::TextOnly),
        )
    }

    #[test]
    fn both_mode_at_seventy() {
        let out = apply_missing_pattern(&complete(1000), 70.0, MissingMode::MissingBoth, 3).unwrap();
        assert_eq!(tally(&out), (300, 350, 350));
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let data = complete(50);
        let out = apply_missing_pattern(&data, 0.0, MissingMode::MissingBoth, 3).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn floor_count_for_small_sets() {
        let out = apply_missing_pattern(&complete(10), 70.0, MissingMode::MissingText, 1).unwrap();
        assert_eq!(tally(&out), (3, 7, 0));
        assert_eq!(missing_counts(10, 33.0, MissingMode::MissingImage), (0, 3));
        assert_eq!(missing_counts(10, 30.0, MissingMode::MissingBoth), (1, 1));
    }

    #[test]
    fn rejects_out_of_range_rates() {
        assert!(apply_missing_pattern(&complete(4), 101.0, MissingMode::MissingBoth, 0).is_err());
        assert!(apply_missing_pattern(&complete(4), -1.0, MissingMode::MissingBoth, 0).is_err());
    }

    #[test]
    fn observed_features_are_untouched() {
        let data = complete(40);
        let out = apply_missing_pattern(&data, 90.0, MissingMode::MissingBoth, 5).unwrap();
        for (a, b) in data.iter().zip(&out) {
            if let Some(img) = &b.image {
                assert_eq!(Some(img), a.image.as_ref());
            }
            if let Some(txt) = &b.text {
                assert_eq!(Some(txt), a.text.as_ref());
            }
        }
    }

    proptest! {
        #[test]
        fn counts_partition_and_repeat(n in 0usize..300, eta in 0.0f64..=100.0, seed in any::<u64>(), m in 0usize..3) {
            let mode = MissingMode::ALL[m];
            let data = complete(n);
            let a = apply_missing_pattern(&data, eta, mode, seed).unwrap();
            let b = apply_missing_pattern(&data, eta, mode, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let (c, io, to) = tally(&a);
            prop_assert_eq!(c + io + to, n);
            prop_assert_eq!((io, to), missing_counts(n, eta, mode));
        }
    }
}
