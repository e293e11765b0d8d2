//! Synthetic paired manifolds standing in for frozen-encoder embeddings.
//!
//! Text features come from a Gaussian mixture whose component is the class
//! label. Image features are a fixed function of the text feature: a random
//! orthogonal rotation, an elementwise `s * tanh(u / s)` squash, a per-class
//! offset, then isotropic noise.

use nalgebra::DMatrix;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, SamplePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coupling {
    /// Rotate text features by a random orthogonal matrix.
    pub orthogonal: bool,
    /// Scale `s` of the `s * tanh(u / s)` squash; `None` skips it.
    pub tanh_scale: Option<f64>,
    /// Std of the per-class image offset.
    pub offset_scale: f64,
    pub noise_std: f64,
}

impl Coupling {
    pub fn identity() -> Self {
        Self {
            orthogonal: false,
            tanh_scale: None,
            offset_scale: 0.0,
            noise_std: 0.0,
        }
    }
}

impl Default for Coupling {
    fn default() -> Self {
        Self {
            orthogonal: true,
            tanh_scale: Some(1.5),
            offset_scale: 0.5,
            noise_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub d_feature: usize,
    pub n_samples: usize,
    /// Std of the cluster centres, per dimension.
    pub center_std: f64,
    /// Within-cluster std of text features, per dimension.
    pub cluster_std: f64,
    pub coupling: Coupling,
    /// Fraction of samples in the train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            d_feature: 64,
            n_samples: 2500,
            center_std: 1.0,
            cluster_std: 0.6,
            coupling: Coupling::default(),
            train_fraction: 0.8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: EmbeddingSet,
    pub test: EmbeddingSet,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the draw is Haar-distributed and deterministic.
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_clusters < 2 {
        return Err(Error::Config("synthetic data needs at least 2 clusters".into()));
    }
    if spec.d_feature == 0 || spec.n_samples < 2 {
        return Err(Error::Config("synthetic data needs d_feature >= 1 and n_samples >= 2".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
    }
    if spec.coupling.tanh_scale.is_some_and(|s| s <= 0.0) {
        return Err(Error::Config("tanh_scale must be positive".into()));
    }
    let d = spec.d_feature;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Array1<f64>> = (0..spec.n_clusters)
        .map(|_| normal_vec(&mut rng, d, spec.center_std))
        .collect();
    let offsets: Vec<Array1<f64>> = (0..spec.n_clusters)
        .map(|_| normal_vec(&mut rng, d, spec.coupling.offset_scale))
        .collect();
    let rotation = spec.coupling.orthogonal.then(|| random_orthogonal(&mut rng, d));

    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_clusters).collect();
    labels.shuffle(&mut rng);

    let samples: Vec<SamplePair> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let text = &centers[label] + &normal_vec(&mut rng, d, spec.cluster_std);
            let mut image = match &rotation {
                Some(q) => {
                    let v = q * nalgebra::DVector::from_column_slice(text.as_slice().unwrap());
                    Array1::from(v.as_slice().to_vec())
                }
                None => text.clone(),
            };
            if let Some(s) = spec.coupling.tanh_scale {
                image.mapv_inplace(|u| s * (u / s).tanh());
            }
            if spec.coupling.offset_scale != 0.0 {
                image += &offsets[label];
            }
            if spec.coupling.noise_std != 0.0 {
                image += &normal_vec(&mut rng, d, spec.coupling.noise_std);
            }
            SamplePair::complete(format!("syn-{i:06}"), image, text, label)
        })
        .collect();

    let n_train = (spec.n_samples as f64 * spec.train_fraction).round() as usize;
    let mut train = samples;
    let test = train.split_off(n_train);
    let set = |samples| EmbeddingSet {
        d_image: d,
        d_text: d,
        samples,
    };
    Ok(SyntheticData {
        train: set(train),
        test: set(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_coupling_copies_text() {
        let spec = SyntheticSpec {
            n_samples: 50,
            d_feature: 8,
            coupling: Coupling::identity(),
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for s in data.train.samples.iter().chain(&data.test.samples) {
            assert_eq!(s.image, s.text);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec {
            n_samples: 100,
            d_feature: 16,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn split_is_eighty_twenty() {
        let data = generate_synthetic(&SyntheticSpec {
            n_samples: 2500,
            d_feature: 8,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(data.train.len(), 2000);
        assert_eq!(data.test.len(), 500);
        assert!(data.train.samples.iter().all(|s| s.is_complete() && s.label < 5));
    }

    #[test]
    fn degenerate_specs_fail() {
        let one = SyntheticSpec {
            n_clusters: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&one).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthogonal(&mut rng, 12);
        let eye = q.transpose() * &q;
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    // nearest class mean is a linear classifier: argmax_k mu_k.x - |mu_k|^2 / 2
    #[test]
    fn image_features_are_linearly_separable() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let k = 5;
        let mut means = vec![Array1::<f64>::zeros(64); k];
        let mut counts = vec![0.0; k];
        for s in &data.train.samples {
            means[s.label] += s.image.as_ref().unwrap();
            counts[s.label] += 1.0;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            *m /= *c;
        }
        let correct = data
            .test
            .samples
            .iter()
            .filter(|s| {
                let x = s.image.as_ref().unwrap();
                let score = |m: &Array1<f64>| m.dot(x) - 0.5 * m.dot(m);
                let best = (0..k).max_by(|&a, &b| score(&means[a]).total_cmp(&score(&means[b]))).unwrap();
                best == s.label
            })
            .count();
        let acc = correct as f64 / data.test.len() as f64;
        assert!(acc > 0.95, "linear probe accuracy {acc}");
    }
}
