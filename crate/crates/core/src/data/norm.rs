use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{Modality, SamplePair};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-score statistics (population std, floored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(samples: &[SamplePair], modality: Modality) -> Result<Self> {
        let rows: Vec<&Array1<f64>> = samples.iter().filter_map(|s| s.feature(modality)).collect();
        if rows.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 samples with {modality:?} features, found {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension {
                what: format!("{modality:?} feature"),
                expected: d,
                found: bad.len(),
            });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((acc, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let mut floored = 0;
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < STD_FLOOR {
                    floored += 1;
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        if floored > 0 {
            log::warn!("{floored} {modality:?} dimension(s) have near-zero variance; std floored at {STD_FLOOR}");
        }
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s),
        )
    }

    pub fn denormalize(&self, z: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            z.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| v * s + m),
        )
    }
}
