//! Paired image/text feature records and the tools that produce, mask,
//! normalize and store them.

mod femb;
mod missing;
mod norm;
mod synthetic;

pub use femb::{read_embeddings, write_embeddings, manifest_path, FEMB_VERSION};
pub use missing::{apply_missing_pattern, missing_counts, MissingMode};
pub use norm::{NormStats, STD_FLOOR};
pub use synthetic::{generate_synthetic, Coupling, SyntheticData, SyntheticSpec};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Complete,
    ImageOnly,
    TextOnly,
    /// Neither side present; only reachable through malformed input.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: Option<Array1<f64>>,
    pub text: Option<Array1<f64>>,
    pub label: usize,
    pub restored_image: bool,
    pub restored_text: bool,
}

impl SamplePair {
    pub fn complete(id: impl Into<String>, image: Array1<f64>, text: Array1<f64>, label: usize) -> Self {
        Self {
            id: id.into(),
            image: Some(image),
            text: Some(text),
            label,
            restored_image: false,
            restored_text: false,
        }
    }

    pub fn availability(&self) -> Availability {
        match (&self.image, &self.text) {
            (Some(_), Some(_)) => Availability::Complete,
            (Some(_), None) => Availability::ImageOnly,
            (None, Some(_)) => Availability::TextOnly,
            (None, None) => Availability::Empty,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.availability() == Availability::Complete
    }

    pub fn feature(&self, m: Modality) -> Option<&Array1<f64>> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    pub fn feature_mut(&mut self, m: Modality) -> &mut Option<Array1<f64>> {
        match m {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn is_restored(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.restored_image,
            Modality::Text => self.restored_text,
        }
    }

    pub fn set_restored(&mut self, m: Modality, flag: bool) {
        match m {
            Modality::Image => self.restored_image = flag,
            Modality::Text => self.restored_text = flag,
        }
    }
}

/// A set of samples with fixed per-modality dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub d_image: usize,
    pub d_text: usize,
    pub samples: Vec<SamplePair>,
}

impl EmbeddingSet {
    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.d_image,
            Modality::Text => self.d_text,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn complete_only(&self) -> Vec<&SamplePair> {
        self.samples.iter().filter(|s| s.is_complete()).collect()
    }
}

/// Stacks one modality of the given samples into rows; all must have it.
pub fn stack_modality(samples: &[&SamplePair], m: Modality, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((samples.len(), dim));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        row.assign(s.feature(m).expect("modality present"));
    }
    out
}
