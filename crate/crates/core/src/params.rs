//! Named parameter tensors and initializers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{Graph, ParamKey, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

/// How a tensor starts out.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Array2<f64>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        init: Init,
        rng: &mut R,
    ) -> usize {
        let t = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::TruncNormal(std) => Array2::from_shape_simple_fn(shape, || trunc_normal(rng, std)),
        };
        self.push(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Array2<f64> {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Registers every tensor on the graph under parameter set `set`.
    pub fn bind(&self, g: &mut Graph, set: usize) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(index, t)| g.param(ParamKey { set, index }, t))
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Gradients for every tensor of a bound set; unreached tensors get zeros.
pub fn collect_grads(
    g: &crate::tape::Gradients,
    vars: &[Var],
    params: &ParamSet,
) -> Vec<Array2<f64>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(v, t)| g.get(*v).cloned().unwrap_or_else(|| Array2::zeros(t.dim())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            assert!(trunc_normal(&mut rng, 0.02).abs() <= 0.04);
        }
    }

    #[test]
    fn count_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.init("a", (3, 4), Init::Zeros, &mut rng);
        p.init("b", (1, 4), Init::Ones, &mut rng);
        assert_eq!(p.count(), 16);
        assert_eq!(p.index_of("b"), Some(1));
        assert!(p.get(1).iter().all(|v| *v == 1.0));
    }
}
