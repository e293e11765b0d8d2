//! Statistics of the channel gates a model emits on a probe batch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::dit::{GateTrace, GatedDit, Gating};
use crate::error::{Error, Result};
use crate::restoration::initial_noise;
use crate::training::{TrainData, TrainState};

pub const HISTOGRAM_BINS: usize = 10;
/// Upper edge of the "mostly closed" range.
pub const LOW_GATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGates {
    pub block: usize,
    pub attn_channel_mean: Vec<f64>,
    pub mlp_channel_mean: Vec<f64>,
    pub attn_mean: f64,
    pub mlp_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub blocks: Vec<BlockGates>,
    /// Counts over ten equal bins of [0, 1].
    pub histogram: Vec<usize>,
    pub total: usize,
    /// Share of activations in [0, 0.2].
    pub fraction_low: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Runs one forward pass and summarizes every self-attention and FFN gate.
pub fn gate_statistics(model: &GatedDit, x_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<GateStats> {
    if model.config().gating != Gating::Full {
        return Err(Error::Unsupported(format!(
            "gate statistics need a gated model, found {}",
            model.config().gating.as_str()
        )));
    }
    if t.is_empty() {
        return Err(Error::Contract("gate statistics need a non-empty probe batch".into()));
    }
    let mut trace = GateTrace::default();
    model.predict_batch(x_t, t, cond, Some(&mut trace))?;
    Ok(summarize(&trace))
}

fn summarize(trace: &GateTrace) -> GateStats {
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let (mut total, mut low, mut sum) = (0usize, 0usize, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut record = |z: &Array2<f64>| {
        for &v in z {
            let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
            total += 1;
            sum += v;
            if v <= LOW_GATE {
                low += 1;
            }
            min = min.min(v);
            max = max.max(v);
        }
    };
    let channel_mean = |z: &Array2<f64>| z.mean_axis(Axis(0)).expect("non-empty batch").to_vec();
    let mut blocks = Vec::with_capacity(trace.attn.len());
    for (i, (a, m)) in trace.attn.iter().zip(&trace.mlp).enumerate() {
        record(a);
        record(m);
        blocks.push(BlockGates {
            block: i,
            attn_channel_mean: channel_mean(a),
            mlp_channel_mean: channel_mean(m),
            attn_mean: a.mean().unwrap_or(0.0),
            mlp_mean: m.mean().unwrap_or(0.0),
        });
    }
    let n = total.max(1) as f64;
    GateStats {
        blocks,
        histogram,
        total,
        fraction_low: low as f64 / n,
        mean: sum / n,
        min,
        max,
    }
}

/// Noisy inputs for a gate probe: `n` pairs from `data` (cycled), each at a
/// uniformly drawn timestep, for the model that restores `restores`.
pub fn probe_batch(
    state: &TrainState,
    restores: Modality,
    data: &TrainData,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>, Array2<f64>)> {
    if data.is_empty() || n == 0 {
        return Err(Error::Contract("gate probe needs data and a positive batch size".into()));
    }
    let (target, cond) = match restores {
        Modality::Text => (&data.text, &data.image),
        Modality::Image => (&data.image, &data.text),
    };
    let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let x0 = target.select(Axis(0), &idx);
    let cond = cond.select(Axis(0), &idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = state.schedule.steps();
    let t: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..steps)).collect();
    let eps = initial_noise(n, x0.ncols(), &mut rng);
    let mut x_t = Array2::zeros(x0.dim());
    for i in 0..n {
        let row = state.schedule.forward_diffuse(x0.row(i), eps.row(i), t[i])?;
        x_t.row_mut(i).assign(&row);
    }
    Ok((x_t, t, cond))
}
