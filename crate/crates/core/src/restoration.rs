//! Filling a missing modality by DDIM sampling from the matching direction model.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Availability, Modality, SamplePair};
use crate::dit::GatedDit;
use crate::error::{Error, Result};
use crate::schedule::{ddim_with, estimate_with, DdimPlan, NoiseSchedule};
use crate::training::TrainState;

/// Which model runs. I2T restores text from the image; T2I restores the image from text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    I2T,
    T2I,
}

impl Direction {
    pub fn restores(self) -> Modality {
        match self {
            Direction::I2T => Modality::Text,
            Direction::T2I => Modality::Image,
        }
    }

    pub fn condition(self) -> Modality {
        self.restores().other()
    }

    /// The direction that fills a sample of the given availability, if any.
    pub fn route(a: Availability) -> Result<Option<Direction>> {
        match a {
            Availability::Complete => Ok(None),
            Availability::TextOnly => Ok(Some(Direction::T2I)),
            Availability::ImageOnly => Ok(Some(Direction::I2T)),
            Availability::Empty => Err(Error::Unsupported(
                "sample has neither modality; nothing to condition on".into(),
            )),
        }
    }
}

/// Batched noise prediction used by the sampler.
pub trait NoisePredictor {
    fn feature_dim(&self) -> usize;
    fn predict(&self, x_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl NoisePredictor for GatedDit {
    fn feature_dim(&self) -> usize {
        self.config().d_feature
    }

    fn predict(&self, x_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.predict_batch(x_t, t, cond, None)
    }
}

/// Which intermediate state to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Snapshot {
    /// `x_t` as it enters the plan step at `t`.
    Step(usize),
    /// The returned clean estimate.
    Final,
}

/// Draws `x_T` rows from `rng`.
pub fn initial_noise<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng))
}

/// Runs the plan on every row; `capture` receives `(snapshot, state)` pairs.
fn sample_rows<P: NoisePredictor>(
    model: &P,
    cond: ArrayView2<f64>,
    x_start: Array2<f64>,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
    mut capture: impl FnMut(Snapshot, &Array2<f64>),
) -> Result<Array2<f64>> {
    plan.validate(sched)?;
    if x_start.dim() != (cond.nrows(), model.feature_dim()) {
        return Err(Error::Shape(format!(
            "initial noise {:?} does not match {} rows of width {}",
            x_start.dim(),
            cond.nrows(),
            model.feature_dim()
        )));
    }
    let mut x = x_start;
    let rows = x.nrows();
    for (t, t_prev) in plan.transitions() {
        capture(Snapshot::Step(t), &x);
        let eps = model.predict(x.view(), &vec![t; rows], cond)?;
        let (a, b) = sched.inversion_coefficients(t);
        let ab_prev = sched.alpha_bar_at(t_prev);
        let mut next = Array2::zeros(x.dim());
        for i in 0..rows {
            let x0 = estimate_with(x.row(i), eps.row(i), a, b);
            next.row_mut(i).assign(&ddim_with(x0.view(), eps.row(i), ab_prev));
        }
        x = next;
    }
    capture(Snapshot::Final, &x);
    Ok(x)
}

/// Restores a batch of features from normalized conditions, one `x_T` row each.
pub fn restore_batch<P: NoisePredictor>(
    model: &P,
    cond: ArrayView2<f64>,
    x_start: Array2<f64>,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sample_rows(model, cond, x_start, plan, sched, |_, _| {})
}

/// Restores one feature, drawing `x_T ~ N(0, I)` from `rng`.
pub fn restore_feature<P: NoisePredictor, R: Rng + ?Sized>(
    available: ArrayView1<f64>,
    model: &P,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let x = initial_noise(1, model.feature_dim(), rng);
    let cond = available.insert_axis(Axis(0));
    Ok(restore_batch(model, cond, x, plan, sched)?.row(0).to_owned())
}

/// Snapshots of one restoration at the requested points, in sampling order.
pub fn record_trajectory<P: NoisePredictor, R: Rng + ?Sized>(
    available: ArrayView1<f64>,
    model: &P,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
    rng: &mut R,
    capture_at: &[Snapshot],
) -> Result<Vec<(Snapshot, Array1<f64>)>> {
    for s in capture_at {
        if let Snapshot::Step(t) = s {
            if !plan.steps().contains(t) {
                return Err(Error::Plan(format!("timestep {t} is not in the plan")));
            }
        }
    }
    let x = initial_noise(1, model.feature_dim(), rng);
    let cond = available.insert_axis(Axis(0));
    let mut out = Vec::new();
    sample_rows(model, cond, x, plan, sched, |s, x| {
        if capture_at.contains(&s) {
            out.push((s, x.row(0).to_owned()));
        }
    })?;
    Ok(out)
}

/// Stable per-sample seed from the global seed and the sample id (FNV-1a).
pub fn sample_seed(global: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in global.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn sample_noise(global: u64, id: &str, d: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global, id));
    initial_noise(1, d, &mut rng).row(0).to_owned()
}

/// Fills the missing side of one sample in raw feature space.
/// Complete samples come back unchanged without a model call.
pub fn complete_sample(pair: &SamplePair, state: &TrainState, plan: &DdimPlan, seed: u64) -> Result<SamplePair> {
    if Direction::route(pair.availability())?.is_none() {
        return Ok(pair.clone());
    }
    let (done, _) = complete_dataset(std::slice::from_ref(pair), state, plan, seed, 1)?;
    Ok(done.into_iter().next().unwrap())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreCounts {
    pub restored_image: usize,
    pub restored_text: usize,
    pub passed_through: usize,
}

/// Completes every incomplete sample, batching per direction in chunks of
/// `batch` rows. Each sample's `x_T` comes from its own seed, so results do
/// not depend on which other samples are present.
pub fn complete_dataset(
    samples: &[SamplePair],
    state: &TrainState,
    plan: &DdimPlan,
    seed: u64,
    batch: usize,
) -> Result<(Vec<SamplePair>, RestoreCounts)> {
    let mut out = samples.to_vec();
    let mut counts = RestoreCounts::default();
    let mut todo: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        match Direction::route(s.availability()).map_err(|e| match e {
            Error::Unsupported(m) => Error::Unsupported(format!("sample {}: {m}", s.id)),
            e => e,
        })? {
            None => counts.passed_through += 1,
            Some(Direction::I2T) => todo[0].push(i),
            Some(Direction::T2I) => todo[1].push(i),
        }
    }
    for (dir, idx) in [Direction::I2T, Direction::T2I].into_iter().zip(todo) {
        if idx.is_empty() {
            continue;
        }
        let model = state.model(dir.restores());
        let cm = dir.condition();
        let cond_norm = state.norm(cm);
        let target_norm = state.norm(dir.restores());
        for chunk in idx.chunks(batch.max(1)) {
            let mut cond = Array2::zeros((chunk.len(), cond_norm.dim()));
            let mut x = Array2::zeros((chunk.len(), model.config().d_feature));
            for (k, &i) in chunk.iter().enumerate() {
                let s = &samples[i];
                let f = s.feature(cm).expect("routed on availability");
                if f.len() != cond_norm.dim() {
                    return Err(Error::Dimension {
                        what: format!("{cm:?} feature of {}", s.id),
                        expected: cond_norm.dim(),
                        found: f.len(),
                    });
                }
                cond.row_mut(k).assign(&cond_norm.normalize(f.view()));
                x.row_mut(k).assign(&sample_noise(seed, &s.id, model.config().d_feature));
            }
            let restored = restore_batch(model, cond.view(), x, plan, &state.schedule)?;
            for (k, &i) in chunk.iter().enumerate() {
                let s = &mut out[i];
                *s.feature_mut(dir.restores()) = Some(target_norm.denormalize(restored.row(k)));
                s.set_restored(dir.restores(), true);
            }
            match dir {
                Direction::I2T => counts.restored_text += chunk.len(),
                Direction::T2I => counts.restored_image += chunk.len(),
            }
        }
    }
    Ok((out, counts))
}

/// Projects `points` onto the top `k` principal axes of `reference` (rows are
/// observations; centred on the reference mean).
pub fn pca_project(reference: ArrayView2<f64>, points: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
    let (n, d) = reference.dim();
    if n < 2 || k == 0 || k > d.min(n) {
        return Err(Error::Shape(format!("cannot take {k} components from {n}x{d} reference")));
    }
    if points.ncols() != d {
        return Err(Error::Dimension {
            what: "projected points".into(),
            expected: d,
            found: points.ncols(),
        });
    }
    let mean = reference.mean_axis(Axis(0)).unwrap();
    let centred = DMatrix::from_fn(n, d, |i, j| reference[[i, j]] - mean[j]);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = Array2::zeros((points.nrows(), k));
    for (c, &axis) in order.iter().take(k).enumerate() {
        let dir = v_t.row(axis);
        // Fix the sign so the largest loading is positive.
        let flip = dir.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m }) < 0.0;
        for (r, p) in points.rows().into_iter().enumerate() {
            let dot: f64 = p.iter().zip(&mean).zip(dir.iter()).map(|((x, m), v)| (x - m) * v).sum();
            out[[r, c]] = if flip { -dot } else { dot };
        }
    }
    Ok(out)
}
