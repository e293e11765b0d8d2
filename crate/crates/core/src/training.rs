//! Joint training of the two restoration directions.
//!
//! The I2T model restores text features conditioned on the image feature; the
//! T2I model restores image features conditioned on text. Each step draws one
//! timestep per pair, shared by both directions and by the base and mutual
//! terms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSet, Modality, NormStats, SamplePair};
use crate::dit::{GatedDit, Gating, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, Moments};
use crate::params::{collect_grads, ParamSet};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::tape::{Graph, Var};

/// A noise predictor that can be placed on a [`Graph`].
pub trait Denoiser {
    fn feature_dim(&self) -> usize;
    fn condition_dim(&self) -> usize;
    fn param_set(&self) -> &ParamSet;
    /// `x_t` is `(batch, feature_dim)`, `cond` is `(batch, condition_dim)`.
    fn denoise(&self, g: &mut Graph, p: &[Var], x_t: Var, t: &[usize], cond: Var) -> Var;
}

impl Denoiser for GatedDit {
    fn feature_dim(&self) -> usize {
        self.config().d_feature
    }

    fn condition_dim(&self) -> usize {
        self.config().d_condition()
    }

    fn param_set(&self) -> &ParamSet {
        self.params()
    }

    fn denoise(&self, g: &mut Graph, p: &[Var], x_t: Var, t: &[usize], cond: Var) -> Var {
        let cfg = self.config();
        let tokens = g.reshape(cond, t.len() * cfg.n_cond_tokens, cfg.d_cond);
        self.forward(g, p, x_t, t, tokens, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Architecture shared by both directions; feature widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub ffn_mult: usize,
    /// Hidden width of the gate MLP; defaults to `d_model`.
    pub gate_hidden: Option<usize>,
    pub cond_pos_embed: bool,
    pub gating: Gating,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            depth: 2,
            n_heads: 4,
            n_tokens: 4,
            ffn_mult: 4,
            gate_hidden: None,
            cond_pos_embed: true,
            gating: Gating::Full,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, d_feature: usize, d_condition: usize) -> Result<ModelConfig> {
        if self.n_tokens == 0 || d_condition % self.n_tokens != 0 {
            return Err(Error::Config(format!(
                "condition width {d_condition} not divisible by n_tokens {}",
                self.n_tokens
            )));
        }
        let cfg = ModelConfig {
            d_feature,
            d_cond: d_condition / self.n_tokens,
            n_cond_tokens: self.n_tokens,
            d_model: self.d_model,
            depth: self.depth,
            n_heads: self.n_heads,
            n_tokens: self.n_tokens,
            gate_hidden: self.gate_hidden.unwrap_or(self.d_model),
            ffn_mult: self.ffn_mult,
            cond_pos_embed: self.cond_pos_embed,
            gating: self.gating,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Mutual term applies to pairs whose sampled t is below this.
    pub tau: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub mutual_enabled: bool,
    /// Stop gradients at the clean estimates fed across directions.
    pub detach_x0: bool,
    pub schedule: ScheduleConfig,
    pub model: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 50,
            epochs: 40,
            lr: 1e-4,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: None,
            mutual_enabled: true,
            detach_x0: false,
            schedule: ScheduleConfig::default(),
            model: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > self.schedule.steps {
            return Err(Error::Config(format!(
                "tau {} exceeds T = {}",
                self.tau, self.schedule.steps
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            mutual: self.mutual_enabled,
            detach_x0: self.detach_x0,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: usize,
    pub mutual: bool,
    pub detach_x0: bool,
}

/// One batch of normalized pairs with the sampled timesteps and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub t: Vec<usize>,
    pub eps_image: Array2<f64>,
    pub eps_text: Array2<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Draws `t` uniformly over `[0, steps)` per pair, then image and text noise.
    pub fn sample<R: Rng + ?Sized>(image: ArrayView2<f64>, text: ArrayView2<f64>, steps: usize, rng: &mut R) -> Self {
        let b = image.nrows();
        let t = (0..b).map(|_| rng.random_range(0..steps)).collect();
        let mut noise = |d: usize| Array2::from_shape_simple_fn((b, d), || StandardNormal.sample(rng));
        let eps_image = noise(image.ncols());
        let eps_text = noise(text.ncols());
        Self {
            image: image.to_owned(),
            text: text.to_owned(),
            t,
            eps_image,
            eps_text,
        }
    }
}

/// Batch-mean loss terms. `mutual` is averaged over the whole batch with
/// zero contribution from pairs at `t >= tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub base_i2t: f64,
    pub base_t2i: f64,
    pub mutual: f64,
    pub total: f64,
    /// Pairs that took the mutual path.
    pub mutual_pairs: usize,
}

impl LossTerms {
    pub fn mean_base(&self) -> f64 {
        0.5 * (self.base_i2t + self.base_t2i)
    }

    fn is_finite(&self) -> bool {
        self.base_i2t.is_finite() && self.base_t2i.is_finite() && self.mutual.is_finite() && self.total.is_finite()
    }
}

struct Built {
    total: Var,
    base_i2t: Var,
    base_t2i: Var,
    mutual: Option<Var>,
    mutual_pairs: usize,
}

impl Built {
    fn terms(&self, g: &Graph) -> LossTerms {
        LossTerms {
            base_i2t: g.scalar(self.base_i2t),
            base_t2i: g.scalar(self.base_t2i),
            mutual: self.mutual.map_or(0.0, |m| g.scalar(m)),
            total: g.scalar(self.total),
            mutual_pairs: self.mutual_pairs,
        }
    }
}

fn check_dims<A: Denoiser, B: Denoiser>(i2t: &A, t2i: &B, batch: &PairBatch, sched: &NoiseSchedule) -> Result<()> {
    let n = batch.len();
    let dims = [
        ("image batch", batch.image.dim(), (n, t2i.feature_dim())),
        ("text batch", batch.text.dim(), (n, i2t.feature_dim())),
        ("image noise", batch.eps_image.dim(), (n, t2i.feature_dim())),
        ("text noise", batch.eps_text.dim(), (n, i2t.feature_dim())),
    ];
    for (what, found, expected) in dims {
        if found != expected {
            return Err(Error::Shape(format!("{what}: expected {expected:?}, found {found:?}")));
        }
    }
    if i2t.condition_dim() != t2i.feature_dim() || t2i.condition_dim() != i2t.feature_dim() {
        return Err(Error::Config("direction models do not mirror each other".into()));
    }
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if let Some(&t) = batch.t.iter().find(|&&t| t >= sched.steps()) {
        return Err(Error::Contract(format!("timestep {t} outside [0, {})", sched.steps())));
    }
    Ok(())
}

fn diffuse_rows(x0: &Array2<f64>, eps: &Array2<f64>, t: &[usize], sched: &NoiseSchedule) -> Array2<f64> {
    let mut out = Array2::zeros(x0.dim());
    for (i, &ti) in t.iter().enumerate() {
        let (a, b) = sched.mix_coefficients(ti);
        let row = crate::schedule::forward_with(x0.row(i), eps.row(i), a, b);
        out.row_mut(i).assign(&row);
    }
    out
}

/// `x0_hat = x_t / sqrt(ab) - sqrt(1/ab - 1) * eps_hat`, on the graph for the given rows.
fn clean_estimate(g: &mut Graph, x_t: &Array2<f64>, pred: Var, rows: &[usize], t: &[usize], sched: &NoiseSchedule, detach: bool) -> Var {
    let mut scaled = Array2::zeros((rows.len(), x_t.ncols()));
    let mut b = Vec::with_capacity(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        let (ai, bi) = sched.inversion_coefficients(t[r]);
        scaled.row_mut(k).assign(&x_t.row(r).mapv(|v| ai * v));
        b.push(bi);
    }
    let pred = g.gather_rows(pred, rows.to_vec());
    let scaled = g.input(scaled);
    let noise = g.scale_rows(pred, b);
    let est = g.sub(scaled, noise);
    if detach {
        let v = g.value(est).clone();
        g.input(v)
    } else {
        est
    }
}

#[allow(clippy::too_many_arguments)]
fn build<A: Denoiser, B: Denoiser>(
    g: &mut Graph,
    i2t: &A,
    pa: &[Var],
    t2i: &B,
    pb: &[Var],
    batch: &PairBatch,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<Built> {
    check_dims(i2t, t2i, batch, sched)?;
    let n = batch.len();
    let w = vec![1.0 / n as f64; n];
    let xt_img_v = diffuse_rows(&batch.image, &batch.eps_image, &batch.t, sched);
    let xt_txt_v = diffuse_rows(&batch.text, &batch.eps_text, &batch.t, sched);

    let xt_img = g.input(xt_img_v.clone());
    let xt_txt = g.input(xt_txt_v.clone());
    let img = g.input(batch.image.clone());
    let txt = g.input(batch.text.clone());
    let eps_img = g.input(batch.eps_image.clone());
    let eps_txt = g.input(batch.eps_text.clone());

    let pred_txt = i2t.denoise(g, pa, xt_txt, &batch.t, img);
    let pred_img = t2i.denoise(g, pb, xt_img, &batch.t, txt);
    let d = g.sq_diff_row_mean(pred_txt, eps_txt);
    let base_i2t = g.weighted_sum(d, w.clone());
    let d = g.sq_diff_row_mean(pred_img, eps_img);
    let base_t2i = g.weighted_sum(d, w.clone());
    let mut total = g.add(base_i2t, base_t2i);

    let rows: Vec<usize> = if opts.mutual {
        (0..n).filter(|&i| batch.t[i] < opts.tau).collect()
    } else {
        Vec::new()
    };
    let mut mutual = None;
    if !rows.is_empty() {
        let t_sub: Vec<usize> = rows.iter().map(|&r| batch.t[r]).collect();
        let x0_img = clean_estimate(g, &xt_img_v, pred_img, &rows, &batch.t, sched, opts.detach_x0);
        let x0_txt = clean_estimate(g, &xt_txt_v, pred_txt, &rows, &batch.t, sched, opts.detach_x0);
        let xt_txt_s = g.gather_rows(xt_txt, rows.clone());
        let xt_img_s = g.gather_rows(xt_img, rows.clone());
        let eps_txt_s = g.gather_rows(eps_txt, rows.clone());
        let eps_img_s = g.gather_rows(eps_img, rows.clone());
        let m_txt = i2t.denoise(g, pa, xt_txt_s, &t_sub, x0_img);
        let m_img = t2i.denoise(g, pb, xt_img_s, &t_sub, x0_txt);
        let ws = vec![1.0 / n as f64; rows.len()];
        let d = g.sq_diff_row_mean(m_txt, eps_txt_s);
        let a = g.weighted_sum(d, ws.clone());
        let d = g.sq_diff_row_mean(m_img, eps_img_s);
        let b = g.weighted_sum(d, ws);
        let m = g.add(a, b);
        total = g.add(total, m);
        mutual = Some(m);
    }
    Ok(Built {
        total,
        base_i2t,
        base_t2i,
        mutual,
        mutual_pairs: rows.len(),
    })
}

/// Loss terms of one batch without gradients.
pub fn loss_terms<A: Denoiser, B: Denoiser>(
    i2t: &A,
    t2i: &B,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<LossTerms> {
    let mut g = Graph::new();
    let pa = i2t.param_set().bind(&mut g, 0);
    let pb = t2i.param_set().bind(&mut g, 1);
    let built = build(&mut g, i2t, &pa, t2i, &pb, batch, sched, opts)?;
    Ok(built.terms(&g))
}

/// Loss terms plus gradients of the total with respect to both parameter sets.
pub fn loss_and_grads<A: Denoiser, B: Denoiser>(
    i2t: &A,
    t2i: &B,
    batch: &PairBatch,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<(LossTerms, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let pa = i2t.param_set().bind(&mut g, 0);
    let pb = t2i.param_set().bind(&mut g, 1);
    let built = build(&mut g, i2t, &pa, t2i, &pb, batch, sched, opts)?;
    let grads = g.backward(built.total);
    let ga = collect_grads(&grads, &pa, i2t.param_set());
    let gb = collect_grads(&grads, &pb, t2i.param_set());
    Ok((built.terms(&g), ga, gb))
}

fn row(v: ArrayView1<f64>) -> Array2<f64> {
    v.to_owned().insert_axis(Axis(0))
}

/// Mean squared error between `eps` and the model's prediction at `x_t`.
pub fn base_loss<M: Denoiser>(
    model: &M,
    x0: ArrayView1<f64>,
    cond: ArrayView1<f64>,
    t: usize,
    eps: ArrayView1<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if t >= sched.steps() {
        return Err(Error::Contract(format!("timestep {t} outside [0, {})", sched.steps())));
    }
    if x0.len() != model.feature_dim() || eps.len() != x0.len() || cond.len() != model.condition_dim() {
        return Err(Error::Shape("base_loss input widths do not match the model".into()));
    }
    let (a, b) = sched.mix_coefficients(t);
    let x_t = crate::schedule::forward_with(x0, eps, a, b);
    let mut g = Graph::new();
    let p = model.param_set().bind(&mut g, 0);
    let x = g.input(row(x_t.view()));
    let c = g.input(row(cond));
    let e = g.input(row(eps));
    let pred = model.denoise(&mut g, &p, x, &[t], c);
    let d = g.sq_diff_row_mean(pred, e);
    Ok(g.scalar(d))
}

fn single_batch(image: ArrayView1<f64>, text: ArrayView1<f64>, t: usize, eps_image: ArrayView1<f64>, eps_text: ArrayView1<f64>) -> PairBatch {
    PairBatch {
        image: row(image),
        text: row(text),
        t: vec![t],
        eps_image: row(eps_image),
        eps_text: row(eps_text),
    }
}

/// Bidirectional consistency term for one complete pair; requires `t < tau`.
#[allow(clippy::too_many_arguments)]
pub fn mutual_loss<A: Denoiser, B: Denoiser>(
    i2t: &A,
    t2i: &B,
    image: ArrayView1<f64>,
    text: ArrayView1<f64>,
    t: usize,
    eps_image: ArrayView1<f64>,
    eps_text: ArrayView1<f64>,
    sched: &NoiseSchedule,
    tau: usize,
) -> Result<f64> {
    if t >= tau {
        return Err(Error::Contract(format!("mutual loss needs t < tau, got t={t}, tau={tau}")));
    }
    let batch = single_batch(image, text, t, eps_image, eps_text);
    let opts = LossOptions {
        tau,
        mutual: true,
        detach_x0: false,
    };
    Ok(loss_terms(i2t, t2i, &batch, sched, &opts)?.mutual)
}

/// Both base terms plus the mutual term when enabled and `t < tau`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<A: Denoiser, B: Denoiser>(
    i2t: &A,
    t2i: &B,
    image: ArrayView1<f64>,
    text: ArrayView1<f64>,
    t: usize,
    eps_image: ArrayView1<f64>,
    eps_text: ArrayView1<f64>,
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<f64> {
    let batch = single_batch(image, text, t, eps_image, eps_text);
    Ok(loss_terms(i2t, t2i, &batch, sched, opts)?.total)
}

/// Complete normalized training pairs as row matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

impl TrainData {
    /// Normalizes the complete pairs of `samples`; incomplete ones are skipped.
    pub fn from_samples(samples: &[SamplePair], norm_image: &NormStats, norm_text: &NormStats) -> Result<Self> {
        let complete: Vec<&SamplePair> = samples.iter().filter(|s| s.is_complete()).collect();
        let mut image = Array2::zeros((complete.len(), norm_image.dim()));
        let mut text = Array2::zeros((complete.len(), norm_text.dim()));
        for (i, s) in complete.iter().enumerate() {
            for (m, stats, out) in [
                (Modality::Image, norm_image, &mut image),
                (Modality::Text, norm_text, &mut text),
            ] {
                let f = s.feature(m).expect("complete pair");
                if f.len() != stats.dim() {
                    return Err(Error::Dimension {
                        what: format!("{m:?} feature of {}", s.id),
                        expected: stats.dim(),
                        found: f.len(),
                    });
                }
                out.row_mut(i).assign(&stats.normalize(f.view()));
            }
        }
        Ok(Self { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossTerms,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub base: f64,
    pub mutual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
}

/// Everything needed to continue training or to restore.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub model_i2t: GatedDit,
    pub model_t2i: GatedDit,
    pub moments_i2t: Moments,
    pub moments_t2i: Moments,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub norm_image: NormStats,
    pub norm_text: NormStats,
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.schedule == o.schedule
            && self.model_i2t == o.model_i2t
            && self.model_t2i == o.model_t2i
            && self.moments_i2t == o.moments_i2t
            && self.moments_t2i == o.moments_t2i
            && self.step == o.step
            && self.epoch == o.epoch
            && self.rng == o.rng
            && self.norm_image == o.norm_image
            && self.norm_text == o.norm_text
    }
}

impl TrainState {
    /// Fresh models seeded from `config.seed`; the same generator then
    /// drives shuffling, timesteps and noise.
    pub fn new(config: TrainConfig, norm_image: NormStats, norm_text: NormStats) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let (di, dt) = (norm_image.dim(), norm_text.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model_i2t = GatedDit::new(config.model.model_config(dt, di)?, &mut rng)?;
        let model_t2i = GatedDit::new(config.model.model_config(di, dt)?, &mut rng)?;
        Ok(Self {
            moments_i2t: Moments::zeros(model_i2t.params()),
            moments_t2i: Moments::zeros(model_t2i.params()),
            config,
            schedule,
            model_i2t,
            model_t2i,
            step: 0,
            epoch: 0,
            rng,
            norm_image,
            norm_text,
        })
    }

    pub fn model(&self, restores: Modality) -> &GatedDit {
        match restores {
            Modality::Text => &self.model_i2t,
            Modality::Image => &self.model_t2i,
        }
    }

    pub fn norm(&self, m: Modality) -> &NormStats {
        match m {
            Modality::Image => &self.norm_image,
            Modality::Text => &self.norm_text,
        }
    }

    /// Applies one update from an already sampled batch.
    pub fn apply_batch(&mut self, batch: &PairBatch) -> Result<StepReport> {
        let opts = self.config.loss_options();
        let (loss, mut ga, mut gb) = loss_and_grads(&self.model_i2t, &self.model_t2i, batch, &self.schedule, &opts)?;
        let step = self.step + 1;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "base_i2t={} base_t2i={} mutual={} total={} (mutual pairs {}/{})",
                    loss.base_i2t,
                    loss.base_t2i,
                    loss.mutual,
                    loss.total,
                    loss.mutual_pairs,
                    batch.len()
                ),
            });
        }
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut [&mut ga, &mut gb], c),
            None => crate::optim::grad_norm(&[&ga, &gb]),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {grad_norm} at total loss {}", loss.total),
            });
        }
        let opt = self.config.optimizer();
        opt.update(self.model_i2t.params_mut(), &ga, &mut self.moments_i2t, step);
        opt.update(self.model_t2i.params_mut(), &gb, &mut self.moments_t2i, step);
        self.step = step;
        Ok(StepReport { step, loss, grad_norm })
    }

    /// Samples timesteps and noise for normalized complete pairs, then updates.
    pub fn train_step(&mut self, image: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<StepReport> {
        if image.nrows() == 0 || image.nrows() != text.nrows() {
            return Err(Error::Contract("train_step needs a non-empty batch of complete pairs".into()));
        }
        let batch = PairBatch::sample(image, text, self.schedule.steps(), &mut self.rng);
        self.apply_batch(&batch)
    }

    /// One pass over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &TrainData, report: &mut TrainReport) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::Contract("no complete pairs to train on".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut base, mut mutual) = (0.0, 0.0, 0.0);
        let chunks: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for idx in &chunks {
            let image = data.image.select(Axis(0), idx);
            let text = data.text.select(Axis(0), idx);
            let r = self.train_step(image.view(), text.view())?;
            report.step_losses.push(r.loss.total);
            total += r.loss.total;
            base += r.loss.mean_base();
            mutual += r.loss.mutual;
        }
        self.epoch += 1;
        let k = chunks.len() as f64;
        let e = EpochReport {
            epoch: self.epoch,
            steps: chunks.len(),
            total: total / k,
            base: base / k,
            mutual: mutual / k,
        };
        log::info!(
            "epoch {} total {:.5} base {:.5} mutual {:.5}",
            e.epoch,
            e.total,
            e.base,
            e.mutual
        );
        report.epochs.push(e);
        Ok(e)
    }

    /// Trains until `self.epoch == epochs`.
    pub fn run_until(&mut self, data: &TrainData, epochs: usize) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.epoch < epochs {
            self.run_epoch(data, &mut report)?;
        }
        Ok(report)
    }

    /// Mean base loss over `data` with fresh timesteps and noise from `seed`,
    /// averaged over both directions. Does not touch the training generator.
    pub fn mean_base_loss(&self, data: &TrainData, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = LossOptions {
            tau: 0,
            mutual: false,
            detach_x0: false,
        };
        let mut sum = 0.0;
        let mut count = 0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(64) {
            let image = data.image.select(Axis(0), chunk);
            let text = data.text.select(Axis(0), chunk);
            let batch = PairBatch::sample(image.view(), text.view(), self.schedule.steps(), &mut rng);
            let l = loss_terms(&self.model_i2t, &self.model_t2i, &batch, &self.schedule, &opts)?;
            sum += l.mean_base() * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(sum / count as f64)
    }
}

/// Fits normalization on the complete training pairs and trains for `cfg.epochs`.
pub fn train(set: &EmbeddingSet, cfg: TrainConfig) -> Result<(TrainState, TrainReport)> {
    let complete: Vec<SamplePair> = set.samples.iter().filter(|s| s.is_complete()).cloned().collect();
    let norm_image = NormStats::fit(&complete, Modality::Image)?;
    let norm_text = NormStats::fit(&complete, Modality::Text)?;
    let epochs = cfg.epochs;
    let mut state = TrainState::new(cfg, norm_image, norm_text)?;
    let data = TrainData::from_samples(&complete, &state.norm_image, &state.norm_text)?;
    let report = state.run_until(&data, epochs)?;
    Ok((state, report))
}

/// Normalized feature of `m`, if present.
pub fn normalized(state: &TrainState, s: &SamplePair, m: Modality) -> Option<Array1<f64>> {
    s.feature(m).map(|f| state.norm(m).normalize(f.view()))
}
