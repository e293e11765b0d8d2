//! The lightweight downstream decoder: two modality tokens, two
//! self-attention layers, one cross-attention layer (text queries image) and
//! a linear classifier.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, confusion_matrix, macro_f1};
use crate::data::{Modality, NormStats, SamplePair};
use crate::error::{Error, Result};
use crate::optim::{AdamW, Moments};
use crate::params::{Init, ParamSet};
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub n_heads: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate is multiplied by this factor from the midpoint epoch on.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            n_heads: 2,
            epochs: 20,
            lr: 5e-4,
            lr_decay: 0.1,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_heads == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe hidden, n_heads and batch_size must be positive".into()));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "probe hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("probe lr {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Normalized probe inputs. A missing modality is the zero row, which is the
/// per-dimension mean in raw space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Normalization fitted on every present feature of a probe training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeNorms {
    pub image: NormStats,
    pub text: NormStats,
}

impl ProbeNorms {
    pub fn fit(samples: &[SamplePair]) -> Result<Self> {
        Ok(Self {
            image: NormStats::fit(samples, Modality::Image)?,
            text: NormStats::fit(samples, Modality::Text)?,
        })
    }
}

impl ProbeData {
    pub fn from_samples(samples: &[SamplePair], norms: &ProbeNorms) -> Result<Self> {
        let n = samples.len();
        let mut image = Array2::zeros((n, norms.image.dim()));
        let mut text = Array2::zeros((n, norms.text.dim()));
        for (i, s) in samples.iter().enumerate() {
            for (m, stats, out) in [
                (Modality::Image, &norms.image, &mut image),
                (Modality::Text, &norms.text, &mut text),
            ] {
                if let Some(f) = s.feature(m) {
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
        }
        Ok(Self {
            image,
            text,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            image: self.image.select(Axis(0), idx),
            text: self.text.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin(usize, usize);

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    ln: (usize, usize),
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    image_in: Lin,
    text_in: Lin,
    self_layers: Vec<AttnParams>,
    cross: AttnParams,
    /// Layer norm on the image token before it becomes keys and values.
    cross_kv_ln: (usize, usize),
    head_ln: (usize, usize),
    head: Lin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    config: ProbeConfig,
    n_classes: usize,
    norms: ProbeNorms,
    layout: Layout,
    params: ParamSet,
}

impl ProbeModel {
    pub fn new(config: ProbeConfig, n_classes: usize, norms: ProbeNorms) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::Config("probe needs at least 2 classes".into()));
        }
        let h = config.hidden;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: ParamSet::new(),
        };
        let image_in = b.linear("image_in", norms.image.dim(), h);
        let text_in = b.linear("text_in", norms.text.dim(), h);
        let self_layers = vec![b.attention("self0", h), b.attention("self1", h)];
        let cross = b.attention("cross", h);
        let cross_kv_ln = b.layer_norm("cross.kv_ln", h);
        let head_ln = b.layer_norm("head.ln", 2 * h);
        let head = b.linear("head", 2 * h, n_classes);
        Ok(Self {
            config,
            n_classes,
            norms,
            layout: Layout {
                image_in,
                text_in,
                self_layers,
                cross,
                cross_kv_ln,
                head_ln,
                head,
            },
            params: b.params,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn norms(&self) -> &ProbeNorms {
        &self.norms
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], data: &ProbeData) -> Var {
        let l = &self.layout;
        let (b, h, heads) = (data.len(), self.config.hidden, self.config.n_heads);
        let lin = |g: &mut Graph, x: Var, Lin(w, bias): Lin| g.linear(x, p[w], p[bias]);

        let xi = g.input(data.image.clone());
        let xt = g.input(data.text.clone());
        let ti = lin(g, xi, l.image_in);
        let tt = lin(g, xt, l.text_in);
        // rows alternate image, text per sample
        let joined = g.concat_cols(ti, tt);
        let mut x = g.reshape(joined, 2 * b, h);
        for a in &l.self_layers {
            let n = g.layer_norm(x, p[a.ln.0], p[a.ln.1]);
            let q = lin(g, n, a.q);
            let k = lin(g, n, a.k);
            let v = lin(g, n, a.v);
            let o = g.attention(q, k, v, heads, 2, 2);
            let o = lin(g, o, a.o);
            x = g.add(x, o);
        }
        let img = g.gather_rows(x, (0..b).map(|i| 2 * i).collect());
        let txt = g.gather_rows(x, (0..b).map(|i| 2 * i + 1).collect());
        let c = &l.cross;
        let qn = g.layer_norm(txt, p[c.ln.0], p[c.ln.1]);
        let kn = g.layer_norm(img, p[l.cross_kv_ln.0], p[l.cross_kv_ln.1]);
        let q = lin(g, qn, c.q);
        let k = lin(g, kn, c.k);
        let v = lin(g, kn, c.v);
        let o = g.attention(q, k, v, heads, 1, 1);
        let o = lin(g, o, c.o);
        let txt = g.add(txt, o);
        let both = g.concat_cols(img, txt);
        let both = g.layer_norm(both, p[l.head_ln.0], p[l.head_ln.1]);
        lin(g, both, l.head)
    }

    /// Class logits, `(n, n_classes)`.
    pub fn logits(&self, data: &ProbeData) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, 0);
        let out = self.forward(&mut g, &p, data);
        g.value(out).clone()
    }

    pub fn predict(&self, data: &ProbeData) -> Vec<usize> {
        self.logits(data)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn evaluate(&self, samples: &[SamplePair]) -> Result<ProbeMetrics> {
        let data = ProbeData::from_samples(samples, &self.norms)?;
        self.evaluate_data(&data)
    }

    pub fn evaluate_data(&self, data: &ProbeData) -> Result<ProbeMetrics> {
        if data.is_empty() {
            return Err(Error::Contract("cannot evaluate a probe on no samples".into()));
        }
        let pred = self.predict(data);
        let cm = confusion_matrix(&pred, &data.labels, self.n_classes)?;
        Ok(ProbeMetrics {
            accuracy: accuracy(&cm),
            macro_f1: macro_f1(&cm),
            n: data.len(),
        })
    }

    /// Cross-entropy and gradients on one batch.
    fn loss_and_grads(&self, batch: &ProbeData) -> (f64, Vec<Array2<f64>>) {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, 0);
        let logits = self.forward(&mut g, &p, batch);
        let loss = g.cross_entropy(logits, batch.labels.clone());
        let grads = g.backward(loss);
        let value = g.scalar(loss);
        (value, crate::params::collect_grads(&grads, &p, &self.params))
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let std = 1.0 / (fan_in as f64).sqrt();
        Lin(
            self.params
                .init(format!("{name}.weight"), (fan_in, fan_out), Init::TruncNormal(std), &mut self.rng),
            self.params
                .init(format!("{name}.bias"), (1, fan_out), Init::Zeros, &mut self.rng),
        )
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        (
            self.params.push(format!("{name}.gain"), Array2::ones((1, d))),
            self.params.push(format!("{name}.bias"), Array2::zeros((1, d))),
        )
    }

    fn attention(&mut self, name: &str, h: usize) -> AttnParams {
        AttnParams {
            ln: self.layer_norm(&format!("{name}.ln"), h),
            q: self.linear(&format!("{name}.q"), h, h),
            k: self.linear(&format!("{name}.k"), h, h),
            v: self.linear(&format!("{name}.v"), h, h),
            o: self.linear(&format!("{name}.o"), h, h),
        }
    }
}

/// Trains a fresh probe on `samples`, fitting its normalization on every
/// present feature. Missing features are zero-filled in normalized space.
pub fn train_probe(samples: &[SamplePair], n_classes: usize, config: &ProbeConfig) -> Result<ProbeModel> {
    let norms = ProbeNorms::fit(samples)?;
    let data = ProbeData::from_samples(samples, &norms)?;
    train_probe_on(&data, n_classes, norms, config)
}

pub fn train_probe_on(data: &ProbeData, n_classes: usize, norms: ProbeNorms, config: &ProbeConfig) -> Result<ProbeModel> {
    if data.is_empty() {
        return Err(Error::Contract("cannot train a probe on no samples".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let mut model = ProbeModel::new(config.clone(), n_classes, norms)?;
    let mut moments = Moments::zeros(&model.params);
    // shuffling gets its own stream so init and order stay independent
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let lr = if epoch >= config.epochs / 2 && config.epochs > 1 {
            config.lr * config.lr_decay
        } else {
            config.lr
        };
        let opt = AdamW::new(lr, config.weight_decay);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let batch = data.select(idx);
            let (loss, grads) = model.loss_and_grads(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: step + 1,
                    detail: format!("probe cross-entropy {loss}"),
                });
            }
            step += 1;
            opt.update(&mut model.params, &grads, &mut moments, step);
            total += loss;
            batches += 1;
        }
        log::debug!("probe epoch {} loss {:.5}", epoch + 1, total / batches as f64);
    }
    Ok(model)
}
