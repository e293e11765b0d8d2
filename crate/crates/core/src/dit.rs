//! Noise-prediction transformer with condition-driven channel gates.
//!
//! The input feature is cut into `n_tokens` contiguous chunks, each projected
//! to `d_model`. The condition (the available modality, also chunked) is
//! projected and summed with a time embedding; a single learned probe pools it
//! into a gate vector that every block maps, through its own sigmoid heads, to
//! per-channel weights on the self-attention and FFN residual branches. An
//! ungated cross-attention sublayer sits between the two gated ones.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSet, INIT_STD};
use crate::tape::{Graph, Var};

/// How the pooled condition reaches the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Gating {
    /// Sigmoid channel gates on the self-attention and FFN branches.
    Full,
    /// Scale and shift of the pre-branch layer norms, no gates.
    Adaln,
    /// Mean condition concatenated onto every input token, no gates.
    Concat,
    /// Plain residual blocks; the condition enters only via cross-attention.
    Base,
}

impl Gating {
    pub fn as_str(self) -> &'static str {
        match self {
            Gating::Full => "full",
            Gating::Adaln => "adaln",
            Gating::Concat => "concat",
            Gating::Base => "base",
        }
    }

    fn pools_condition(self) -> bool {
        matches!(self, Gating::Full | Gating::Adaln)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dimension of the restored feature.
    pub d_feature: usize,
    /// Width of one condition token.
    pub d_cond: usize,
    pub n_cond_tokens: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub gate_hidden: usize,
    pub ffn_mult: usize,
    /// Learned position embedding on condition tokens.
    pub cond_pos_embed: bool,
    pub gating: Gating,
}

impl ModelConfig {
    /// Config for a `d_feature`-dim target conditioned on a `d_condition`-dim
    /// feature, both chunked into `n_tokens` tokens.
    pub fn for_features(d_feature: usize, d_condition: usize, d_model: usize, depth: usize) -> Self {
        let n_tokens = 4;
        Self {
            d_feature,
            d_cond: d_condition / n_tokens,
            n_cond_tokens: n_tokens,
            d_model,
            depth,
            n_heads: 4,
            n_tokens,
            gate_hidden: d_model,
            ffn_mult: 4,
            cond_pos_embed: true,
            gating: Gating::Full,
        }
    }

    pub fn chunk(&self) -> usize {
        self.d_feature / self.n_tokens
    }

    /// Length of the raw condition feature.
    pub fn d_condition(&self) -> usize {
        self.d_cond * self.n_cond_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_feature", self.d_feature),
            ("d_cond", self.d_cond),
            ("n_cond_tokens", self.n_cond_tokens),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("n_tokens", self.n_tokens),
            ("gate_hidden", self.gate_hidden),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_feature % self.n_tokens != 0 {
            return Err(Error::Config(format!(
                "d_feature {} not divisible by n_tokens {}",
                self.d_feature, self.n_tokens
            )));
        }
        Ok(())
    }

    /// Condition-side config of the opposite direction.
    pub fn mirrored(&self) -> Self {
        let mut m = self.clone();
        m.d_feature = self.d_condition();
        m.n_cond_tokens = self.n_tokens;
        m.d_cond = self.d_feature / self.n_tokens;
        m
    }
}

/// Sinusoidal encoding: `[sin(t f_0..f_{h-1}), cos(t f_0..f_{h-1})]` with
/// `f_i = 10000^(-i/h)` and `h = d/2`; odd widths get a trailing zero.
pub fn timestep_embedding(t: usize, d: usize) -> Array1<f64> {
    let half = d / 2;
    let mut out = Array1::zeros(d);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1: (usize, usize),
    attn: Attn,
    ln2: (usize, usize),
    cross: Attn,
    ln3: (usize, usize),
    ffn_in: (usize, usize),
    ffn_out: (usize, usize),
    gate_attn: Option<(usize, usize)>,
    gate_mlp: Option<(usize, usize)>,
    ada: Option<[(usize, usize); 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attn {
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    token_in: (usize, usize),
    token_pos: usize,
    cond_in: (usize, usize),
    cond_pos: Option<usize>,
    time1: (usize, usize),
    time2: (usize, usize),
    pool: Option<Pool>,
    concat: Option<(usize, usize)>,
    blocks: Vec<BlockLayout>,
    final_ln: (usize, usize),
    out: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pool {
    probe: usize,
    key: usize,
    value: usize,
    mlp1: (usize, usize),
    mlp2: (usize, usize),
}

struct Builder<'r, R: Rng + ?Sized> {
    params: ParamSet,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn tensor(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.params.init(name, shape, init, self.rng)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        self.linear_init(name, fan_in, fan_out, Init::TruncNormal(INIT_STD))
    }

    fn linear_init(&mut self, name: &str, fan_in: usize, fan_out: usize, w: Init) -> (usize, usize) {
        let wi = self.tensor(format!("{name}.weight"), (fan_in, fan_out), w);
        let bi = self.tensor(format!("{name}.bias"), (1, fan_out), Init::Zeros);
        (wi, bi)
    }

    fn norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        let g = self.tensor(format!("{name}.gain"), (1, d), Init::Ones);
        let b = self.tensor(format!("{name}.bias"), (1, d), Init::Zeros);
        (g, b)
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

fn build_layout<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> (Layout, ParamSet) {
    let d = cfg.d_model;
    let mut b = Builder {
        params: ParamSet::new(),
        rng,
    };
    let token_in = b.linear("token_in", cfg.chunk(), d);
    let token_pos = b.tensor("token_pos".into(), (cfg.n_tokens, d), Init::TruncNormal(INIT_STD));
    let cond_in = b.linear("cond_in", cfg.d_cond, d);
    let cond_pos = cfg
        .cond_pos_embed
        .then(|| b.tensor("cond_pos".into(), (cfg.n_cond_tokens, d), Init::TruncNormal(INIT_STD)));
    let time1 = b.linear("time_mlp.0", d, d);
    let time2 = b.linear("time_mlp.2", d, d);
    let pool = cfg.gating.pools_condition().then(|| Pool {
        probe: b.tensor("gate_pool.probe".into(), (1, d), Init::TruncNormal(INIT_STD)),
        key: b.tensor("gate_pool.key".into(), (d, d), Init::TruncNormal(INIT_STD)),
        value: b.tensor("gate_pool.value".into(), (d, d), Init::TruncNormal(INIT_STD)),
        mlp1: b.linear("gate_mlp.0", d, cfg.gate_hidden),
        mlp2: b.linear("gate_mlp.2", cfg.gate_hidden, d),
    });
    let concat = (cfg.gating == Gating::Concat).then(|| b.linear("concat_in", 2 * d, d));
    let blocks = (0..cfg.depth)
        .map(|i| {
            let p = format!("blocks.{i}");
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let attn = b.attn(&format!("{p}.attn"), d);
            let ln2 = b.norm(&format!("{p}.ln2"), d);
            let cross = b.attn(&format!("{p}.cross"), d);
            let ln3 = b.norm(&format!("{p}.ln3"), d);
            let ffn_in = b.linear(&format!("{p}.ffn.0"), d, d * cfg.ffn_mult);
            let ffn_out = b.linear(&format!("{p}.ffn.2"), d * cfg.ffn_mult, d);
            let gated = cfg.gating == Gating::Full;
            // zero heads: every gate starts at exactly one half
            let gate_attn = gated.then(|| b.linear_init(&format!("{p}.gate_attn"), d, d, Init::Zeros));
            let gate_mlp = gated.then(|| b.linear_init(&format!("{p}.gate_mlp"), d, d, Init::Zeros));
            let ada = (cfg.gating == Gating::Adaln).then(|| {
                ["shift_attn", "scale_attn", "shift_mlp", "scale_mlp"]
                    .map(|n| b.linear_init(&format!("{p}.ada.{n}"), d, d, Init::Zeros))
            });
            BlockLayout {
                ln1,
                attn,
                ln2,
                cross,
                ln3,
                ffn_in,
                ffn_out,
                gate_attn,
                gate_mlp,
                ada,
            }
        })
        .collect();
    let final_ln = b.norm("final_ln", d);
    let out = b.linear_init("out", d, cfg.chunk(), Init::Zeros);
    let layout = Layout {
        token_in,
        token_pos,
        cond_in,
        cond_pos,
        time1,
        time2,
        pool,
        concat,
        blocks,
        final_ln,
        out,
    };
    (layout, b.params)
}

/// Gate activations captured during one forward pass, `(batch, d_model)` per block.
#[derive(Debug, Clone, Default)]
pub struct GateTrace {
    pub attn: Vec<Array2<f64>>,
    pub mlp: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct GatedDit {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet,
}

impl PartialEq for GatedDit {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl GatedDit {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config, rng);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (layout, fresh) = build_layout(&config, &mut rng);
        if fresh.names() != params.names() {
            return Err(Error::Shape("parameter names do not match model config".into()));
        }
        for (name, (a, b)) in fresh.names().iter().zip(fresh.tensors().iter().zip(params.tensors())) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, g: &mut Graph, set: usize) -> Vec<Var> {
        self.params.bind(g, set)
    }

    /// Condition feature rows `(batch, d_condition)` as condition tokens.
    pub fn condition_tokens(&self, g: &mut Graph, cond: ArrayView2<f64>) -> Result<Var> {
        if cond.ncols() != self.config.d_condition() {
            return Err(Error::Dimension {
                what: "condition feature".into(),
                expected: self.config.d_condition(),
                found: cond.ncols(),
            });
        }
        let v = g.input(cond.to_owned());
        Ok(g.reshape(
            v,
            cond.nrows() * self.config.n_cond_tokens,
            self.config.d_cond,
        ))
    }

    /// Batched noise prediction.
    ///
    /// `x_t` is `(batch, d_feature)`, `cond` is `(batch * n_cond_tokens, d_cond)`
    /// and `t` holds one timestep per row. Returns `(batch, d_feature)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x_t: Var,
        t: &[usize],
        cond: Var,
        mut trace: Option<&mut GateTrace>,
    ) -> Var {
        let cfg = &self.config;
        let l = &self.layout;
        let batch = t.len();
        let n = cfg.n_tokens;
        let nc = cfg.n_cond_tokens;
        let d = cfg.d_model;
        assert_eq!(g.value(x_t).dim(), (batch, cfg.d_feature), "x_t shape");
        assert_eq!(g.value(cond).dim(), (batch * nc, cfg.d_cond), "condition shape");

        let lin = |g: &mut Graph, x: Var, (w, b): (usize, usize)| g.linear(x, p[w], p[b]);

        let tokens = g.reshape(x_t, batch * n, cfg.chunk());
        let h = lin(g, tokens, l.token_in);
        let pos = g.tile(p[l.token_pos], batch);
        let mut h = g.add(h, pos);

        // C = Condition_emb + MLP_time(t_emb)
        let mut temb = Array2::zeros((batch, d));
        for (mut row, &ti) in temb.rows_mut().into_iter().zip(t) {
            row.assign(&timestep_embedding(ti, d));
        }
        let temb = g.input(temb);
        let tm = lin(g, temb, l.time1);
        let tm = g.silu(tm);
        let tm = lin(g, tm, l.time2);
        let mut c = lin(g, cond, l.cond_in);
        if let Some(cp) = l.cond_pos {
            let cp = g.tile(p[cp], batch);
            c = g.add(c, cp);
        }
        let tm = g.expand_groups(tm, nc);
        let c = g.add(c, tm);

        let gate = l.pool.map(|pool| {
            let q = g.tile(p[pool.probe], batch);
            let k = g.matmul(c, p[pool.key]);
            let v = g.matmul(c, p[pool.value]);
            let pooled = g.attention(q, k, v, 1, 1, nc);
            let hid = lin(g, pooled, pool.mlp1);
            let hid = g.silu(hid);
            lin(g, hid, pool.mlp2)
        });

        if let Some(cw) = l.concat {
            let mean = g.mean_groups(c, nc);
            let mean = g.expand_groups(mean, n);
            let joined = g.concat_cols(h, mean);
            h = lin(g, joined, cw);
        }

        for blk in &l.blocks {
            // x_mid = x + Z_attn * SelfAttn(LN(x))
            let mut a = g.layer_norm(h, p[blk.ln1.0], p[blk.ln1.1]);
            if let (Some(ada), Some(gv)) = (blk.ada, gate) {
                a = modulate(g, p, a, gv, ada[0], ada[1], n);
            }
            let mut sa = self_attention(g, p, a, &blk.attn, cfg.n_heads, n);
            if let (Some(head), Some(gv)) = (blk.gate_attn, gate) {
                let z = lin(g, gv, head);
                let z = g.sigmoid(z);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.attn.push(g.value(z).clone());
                }
                let z = g.expand_groups(z, n);
                sa = g.mul(sa, z);
            }
            h = g.add(h, sa);

            // x_mid' = x_mid + CrossAttn(LN(x_mid), C)
            let b = g.layer_norm(h, p[blk.ln2.0], p[blk.ln2.1]);
            let ca = cross_attention(g, p, b, c, &blk.cross, cfg.n_heads, n, nc);
            h = g.add(h, ca);

            // x_out = x_mid' + Z_mlp * FFN(LN(x_mid'))
            let mut f = g.layer_norm(h, p[blk.ln3.0], p[blk.ln3.1]);
            if let (Some(ada), Some(gv)) = (blk.ada, gate) {
                f = modulate(g, p, f, gv, ada[2], ada[3], n);
            }
            let f = lin(g, f, blk.ffn_in);
            let f = g.silu(f);
            let mut f = lin(g, f, blk.ffn_out);
            if let (Some(head), Some(gv)) = (blk.gate_mlp, gate) {
                let z = lin(g, gv, head);
                let z = g.sigmoid(z);
                if let Some(tr) = trace.as_deref_mut() {
                    tr.mlp.push(g.value(z).clone());
                }
                let z = g.expand_groups(z, n);
                f = g.mul(f, z);
            }
            h = g.add(h, f);
        }

        let h = g.layer_norm(h, p[l.final_ln.0], p[l.final_ln.1]);
        let out = lin(g, h, l.out);
        g.reshape(out, batch, cfg.d_feature)
    }

    /// Batched prediction without gradients.
    pub fn predict_batch(
        &self,
        x_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        trace: Option<&mut GateTrace>,
    ) -> Result<Array2<f64>> {
        if x_t.ncols() != self.config.d_feature {
            return Err(Error::Dimension {
                what: "noisy feature".into(),
                expected: self.config.d_feature,
                found: x_t.ncols(),
            });
        }
        if x_t.nrows() != t.len() || cond.nrows() != t.len() {
            return Err(Error::Shape("batch sizes of x_t, t and condition differ".into()));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, 0);
        let x = g.input(x_t.to_owned());
        let c = self.condition_tokens(&mut g, cond)?;
        let out = self.forward(&mut g, &p, x, t, c, trace);
        Ok(g.value(out).clone())
    }

    /// Single-sample noise prediction `eps_theta(x_t, t | cond)`.
    pub fn predict_noise(
        &self,
        x_t: ArrayView1<f64>,
        t: usize,
        cond: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let x = x_t.insert_axis(ndarray::Axis(0));
        let c = cond.insert_axis(ndarray::Axis(0));
        let out = self.predict_batch(x, &[t], c, None)?;
        Ok(out.row(0).to_owned())
    }

    /// Replaces every tensor with random values: weights and biases get
    /// `N(0, scale^2)` entries, layer-norm gains `1 + N(0, scale^2)`.
    /// Used for gradient checks, where zero-initialized layers would hide paths.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        let names = self.params.names().to_vec();
        for (name, t) in names.iter().zip(self.params.tensors_mut()) {
            let offset = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            t.mapv_inplace(|_| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                offset + scale * z
            });
        }
    }

    /// Overwrites a named tensor; used to pin weights in tests and diagnostics.
    pub fn set_param(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        if self.params.get(idx).dim() != value.dim() {
            return Err(Error::Shape(format!("parameter {name} shape mismatch")));
        }
        *self.params.get_mut(idx) = value;
        Ok(())
    }
}

fn modulate(
    g: &mut Graph,
    p: &[Var],
    x: Var,
    gate: Var,
    shift: (usize, usize),
    scale: (usize, usize),
    n: usize,
) -> Var {
    let sh = g.linear(gate, p[shift.0], p[shift.1]);
    let sc = g.linear(gate, p[scale.0], p[scale.1]);
    let sh = g.expand_groups(sh, n);
    let sc = g.expand_groups(sc, n);
    let xs = g.mul(x, sc);
    let x = g.add(x, xs);
    g.add(x, sh)
}

fn self_attention(g: &mut Graph, p: &[Var], x: Var, a: &Attn, heads: usize, n: usize) -> Var {
    let q = g.linear(x, p[a.q.0], p[a.q.1]);
    let k = g.linear(x, p[a.k.0], p[a.k.1]);
    let v = g.linear(x, p[a.v.0], p[a.v.1]);
    let o = g.attention(q, k, v, heads, n, n);
    g.linear(o, p[a.o.0], p[a.o.1])
}

#[allow(clippy::too_many_arguments)]
fn cross_attention(
    g: &mut Graph,
    p: &[Var],
    x: Var,
    c: Var,
    a: &Attn,
    heads: usize,
    n: usize,
    nc: usize,
) -> Var {
    let q = g.linear(x, p[a.q.0], p[a.q.1]);
    let k = g.linear(c, p[a.k.0], p[a.k.1]);
    let v = g.linear(c, p[a.v.0], p[a.v.1]);
    let o = g.attention(q, k, v, heads, n, nc);
    g.linear(o, p[a.o.0], p[a.o.1])
}

#[cfg(test)]
mod tests;
