//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every intermediate value together with the operation
//! that produced it; [`Graph::backward`] walks the record in reverse. Token
//! sequences are stored row-major as `(groups * tokens, channels)`, with one
//! group per sample, so grouped ops (`expand_groups`, `attention`) never mix
//! rows across samples.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Identifies a parameter tensor: which parameter set and which slot in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub set: usize,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    #[allow(dead_code)]
    Param(ParamKey),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Sigmoid(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Array2<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        probs: Vec<f64>,
    },
    Tile(Var, usize),
    ExpandGroups(Var, usize),
    MeanGroups(Var, usize),
    Reshape(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    SqDiffRowMean(Var, Var),
    WeightedSum(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, key: ParamKey, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(key))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `(1, c)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `x W + b` with `W: (in, out)` and `b: (1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies row `i` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.nrows(), scales.len(), "scale_rows length");
        for (mut row, s) in out.rows_mut().into_iter().zip(&scales) {
            row *= *s;
        }
        self.push(out, Op::ScaleRows(a, scales))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    /// Row-wise layer norm with `(1, c)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mut norm = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in norm.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &norm * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                norm,
                rstd,
            },
        )
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` holds `groups * nq` rows and `k`, `v` hold `groups * nk` rows; each
    /// group attends only within itself. Channels split evenly across heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, nq: usize, nk: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "channels not divisible by heads");
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        let groups = qv.nrows() / nq;
        assert_eq!(groups * nq, qv.nrows());
        assert_eq!(groups * nk, kv.nrows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::<f64>::zeros((groups * nq, d));
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let qs = qv.as_slice().expect("contiguous q");
        let ks = kv.as_slice().expect("contiguous k");
        let vs = vv.as_slice().expect("contiguous v");
        let os = out.as_slice_mut().unwrap();
        let mut scores = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qrow = &qs[(g * nq + i) * d + off..(g * nq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = &ks[(g * nk + j) * d + off..(g * nk + j) * d + off + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let pbase = ((g * heads + h) * nq + i) * nk;
                    let orow = (g * nq + i) * d + off;
                    for j in 0..nk {
                        let p = scores[j] / total;
                        probs[pbase + j] = p;
                        let vrow = &vs[(g * nk + j) * d + off..(g * nk + j) * d + off + dh];
                        for (o, vval) in os[orow..orow + dh].iter_mut().zip(vrow) {
                            *o += p * vval;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                probs,
            },
        )
    }

    /// Stacks `times` copies of the whole `(n, c)` block into `(times * n, c)`.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let block = self.value(a);
        let n = block.nrows();
        let mut out = Array2::zeros((times * n, block.ncols()));
        for t in 0..times {
            out.slice_mut(s![t * n..(t + 1) * n, ..]).assign(block);
        }
        self.push(out, Op::Tile(a, times))
    }

    /// `(groups, c)` to `(groups * n, c)`, copying each group row `n` times.
    pub fn expand_groups(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((av.nrows() * n, av.ncols()));
        for (g, row) in av.rows().into_iter().enumerate() {
            out.slice_mut(s![g * n..(g + 1) * n, ..])
                .assign(&row.broadcast((n, row.len())).unwrap());
        }
        self.push(out, Op::ExpandGroups(a, n))
    }

    /// `(groups * n, c)` to `(groups, c)` by averaging each group's rows.
    pub fn mean_groups(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let groups = av.nrows() / n;
        let mut out = Array2::zeros((groups, av.ncols()));
        for g in 0..groups {
            let m = av.slice(s![g * n..(g + 1) * n, ..]).sum_axis(Axis(0)) / n as f64;
            out.row_mut(g).assign(&m);
        }
        self.push(out, Op::MeanGroups(a, n))
    }

    /// Row-major reshape; the element order is unchanged.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size");
        let flat: Vec<f64> = av.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(out, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::GatherRows(a, rows))
    }

    /// Per-row mean of `(a - b)^2`, shape `(r, 1)`.
    pub fn sq_diff_row_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "sq_diff shapes");
        let c = av.ncols() as f64;
        let mut out = Array2::zeros((av.nrows(), 1));
        for (i, (ra, rb)) in av.rows().into_iter().zip(bv.rows()).enumerate() {
            let ssq: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            out[[i, 0]] = ssq / c;
        }
        self.push(out, Op::SqDiffRowMean(a, b))
    }

    /// `sum_i w_i a_i` over an `(r, 1)` column, in row order.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1);
        assert_eq!(av.nrows(), weights.len());
        let mut total = 0.0;
        for (v, w) in av.column(0).iter().zip(&weights) {
            total += v * w;
        }
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(a, weights))
    }

    /// Mean softmax cross-entropy of `(r, classes)` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "one label per row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(&labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
            loss -= row[y].ln();
        }
        let out = Array2::from_elem((1, 1), loss / labels.len() as f64);
        self.push(out, Op::CrossEntropy { logits, labels, probs })
    }

    /// Backpropagates from a scalar `(1, 1)` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate_view(grads, *a, g.view());
                accumulate_view(grads, *b, g.view());
            }
            Op::Sub(a, b) => {
                accumulate_view(grads, *a, g.view());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                accumulate_view(grads, *a, g.view());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::ScaleRows(a, scales) => {
                let mut d = g.clone();
                for (mut row, s) in d.rows_mut().into_iter().zip(scales) {
                    row *= *s;
                }
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|g, y| g * y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = Zip::from(g).and(self.value(*a)).map_collect(|g, x| {
                    let s = sigmoid(*x);
                    g * (s + x * s * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                norm,
                rstd,
            } => {
                let gam = self.value(*gamma);
                accumulate(
                    grads,
                    *gamma,
                    (g * norm).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dn = g * gam;
                let c = norm.ncols() as f64;
                let mut dx = Array2::zeros(norm.dim());
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dni = dn.row(i);
                    let ni = norm.row(i);
                    let mean_dn = dni.sum() / c;
                    let mean_dn_n = dni.iter().zip(ni).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((o, d), n) in row.iter_mut().zip(dni).zip(ni) {
                        *o = rstd[i] * (d - mean_dn - n * mean_dn_n);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut d = probs.clone();
                for (mut row, &y) in d.rows_mut().into_iter().zip(labels) {
                    row[y] -= 1.0;
                    row *= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(g, *q, *k, *v, *heads, *nq, *nk, probs);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::Tile(a, times) => {
                let n = g.nrows() / times;
                let mut d = Array2::zeros((n, g.ncols()));
                for t in 0..*times {
                    d += &g.slice(s![t * n..(t + 1) * n, ..]);
                }
                accumulate(grads, *a, d);
            }
            Op::ExpandGroups(a, n) => {
                let groups = g.nrows() / n;
                let mut d = Array2::zeros((groups, g.ncols()));
                for gi in 0..groups {
                    d.row_mut(gi)
                        .assign(&g.slice(s![gi * n..(gi + 1) * n, ..]).sum_axis(Axis(0)));
                }
                accumulate(grads, *a, d);
            }
            Op::MeanGroups(a, n) => {
                let inv = 1.0 / *n as f64;
                let mut d = Array2::zeros((g.nrows() * n, g.ncols()));
                for (gi, row) in g.rows().into_iter().enumerate() {
                    let r = &row * inv;
                    d.slice_mut(s![gi * n..(gi + 1) * n, ..])
                        .assign(&r.broadcast((*n, row.len())).unwrap());
                }
                accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Array2::from_shape_vec(shape, flat).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                for (src, &dst) in rows.iter().enumerate() {
                    let mut r = d.row_mut(dst);
                    r += &g.row(src);
                }
                accumulate(grads, *a, d);
            }
            Op::SqDiffRowMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.ncols() as f64;
                let mut d = av - bv;
                for (mut row, gi) in d.rows_mut().into_iter().zip(g.column(0)) {
                    row *= 2.0 * gi / c;
                }
                accumulate(grads, *b, -&d);
                accumulate(grads, *a, d);
            }
            Op::WeightedSum(a, weights) => {
                let gv = g[[0, 0]];
                let d = Array2::from_shape_fn((weights.len(), 1), |(i, _)| weights[i] * gv);
                accumulate(grads, *a, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Array2<f64>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        probs: &[f64],
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = qv.nrows() / nq;
        let mut dq = Array2::<f64>::zeros(qv.dim());
        let mut dk = Array2::<f64>::zeros(kv.dim());
        let mut dv = Array2::<f64>::zeros(vv.dim());
        let (qs, ks, vs) = (
            qv.as_slice().unwrap(),
            kv.as_slice().unwrap(),
            vv.as_slice().unwrap(),
        );
        let gs = g.as_slice().expect("contiguous grad");
        let dqs = dq.as_slice_mut().unwrap();
        let dks = dk.as_slice_mut().unwrap();
        let dvs = dv.as_slice_mut().unwrap();
        let mut dp = vec![0.0; nk];
        for gi in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let pbase = ((gi * heads + h) * nq + i) * nk;
                    let p = &probs[pbase..pbase + nk];
                    let grow = &gs[(gi * nq + i) * d + off..(gi * nq + i) * d + off + dh];
                    let mut weighted = 0.0;
                    for j in 0..nk {
                        let vbase = (gi * nk + j) * d + off;
                        let vrow = &vs[vbase..vbase + dh];
                        dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        weighted += dp[j] * p[j];
                        for (o, gval) in dvs[vbase..vbase + dh].iter_mut().zip(grow) {
                            *o += p[j] * gval;
                        }
                    }
                    let qbase = (gi * nq + i) * d + off;
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kbase = (gi * nk + j) * d + off;
                        for c in 0..dh {
                            dqs[qbase + c] += ds * ks[kbase + c];
                            dks[kbase + c] += ds * qs[qbase + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_view(grads: &mut [Option<Array2<f64>>], v: Var, d: ArrayView2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d.to_owned()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
