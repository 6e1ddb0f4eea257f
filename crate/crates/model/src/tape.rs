//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation together with its value; [`Graph::backward`]
//! walks the record in reverse and accumulates gradients. Sequences are
//! stored as stacked rows: a batch of `B` sequences of length `T` is a
//! `(B * T) x d` matrix.

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};

use lcpred_core::Scalar;

/// Element type usable on the tape.
pub trait Float: Scalar + LinalgScalar + ScalarOperand {}

impl<T: Scalar + LinalgScalar + ScalarOperand> Float for T {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<F>, inv_std: Vec<F> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<Array2<F>> },
    MeanPool { x: Var, seq: usize },
    PrependRow { x: Var, row: Var, seq: usize },
    FirstRow { x: Var, seq: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<F> },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x);
    (y, dy)
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Float>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with the `1 x n` row `b` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    /// `a + b` with `b` repeated down the rows of `a` (row `i` gets `b[i % p]`).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let p = self.value(b).nrows();
        assert_eq!(self.value(a).nrows() % p, 0, "add_tiled row count mismatch");
        let mut v = self.value(a).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            row += &self.nodes[b.0].value.row(i % p);
        }
        self.push(v, Op::AddTiled(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        self.push(v, Op::Gelu(a))
    }

    /// Per-row layer normalization followed by a `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = F::lit(xv.ncols() as f64);
        let eps = F::lit(LAYER_NORM_EPS);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().copied().fold(F::zero(), |a, b| a + b) / d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).fold(F::zero(), |a, b| a + b) / d;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Multi-head scaled dot-product self-attention over blocks of `seq` rows.
    /// `q`, `k`, `v` are already projected; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(rows % seq == 0 && d % heads == 0, "attention shape mismatch");
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq * heads);
        for b in 0..rows / seq {
            let r = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut p);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, seq, heads, probs })
    }

    /// Mean over each block of `seq` rows.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() / seq;
        let mut out = Array2::zeros((n, xv.ncols()));
        for b in 0..n {
            let m = xv.slice(s![b * seq..(b + 1) * seq, ..]).mean_axis(Axis(0)).unwrap();
            out.row_mut(b).assign(&m);
        }
        self.push(out, Op::MeanPool { x, seq })
    }

    /// Inserts the `1 x d` row before every block of `seq` rows.
    pub fn prepend_row(&mut self, x: Var, row: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() / seq;
        let mut out = Array2::zeros((n * (seq + 1), xv.ncols()));
        for b in 0..n {
            out.row_mut(b * (seq + 1)).assign(&self.value(row).row(0));
            out.slice_mut(s![b * (seq + 1) + 1..(b + 1) * (seq + 1), ..])
                .assign(&xv.slice(s![b * seq..(b + 1) * seq, ..]));
        }
        self.push(out, Op::PrependRow { x, row, seq })
    }

    /// First row of every block of `seq` rows.
    pub fn first_row(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() / seq;
        let mut out = Array2::zeros((n, xv.ncols()));
        for b in 0..n {
            out.row_mut(b).assign(&xv.row(b * seq));
        }
        self.push(out, Op::FirstRow { x, seq })
    }

    /// Mean cross-entropy of row-wise softmax against class indices; `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "one label per row");
        let mut probs = lv.clone();
        let mut total = F::zero();
        for (row, &y) in lv.rows().into_iter().zip(labels) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|v| (*v - max).exp()).fold(F::zero(), |a, b| a + b).ln() + max;
            total += lse - row[y];
        }
        softmax_rows(&mut probs);
        let loss = total / F::lit(labels.len() as f64);
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Attention probability matrices recorded in the graph, one per block and head.
    pub fn attention_probs(&self) -> impl Iterator<Item = &Array2<F>> {
        self.nodes.iter().flat_map(|n| match &n.op {
            Op::Attention { probs, .. } => probs.as_slice(),
            _ => &[],
        })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<F>>> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));
        fn acc<F: Float>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddTiled(a, b) => {
                    let p = self.value(*b).nrows();
                    let mut gb = Array2::zeros(self.value(*b).dim());
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let mut target = gb.row_mut(r % p);
                        target += &row;
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| *gv *= gelu_parts(x).1);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * self.value(*gain);
                    let d = F::lit(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.iter().copied().fold(F::zero(), |a, b| a + b);
                        let sum_dx = dh.iter().zip(xh.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b);
                        let k = inv_std[r] / d;
                        for j in 0..out.len() {
                            out[j] = k * (d * dh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, seq, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.dim();
                    let dh = d / heads;
                    let scale = F::lit(1.0 / (dh as f64).sqrt());
                    let mut gq = Array2::zeros((rows, d));
                    let mut gk = Array2::zeros((rows, d));
                    let mut gv = Array2::zeros((rows, d));
                    for b in 0..rows / seq {
                        let r = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qh = qv.slice(s![r.clone(), c.clone()]);
                            let kh = kv.slice(s![r.clone(), c.clone()]);
                            let vh = vv.slice(s![r.clone(), c.clone()]);
                            gv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = &dp * p;
                            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = ds_row.iter().copied().fold(F::zero(), |a, b| a + b);
                                Zip::from(&mut ds_row).and(&p_row).for_each(|x, &pv| *x -= pv * dot);
                            }
                            ds *= scale;
                            gq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                            gk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::MeanPool { x, seq } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let inv = F::one() / F::lit(*seq as f64);
                    for (b, row) in g.rows().into_iter().enumerate() {
                        for r in 0..*seq {
                            let mut target = gx.row_mut(b * seq + r);
                            target.scaled_add(inv, &row);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::PrependRow { x, row, seq } => {
                    let n = g.nrows() / (seq + 1);
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let mut grow = Array2::zeros(self.value(*row).dim());
                    for b in 0..n {
                        let mut r0 = grow.row_mut(0);
                        r0 += &g.row(b * (seq + 1));
                        gx.slice_mut(s![b * seq..(b + 1) * seq, ..])
                            .assign(&g.slice(s![b * (seq + 1) + 1..(b + 1) * (seq + 1), ..]));
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, grow);
                }
                Op::FirstRow { x, seq } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (b, row) in g.rows().into_iter().enumerate() {
                        gx.row_mut(b * seq).assign(&row);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[[r, y]] -= F::one();
                    }
                    let k = g[[0, 0]] / F::lit(labels.len() as f64);
                    acc(&mut grads, *logits, gl * k);
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}
