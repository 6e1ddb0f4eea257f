//! Transformer encoder classifier over `50 x 36` sample matrices.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lcpred_core::features::{Sample, N_FEATURES, N_STEPS};

use crate::tape::{Float, Graph, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sample set")]
    EmptySet,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClsToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub n_classes: usize,
    pub seq_len: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            pooling: Pooling::Mean,
            n_classes: 3,
            seq_len: N_STEPS,
            n_features: N_FEATURES,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.seq_len == 0 || self.n_features == 0 {
            return bad("widths, heads and lengths must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_classes != 3 {
            return bad(format!("n_classes must be 3, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

fn layout(c: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = c.d_model;
    let u = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    let mut out = vec![
        ("input.weight".to_string(), (c.n_features, d), u(c.n_features)),
        ("input.bias".to_string(), (1, d), Init::Zeros),
        ("position".to_string(), (c.seq_len, d), u(d)),
    ];
    if c.pooling == Pooling::ClsToken {
        out.push(("cls".to_string(), (1, d), u(d)));
    }
    for i in 0..c.n_layers {
        let p = |n: &str| format!("layer{i}.{n}");
        out.push((p("ln1.gain"), (1, d), Init::Ones));
        out.push((p("ln1.bias"), (1, d), Init::Zeros));
        for m in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.{m}.weight")), (d, d), u(d)));
            out.push((p(&format!("attn.{m}.bias")), (1, d), Init::Zeros));
        }
        out.push((p("ln2.gain"), (1, d), Init::Ones));
        out.push((p("ln2.bias"), (1, d), Init::Zeros));
        out.push((p("ff1.weight"), (d, c.d_ff), u(d)));
        out.push((p("ff1.bias"), (1, c.d_ff), Init::Zeros));
        out.push((p("ff2.weight"), (c.d_ff, d), u(c.d_ff)));
        out.push((p("ff2.bias"), (1, d), Init::Zeros));
    }
    out.push(("final_ln.gain".to_string(), (1, d), Init::Ones));
    out.push(("final_ln.bias".to_string(), (1, d), Init::Zeros));
    out.push(("head.weight".to_string(), (d, c.n_classes), u(d)));
    out.push(("head.bias".to_string(), (1, c.n_classes), Init::Zeros));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub value: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor<F>>,
}

impl<F: Float> ModelParams<F> {
    /// Seeded initialization; values are drawn in `f64` so `f32` and `f64`
    /// models start from the same point up to rounding.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zeros => Array2::zeros(shape),
                    Init::Ones => Array2::ones(shape),
                    Init::Uniform(b) => Array2::from_shape_simple_fn(shape, || F::lit(rng.random_range(-b..b))),
                };
                NamedTensor { name, value }
            })
            .collect();
        let params = Self { config: config.clone(), tensors };
        log::debug!("initialized model with {} parameters", params.parameter_count());
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against the layout implied by the config.
    pub fn check_layout(&self) -> Result<(), ModelError> {
        let expected = layout(&self.config);
        if expected.len() != self.tensors.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} tensors, expected {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.value.dim() {
                return Err(ModelError::ShapeMismatch(format!("{} {:?} vs {name} {shape:?}", t.name, t.value.dim())));
            }
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor { name: t.name.clone(), value: t.value.mapv(|v| G::lit(v.as_f64())) })
                .collect(),
        }
    }
}

/// Stacks samples into a `(B * 50) x 36` matrix.
pub fn batch_matrix<F: Float>(samples: &[&Sample<F>]) -> Array2<F> {
    let mut out = Array2::zeros((samples.len() * N_STEPS, N_FEATURES));
    for (b, s) in samples.iter().enumerate() {
        for (t, row) in s.rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[[b * N_STEPS + t, c]] = *v;
            }
        }
    }
    out
}

pub struct ForwardPass {
    pub logits: Var,
    /// Leaf for every parameter tensor, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
}

fn dropout<F: Float, R: Rng + ?Sized>(g: &mut Graph<F>, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate == 0.0 {
        return x;
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_simple_fn(g.value(x).dim(), || if rng.random::<f64>() < rate { F::zero() } else { keep });
    let m = g.leaf(mask);
    g.mul(x, m)
}

/// Records the forward pass of a batch `x` (stacked rows). Dropout is active
/// only when `rng` is given.
pub fn build_forward<F: Float, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    g: &mut Graph<F>,
    x: Array2<F>,
    mut rng: Option<&mut R>,
) -> Result<ForwardPass, ModelError> {
    let c = &params.config;
    if x.ncols() != c.n_features || x.nrows() == 0 || x.nrows() % c.seq_len != 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "input {:?}, expected (B * {}) x {}",
            x.dim(),
            c.seq_len,
            c.n_features
        )));
    }
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.leaf(t.value.clone())).collect();
    let index: std::collections::HashMap<&str, Var> =
        params.tensors.iter().zip(&vars).map(|(t, v)| (t.name.as_str(), *v)).collect();
    let p = |name: &str| index[name];
    let rate = c.dropout;

    let xv = g.leaf(x);
    let h = g.matmul(xv, p("input.weight"));
    let h = g.add_row(h, p("input.bias"));
    let h = g.add_tiled(h, p("position"));
    let mut seq = c.seq_len;
    let mut h = dropout(g, h, rate, rng.as_deref_mut());
    if c.pooling == Pooling::ClsToken {
        h = g.prepend_row(h, p("cls"), seq);
        seq += 1;
    }
    for i in 0..c.n_layers {
        let n = |s: &str| p(&format!("layer{i}.{s}"));
        let a = g.layer_norm(h, n("ln1.gain"), n("ln1.bias"));
        let proj = |m: &str, g: &mut Graph<F>| {
            let y = g.matmul(a, n(&format!("attn.{m}.weight")));
            g.add_row(y, n(&format!("attn.{m}.bias")))
        };
        let q = proj("q", g);
        let k = proj("k", g);
        let v = proj("v", g);
        let att = g.attention(q, k, v, seq, c.n_heads);
        let o = g.matmul(att, n("attn.o.weight"));
        let o = g.add_row(o, n("attn.o.bias"));
        let o = dropout(g, o, rate, rng.as_deref_mut());
        h = g.add(h, o);

        let f = g.layer_norm(h, n("ln2.gain"), n("ln2.bias"));
        let f = g.matmul(f, n("ff1.weight"));
        let f = g.add_row(f, n("ff1.bias"));
        let f = g.gelu(f);
        let f = g.matmul(f, n("ff2.weight"));
        let f = g.add_row(f, n("ff2.bias"));
        let f = dropout(g, f, rate, rng.as_deref_mut());
        h = g.add(h, f);
    }
    let h = g.layer_norm(h, p("final_ln.gain"), p("final_ln.bias"));
    let pooled = match c.pooling {
        Pooling::Mean => g.mean_pool(h, seq),
        Pooling::ClsToken => g.first_row(h, seq),
    };
    let logits = g.matmul(pooled, p("head.weight"));
    let logits = g.add_row(logits, p("head.bias"));
    Ok(ForwardPass { logits, params: vars })
}

/// Eval-mode logits, `B x 3`.
pub fn logits<F: Float>(params: &ModelParams<F>, x: Array2<F>) -> Result<Array2<F>, ModelError> {
    let mut g = Graph::new();
    let fp = build_forward::<F, ChaCha8Rng>(params, &mut g, x, None)?;
    Ok(g.value(fp.logits).clone())
}

/// Mean cross-entropy and its gradient for every parameter tensor. Dropout
/// is applied when `rng` is given.
pub fn loss_and_grads<F: Float, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    x: Array2<F>,
    labels: &[usize],
    rng: Option<&mut R>,
) -> Result<(F, Vec<Array2<F>>), ModelError> {
    if labels.iter().any(|&y| y >= params.config.n_classes) {
        return Err(ModelError::ShapeMismatch("label out of range".into()));
    }
    if x.nrows() != labels.len() * params.config.seq_len {
        return Err(ModelError::ShapeMismatch(format!("{} rows for {} labels", x.nrows(), labels.len())));
    }
    let mut g = Graph::new();
    let fp = build_forward(params, &mut g, x, rng)?;
    let loss = g.cross_entropy(fp.logits, labels);
    let grads = g.backward(loss);
    let out = fp
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(v, t)| grads[v.index()].clone().unwrap_or_else(|| Array2::zeros(t.value.dim())))
        .collect();
    Ok((g.value(loss)[[0, 0]], out))
}

/// Softmax of a logit row and its argmax; ties go to the lowest index.
pub fn predict_row<F: Float>(logits: &[F]) -> (usize, Vec<F>) {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    let max = logits[best];
    let exps: Vec<F> = logits.iter().map(|v| (*v - max).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    (best, exps.into_iter().map(|e| e / sum).collect())
}

/// Class and probabilities for one sample.
pub fn predict<F: Float>(params: &ModelParams<F>, sample: &Sample<F>) -> Result<(usize, Vec<F>), ModelError> {
    let l = logits(params, batch_matrix(&[sample]))?;
    Ok(predict_row(l.row(0).as_slice().expect("contiguous logits")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcpred_core::features::Provenance;
    use lcpred_core::segment::Label;

    fn tiny(pooling: Pooling) -> ModelConfig {
        ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, dropout: 0.0, pooling, seed: 5, ..Default::default() }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| Sample {
                rows: (0..N_STEPS).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
                label: Label::from_index(k % 3).unwrap(),
                dataset_tag: "t".into(),
                provenance: Provenance { track_id: k as u32, start_frame: 0, end_frame: 49 },
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 30, n_heads: 4, ..Default::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().head_width(), 16);
        assert!(ModelConfig { n_classes: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        let b = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        a.check_layout().unwrap();
        let c = ModelParams::<f64>::init(&ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.get("layer0.ln1.gain").unwrap().sum(), 64.0);
    }

    #[test]
    fn zero_input_gives_finite_distribution() {
        for pooling in [Pooling::Mean, Pooling::ClsToken] {
            let p = ModelParams::<f64>::init(&tiny(pooling)).unwrap();
            let l = logits(&p, Array2::zeros((N_STEPS, N_FEATURES))).unwrap();
            assert!(l.iter().all(|v| v.is_finite()));
            let (_, probs) = predict_row(l.row(0).as_slice().unwrap());
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let p = ModelParams::<f64>::init(&tiny(Pooling::Mean)).unwrap();
        let s = samples(3, 1);
        let fwd = logits(&p, batch_matrix(&[&s[0], &s[1], &s[2]])).unwrap();
        let rev = logits(&p, batch_matrix(&[&s[2], &s[0], &s[1]])).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..3 {
                assert!((fwd[[i, c]] - rev[[j, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = ModelParams::<f64>::init(&tiny(Pooling::Mean)).unwrap();
        assert!(matches!(logits(&p, Array2::zeros((49, N_FEATURES))), Err(ModelError::ShapeMismatch(_))));
        assert!(matches!(logits(&p, Array2::zeros((50, 35))), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn tie_rule_and_shift_invariance() {
        assert_eq!(predict_row(&[2.0, 2.0, -1.0]).0, 0);
        let (c1, p1) = predict_row(&[0.3f64, 1.2, -0.4]);
        let (c2, p2) = predict_row(&[10.3, 11.2, 9.6]);
        assert_eq!(c1, c2);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_gradients_unchanged() {
        let p = ModelParams::<f64>::init(&tiny(Pooling::Mean)).unwrap();
        let s = samples(2, 3);
        let labels = [s[0].label.index(), s[1].label.index()];
        let (l1, g1) = loss_and_grads::<f64, ChaCha8Rng>(&p, batch_matrix(&[&s[0], &s[1]]), &labels, None).unwrap();
        let doubled = [labels[0], labels[1], labels[0], labels[1]];
        let (l2, g2) =
            loss_and_grads::<f64, ChaCha8Rng>(&p, batch_matrix(&[&s[0], &s[1], &s[0], &s[1]]), &doubled, None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
