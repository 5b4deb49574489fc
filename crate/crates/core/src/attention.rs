//! Scaled dot-product attention and a pre-norm transformer layer.
//!
//! Tokens are rows: an `n × d` matrix holds `n` tokens of width `d`, and
//! scores are `Q Kᵀ / √d`.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Array2<f64>);

impl TokenMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::mismatch("token matrix", "n >= 1 and d >= 1", format!("{n}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("token matrix contains non-finite values".into()));
        }
        Ok(TokenMatrix(values))
    }

    pub fn random<R: Rng>(n: usize, d: usize, rng: &mut R) -> Self {
        TokenMatrix(Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal)))
    }

    pub fn tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &TokenMatrix) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Affine map `x W + b` applied to each row; `W` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: None,
        }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            weight: Array2::eye(d),
            bias: None,
        }
    }

    /// Weights from N(0, 1/in), zero bias.
    pub fn random<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Some(Array1::zeros(output)),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weight.nrows() {
            return Err(Error::mismatch("linear input width", self.weight.nrows(), x.ncols()));
        }
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            if b.len() != y.ncols() {
                return Err(Error::mismatch("linear bias", y.ncols(), b.len()));
            }
            y += b;
        }
        Ok(y)
    }
}

/// Query, key and value projections, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl ProjectionSet {
    pub fn identity(d: usize) -> Self {
        ProjectionSet {
            q: Linear::identity(d),
            k: Linear::identity(d),
            v: Linear::identity(d),
        }
    }

    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        ProjectionSet {
            q: Linear::random(d, d, rng),
            k: Linear::random(d, d, rng),
            v: Linear::random(d, d, rng),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        for (name, l) in [("W_Q", &self.q), ("W_K", &self.k), ("W_V", &self.v)] {
            if l.weight.dim() != (d, d) {
                let (r, c) = l.weight.dim();
                return Err(Error::mismatch("projection", format!("{name} {d}x{d}"), format!("{r}x{c}")));
            }
        }
        Ok(())
    }
}

pub fn project(x: &TokenMatrix, p: &ProjectionSet) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    p.validate(x.dim())?;
    Ok((
        TokenMatrix(p.q.apply(&x.0)?),
        TokenMatrix(p.k.apply(&x.0)?),
        TokenMatrix(p.v.apply(&x.0)?),
    ))
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// Row-stochastic `n_Q × n_K` matrix `softmax(Q Kᵀ / √d)`.
pub fn attention_weights(q: &TokenMatrix, k: &TokenMatrix) -> Result<Array2<f64>> {
    if q.dim() != k.dim() {
        return Err(Error::mismatch("attention Q/K width", q.dim(), k.dim()));
    }
    let scale = 1.0 / (q.dim() as f64).sqrt();
    Ok(softmax_rows(q.0.dot(&k.0.t()) * scale))
}

pub fn scaled_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    if k.tokens() != v.tokens() {
        return Err(Error::mismatch("attention K/V tokens", k.tokens(), v.tokens()));
    }
    if v.dim() != q.dim() {
        return Err(Error::mismatch("attention V width", q.dim(), v.dim()));
    }
    let a = attention_weights(q, k)?;
    Ok(TokenMatrix(a.dot(&v.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            eps,
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.gamma.len() || self.beta.len() != self.gamma.len() {
            return Err(Error::mismatch("layer norm width", self.gamma.len(), x.ncols()));
        }
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub heads: usize,
    pub mlp_hidden: usize,
    pub ln_eps: f64,
}

impl LayerConfig {
    pub fn new(heads: usize, mlp_hidden: usize) -> Self {
        LayerConfig {
            heads,
            mlp_hidden,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide model width {d}",
                self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::InvalidArgument("mlp_hidden must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument("layer norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-norm block: `y = x + O(MHA(LN₁ x))`, `out = y + W₂ relu(W₁ LN₂ y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub config: LayerConfig,
    pub proj: ProjectionSet,
    pub out: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerLayer {
    pub fn random<R: Rng>(d: usize, config: LayerConfig, rng: &mut R) -> Result<Self> {
        config.validate(d)?;
        Ok(TransformerLayer {
            config,
            proj: ProjectionSet::random(d, rng),
            out: Linear::random(d, d, rng),
            ln1: LayerNorm::new(d, config.ln_eps),
            ln2: LayerNorm::new(d, config.ln_eps),
            mlp_in: Linear::random(d, config.mlp_hidden, rng),
            mlp_out: Linear::random(config.mlp_hidden, d, rng),
        })
    }

    /// Every projection zero: both sublayers contribute nothing.
    pub fn zeros(d: usize, config: LayerConfig) -> Result<Self> {
        config.validate(d)?;
        Ok(TransformerLayer {
            config,
            proj: ProjectionSet {
                q: Linear::zeros(d, d),
                k: Linear::zeros(d, d),
                v: Linear::zeros(d, d),
            },
            out: Linear::zeros(d, d),
            ln1: LayerNorm::new(d, config.ln_eps),
            ln2: LayerNorm::new(d, config.ln_eps),
            mlp_in: Linear::zeros(d, config.mlp_hidden),
            mlp_out: Linear::zeros(config.mlp_hidden, d),
        })
    }

    fn multi_head(&self, x: &TokenMatrix) -> Result<Array2<f64>> {
        let (q, k, v) = project(x, &self.proj)?;
        let hd = x.dim() / self.config.heads;
        let mut concat = Array2::zeros((x.tokens(), x.dim()));
        for h in 0..self.config.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let head = scaled_attention(
                &TokenMatrix(q.0.slice(cols).to_owned()),
                &TokenMatrix(k.0.slice(cols).to_owned()),
                &TokenMatrix(v.0.slice(cols).to_owned()),
            )?;
            concat.slice_mut(cols).assign(&head.0);
        }
        self.out.apply(&concat)
    }

    pub fn forward(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        self.config.validate(x.dim())?;
        let normed = TokenMatrix(self.ln1.apply(&x.0)?);
        let y = &x.0 + &self.multi_head(&normed)?;
        let hidden = self.mlp_in.apply(&self.ln2.apply(&y)?)?.mapv(|v| v.max(0.0));
        let out = &y + &self.mlp_out.apply(&hidden)?;
        Ok(TokenMatrix(out))
    }
}

pub fn transformer_layer(x: &TokenMatrix, layer: &TransformerLayer) -> Result<TokenMatrix> {
    layer.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tm(a: Array2<f64>) -> TokenMatrix {
        TokenMatrix::new(a).unwrap()
    }

    #[test]
    fn projections() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = TokenMatrix::random(5, 3, &mut r);
        let (q, k, v) = project(&x, &ProjectionSet::identity(3)).unwrap();
        assert!(q == x && k == x && v == x);

        let zero = ProjectionSet {
            q: Linear::zeros(3, 3),
            k: Linear::zeros(3, 3),
            v: Linear::zeros(3, 3),
        };
        let (q, _, _) = project(&x, &zero).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));

        let mut p = ProjectionSet::identity(2);
        p.q.weight = array![[2.0, 0.0], [0.0, 3.0]];
        let (q, _, _) = project(&tm(array![[1.0, 0.0], [0.0, 1.0]]), &p).unwrap();
        assert_eq!(q.values(), &array![[2.0, 0.0], [0.0, 3.0]]);

        assert!(project(&x, &ProjectionSet::identity(4)).is_err());
    }

    #[test]
    fn attention_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let q = TokenMatrix::random(4, 3, &mut r);
        let k = TokenMatrix::random(1, 3, &mut r);
        let v = TokenMatrix::random(1, 3, &mut r);
        let out = scaled_attention(&q, &k, &v).unwrap();
        for row in out.values().rows() {
            assert_eq!(row, v.values().row(0));
        }

        let k_same = tm(Array2::from_shape_fn((3, 3), |(_, j)| j as f64));
        let v3 = TokenMatrix::random(3, 3, &mut r);
        let mean = v3.values().mean_axis(Axis(0)).unwrap();
        let out = scaled_attention(&q, &k_same, &v3).unwrap();
        for row in out.values().rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let e = std::f64::consts::E;
        let out = scaled_attention(
            &tm(array![[1.0], [0.0]]),
            &tm(array![[1.0], [0.0]]),
            &tm(array![[2.0], [4.0]]),
        )
        .unwrap();
        let expected = 2.0 * e / (e + 1.0) + 4.0 / (e + 1.0);
        assert!((out.values()[[0, 0]] - expected).abs() < 1e-12);
        assert!((out.values()[[0, 0]] - 2.5379).abs() < 1e-4);
        assert!((out.values()[[1, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_shape_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let q = TokenMatrix::random(2, 3, &mut r);
        let k = TokenMatrix::random(4, 3, &mut r);
        assert!(scaled_attention(&q, &k, &TokenMatrix::random(3, 3, &mut r)).is_err());
        assert!(scaled_attention(&q, &TokenMatrix::random(4, 2, &mut r), &k).is_err());
        assert!(TokenMatrix::new(Array2::zeros((0, 3))).is_err());
        assert!(TokenMatrix::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let q = tm(array![[100.0], [-100.0]]);
        let k = tm(array![[100.0], [-100.0], [0.0]]);
        let a = attention_weights(&q, &k).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        // appending a constant column c to every key and a column of ones to
        // every query adds c to each logit of a row
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let q = TokenMatrix::random(3, 2, &mut r);
        let k = TokenMatrix::random(5, 2, &mut r);
        let base = attention_weights(&q, &k).unwrap();
        let scale = (3.0f64 / 2.0).sqrt();
        let mut q3 = Array2::ones((3, 3));
        q3.slice_mut(s![.., ..2]).assign(&(q.values() * scale));
        let mut k3 = Array2::from_elem((5, 3), 7.5);
        k3.slice_mut(s![.., ..2]).assign(k.values());
        let shifted = attention_weights(&tm(q3), &tm(k3)).unwrap();
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layer_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = TokenMatrix::random(6, 8, &mut r);
        let layer = TransformerLayer::zeros(8, LayerConfig::new(2, 16)).unwrap();
        assert_eq!(transformer_layer(&x, &layer).unwrap(), x);
    }

    #[test]
    fn layer_shape_and_heads() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = TokenMatrix::random(16, 32, &mut r);
        let layer = TransformerLayer::random(32, LayerConfig::new(DEFAULT_HEADS, 64), &mut r).unwrap();
        let y = transformer_layer(&x, &layer).unwrap();
        assert_eq!((y.tokens(), y.dim()), (16, 32));
        assert!(TransformerLayer::random(32, LayerConfig::new(5, 64), &mut r).is_err());
        assert!(LayerConfig::new(0, 8).validate(8).is_err());
    }

    fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        a.select(Axis(0), perm)
    }

    #[test]
    fn layer_permutation_equivariance() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = TokenMatrix::random(9, 12, &mut r);
            let layer = TransformerLayer::random(12, LayerConfig::new(3, 24), &mut r).unwrap();
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut r);
            let y = transformer_layer(&x, &layer).unwrap();
            let y_perm = transformer_layer(&tm(permute_rows(x.values(), &perm)), &layer).unwrap();
            assert!(y_perm.max_abs_diff(&tm(permute_rows(y.values(), &perm))) <= 1e-9);
        }
    }

    proptest! {
        #[test]
        fn weights_are_row_stochastic(seed in any::<u64>(), nq in 1usize..8, nk in 2usize..8, d in 1usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = attention_weights(&TokenMatrix::random(nq, d, &mut r), &TokenMatrix::random(nk, d, &mut r)).unwrap();
            for row in a.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&w| w > 0.0 && w < 1.0));
            }
        }

        #[test]
        fn joint_kv_permutation_invariance(seed in any::<u64>(), nk in 1usize..8, d in 1usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let q = TokenMatrix::random(3, d, &mut r);
            let k = TokenMatrix::random(nk, d, &mut r);
            let v = TokenMatrix::random(nk, d, &mut r);
            let mut perm: Vec<usize> = (0..nk).collect();
            perm.shuffle(&mut r);
            let a = scaled_attention(&q, &k, &v).unwrap();
            let b = scaled_attention(&q, &tm(permute_rows(k.values(), &perm)), &tm(permute_rows(v.values(), &perm))).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn extreme_logits_stay_finite(x in -1e4f64..1e4, y in -1e4f64..1e4) {
            let a = attention_weights(&tm(array![[1.0], [1.0]]), &tm(array![[x], [y]])).unwrap();
            prop_assert!(a.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn layer_preserves_shape(seed in any::<u64>(), n in 1usize..10, heads in 1usize..4, per_head in 1usize..5) {
            let d = heads * per_head;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let layer = TransformerLayer::random(d, LayerConfig::new(heads, 2 * d), &mut r).unwrap();
            let y = transformer_layer(&TokenMatrix::random(n, d, &mut r), &layer).unwrap();
            prop_assert_eq!((y.tokens(), y.dim()), (n, d));
        }
    }
}
