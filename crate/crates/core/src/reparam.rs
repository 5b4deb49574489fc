//! Structural re-parameterization of parallel convolution branches.
//!
//! A training-time block sums the outputs of a 3×3 convolution, a 1×1
//! convolution and an identity shortcut, each optionally followed by batch
//! normalization. Because every branch is linear up to the activation, the
//! block collapses into one 3×3 convolution: 1×1 kernels are zero-padded to
//! 3×3, the identity becomes a centered unit kernel, batch norm is folded
//! into weights and bias, and the kernels are added position by position.
//!
//! Everything here is stride 1 with same padding.

use ndarray::{Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Dense NCHW feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4(pub Array4<f64>);

/// On-disk tensor layout: dims plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorFile {
    pub fn from_array(a: &Array4<f64>) -> Self {
        TensorFile {
            dims: a.shape().to_vec(),
            values: a.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> Result<Array4<f64>> {
        let dims: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::mismatch("tensor file", "4 dims", self.dims.len()))?;
        let expected: usize = dims.iter().product();
        if expected != self.values.len() {
            return Err(Error::mismatch("tensor file values", expected, self.values.len()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("tensor file contains non-finite values".into()));
        }
        Array4::from_shape_vec(dims, self.values)
            .map_err(|e| Error::Malformed(format!("tensor file: {e}")))
    }
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4(Array4::zeros((n, c, h, w)))
    }

    /// Samples every value from N(0, 1).
    pub fn random_normal<R: Rng>(n: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        Tensor4(Array4::from_shape_simple_fn((n, c, h, w), || {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `out × in × k × k`
    pub weight: Array4<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvSpec {
    pub fn new(weight: Array4<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let c = ConvSpec { weight, bias };
        c.validate()?;
        Ok(c)
    }

    pub fn zeros(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            weight: Array4::zeros((out_channels, in_channels, k, k)),
            bias: None,
        }
    }

    pub fn random<R: Rng>(in_ch: usize, out_ch: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        let weight =
            Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || rng.sample(StandardNormal));
        let bias = bias.then(|| (0..out_ch).map(|_| rng.sample(StandardNormal)).collect());
        ConvSpec { weight, bias }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s[2] != s[3] || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::mismatch("kernel shape", "1x1 or 3x3", format!("{}x{}", s[2], s[3])));
        }
        if let Some(b) = &self.bias {
            if b.len() != s[0] {
                return Err(Error::mismatch("conv bias", s[0], b.len()));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn padding(&self) -> usize {
        self.kernel_size() / 2
    }
}

/// Batch-norm statistics and affine parameters, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnSpec {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

impl BnSpec {
    /// γ = 1, β = 0, μ = 0, σ² = 1 with the given ε.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnSpec {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn random<R: Rng>(channels: usize, rng: &mut R) -> Self {
        BnSpec {
            gamma: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
            mean: (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..channels).map(|_| rng.random_range(0.25..2.0)).collect(),
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [("beta", &self.beta), ("mean", &self.mean), ("var", &self.var)] {
            if v.len() != c {
                return Err(Error::mismatch("batch norm", c, format!("{} {name} values", v.len())));
            }
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Malformed("batch norm variance must be non-negative".into()));
        }
        if !(self.eps > 0.0) {
            // zero eps is tolerated only with strictly positive variance
            if self.var.iter().any(|&v| v <= 0.0) || self.eps < 0.0 {
                return Err(Error::Malformed("batch norm epsilon must be positive".into()));
            }
        }
        Ok(())
    }

    fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / (self.var[c] + self.eps).sqrt()
    }

    /// `γ (x − μ) / √(σ² + ε) + β` per channel.
    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        self.validate()?;
        if x.channels() != self.channels() {
            return Err(Error::mismatch("batch norm input", self.channels(), x.channels()));
        }
        let mut out = x.0.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, beta, g) = (self.mean[c], self.beta[c], self.scale(c));
            plane.mapv_inplace(|v| (v - mu) * g + beta);
        }
        Ok(Tensor4(out))
    }
}

/// Same-padding, stride-1 convolution (cross-correlation) plus bias,
/// computed directly.
pub fn conv2d_direct(x: &Tensor4, c: &ConvSpec) -> Result<Tensor4> {
    c.validate()?;
    let (n, cin, h, w) = x.0.dim();
    if cin != c.in_channels() {
        return Err(Error::mismatch("conv input channels", c.in_channels(), cin));
    }
    let k = c.kernel_size();
    let pad = c.padding();
    let cout = c.out_channels();
    let x = x.0.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let weight = c.weight.as_standard_layout();
    let ws = weight.as_slice().expect("standard layout");
    let plane = h * w;
    let mut out = vec![0.0; n * cout * plane];
    for b in 0..n {
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * plane..][..plane];
            if let Some(bias) = &c.bias {
                dst.fill(bias[o]);
            }
            for i in 0..cin {
                let src = &xs[(b * cin + i) * plane..][..plane];
                for ky in 0..k {
                    // output rows whose source row y + ky - pad is inside
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad).saturating_sub(ky).min(h);
                    for kx in 0..k {
                        let wv = ws[((o * cin + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let x_lo = pad.saturating_sub(kx);
                        let x_hi = (w + pad).saturating_sub(kx).min(w);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let sy = y + ky - pad;
                            let d = &mut dst[y * w + x_lo..y * w + x_hi];
                            let s = &src[sy * w + x_lo + kx - pad..sy * w + x_hi + kx - pad];
                            for (dv, sv) in d.iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Array4::from_shape_vec((n, cout, h, w), out).expect("shape matches buffer");
    Ok(Tensor4(out))
}

/// Places each 1×1 weight at the center of a zero 3×3 kernel.
pub fn pad_1x1_to_3x3(c: &ConvSpec) -> Result<ConvSpec> {
    c.validate()?;
    if c.kernel_size() != 1 {
        return Err(Error::mismatch("kernel padding", "1x1 kernel", format!("{0}x{0}", c.kernel_size())));
    }
    let mut weight = Array4::zeros((c.out_channels(), c.in_channels(), 3, 3));
    for o in 0..c.out_channels() {
        for i in 0..c.in_channels() {
            weight[[o, i, 1, 1]] = c.weight[[o, i, 0, 0]];
        }
    }
    Ok(ConvSpec {
        weight,
        bias: c.bias.clone(),
    })
}

/// A 3×3 kernel that reproduces its input: 1 at the center of each
/// channel's own filter, zero elsewhere, zero bias.
pub fn identity_to_3x3(in_channels: usize, out_channels: usize) -> Result<ConvSpec> {
    if in_channels != out_channels {
        return Err(Error::mismatch("identity branch", in_channels, out_channels));
    }
    let mut weight = Array4::zeros((out_channels, in_channels, 3, 3));
    for c in 0..in_channels {
        weight[[c, c, 1, 1]] = 1.0;
    }
    Ok(ConvSpec {
        weight,
        bias: Some(vec![0.0; out_channels]),
    })
}

/// Absorbs batch norm into the preceding convolution:
/// `w' = w · γ/√(σ²+ε)`, `b' = (b − μ) · γ/√(σ²+ε) + β`.
pub fn fold_bn(c: &ConvSpec, bn: &BnSpec) -> Result<ConvSpec> {
    c.validate()?;
    bn.validate()?;
    if bn.channels() != c.out_channels() {
        return Err(Error::mismatch("batch norm folding", c.out_channels(), bn.channels()));
    }
    let mut weight = c.weight.clone();
    let mut bias = Vec::with_capacity(c.out_channels());
    for (o, mut filter) in weight.axis_iter_mut(Axis(0)).enumerate() {
        let s = bn.scale(o);
        filter.mapv_inplace(|v| v * s);
        let b = c.bias.as_ref().map_or(0.0, |v| v[o]);
        bias.push((b - bn.mean[o]) * s + bn.beta[o]);
    }
    Ok(ConvSpec {
        weight,
        bias: Some(bias),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: ConvSpec,
    pub bn: Option<BnSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdentityBranch {
    pub bn: Option<BnSpec>,
}

/// Training-time multi-branch block: `Σ BN_i(conv_i(x)) [+ BN_id(x)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub branches: Vec<Branch>,
    pub identity: Option<IdentityBranch>,
}

/// The single 3×3 convolution a block collapses into.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv(pub ConvSpec);

impl BranchBlock {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() && self.identity.is_none() {
            return Err(Error::InvalidArgument("block has no branches".into()));
        }
        for b in &self.branches {
            b.conv.validate()?;
            if b.conv.in_channels() != self.in_channels {
                return Err(Error::mismatch("branch input channels", self.in_channels, b.conv.in_channels()));
            }
            if b.conv.out_channels() != self.out_channels {
                return Err(Error::mismatch("branch output channels", self.out_channels, b.conv.out_channels()));
            }
            if let Some(bn) = &b.bn {
                bn.validate()?;
                if bn.channels() != self.out_channels {
                    return Err(Error::mismatch("branch batch norm", self.out_channels, bn.channels()));
                }
            }
        }
        if let Some(id) = &self.identity {
            if self.in_channels != self.out_channels {
                return Err(Error::mismatch("identity branch", self.in_channels, self.out_channels));
            }
            if let Some(bn) = &id.bn {
                bn.validate()?;
                if bn.channels() != self.out_channels {
                    return Err(Error::mismatch("identity batch norm", self.out_channels, bn.channels()));
                }
            }
        }
        Ok(())
    }

    fn branch_count(&self) -> usize {
        self.branches.len() + usize::from(self.identity.is_some())
    }

    /// Multi-branch output computed branch by branch, without fusion.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.validate()?;
        let (n, _, h, w) = x.0.dim();
        let mut acc = Tensor4::zeros(n, self.out_channels, h, w);
        for b in &self.branches {
            let mut y = conv2d_direct(x, &b.conv)?;
            if let Some(bn) = &b.bn {
                y = bn.apply(&y)?;
            }
            acc.0 += &y.0;
        }
        if let Some(id) = &self.identity {
            if x.channels() != self.in_channels {
                return Err(Error::mismatch("block input channels", self.in_channels, x.channels()));
            }
            let y = match &id.bn {
                Some(bn) => bn.apply(x)?,
                None => x.clone(),
            };
            acc.0 += &y.0;
        }
        Ok(acc)
    }

    /// Each branch as an equivalent 3×3 kernel with batch norm folded in.
    pub fn normalized_kernels(&self) -> Result<Vec<ConvSpec>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.branch_count());
        for b in &self.branches {
            let k3 = match b.conv.kernel_size() {
                1 => pad_1x1_to_3x3(&b.conv)?,
                _ => b.conv.clone(),
            };
            out.push(match &b.bn {
                Some(bn) => fold_bn(&k3, bn)?,
                None => k3,
            });
        }
        if let Some(id) = &self.identity {
            let k = identity_to_3x3(self.in_channels, self.out_channels)?;
            out.push(match &id.bn {
                Some(bn) => fold_bn(&k, bn)?,
                None => k,
            });
        }
        Ok(out)
    }

    pub fn fuse(&self) -> Result<FusedConv> {
        let kernels = self.normalized_kernels()?;
        // the identity kernel's zero bias is structural, not a learned one
        let learned_bias = self.branches.iter().any(|b| b.conv.bias.is_some() || b.bn.is_some())
            || self.identity.as_ref().is_some_and(|id| id.bn.is_some());
        let mut fused = fuse_kernels(&kernels)?;
        if !learned_bias {
            fused.0.bias = None;
        }
        Ok(fused)
    }
}

/// Adds 3×3 kernels and biases position by position.
pub fn fuse_kernels(kernels: &[ConvSpec]) -> Result<FusedConv> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let shape = first.weight.shape().to_vec();
    let mut weight = Array4::<f64>::zeros((shape[0], shape[1], shape[2], shape[3]));
    let mut bias: Option<Vec<f64>> = None;
    for k in kernels {
        k.validate()?;
        if k.kernel_size() != 3 {
            return Err(Error::mismatch("fusion kernel", "3x3", format!("{0}x{0}", k.kernel_size())));
        }
        if k.weight.shape() != shape.as_slice() {
            return Err(Error::mismatch("fusion kernel shape", format!("{shape:?}"), format!("{:?}", k.weight.shape())));
        }
        weight += &k.weight;
        if let Some(b) = &k.bias {
            let acc = bias.get_or_insert_with(|| vec![0.0; shape[0]]);
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v;
            }
        }
    }
    Ok(FusedConv(ConvSpec { weight, bias }))
}

pub fn fuse_branches(block: &BranchBlock) -> Result<FusedConv> {
    block.fuse()
}

/// Parameter and FLOP accounting.
///
/// Parameters are weights plus biases plus `γ, β` per batch-norm channel
/// (running statistics are buffers, not parameters). FLOPs count a
/// multiply-accumulate as 2; batch norm costs 2 per output element and
/// summing `B` branch outputs costs `B − 1` per output element.
pub trait Cost {
    fn param_count(&self) -> u64;
    fn flops(&self, h: usize, w: usize) -> u64;
}

impl Cost for ConvSpec {
    fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)) as u64
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel_size() as u64;
        2 * k * k * (self.in_channels() * self.out_channels() * h * w) as u64
    }
}

impl Cost for FusedConv {
    fn param_count(&self) -> u64 {
        self.0.param_count()
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.0.flops(h, w)
    }
}

impl Cost for BranchBlock {
    fn param_count(&self) -> u64 {
        let bn = |b: &Option<BnSpec>| b.as_ref().map_or(0, |bn| 2 * bn.channels() as u64);
        let convs: u64 = self
            .branches
            .iter()
            .map(|b| b.conv.param_count() + bn(&b.bn))
            .sum();
        convs + self.identity.as_ref().map_or(0, |id| bn(&id.bn))
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let plane = (self.out_channels * h * w) as u64;
        let bn = |b: &Option<BnSpec>| if b.is_some() { 2 * plane } else { 0 };
        let convs: u64 = self
            .branches
            .iter()
            .map(|b| b.conv.flops(h, w) + bn(&b.bn))
            .sum();
        let id = self.identity.as_ref().map_or(0, |id| bn(&id.bn));
        convs + id + (self.branch_count().saturating_sub(1) as u64) * plane
    }
}

pub fn count_params(spec: &impl Cost) -> u64 {
    spec.param_count()
}

pub fn count_flops(spec: &impl Cost, h: usize, w: usize) -> u64 {
    spec.flops(h, w)
}

/// Largest absolute difference between the block and its fused form over
/// `trials` inputs of shape `1 × C × h × w` drawn from N(0, 1).
pub fn equivalence_error(
    block: &BranchBlock,
    fused: &FusedConv,
    trials: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor4::random_normal(1, block.in_channels, h, w, &mut rng);
        let reference = block.forward(&x)?;
        let got = conv2d_direct(&x, &fused.0)?;
        worst = worst.max(reference.max_abs_diff(&got));
    }
    Ok(worst)
}

// Block description files.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchDescription {
    pub kernel_size: usize,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub bn: bool,
    /// Explicit weights; drawn from N(0, 1) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_params: Option<BnSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityDescription {
    #[serde(default)]
    pub bn: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_params: Option<BnSpec>,
}

/// JSON description of a [`BranchBlock`]; omitted values are filled from
/// `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDescription {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub branches: Vec<BranchDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityDescription>,
}

impl BlockDescription {
    pub fn materialize(&self) -> Result<BranchBlock> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut branches = Vec::with_capacity(self.branches.len());
        for d in &self.branches {
            let mut conv = ConvSpec::random(cin, cout, d.kernel_size, d.bias, &mut rng);
            if let Some(wf) = &d.weight {
                conv.weight = wf.clone().into_array()?;
            }
            if let Some(b) = &d.bias_values {
                conv.bias = Some(b.clone());
            }
            conv.validate()?;
            let random_bn = BnSpec::random(cout, &mut rng);
            let bn = match (&d.bn_params, d.bn) {
                (Some(p), _) => Some(p.clone()),
                (None, true) => Some(random_bn),
                (None, false) => None,
            };
            branches.push(Branch { conv, bn });
        }
        let identity = self.identity.as_ref().map(|d| {
            let random_bn = BnSpec::random(cout, &mut rng);
            IdentityBranch {
                bn: match (&d.bn_params, d.bn) {
                    (Some(p), _) => Some(p.clone()),
                    (None, true) => Some(random_bn),
                    (None, false) => None,
                },
            }
        });
        let block = BranchBlock {
            in_channels: cin,
            out_channels: cout,
            branches,
            identity,
        };
        block.validate()?;
        Ok(block)
    }
}

/// On-disk form of a fused convolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedFile {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub weight: TensorFile,
    pub bias: Option<Vec<f64>>,
}

impl From<&FusedConv> for FusedFile {
    fn from(f: &FusedConv) -> Self {
        FusedFile {
            in_channels: f.0.in_channels(),
            out_channels: f.0.out_channels(),
            kernel_size: f.0.kernel_size(),
            weight: TensorFile::from_array(&f.0.weight),
            bias: f.0.bias.clone(),
        }
    }
}

impl TryFrom<FusedFile> for FusedConv {
    type Error = Error;

    fn try_from(f: FusedFile) -> Result<Self> {
        let c = ConvSpec::new(f.weight.into_array()?, f.bias)?;
        if c.in_channels() != f.in_channels || c.out_channels() != f.out_channels || c.kernel_size() != f.kernel_size {
            return Err(Error::mismatch("fused file header", format!("{}->{} k{}", f.in_channels, f.out_channels, f.kernel_size), format!("{:?}", c.weight.shape())));
        }
        Ok(FusedConv(c))
    }
}
