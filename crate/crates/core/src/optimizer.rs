//! Lookahead over pluggable inner optimizers, plus two analytic test
//! objectives for benchmarking.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::mismatch("parameter vector", self.len(), other.len()));
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// `θ − lr·g`.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    theta.check_len(grad)?;
    Ok(ParamVector(
        theta.0.iter().zip(&grad.0).map(|(t, g)| t - lr * g).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Moments are sized on the first call.
pub fn adam_step(state: &mut AdamState, theta: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
    theta.check_len(grad)?;
    if state.t == 0 && state.m.is_empty() {
        state.m = vec![0.0; theta.len()];
        state.v = vec![0.0; theta.len()];
    }
    if state.m.len() != theta.len() {
        return Err(Error::mismatch("adam state", state.m.len(), theta.len()));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let g = grad.0[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        out.push(theta.0[i] - lr * m_hat / (v_hat.sqrt() + eps));
    }
    Ok(ParamVector(out))
}

pub trait Optimizer {
    /// Updates `theta` in place from `grad`.
    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        *theta = sgd_step(theta, grad, self.lr)?;
        Ok(())
    }
}

impl Optimizer for AdamState {
    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        *theta = adam_step(self, theta, grad)?;
        Ok(())
    }
}

impl<O: Optimizer + ?Sized> Optimizer for Box<O> {
    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        (**self).step(theta, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookaheadConfig {
    pub k: usize,
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        LookaheadConfig { k: 5, alpha: 0.5 }
    }
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("lookahead k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("lookahead alpha {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Wraps an inner optimizer. The slow weights φ are captured from θ on the
/// first step; every `k` inner steps φ moves toward θ by `α` and θ is reset
/// to φ. Inner state (e.g. Adam moments) carries across syncs.
#[derive(Debug, Clone)]
pub struct Lookahead<O> {
    pub inner: O,
    pub config: LookaheadConfig,
    slow: Option<ParamVector>,
    steps: usize,
}

impl<O: Optimizer> Lookahead<O> {
    pub fn new(inner: O, config: LookaheadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Lookahead {
            inner,
            config,
            slow: None,
            steps: 0,
        })
    }

    pub fn slow_weights(&self) -> Option<&ParamVector> {
        self.slow.as_ref()
    }
}

impl<O: Optimizer> Optimizer for Lookahead<O> {
    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        let slow = self.slow.get_or_insert_with(|| theta.clone());
        slow.check_len(theta)?;
        self.inner.step(theta, grad)?;
        self.steps += 1;
        if self.steps % self.config.k == 0 {
            if self.config.alpha == 1.0 {
                slow.0.clone_from(&theta.0);
            } else {
                for (p, t) in slow.0.iter_mut().zip(&theta.0) {
                    *p += self.config.alpha * (t - *p);
                }
            }
            theta.0.clone_from(&slow.0);
        }
        Ok(())
    }
}

fn check_finite(grad: &ParamVector, step: usize) -> Result<()> {
    if grad.0.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(step))
    }
}

/// Runs `sync_count` Lookahead cycles from `phi0` and returns the slow
/// weights.
pub fn lookahead_run<O, G>(
    phi0: &ParamVector,
    inner: O,
    cfg: LookaheadConfig,
    mut grad_fn: G,
    sync_count: usize,
) -> Result<ParamVector>
where
    O: Optimizer,
    G: FnMut(&ParamVector) -> ParamVector,
{
    let mut la = Lookahead::new(inner, cfg)?;
    let mut theta = phi0.clone();
    for step in 0..sync_count * cfg.k {
        let g = grad_fn(&theta);
        check_finite(&g, step)?;
        la.step(&mut theta, &g)?;
    }
    Ok(la.slow.unwrap_or(theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `Σ xᵢ²`
    Quadratic,
    /// `(1 − x)² + 100 (y − x²)²`
    Rosenbrock,
}

impl Objective {
    pub fn start(&self) -> ParamVector {
        match self {
            Objective::Quadratic => ParamVector(vec![1.0]),
            Objective::Rosenbrock => ParamVector(vec![-1.2, 1.0]),
        }
    }

    pub fn loss(&self, p: &ParamVector) -> f64 {
        match self {
            Objective::Quadratic => p.0.iter().map(|x| x * x).sum(),
            Objective::Rosenbrock => {
                let (x, y) = (p.0[0], p.0[1]);
                (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
            }
        }
    }

    pub fn grad(&self, p: &ParamVector) -> ParamVector {
        match self {
            Objective::Quadratic => ParamVector(p.0.iter().map(|x| 2.0 * x).collect()),
            Objective::Rosenbrock => {
                let (x, y) = (p.0[0], p.0[1]);
                ParamVector(vec![
                    -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
                    200.0 * (y - x * x),
                ])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd { lr: f64 },
    Adam { lr: f64 },
    LookaheadSgd { lr: f64, k: usize, alpha: f64 },
    LookaheadAdam { lr: f64, k: usize, alpha: f64 },
}

impl OptimizerChoice {
    pub fn build(&self) -> Result<Box<dyn Optimizer>> {
        if !(self.lr() > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr())));
        }
        Ok(match *self {
            OptimizerChoice::Sgd { lr } => Box::new(Sgd { lr }),
            OptimizerChoice::Adam { lr } => Box::new(AdamState::new(AdamConfig::new(lr))),
            OptimizerChoice::LookaheadSgd { lr, k, alpha } => {
                Box::new(Lookahead::new(Sgd { lr }, LookaheadConfig { k, alpha })?)
            }
            OptimizerChoice::LookaheadAdam { lr, k, alpha } => Box::new(Lookahead::new(
                AdamState::new(AdamConfig::new(lr)),
                LookaheadConfig { k, alpha },
            )?),
        })
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerChoice::Sgd { lr }
            | OptimizerChoice::Adam { lr }
            | OptimizerChoice::LookaheadSgd { lr, .. }
            | OptimizerChoice::LookaheadAdam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub objective: Objective,
    pub optimizer: OptimizerChoice,
    pub steps: usize,
    pub seed: u64,
    /// Uniform perturbation of the start point, `±jitter` per coordinate.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    /// Loss at step 0 (the start) and after every step.
    pub losses: Vec<f64>,
    pub final_params: ParamVector,
    pub final_loss: f64,
    /// Set when a loss or gradient became non-finite; the run stops there.
    pub diverged: bool,
}

pub fn benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let mut opt = cfg.optimizer.build()?;
    let mut theta = cfg.objective.start();
    if cfg.jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in &mut theta.0 {
            *v += rng.random_range(-cfg.jitter..=cfg.jitter);
        }
    }
    let mut losses = vec![cfg.objective.loss(&theta)];
    let mut diverged = false;
    for _ in 0..cfg.steps {
        let g = cfg.objective.grad(&theta);
        if g.0.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        opt.step(&mut theta, &g)?;
        let loss = cfg.objective.loss(&theta);
        losses.push(loss);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
    }
    Ok(BenchmarkResult {
        final_loss: *losses.last().expect("start loss is always recorded"),
        losses,
        final_params: theta,
        diverged,
    })
}

/// Writes `# <config json>` followed by a `step,loss` table.
pub fn write_benchmark_csv<W: Write>(mut w: W, cfg: &BenchmarkConfig, result: &BenchmarkResult) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(cfg)?)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["step", "loss"])?;
    for (i, l) in result.losses.iter().enumerate() {
        csv.write_record([i.to_string(), l.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}
