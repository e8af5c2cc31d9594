use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{Init, ParamInfo, ParamVector};

/// Heavy-tailed gradient coordinates otherwise destabilize training.
pub const INPUT_CLIP: f64 = 5.0;

pub const DEFAULT_HIDDEN: [usize; 2] = [768, 512];
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// What the two output heads predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Per-timestep quantiles shared by the whole batch.
    Quantile,
    /// The batch itself, sample by sample.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvNetSpec {
    pub kind: NetKind,
    /// Gradient length `m`.
    pub input_dim: usize,
    pub obs_len: usize,
    pub horizon: usize,
    /// Batch size of the captures the net will invert.
    pub target_batch_size: usize,
    /// Quantile levels (only used by [`NetKind::Quantile`]).
    pub levels: Vec<f64>,
    /// Widths of the residual blocks in each module.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    /// Gradient samples per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradient samples generated per epoch; `None` means one per aux window.
    pub samples_per_epoch: Option<usize>,
}

impl InvNetSpec {
    pub fn quantile(input_dim: usize, obs_len: usize, horizon: usize, b: usize, levels: Vec<f64>) -> Self {
        InvNetSpec {
            kind: NetKind::Quantile,
            input_dim,
            obs_len,
            horizon,
            target_batch_size: b,
            levels,
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: 0.1,
            epochs: 75,
            batch_size: 32,
            learning_rate: 1e-3,
            samples_per_epoch: None,
        }
    }

    pub fn direct(input_dim: usize, obs_len: usize, horizon: usize, b: usize) -> Self {
        InvNetSpec {
            kind: NetKind::Direct,
            levels: Vec::new(),
            epochs: 250,
            ..Self::quantile(input_dim, obs_len, horizon, b, Vec::new())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == NetKind::Quantile {
            super::validate_levels(&self.levels)?;
        }
        if self.input_dim == 0 || self.obs_len == 0 || self.horizon == 0 || self.target_batch_size == 0 {
            return Err(Error::Config("inversion net dimensions must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("inversion net needs at least one non-empty block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("invalid inversion net training settings".into()));
        }
        Ok(())
    }

    /// Output widths of the observation and target modules.
    pub fn output_dims(&self) -> (usize, usize) {
        match self.kind {
            NetKind::Quantile => {
                let q = self.levels.len();
                (self.obs_len * q, self.horizon * q)
            }
            NetKind::Direct => (
                self.target_batch_size * self.obs_len,
                self.target_batch_size * self.horizon,
            ),
        }
    }

    pub(crate) fn layout(&self) -> Vec<ParamInfo> {
        let (out_obs, out_tar) = self.output_dims();
        let mut layout = Vec::new();
        for (module, out) in [("obs", out_obs), ("tar", out_tar)] {
            let mut width = self.input_dim;
            for (i, &h) in self.hidden.iter().enumerate() {
                let p = format!("{module}.block{i}");
                let bound = 1.0 / (width as f64).sqrt();
                layout.push(ParamInfo::new(format!("{p}.weight"), vec![width, h], Init::Uniform { bound }));
                layout.push(ParamInfo::new(format!("{p}.bias"), vec![h], Init::Zeros));
                layout.push(ParamInfo::new(format!("{p}.bn_gamma"), vec![h], Init::Ones));
                layout.push(ParamInfo::new(format!("{p}.bn_beta"), vec![h], Init::Zeros));
                if width != h {
                    layout.push(ParamInfo::new(format!("{p}.adapt"), vec![width, h], Init::Uniform { bound }));
                }
                width = h;
            }
            let bound = 1.0 / (width as f64).sqrt();
            layout.push(ParamInfo::new(format!("{module}.head.weight"), vec![width, out], Init::Uniform { bound }));
            layout.push(ParamInfo::new(format!("{module}.head.bias"), vec![out], Init::Zeros));
        }
        layout
    }
}

/// Batch-norm running statistics for one block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Standardization constants applied to every input gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standardized values are clamped to `[-clip, clip]`.
    pub clip: f64,
}

impl InputScaler {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let m = samples.first().map(Vec::len).ok_or_else(|| Error::Data("no gradient samples".into()))?;
        let mut mean = vec![0.0; m];
        for s in samples {
            for (a, v) in mean.iter_mut().zip(s) {
                *a += v / n as f64;
            }
        }
        let mut std = vec![0.0; m];
        for s in samples {
            for ((a, v), mu) in std.iter_mut().zip(s).zip(&mean) {
                *a += (v - mu).powi(2) / n as f64;
            }
        }
        // Constant coordinates pass through centered but unscaled.
        std.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
        Ok(InputScaler { mean, std, clip: INPUT_CLIP })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = self.clip;
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| ((v - m) / s).clamp(-c, c)).collect()
    }
}

/// Two residual MLP modules reading a standardized flat gradient.
#[derive(Clone, Debug)]
pub struct InvNet {
    pub spec: InvNetSpec,
    pub(crate) layout: Vec<ParamInfo>,
    pub params: ParamVector,
    pub(crate) running: Vec<RunningStats>,
    pub scaler: InputScaler,
}

pub(crate) struct ForwardOut {
    pub obs: Var,
    pub tar: Var,
    /// Batch statistics per block, for updating the running estimates.
    pub batch_stats: Vec<RunningStats>,
}

impl InvNet {
    pub fn new(spec: InvNetSpec, scaler: InputScaler, seed: u64) -> Result<Self> {
        spec.validate()?;
        if scaler.mean.len() != spec.input_dim {
            return Err(Error::CaptureMismatch(format!(
                "scaler has {} coordinates, net expects {}",
                scaler.mean.len(),
                spec.input_dim
            )));
        }
        let layout = spec.layout();
        let params = ParamVector::init(&layout, seed);
        let running = (0..2)
            .flat_map(|_| spec.hidden.iter())
            .map(|&h| RunningStats {
                mean: vec![0.0; h],
                var: vec![1.0; h],
            })
            .collect();
        Ok(InvNet {
            spec,
            layout,
            params,
            running,
            scaler,
        })
    }

    /// Runs both modules on `x` of shape `(N, m)`.
    ///
    /// In training mode batch statistics normalize each block and dropout
    /// masks are drawn from `rng`; otherwise running statistics are used.
    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], x: Var, train: Option<&mut ChaCha8Rng>) -> Result<ForwardOut> {
        let n = g.shape(x)[0];
        let mut rng = train;
        let mut idx = 0;
        let mut outs = Vec::with_capacity(2);
        let mut stats = Vec::new();
        let mut block = 0;
        for _ in 0..2 {
            let mut h = x;
            let mut width = self.spec.input_dim;
            for &w in &self.spec.hidden {
                let (wt, b, gamma, beta) = (p[idx], p[idx + 1], p[idx + 2], p[idx + 3]);
                idx += 4;
                let skip = if width != w {
                    let a = p[idx];
                    idx += 1;
                    g.matmul(h, a)?
                } else {
                    h
                };
                let z = g.matmul(h, wt)?;
                let z = g.add(z, b)?;
                let z = match rng.as_deref_mut() {
                    Some(_) if n > 1 => {
                        let mean = g.sum_to(z, &[1, w])?;
                        let mean = g.scale(mean, 1.0 / n as f64)?;
                        let c = g.sub(z, mean)?;
                        let sq = g.square(c)?;
                        let var = g.sum_to(sq, &[1, w])?;
                        let var = g.scale(var, 1.0 / n as f64)?;
                        stats.push(RunningStats {
                            mean: g.value(mean).data().to_vec(),
                            var: g.value(var).data().to_vec(),
                        });
                        let sd = g.shift(var, BN_EPS)?;
                        let sd = g.sqrt(sd)?;
                        g.div(c, sd)?
                    }
                    _ => {
                        let r = &self.running[block];
                        let mean = g.constant(Tensor::new(vec![1, w], r.mean.clone())?);
                        let inv: Vec<f64> = r.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        let inv = g.constant(Tensor::new(vec![1, w], inv)?);
                        let c = g.sub(z, mean)?;
                        g.mul(c, inv)?
                    }
                };
                let z = g.mul(z, gamma)?;
                let z = g.add(z, beta)?;
                let mut z = g.relu(z)?;
                if let Some(r) = rng.as_deref_mut() {
                    if self.spec.dropout > 0.0 {
                        let keep = Bernoulli::new(1.0 - self.spec.dropout).expect("rate in [0, 1)");
                        let scale = 1.0 / (1.0 - self.spec.dropout);
                        let m: Vec<f64> = (0..n * w).map(|_| if keep.sample(r) { scale } else { 0.0 }).collect();
                        let m = g.constant(Tensor::new(vec![n, w], m)?);
                        z = g.mul(z, m)?;
                    }
                }
                h = g.add(z, skip)?;
                width = w;
                block += 1;
            }
            let y = g.matmul(h, p[idx])?;
            let y = g.add(y, p[idx + 1])?;
            idx += 2;
            outs.push(y);
        }
        Ok(ForwardOut {
            obs: outs[0],
            tar: outs[1],
            batch_stats: stats,
        })
    }

    pub(crate) fn update_running(&mut self, stats: &[RunningStats]) {
        if stats.len() != self.running.len() {
            return;
        }
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
            }
        }
    }

    /// Inference on raw (unstandardized) gradients; returns flat obs/tar outputs.
    pub fn predict_raw(&self, grads: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let m = self.spec.input_dim;
        if let Some(bad) = grads.iter().find(|v| v.len() != m) {
            return Err(Error::CaptureMismatch(format!(
                "gradient has {} entries, net expects {m}",
                bad.len()
            )));
        }
        let n = grads.len();
        let flat: Vec<f64> = grads.iter().flat_map(|v| self.scaler.apply(v)).collect();
        let mut g = Graph::new();
        let p = self.params.constants(&mut g);
        let x = g.constant(Tensor::new(vec![n, m], flat)?);
        let out = self.forward(&mut g, &p, x, None)?;
        let split = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let w = t.shape()[1];
            t.data().chunks(w).map(<[f64]>::to_vec).collect()
        };
        Ok((split(out.obs), split(out.tar)))
    }

    pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
