//! Forecasting models `f: S_obs -> S_tar` built on the autodiff graph.
//!
//! Every architecture maps an observation batch `(B, H, 1)` to a forecast
//! `(B, F, 1)`. Parameters live outside the model in a [`ParamVector`]; the
//! model only knows the layout and how to wire a forward pass.
//!
//! Parameter layout (flattening order):
//!
//! | arch    | tensors |
//! |---------|---------|
//! | FCN     | `fc1.{weight,bias}`, `fc2.{weight,bias}`, `head.{weight,bias}` |
//! | CNN     | `conv1.{weight,bias}`, `conv2.{weight,bias}`, `head.{weight,bias}` |
//! | TCN     | per level `i`: `level{i}.conv1`, `level{i}.conv2`, optional `level{i}.downsample`; then `head` |
//! | GRU2FCN | `enc.{w_ih,w_hh,b_ih,b_hh}`, `head.{weight,bias}` |
//! | GRU2GRU | `enc.*`, `dec.{w_ih,w_hh,b_ih,b_hh}`, `proj.{weight,bias}` |
//!
//! Fully connected weights are stored `(in, out)` so a layer is `x @ W + b`.
//! Convolution weights are stored `(K * C_in, C_out)` with the kernel tap as
//! the slow index.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use params::{Init, ParamInfo, ParamVector};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const CONV_INIT_STD: f64 = 0.02;
const CNN_KERNEL: usize = 5;
const CNN_CHANNELS: (usize, usize) = (16, 32);
const MAX_TCN_LEVELS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fcn,
    Cnn,
    Tcn,
    Gru2Fcn,
    Gru2Gru,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Fcn,
        Architecture::Cnn,
        Architecture::Tcn,
        Architecture::Gru2Fcn,
        Architecture::Gru2Gru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fcn => "fcn",
            Architecture::Cnn => "cnn",
            Architecture::Tcn => "tcn",
            Architecture::Gru2Fcn => "gru2fcn",
            Architecture::Gru2Gru => "gru2gru",
        }
    }

    pub fn has_dropout(self) -> bool {
        self == Architecture::Tcn
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidSpec(format!("unknown architecture '{s}'")))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Observation length `H`.
    pub obs_len: usize,
    /// Forecast length `F`.
    pub horizon: usize,
    pub features: usize,
    pub hidden: usize,
    pub tcn_kernel: usize,
    pub tcn_dilation_base: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, obs_len: usize, horizon: usize) -> Self {
        ModelSpec {
            architecture,
            obs_len,
            horizon,
            features: 1,
            hidden: 64,
            tcn_kernel: 6,
            tcn_dilation_base: 2,
            dropout_rate: 0.2,
            init_seed: 0,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidSpec("H and F must be at least 1".into()));
        }
        if self.features != 1 {
            return Err(Error::InvalidSpec("only univariate series (d = 1) are supported".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidSpec("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec("dropout rate must lie in [0, 1)".into()));
        }
        if self.architecture == Architecture::Cnn && self.obs_len < 4 {
            return Err(Error::InvalidSpec("CNN needs H >= 4 for two pooling stages".into()));
        }
        if self.architecture == Architecture::Tcn && (self.tcn_kernel < 2 || self.tcn_dilation_base < 1) {
            return Err(Error::InvalidSpec("TCN kernel must be >= 2 and dilation base >= 1".into()));
        }
        Ok(())
    }
}

/// Receptive field of `levels` dilated causal layers: `1 + (k-1) * sum_i base^i`.
pub fn tcn_receptive_field(kernel: usize, base: usize, levels: usize) -> usize {
    let mut sum = 0usize;
    let mut d = 1usize;
    for _ in 0..levels {
        sum += d;
        d *= base;
    }
    1 + (kernel - 1) * sum
}

/// Smallest level count whose receptive field covers `obs_len`.
pub fn tcn_levels(kernel: usize, base: usize, obs_len: usize) -> Result<usize> {
    (1..=MAX_TCN_LEVELS)
        .find(|&n| tcn_receptive_field(kernel, base, n) >= obs_len)
        .ok_or_else(|| {
            Error::InvalidSpec(format!(
                "receptive field cannot cover H = {obs_len} with at most {MAX_TCN_LEVELS} levels"
            ))
        })
}

/// Position of the fully connected output layer inside the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIndex {
    pub weight: usize,
    pub bias: usize,
}

/// Intermediate values of a forward pass.
pub struct ForwardTrace {
    pub output: Var,
    /// Input row(s) of the final fully connected layer, `(B, in)`.
    pub head_input: Option<Var>,
    /// Per-timestep features before the head, `(B, L, C)`; TCN and CNN only.
    pub sequence_features: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layout: Vec<ParamInfo>,
    tcn_levels: usize,
}

impl Model {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden;
        let fc = |name: &str, fan_in: usize, out: usize| {
            [
                ParamInfo::new(
                    format!("{name}.weight"),
                    vec![fan_in, out],
                    Init::Uniform {
                        bound: 1.0 / (fan_in as f64).sqrt(),
                    },
                ),
                ParamInfo::new(format!("{name}.bias"), vec![out], Init::Zeros),
            ]
        };
        let conv = |name: &str, kernel: usize, c_in: usize, c_out: usize| {
            [
                ParamInfo::new(
                    format!("{name}.weight"),
                    vec![kernel * c_in, c_out],
                    Init::Normal { std: CONV_INIT_STD },
                ),
                ParamInfo::new(format!("{name}.bias"), vec![c_out], Init::Zeros),
            ]
        };
        let gru = |name: &str, input: usize| {
            let u = |fan_in: usize| Init::Uniform {
                bound: 1.0 / (fan_in as f64).sqrt(),
            };
            [
                ParamInfo::new(format!("{name}.w_ih"), vec![input, 3 * h], u(input)),
                ParamInfo::new(format!("{name}.w_hh"), vec![h, 3 * h], u(h)),
                ParamInfo::new(format!("{name}.b_ih"), vec![3 * h], Init::Zeros),
                ParamInfo::new(format!("{name}.b_hh"), vec![3 * h], Init::Zeros),
            ]
        };

        let mut layout = Vec::new();
        let mut tcn_levels_count = 0;
        match spec.architecture {
            Architecture::Fcn => {
                layout.extend(fc("fc1", spec.obs_len, h));
                layout.extend(fc("fc2", h, h));
                layout.extend(fc("head", h, spec.horizon));
            }
            Architecture::Cnn => {
                let (c1, c2) = CNN_CHANNELS;
                let pooled = spec.obs_len / 2 / 2;
                layout.extend(conv("conv1", CNN_KERNEL, 1, c1));
                layout.extend(conv("conv2", CNN_KERNEL, c1, c2));
                layout.extend(fc("head", c2 * pooled, spec.horizon));
            }
            Architecture::Tcn => {
                tcn_levels_count = tcn_levels(spec.tcn_kernel, spec.tcn_dilation_base, spec.obs_len)?;
                for level in 0..tcn_levels_count {
                    let c_in = if level == 0 { 1 } else { h };
                    layout.extend(conv(&format!("level{level}.conv1"), spec.tcn_kernel, c_in, h));
                    layout.extend(conv(&format!("level{level}.conv2"), spec.tcn_kernel, h, h));
                    if c_in != h {
                        layout.extend(conv(&format!("level{level}.downsample"), 1, c_in, h));
                    }
                }
                layout.extend(fc("head", h, spec.horizon));
            }
            Architecture::Gru2Fcn => {
                layout.extend(gru("enc", 1));
                layout.extend(fc("head", h, spec.horizon));
            }
            Architecture::Gru2Gru => {
                layout.extend(gru("enc", 1));
                layout.extend(gru("dec", 1));
                layout.extend(fc("proj", h, 1));
            }
        }
        Ok(Model {
            spec,
            layout,
            tcn_levels: tcn_levels_count,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(ParamInfo::numel).sum()
    }

    pub fn tcn_level_count(&self) -> usize {
        self.tcn_levels
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::init(&self.layout, seed)
    }

    /// The final fully connected layer emitting all `F` outputs at once, if
    /// the architecture has one.
    pub fn fc_head(&self) -> Option<HeadIndex> {
        if self.spec.architecture == Architecture::Gru2Gru {
            return None;
        }
        let n = self.layout.len();
        Some(HeadIndex {
            weight: n - 2,
            bias: n - 1,
        })
    }

    /// Shapes of the dropout masks a forward pass over a batch of `batch`
    /// samples expects (empty for dropout-free architectures).
    pub fn mask_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        if !self.spec.architecture.has_dropout() {
            return Vec::new();
        }
        vec![vec![batch, self.spec.obs_len, self.spec.hidden]; 2 * self.tcn_levels]
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], obs: Var, masks: Option<&[Var]>) -> Result<Var> {
        Ok(self.forward_traced(g, params, obs, masks)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        params: &[Var],
        obs: Var,
        masks: Option<&[Var]>,
    ) -> Result<ForwardTrace> {
        if params.len() != self.layout.len() {
            return Err(Error::shape(
                "forward",
                format!("model has {} parameter tensors, got {}", self.layout.len(), params.len()),
            ));
        }
        for (p, info) in params.iter().zip(&self.layout) {
            if g.shape(*p) != info.shape.as_slice() {
                return Err(Error::shape(
                    "forward",
                    format!("{} expects {:?}, got {:?}", info.name, info.shape, g.shape(*p)),
                ));
            }
        }
        let s = g.shape(obs).to_vec();
        if s.len() != 3 || s[1] != self.spec.obs_len || s[2] != self.spec.features {
            return Err(Error::shape(
                "forward",
                format!("observations must be (B, {}, 1), got {s:?}", self.spec.obs_len),
            ));
        }
        let batch = s[0];
        let expected_masks = self.mask_shapes(batch);
        let masks = match (expected_masks.is_empty(), masks) {
            (true, _) => &[][..],
            (false, None) => {
                return Err(Error::Config(format!(
                    "{} forward requires {} dropout masks",
                    self.spec.architecture,
                    expected_masks.len()
                )))
            }
            (false, Some(m)) => {
                if m.len() != expected_masks.len()
                    || m.iter().zip(&expected_masks).any(|(v, sh)| g.shape(*v) != sh.as_slice())
                {
                    return Err(Error::shape("forward", "dropout mask count or shape"));
                }
                m
            }
        };

        let trace = match self.spec.architecture {
            Architecture::Fcn => self.forward_fcn(g, params, obs, batch)?,
            Architecture::Cnn => self.forward_cnn(g, params, obs, batch)?,
            Architecture::Tcn => self.forward_tcn(g, params, obs, masks)?,
            Architecture::Gru2Fcn => self.forward_gru2fcn(g, params, obs, batch)?,
            Architecture::Gru2Gru => self.forward_gru2gru(g, params, obs, batch)?,
        };
        let output = g.reshape(trace.output, &[batch, self.spec.horizon, 1])?;
        Ok(ForwardTrace { output, ..trace })
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn forward_fcn(&self, g: &mut Graph, p: &[Var], obs: Var, batch: usize) -> Result<ForwardTrace> {
        let x = g.reshape(obs, &[batch, self.spec.obs_len])?;
        let h1 = Self::linear(g, x, p[0], p[1])?;
        let h1 = g.sigmoid(h1)?;
        let h2 = Self::linear(g, h1, p[2], p[3])?;
        let h2 = g.sigmoid(h2)?;
        let out = Self::linear(g, h2, p[4], p[5])?;
        Ok(ForwardTrace {
            output: out,
            head_input: Some(h2),
            sequence_features: None,
        })
    }

    fn forward_cnn(&self, g: &mut Graph, p: &[Var], obs: Var, batch: usize) -> Result<ForwardTrace> {
        let pad = (CNN_KERNEL - 1) / 2;
        let y = g.conv1d(obs, p[0], p[1], 1, pad, pad)?;
        let y = g.sigmoid(y)?;
        let y = g.max_pool1d(y, 2)?;
        let y = g.conv1d(y, p[2], p[3], 1, pad, pad)?;
        let y = g.sigmoid(y)?;
        let y = g.max_pool1d(y, 2)?;
        let s = g.shape(y).to_vec();
        let flat = g.reshape(y, &[batch, s[1] * s[2]])?;
        let out = Self::linear(g, flat, p[4], p[5])?;
        Ok(ForwardTrace {
            output: out,
            head_input: Some(flat),
            sequence_features: Some(y),
        })
    }

    fn forward_tcn(&self, g: &mut Graph, p: &[Var], obs: Var, masks: &[Var]) -> Result<ForwardTrace> {
        let hidden = self.spec.hidden;
        let mut x = obs;
        let mut k = 0;
        let mut dilation = 1;
        for level in 0..self.tcn_levels {
            let c_in = if level == 0 { 1 } else { hidden };
            let y = g.conv1d_causal(x, p[k], p[k + 1], dilation)?;
            let y = g.relu(y)?;
            let y = g.mul(y, masks[2 * level])?;
            let y = g.conv1d_causal(y, p[k + 2], p[k + 3], dilation)?;
            let y = g.relu(y)?;
            let y = g.mul(y, masks[2 * level + 1])?;
            k += 4;
            let res = if c_in != hidden {
                let r = g.conv1d(x, p[k], p[k + 1], 1, 0, 0)?;
                k += 2;
                r
            } else {
                x
            };
            let sum = g.add(y, res)?;
            x = g.relu(sum)?;
            dilation *= self.spec.tcn_dilation_base;
        }
        let s = g.shape(x).to_vec();
        let last = g.slice(x, 1, s[1] - 1, s[1])?;
        let last = g.reshape(last, &[s[0], s[2]])?;
        let out = Self::linear(g, last, p[k], p[k + 1])?;
        Ok(ForwardTrace {
            output: out,
            head_input: Some(last),
            sequence_features: Some(x),
        })
    }

    /// One GRU step: reset/update/candidate gates over `(B, in)` and `(B, hidden)`.
    fn gru_cell(g: &mut Graph, p: &[Var], x: Var, h: Var, hidden: usize) -> Result<Var> {
        let gi = Self::linear(g, x, p[0], p[2])?;
        let gh = Self::linear(g, h, p[1], p[3])?;
        let i_r = g.slice(gi, 1, 0, hidden)?;
        let i_z = g.slice(gi, 1, hidden, 2 * hidden)?;
        let i_n = g.slice(gi, 1, 2 * hidden, 3 * hidden)?;
        let h_r = g.slice(gh, 1, 0, hidden)?;
        let h_z = g.slice(gh, 1, hidden, 2 * hidden)?;
        let h_n = g.slice(gh, 1, 2 * hidden, 3 * hidden)?;
        let r = g.add(i_r, h_r)?;
        let r = g.sigmoid(r)?;
        let z = g.add(i_z, h_z)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, h_n)?;
        let n = g.add(i_n, rn)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    fn encode(&self, g: &mut Graph, enc: &[Var], obs: Var, batch: usize) -> Result<(Var, Var)> {
        let hidden = self.spec.hidden;
        let x = g.reshape(obs, &[batch, self.spec.obs_len])?;
        let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
        let mut last = h;
        for t in 0..self.spec.obs_len {
            let xt = g.slice(x, 1, t, t + 1)?;
            h = Self::gru_cell(g, enc, xt, h, hidden)?;
            last = xt;
        }
        Ok((h, last))
    }

    fn forward_gru2fcn(&self, g: &mut Graph, p: &[Var], obs: Var, batch: usize) -> Result<ForwardTrace> {
        let (h, _) = self.encode(g, &p[0..4], obs, batch)?;
        let out = Self::linear(g, h, p[4], p[5])?;
        Ok(ForwardTrace {
            output: out,
            head_input: Some(h),
            sequence_features: None,
        })
    }

    fn forward_gru2gru(&self, g: &mut Graph, p: &[Var], obs: Var, batch: usize) -> Result<ForwardTrace> {
        let hidden = self.spec.hidden;
        let (mut h, mut input) = self.encode(g, &p[0..4], obs, batch)?;
        let mut outputs = Vec::with_capacity(self.spec.horizon);
        for _ in 0..self.spec.horizon {
            h = Self::gru_cell(g, &p[4..8], input, h, hidden)?;
            let y = Self::linear(g, h, p[8], p[9])?;
            outputs.push(y);
            input = y;
        }
        let out = g.concat(&outputs, 1)?;
        Ok(ForwardTrace {
            output: out,
            head_input: None,
            sequence_features: None,
        })
    }
}

/// Mean squared error over all `B * F * d` elements.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}
