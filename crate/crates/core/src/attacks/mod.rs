//! Optimization-based reconstruction of a client batch from its gradient.
//!
//! Each step builds a fresh graph: the dummy batch goes through the model,
//! the parameter gradient of its MSE is taken *as graph nodes*, compared to
//! the captured gradient, and the total loss is differentiated back to the
//! dummy batch (and, for dropout inversion, to continuous mask variables).

mod objective;
mod oneshot;
mod optim;

use std::cell::Cell;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use objective::{gradient_distance, periodicity, quantile_violation, total_variation, trend, Distance};
pub use oneshot::{one_shot_targets, rank1_residual, recover_from_head, OneShot, PIVOT_EPS};
pub use optim::{cosine_lr, Adam, Lbfgs, LbfgsStep};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::federation::GradientCapture;
use crate::inversion::{Part, QuantileBounds};
use crate::io;
use crate::models::{mse_loss, Architecture, Checkpoint, Model, ParamVector};

pub const DEFAULT_STEPS: usize = 5000;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_LR_MIN: f64 = 0.001;
const LBFGS_HISTORY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    DlgLbfgs,
    DlgAdam,
    Invg,
    Dia,
    Lti,
    TsInverse,
    TsInverseOneshot,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 7] = [
        AttackMethod::DlgLbfgs,
        AttackMethod::DlgAdam,
        AttackMethod::Invg,
        AttackMethod::Dia,
        AttackMethod::Lti,
        AttackMethod::TsInverse,
        AttackMethod::TsInverseOneshot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::DlgLbfgs => "dlg-lbfgs",
            AttackMethod::DlgAdam => "dlg-adam",
            AttackMethod::Invg => "invg",
            AttackMethod::Dia => "dia",
            AttackMethod::Lti => "lti",
            AttackMethod::TsInverse => "ts-inverse",
            AttackMethod::TsInverseOneshot => "ts-inverse-oneshot",
        }
    }

    /// Whether the method runs the gradient-matching loop.
    pub fn is_optimization(self) -> bool {
        self != AttackMethod::Lti
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack method '{s}'")))
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Lbfgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DummyInit {
    Uniform01,
    HalfConstant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub distance: Distance,
    pub lambda_tv_obs: f64,
    pub lambda_tv_tar: f64,
    pub lambda_p: f64,
    pub period: usize,
    pub lambda_t: f64,
    pub lambda_q_obs: f64,
    pub lambda_q_tar: f64,
    pub bounds: Option<QuantileBounds>,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub init: DummyInit,
    pub clamp01: bool,
    pub seed: u64,
    pub one_shot_targets: bool,
    pub dia_masks: bool,
}

impl AttackConfig {
    /// Defaults for a named method against `arch`.
    pub fn preset(method: AttackMethod, arch: Architecture) -> Result<Self> {
        let mut c = AttackConfig {
            method,
            distance: Distance::L2,
            lambda_tv_obs: 0.0,
            lambda_tv_tar: 0.0,
            lambda_p: 0.0,
            period: 1,
            lambda_t: 0.0,
            lambda_q_obs: 0.0,
            lambda_q_tar: 0.0,
            bounds: None,
            steps: DEFAULT_STEPS,
            optimizer: Optimizer::Adam,
            learning_rate: DEFAULT_LR,
            lr_min: DEFAULT_LR_MIN,
            init: DummyInit::Uniform01,
            clamp01: false,
            seed: 0,
            one_shot_targets: false,
            dia_masks: false,
        };
        match method {
            AttackMethod::DlgLbfgs => {
                c.optimizer = Optimizer::Lbfgs;
                c.learning_rate = 1.0;
            }
            AttackMethod::DlgAdam => {}
            AttackMethod::Invg => {
                c.distance = Distance::CosineTv;
                c.lambda_tv_obs = 1e-4;
                c.lambda_tv_tar = 1e-4;
                c.clamp01 = true;
            }
            AttackMethod::Dia => {
                c.distance = Distance::Cosine;
                c.clamp01 = true;
                c.dia_masks = arch.has_dropout();
            }
            AttackMethod::Lti => {
                return Err(Error::Config(
                    "lti is a learned attack and has no optimization config".into(),
                ))
            }
            AttackMethod::TsInverse | AttackMethod::TsInverseOneshot => {
                c.distance = Distance::L1;
                c.clamp01 = true;
                c.one_shot_targets = method == AttackMethod::TsInverseOneshot;
                c.dia_masks = arch.has_dropout();
            }
        }
        Ok(c)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        let lambdas = [
            self.lambda_tv_obs,
            self.lambda_tv_tar,
            self.lambda_p,
            self.lambda_t,
            self.lambda_q_obs,
            self.lambda_q_tar,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("regularization weights must be finite and >= 0".into()));
        }
        let spec = model.spec();
        let t = spec.obs_len + spec.horizon;
        if self.period == 0 || (self.lambda_p > 0.0 && self.period >= t) {
            return Err(Error::Config(format!("period {} must be in 1..{t}", self.period)));
        }
        let wants_bounds = self.lambda_q_obs > 0.0 || self.lambda_q_tar > 0.0;
        match (&self.bounds, wants_bounds) {
            (None, true) => return Err(Error::Config("quantile weights need bounds".into())),
            (Some(_), false) => {
                return Err(Error::Config("bounds given but both quantile weights are 0".into()))
            }
            (Some(b), true) => {
                if b.len(Part::Obs) != spec.obs_len || b.len(Part::Tar) != spec.horizon {
                    return Err(Error::Config("bounds length differs from H/F".into()));
                }
            }
            (None, false) => {}
        }
        if self.dia_masks && !spec.architecture.has_dropout() {
            return Err(Error::Config(format!(
                "dropout inversion requested but {} has no dropout",
                spec.architecture
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Test and evaluation hooks that the attacker would not normally have.
#[derive(Clone, Debug, Default)]
pub struct AttackSetup {
    /// Start from this `(obs, tar)` instead of the configured init.
    pub init: Option<(Tensor, Tensor)>,
    /// Use these dropout masks, frozen, instead of all-ones or DIA.
    pub fixed_masks: Option<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub config: Option<AttackConfig>,
    pub method: AttackMethod,
    pub batch_size: usize,
    pub obs_len: usize,
    pub horizon: usize,
    #[serde(skip)]
    pub recon_obs: Tensor,
    #[serde(skip)]
    pub recon_tar: Tensor,
    pub loss_trace: Vec<f64>,
    pub distance_trace: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
    pub wall_time_s: f64,
    /// Step at which L-BFGS gave up and Adam took over.
    pub fallback_step: Option<usize>,
    pub one_shot_used: bool,
    pub aborted: Option<String>,
    /// Path of the capture this result inverts, for evaluation tooling.
    pub capture: Option<String>,
}

impl AttackResult {
    /// Manifest at `path` (JSON) and reconstructions at `path.recon`.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)?;
        let mut flat = self.recon_obs.data().to_vec();
        flat.extend_from_slice(self.recon_tar.data());
        io::write_f64s(&io::sidecar(path, ".recon"), &flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r: AttackResult = io::read_json(path)?;
        let flat = io::read_f64s(&io::sidecar(path, ".recon"))?;
        let (b, h, f) = (r.batch_size, r.obs_len, r.horizon);
        if flat.len() != b * (h + f) {
            return Err(Error::Data(format!("{}: reconstruction size mismatch", path.display())));
        }
        r.recon_obs = Tensor::new(vec![b, h, 1], flat[..b * h].to_vec())?;
        r.recon_tar = Tensor::new(vec![b, f, 1], flat[b * h..].to_vec())?;
        Ok(r)
    }
}

enum Masks {
    None,
    Fixed(Vec<Tensor>),
    Optimize { shapes: Vec<Vec<usize>>, scale: f64 },
}

struct Problem<'a> {
    model: &'a Model,
    params: &'a ParamVector,
    target: Vec<Tensor>,
    cfg: &'a AttackConfig,
    batch: usize,
    fixed_tar: Option<Tensor>,
    masks: Masks,
}

struct Evaluation {
    total: f64,
    distance: f64,
    grad: Vec<f64>,
}

impl Problem<'_> {
    fn obs_len(&self) -> usize {
        self.batch * self.model.spec().obs_len
    }

    fn tar_len(&self) -> usize {
        if self.fixed_tar.is_some() {
            0
        } else {
            self.batch * self.model.spec().horizon
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let spec = self.model.spec();
        let (b, h, f) = (self.batch, spec.obs_len, spec.horizon);
        let mut g = Graph::new();
        let params = self.params.leaves(&mut g);
        let (no, nt) = (self.obs_len(), self.tar_len());
        let obs = g.leaf(Tensor::new(vec![b, h, 1], x[..no].to_vec())?);
        let mut wrt = vec![obs];
        let tar = match &self.fixed_tar {
            Some(t) => g.constant(t.clone()),
            None => {
                let t = g.leaf(Tensor::new(vec![b, f, 1], x[no..no + nt].to_vec())?);
                wrt.push(t);
                t
            }
        };
        let masks: Option<Vec<Var>> = match &self.masks {
            Masks::None => None,
            Masks::Fixed(ms) => Some(ms.iter().map(|m| g.constant(m.clone())).collect()),
            Masks::Optimize { shapes, scale } => {
                let mut off = no + nt;
                let mut eff = Vec::with_capacity(shapes.len());
                for s in shapes {
                    let n: usize = s.iter().product();
                    let v = g.leaf(Tensor::new(s.clone(), x[off..off + n].to_vec())?);
                    off += n;
                    wrt.push(v);
                    let c = g.clamp(v, 0.0, 1.0)?;
                    eff.push(g.scale(c, *scale)?);
                }
                Some(eff)
            }
        };
        let pred = self.model.forward(&mut g, &params, obs, masks.as_deref())?;
        let loss = mse_loss(&mut g, pred, tar)?;
        let dummy = g.grad(loss, &params)?;
        let dist = gradient_distance(&mut g, self.cfg.distance, &dummy, &self.target)?;
        let total = self.regularize(&mut g, dist, obs, tar)?;
        let grads = g.grad(total, &wrt)?;
        let mut grad = Vec::with_capacity(x.len());
        for v in grads {
            grad.extend_from_slice(g.value(v).data());
        }
        Ok(Evaluation {
            total: g.value(total).item(),
            distance: g.value(dist).item(),
            grad,
        })
    }

    /// Adds every weighted prior whose weight is nonzero.
    fn regularize(&self, g: &mut Graph, dist: Var, obs: Var, tar: Var) -> Result<Var> {
        let c = self.cfg;
        let mut total = dist;
        let mut add = |g: &mut Graph, lambda: f64, term: Var| -> Result<()> {
            let w = g.scale(term, lambda)?;
            total = g.add(total, w)?;
            Ok(())
        };
        if c.lambda_tv_obs > 0.0 {
            let r = total_variation(g, obs)?;
            add(g, c.lambda_tv_obs, r)?;
        }
        if c.lambda_tv_tar > 0.0 {
            let r = total_variation(g, tar)?;
            add(g, c.lambda_tv_tar, r)?;
        }
        if c.lambda_p > 0.0 || c.lambda_t > 0.0 {
            let joined = g.concat(&[obs, tar], 1)?;
            if c.lambda_p > 0.0 {
                let r = periodicity(g, joined, c.period)?;
                add(g, c.lambda_p, r)?;
            }
            if c.lambda_t > 0.0 {
                let r = trend(g, joined)?;
                add(g, c.lambda_t, r)?;
            }
        }
        if let Some(bounds) = &c.bounds {
            if c.lambda_q_obs > 0.0 {
                let r = quantile_violation(g, obs, &bounds.pairs(Part::Obs))?;
                add(g, c.lambda_q_obs, r)?;
            }
            if c.lambda_q_tar > 0.0 {
                let r = quantile_violation(g, tar, &bounds.pairs(Part::Tar))?;
                add(g, c.lambda_q_tar, r)?;
            }
        }
        Ok(total)
    }

    fn clamp(&self, x: &mut [f64]) {
        if self.cfg.clamp01 {
            let n = self.obs_len() + self.tar_len();
            x[..n].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
}

pub fn run_attack(capture: &GradientCapture, ckpt: &Checkpoint, config: &AttackConfig) -> Result<AttackResult> {
    run_attack_with(capture, ckpt, config, &AttackSetup::default())
}

pub fn run_attack_with(
    capture: &GradientCapture,
    ckpt: &Checkpoint,
    config: &AttackConfig,
    setup: &AttackSetup,
) -> Result<AttackResult> {
    let start = Instant::now();
    let model = &ckpt.model;
    config.validate(model)?;
    if !config.method.is_optimization() {
        return Err(Error::Config("lti has no optimization loop".into()));
    }
    capture.check_model(ckpt)?;
    let spec = model.spec();
    let (b, h, f) = (capture.batch_size, spec.obs_len, spec.horizon);

    let mut one_shot_used = false;
    let fixed_tar = if config.one_shot_targets {
        // Degenerate captures fall back to optimizing the targets.
        match one_shot_targets(capture, ckpt) {
            Ok(r) => {
                one_shot_used = true;
                Some(r.targets)
            }
            Err(Error::OneShotDegenerate(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let masks = match (&setup.fixed_masks, config.dia_masks) {
        (Some(ms), _) => {
            let shapes = model.mask_shapes(b);
            if ms.len() != shapes.len() || ms.iter().zip(&shapes).any(|(m, s)| m.shape() != &s[..]) {
                return Err(Error::Config("fixed masks do not match the model".into()));
            }
            Masks::Fixed(ms.clone())
        }
        (None, true) => Masks::Optimize {
            shapes: model.mask_shapes(b),
            scale: 1.0 / (1.0 - spec.dropout_rate),
        },
        (None, false) if spec.architecture.has_dropout() => {
            Masks::Fixed(model.mask_shapes(b).iter().map(|s| Tensor::ones(s)).collect())
        }
        (None, false) => Masks::None,
    };
    let problem = Problem {
        model,
        params: &ckpt.params,
        target: capture.grad_tensors(model)?.tensors().to_vec(),
        cfg: config,
        batch: b,
        fixed_tar,
        masks,
    };

    let mut x = initial_point(&problem, config, setup, b, h, f)?;
    let n_data = problem.obs_len() + problem.tar_len();
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut distance_trace = Vec::with_capacity(config.steps);
    let mut best = (f64::INFINITY, 0usize, x.clone());
    let mut fallback_step = None;
    let mut aborted = None;
    let mut adam = Adam::new(x.len());
    let mut lbfgs = (config.optimizer == Optimizer::Lbfgs).then(|| Lbfgs::new(LBFGS_HISTORY));
    let mut current: Option<Evaluation> = None;

    for step in 0..config.steps {
        let ev = match current.take() {
            Some(ev) => ev,
            None => match problem.evaluate(&x) {
                Ok(ev) if ev.total.is_finite() => ev,
                Ok(_) | Err(Error::NonFinite(_)) if step > 0 => {
                    aborted = Some(format!("non-finite loss at step {step}"));
                    break;
                }
                Ok(_) => {
                    return Err(Error::AttackAborted {
                        step,
                        reason: "non-finite loss".into(),
                    })
                }
                Err(Error::NonFinite(what)) => {
                    return Err(Error::AttackAborted {
                        step,
                        reason: format!("non-finite value in {what}"),
                    })
                }
                Err(e) => return Err(e),
            },
        };
        loss_trace.push(ev.total);
        distance_trace.push(ev.distance);
        if ev.total < best.0 {
            best = (ev.total, step, x.clone());
        }
        if let Some(opt) = lbfgs.as_mut() {
            let last_distance = Cell::new(f64::NAN);
            let eval = |p: &[f64]| {
                problem.evaluate(p).map(|e| {
                    last_distance.set(e.distance);
                    (e.total, e.grad)
                })
            };
            match opt.step(&x, ev.total, &ev.grad, config.learning_rate, eval)? {
                LbfgsStep::Moved { x: xn, f, g } => {
                    // The accepted point was the last one evaluated.
                    x = xn;
                    current = Some(Evaluation {
                        total: f,
                        distance: last_distance.get(),
                        grad: g,
                    });
                }
                LbfgsStep::Converged => {
                    current = Some(ev);
                }
                LbfgsStep::LineSearchFailed => {
                    fallback_step = Some(step);
                    lbfgs = None;
                }
            }
            continue;
        }
        let lr = cosine_lr(config.learning_rate, config.lr_min, step, config.steps);
        adam.step(&mut x, &ev.grad, lr);
        problem.clamp(&mut x);
    }

    let (best_loss, best_step, xb) = best;
    let recon_obs = Tensor::new(vec![b, h, 1], xb[..b * h].to_vec())?;
    let recon_tar = match &problem.fixed_tar {
        Some(t) => t.clone(),
        None => Tensor::new(vec![b, f, 1], xb[b * h..n_data].to_vec())?,
    };
    Ok(AttackResult {
        config: Some(config.clone()),
        method: config.method,
        batch_size: b,
        obs_len: h,
        horizon: f,
        recon_obs,
        recon_tar,
        loss_trace,
        distance_trace,
        best_step,
        best_loss,
        wall_time_s: start.elapsed().as_secs_f64(),
        fallback_step,
        one_shot_used,
        aborted,
        capture: None,
    })
}

fn initial_point(
    problem: &Problem,
    config: &AttackConfig,
    setup: &AttackSetup,
    b: usize,
    h: usize,
    f: usize,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = Vec::new();
    match &setup.init {
        Some((obs, tar)) => {
            if obs.shape() != [b, h, 1] || tar.shape() != [b, f, 1] {
                return Err(Error::Config("initial batch shape differs from the capture".into()));
            }
            x.extend_from_slice(obs.data());
            if problem.fixed_tar.is_none() {
                x.extend_from_slice(tar.data());
            }
        }
        None => {
            let n = problem.obs_len() + problem.tar_len();
            match config.init {
                DummyInit::Uniform01 => x.extend((0..n).map(|_| rng.random::<f64>())),
                DummyInit::HalfConstant => x.resize(n, 0.5),
            }
        }
    }
    if let Masks::Optimize { shapes, .. } = &problem.masks {
        let keep = 1.0 - problem.model.spec().dropout_rate;
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        x.extend(std::iter::repeat_n(keep, n));
    }
    Ok(x)
}
