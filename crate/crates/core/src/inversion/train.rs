use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::net::{InputScaler, InvNet, InvNetSpec, NetKind, RunningStats};
use super::QuantileBounds;
use crate::attacks::{Adam, AttackMethod, AttackResult};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::federation::{capture_round, sample_batch, Defense, GradientCapture};
use crate::io;
use crate::models::{Checkpoint, ParamVector};

/// Mean over elements of `max((tau - 1) d, tau d)` with `d = truth - pred`.
pub fn pinball_loss(truth: &[f64], pred: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("quantile level {tau} outside (0, 1)")));
    }
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::shape("pinball_loss", format!("{} vs {}", truth.len(), pred.len())));
    }
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(s, p)| {
            let d = s - p;
            ((tau - 1.0) * d).max(tau * d)
        })
        .sum();
    Ok(total / truth.len() as f64)
}

/// Provenance stored next to a trained net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub model_ref: String,
    pub defense: Defense,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetSidecar {
    spec: InvNetSpec,
    scaler: InputScaler,
    record: TrainingRecord,
}

/// A trained inversion net plus how it was trained.
#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub net: InvNet,
    pub record: TrainingRecord,
}

struct Sample {
    grad: Vec<f64>,
    obs: Vec<f64>,
    tar: Vec<f64>,
}

fn draw_samples(
    aux: &[SeriesWindow],
    ckpt: &Checkpoint,
    defense: Defense,
    b: usize,
    count: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<Sample>> {
    let mut sampler = rand_chacha::ChaCha8Rng::from_rng(rng);
    (0..count)
        .map(|_| {
            let batch = sample_batch(aux, b, &mut sampler)?;
            let (cap, truth) = capture_round(ckpt, batch, defense, sampler.random())?;
            Ok(Sample {
                grad: cap.grads,
                obs: truth.batch.obs.into_data(),
                tar: truth.batch.tar.into_data(),
            })
        })
        .collect()
}

use rand::SeedableRng;

/// Quantile loss of predictions `(N, T*Q)` against truths `(N, B*T)`.
fn quantile_objective(g: &mut Graph, pred: Var, truth: &Tensor, levels: &[f64], t: usize) -> Result<Var> {
    let n = g.shape(pred)[0];
    let q = levels.len();
    let b = truth.shape()[1] / t;
    let pred = g.reshape(pred, &[n, 1, t, q])?;
    let truth = g.constant(truth.clone().reshape(&[n, b, t, 1])?);
    let tau = g.constant(Tensor::new(vec![1, 1, 1, q], levels.to_vec())?);
    let d = g.sub(truth, pred)?;
    let lin = g.mul(d, tau)?;
    let nd = g.neg(d)?;
    let hinge = g.relu(nd)?;
    let l = g.add(lin, hinge)?;
    // Mean over samples, batch members and timesteps; summed over levels.
    let m = g.mean(l)?;
    g.scale(m, q as f64)
}

fn direct_objective(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    let t = g.constant(truth.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

fn train(
    spec: InvNetSpec,
    aux: &[SeriesWindow],
    ckpt: &Checkpoint,
    defense: Defense,
    seed: u64,
) -> Result<TrainedNet> {
    spec.validate()?;
    if aux.is_empty() {
        return Err(Error::Data("auxiliary set is empty".into()));
    }
    if spec.input_dim != ckpt.model.param_count() {
        return Err(Error::CaptureMismatch(format!(
            "net expects {} gradient entries, model has {}",
            spec.input_dim,
            ckpt.model.param_count()
        )));
    }
    let model_spec = ckpt.model.spec();
    if spec.obs_len != model_spec.obs_len || spec.horizon != model_spec.horizon {
        return Err(Error::Config("net H/F differ from the model".into()));
    }
    let b = spec.target_batch_size;
    let per_epoch = spec.samples_per_epoch.unwrap_or(aux.len()).max(1);
    let mut rng = InvNet::seeded_rng(seed);
    let mut pool = draw_samples(aux, ckpt, defense, b, per_epoch, &mut rng)?;
    let grads: Vec<Vec<f64>> = pool.iter().map(|s| s.grad.clone()).collect();
    let scaler = InputScaler::fit(&grads)?;
    let mut net = InvNet::new(spec.clone(), scaler, rng.random())?;
    let mut flat = net.params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let (h, f, m) = (spec.obs_len, spec.horizon, spec.input_dim);

    for epoch in 0..spec.epochs {
        if epoch > 0 {
            pool = draw_samples(aux, ckpt, defense, b, per_epoch, &mut rng)?;
        }
        pool.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in pool.chunks(spec.batch_size) {
            let n = chunk.len();
            let x: Vec<f64> = chunk.iter().flat_map(|s| net.scaler.apply(&s.grad)).collect();
            let obs = Tensor::new(vec![n, b * h], chunk.iter().flat_map(|s| s.obs.iter().copied()).collect())?;
            let tar = Tensor::new(vec![n, b * f], chunk.iter().flat_map(|s| s.tar.iter().copied()).collect())?;

            let mut g = Graph::new();
            let params = ParamVector::unflatten(&net.layout, &flat)?;
            let p = params.leaves(&mut g);
            let xv = g.constant(Tensor::new(vec![n, m], x)?);
            let out = net.forward(&mut g, &p, xv, Some(&mut rng))?;
            let loss = match spec.kind {
                NetKind::Quantile => {
                    let lo = quantile_objective(&mut g, out.obs, &obs, &spec.levels, h)?;
                    let lt = quantile_objective(&mut g, out.tar, &tar, &spec.levels, f)?;
                    let s = g.add(lo, lt)?;
                    g.scale(s, 0.5)?
                }
                NetKind::Direct => {
                    let lo = direct_objective(&mut g, out.obs, &obs)?;
                    let lt = direct_objective(&mut g, out.tar, &tar)?;
                    g.add(lo, lt)?
                }
            };
            let grads = g.grad(loss, &p)?;
            let gflat: Vec<f64> = grads.iter().flat_map(|v| g.value(*v).data().iter().copied()).collect();
            let stats: Vec<RunningStats> = out.batch_stats;
            loss_sum += g.value(loss).item() * n as f64;
            adam.step(&mut flat, &gflat, spec.learning_rate);
            net.update_running(&stats);
        }
        epoch_losses.push(loss_sum / pool.len() as f64);
    }
    net.params = ParamVector::unflatten(&net.layout, &flat)?;
    Ok(TrainedNet {
        net,
        record: TrainingRecord {
            model_ref: ckpt.model_ref(),
            defense,
            seed,
            epoch_losses,
        },
    })
}

/// Trains the quantile-bound network on gradients of auxiliary batches.
pub fn train_finv(
    aux: &[SeriesWindow],
    ckpt: &Checkpoint,
    defense: Defense,
    spec: InvNetSpec,
    seed: u64,
) -> Result<TrainedNet> {
    if spec.kind != NetKind::Quantile {
        return Err(Error::Config("train_finv needs a quantile spec".into()));
    }
    train(spec, aux, ckpt, defense, seed)
}

/// Trains the direct gradient-to-batch regression baseline.
pub fn train_lti(
    aux: &[SeriesWindow],
    ckpt: &Checkpoint,
    defense: Defense,
    spec: InvNetSpec,
    seed: u64,
) -> Result<TrainedNet> {
    if spec.kind != NetKind::Direct {
        return Err(Error::Config("train_lti needs a direct spec".into()));
    }
    train(spec, aux, ckpt, defense, seed)
}

impl TrainedNet {
    fn check_capture(&self, capture: &GradientCapture) -> Result<()> {
        if capture.model_ref != self.record.model_ref {
            return Err(Error::CaptureMismatch(format!(
                "net was trained against model {}, capture is from {}",
                self.record.model_ref, capture.model_ref
            )));
        }
        let s = &self.net.spec;
        if capture.obs_len != s.obs_len || capture.horizon != s.horizon {
            return Err(Error::CaptureMismatch("capture H/F differ from the net".into()));
        }
        if s.kind == NetKind::Direct && capture.batch_size != s.target_batch_size {
            return Err(Error::CaptureMismatch(format!(
                "net reconstructs batches of {}, capture has {}",
                s.target_batch_size, capture.batch_size
            )));
        }
        Ok(())
    }

    /// Quantile bounds for a capture, sorted per timestep.
    pub fn predict_bounds(&self, capture: &GradientCapture) -> Result<QuantileBounds> {
        if self.net.spec.kind != NetKind::Quantile {
            return Err(Error::Config("bounds need a quantile net".into()));
        }
        self.check_capture(capture)?;
        let (obs, tar) = self.net.predict_raw(std::slice::from_ref(&capture.grads))?;
        let s = &self.net.spec;
        let q = s.levels.len();
        QuantileBounds::new(
            s.levels.clone(),
            Tensor::new(vec![s.obs_len, 1, q], obs[0].clone())?,
            Tensor::new(vec![s.horizon, 1, q], tar[0].clone())?,
        )
        .map(QuantileBounds::rearranged)
    }

    /// Direct reconstruction `(obs (B,H,1), tar (B,F,1))`.
    pub fn reconstruct(&self, capture: &GradientCapture) -> Result<(Tensor, Tensor)> {
        if self.net.spec.kind != NetKind::Direct {
            return Err(Error::Config("reconstruction needs a direct net".into()));
        }
        self.check_capture(capture)?;
        let (obs, tar) = self.net.predict_raw(std::slice::from_ref(&capture.grads))?;
        let s = &self.net.spec;
        let b = s.target_batch_size;
        Ok((
            Tensor::new(vec![b, s.obs_len, 1], obs[0].clone())?,
            Tensor::new(vec![b, s.horizon, 1], tar[0].clone())?,
        ))
    }

    /// Runs the direct net as an attack so its output flows through evaluation.
    pub fn lti_attack(&self, capture: &GradientCapture) -> Result<AttackResult> {
        let start = std::time::Instant::now();
        let (recon_obs, recon_tar) = self.reconstruct(capture)?;
        Ok(AttackResult {
            config: None,
            method: AttackMethod::Lti,
            batch_size: capture.batch_size,
            obs_len: capture.obs_len,
            horizon: capture.horizon,
            recon_obs,
            recon_tar,
            loss_trace: Vec::new(),
            distance_trace: Vec::new(),
            best_step: 0,
            best_loss: 0.0,
            wall_time_s: start.elapsed().as_secs_f64(),
            fallback_step: None,
            one_shot_used: false,
            aborted: None,
            capture: None,
        })
    }

    /// Parameters and running statistics at `path`; spec, scaler and record at `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = self.net.params.flatten();
        for r in &self.net.running {
            flat.extend_from_slice(&r.mean);
            flat.extend_from_slice(&r.var);
        }
        io::write_f64s(path, &flat)?;
        io::write_json(
            &io::sidecar(path, ".json"),
            &NetSidecar {
                spec: self.net.spec.clone(),
                scaler: self.net.scaler.clone(),
                record: self.record.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: NetSidecar = io::read_json(&io::sidecar(path, ".json"))?;
        let flat = io::read_f64s(path)?;
        let mut net = InvNet::new(side.spec, side.scaler, 0)?;
        let n_params = net.params.len();
        let n_running: usize = net.running.iter().map(|r| 2 * r.mean.len()).sum();
        if flat.len() != n_params + n_running {
            return Err(Error::Data(format!("{}: blob size does not match spec", path.display())));
        }
        net.params = ParamVector::unflatten(&net.layout, &flat[..n_params])?;
        let mut off = n_params;
        for r in net.running.iter_mut() {
            let w = r.mean.len();
            r.mean.copy_from_slice(&flat[off..off + w]);
            r.var.copy_from_slice(&flat[off + w..off + 2 * w]);
            off += 2 * w;
        }
        Ok(TrainedNet {
            net,
            record: side.record,
        })
    }
}
