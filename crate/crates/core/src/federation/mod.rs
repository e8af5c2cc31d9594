//! One FedSGD round per client: a single-batch gradient, an optional
//! defense, and the [`GradientCapture`] the server observes.
//!
//! The client's batch and dropout masks are returned separately as a
//! [`ClientTruth`]. Attack code only ever receives the capture.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{ClientBatch, SeriesWindow};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{mse_loss, Checkpoint, Model, ParamVector};

pub const DEFAULT_NOISE_STD: f64 = 0.1;
pub const DEFAULT_PRUNE_RATIO: f64 = 0.9;

/// Gradient perturbation applied by the client before sharing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Defense {
    #[default]
    None,
    Gauss {
        noise_std: f64,
    },
    Prune {
        prune_ratio: f64,
    },
    Sign,
}

impl Defense {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::Gauss { noise_std } if !(noise_std >= 0.0 && noise_std.is_finite()) => {
                Err(Error::Config(format!("noise_std must be finite and >= 0, got {noise_std}")))
            }
            Defense::Prune { prune_ratio } if !(0.0..1.0).contains(&prune_ratio) => {
                Err(Error::Config(format!("prune_ratio must lie in [0, 1), got {prune_ratio}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Gauss { .. } => "gauss",
            Defense::Prune { .. } => "prune",
            Defense::Sign => "sign",
        }
    }

    /// Builds a defense from its CLI name, filling unset strengths with defaults.
    pub fn from_name(name: &str, noise_std: Option<f64>, prune_ratio: Option<f64>) -> Result<Self> {
        let d = match name {
            "none" => Defense::None,
            "gauss" => Defense::Gauss {
                noise_std: noise_std.unwrap_or(DEFAULT_NOISE_STD),
            },
            "prune" => Defense::Prune {
                prune_ratio: prune_ratio.unwrap_or(DEFAULT_PRUNE_RATIO),
            },
            "sign" => Defense::Sign,
            other => return Err(Error::Config(format!("unknown defense '{other}'"))),
        };
        d.validate()?;
        Ok(d)
    }
}

/// What the honest-but-curious server sees from one client round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCapture {
    pub model_ref: String,
    pub batch_size: usize,
    pub obs_len: usize,
    pub horizon: usize,
    pub defense: Defense,
    pub seed: u64,
    /// Checkpoint the capture came from, when known; lets tools find the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    /// Flattened parameter gradient in the model's layout order.
    #[serde(skip)]
    pub grads: Vec<f64>,
}

impl GradientCapture {
    /// Gradient split into per-tensor pieces following `model`'s layout.
    pub fn grad_tensors(&self, model: &Model) -> Result<ParamVector> {
        if self.grads.len() != model.param_count() {
            return Err(Error::CaptureMismatch(format!(
                "capture holds {} gradient entries, model has {} parameters",
                self.grads.len(),
                model.param_count()
            )));
        }
        ParamVector::unflatten(model.layout(), &self.grads)
    }

    /// Checks that this capture was produced by `ckpt`.
    pub fn check_model(&self, ckpt: &Checkpoint) -> Result<()> {
        let spec = ckpt.model.spec();
        if self.model_ref != ckpt.model_ref() {
            return Err(Error::CaptureMismatch(format!(
                "capture references model {}, checkpoint is {}",
                self.model_ref,
                ckpt.model_ref()
            )));
        }
        if self.obs_len != spec.obs_len || self.horizon != spec.horizon {
            return Err(Error::CaptureMismatch("H/F differ from the model".into()));
        }
        self.grad_tensors(&ckpt.model).map(|_| ())
    }

    /// Manifest at `path` (JSON) and gradient blob at `path.grad`.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)?;
        io::write_f64s(&io::sidecar(path, ".grad"), &self.grads)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cap: GradientCapture = io::read_json(path)?;
        cap.grads = io::read_f64s(&io::sidecar(path, ".grad"))?;
        Ok(cap)
    }
}

/// The client's private batch and dropout masks; used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientTruth {
    pub batch: ClientBatch,
    pub masks: Vec<Tensor>,
}

impl ClientTruth {
    /// Blob layout: obs, tar, then every mask, all row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = self.batch.obs.data().to_vec();
        flat.extend_from_slice(self.batch.tar.data());
        for m in &self.masks {
            flat.extend_from_slice(m.data());
        }
        io::write_f64s(path, &flat)
    }

    /// Reads only the batch, for tools that have no model at hand.
    pub fn load_batch(path: &Path, capture: &GradientCapture) -> Result<ClientBatch> {
        let flat = io::read_f64s(path)?;
        let (b, h, f) = (capture.batch_size, capture.obs_len, capture.horizon);
        if flat.len() < b * (h + f) {
            return Err(Error::Data(format!("{}: too short for a {b}-sample batch", path.display())));
        }
        Ok(ClientBatch {
            obs: Tensor::new(vec![b, h, 1], flat[..b * h].to_vec())?,
            tar: Tensor::new(vec![b, f, 1], flat[b * h..b * (h + f)].to_vec())?,
        })
    }

    pub fn load(path: &Path, capture: &GradientCapture, model: &Model) -> Result<Self> {
        let flat = io::read_f64s(path)?;
        let (b, h, f) = (capture.batch_size, capture.obs_len, capture.horizon);
        let shapes = model.mask_shapes(b);
        let expected = b * (h + f) + shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
        if flat.len() != expected {
            return Err(Error::Data(format!(
                "{}: expected {expected} values, found {}",
                path.display(),
                flat.len()
            )));
        }
        let mut off = 0;
        let mut take = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, flat[off..off + n].to_vec());
            off += n;
            t
        };
        let obs = take(vec![b, h, 1])?;
        let tar = take(vec![b, f, 1])?;
        let masks = shapes.into_iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        Ok(ClientTruth {
            batch: ClientBatch { obs, tar },
            masks,
        })
    }
}

/// Inverted dropout masks: each entry is 0 or `1 / (1 - rate)`.
pub fn sample_dropout_masks(model: &Model, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let rate = model.spec().dropout_rate;
    let keep = Bernoulli::new(1.0 - rate).expect("dropout rate in [0, 1)");
    let scale = 1.0 / (1.0 - rate);
    model
        .mask_shapes(batch)
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| if keep.sample(rng) { scale } else { 0.0 }).collect();
            Tensor::new(shape, data).expect("mask shape")
        })
        .collect()
}

/// `d MSE(f(obs), tar) / dW` for one batch, flattened in layout order.
pub fn client_gradient(
    model: &Model,
    params: &ParamVector,
    batch: &ClientBatch,
    masks: &[Tensor],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = params.leaves(&mut g);
    let obs = g.constant(batch.obs.clone());
    let tar = g.constant(batch.tar.clone());
    let mask_vars: Vec<_> = masks.iter().map(|m| g.constant(m.clone())).collect();
    let pred = model.forward(&mut g, &p, obs, (!mask_vars.is_empty()).then_some(&mask_vars[..]))?;
    let loss = mse_loss(&mut g, pred, tar)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("client loss"));
    }
    let grads = g.grad(loss, &p)?;
    Ok(grads.iter().flat_map(|v| g.value(*v).data().iter().copied()).collect())
}

/// Applies one defense in place of the flat gradient.
pub fn apply_defense(grads: &mut [f64], defense: &Defense, rng: &mut ChaCha8Rng) -> Result<()> {
    defense.validate()?;
    match *defense {
        Defense::None => {}
        Defense::Gauss { noise_std } => {
            if noise_std > 0.0 {
                let n = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
                for v in grads.iter_mut() {
                    *v += n.sample(rng);
                }
            }
        }
        Defense::Prune { prune_ratio } => {
            let k = (prune_ratio * grads.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..grads.len()).collect();
            // Stable sort keeps index order among equal magnitudes.
            order.sort_by(|&a, &b| grads[a].abs().total_cmp(&grads[b].abs()));
            for &i in &order[..k.min(grads.len())] {
                grads[i] = 0.0;
            }
        }
        Defense::Sign => {
            for v in grads.iter_mut() {
                *v = if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }
    Ok(())
}

/// Picks `batch_size` distinct windows from `pool` with a seeded RNG.
pub fn sample_batch(pool: &[SeriesWindow], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<ClientBatch> {
    if batch_size == 0 || batch_size > pool.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={}",
            pool.len()
        )));
    }
    let mut idx = sample(rng, pool.len(), batch_size).into_vec();
    idx.sort_unstable();
    let picked: Vec<SeriesWindow> = idx.into_iter().map(|i| pool[i].clone()).collect();
    ClientBatch::from_windows(&picked)
}

/// A full client round: sample masks, compute gradients, apply the defense.
///
/// All randomness derives from `seed`.
pub fn capture_round(
    ckpt: &Checkpoint,
    batch: ClientBatch,
    defense: Defense,
    seed: u64,
) -> Result<(GradientCapture, ClientTruth)> {
    let spec = ckpt.model.spec();
    if batch.obs_len() != spec.obs_len || batch.horizon() != spec.horizon {
        return Err(Error::CaptureMismatch(format!(
            "batch windows are {}+{}, model expects {}+{}",
            batch.obs_len(),
            batch.horizon(),
            spec.obs_len,
            spec.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = sample_dropout_masks(&ckpt.model, batch.batch_size(), &mut rng);
    let mut grads = client_gradient(&ckpt.model, &ckpt.params, &batch, &masks)?;
    apply_defense(&mut grads, &defense, &mut rng)?;
    let capture = GradientCapture {
        model_ref: ckpt.model_ref(),
        batch_size: batch.batch_size(),
        obs_len: spec.obs_len,
        horizon: spec.horizon,
        defense,
        seed,
        model_path: None,
        grads,
    };
    Ok((capture, ClientTruth { batch, masks }))
}

/// `W - alpha * mean_k(grad_k)`.
pub fn aggregate_round(params: &ParamVector, captures: &[GradientCapture], alpha: f64) -> Result<Vec<f64>> {
    let first = captures
        .first()
        .ok_or_else(|| Error::Config("no captures to aggregate".into()))?;
    if captures.iter().any(|c| c.model_ref != first.model_ref) {
        return Err(Error::CaptureMismatch("captures come from different models".into()));
    }
    let mut flat = params.flatten();
    if captures.iter().any(|c| c.grads.len() != flat.len()) {
        return Err(Error::CaptureMismatch("gradient length differs from parameters".into()));
    }
    let k = captures.len() as f64;
    for (i, w) in flat.iter_mut().enumerate() {
        let mean: f64 = captures.iter().map(|c| c.grads[i]).sum::<f64>() / k;
        *w -= alpha * mean;
    }
    Ok(flat)
}

#[cfg(test)]
mod tests;
