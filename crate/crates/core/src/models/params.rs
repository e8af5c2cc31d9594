use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Normal { std: f64 },
    Uniform { bound: f64 },
    Zeros,
    Ones,
}

/// One named entry of a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamInfo {
    pub(crate) fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamInfo {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Per-layer parameter tensors in the model's canonical layout order.
///
/// Flattening concatenates the tensors in layout order, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    tensors: Vec<Tensor>,
}

impl ParamVector {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ParamVector { tensors }
    }

    pub fn init(layout: &[ParamInfo], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .iter()
            .map(|info| {
                let n = info.numel();
                let data: Vec<f64> = match info.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal { std } => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Uniform { bound } => {
                        let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                };
                Tensor::from_parts(info.shape.clone(), data)
            })
            .collect();
        ParamVector { tensors }
    }

    pub fn zeros(layout: &[ParamInfo]) -> Self {
        ParamVector {
            tensors: layout.iter().map(|i| Tensor::zeros(&i.shape)).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total parameter count `m`.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(layout: &[ParamInfo], flat: &[f64]) -> Result<Self> {
        let total: usize = layout.iter().map(ParamInfo::numel).sum();
        if flat.len() != total {
            return Err(Error::shape(
                "unflatten",
                format!("layout holds {total} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        let tensors = layout
            .iter()
            .map(|info| {
                let n = info.numel();
                let t = Tensor::from_parts(info.shape.clone(), flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect();
        Ok(ParamVector { tensors })
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn constants(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}
