use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: [f64; 4] = [0.1, 0.3, 0.7, 0.9];

/// Per-timestep quantile predictions shared by every sequence of a batch.
///
/// `obs` has shape `(H, 1, Q)` and `tar` has shape `(F, 1, Q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBounds {
    pub levels: Vec<f64>,
    pub obs: Tensor,
    pub tar: Tensor,
}

/// Which half of a window a bound refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Obs,
    Tar,
}

pub fn validate_levels(levels: &[f64]) -> Result<()> {
    let q = levels.len();
    if q == 0 || q % 2 != 0 {
        return Err(Error::Config(format!("need an even, non-zero number of quantile levels, got {q}")));
    }
    if levels.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Config("quantile levels must lie in (0, 1)".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("quantile levels must be strictly ascending".into()));
    }
    if (0..q / 2).any(|i| (levels[i] + levels[q - 1 - i] - 1.0).abs() > 1e-9) {
        return Err(Error::Config("quantile levels must be symmetric around 0.5".into()));
    }
    Ok(())
}

impl QuantileBounds {
    pub fn new(levels: Vec<f64>, obs: Tensor, tar: Tensor) -> Result<Self> {
        validate_levels(&levels)?;
        let q = levels.len();
        for t in [&obs, &tar] {
            if t.ndim() != 3 || t.shape()[1] != 1 || t.shape()[2] != q {
                return Err(Error::shape("quantile_bounds", format!("{:?} with Q = {q}", t.shape())));
            }
        }
        Ok(QuantileBounds { levels, obs, tar })
    }

    pub fn len(&self, part: Part) -> usize {
        self.tensor(part).shape()[0]
    }

    fn tensor(&self, part: Part) -> &Tensor {
        match part {
            Part::Obs => &self.obs,
            Part::Tar => &self.tar,
        }
    }

    /// The sequence predicted at level index `q`, shape `(T, 1)`.
    pub fn column(&self, part: Part, q: usize) -> Tensor {
        let t = self.tensor(part);
        let nq = self.levels.len();
        let data = t.data().iter().skip(q).step_by(nq).copied().collect();
        Tensor::new(vec![t.shape()[0], 1], data).expect("column shape")
    }

    /// `(lower, upper)` sequences for each symmetric pair, outermost first.
    pub fn pairs(&self, part: Part) -> Vec<(Tensor, Tensor)> {
        let q = self.levels.len();
        (0..q / 2)
            .map(|i| (self.column(part, i), self.column(part, q - 1 - i)))
            .collect()
    }

    /// Sorts the predictions at every timestep so levels never cross.
    pub fn rearranged(mut self) -> Self {
        let q = self.levels.len();
        for t in [&mut self.obs, &mut self.tar] {
            for row in t.data_mut().chunks_mut(q) {
                row.sort_by(f64::total_cmp);
            }
        }
        self
    }
}
