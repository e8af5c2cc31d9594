use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::io;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model_ref: String,
    param_count: usize,
    spec: ModelSpec,
}

/// A model spec together with concrete parameter values.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(model: Model, params: ParamVector) -> Result<Self> {
        if params.len() != model.param_count() {
            return Err(Error::shape(
                "checkpoint",
                format!("model has {} parameters, got {}", model.param_count(), params.len()),
            ));
        }
        Ok(Checkpoint { model, params })
    }

    pub fn init(spec: ModelSpec) -> Result<Self> {
        let model = Model::build(spec)?;
        let params = model.init_params(spec.init_seed);
        Ok(Checkpoint { model, params })
    }

    /// Content hash of spec and parameter bytes, as 16 hex digits.
    pub fn model_ref(&self) -> String {
        let spec = serde_json::to_vec(self.model.spec()).unwrap_or_default();
        let bytes = spec
            .into_iter()
            .chain(self.params.flatten().into_iter().flat_map(f64::to_le_bytes));
        format!("{:016x}", io::fnv1a(bytes))
    }

    /// Writes the flat parameter blob to `path` and the spec to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_f64s(path, &self.params.flatten())?;
        io::write_json(
            &io::sidecar(path, ".json"),
            &Sidecar {
                model_ref: self.model_ref(),
                param_count: self.model.param_count(),
                spec: *self.model.spec(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = io::read_json(&io::sidecar(path, ".json"))?;
        let model = Model::build(side.spec)?;
        let flat = io::read_f64s(path)?;
        if flat.len() != side.param_count || flat.len() != model.param_count() {
            return Err(Error::Data(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                model.param_count(),
                flat.len()
            )));
        }
        let ckpt = Checkpoint {
            params: ParamVector::unflatten(model.layout(), &flat)?,
            model,
        };
        if ckpt.model_ref() != side.model_ref {
            return Err(Error::Data(format!("{}: checksum mismatch", path.display())));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::init(ModelSpec::new(Architecture::Tcn, 8, 4).with_hidden(4).with_seed(5)).unwrap();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.model_ref(), ck.model_ref());
        io::write_f64s(&p, &vec![0.0; ck.params.len()]).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
