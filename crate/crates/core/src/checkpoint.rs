//! Versioned JSON checkpoints for every model kind.
//!
//! Floats are written as shortest round-trip decimals and parsed with exact
//! rounding, so save, load and save again reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dnn::{DnnArchitecture, DnnModel};
use crate::error::{Error, Result};
use crate::kernel::KERNEL_ORDER;
use crate::model::{ConditioningMode, DgpArchitecture, DgpModel};
use crate::params::{ParamMap, Parameterized};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Dgp {
        architecture: DgpArchitecture,
        kernel_order: u32,
    },
    Dnn {
        architecture: DnnArchitecture,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, ParamEntry>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Any trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Dgp(DgpModel),
    Dnn(DnnModel),
}

impl Model {
    /// `dnn`, `dgp` or `dgplvm`.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Dnn(_) => "dnn",
            Model::Dgp(m) if m.arch.conditioning.mode == ConditioningMode::Latent => "dgplvm",
            Model::Dgp(_) => "dgp",
        }
    }

    pub fn n_speakers(&self) -> usize {
        match self {
            Model::Dgp(m) => m.n_speakers(),
            Model::Dnn(m) => m.arch.n_speakers,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Dgp(m) => m.arch.output_dim,
            Model::Dnn(m) => m.arch.output_dim,
        }
    }

    /// Deterministic point prediction (mean-field for deep GPs).
    pub fn predict(&self, x: &Tensor, speakers: &[usize]) -> Result<Tensor> {
        match self {
            Model::Dgp(m) => m.predict(x, speakers, 0, &mut Rng::new(0)),
            Model::Dnn(m) => m.forward(x, speakers),
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Dgp(m) => ModelConfig::Dgp {
                architecture: m.arch.clone(),
                kernel_order: KERNEL_ORDER,
            },
            Model::Dnn(m) => ModelConfig::Dnn {
                architecture: m.arch.clone(),
            },
        }
    }

    pub fn param_map(&self) -> ParamMap {
        match self {
            Model::Dgp(m) => m.param_map(),
            Model::Dnn(m) => m.param_map(),
        }
    }

    pub fn to_checkpoint(&self, provenance: serde_json::Value) -> Result<Checkpoint> {
        let params = self
            .param_map()
            .into_iter()
            .map(|(name, t)| {
                if !t.all_finite() {
                    return Err(Error::Format(format!("parameter {name} is not finite")));
                }
                Ok((
                    name,
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        data: t.into_data(),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config(),
            params,
            provenance,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        let map: ParamMap = ck
            .params
            .iter()
            .map(|(name, e)| Ok((name.clone(), Tensor::from_vec(e.shape.clone(), e.data.clone())?)))
            .collect::<Result<_>>()?;
        match &ck.config {
            ModelConfig::Dgp {
                architecture,
                kernel_order,
            } => {
                if *kernel_order != KERNEL_ORDER {
                    return Err(Error::Format(format!(
                        "kernel order {kernel_order} is not supported"
                    )));
                }
                let mut m = DgpModel::new(architecture.clone())?;
                m.load_param_map(&map)?;
                m.validate()?;
                Ok(Model::Dgp(m))
            }
            ModelConfig::Dnn { architecture } => {
                let mut m = DnnModel::zeros(architecture.clone())?;
                m.load_param_map(&map)?;
                Ok(Model::Dnn(m))
            }
        }
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::Activation;
    use crate::model::{ConditioningSpec, FeedLayers};

    fn latent_model() -> Model {
        let arch = DgpArchitecture {
            input_dim: 3,
            output_dim: 2,
            hidden_dims: vec![3],
            inducing: 5,
            speaker_inducing: 8,
            conditioning: ConditioningSpec::latent(4, 2, FeedLayers::all()),
        };
        Model::Dgp(DgpModel::init(arch, &mut Rng::new(7)).unwrap())
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        for model in [
            latent_model(),
            Model::Dnn(
                DnnModel::init(
                    DnnArchitecture {
                        input_dim: 2,
                        output_dim: 1,
                        hidden_dims: vec![4],
                        activation: Activation::Relu,
                        speaker_layers: None,
                        n_speakers: 3,
                    },
                    &mut Rng::new(1),
                )
                .unwrap(),
            ),
        ] {
            let text = model.to_checkpoint(serde_json::json!({"seed": 7})).unwrap().to_json().unwrap();
            let loaded = Model::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
            assert_eq!(loaded, model);
            let again = loaded.to_checkpoint(serde_json::json!({"seed": 7})).unwrap().to_json().unwrap();
            assert_eq!(again, text);
        }
    }

    #[test]
    fn names_are_sorted_and_config_records_kernel_order() {
        let ck = latent_model().to_checkpoint(serde_json::Value::Null).unwrap();
        let names: Vec<_> = ck.params.keys().cloned().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let text = ck.to_json().unwrap();
        assert!(text.contains("\"kernel_order\": 1"));
        assert!(text.contains("\"latent_dim\": 2"));
    }

    #[test]
    fn rejects_tampered_documents() {
        let ck = latent_model().to_checkpoint(serde_json::Value::Null).unwrap();
        let mut bad = ck.clone();
        bad.format_version = 99;
        assert!(Model::from_checkpoint(&bad).is_err());
        let mut bad = ck.clone();
        bad.params.remove("latent.mu");
        assert!(Model::from_checkpoint(&bad).is_err());
        let mut bad = ck;
        bad.params.get_mut("latent.mu").unwrap().shape = vec![2, 4];
        assert!(Model::from_checkpoint(&bad).is_err());
        assert!(Checkpoint::from_json("{\"format_version\": 1, \"extra\": 0}").is_err());
    }
}
