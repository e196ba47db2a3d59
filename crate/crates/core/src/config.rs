//! Run configuration documents.
//!
//! A run config names the data, the model, training overrides and evaluation
//! toggles. Unknown keys are rejected everywhere. Missing sections take
//! desk-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Model, ModelConfig};
use crate::data::{self, Corpus, GeneratorSpec, Split};
use crate::dnn::{Activation, DnnArchitecture, DnnModel};
use crate::error::{Error, Result};
use crate::eval::Report;
use crate::kernel::KERNEL_ORDER;
use crate::model::{ConditioningSpec, DgpArchitecture, FeedLayers};
use crate::rng::Rng;
use crate::trainer::{init_model, TrainConfig, STREAM_INIT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dnn,
    /// Deep GP conditioned on one-hot speaker codes.
    Dgp,
    /// Deep GP with learned latent speaker variables.
    #[default]
    Dgplvm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dnn => "dnn",
            ModelKind::Dgp => "dgp",
            ModelKind::Dgplvm => "dgplvm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Generate a corpus with the run seed.
    Generator(GeneratorSpec),
    /// Load a corpus directory written by `gen-data`.
    Corpus(PathBuf),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::Generator(GeneratorSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Width of every hidden layer; the length is the depth.
    pub hidden_dims: Vec<usize>,
    /// Inducing points per hidden/output GP layer.
    pub inducing: usize,
    /// Inducing points per speaker GP.
    pub speaker_inducing: usize,
    pub latent_dim: usize,
    pub feed_layers: FeedLayers,
    pub activation: Activation,
    /// Layers receiving the speaker table in the DNN; all hidden by default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dnn_speaker_layers: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Dgplvm,
            hidden_dims: vec![8, 8],
            inducing: 32,
            speaker_inducing: 8,
            latent_dim: 3,
            feed_layers: FeedLayers::all(),
            activation: Activation::Relu,
            dnn_speaker_layers: None,
        }
    }
}

/// Optional overrides of the kind-specific [`TrainConfig`] defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oversample_factor: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub mcd: bool,
    pub f0: bool,
    pub dur: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: Split::Test,
            mcd: true,
            f0: true,
            dur: true,
        }
    }
}

impl EvalSection {
    /// Drop disabled metrics from a report.
    pub fn apply(&self, report: &mut Report) {
        let all = report
            .per_speaker
            .iter_mut()
            .map(|s| &mut s.metrics)
            .chain(std::iter::once(&mut report.aggregate));
        for m in all {
            if !self.mcd {
                m.mcd_db = None;
            }
            if !self.f0 {
                m.f0_rmse_cent = None;
            }
            if !self.dur {
                m.dur_rmse_ms = None;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSection::Generator(spec) = &self.data {
            spec.validate()?;
        }
        self.train_config().validate()?;
        let m = &self.model;
        if m.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if m.kind != ModelKind::Dnn && (m.inducing == 0 || m.speaker_inducing == 0) {
            return Err(Error::InvalidConfig("inducing point counts must be positive".into()));
        }
        if m.kind == ModelKind::Dgplvm && m.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be positive".into()));
        }
        Ok(())
    }

    /// Kind-specific defaults with the overrides applied; the seed is the
    /// run seed.
    pub fn train_config(&self) -> TrainConfig {
        let mut c = match self.model.kind {
            ModelKind::Dnn => TrainConfig::dnn_default(),
            _ => TrainConfig::dgp_default(),
        };
        let t = &self.train;
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.epochs = t.epochs.unwrap_or(c.epochs);
        c.learning_rate = t.learning_rate.unwrap_or(c.learning_rate);
        c.beta1 = t.beta1.unwrap_or(c.beta1);
        c.beta2 = t.beta2.unwrap_or(c.beta2);
        c.epsilon = t.epsilon.unwrap_or(c.epsilon);
        c.n_samples = t.n_samples.unwrap_or(c.n_samples);
        c.oversample_factor = t.oversample_factor.unwrap_or(c.oversample_factor);
        c.frozen = t.frozen.clone().unwrap_or_default();
        c.seed = self.seed;
        c
    }

    /// Generate or load the configured corpus. Relative corpus paths are
    /// resolved against `base`.
    pub fn corpus(&self, base: &Path) -> Result<Corpus> {
        match &self.data {
            DataSection::Generator(spec) => data::generate(spec, self.seed),
            DataSection::Corpus(p) => Corpus::load(base.join(p)),
        }
    }

    /// Architecture sized for a corpus with the given spec.
    pub fn model_config(&self, spec: &GeneratorSpec) -> Result<ModelConfig> {
        let m = &self.model;
        let (input_dim, output_dim, k) = (spec.model_input_dim(), spec.output_dim, spec.n_speakers);
        let conditioning = match m.kind {
            ModelKind::Dnn => {
                let architecture = DnnArchitecture {
                    input_dim,
                    output_dim,
                    hidden_dims: m.hidden_dims.clone(),
                    activation: m.activation,
                    speaker_layers: m.dnn_speaker_layers.clone(),
                    n_speakers: k,
                };
                architecture.validate()?;
                return Ok(ModelConfig::Dnn { architecture });
            }
            ModelKind::Dgp => ConditioningSpec::speaker_code(k, m.feed_layers.clone()),
            ModelKind::Dgplvm => ConditioningSpec::latent(k, m.latent_dim, m.feed_layers.clone()),
        };
        let architecture = DgpArchitecture {
            input_dim,
            output_dim,
            hidden_dims: m.hidden_dims.clone(),
            inducing: m.inducing,
            speaker_inducing: m.speaker_inducing,
            conditioning,
        };
        architecture.validate()?;
        Ok(ModelConfig::Dgp {
            architecture,
            kernel_order: KERNEL_ORDER,
        })
    }

    /// Freshly initialized model from the `STREAM_INIT` stream of the seed.
    pub fn init_model(&self, spec: &GeneratorSpec) -> Result<Model> {
        Ok(match self.model_config(spec)? {
            ModelConfig::Dgp { architecture, .. } => Model::Dgp(init_model(architecture, self.seed)?),
            ModelConfig::Dnn { architecture } => Model::Dnn(DnnModel::init(
                architecture,
                &mut Rng::stream(self.seed, STREAM_INIT),
            )?),
        })
    }

    /// Provenance block embedded in every artifact derived from this config.
    pub fn provenance(&self, corpus: &Corpus) -> serde_json::Value {
        serde_json::json!({
            "config": self.to_value(),
            "seed": self.seed,
            "corpus": corpus.id(),
            "train": serde_json::to_value(self.train_config()).expect("train config serializes"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ModelConfig;

    #[test]
    fn empty_document_takes_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config(), TrainConfig::dgp_default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"model": {"kind": "dgp", "widths": [3]}}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"data": {"generator": {"speakers": 3}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::InvalidConfig(_))), "{doc}");
        }
    }

    #[test]
    fn overrides_and_kinds_resolve() {
        let c = RunConfig::from_json(
            r#"{"seed": 4, "model": {"kind": "dgplvm", "latent_dim": 3, "feed_layers": [2]},
                "train": {"epochs": 3, "learning_rate": 0.05}}"#,
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!((t.epochs, t.learning_rate, t.seed, t.batch_size), (3, 0.05, 4, 1024));
        let ModelConfig::Dgp { architecture, .. } = c.model_config(&GeneratorSpec::default()).unwrap() else {
            panic!("expected a deep GP");
        };
        assert_eq!(architecture.conditioning.latent_dim, 3);
        assert_eq!(architecture.fed_layers(), vec![2]);
        assert_eq!(architecture.input_dim, 16);

        let dnn = RunConfig::from_json(r#"{"model": {"kind": "dnn"}}"#).unwrap();
        assert_eq!(dnn.train_config().learning_rate, 1e-4);
        assert!(matches!(
            dnn.init_model(&GeneratorSpec::default()).unwrap(),
            Model::Dnn(_)
        ));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::from_json(r#"{"model": {"kind": "dgp"}, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
        assert!(matches!(
            RunConfig::from_json(r#"{"data": {"generator": {"n_groups": 0}}}"#),
            Err(Error::InvalidSpec(_))
        ));
        assert!(RunConfig::from_json(r#"{"model": {"latent_dim": 0}}"#).is_err());
    }
}
