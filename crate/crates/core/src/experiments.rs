//! Scripted protocols: model comparison per situation, latent dimension
//! sweep, layer-feeding ablation and latent cluster recovery.
//!
//! Each protocol trains one model per setting, evaluates it on the test
//! split and collects the reports into a [`Bundle`] keyed by setting name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::config::{DataSection, ModelKind, RunConfig};
use crate::data::{Corpus, Situation};
use crate::error::{Error, Result};
use crate::eval::{self, LatentRecovery, Report};
use crate::model::FeedLayers;
use crate::trainer::{train_model, Trace};

/// Latent dimensions compared by the sweep.
pub const DIM_SWEEP: [usize; 4] = [2, 3, 16, 64];

const COMPARED: [ModelKind; 3] = [ModelKind::Dnn, ModelKind::Dgp, ModelKind::Dgplvm];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Balanced,
    Imbalanced,
    DimSweep,
    LayerAblation,
    LatentRecovery,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::Balanced,
        Protocol::Imbalanced,
        Protocol::DimSweep,
        Protocol::LayerAblation,
        Protocol::LatentRecovery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Balanced => "balanced",
            Protocol::Imbalanced => "imbalanced",
            Protocol::DimSweep => "dim_sweep",
            Protocol::LayerAblation => "layer_ablation",
            Protocol::LatentRecovery => "latent_recovery",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown protocol {s:?}")))
    }
}

/// One trained and evaluated setting.
#[derive(Clone, Debug)]
pub struct SettingRun {
    pub config: RunConfig,
    pub model: Model,
    pub trace: Trace,
    pub report: Report,
}

/// Train `config` on `corpus` and evaluate on the configured split.
pub fn run_setting(config: &RunConfig, corpus: &Corpus, label: Option<String>) -> Result<SettingRun> {
    config.validate()?;
    let train = config.train_config();
    let mut model = config.init_model(corpus.spec())?;
    let data = corpus.train_data(train.oversample_factor)?;
    log::info!(
        "training {} on {} ({} frames per epoch)",
        config.model.kind.name(),
        corpus.id(),
        data.epoch_indices().len()
    );
    let trace = train_model(&mut model, &data, &train)?;
    let mut report = eval::evaluate(&model, corpus, config.eval.split, config.model.kind.name())?;
    config.eval.apply(&mut report);
    report.setting = label;
    report.provenance = config.provenance(corpus);
    Ok(SettingRun {
        config: config.clone(),
        model,
        trace,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub protocol: Protocol,
    /// Reports keyed by setting name.
    pub reports: BTreeMap<String, Report>,
    pub tables: String,
    pub provenance: serde_json::Value,
    /// Trained models keyed by setting name.
    pub models: BTreeMap<String, Model>,
    pub recovery: Option<LatentRecovery>,
    /// Target-speaker normalized RMSE per setting (imbalanced protocol).
    pub target_rmse: BTreeMap<String, f64>,
}

impl Bundle {
    fn new(protocol: Protocol, base: &RunConfig) -> Self {
        Bundle {
            protocol,
            reports: BTreeMap::new(),
            tables: String::new(),
            provenance: serde_json::json!({
                "protocol": protocol.name(),
                "seed": base.seed,
                "base_config": base.to_value(),
            }),
            models: BTreeMap::new(),
            recovery: None,
            target_rmse: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: &str, run: SettingRun) {
        self.reports.insert(name.to_string(), run.report);
        self.models.insert(name.to_string(), run.model);
    }

    fn ordered_reports(&self, order: &[String]) -> Vec<Report> {
        order.iter().filter_map(|n| self.reports.get(n).cloned()).collect()
    }

    fn finish(&mut self, title: &str, order: &[String]) {
        let mut t = format!("# {title}\n\n");
        t.push_str(&eval::render_table(&self.ordered_reports(order)));
        self.tables.insert_str(0, &t);
        self.provenance["settings"] = serde_json::json!(self.reports.keys().collect::<Vec<_>>());
    }

    /// Write `<setting>.json` per report, `tables.md` and `provenance.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, report) in &self.reports {
            report.save(dir.join(format!("{name}.json")))?;
        }
        let tables = dir.join("tables.md");
        std::fs::write(&tables, &self.tables).map_err(|e| Error::io(&tables, e))?;
        let prov = dir.join("provenance.json");
        let mut text = serde_json::to_string_pretty(&self.provenance)?;
        text.push('\n');
        std::fs::write(&prov, text).map_err(|e| Error::io(&prov, e))
    }
}

/// The base config's corpus, with the situation forced when it is generated.
fn situated_corpus(base: &RunConfig, situation: Situation, base_dir: &Path) -> Result<(RunConfig, Corpus)> {
    let mut config = base.clone();
    match &mut config.data {
        DataSection::Generator(spec) => spec.situation = situation,
        DataSection::Corpus(_) => {}
    }
    let corpus = config.corpus(base_dir)?;
    if corpus.spec().situation != situation {
        return Err(Error::InvalidConfig(format!(
            "corpus {} cannot be used for the {situation:?} protocol",
            corpus.id()
        )));
    }
    Ok((config, corpus))
}

fn with_kind(base: &RunConfig, kind: ModelKind) -> RunConfig {
    let mut c = base.clone();
    c.model.kind = kind;
    c
}

/// Frame-weighted target-speaker RMSE, averaged over output dimensions in
/// units of the training standard deviation.
pub fn target_rmse(report: &Report, corpus: &Corpus) -> Result<Option<f64>> {
    let std = &corpus.stats()?.y_std;
    let (mut sum, mut frames) = (0.0, 0usize);
    for s in report
        .per_speaker
        .iter()
        .filter(|s| corpus.meta.targets.contains(&s.speaker_id))
    {
        let normalized = s
            .metrics
            .rmse
            .iter()
            .zip(std)
            .map(|(r, sd)| r / sd.max(1e-8))
            .sum::<f64>()
            / s.metrics.rmse.len().max(1) as f64;
        sum += normalized * s.frames as f64;
        frames += s.frames;
    }
    Ok((frames > 0).then(|| sum / frames as f64))
}

fn compare(protocol: Protocol, base: &RunConfig, base_dir: &Path) -> Result<Bundle> {
    let situation = match protocol {
        Protocol::Imbalanced => Situation::Imbalanced,
        _ => Situation::Balanced,
    };
    let (config, corpus) = situated_corpus(base, situation, base_dir)?;
    let mut bundle = Bundle::new(protocol, base);
    let mut order = Vec::new();
    for kind in COMPARED {
        let run = run_setting(&with_kind(&config, kind), &corpus, None)?;
        if let Some(r) = target_rmse(&run.report, &corpus)? {
            bundle.target_rmse.insert(kind.name().to_string(), r);
        }
        bundle.add(kind.name(), run);
        order.push(kind.name().to_string());
    }
    if protocol == Protocol::Imbalanced {
        let mut t = String::from("\n## Target speakers\n\n| Model | normalized RMSE |\n|---|---:|\n");
        for name in &order {
            if let Some(r) = bundle.target_rmse.get(name) {
                writeln!(t, "| {name} | {} |", eval::format_sig3(*r)).expect("string write");
            }
        }
        if let (Some(lvm), Some(dgp)) = (bundle.target_rmse.get("dgplvm"), bundle.target_rmse.get("dgp")) {
            let verdict = if lvm <= dgp { "yes" } else { "no" };
            writeln!(t, "\ndgplvm <= dgp on target speakers: {verdict}").expect("string write");
            log::info!("target-speaker RMSE dgplvm {lvm:.4} vs dgp {dgp:.4}");
        }
        bundle.tables.push_str(&t);
    }
    let title = match protocol {
        Protocol::Imbalanced => "Imbalanced situation",
        _ => "Balanced situation",
    };
    bundle.finish(title, &order);
    Ok(bundle)
}

fn dim_sweep(base: &RunConfig, base_dir: &Path) -> Result<Bundle> {
    let mut bundle = Bundle::new(Protocol::DimSweep, base);
    let mut order = Vec::new();
    for situation in [Situation::Balanced, Situation::Imbalanced] {
        let (config, corpus) = situated_corpus(base, situation, base_dir)?;
        let tag = match situation {
            Situation::Balanced => "balanced",
            Situation::Imbalanced => "imbalanced",
        };
        for q in DIM_SWEEP {
            let mut c = with_kind(&config, ModelKind::Dgplvm);
            c.model.latent_dim = q;
            let name = format!("{tag}-q{q:02}");
            bundle.add(&name, run_setting(&c, &corpus, Some(format!("Q={q}")))?);
            order.push(name);
        }
    }
    bundle.finish("Latent dimensionality", &order);
    Ok(bundle)
}

/// One setting per single fed hidden layer plus one feeding all layers.
pub fn layer_ablation(base: &RunConfig, corpus: &Corpus) -> Result<Bundle> {
    if base.model.kind == ModelKind::Dnn {
        return Err(Error::InvalidConfig(
            "layer ablation needs a dgp or dgplvm model".into(),
        ));
    }
    let mut bundle = Bundle::new(Protocol::LayerAblation, base);
    let hidden = base.model.hidden_dims.len();
    let feeds = (1..=hidden)
        .map(FeedLayers::single)
        .chain(std::iter::once(FeedLayers::all()));
    let mut order = Vec::new();
    for feed in feeds {
        let mut c = base.clone();
        let name = format!("feed-{}", feed.label());
        let label = format!("feed_layers={}", feed.label());
        c.model.feed_layers = feed;
        bundle.add(&name, run_setting(&c, corpus, Some(label))?);
        order.push(name);
    }
    bundle.finish("Layer feeding ablation", &order);
    Ok(bundle)
}

fn latent_recovery(base: &RunConfig, base_dir: &Path) -> Result<Bundle> {
    let config = with_kind(base, ModelKind::Dgplvm);
    let corpus = config.corpus(base_dir)?;
    let mut bundle = Bundle::new(Protocol::LatentRecovery, base);
    let run = run_setting(&config, &corpus, Some(format!("Q={}", config.model.latent_dim)))?;
    let recovery = score_model(&run.model, &corpus)?;
    bundle.add("dgplvm", run);
    writeln!(
        bundle.tables,
        "\n## Latent recovery\n\n| accuracy | central distance | peripheral distance |\n|---:|---:|---:|\n| {} | {} | {} |",
        eval::format_sig3(recovery.accuracy),
        eval::format_sig3(recovery.central_distance),
        eval::format_sig3(recovery.peripheral_distance),
    )
    .expect("string write");
    bundle.provenance["latent_recovery"] = serde_json::to_value(&recovery)?;
    bundle.recovery = Some(recovery);
    bundle.finish("Latent recovery", &["dgplvm".to_string()]);
    Ok(bundle)
}

/// Compare a latent model's learned means with the generator's groups.
pub fn score_model(model: &Model, corpus: &Corpus) -> Result<LatentRecovery> {
    let Model::Dgp(m) = model else {
        return Err(Error::WrongModelKind("latent recovery needs a dgplvm model".into()));
    };
    let latent = m
        .speaker_latent
        .as_ref()
        .ok_or_else(|| Error::WrongModelKind("latent recovery needs a dgplvm model".into()))?;
    let meta = &corpus.meta;
    Ok(eval::score_latents(
        &latent.mu,
        &meta.groups,
        &meta.targets,
        &meta.target_roles,
    ))
}

/// Run a protocol on the base config. Relative corpus paths resolve
/// against `base_dir`.
pub fn run_protocol(protocol: Protocol, base: &RunConfig, base_dir: &Path) -> Result<Bundle> {
    base.validate()?;
    match protocol {
        Protocol::Balanced | Protocol::Imbalanced => compare(protocol, base, base_dir),
        Protocol::DimSweep => dim_sweep(base, base_dir),
        Protocol::LayerAblation => layer_ablation(base, &base.corpus(base_dir)?),
        Protocol::LatentRecovery => latent_recovery(base, base_dir),
    }
}

