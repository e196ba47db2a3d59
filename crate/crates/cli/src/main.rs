use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msdgp::checkpoint::{Checkpoint, Model};
use msdgp::config::{DataSection, RunConfig};
use msdgp::data::{self, Corpus, Split};
use msdgp::eval::{self, Report};
use msdgp::experiments::{self, Protocol};
use msdgp::trainer::train_model;
use msdgp::{Error, Result};

/// Multi-speaker deep GP pipeline: data, training, evaluation and protocols.
#[derive(Parser)]
#[command(name = "msdgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory (meta.json, frames.csv).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoint.json and trace.csv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory; defaults to the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Score the reference outputs against themselves.
        #[arg(long, hide = true)]
        perfect: bool,
    },
    /// Train one model per fed hidden layer and one feeding all layers.
    AblateLayers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render reports as a Markdown comparison table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export learned latent speaker means as CSV and SVG.
    ExportLatents {
        #[arg(long)]
        model: PathBuf,
        /// Corpus supplying group labels.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
    },
    /// Run a scripted protocol and write its report bundle.
    Protocol {
        /// balanced, imbalanced, dim_sweep, layer_ablation or latent_recovery.
        #[arg(long)]
        name: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "unused" => Ok(Split::Unused),
        _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
    }
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config, seed)?;
    let DataSection::Generator(spec) = &config.data else {
        return Err(Error::InvalidConfig(
            "gen-data needs a generator data section".into(),
        ));
    };
    let corpus = data::generate(spec, config.seed)?;
    corpus.save(out)?;
    write(&out.join("config.json"), &config.to_json()?)?;
    println!(
        "wrote {} ({} frames) to {}",
        corpus.id(),
        corpus.frames.len(),
        out.display()
    );
    Ok(())
}

fn train(config_path: &Path, data: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(config_path, seed)?;
    if let Some(d) = data {
        config.data = DataSection::Corpus(std::path::absolute(d).map_err(|e| Error::Io {
            path: d.display().to_string(),
            source: e,
        })?);
    }
    let corpus = config.corpus(parent_dir(config_path))?;
    let train = config.train_config();
    let mut model = config.init_model(corpus.spec())?;
    let trace = train_model(&mut model, &corpus.train_data(train.oversample_factor)?, &train)?;
    create_dir(out)?;
    model
        .to_checkpoint(config.provenance(&corpus))?
        .save(out.join("checkpoint.json"))?;
    write(&out.join("trace.csv"), &trace.to_csv())?;
    let last = trace.rows.last().map_or(String::from("-"), |r| format!("{:.6}", r.objective));
    println!(
        "trained {} for {} epochs (final objective {last}); wrote {}",
        model.kind_name(),
        train.epochs,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((Model::from_checkpoint(&ck)?, ck))
}

fn evaluate(model: &Path, data: &Path, split: &str, report: &Path, perfect: bool) -> Result<()> {
    let split = parse_split(split)?;
    let (m, ck) = load_model(model)?;
    let corpus = Corpus::load(data)?;
    if m.n_speakers() != corpus.spec().n_speakers || m.output_dim() != corpus.spec().output_dim {
        return Err(Error::ShapeMismatch(format!(
            "model for {} speakers and {} outputs cannot score corpus {}",
            m.n_speakers(),
            m.output_dim(),
            corpus.id()
        )));
    }
    let mut r = if perfect {
        eval::evaluate_with(&corpus, split, "reference", |rows, _, _| Ok(corpus.raw_outputs(rows)))?
    } else {
        eval::evaluate(&m, &corpus, split, m.kind_name())?
    };
    if let Some(c) = ck.provenance.get("config") {
        if let Ok(config) = serde_json::from_value::<RunConfig>(c.clone()) {
            config.eval.apply(&mut r);
        }
    }
    r.provenance = serde_json::json!({
        "checkpoint": ck.provenance,
        "corpus_meta": {"spec": corpus.meta.spec, "seed": corpus.meta.seed},
    });
    r.save(report)?;
    println!("wrote report for {} on {} to {}", r.model, r.corpus, report.display());
    Ok(())
}

fn ablate_layers(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let config = load_config(config, None)?;
    let corpus = Corpus::load(data)?;
    let bundle = experiments::layer_ablation(&config, &corpus)?;
    bundle.write(out)?;
    println!("wrote {} reports to {}", bundle.reports.len(), out.display());
    Ok(())
}

fn compare(reports: &[PathBuf], out: &Path) -> Result<()> {
    let loaded = reports.iter().map(Report::load).collect::<Result<Vec<_>>>()?;
    let mut table = eval::render_table(&loaded);
    table.push_str("\n<!-- sources\n");
    for r in &loaded {
        let seed = r
            .provenance
            .pointer("/checkpoint/seed")
            .or_else(|| r.provenance.get("seed"))
            .map_or(String::from("?"), |s| s.to_string());
        table.push_str(&format!(
            "{} {} {:?} seed={seed}\n",
            r.model,
            r.corpus,
            r.setting.as_deref().unwrap_or("-")
        ));
    }
    table.push_str("-->\n");
    write(out, &table)?;
    println!("wrote table of {} reports to {}", loaded.len(), out.display());
    Ok(())
}

fn export_latents(model: &Path, data: Option<&Path>, out_csv: &Path, out_svg: &Path) -> Result<()> {
    let (m, _) = load_model(model)?;
    let groups = match data {
        Some(d) => Corpus::load(d)?.meta.groups,
        None => Vec::new(),
    };
    let points = eval::export_latents(&m, &groups, out_csv, out_svg)?;
    println!("exported {} speakers", points.len());
    Ok(())
}

fn protocol(name: &str, config_path: &Path, out: &Path) -> Result<()> {
    let protocol: Protocol = name.parse()?;
    let config = load_config(config_path, None)?;
    let bundle = experiments::run_protocol(protocol, &config, parent_dir(config_path))?;
    bundle.write(out)?;
    print!("{}", bundle.tables);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train(&config, data.as_deref(), &out, seed),
        Command::Eval {
            model,
            data,
            split,
            report,
            perfect,
        } => evaluate(&model, &data, &split, &report, perfect),
        Command::AblateLayers { config, data, out } => ablate_layers(&config, &data, &out),
        Command::Compare { reports, out } => compare(&reports, &out),
        Command::ExportLatents {
            model,
            data,
            out_csv,
            out_svg,
        } => export_latents(&model, data.as_deref(), &out_csv, &out_svg),
        Command::Protocol { name, config, out } => protocol(&name, &config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DGP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
