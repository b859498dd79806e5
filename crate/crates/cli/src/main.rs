//! `gcex`: train and analyse generative causal explainers from the command line.

mod commands;
mod params;
mod setup;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "gcex",
    version,
    about = "Generative causal explanations of black-box classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP classifier on labelled data.
    TrainClassifier(RunArgs),
    /// Train a generative explainer for a classifier.
    TrainExplainer(RunArgs),
    /// Choose K, L and lambda by the plateau procedure.
    SelectParams(RunArgs),
    /// Decode latent traversals of a trained explainer.
    Sweep(RunArgs),
    /// Estimate causal influence and per-factor information flow.
    Influence(RunArgs),
    /// Classifier accuracy after resampling single latent factors.
    Intervene(RunArgs),
    /// Objective values over a grid of column orientations in 2-D.
    Landscape(RunArgs),
    /// Upper bound on MAP error of Y from alpha given I(alpha; Y).
    Certificate {
        #[arg(long)]
        mi_nats: f64,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(name: &str, args: &RunArgs, f: fn(&mut params::Params, &Path) -> Result<()>) -> Result<()> {
    let mut p = params::Params::load(args.config.as_deref(), &args.set, &commands::allowed(name))?;
    let out = match (&args.out, p.opt::<String>("out")?) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => bail!("no output directory: pass --out or set the `out` key"),
    };
    p.resolved.set("out", out.display());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    f(&mut p, &out)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainClassifier(a) => run("train-classifier", a, commands::train_classifier),
        Command::TrainExplainer(a) => run("train-explainer", a, commands::train_explainer),
        Command::SelectParams(a) => run("select-params", a, commands::select),
        Command::Sweep(a) => run("sweep", a, commands::sweep),
        Command::Influence(a) => run("influence", a, commands::influence),
        Command::Intervene(a) => run("intervene", a, commands::intervene),
        Command::Landscape(a) => run("landscape", a, commands::landscape),
        Command::Certificate {
            mi_nats,
            classes,
            out,
        } => {
            if let Some(o) = out {
                std::fs::create_dir_all(o)?;
            }
            let bound = commands::certificate(*mi_nats, *classes, out.as_deref())?;
            println!("{bound}");
            Ok(())
        }
    }
}
