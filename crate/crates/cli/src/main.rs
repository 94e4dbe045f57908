mod aggregate;
mod saliency;
mod serve;
mod synth;
mod train;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

/// Facial-saliency workbench: train a small face classifier, extract guided
/// backpropagation saliency, collect human bounding boxes and compare the two.
#[derive(Debug, Parser)]
#[command(name = "gbwb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train or fine-tune a classifier on a labeled image directory.
    Train(train::Args),
    /// Compute guided-backpropagation saliency maps.
    Saliency(saliency::Args),
    /// Build heatmaps, label histograms and overlap scores.
    Aggregate(aggregate::Args),
    /// Run the annotation task service.
    Serve(serve::Args),
    /// Write the bundled synthetic 4-class dataset and its architecture.
    Synth(synth::Args),
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match Cli::parse().command {
        Command::Train(args) => train::run(args),
        Command::Saliency(args) => saliency::run(args),
        Command::Aggregate(args) => aggregate::run(args),
        Command::Serve(args) => serve::run(args),
        Command::Synth(args) => synth::run(args),
    }
}
