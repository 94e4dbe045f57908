use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gbwb_core::dataset::{LabeledDataset, Split};
use gbwb_core::training::{evaluate, train, Phase, Start, TrainConfig};
use gbwb_core::{Checkpoint, NetworkSpec};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset root holding `manifest.jsonl` and class folders.
    #[arg(long)]
    data: PathBuf,
    /// Architecture file. Required unless resuming.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, default_value = "end_to_end")]
    phase: Phase,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Weight-decay coefficient on the sum of squared parameters.
    #[arg(long, default_value_t = 1e-4)]
    decay: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint; the architecture is written next to it as
    /// `<out>.arch` and the per-epoch log as `<out>.log.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let start = match (&args.resume, &args.arch) {
        (Some(path), arch) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(arch) = arch {
                let spec = read_arch(arch)?;
                if spec.input_shape() != ck.spec().input_shape() || spec.layers() != ck.spec().layers() {
                    bail!("--arch {} does not match the architecture of {}", arch.display(), path.display());
                }
            }
            Start::Resume(ck)
        }
        (None, Some(arch)) => Start::Fresh(read_arch(arch)?),
        (None, None) => bail!("either --arch or --resume is required"),
    };
    let channels = match &start {
        Start::Fresh(spec) => spec.input_shape()[0],
        Start::Resume(ck) => ck.spec().input_shape()[0],
    };
    let train_set = LabeledDataset::load(&args.data, Split::Train, channels)
        .with_context(|| format!("loading training data from {}", args.data.display()))?;
    let config = TrainConfig {
        learning_rate: args.lr,
        weight_decay: args.decay,
        epochs: args.epochs,
        batch_size: args.batch_size,
        phase: args.phase,
        seed: args.seed,
    };
    tracing::info!("training {} for {} epochs on {} images", config.phase, config.epochs, train_set.len());
    let outcome = train(&train_set, start, &config)?;

    let log = log_path(&args.out);
    let mut file = fs::File::create(&log).with_context(|| format!("creating {}", log.display()))?;
    for entry in &outcome.log {
        tracing::info!(
            "epoch {:>3}  loss {:.5}  train accuracy {:.3}",
            entry.epoch,
            entry.loss,
            entry.accuracy
        );
        writeln!(file, "{}", serde_json::to_string(entry)?)?;
    }
    outcome.checkpoint.save(&args.out)?;

    let test_set = LabeledDataset::load(&args.data, Split::Test, channels)?;
    if !test_set.is_empty() {
        tracing::info!("test accuracy {:.4}", evaluate(&outcome.checkpoint, &test_set)?);
    }
    tracing::info!("wrote {}", args.out.display());
    Ok(())
}

fn read_arch(path: &Path) -> anyhow::Result<NetworkSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse().with_context(|| format!("parsing {}", path.display()))
}
