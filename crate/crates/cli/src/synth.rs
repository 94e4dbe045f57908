use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use gbwb_core::dataset::{synthetic, write_dataset};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let (train, test) = synthetic::four_class(args.seed);
    write_dataset(&args.out, &[&train, &test])?;
    let arch = args.out.join("arch.txt");
    fs::write(&arch, synthetic::ARCH).with_context(|| format!("writing {}", arch.display()))?;
    tracing::info!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}
