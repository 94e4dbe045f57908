use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gbwb_core::dataset::{load_image, read_manifest, Split};
use gbwb_core::mapfile::{quantize, write_map};
use gbwb_core::saliency::{gb_map, saliency_difference, top_percent_mask, ChannelReduction, SaliencyMap};
use gbwb_core::{render, Checkpoint, Tensor};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trained checkpoint (its `.arch` sidecar must sit next to it).
    #[arg(long)]
    model: PathBuf,
    /// A PNG image, or a dataset root to map every image of one split.
    #[arg(long)]
    image: PathBuf,
    /// Class to explain, by name or index. Defaults to the labeled class
    /// when mapping a dataset.
    #[arg(long)]
    class: Option<String>,
    /// Second class: writes relu(GB(class) - GB(diff-class)) instead.
    #[arg(long)]
    diff_class: Option<String>,
    /// Also write an overlay of the top fraction of pixels, e.g. 0.05.
    #[arg(long)]
    mask_top: Option<f64>,
    #[arg(long, default_value = "sum")]
    reduction: ChannelReduction,
    /// Dataset split to map when `--image` is a directory.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Output `.pgm` path for one image, or an output directory for a
    /// dataset.
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (expected train or test)")),
    }
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if let Some(p) = args.mask_top {
        if !(p > 0.0 && p <= 1.0) {
            bail!("--mask-top must lie in (0, 1], got {p}");
        }
    }
    let ck = Checkpoint::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let spec = ck.spec();
    let class = args.class.as_deref().map(|c| spec.resolve_class(c)).transpose()?;
    let diff = args.diff_class.as_deref().map(|c| spec.resolve_class(c)).transpose()?;
    if let (Some(y), Some(z)) = (class, diff) {
        if y == z {
            bail!("--diff-class must differ from --class (both are {})", spec.class_name(y));
        }
    }
    let channels = spec.input_shape()[0];

    if args.image.is_dir() {
        let entries = read_manifest(&args.image)?;
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        let mut written = 0;
        for entry in entries.iter().filter(|e| e.split == args.split) {
            let path = args.image.join(&entry.class).join(format!("{}.png", entry.image_id));
            let y = match class {
                Some(y) => y,
                None => spec.resolve_class(&entry.class)?,
            };
            let out = args.out.join(format!("{}.pgm", entry.image_id));
            map_one(&ck, &path, &entry.image_id, y, diff, &args, channels, &out)?;
            written += 1;
        }
        if written == 0 {
            bail!("no {} images listed in {}", args.split, args.image.display());
        }
        tracing::info!("wrote {written} maps to {}", args.out.display());
    } else {
        let Some(y) = class else {
            bail!("--class is required for a single image");
        };
        let image_id = args
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .context("image file name is not UTF-8")?
            .to_string();
        map_one(&ck, &args.image, &image_id, y, diff, &args, channels, &args.out)?;
        tracing::info!("wrote {}", args.out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn map_one(
    ck: &Checkpoint,
    path: &Path,
    image_id: &str,
    y: usize,
    diff: Option<usize>,
    args: &Args,
    channels: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let image = load_image(path, channels)?;
    let values: Tensor = match diff {
        Some(z) => saliency_difference(ck, &image, y, z, args.reduction)?,
        None => gb_map(ck, &image, y, image_id, args.reduction)?.values().clone(),
    };
    let map = quantize(&SaliencyMap::new(image_id, y, values)?)?;
    write_map(out, &map)?;
    if let Some(p) = args.mask_top {
        let mask = top_percent_mask(map.values(), p)?;
        render::save_highlight(&out.with_extension("mask.png"), map.values(), &mask, Some(&image))?;
    }
    Ok(())
}
