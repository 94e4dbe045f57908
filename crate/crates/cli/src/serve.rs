use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context};
use gbwb_service::{bind, parse_labels, router, serve, AppState, ImagePool, Store};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, env = "GBWB_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Image pool laid out as `<person>/<image_id>.png`.
    #[arg(long, env = "GBWB_IMAGES")]
    images: PathBuf,
    /// Append-only annotation store.
    #[arg(long, env = "GBWB_STORE")]
    store: PathBuf,
    /// Label list, one per line, replacing the 11 default labels.
    #[arg(long)]
    labels_file: Option<PathBuf>,
    /// Compiled frontend served for paths outside the API.
    #[arg(long, env = "GBWB_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Seed for task draws; random when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let pool = ImagePool::scan(&args.images).with_context(|| format!("scanning {}", args.images.display()))?;
    if pool.is_empty() {
        bail!("no PNG images under {}", args.images.display());
    }
    let labels = match &args.labels_file {
        Some(path) => {
            let labels = parse_labels(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?);
            if labels.is_empty() {
                bail!("{} lists no labels", path.display());
            }
            Some(labels)
        }
        None => None,
    };
    let store = Store::open(&args.store)?;
    let state = AppState::new(pool, store, labels, args.seed);
    let images = state.pool().len();
    let app = router(state, args.static_dir);

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = bind(args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        let addr = listener.local_addr()?;
        eprintln!("listening on http://{addr}");
        tracing::info!("serving {images} images, storing responses in {}", args.store.display());
        serve(listener, app).await?;
        Ok(())
    })
}
