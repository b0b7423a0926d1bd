use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use clap::Args;
use reasonloop_core::backends::{BackendConfig, BackendMode, Backends};
use reasonloop_core::engine::{Engine, FrozenClock};
use reasonloop_core::reasoner::{Reasoner, TemplateSet};
use reasonloop_core::ImageStore;
use serde::Serialize;

/// Options shared by the subcommands that call backends.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Backend configuration (JSON). Defaults to the simulated world.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Directory of prompt template overrides (`<name>.txt`).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Output directory; images are stored under `<out>/images`.
    #[arg(long, default_value = "reasonloop-out")]
    pub out: PathBuf,
    /// Master seed. A random one is drawn and reported when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum sessions or items in flight.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

pub struct Context {
    pub store: Arc<ImageStore>,
    pub backends: Backends,
    pub templates: Arc<TemplateSet>,
    pub seed: u64,
    pub out: PathBuf,
    pub concurrency: usize,
    live: bool,
}

impl Context {
    pub fn open(args: &CommonArgs) -> anyhow::Result<Self> {
        let config = match &args.backend {
            Some(path) => BackendConfig::load(path)?,
            None => BackendConfig::default(),
        };
        let templates = match &args.templates {
            Some(dir) => {
                anyhow::ensure!(dir.is_dir(), "template directory {} does not exist", dir.display());
                TemplateSet::load_dir(dir)?
            }
            None => TemplateSet::builtin(),
        };
        let seed = args.seed.unwrap_or_else(rand::random);
        tracing::info!(seed, "master seed");
        let store = Arc::new(
            ImageStore::at(&args.out).with_context(|| format!("cannot open output directory {}", args.out.display()))?,
        );
        let backends = config.build(store.clone(), seed)?;
        Ok(Self {
            store,
            backends,
            templates: Arc::new(templates),
            seed,
            out: args.out.clone(),
            concurrency: args.concurrency.max(1),
            live: config.mode == BackendMode::Live,
        })
    }

    pub fn reasoner(&self) -> Reasoner {
        Reasoner::new(self.backends.reasoner.clone(), self.templates.clone())
    }

    /// Mock backends run on a frozen clock so that traces are reproducible.
    pub fn engine(&self) -> Engine {
        let engine = Engine::new(self.reasoner(), self.backends.generator.clone());
        if self.live {
            engine
        } else {
            engine.with_clock(Arc::new(FrozenClock))
        }
    }

    /// `path` relative to the output directory, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.out).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&to_json(value)?)?;
    stdout.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, to_json(value)?).with_context(|| format!("cannot write {}", path.display()))
}
