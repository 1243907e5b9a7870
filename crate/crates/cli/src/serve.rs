use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bubbleview_core::config::{validate_config, ExperimentConfig};
use bubbleview_core::imaging::BlurCache;
use bubbleview_service::{AppState, Experiment, ImageAssets, ServiceConfig, SystemClock};
use rayon::prelude::*;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub configs: Vec<PathBuf>,
    pub stimuli: PathBuf,
    pub cache: PathBuf,
    pub log: PathBuf,
    pub addr: SocketAddr,
    pub service: ServiceConfig,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let cfg = ExperimentConfig::load(path).map_err(|e| match e {
        bubbleview_core::config::ConfigError::Io { .. } => CliError::io(path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })?;
    validate_config(cfg).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Loads one experiment's stimuli, blurring through the cache.
pub fn load_experiment(cfg: ExperimentConfig, stimuli: &Path, cache: &BlurCache) -> Result<Experiment, CliError> {
    let images = cfg
        .image_ids
        .par_iter()
        .map(|id| {
            ImageAssets::from_dir(id, stimuli, cache, cfg.blur_sigma_px)
                .map(|a| (id.clone(), a))
                .map_err(|e| CliError::Io(e.to_string()))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    Ok(Experiment::new(cfg, images))
}

pub fn build_state(opts: &ServeOptions) -> Result<Arc<AppState>, CliError> {
    if opts.service.experimenter_key.is_empty() {
        return Err(CliError::Validation("an experimenter key is required".into()));
    }
    let cache = BlurCache::new(&opts.cache);
    let mut experiments = Vec::new();
    for path in &opts.configs {
        let cfg = load_config(path)?;
        experiments.push(load_experiment(cfg, &opts.stimuli, &cache)?);
    }
    if experiments.is_empty() {
        return Err(CliError::Validation("no experiment config given".into()));
    }
    let state = AppState::new(&opts.log, experiments, Arc::new(SystemClock), opts.service.clone())
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(Arc::new(state))
}

/// Blocks serving until ctrl-c.
pub fn run(opts: &ServeOptions) -> Result<(), CliError> {
    let state = build_state(opts)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(opts.addr)
            .await
            .map_err(|e| CliError::Io(format!("bind {}: {e}", opts.addr)))?;
        let addr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
        tracing::info!(%addr, log = %opts.log.display(), "serving");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        bubbleview_service::serve_until(listener, state, shutdown)
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}
