use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use serde::Serialize;
use serde_json::json;
use spillkit_core::config::{Config, WatchSource};
use spillkit_services::annotation::{
    annotation_router, spawn_worker, AnnotationState, AnnotationStore, StoreError, StoreSettings,
};
use spillkit_services::diffusion::Orchestrator;
use spillkit_services::monitor::{
    build_sinks, default_frame_sources, push_router, FrameEvaluator, FrameSource, Ingest, JsonlWriter, Monitor,
    MonitorStats, PushState,
};
use spillkit_services::vlm_client::VlmClient;
use tokio::sync::{Mutex, Notify};

use super::{revalidate, Output};
use crate::error::CliError;

async fn bind(addr: &str) -> Result<(tokio::net::TcpListener, SocketAddr), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::failed(format!("binding {addr}"), e))?;
    let local = listener.local_addr().map_err(|e| CliError::failed("listener", e))?;
    Ok((listener, local))
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for ctrl-c");
        std::future::pending::<()>().await;
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Address to listen on.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory of the built annotation UI, served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Import every file of this directory as a scene (id = file stem) before serving.
    #[arg(long)]
    import: Option<PathBuf>,
    /// Diffusion backend base URL.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Debug, Serialize)]
struct Listening {
    listen: String,
    imported: usize,
}

fn import_dir(store: &mut AnnotationStore, dir: &std::path::Path, seed: u64) -> Result<usize, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::failed(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut n = 0;
    for (i, f) in files.iter().enumerate() {
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match store.import_scene(&id, f, seed + i as u64) {
            Ok(_) => n += 1,
            Err(StoreError::Duplicate(_)) => {}
            Err(e) => return Err(CliError::failed(format!("importing {}", f.display()), e)),
        }
    }
    Ok(n)
}

pub async fn annotate(mut cfg: Config, args: AnnotateArgs, out: Output) -> Result<(), CliError> {
    if let Some(l) = &args.listen {
        cfg.annotation.listen = l.clone();
    }
    if let Some(d) = &args.data_dir {
        cfg.annotation.data_dir = d.clone();
    }
    if let Some(u) = &args.ui_dir {
        cfg.annotation.ui_dir = Some(u.clone());
    }
    if let Some(e) = &args.endpoint {
        cfg.diffusion.endpoint = e.clone();
    }
    revalidate(&cfg)?;
    let settings = StoreSettings {
        classes: cfg.classes.clone(),
        prompts: cfg.prompts.clone(),
        inpaint: cfg.inpaint.clone(),
        max_rejects: cfg.annotation.max_rejects,
        page_size: cfg.annotation.page_size,
    };
    let mut store = AnnotationStore::open(&cfg.annotation.data_dir, settings).map_err(|e| CliError::failed("annotation store", e))?;
    let imported = match &args.import {
        Some(dir) => import_dir(&mut store, dir, cfg.seed)?,
        None => 0,
    };
    let orch = Orchestrator::from_config(&cfg.diffusion, store.renders_dir())
        .map_err(|e| CliError::failed("diffusion backend", e))?;
    let token = std::env::var(&cfg.annotation.token_env).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        tracing::warn!(var = %cfg.annotation.token_env, "no token set; the annotation API is open");
    }
    let store = Arc::new(Mutex::new(store));
    let wake = Arc::new(Notify::new());
    let worker = spawn_worker(store.clone(), Arc::new(orch), wake.clone(), cfg.diffusion.parallelism, Duration::from_secs(5));
    let router = annotation_router(AnnotationState { store, token, wake }, cfg.annotation.ui_dir.clone());
    let (listener, local) = bind(&cfg.annotation.listen).await?;
    out.emit(
        &Listening {
            listen: local.to_string(),
            imported,
        },
        || format!("annotation server on http://{local} ({imported} scenes imported)"),
    )?;
    let served = axum::serve(listener, router).with_graceful_shutdown(shutdown_signal()).await;
    worker.abort();
    served.map_err(|e| CliError::failed("annotation server", e))
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Address of the frame push endpoint.
    #[arg(long)]
    listen: Option<String>,
    /// Extra watched directories as source_id=dir.
    #[arg(long = "watch", value_parser = parse_watch)]
    watch: Vec<WatchSource>,
    /// Scan every source once, wait for the results and exit.
    #[arg(long)]
    once: bool,
    /// Where pushed frames are stored; defaults to `<output_dir>/frames`.
    #[arg(long)]
    spool_dir: Option<PathBuf>,
    /// Vision model endpoint override.
    #[arg(long)]
    endpoint: Option<String>,
}

fn parse_watch(s: &str) -> Result<WatchSource, String> {
    let (id, dir) = s.split_once('=').ok_or_else(|| format!("expected source_id=dir, got '{s}'"))?;
    Ok(WatchSource {
        source_id: id.to_string(),
        dir: dir.into(),
        kind: "dir".into(),
    })
}

fn open_log(path: &std::path::Path) -> Result<Arc<JsonlWriter>, CliError> {
    JsonlWriter::open(path)
        .map(Arc::new)
        .map_err(|e| CliError::failed(path.display().to_string(), e))
}

async fn poll_all(
    sources: &mut [Box<dyn FrameSource>],
    tx: &tokio::sync::mpsc::Sender<spillkit_core::monitor::FrameEvent>,
) -> Result<(), CliError> {
    for s in sources.iter_mut() {
        let scan = s.poll().await;
        for (path, reason) in &scan.skipped {
            tracing::warn!(source = s.source_id(), file = %path.display(), %reason, "frame skipped");
        }
        for ev in scan.events {
            tx.send(ev).await.map_err(|_| CliError::failed("monitor", "pipeline stopped"))?;
        }
    }
    Ok(())
}

pub async fn monitor(mut cfg: Config, args: MonitorArgs, out: Output) -> Result<(), CliError> {
    if let Some(l) = &args.listen {
        cfg.monitor.listen = l.clone();
    }
    if let Some(e) = &args.endpoint {
        cfg.vlm.endpoint = e.clone();
    }
    cfg.monitor.watch.extend(args.watch.iter().cloned());
    revalidate(&cfg)?;
    let detector = Arc::new(VlmClient::from_config(&cfg.vlm).map_err(|e| CliError::failed("vision model client", e))?);
    let classes = match &cfg.monitor.query_classes {
        Some(ids) => ids.clone(),
        None => cfg.classes.ids().collect(),
    }
    .into_iter()
    .map(|id| cfg.classes.name(id).map(|n| (id, n.to_string())))
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| CliError::failed("classes", e))?;
    let evaluator = FrameEvaluator {
        detector,
        classes,
        policy: cfg.monitor.policy.clone(),
        rules: cfg.monitor.severity.clone(),
        retries: cfg.monitor.frame_retries,
        backoff: Duration::from_millis(cfg.monitor.retry_backoff_ms),
    };
    let monitor = Monitor {
        evaluator: Arc::new(evaluator),
        sinks: build_sinks(&cfg.monitor.sinks).map_err(|e| CliError::failed("alert sinks", e))?,
        detection_log: open_log(&cfg.monitor.detection_log)?,
        dead_letter: open_log(&cfg.monitor.dead_letter)?,
        parallelism: cfg.monitor.detection_parallelism,
        queue_capacity: cfg.monitor.queue_capacity,
    };
    let ingest = Ingest::new();
    let factories = default_frame_sources();
    let mut sources = Vec::new();
    for w in &cfg.monitor.watch {
        let f = factories.get(&w.kind).map_err(|e| CliError::Usage(e.to_string()))?;
        sources.push(f.build(w, ingest.clone()));
    }
    let (tx, handle) = monitor.spawn();

    if args.once {
        poll_all(&mut sources, &tx).await?;
        drop(tx);
        let stats = handle.await.map_err(|e| CliError::failed("monitor", e))?;
        return emit_stats(out, &stats);
    }

    let spool_dir = args.spool_dir.unwrap_or_else(|| cfg.output_dir.join("frames"));
    let router = push_router(PushState {
        ingest: ingest.clone(),
        spool_dir,
        frames: tx.clone(),
    });
    let (listener, local) = bind(&cfg.monitor.listen).await?;
    out.emit(&json!({ "listen": local.to_string(), "sources": cfg.monitor.watch.len() }), || {
        format!("monitor push endpoint on http://{local}/frames, watching {} sources", cfg.monitor.watch.len())
    })?;
    let server = tokio::spawn(async move { axum::serve(listener, router).await });
    let mut tick = tokio::time::interval(Duration::from_millis(cfg.monitor.poll_interval_ms.max(1)));
    let stop = shutdown_signal();
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => break,
            _ = tick.tick() => poll_all(&mut sources, &tx).await?,
        }
    }
    server.abort();
    drop(tx);
    let stats = handle.await.map_err(|e| CliError::failed("monitor", e))?;
    emit_stats(out, &stats)
}

fn emit_stats(out: Output, stats: &MonitorStats) -> Result<(), CliError> {
    out.emit(stats, || {
        format!(
            "{} frames ({} failed), {} alerts, {} deliveries, {} dead letters",
            stats.frames, stats.failed_frames, stats.alerts, stats.deliveries, stats.dead_letters
        )
    })
}
