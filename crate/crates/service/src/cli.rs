//! Command line front end. Each subcommand runs the same workspace
//! operation as the matching HTTP endpoint, without a server.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use intenttune_core::augment::Thresholds;
use intenttune_core::intent::{IntentSpecification, Region};
use intenttune_core::mock::FixtureDetector;
use intenttune_core::orchestrator::{ConfigOverrides, RunState, RunStatus, StreamEvent};
use serde::Serialize;

use crate::config::{ServiceConfig, TransformerChoice};
use crate::error::{ServiceError, ServiceResult};
use crate::workspace::{EvaluateRequest, IntentRequest, Workspace};

#[derive(Debug, Parser)]
#[command(name = "intenttune", version, about = "Intent-guided fine-tuning workbench")]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true, env = "INTENTTUNE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Workspace directory; overrides the config file.
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or list projects.
    Project {
        #[command(subcommand)]
        action: ProjectAction,
    },
    /// Add training images to a project.
    Upload {
        #[arg(long)]
        project: String,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Turn an annotated request into a fine-tuning strategy.
    Intent(IntentArgs),
    /// Show the stored strategy, or replace it with `--set`.
    Spec {
        #[arg(long)]
        project: String,
        #[arg(long)]
        set: Option<PathBuf>,
    },
    /// Build the processed dataset.
    Preprocess {
        #[arg(long)]
        project: String,
        /// Detector fixture: boxes keyed by upload file name or image id.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// JSON file with threshold overrides.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// List captions, or edit them.
    Captions {
        #[arg(long)]
        project: String,
        #[arg(long)]
        folder: Option<String>,
        /// Replace the caption of this item (needs `--text`).
        #[arg(long, requires = "text")]
        set: Option<String>,
        #[arg(long)]
        text: Option<String>,
        /// Replace this string in every caption body in scope (needs `--replace`).
        #[arg(long, requires = "replace", conflicts_with = "set")]
        find: Option<String>,
        #[arg(long)]
        replace: Option<String>,
    },
    /// Start a training run and follow it until it ends.
    Train(TrainArgs),
    /// Print a run's status and metric series.
    Monitor {
        run_id: String,
        /// Keep polling until the run ends.
        #[arg(long)]
        follow: bool,
    },
    /// List checkpoints with covers and intent scores.
    Models {
        #[arg(long)]
        project: String,
    },
    /// Score a checkpoint.
    Evaluate {
        checkpoint_id: String,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Render one image from a checkpoint.
    Generate {
        checkpoint_id: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic portrait set (images, detections, regions, spec) to a directory.
    Fixture { out: PathBuf },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProjectAction {
    Create { name: String },
    List,
}

#[derive(Debug, Args)]
pub struct IntentArgs {
    #[arg(long)]
    pub project: String,
    #[arg(long, conflicts_with = "text_file")]
    pub text: Option<String>,
    #[arg(long)]
    pub text_file: Option<PathBuf>,
    /// JSON array of regions.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// JSON spec giving the concepts explicitly (rule backend).
    #[arg(long)]
    pub structured: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<TransformerChoice>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub project: String,
    /// JSON file of config overrides; flags below take precedence.
    #[arg(long)]
    pub overrides: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_model: Option<String>,
    /// Return right after the run starts.
    #[arg(long)]
    pub detach: bool,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> ServiceResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::invalid("invalid_file", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ServiceError::invalid("invalid_file", format!("{}: {e}", path.display())))
}

/// Writes a line to stdout, ignoring a closed pipe.
fn emit(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn print<T: Serialize>(value: &T) -> ServiceResult<()> {
    emit(serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn resolve_config(cli: &Cli) -> Result<ServiceConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(ws) = &cli.workspace {
        cfg.workspace = ws.clone();
    }
    Ok(cfg)
}

fn event_line(run_id: &str, e: &StreamEvent) -> Option<String> {
    Some(match e {
        StreamEvent::Step { .. } | StreamEvent::Samples { .. } => return None,
        StreamEvent::Metric { step, metric, value, .. } => format!("{run_id} step {step:>6}  {metric:<40} {value:.6}"),
        StreamEvent::Checkpoint { checkpoint_id, step, .. } => format!("{run_id} step {step:>6}  checkpoint {checkpoint_id}"),
        StreamEvent::Warning { message } => format!("{run_id} warning: {message}"),
        StreamEvent::Status { status, reason } => match reason {
            Some(r) => format!("{run_id} status {status}: {r}"),
            None => format!("{run_id} status {status}"),
        },
    })
}

fn print_series(state: &RunState) {
    emit(format_args!("{} {} ({} checkpoints)", state.run_id, state.status, state.checkpoints.len()));
    for (id, series) in &state.series {
        let points: Vec<String> = series.points.iter().map(|(s, v)| format!("{s}:{v:.4}")).collect();
        emit(format_args!("  {id:<40} {}", points.join(" ")));
    }
}

/// Runs one subcommand other than `serve`.
pub fn run(cli: Cli, ws: Workspace) -> ServiceResult<()> {
    match cli.command {
        Command::Project { action: ProjectAction::Create { name } } => print(&ws.create_project(&name)?),
        Command::Project { action: ProjectAction::List } => print(&ws.list_projects()?),
        Command::Upload { project, files } => {
            let mut payload = Vec::new();
            for f in files {
                let bytes = std::fs::read(&f).map_err(|e| ServiceError::invalid("invalid_file", format!("{}: {e}", f.display())))?;
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                payload.push((name, bytes));
            }
            print(&ws.upload_images(&project, payload)?)
        }
        Command::Intent(a) => {
            let text = match (a.text, a.text_file) {
                (Some(t), _) => t,
                (None, Some(f)) => std::fs::read_to_string(&f)
                    .map_err(|e| ServiceError::invalid("invalid_file", format!("{}: {e}", f.display())))?,
                (None, None) => return Err(ServiceError::invalid("invalid_request", "give --text or --text-file")),
            };
            let regions: Vec<Region> = a.regions.as_deref().map(load_json).transpose()?.unwrap_or_default();
            let structured: Option<IntentSpecification> = a.structured.as_deref().map(load_json).transpose()?;
            let req = IntentRequest { text: text.trim_end().to_string(), regions, backend: a.backend, structured };
            print(&ws.submit_intent(&a.project, req)?)
        }
        Command::Spec { project, set: Some(path) } => print(&ws.update_spec(&project, load_json(&path)?)?),
        Command::Spec { project, set: None } => print(&ws.spec(&project)?),
        Command::Preprocess { project, detections, thresholds } => {
            if let Some(path) = detections {
                let det = FixtureDetector::load(&path).map_err(|e| ServiceError::invalid("invalid_file", e))?;
                ws.set_detections(&project, &det)?;
            }
            let th: Option<Thresholds> = thresholds.as_deref().map(load_json).transpose()?;
            print(&ws.preprocess(&project, th)?)
        }
        Command::Captions { project, folder, set: Some(path), text: Some(text), .. } => {
            let _ = folder;
            print(&ws.put_caption(&project, &path, &text)?)
        }
        Command::Captions { project, folder, find: Some(find), replace: Some(replace), .. } => {
            let changed = ws.propagate(&project, &find, &replace, folder)?;
            print(&serde_json::json!({ "changed": changed }))
        }
        Command::Captions { project, folder, .. } => {
            for c in ws.captions(&project, folder.as_deref())? {
                emit(format_args!("{}\t{}", c.relative_path, c.caption.text));
            }
            Ok(())
        }
        Command::Train(a) => {
            let mut o: ConfigOverrides = a.overrides.as_deref().map(load_json).transpose()?.unwrap_or_default();
            o.epochs = a.epochs.or(o.epochs);
            o.batch_size = a.batch_size.or(o.batch_size);
            o.seed = a.seed.or(o.seed);
            o.base_model_id = a.base_model.or(o.base_model_id);
            let run = ws.train(&a.project, o)?;
            let run_id = run.state.run_id.clone();
            if a.detach {
                return print(&run);
            }
            let mut after = 0;
            loop {
                let view = ws.events(&run_id, after, Duration::from_secs(5))?;
                for e in &view.events {
                    if let Some(line) = event_line(&run_id, &e.event) {
                        emit(line);
                    }
                    after = e.seq;
                }
                if view.done && view.events.is_empty() {
                    break;
                }
            }
            print_series(&ws.run_status(&run_id)?.state);
            Ok(())
        }
        Command::Monitor { run_id, follow } => {
            let path = ws.orchestrator().runs_dir().join(&run_id).join("state.json");
            loop {
                let state: RunState = load_json(&path)
                    .map_err(|_| ServiceError::not_found("unknown_run", format!("unknown run {run_id}")))?;
                if !follow || !matches!(state.status, RunStatus::Pending | RunStatus::Training) {
                    print_series(&state);
                    return Ok(());
                }
                std::thread::sleep(Duration::from_millis(500));
            }
        }
        Command::Models { project } => print(&ws.list_models(&project)?),
        Command::Evaluate { checkpoint_id, prompt, samples } => {
            print(&ws.evaluate(&checkpoint_id, EvaluateRequest { prompt, metrics: None, samples })?)
        }
        Command::Generate { checkpoint_id, prompt, seed, out } => {
            let png = ws.generate(&checkpoint_id, &prompt, seed)?;
            std::fs::write(&out, png)?;
            emit(out.display());
            Ok(())
        }
        Command::Fixture { out } => write_fixture(&out),
        Command::Serve { .. } => Err(ServiceError::internal("serve is handled by the binary")),
    }
}

fn write_fixture(out: &Path) -> ServiceResult<()> {
    use intenttune_core::fixtures;
    let f = fixtures::portrait_fixture();
    std::fs::create_dir_all(out.join("images"))?;
    for img in &f.images {
        let name = img.name.clone().unwrap_or_else(|| format!("{}.png", img.id));
        std::fs::write(out.join("images").join(name), intenttune_core::imaging::encode_png(&img.pixels))?;
    }
    std::fs::write(out.join("detections.json"), f.detector.to_json())?;
    std::fs::write(out.join("regions.json"), serde_json::to_vec_pretty(&f.regions)?)?;
    std::fs::write(out.join("structured.json"), serde_json::to_vec_pretty(&fixtures::vincent_structured())?)?;
    std::fs::write(out.join("intent.txt"), fixtures::INTENT_TEXT)?;
    emit(out.display());
    Ok(())
}

/// Serves the API until interrupted.
pub async fn serve(ws: Workspace, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, crate::api::router(Arc::new(ws)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
