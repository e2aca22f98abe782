use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use mentorloop::acceptance::{self, CriterionResult};
use mentorloop::config::PipelineConfig;
use mentorloop::evalkit::tsne::{tsne, TsneConfig};
use mentorloop::evalkit::{export_embeddings, write_embeddings_csv};
use mentorloop::mentorflow::{mine_images, oracle_annotate, MentoringSession, SessionStatus};
use mentorloop::pipeline::{evaluate_domains, mentored_set};
use mentorloop::service::{load_partial_labels, SessionStore};
use mentorloop::syndata::{self, Dataset};
use mentorloop::trainer::{self, InitMode, JsonLinesLog, TrainConfig};
use mentorloop::{Error, ImageSample, ModelCheckpoint, Result};

#[derive(Parser)]
#[command(name = "mentorloop", version, about = "Human-in-the-loop model updating for grid inspection")]
struct Cli {
    /// JSON pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `retrain.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the summary as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the original-domain model.
    TrainBaseline,
    /// Run the baseline on the new-domain pool and open a session per mined image.
    Mine,
    /// Serve the mentoring API until SIGTERM.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
    },
    /// Answer every open session from the hidden labels.
    OracleAnnotate,
    /// Apply label expansions to the mentored set and report their effect.
    Expand(ExpandArgs),
    /// Retrain with original and mentored data.
    Retrain(RecipeArgs),
    /// Evaluate a checkpoint on both domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate even when the checkpoint was trained on other data.
        #[arg(long)]
        force: bool,
    },
    /// Export feature embeddings and a 2-D t-SNE layout.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cap on rows fed to t-SNE.
        #[arg(long, default_value_t = 1500)]
        max_points: usize,
    },
    /// Run the acceptance suite.
    Accept,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    omnia: bool,
    #[arg(long)]
    healthy: bool,
}

#[derive(Args)]
struct RecipeArgs {
    #[arg(long)]
    transfer: bool,
    #[arg(long)]
    omnia: bool,
    #[arg(long)]
    healthy: bool,
    #[arg(long)]
    dann: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Acceptance,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Acceptance) => ExitCode::from(3),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let base = match cli.command {
        Command::Accept => PipelineConfig::acceptance(),
        _ => PipelineConfig::default(),
    };
    let cfg = PipelineConfig::load_over(base, cli.config.as_deref(), &cli.overrides)?;
    let out = Output { json: cli.json };
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::TrainBaseline => train_baseline(&cfg, &out),
        Command::Mine => mine(&cfg, &out),
        Command::Serve { addr } => serve(&cfg, *addr),
        Command::OracleAnnotate => oracle(&cfg, &out),
        Command::Expand(a) => expand(&cfg, a, &out),
        Command::Retrain(a) => retrain(&cfg, a, &out),
        Command::Eval { checkpoint, force } => eval(&cfg, checkpoint, *force, &out),
        Command::Embed { checkpoint, max_points } => embed(&cfg, checkpoint, *max_points, &out),
        Command::Accept => accept(&cfg, &out),
    }
}

struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("summary serializes"));
        } else {
            println!("{}", text());
        }
    }
}

fn load_data(cfg: &PipelineConfig) -> CliResult<Dataset> {
    let dir = &cfg.paths.dataset;
    let manifest = syndata::load_manifest(dir)
        .map_err(|e| Error::Precondition(format!("no dataset at {} ({e}); run gen-data", dir.display())))?;
    if manifest.config_hash != cfg.hash() {
        return Err(Failure::Usage(format!(
            "dataset at {} was generated with config {}, current config is {}",
            dir.display(),
            manifest.config_hash,
            cfg.hash()
        )));
    }
    Ok(syndata::load_dataset(dir)?)
}

fn partial_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.dataset.join("partial")
}

fn open_store(cfg: &PipelineConfig) -> Result<SessionStore> {
    SessionStore::open(&cfg.paths.sessions, cfg.arch.grid_shape(), Some(partial_dir(cfg)))
}

fn baseline_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.checkpoints.join("baseline.ckpt")
}

fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    ModelCheckpoint::load(path)
        .map_err(|e| Failure::Runtime(Error::Precondition(format!("cannot load {}: {e}", path.display()))))
}

fn gen_data(cfg: &PipelineConfig, out: &Output) -> CliResult<()> {
    let dataset = syndata::generate_dataset(&cfg.dataset)?;
    let manifest = syndata::save_dataset(&dataset, &cfg.paths.dataset)?;
    let counts: BTreeMap<&String, usize> = manifest.splits.iter().map(|(k, v)| (k, v.len())).collect();
    let summary = json!({
        "dataset": cfg.paths.dataset,
        "config_hash": manifest.config_hash,
        "digest": manifest.digest,
        "splits": counts,
    });
    out.emit(&summary, || {
        format!(
            "wrote {} ({} images, config {})",
            cfg.paths.dataset.display(),
            counts.values().sum::<usize>(),
            manifest.config_hash
        )
    });
    Ok(())
}

fn train_log(cfg: &PipelineConfig, tag: &str) -> CliResult<JsonLinesLog<BufWriter<fs::File>>> {
    let dir = cfg.paths.reports.join(tag);
    fs::create_dir_all(&dir)?;
    Ok(JsonLinesLog {
        out: BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?),
    })
}

fn train_baseline(cfg: &PipelineConfig, out: &Output) -> CliResult<()> {
    let data = load_data(cfg)?;
    let mut log = train_log(cfg, "baseline")?;
    let outcome = trainer::train_baseline(&cfg.arch, &data.train_original, &cfg.baseline, &cfg.hash(), &mut log)?;
    let path = baseline_path(cfg);
    fs::create_dir_all(&cfg.paths.checkpoints)?;
    outcome.checkpoint.save(&path)?;
    let last = outcome.history.last().map(|e| e.mean.total).unwrap_or(0.0);
    let summary = json!({
        "checkpoint": path,
        "id": outcome.checkpoint.meta.id,
        "epochs": outcome.history.len(),
        "final_loss": last,
    });
    out.emit(&summary, || format!("baseline {} saved to {} (final loss {last:.4})", outcome.checkpoint.meta.id, path.display()));
    Ok(())
}

fn mine(cfg: &PipelineConfig, out: &Output) -> CliResult<()> {
    let data = load_data(cfg)?;
    let baseline = load_checkpoint(&baseline_path(cfg))?;
    let mined = mine_images(&baseline.classifier, &data.pool_new, &cfg.mining)?;
    let mut store = open_store(cfg)?;
    let now = Utc::now();
    let mut created = 0;
    for m in mined.iter() {
        let session = MentoringSession::new(&m.sample.id, m.detections.clone(), now);
        if store.get(&session.id).is_ok() {
            continue;
        }
        store.create_session(session)?;
        created += 1;
    }
    store.flush()?;
    let summary = json!({
        "pool": data.pool_new.len(),
        "mined": mined.len(),
        "created": created,
        "progress": store.progress(),
    });
    out.emit(&summary, || {
        format!("mined {} of {} pool images, {created} new sessions", mined.len(), data.pool_new.len())
    });
    Ok(())
}

fn serve(cfg: &PipelineConfig, addr: std::net::SocketAddr) -> CliResult<()> {
    let store = open_store(cfg)?;
    let state = mentorloop::http::AppState {
        store: Arc::new(Mutex::new(store)),
        images_dir: cfg.paths.dataset.join("images"),
        cell_size: cfg.dataset.cell_size(),
    };
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(mentorloop::http::serve(state, addr))?;
    Ok(())
}

fn oracle(cfg: &PipelineConfig, out: &Output) -> CliResult<()> {
    let mut store = open_store(cfg)?;
    let open: Vec<MentoringSession> = store
        .state()
        .order
        .iter()
        .map(|id| store.state().sessions[id].clone())
        .filter(|s| s.status == SessionStatus::Open)
        .collect();
    let now = Utc::now();
    for session in &open {
        let sample = syndata::load_sample(&cfg.paths.dataset, &session.image_id)?;
        let truth = sample
            .full_label
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("{} has no hidden label", sample.id)))?;
        let answered = oracle_annotate(session, truth, cfg.oracle_iou, now)?;
        for d in session.unanswered() {
            store.submit_feedback(&session.id, &d, answered.feedback[&d].verdict, now)?;
        }
        store.complete_session(&session.id, now)?;
    }
    store.flush()?;
    let summary = json!({ "completed": open.len(), "progress": store.progress() });
    out.emit(&summary, || format!("annotated {} sessions", open.len()));
    Ok(())
}

/// Mentored samples from the partial labels written by completed sessions.
fn load_mentored(cfg: &PipelineConfig, data: &Dataset, with_flagged_healthy: bool) -> CliResult<Vec<ImageSample>> {
    let labels = load_partial_labels(&partial_dir(cfg))?;
    let mut out = Vec::new();
    for s in &data.pool_new {
        if let Some(pl) = labels.get(&s.id) {
            let mut m = s.with_partial(pl.clone());
            m.full_label = None;
            out.push(m);
        }
    }
    if with_flagged_healthy {
        let extra = mentored_set(&data.pool_new, &[], cfg.arch.grid_shape(), true)?;
        out.extend(extra.into_iter().filter(|s| !labels.contains_key(&s.id)));
    }
    if out.is_empty() {
        return Err(Failure::Runtime(Error::Precondition(
            "no completed sessions; run mine and annotate first".into(),
        )));
    }
    Ok(out)
}

fn recipe_config(cfg: &PipelineConfig, a: &RecipeArgs) -> TrainConfig {
    let mut t = cfg.retrain.clone();
    if a.transfer {
        t.init = InitMode::Transfer;
    }
    t.omnia |= a.omnia;
    t.healthy |= a.healthy;
    t.dann |= a.dann;
    t
}

fn expand(cfg: &PipelineConfig, a: &ExpandArgs, out: &Output) -> CliResult<()> {
    if !a.omnia && !a.healthy {
        return Err(Failure::Usage("pass --omnia and/or --healthy".into()));
    }
    let data = load_data(cfg)?;
    let baseline = load_checkpoint(&baseline_path(cfg))?;
    let tcfg = recipe_config(
        cfg,
        &RecipeArgs {
            transfer: false,
            omnia: a.omnia,
            healthy: a.healthy,
            dann: false,
        },
    );
    let mentored = load_mentored(cfg, &data, a.healthy && cfg.healthy_pool)?;
    let expanded = trainer::prepare_mentored(&baseline.classifier, &mentored, &tcfg)?;
    let dir = cfg.paths.dataset.join("expanded").join(tcfg.recipe_tag());
    fs::create_dir_all(&dir)?;
    let mut before = 0usize;
    let mut after = 0usize;
    for (m, e) in mentored.iter().zip(&expanded) {
        let pl = e.partial_label.as_ref().expect("expanded samples carry labels");
        before += m.partial_label.as_ref().map_or(0, |p| p.mask.count());
        after += pl.mask.count();
        fs::write(dir.join(format!("{}.json", e.id)), serde_json::to_vec(pl).map_err(Error::from)?)?;
    }
    let summary = json!({
        "images": expanded.len(),
        "annotated_cells_before": before,
        "annotated_cells_after": after,
        "output": dir,
    });
    out.emit(&summary, || {
        format!("{} images: annotated cells {before} -> {after}, written to {}", expanded.len(), dir.display())
    });
    Ok(())
}

fn retrain(cfg: &PipelineConfig, a: &RecipeArgs, out: &Output) -> CliResult<()> {
    let data = load_data(cfg)?;
    let baseline = load_checkpoint(&baseline_path(cfg))?;
    let tcfg = recipe_config(cfg, a);
    let tag = tcfg.recipe_tag();
    let mentored = load_mentored(cfg, &data, tcfg.healthy && cfg.healthy_pool)?;
    let mut log = train_log(cfg, &tag)?;
    let outcome = trainer::retrain(&baseline, &data.train_original, &mentored, &tcfg, &mut log)?;
    let path = cfg.paths.checkpoints.join(format!("{tag}.ckpt"));
    fs::create_dir_all(&cfg.paths.checkpoints)?;
    outcome.checkpoint.save(&path)?;
    let summary = json!({
        "recipe": tag,
        "checkpoint": path,
        "id": outcome.checkpoint.meta.id,
        "mentored": mentored.len(),
    });
    out.emit(&summary, || format!("{tag}: {} saved to {}", outcome.checkpoint.meta.id, path.display()));
    Ok(())
}

fn eval(cfg: &PipelineConfig, checkpoint: &Path, force: bool, out: &Output) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.meta.config_hash != cfg.hash() && !force {
        return Err(Failure::Runtime(Error::Precondition(format!(
            "checkpoint was trained under config {}, current config is {} (use --force)",
            ckpt.meta.config_hash,
            cfg.hash()
        ))));
    }
    let data = load_data(cfg)?;
    let report = evaluate_domains(&ckpt.classifier, &data, &cfg.eval)?;
    let dir = cfg.paths.reports.join(&ckpt.meta.recipe);
    fs::create_dir_all(&dir)?;
    let doc = json!({
        "checkpoint": ckpt.meta,
        "config_hash": cfg.hash(),
        "report": report,
    });
    fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&doc).map_err(Error::from)?)?;

    let table_path = cfg.paths.reports.join("report.json");
    let mut table: BTreeMap<String, serde_json::Value> = fs::read(&table_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    table.insert(ckpt.meta.recipe.clone(), doc.clone());
    fs::write(&table_path, serde_json::to_vec_pretty(&table).map_err(Error::from)?)?;

    out.emit(&doc, || {
        report
            .domains
            .iter()
            .map(|(d, r)| {
                format!(
                    "{} {:8} mAP {:.3}  precision@0.5 {:.3}  recall@0.5 {:.3}",
                    ckpt.meta.recipe,
                    d.as_str(),
                    r.map,
                    r.precision(0.5),
                    r.recall(0.5)
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}

fn embed(cfg: &PipelineConfig, checkpoint: &Path, max_points: usize, out: &Output) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    let samples: Vec<ImageSample> = data.eval_original.iter().chain(&data.eval_new).cloned().collect();
    let rows = export_embeddings(&ckpt.classifier, &samples)?;
    let dir = cfg.paths.reports.join(&ckpt.meta.recipe);
    fs::create_dir_all(&dir)?;
    write_embeddings_csv(&rows, &dir.join("embeddings.csv"))?;
    let stride = rows.len().div_ceil(max_points.max(1)).max(1);
    let picked: Vec<_> = rows.iter().step_by(stride).collect();
    let points: Vec<Vec<f64>> = picked
        .iter()
        .map(|r| r.features.iter().map(|&f| f as f64).collect())
        .collect();
    let layout = tsne(&points, &TsneConfig::default());
    let mut csv = String::from("domain,class_id,x,y\n");
    for (r, p) in picked.iter().zip(&layout) {
        csv.push_str(&format!("{},{},{},{}\n", r.domain.as_str(), r.class_id, p[0], p[1]));
    }
    fs::write(dir.join("tsne.csv"), csv)?;
    let summary = json!({ "rows": rows.len(), "tsne_points": layout.len(), "output": dir });
    out.emit(&summary, || format!("{} embeddings, {} t-SNE points in {}", rows.len(), layout.len(), dir.display()));
    Ok(())
}

fn accept(cfg: &PipelineConfig, out: &Output) -> CliResult<()> {
    let results: Vec<CriterionResult> = acceptance::run_all(cfg)?;
    fs::create_dir_all(&cfg.paths.reports)?;
    fs::write(
        cfg.paths.reports.join("acceptance.json"),
        serde_json::to_vec_pretty(&results).map_err(Error::from)?,
    )?;
    let passed = results.iter().all(|r| r.passed);
    out.emit(&json!({ "passed": passed, "criteria": results }), || {
        results.iter().map(|r| r.line()).collect::<Vec<_>>().join("\n")
    });
    if passed {
        Ok(())
    } else {
        Err(Failure::Acceptance)
    }
}
