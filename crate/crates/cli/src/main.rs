use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use archseek_cli::api;
use archseek_cli::config::{AppConfig, DEFAULT_BIND};
use archseek_cli::service::{router, AppState, ServiceSettings};
use archseek_core::eval::{run_report, write_report};
use archseek_core::index::{check, ingest, read_manifest, IngestOptions, MANIFEST_FILE};
use archseek_core::synth::{generate, SynthParams};
use archseek_core::{CaseDatabase, EvalDataset, RetrievalEngine, SystemVariant};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "archseek",
    version,
    about = "Multimodal search over architectural design cases"
)]
struct Cli {
    /// Config file (TOML or JSON)
    #[arg(long, global = true, env = "ARCHSEEK_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a database from a root of case folders
    Ingest {
        case_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file whose provider and vision model sections are used
        #[arg(long)]
        providers: Option<PathBuf>,
        /// Directory of recorded vision model replies
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run a text query
    Query {
        db: PathBuf,
        text: String,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        top: u64,
        /// Print the same JSON payload the service returns
        #[arg(long)]
        json: bool,
    },
    /// Precision/recall at k for system variants over a labeled dataset
    Eval {
        db: PathBuf,
        dataset: PathBuf,
        #[arg(
            long,
            default_value = "full,no_text_augmentation,no_image_embedding,text_only,random"
        )]
        variants: String,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        kmax: u64,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random baseline (defaults to the configured seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve the HTTP API (and the web UI bundle, if given)
    Serve {
        db: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Verify a database directory
    Check { db: PathBuf },
    /// Write a synthetic corpus with a labeled dataset
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = SynthParams::default().cases)]
        cases: usize,
        #[arg(long, default_value_t = SynthParams::default().queries)]
        queries: usize,
        #[arg(long, default_value_t = SynthParams::default().relevant_per_query)]
        relevant: usize,
        #[arg(long, default_value_t = SynthParams::default().images_per_case)]
        images: usize,
        #[arg(long, default_value_t = SynthParams::default().seed)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest {
            case_root,
            out,
            providers,
            replay,
            jobs,
        } => {
            let cfg = match providers {
                Some(p) => AppConfig::from_file(&p)?,
                None => cfg,
            };
            cmd_ingest(&cfg, &case_root, &out, replay.as_deref(), jobs)
        }
        Command::Query {
            db,
            text,
            top,
            json,
        } => cmd_query(&cfg, &db, &text, top as usize, json),
        Command::Eval {
            db,
            dataset,
            variants,
            kmax,
            out,
            seed,
        } => {
            let seed = seed.unwrap_or(cfg.seed);
            cmd_eval(&cfg, &db, &dataset, &variants, kmax as usize, &out, seed)
        }
        Command::Serve {
            db,
            bind,
            ui,
            replay,
        } => cmd_serve(cfg, db, bind, ui, replay),
        Command::Check { db } => cmd_check(&db),
        Command::Synth {
            out,
            cases,
            queries,
            relevant,
            images,
            seed,
        } => {
            let params = SynthParams {
                cases,
                queries,
                relevant_per_query: relevant,
                images_per_case: images,
                seed,
            };
            let corpus = generate(&params, &out)?;
            println!("cases:    {}", corpus.cases_dir.display());
            println!("fixtures: {}", corpus.fixtures_dir.display());
            println!(
                "dataset:  {} ({} queries)",
                corpus.dataset_path.display(),
                corpus.dataset.queries.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_engine(
    cfg: &AppConfig,
    db: &Path,
    replay: Option<&Path>,
) -> anyhow::Result<Arc<RetrievalEngine>> {
    let database =
        CaseDatabase::load(db).with_context(|| format!("loading database {}", db.display()))?;
    let gateway = cfg.query_gateway(database.manifest())?;
    let vlm = cfg.vision_model(replay)?;
    Ok(Arc::new(RetrievalEngine::new(
        Arc::new(database),
        Arc::new(gateway),
        vlm,
        cfg.engine,
    )?))
}

fn cmd_ingest(
    cfg: &AppConfig,
    root: &Path,
    out: &Path,
    replay: Option<&Path>,
    jobs: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let gateway = cfg.ingest_gateway()?;
    let Some(vlm) = cfg.vision_model(replay)? else {
        bail!("no vision model: pass --replay <fixtures> or configure [vlm]");
    };
    let previous = if out.join(MANIFEST_FILE).is_file() {
        Some(read_manifest(out)?)
    } else {
        None
    };
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let opts = IngestOptions {
        jobs,
        previous,
        ..Default::default()
    };
    let report = ingest(root, &gateway, vlm.as_ref(), &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.database.save(out)?;
    let m = report.database.manifest();
    println!(
        "ingested {} cases ({} entries, {} images) into {}",
        m.case_count,
        m.entry_count,
        m.image_count,
        out.display()
    );
    if report.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{} asset(s) failed:", report.failures.len());
    for f in &report.failures {
        eprintln!(
            "  case {} asset {} [{}]: {}",
            f.case_id, f.asset_id, f.stage, f.message
        );
    }
    Ok(ExitCode::from(1))
}

fn truncate(s: &str, n: usize) -> String {
    let one_line = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= n {
        return one_line;
    }
    let mut t: String = one_line.chars().take(n.saturating_sub(3)).collect();
    t.push_str("...");
    t
}

fn cmd_query(
    cfg: &AppConfig,
    db: &Path,
    text: &str,
    top: usize,
    json: bool,
) -> anyhow::Result<ExitCode> {
    let engine = load_engine(cfg, db, None)?;
    let result = engine.text_query(text)?;
    let payload = api::text_result(engine.database(), text, &result, Some(top));
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &payload)?;
        writeln!(out)?;
        return Ok(ExitCode::SUCCESS);
    }
    writeln!(
        out,
        "{:>4}  {:>6}  {:>7}  {:<28}  best match",
        "rank", "case", "score", "title"
    )?;
    for (i, c) in payload.cards.iter().enumerate() {
        writeln!(
            out,
            "{:>4}  {:>6}  {:>7.3}  {:<28}  {}",
            i + 1,
            c.case_id,
            c.score,
            truncate(&c.title, 28),
            truncate(c.snippet.as_deref().unwrap_or(""), 60)
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    cfg: &AppConfig,
    db: &Path,
    dataset: &Path,
    variants: &str,
    kmax: usize,
    out: &Path,
    seed: u64,
) -> anyhow::Result<ExitCode> {
    let engine = load_engine(cfg, db, None)?;
    let dataset = EvalDataset::load(dataset)?;
    let variants = SystemVariant::parse_list(variants)?;
    let report = run_report(&engine, &dataset, &variants, kmax, seed)?;
    write_report(&report, out)?;
    println!(
        "{} queries over {} cases; report in {}",
        report.query_count,
        report.case_count,
        out.display()
    );
    let k = kmax.min(5);
    println!(
        "{:<22} {:>12} {:>12}",
        "variant",
        format!("P@{k}"),
        format!("R@{kmax}")
    );
    for v in &report.variants {
        let (p, r) = (
            v.at(k).expect("k within range"),
            v.at(kmax).expect("kmax within range"),
        );
        println!(
            "{:<22} {:>5.3}±{:<6.3} {:>5.3}±{:<6.3}",
            v.variant.key(),
            p.precision_mean,
            p.precision_sem,
            r.recall_mean,
            r.recall_sem
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(db: &Path) -> anyhow::Result<ExitCode> {
    let report = check(db)?;
    let m = &report.manifest;
    println!(
        "{}: {} cases, {} entries, {} images (text {} dim {}, crossmodal {} dim {})",
        m.format_version,
        m.case_count,
        m.entry_count,
        m.image_count,
        m.text.model_name,
        m.text.dim,
        m.crossmodal.model_name,
        m.crossmodal.dim
    );
    if report.violations.is_empty() {
        println!("ok");
        return Ok(ExitCode::SUCCESS);
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    Ok(ExitCode::from(1))
}

fn cmd_serve(
    cfg: AppConfig,
    db: Option<PathBuf>,
    bind: Option<String>,
    ui: Option<PathBuf>,
    replay: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let Some(db) = db.or_else(|| cfg.database.clone()) else {
        bail!("no database: pass a path or set `database` in the config");
    };
    let engine = load_engine(&cfg, &db, replay.as_deref())?;
    let bind = bind
        .or_else(|| cfg.bind.clone())
        .unwrap_or_else(|| DEFAULT_BIND.to_string());
    let settings = ServiceSettings {
        seed: cfg.seed,
        session_ttl: Duration::from_secs(cfg.session_ttl_secs),
        max_upload_bytes: cfg.max_upload_bytes,
        result_limit: cfg.result_limit,
        snapshot_dir: cfg.snapshot_dir.clone(),
        ui_dir: ui.or_else(|| cfg.ui_dir.clone()),
    };
    let app = router(AppState::new(engine.clone(), settings));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        println!(
            "serving {} cases on http://{}",
            engine.database().len(),
            listener.local_addr()?
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(ExitCode::SUCCESS)
    })
}
