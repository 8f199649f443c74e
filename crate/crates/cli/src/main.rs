use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cvr_core::benchmark::{embed_narrations, BenchmarkManifest};
use cvr_core::compose::ProviderKind;
use cvr_core::config::RunConfig;
use cvr_core::eval::{
    parse_report, render_subsets, render_table, serialize_report, Evaluator, RecallTable, Report, Setting,
};
use cvr_core::formats::{read_embeddings_file, validate_embeddings, write_embeddings_file, write_jsonl};
use cvr_core::store::{parse_frame_id, EmbeddingSet};
use cvr_core::{Embedding, Strategy};
use serde_json::json;

/// Composed video retrieval over precomputed embeddings.
#[derive(Debug, Parser)]
#[command(name = "cvr", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Restricts evaluation to one setting.
    #[arg(long, global = true)]
    setting: Option<Setting>,
    /// Restricts evaluation to one strategy.
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Prints both ranking stages when ranking a single query.
    #[arg(long, global = true)]
    explain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validates the manifest and embedding files and writes normalized copies.
    Ingest,
    /// Writes the global gallery and every local gallery.
    BuildGallery,
    /// Samples distractors per target and writes the completed manifest.
    SampleDistractors,
    /// Ranks the gallery for one query.
    Rank {
        #[arg(long)]
        query: String,
        /// Entries to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Evaluates every configured (setting, strategy) cell.
    Eval,
    /// Sweeps the number of stage-1 candidates.
    AblateNc,
    /// Prints the tables of a saved report.
    Report {
        /// Report file; defaults to report.json in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_deref().context("--config is required")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(setting) = cli.setting {
        cfg.eval.settings = vec![setting];
    }
    if let Some(strategy) = cli.strategy {
        cfg.eval.strategies = vec![strategy];
    }
    cfg.check_paths()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("starting worker pool")?;
    }
    match &cli.command {
        Command::Ingest => ingest(&cfg),
        Command::BuildGallery => build_gallery(&cfg),
        Command::SampleDistractors => sample_distractors(&cfg),
        Command::Rank { query, top } => rank(&cfg, &cli, query, *top),
        Command::Eval => eval(&cfg),
        Command::AblateNc => ablate_nc(&cfg),
        Command::Report { input } => report(&cfg, input.as_deref()),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.join(name))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn ingest(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    let dir = out_path(cfg, "embeddings")?;
    std::fs::create_dir_all(&dir)?;
    let mut sets = Vec::new();
    for src in &cfg.embeddings {
        let file = read_embeddings_file(&src.path)?;
        validate_embeddings(&file, &src.path)?;
        let target = dir.join(format!("{}.cvre", src.name));
        if src.frames {
            let records = file
                .records
                .iter()
                .map(|r| {
                    if parse_frame_id(&r.id).is_none() {
                        bail!("{}: record `{}` is not a `clip@frame` id", src.path.display(), r.id);
                    }
                    let e = Embedding::normalized(r.values.clone())?;
                    Ok((r.id.clone(), e.into_vec()))
                })
                .collect::<Result<Vec<_>>>()?;
            write_embeddings_file(&target, file.dim as usize, records)?;
        } else {
            EmbeddingSet::from_file(&file, &src.path)?.write_file(&target)?;
        }
        sets.push(json!({
            "name": src.name,
            "dim": file.dim,
            "records": file.records.len(),
            "frames": src.frames,
            "written": target,
        }));
    }
    let store = cfg.load_store()?;
    let gallery = manifest.global_gallery_ids();
    for name in [&cfg.pipeline.rank_embedding_source, &cfg.pipeline.filter_embedding_source] {
        let set = store.materialize(name, cfg.pipeline.temporal_mode)?;
        for id in &gallery {
            set.require(id).with_context(|| format!("embedding set `{name}`"))?;
        }
    }
    print_json(&json!({ "manifest": manifest.summary(), "embeddings": sets }))
}

fn build_gallery(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    let mut rows = vec![json!({ "gallery": "global", "clip_ids": manifest.global_gallery_ids() })];
    for q in manifest.queries() {
        rows.push(json!({
            "gallery": "local",
            "query_id": q.query_id,
            "clip_ids": manifest.build_local_gallery(q)?,
        }));
    }
    let path = out_path(cfg, "galleries.jsonl")?;
    write_jsonl(&path, &rows)?;
    print_json(&json!({ "summary": manifest.summary(), "written": path }))
}

fn sample_distractors(cfg: &RunConfig) -> Result<()> {
    let mut manifest = cfg.load_manifest()?;
    manifest.mark_roles();
    let withdrawn = if cfg.benchmark.dedup_overlaps { manifest.dedup_candidates()? } else { 0 };
    let added = if cfg.benchmark.group_narrations {
        let n = manifest.expand_equivalent_targets();
        manifest.mark_roles();
        n
    } else {
        0
    };
    let narrations = match &cfg.benchmark.narration_embeddings {
        Some(name) => {
            let store = cfg.load_store()?;
            (*store.materialize(name, cfg.pipeline.temporal_mode)?).clone()
        }
        None => {
            let providers = cfg.build_providers(None)?;
            embed_narrations(manifest.clips(), providers.get(ProviderKind::TextEmbedder)?)?
        }
    };
    let pools = manifest.sample_all_distractors(&narrations, cfg.seed)?;
    let manifest = BenchmarkManifest::new(
        manifest.clips().to_vec(),
        manifest.queries().to_vec(),
        manifest.distractors().clone(),
    )?;
    let manifest_path = out_path(cfg, "manifest.jsonl")?;
    manifest.save(&manifest_path)?;
    let pools_path = out_path(cfg, "distractor_pools.jsonl")?;
    write_jsonl(&pools_path, &pools)?;
    print_json(&json!({
        "seed": cfg.seed,
        "targets": pools.len(),
        "selected": pools.iter().map(|p| p.selected.len()).sum::<usize>(),
        "candidates_withdrawn": withdrawn,
        "targets_added": added,
        "manifest": manifest_path,
        "pools": pools_path,
    }))
}

fn rank(cfg: &RunConfig, cli: &Cli, query: &str, top: usize) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    let store = cfg.load_store()?;
    let providers = cfg.build_providers(Some(&manifest))?;
    let evaluator = Evaluator::new(&manifest, &store, &providers)?;
    let setting = cli.setting.unwrap_or(Setting::Global);
    let strategy = cli.strategy.unwrap_or(cfg.pipeline.strategy);
    let outcome = evaluator.rank_one(query, &cfg.eval_config(setting, strategy))?;
    let targets = &manifest
        .queries()
        .iter()
        .find(|q| q.query_id == query)
        .context("query vanished")?
        .target_ids;
    let mut out = std::io::stdout().lock();
    writeln!(out, "query {query} [{setting}, {strategy}]")?;
    if let Some(t) = &outcome.target_caption_used {
        writeln!(out, "caption: {}", t.caption.text)?;
        writeln!(out, "target caption: {}", t.text)?;
    }
    let line = |out: &mut std::io::StdoutLock, i: usize, id: &cvr_core::ClipId, score: f64| {
        let mark = if targets.contains(id) { "*" } else { " " };
        writeln!(out, "{:>4}{mark} {id}  {score:.4}", i + 1)
    };
    if cli.explain {
        if let Some(stage1) = &outcome.stage1_candidates {
            writeln!(out, "stage 1: visual candidates")?;
            for (i, e) in stage1.entries().iter().enumerate() {
                line(&mut out, i, &e.clip_id, e.score)?;
            }
            writeln!(out, "stage 2: re-ranked by target caption")?;
            for (i, e) in outcome.ranking.entries().iter().take(stage1.len()).enumerate() {
                line(&mut out, i, &e.clip_id, e.score)?;
            }
            return Ok(());
        }
    }
    writeln!(out, "ranking (top {top} of {})", outcome.ranking.len())?;
    for (i, e) in outcome.ranking.entries().iter().take(top).enumerate() {
        line(&mut out, i, &e.clip_id, e.score)?;
    }
    Ok(())
}

fn write_report(cfg: &RunConfig, stem: &str, tables: Vec<RecallTable>) -> Result<String> {
    let report = Report::new(cfg.seed, cfg.to_json(), tables);
    let json_path = out_path(cfg, &format!("{stem}.json"))?;
    std::fs::write(&json_path, serialize_report(&report)?)
        .with_context(|| format!("writing {}", json_path.display()))?;
    let mut text = render_table(&report.tables);
    for t in &report.tables {
        text.push('\n');
        text.push_str(&render_subsets(t));
    }
    std::fs::write(out_path(cfg, &format!("{stem}.txt"))?, &text)?;
    Ok(text)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    let store = cfg.load_store()?;
    let providers = cfg.build_providers(Some(&manifest))?;
    let evaluator = Evaluator::new(&manifest, &store, &providers)?.with_workers(cfg.workers);
    let mut tables = Vec::new();
    for &setting in &cfg.eval.settings {
        if cfg.eval.random_baseline {
            let ks = cfg.eval_config(setting, cfg.pipeline.strategy).ks;
            tables.push(evaluator.random_baseline(setting, &ks)?);
        }
        for strategy in cfg.strategies() {
            tables.push(evaluator.evaluate(&cfg.eval_config(setting, strategy), &cfg.label())?);
        }
    }
    print!("{}", write_report(cfg, "report", tables)?);
    Ok(())
}

fn ablate_nc(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.load_manifest()?;
    let store = cfg.load_store()?;
    let providers = cfg.build_providers(Some(&manifest))?;
    let evaluator = Evaluator::new(&manifest, &store, &providers)?.with_workers(cfg.workers);
    let mut tables = Vec::new();
    for &setting in &cfg.eval.settings {
        let base = cfg.eval_config(setting, Strategy::TfrCvr);
        tables.extend(evaluator.ablation_sweep_nc(&base, &cfg.eval.nc_values, &cfg.label())?);
    }
    print!("{}", write_report(cfg, "ablation_nc", tables)?);
    Ok(())
}

fn report(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let path = input.map_or_else(|| cfg.output_dir.join("report.json"), Path::to_path_buf);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report = parse_report(&text).with_context(|| format!("parsing {}", path.display()))?;
    RunConfig::from_json(report.config.clone()).context("report carries an unreadable config")?;
    print!("{}", render_table(&report.tables));
    println!("seed {}", report.seed);
    Ok(())
}
