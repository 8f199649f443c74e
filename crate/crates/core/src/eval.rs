//! Recall@k evaluation in the global and local settings, subset breakdowns,
//! candidate-count sweeps and reports.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{BenchmarkManifest, QueryRecord};
use crate::compose::{classify_instruction, embed_text, InstructionClass, ProviderKind, Providers};
use crate::embedding::ClipId;
use crate::error::{CvrError, Result};
use crate::fusion::ComposedQuery;
use crate::index::{GalleryIndex, RankedList};
use crate::pipeline::{rank_query, PipelineConfig, RetrievalOutcome, SearchSpace, Strategy};
use crate::store::{EmbeddingSet, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Every query, target and distractor clip of the benchmark.
    Global,
    /// Targets and distractors from the query's own source video.
    Local,
}

impl Setting {
    pub fn default_ks(self) -> Vec<usize> {
        match self {
            Setting::Global => vec![1, 5, 10],
            Setting::Local => vec![1, 2, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Global => "global",
            Setting::Local => "local",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = CvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Setting::Global),
            "local" => Ok(Setting::Local),
            _ => Err(CvrError::Config(format!("unknown setting `{s}` (expected global or local)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub setting: Setting,
    pub ks: Vec<usize>,
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_filter: Option<InstructionClass>,
}

impl EvalConfig {
    pub fn new(setting: Setting, pipeline: PipelineConfig) -> Self {
        EvalConfig {
            setting,
            ks: setting.default_ks(),
            pipeline,
            subset_filter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CvrError::Config(format!(
                "ks must be positive and strictly increasing, got {:?}",
                self.ks
            )));
        }
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Temporal,
    ObjectCentred,
}

impl Subset {
    pub fn contains(self, class: Option<InstructionClass>) -> bool {
        match self {
            Subset::All => true,
            Subset::Temporal => class == Some(InstructionClass::Temporal),
            Subset::ObjectCentred => class == Some(InstructionClass::ObjectCentred),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    /// 1-based rank of the first retrieved target.
    pub hit_rank: Option<usize>,
    pub gallery_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_class: Option<InstructionClass>,
    /// Provider failure that prevented ranking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryResult {
    pub fn hit(&self, k: usize) -> bool {
        self.hit_rank.is_some_and(|r| r <= k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub subset: Subset,
    pub queries: usize,
    pub failed: usize,
    /// Recall per entry of the table's `ks`.
    pub recall: Vec<f64>,
    /// Fraction of queries ranked without provider errors.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub label: String,
    pub setting: Setting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    pub ks: Vec<usize>,
    pub rows: Vec<SubsetRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<QueryResult>,
}

impl RecallTable {
    pub fn row(&self, subset: Subset) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    /// Recall for `subset` at `k`, if `k` is one of the table's cut-offs.
    pub fn recall(&self, subset: Subset, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        Some(self.row(subset)?.recall[i])
    }
}

/// Whether any target is among the first `k` entries. Several targets in
/// the top `k` still count as one hit.
pub fn hit_at_k(ranking: &RankedList, targets: &BTreeSet<ClipId>, k: usize) -> bool {
    ranking.ids().take(k).any(|id| targets.contains(id))
}

/// 1-based rank of the first target in `ranking`.
pub fn first_hit_rank(ranking: &RankedList, targets: &BTreeSet<ClipId>) -> Option<usize> {
    ranking.ids().position(|id| targets.contains(id)).map(|p| p + 1)
}

/// Fraction of results with a hit within the first `k`; failed queries are
/// misses.
pub fn recall_at_k(results: &[QueryResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.hit(k)).count() as f64 / results.len() as f64
}

/// Probability that a uniformly random ranking of `n` clips with `m` targets
/// puts a target in the first `k`: 1 - C(n-m, k) / C(n, k).
pub fn random_recall(n: usize, m: usize, k: usize) -> f64 {
    let k = k.min(n);
    if m == 0 {
        return 0.0;
    }
    if k > n - m.min(n) {
        return 1.0;
    }
    let miss: f64 = (0..k).map(|i| (n - m - i) as f64 / (n - i) as f64).product();
    1.0 - miss
}

pub fn aggregate(results: &[QueryResult], ks: &[usize]) -> Vec<SubsetRow> {
    [Subset::All, Subset::Temporal, Subset::ObjectCentred]
        .into_iter()
        .map(|subset| {
            let sel: Vec<QueryResult> = results
                .iter()
                .filter(|r| subset.contains(r.instruction_class))
                .cloned()
                .collect();
            let failed = sel.iter().filter(|r| r.error.is_some()).count();
            SubsetRow {
                subset,
                queries: sel.len(),
                failed,
                recall: ks.iter().map(|&k| recall_at_k(&sel, k)).collect(),
                coverage: if sel.is_empty() {
                    0.0
                } else {
                    (sel.len() - failed) as f64 / sel.len() as f64
                },
            }
        })
        .collect()
}

struct Prepared {
    cfg: EvalConfig,
    rank_set: std::sync::Arc<EmbeddingSet>,
    filter_set: std::sync::Arc<EmbeddingSet>,
    global: Option<(GalleryIndex, GalleryIndex)>,
}

/// Runs pipelines over a manifest with a fixed set of embeddings and
/// providers.
pub struct Evaluator<'a> {
    manifest: &'a BenchmarkManifest,
    store: &'a EmbeddingStore,
    providers: &'a Providers,
    queries: Vec<ComposedQuery>,
    workers: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(manifest: &'a BenchmarkManifest, store: &'a EmbeddingStore, providers: &'a Providers) -> Result<Self> {
        Ok(Evaluator {
            manifest,
            store,
            providers,
            queries: manifest.composed_queries()?,
            workers: 0,
        })
    }

    /// Worker threads for per-query evaluation; 0 uses all cores.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    fn prepare(&self, cfg: &EvalConfig) -> Result<Prepared> {
        cfg.validate()?;
        let p = &cfg.pipeline;
        let rank_set = self.store.materialize(&p.rank_embedding_source, p.temporal_mode)?;
        let filter_set = self.store.materialize(&p.filter_embedding_source, p.temporal_mode)?;
        let global = match cfg.setting {
            Setting::Global => {
                let ids = self.manifest.global_gallery_ids();
                let rank = rank_set.index_over(&ids)?;
                let filter = if p.filter_embedding_source == p.rank_embedding_source {
                    rank.clone()
                } else {
                    filter_set.index_over(&ids)?
                };
                Some((rank, filter))
            }
            Setting::Local => None,
        };
        Ok(Prepared {
            cfg: cfg.clone(),
            rank_set,
            filter_set,
            global,
        })
    }

    fn record(&self, query_id: &str) -> Result<(usize, &QueryRecord)> {
        self.manifest
            .queries()
            .iter()
            .enumerate()
            .find(|(_, q)| q.query_id == query_id)
            .ok_or_else(|| CvrError::Config(format!("unknown query `{query_id}`")))
    }

    fn instruction_class(&self, rec: &QueryRecord) -> Option<InstructionClass> {
        if rec.instruction_class.is_some() {
            return rec.instruction_class;
        }
        let provider = self.providers.get(ProviderKind::Classifier).ok()?;
        match classify_instruction(&rec.instruction, &self.providers.classify_template, provider) {
            Ok(c) => Some(c),
            Err(e) => {
                tracing::warn!(query = rec.query_id, error = %e, "instruction left unlabelled");
                None
            }
        }
    }

    fn run(&self, prep: &Prepared, q: &ComposedQuery) -> Result<RetrievalOutcome> {
        let p = &prep.cfg.pipeline;
        let mut q = q.clone();
        q.visual_embedding = prep.rank_set.get(&q.query_clip).cloned();
        if p.strategy.needs_instruction_embedding() {
            q.instruction_embedding = Some(embed_text(
                &q.instruction_text,
                self.providers.get(ProviderKind::TextEmbedder)?,
            )?);
        }
        let filter_query = prep.filter_set.get(&q.query_clip);
        if p.strategy == Strategy::TfrCvr && filter_query.is_none() {
            return Err(CvrError::MissingEmbedding(format!("clip `{}`", q.query_clip)));
        }
        let local;
        let (rank, filter) = match &prep.global {
            Some((r, f)) => (r, f),
            None => {
                let r = prep.rank_set.index_over(&q.local_gallery_ids)?;
                let f = prep.filter_set.index_over(&q.local_gallery_ids)?;
                local = (r, f);
                (&local.0, &local.1)
            }
        };
        rank_query(&q, SearchSpace::new(rank, filter, filter_query)?, p, self.providers)
    }

    /// Ranks a single query.
    pub fn rank_one(&self, query_id: &str, cfg: &EvalConfig) -> Result<RetrievalOutcome> {
        let prep = self.prepare(cfg)?;
        let (i, _) = self.record(query_id)?;
        self.run(&prep, &self.queries[i])
    }

    fn evaluate_prepared(&self, prep: &Prepared, label: &str) -> Result<RecallTable> {
        let cfg = &prep.cfg;
        let selected: Vec<(&QueryRecord, &ComposedQuery, Option<InstructionClass>)> = self
            .manifest
            .queries()
            .iter()
            .zip(&self.queries)
            .map(|(r, q)| (r, q, self.instruction_class(r)))
            .filter(|(_, _, c)| cfg.subset_filter.is_none() || *c == cfg.subset_filter)
            .collect();
        let work = || {
            selected
                .par_iter()
                .map(|(r, q, class)| {
                    let outcome = self.run(prep, q);
                    let (hit_rank, gallery_size, error) = match outcome {
                        Ok(o) => (first_hit_rank(&o.ranking, &q.target_ids), o.ranking.len(), None),
                        Err(e) if e.is_provider_error() => (None, 0, Some(e.to_string())),
                        Err(e) => return Err(e),
                    };
                    Ok(QueryResult {
                        query_id: r.query_id.clone(),
                        hit_rank,
                        gallery_size,
                        instruction_class: *class,
                        error,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        let mut results = if self.workers == 0 {
            work()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| CvrError::Config(format!("worker pool: {e}")))?
                .install(work)?
        };
        results.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        if let Some(smallest) = results.iter().filter(|r| r.error.is_none()).map(|r| r.gallery_size).min() {
            if let Some(&k) = cfg.ks.iter().find(|&&k| k > smallest) {
                tracing::warn!(k, gallery = smallest, "k exceeds the smallest gallery; clamped");
            }
        }
        Ok(RecallTable {
            label: label.to_owned(),
            setting: cfg.setting,
            strategy: Some(cfg.pipeline.strategy),
            n_c: (cfg.pipeline.strategy == Strategy::TfrCvr).then_some(cfg.pipeline.n_c),
            ks: cfg.ks.clone(),
            rows: aggregate(&results, &cfg.ks),
            results,
        })
    }

    /// Runs the configured pipeline on every query and aggregates recall.
    /// Provider failures are recorded per query and counted as misses.
    pub fn evaluate(&self, cfg: &EvalConfig, label: &str) -> Result<RecallTable> {
        let prep = self.prepare(cfg)?;
        self.evaluate_prepared(&prep, label)
    }

    /// One evaluation per candidate count. Provider responses are cached, so
    /// later points reuse earlier captions and embeddings.
    pub fn ablation_sweep_nc(&self, base: &EvalConfig, nc_values: &[usize], label: &str) -> Result<Vec<RecallTable>> {
        if base.pipeline.strategy != Strategy::TfrCvr {
            return Err(CvrError::Config("the n_c sweep needs the tfr-cvr strategy".into()));
        }
        let mut prep = self.prepare(base)?;
        nc_values
            .iter()
            .map(|&n_c| {
                prep.cfg.pipeline.n_c = n_c;
                self.evaluate_prepared(&prep, label)
            })
            .collect()
    }

    /// Expected recall of a uniformly random ranking of each query's gallery.
    pub fn random_baseline(&self, setting: Setting, ks: &[usize]) -> Result<RecallTable> {
        let global = self.manifest.global_gallery_ids();
        let per_query: Vec<(usize, usize)> = self
            .queries
            .iter()
            .map(|q| match setting {
                Setting::Global => {
                    let n = global.len() - usize::from(global.contains(&q.query_clip));
                    (n, q.target_ids.iter().filter(|t| global.contains(*t)).count())
                }
                Setting::Local => (
                    q.local_gallery_ids.len(),
                    q.target_ids.intersection(&q.local_gallery_ids).count(),
                ),
            })
            .collect();
        let n = per_query.len().max(1) as f64;
        let recall = ks
            .iter()
            .map(|&k| per_query.iter().map(|&(g, m)| random_recall(g, m, k)).sum::<f64>() / n)
            .collect();
        let mut rows = aggregate(&[], ks);
        rows[0] = SubsetRow {
            subset: Subset::All,
            queries: per_query.len(),
            failed: 0,
            recall,
            coverage: 1.0,
        };
        Ok(RecallTable {
            label: "Random".into(),
            setting,
            strategy: None,
            n_c: None,
            ks: ks.to_vec(),
            rows,
            results: Vec::new(),
        })
    }
}

pub const REPORT_VERSION: u32 = 1;

/// A run's tables with the seed and effective configuration that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tables: Vec<RecallTable>,
}

impl Report {
    pub fn new(seed: u64, config: serde_json::Value, tables: Vec<RecallTable>) -> Self {
        Report {
            version: REPORT_VERSION,
            seed,
            config,
            tables,
        }
    }
}

pub fn serialize_report(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_report(s: &str) -> Result<Report> {
    let report: Report = serde_json::from_str(s)?;
    if report.version != REPORT_VERSION {
        return Err(CvrError::Config(format!("unsupported report version {}", report.version)));
    }
    Ok(report)
}

fn inputs(strategy: Option<Strategy>) -> (&'static str, &'static str) {
    match strategy {
        None => ("-", "-"),
        Some(Strategy::TextOnly) => ("yes", "no"),
        Some(Strategy::VisualOnly) => ("no", "yes"),
        Some(_) => ("yes", "yes"),
    }
}

fn percent(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Aligned text table with one row per (label, strategy, n_c) and the global
/// and local recall columns side by side. Only the `all` subset is shown.
pub fn render_table(tables: &[RecallTable]) -> String {
    type Key = (String, Option<Strategy>, Option<usize>);
    let mut keys: Vec<Key> = Vec::new();
    for t in tables {
        let key = (t.label.clone(), t.strategy, t.n_c);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let ks_for = |setting: Setting| {
        tables
            .iter()
            .find(|t| t.setting == setting)
            .map_or_else(|| setting.default_ks(), |t| t.ks.clone())
    };
    let (gks, lks) = (ks_for(Setting::Global), ks_for(Setting::Local));

    let mut header = vec!["Method".to_owned(), "Text".into(), "Visual".into(), "Strategy".into()];
    header.extend(gks.iter().map(|k| format!("G R@{k}")));
    header.extend(lks.iter().map(|k| format!("L R@{k}")));
    let mut rows = vec![header];
    for (label, strategy, n_c) in &keys {
        let (text, visual) = inputs(*strategy);
        let strat = match (strategy, n_c) {
            (Some(s), Some(n)) => format!("{s} (n_c={n})"),
            (Some(s), None) => s.to_string(),
            (None, _) => "-".into(),
        };
        let mut row = vec![label.clone(), text.into(), visual.into(), strat];
        for (setting, ks) in [(Setting::Global, &gks), (Setting::Local, &lks)] {
            let t = tables
                .iter()
                .find(|t| t.setting == setting && &t.label == label && t.strategy == *strategy && t.n_c == *n_c);
            for &k in ks {
                row.push(t.and_then(|t| t.recall(Subset::All, k)).map_or_else(|| "-".into(), percent));
            }
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c < 4 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
        }
    }
    out
}

/// Rows of a subset breakdown for one table: subset, query count, coverage
/// and recall per k.
pub fn render_subsets(table: &RecallTable) -> String {
    let mut out = format!("{} [{}]\n", table.label, table.setting);
    for r in &table.rows {
        let cells: Vec<String> = table
            .ks
            .iter()
            .zip(&r.recall)
            .map(|(k, v)| format!("R@{k} {}", percent(*v)))
            .collect();
        let _ = writeln!(
            out,
            "  {:<14} n={:<6} coverage {:>5}  {}",
            format!("{:?}", r.subset).to_lowercase(),
            r.queries,
            percent(r.coverage),
            cells.join("  ")
        );
    }
    out
}
