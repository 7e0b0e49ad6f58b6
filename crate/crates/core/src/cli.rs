//! Command-line entry points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::corpus::{
    counting_corpus, generate_synthetic, save_corpus, Corpus, CorpusItem, DatasetDescriptor, DatasetName, Split, SyntheticShape,
};
use crate::evaluation::{
    block_f1, counting_accuracy, entity_micro_f1, linking_f1, links_from_values, render_table, MetricReport,
};
use crate::gateway::{Backend, CachingBackend, FixtureStore, Gateway, LiveBackend, LiveConfig, ReplayBackend};
use crate::model::{retain_valid, DocumentSchema, DocumentValues};
use crate::pipeline::{
    build_example_pool, infer_absent_value, line_item_count, run_corpus, ExamplePools, ExtractionResult, FixtureMode,
    GoldBackend, PoolMode, QueryRegistry, RunConfig, RunDir,
};
use crate::retrieval::{ExampleIndex, ExampleKind, ExampleSource};
use crate::segmentation::{check_block_condition, oracle_blocks_from_labels, BlockSet, OracleAnnotator};

/// Bundled synthetic corpora, used when `--root` is not given.
pub const BUNDLED_DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data");

#[derive(Parser, Debug)]
#[command(name = "blockie", version, about = "Block-wise key information extraction from OCR'd documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Dataset tree; defaults to the bundled corpus for `synthetic`.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Schema JSON file replacing the dataset's own schema.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Keep only these top-level entities (repeatable).
    #[arg(long)]
    entity: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Live,
    Record,
    Replay,
    Oracle,
}

impl From<Mode> for FixtureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Live => FixtureMode::Live,
            Mode::Record => FixtureMode::Record,
            Mode::Replay => FixtureMode::Replay,
            Mode::Oracle => FixtureMode::Oracle,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Chat-completion endpoint from BLOCKIE_API_URL.
    Http,
    /// Answers derived from the gold labels.
    Gold,
}

#[derive(Args, Debug, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "replay")]
    mode: Mode,
    /// Where live and record modes send requests.
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    /// Fixture store: a `.json` file or a directory. Defaults to the run's
    /// fixtures directory.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Defaults to `<dataset>-<split>`.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Example pools written by `label`; built from the oracle labels of the
    /// train split when absent.
    #[arg(long)]
    pools: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    few_shot_k: usize,
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// Merge block parses deterministically instead of asking the model.
    #[arg(long)]
    no_combiner: bool,
    /// Value-absent query to answer per document (repeatable).
    #[arg(long)]
    infer: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    Ser,
    El,
    Block,
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PoolModeArg {
    Oracle,
    Llm,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic receipt corpus.
    Generate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus root; the split goes in `<out>/<split>`.
        #[arg(long)]
        out: PathBuf,
        /// Chance that a receipt prints its item count.
        #[arg(long)]
        count_line_prob: Option<f64>,
        /// Value-absent receipts cycling through the counting patterns.
        #[arg(long)]
        counting: bool,
    },
    /// Label train documents into block examples and index them.
    Label {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value = "oracle")]
        pool_mode: PoolModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline over a split.
    Extract {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score a run against the gold labels.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "ser")]
        metric: Metric,
        /// Query scored by `--metric count`.
        #[arg(long, default_value = "line_item_count")]
        query: String,
    },
    /// Emit oracle blocks and check each against the block condition.
    Blocks {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the k most mutually different documents of a split.
    Diverse {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: usize,
        /// Already-chosen documents to stay away from: a split of the same
        /// dataset.
        #[arg(long)]
        reference_split: Option<String>,
    },
    /// Author, list or check fixture stores.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Subcommand, Debug)]
enum FixturesAction {
    /// Record gold answers for every request a run over the split makes.
    Author {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        fixtures: PathBuf,
    },
    List {
        #[arg(long)]
        fixtures: PathBuf,
    },
    /// Replay a run and report requests without a fixture.
    Check {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        fixtures: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Generate {
            seed,
            n,
            split,
            out,
            count_line_prob,
            counting,
        } => generate(seed, n, &split, &out, count_line_prob, counting),
        Command::Label {
            data,
            backend,
            pool_mode,
            out,
        } => label(&data, &backend, pool_mode, &out),
        Command::Extract {
            data,
            backend,
            run,
            pipeline,
        } => extract_cmd(&data, &backend, &run, &pipeline),
        Command::Evaluate {
            data,
            run,
            metric,
            query,
        } => evaluate(&data, &run, metric, &query),
        Command::Blocks { data, out } => blocks(&data, out.as_deref()),
        Command::Diverse { data, k, reference_split } => diverse(&data, k, reference_split.as_deref()),
        Command::Fixtures { action } => fixtures(action),
    }
}

struct Loaded {
    corpus: Corpus,
    /// Dataset schema, after `--schema` and `--entity`.
    schema: DocumentSchema,
    root: PathBuf,
    name: DatasetName,
}

impl Loaded {
    /// Gold values cut down to the run schema.
    fn gold(&self, item: &CorpusItem) -> DocumentValues {
        retain_valid(&self.schema, &item.gold).0
    }
}

fn data_root(name: DatasetName, root: Option<&Path>) -> Result<PathBuf> {
    match (root, name) {
        (Some(r), _) => Ok(r.to_path_buf()),
        (None, DatasetName::Synthetic) => Ok(Path::new(BUNDLED_DATA).join("synthetic")),
        (None, _) => bail!("--root is required for {name}"),
    }
}

fn load_split(data: &DataArgs, split: &str) -> Result<Loaded> {
    let name: DatasetName = data.dataset.parse()?;
    let split: Split = split.parse()?;
    let root = data_root(name, data.root.as_deref())?;
    let corpus = DatasetDescriptor::new(name, split, &root).load()?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    let mut schema = match &data.schema {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| p.display().to_string())?;
            DocumentSchema::from_json_str(&raw)?
        }
        None => corpus.schema.clone(),
    };
    if !data.entity.is_empty() {
        let names: Vec<&str> = data.entity.iter().map(String::as_str).collect();
        schema = schema.restrict_roots(&names)?;
    }
    Ok(Loaded {
        corpus,
        schema,
        root,
        name,
    })
}

fn load(data: &DataArgs) -> Result<Loaded> {
    load_split(data, &data.split)
}

fn run_id(data: &DataArgs, run: &RunArgs) -> String {
    run.run_id.clone().unwrap_or_else(|| format!("{}-{}", data.dataset, data.split))
}

fn http_backend() -> Result<Arc<dyn Backend>> {
    Ok(Arc::new(LiveBackend::new(LiveConfig::from_env()?)))
}

fn inner_backend(kind: BackendKind, schema: &DocumentSchema, items: &[CorpusItem]) -> Result<Arc<dyn Backend>> {
    match kind {
        BackendKind::Http => http_backend(),
        BackendKind::Gold => Ok(Arc::new(GoldBackend::new(schema.clone(), items))),
    }
}

/// Gold answers come from `items` with their values cut to `schema`.
fn gateway(
    args: &BackendArgs,
    store: Option<&Path>,
    schema: &DocumentSchema,
    items: &[CorpusItem],
) -> Result<Gateway> {
    let open_store = || -> Result<Arc<FixtureStore>> {
        let path = store.ok_or_else(|| anyhow!("mode {:?} needs a fixture store", args.mode))?;
        Ok(Arc::new(FixtureStore::open(path)?))
    };
    let backend: Arc<dyn Backend> = match args.mode {
        Mode::Oracle => Arc::new(GoldBackend::new(schema.clone(), items)),
        Mode::Live => inner_backend(args.backend, schema, items)?,
        Mode::Record => Arc::new(CachingBackend::new(inner_backend(args.backend, schema, items)?, open_store()?)),
        Mode::Replay => Arc::new(ReplayBackend::new(open_store()?)),
    };
    Ok(Gateway::unlimited(backend))
}

fn restricted_items(loaded: &Loaded) -> Vec<CorpusItem> {
    loaded
        .corpus
        .items
        .iter()
        .map(|i| CorpusItem {
            gold: loaded.gold(i),
            ..i.clone()
        })
        .collect()
}

fn generate(seed: u64, n: usize, split: &str, out: &Path, count_line_prob: Option<f64>, counting: bool) -> Result<i32> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let split: Split = split.parse()?;
    let mut shape = SyntheticShape::default();
    if let Some(p) = count_line_prob {
        shape.count_line_prob = p.clamp(0.0, 1.0);
    }
    let mut corpus = if counting { counting_corpus(seed, n) } else { generate_synthetic(seed, n, &shape) };
    corpus.split = split;
    let dir = out.join(split.as_str());
    let manifest = save_corpus(&corpus, &dir)?;
    let absent = corpus.items.iter().filter(|i| !i.value_absent.is_empty()).count();
    println!("wrote {} documents to {} ({absent} without a printed item count)", manifest.entries.len(), dir.display());
    Ok(0)
}

fn label(data: &DataArgs, backend: &BackendArgs, pool_mode: PoolModeArg, out: &Path) -> Result<i32> {
    let loaded = load(data)?;
    let items = restricted_items(&loaded);
    let pools = match pool_mode {
        PoolModeArg::Oracle => build_example_pool(&items, &loaded.schema, None, PoolMode::Oracle)?,
        PoolModeArg::Llm => {
            let gw = gateway(backend, backend.fixtures.as_deref(), &loaded.schema, &items)?;
            build_example_pool(&items, &loaded.schema, Some(&gw), PoolMode::Llm)?
        }
    };
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    fs::write(out, pools.to_json_string())?;
    let flagged = pools.examples.values().filter(|e| !e.flags.is_empty()).count();
    println!("{:<24} | {:>9} | {:>8} | {:>7}", "pool", "documents", "examples", "flagged");
    println!(
        "{:<24} | {:>9} | {:>8} | {:>7}",
        pools.schema_name,
        pools.doc_index.len(),
        pools.examples.len(),
        flagged
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn load_pools(loaded: &Loaded, data: &DataArgs, pipeline: &PipelineArgs) -> Result<ExamplePools> {
    if let Some(p) = &pipeline.pools {
        let raw = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        return ExamplePools::from_json_str(&raw).with_context(|| p.display().to_string());
    }
    let train = load_split(
        &DataArgs {
            root: Some(loaded.root.clone()),
            ..data.clone()
        },
        "train",
    )
    .context("no --pools given and the train split could not be loaded")?;
    let items = restricted_items(&train);
    Ok(build_example_pool(&items, &train.schema, None, PoolMode::Oracle)?)
}

fn run_config(loaded: &Loaded, backend: &BackendArgs, gw: &Gateway, pipeline: &PipelineArgs) -> RunConfig {
    let mut config = RunConfig::new(loaded.schema.clone(), backend.mode.into());
    config.few_shot_k = pipeline.few_shot_k;
    config.concurrency = pipeline.concurrency.max(1);
    config.combiner_enabled = !pipeline.no_combiner;
    config.backend_id = gw.backend_id().to_string();
    config
}

/// Answers each value-absent query for each result: `{doc: {query: {...}}}`.
fn infer_all(
    loaded: &Loaded,
    results: &[ExtractionResult],
    queries: &[String],
    gw: &Gateway,
) -> BTreeMap<String, BTreeMap<String, Value>> {
    let registry = QueryRegistry::default();
    let mut out = BTreeMap::new();
    for (item, r) in loaded.corpus.items.iter().zip(results) {
        let per_doc: BTreeMap<String, Value> = queries
            .iter()
            .map(|q| {
                let v = match infer_absent_value(&item.doc, r, q, &registry, &loaded.schema, gw) {
                    Ok(iv) => serde_json::to_value(iv).expect("json"),
                    Err(e) => json!({"query": q, "error": e.to_string()}),
                };
                (q.clone(), v)
            })
            .collect();
        out.insert(item.doc.doc_id.clone(), per_doc);
    }
    out
}

fn extract_cmd(data: &DataArgs, backend: &BackendArgs, run: &RunArgs, pipeline: &PipelineArgs) -> Result<i32> {
    let loaded = load(data)?;
    let pools = load_pools(&loaded, data, pipeline)?;
    let id = run_id(data, run);
    let dir = RunDir::create(&run.runs_dir, &id)?;
    let store = backend.fixtures.clone().unwrap_or_else(|| dir.fixtures_dir());
    let items = restricted_items(&loaded);
    let gw = gateway(backend, Some(&store), &loaded.schema, &items)?;
    let config = run_config(&loaded, backend, &gw, pipeline);
    dir.write_config(&config)?;
    let docs: Vec<_> = loaded.corpus.items.iter().map(|i| &i.doc).collect();
    let results = run_corpus(&docs, &pools, &gw, &config);
    for r in &results {
        dir.write_result(r)?;
    }
    if !pipeline.infer.is_empty() {
        dir.write_extra("inferred.json", &infer_all(&loaded, &results, &pipeline.infer, &gw))?;
    }
    let w = results.iter().map(|r| r.doc_id.len()).max().unwrap_or(0).max(8);
    println!("{:<w$} | {:>6} | {:>9} | flags", "document", "blocks", "stages ok");
    let mut failed = 0;
    for r in &results {
        let ok = r.stages_succeeded();
        if ok == 0 {
            failed += 1;
        }
        println!("{:<w$} | {:>6} | {:>7}/3 | {}", r.doc_id, r.blocks.len(), ok, r.flags.join("; "));
    }
    println!("wrote {} results to {}", results.len(), dir.results_dir().display());
    if failed > 0 {
        eprintln!("{failed} document(s) had no successful stage");
        return Ok(1);
    }
    Ok(0)
}

fn read_config(dir: &RunDir) -> Result<RunConfig> {
    let path = dir.root.join("config.json");
    let raw = fs::read_to_string(&path).with_context(|| format!("{} (run `extract` first)", path.display()))?;
    serde_json::from_str(&raw).with_context(|| path.display().to_string())
}

fn without_others(set: &BlockSet) -> BlockSet {
    BlockSet::new(set.doc_id.clone(), set.blocks.iter().filter(|b| !b.others).cloned().collect())
}

fn count_report(loaded: &Loaded, dir: &RunDir, query: &str) -> Result<(f64, usize)> {
    let path = dir.root.join("inferred.json");
    let raw = fs::read_to_string(&path).with_context(|| format!("{} (run `extract --infer {query}`)", path.display()))?;
    let inferred: BTreeMap<String, BTreeMap<String, Value>> = serde_json::from_str(&raw)?;
    let registry = QueryRegistry::default();
    let oracle = registry
        .get(query)
        .and_then(|q| q.oracle)
        .ok_or_else(|| anyhow!("query {query:?} has no oracle"))?;
    let mut cases = Vec::new();
    for item in &loaded.corpus.items {
        let Some(entry) = inferred.get(&item.doc.doc_id).and_then(|m| m.get(query)) else { continue };
        let expected = oracle(&item.gold)
            .and_then(|s| s.parse::<i64>().ok())
            .unwrap_or_else(|| line_item_count(&item.gold));
        let predicted = entry
            .get("value")
            .and_then(Value::as_str)
            .and_then(|v| v.trim().parse::<i64>().ok())
            .unwrap_or(i64::MIN);
        cases.push((predicted, expected));
    }
    Ok((counting_accuracy(&cases)?, cases.len()))
}

fn evaluate(data: &DataArgs, run: &RunArgs, metric: Metric, query: &str) -> Result<i32> {
    let mut loaded = load(data)?;
    let dir = RunDir::open(&run.runs_dir, &run_id(data, run));
    let config = read_config(&dir)?;
    loaded.schema = config.schema.clone();
    if metric == Metric::Count {
        let (acc, n) = count_report(&loaded, &dir, query)?;
        dir.write_extra(&format!("report_count_{query}.json"), &json!({"metric": "count", "query": query, "cases": n, "accuracy": acc}))?;
        let w = query.len().max(5);
        println!("{:<w$} | {:>5} | {:>8}", "query", "cases", "accuracy");
        println!("{query:<w$} | {n:>5} | {acc:>8.4}");
        println!("accuracy {acc:.4}");
        return Ok(0);
    }
    let results: BTreeMap<String, ExtractionResult> =
        dir.read_results()?.into_iter().map(|r| (r.doc_id.clone(), r)).collect();
    let report: MetricReport = match metric {
        Metric::Ser => {
            let pred = results.iter().map(|(k, r)| (k.clone(), r.values.clone())).collect();
            let gold = loaded.corpus.items.iter().map(|i| (i.doc.doc_id.clone(), loaded.gold(i))).collect();
            entity_micro_f1(&pred, &gold, &loaded.schema)?
        }
        Metric::El => {
            let pred = results
                .iter()
                .map(|(k, r)| (k.clone(), links_from_values(&r.values, &loaded.schema)))
                .collect();
            let gold = loaded
                .corpus
                .items
                .iter()
                .map(|i| {
                    let links = if i.links.is_empty() {
                        links_from_values(&loaded.gold(i), &loaded.schema)
                    } else {
                        i.links.clone()
                    };
                    (i.doc.doc_id.clone(), links)
                })
                .collect();
            linking_f1(&pred, &gold)
        }
        Metric::Block => {
            let pred = results.iter().map(|(k, r)| (k.clone(), without_others(&r.blocks))).collect();
            let mut gold = BTreeMap::new();
            for i in &loaded.corpus.items {
                let g = loaded.gold(i);
                gold.insert(i.doc.doc_id.clone(), without_others(&oracle_blocks_from_labels(&i.doc, &g, &loaded.schema)?));
            }
            block_f1(&pred, &gold)?
        }
        Metric::Count => unreachable!(),
    };
    dir.write_extra(&format!("report_{}.json", report.metric), &report)?;
    let tag = if config.backend_id.is_empty() { "run".to_string() } else { config.backend_id.clone() };
    print!("{}", render_table(&[(tag, vec![report.clone()])]));
    println!(
        "precision {:.4} recall {:.4} (tp {} fp {} fn {})",
        report.score.precision, report.score.recall, report.score.tp, report.score.fp, report.score.fn_
    );
    println!("f1 {:.4}", report.score.f1);
    Ok(0)
}

fn blocks(data: &DataArgs, out: Option<&Path>) -> Result<i32> {
    let loaded = load(data)?;
    let mut all = BTreeMap::new();
    let mut table = String::new();
    let w = loaded.corpus.items.iter().map(|i| i.doc.doc_id.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(table, "{:<w$} | {:>6} | {:>7}", "document", "blocks", "failing");
    let mut failing_total = 0;
    for item in &loaded.corpus.items {
        let gold = loaded.gold(item);
        let set = oracle_blocks_from_labels(&item.doc, &gold, &loaded.schema)?;
        let annotator = OracleAnnotator::new(&item.doc, &gold, &loaded.schema);
        let mut failing = 0;
        for b in set.blocks.iter().filter(|b| !b.others) {
            if !check_block_condition(b, &item.doc, &gold, &annotator)?.is_block {
                failing += 1;
            }
        }
        failing_total += failing;
        let _ = writeln!(table, "{:<w$} | {:>6} | {:>7}", item.doc.doc_id, set.len(), failing);
        all.insert(item.doc.doc_id.clone(), set);
    }
    print!("{table}");
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, serde_json::to_string_pretty(&all)?)?;
        println!("wrote {}", p.display());
    }
    println!("{} documents, {failing_total} blocks failing the block condition", all.len());
    Ok(0)
}

fn document_index(corpus: &Corpus) -> Result<ExampleIndex> {
    let sources = corpus
        .items
        .iter()
        .map(|i| ExampleSource {
            example_id: i.doc.doc_id.clone(),
            kind: ExampleKind::Document,
            text: i.doc.text(),
            payload_ref: i.doc.doc_id.clone(),
        })
        .collect();
    Ok(ExampleIndex::build(sources)?)
}

fn diverse(data: &DataArgs, k: usize, reference_split: Option<&str>) -> Result<i32> {
    let loaded = load(data)?;
    let index = document_index(&loaded.corpus)?;
    let references: Vec<String> = match reference_split {
        Some(s) => load_split(
            &DataArgs {
                root: Some(loaded.root.clone()),
                ..data.clone()
            },
            s,
        )?
        .corpus
        .items
        .iter()
        .map(|i| i.doc.text())
        .collect(),
        None => Vec::new(),
    };
    let picked = index.select_diverse(&references, k);
    for id in &picked {
        println!("{id}");
    }
    eprintln!("selected {} of {} {} {} documents", picked.len(), index.len(), loaded.name, data.split);
    Ok(0)
}

fn fixtures(action: FixturesAction) -> Result<i32> {
    match action {
        FixturesAction::List { fixtures } => {
            let store = FixtureStore::open(&fixtures)?;
            for (key, text) in store.snapshot() {
                let first = text.lines().next().unwrap_or("");
                let preview: String = first.chars().take(60).collect();
                println!("{key} | {preview}");
            }
            println!("{} fixtures", store.len());
            Ok(0)
        }
        FixturesAction::Author { data, pipeline, fixtures } => {
            let args = BackendArgs {
                mode: Mode::Record,
                backend: BackendKind::Gold,
                fixtures: Some(fixtures.clone()),
            };
            let loaded = load(&data)?;
            let pools = load_pools(&loaded, &data, &pipeline)?;
            let items = restricted_items(&loaded);
            let before = FixtureStore::open(&fixtures)?.len();
            let gw = gateway(&args, Some(&fixtures), &loaded.schema, &items)?;
            let config = run_config(&loaded, &args, &gw, &pipeline);
            let docs: Vec<_> = loaded.corpus.items.iter().map(|i| &i.doc).collect();
            let results = run_corpus(&docs, &pools, &gw, &config);
            infer_all(&loaded, &results, &pipeline.infer, &gw);
            let after = FixtureStore::open(&fixtures)?.len();
            println!("{} documents, {} new fixtures, {after} in {}", docs.len(), after - before, fixtures.display());
            Ok(0)
        }
        FixturesAction::Check { data, pipeline, fixtures } => {
            let args = BackendArgs {
                mode: Mode::Replay,
                backend: BackendKind::Http,
                fixtures: Some(fixtures.clone()),
            };
            let loaded = load(&data)?;
            let pools = load_pools(&loaded, &data, &pipeline)?;
            let items = restricted_items(&loaded);
            let gw = gateway(&args, Some(&fixtures), &loaded.schema, &items)?;
            let config = run_config(&loaded, &args, &gw, &pipeline);
            let docs: Vec<_> = loaded.corpus.items.iter().map(|i| &i.doc).collect();
            let results = run_corpus(&docs, &pools, &gw, &config);
            let mut missing = 0;
            for r in &results {
                for ex in r.traces.iter().flat_map(|t| &t.exchanges) {
                    if ex.error.as_deref().is_some_and(|e| e.starts_with("fixture missing")) {
                        missing += 1;
                        println!("missing {} {} {}", ex.tag.stage, ex.tag.doc_id, ex.fixture_key);
                    }
                }
            }
            for (doc, per_doc) in infer_all(&loaded, &results, &pipeline.infer, &gw) {
                for (q, v) in per_doc {
                    if v.get("error").and_then(Value::as_str).is_some_and(|e| e.contains("fixture missing")) {
                        missing += 1;
                        println!("missing inference {doc} {q}");
                    }
                }
            }
            println!("{} documents, {missing} missing fixtures", docs.len());
            Ok(i32::from(missing > 0))
        }
    }
}
