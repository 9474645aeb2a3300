use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dialogue_kt::annotator::{self, AnnotationResult, ChatClient, KeywordClient, OpenAiClient, ReplayClient, ResultCache};
use dialogue_kt::bkt::{self, BktParams, BktPredictor};
use dialogue_kt::config::PipelineConfig;
use dialogue_kt::corpus::{self, make_splits, AnnotatedDialogue, DatasetFormat, Fold, Part, SplitPlan};
use dialogue_kt::dkt_sem::{self, InputKind};
use dialogue_kt::eval::experiment::{grid_search, run_experiment, validation_auc, GridSpec, Method};
use dialogue_kt::eval::irr::{irr_metrics, Level as IrrLevel, RatingMatrix};
use dialogue_kt::eval::{knowledge_curves, write_plots, MetricReport};
use dialogue_kt::eval::metrics::compute_metrics;
use dialogue_kt::kt::{collect_predictions, read_records, write_records, Aggregation, KtPredictor, PredictionRecord};
use dialogue_kt::llmkt::LlmktModel;
use dialogue_kt::taxonomy::{import_standards_csv, Level, Taxonomy};

/// Knowledge tracing on tutoring dialogues.
#[derive(Parser)]
#[command(name = "dialogue-kt", version)]
struct Cli {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set methods.llmkt.lora.rank=8`.
    #[arg(long = "set", value_name = "PATH=JSON", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, inspect and split dialogue corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Validate or import the standards taxonomy.
    #[command(subcommand)]
    Taxonomy(TaxonomyCmd),
    /// Label correctness and KCs with a chat model.
    Annotate(AnnotateCmd),
    /// Train one method on one fold.
    Train(TrainCmd),
    /// Evaluate methods and compute reports.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Knowledge-change curves from prediction records.
    Curves(CurvesArgs),
    /// Inter-rater agreement.
    Irr(IrrArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Convert a raw dataset into the canonical corpus format.
    Ingest {
        #[arg(long, value_parser = parse_format)]
        format: DatasetFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subject to drop (repeatable); replaces the configured list.
        #[arg(long = "exclude-subject")]
        exclude_subject: Vec<String>,
        /// Split tag for records without one (MathDial).
        #[arg(long)]
        split_tag: Option<String>,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create a dialogue-level split plan.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of folds; 1 uses the published train/test tags.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
}

#[derive(Subcommand)]
enum TaxonomyCmd {
    /// Check a taxonomy JSON file and print node counts.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Build a taxonomy from a standards CSV (`id,description`).
    Import {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    /// OpenAI-compatible endpoint (key from DIALOGUE_KT_API_KEY).
    Openai,
    /// Recorded responses, falling back to the endpoint when a key is set.
    Replay,
    /// Deterministic keyword heuristics; no network.
    Offline,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct AnnotateCmd {
    #[command(subcommand)]
    action: Option<AnnotateAction>,
    #[command(flatten)]
    run: AnnotateRun,
}

#[derive(Args)]
struct AnnotateRun {
    #[arg(long, required = true)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "openai")]
    client: ClientKind,
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// Annotated corpus; failed dialogues are left out.
    #[arg(long, required = true)]
    out: Option<PathBuf>,
    /// Per-dialogue results (JSON lines); defaults next to `--out`.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    no_correctness: bool,
    #[arg(long)]
    no_kcs: bool,
    /// Exit 0 even when some dialogues failed.
    #[arg(long)]
    allow_failures: bool,
}

#[derive(Subcommand)]
enum AnnotateAction {
    /// Apply saved annotation results to a corpus.
    Export {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Drop dialogues whose annotation failed.
        #[arg(long)]
        only_successful: bool,
    },
}

#[derive(Args)]
struct TrainCmd {
    #[command(subcommand)]
    method: TrainMethod,
}

#[derive(Subcommand)]
enum TrainMethod {
    /// Bayesian knowledge tracing (EM).
    Bkt(TrainArgs),
    /// LSTM over KC ids.
    Dkt(TrainArgs),
    /// LSTM over sentence embeddings.
    DktSem(TrainArgs),
    /// Language-model scoring with low-rank adapters.
    Llmkt(TrainArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Annotated canonical corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Split plan; created from the split settings when omitted.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Taxonomy providing KC descriptions.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Output path (a JSON file for bkt, a directory otherwise).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Cross-validated experiment for one method.
    Run {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid search on validation AUC first (`default` or a JSON grid spec).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, value_parser = parse_aggregation)]
        aggregation: Option<Aggregation>,
    },
    /// Evaluate saved BKT parameters on a fold's test part.
    Bkt {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an LLMKT checkpoint (or an untuned model) on a fold's test part.
    Llmkt {
        #[arg(long, required_unless_present = "zero_shot")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        zero_shot: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Knowledge-change curves from prediction records.
    Curves(CurvesArgs),
    /// Inter-rater agreement.
    Irr(IrrArgs),
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 15)]
    top: usize,
    /// Directory for the plots; defaults to `curves/` next to the records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IrrArgs {
    /// Items × raters as CSV (empty cell = missing) or a JSON array of rows.
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long, default_value = "nominal", value_parser = parse_level)]
    level: IrrLevel,
}

fn parse_format(s: &str) -> std::result::Result<DatasetFormat, String> {
    s.parse().map_err(|e: dialogue_kt::Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: dialogue_kt::Error| e.to_string())
}

fn parse_level(s: &str) -> std::result::Result<IrrLevel, String> {
    s.parse().map_err(|e: dialogue_kt::Error| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "product" => Ok(Aggregation::Product),
        other => Err(format!("unknown aggregation `{other}` (expected mean or product)")),
    }
}

/// Sets `path` (dot-separated) in a JSON document.
fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("`{}` is not an object", parts[..i].join(".")))?;
        if !obj.contains_key(*key) {
            bail!("unknown config field `{}`", parts[..=i].join("."));
        }
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).unwrap();
    }
    Ok(())
}

struct Ctx {
    cfg: PipelineConfig,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let mut doc = serde_json::to_value(&cfg)?;
        for o in &cli.overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| anyhow!("--set expects PATH=VALUE, got `{o}`"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut doc, path, value)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(doc).context("applying --set overrides")?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(Ctx { cfg })
    }

    fn write_config(&self, dir: &Path) -> Result<()> {
        self.cfg.save(&dir.join("config.json"))?;
        Ok(())
    }

    fn corpus(&mut self, data: &DataArgs) -> Result<Vec<AnnotatedDialogue>> {
        if let Some(p) = &data.corpus {
            self.cfg.corpus.annotated = Some(p.clone());
        }
        if let Some(p) = &data.taxonomy {
            self.cfg.taxonomy = Some(p.clone());
        }
        if let Some(p) = &data.splits {
            self.cfg.split_plan = Some(p.clone());
        }
        let path = self.cfg.corpus.annotated.clone().ok_or_else(|| anyhow!("no corpus given (--corpus or corpus.annotated)"))?;
        Ok(corpus::read_canonical(&path)?)
    }

    fn plan(&self, dialogues: &[AnnotatedDialogue]) -> Result<SplitPlan> {
        Ok(match &self.cfg.split_plan {
            Some(p) => SplitPlan::load(p)?,
            None => make_splits(dialogues, self.cfg.splits.folds, self.cfg.splits.val_fraction, self.cfg.seed)?,
        })
    }

    fn descriptions(&self, method: Method) -> Result<BTreeMap<String, String>> {
        Ok(match &self.cfg.taxonomy {
            Some(p) => Taxonomy::load(p)?.standard_descriptions(),
            None => {
                if matches!(method, Method::DktSem | Method::Llmkt) {
                    log::warn!("no taxonomy given; KC ids stand in for their descriptions");
                }
                BTreeMap::new()
            }
        })
    }
}

fn fold_of(plan: &SplitPlan, index: usize) -> Result<&Fold> {
    plan.folds.iter().find(|f| f.index == index).ok_or_else(|| anyhow!("split plan has no fold {index} ({} folds)", plan.folds.len()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct Evaluation {
    report: MetricReport,
    failures: Vec<corpus::SkippedDialogue>,
}

fn evaluate(predictor: &dyn KtPredictor, test: &[AnnotatedDialogue], aggregation: Aggregation, out: &Path, top: usize) -> Result<Evaluation> {
    let preds = collect_predictions(predictor, test, aggregation);
    finish_eval(preds.records, preds.failures, out, top)
}

fn finish_eval(records: Vec<PredictionRecord>, failures: Vec<corpus::SkippedDialogue>, out: &Path, top: usize) -> Result<Evaluation> {
    let scores = compute_metrics(&records)?;
    write_records(&out.join("records.jsonl"), &records)?;
    let eval = Evaluation {
        report: MetricReport::single(scores),
        failures,
    };
    write_json(&out.join("metrics.json"), &eval)?;
    write_plots(&knowledge_curves(&records, top), &out.join("curves"))?;
    Ok(eval)
}

fn owned(ds: &[&AnnotatedDialogue]) -> Vec<AnnotatedDialogue> {
    ds.iter().map(|d| (*d).clone()).collect()
}

fn run_corpus(ctx: &mut Ctx, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Ingest {
            format,
            input,
            out,
            exclude_subject,
            split_tag,
        } => {
            ctx.cfg.corpus.raw = Some(input.clone());
            ctx.cfg.corpus.format = format;
            ctx.cfg.corpus.canonical = Some(out.clone());
            if !exclude_subject.is_empty() {
                ctx.cfg.corpus.ingest.excluded_subjects = exclude_subject;
            }
            if split_tag.is_some() {
                ctx.cfg.corpus.ingest.split_tag = split_tag;
            }
            let ingested = corpus::ingest_dataset(&input, format, &ctx.cfg.corpus.ingest)?;
            corpus::write_canonical(&out, &ingested.dialogues)?;
            print_json(&serde_json::json!({
                "dialogues": ingested.dialogues.len(),
                "skipped": ingested.skipped,
                "excluded": ingested.excluded,
            }))
        }
        CorpusCmd::Stats { input, out } => {
            let stats = corpus::dataset_statistics(&corpus::read_canonical(&input)?);
            if let Some(out) = out {
                write_json(&out, &stats)?;
            }
            print_json(&stats)
        }
        CorpusCmd::Split {
            input,
            out,
            folds,
            val_fraction,
        } => {
            if let Some(f) = folds {
                ctx.cfg.splits.folds = f;
            }
            if let Some(v) = val_fraction {
                ctx.cfg.splits.val_fraction = v;
            }
            let dialogues = corpus::read_canonical(&input)?;
            let plan = make_splits(&dialogues, ctx.cfg.splits.folds, ctx.cfg.splits.val_fraction, ctx.cfg.seed)?;
            plan.save(&out)?;
            let sizes: Vec<_> = plan
                .folds
                .iter()
                .map(|f| serde_json::json!({"fold": f.index, "train": f.count(Part::Train), "val": f.count(Part::Val), "test": f.count(Part::Test)}))
                .collect();
            print_json(&sizes)
        }
    }
}

fn run_taxonomy(cmd: TaxonomyCmd) -> Result<()> {
    let counts = |t: &Taxonomy| serde_json::json!({"domains": t.len(Level::Domain), "clusters": t.len(Level::Cluster), "standards": t.len(Level::Standard)});
    match cmd {
        TaxonomyCmd::Validate { input } => print_json(&counts(&Taxonomy::load(&input)?)),
        TaxonomyCmd::Import { input, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let tax = import_standards_csv(&text)?;
            std::fs::write(&out, tax.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            print_json(&counts(&tax))
        }
    }
}

fn read_results(path: &Path) -> Result<Vec<AnnotationResult>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn load_taxonomy(path: Option<&PathBuf>) -> Result<Option<Taxonomy>> {
    path.map(|p| Taxonomy::load(p)).transpose().map_err(Into::into)
}

fn run_annotate(ctx: &mut Ctx, cmd: AnnotateCmd) -> Result<bool> {
    if let Some(AnnotateAction::Export {
        corpus: corpus_path,
        results,
        out,
        taxonomy,
        only_successful,
    }) = cmd.action
    {
        let dialogues = corpus::read_canonical(&corpus_path)?;
        let tax = load_taxonomy(taxonomy.as_ref())?;
        let exported = annotator::export_annotated(&dialogues, &read_results(&results)?, tax.as_ref(), only_successful)?;
        corpus::write_canonical(&out, &exported)?;
        print_json(&serde_json::json!({"exported": exported.len(), "input": dialogues.len()}))?;
        return Ok(true);
    }
    let run = cmd.run;
    let (Some(corpus_path), Some(out)) = (run.corpus, run.out) else {
        bail!("annotate needs --corpus and --out");
    };
    let a = &mut ctx.cfg.annotation;
    if let Some(m) = run.model {
        a.model_id = m;
    }
    if let Some(p) = run.parallelism {
        a.options.parallelism = p;
    }
    if run.cache_dir.is_some() {
        a.cache_dir = run.cache_dir;
    }
    if run.replay_dir.is_some() {
        a.replay_dir = run.replay_dir;
    }
    a.options.tasks.correctness &= !run.no_correctness;
    a.options.tasks.kcs &= !run.no_kcs;
    if run.taxonomy.is_some() {
        ctx.cfg.taxonomy = run.taxonomy;
    }
    ctx.cfg.corpus.canonical = Some(corpus_path.clone());
    ctx.cfg.corpus.annotated = Some(out.clone());
    let a = &ctx.cfg.annotation;
    let client: Box<dyn ChatClient> = match run.client {
        ClientKind::Offline => Box::new(KeywordClient::new()),
        ClientKind::Openai => Box::new(OpenAiClient::from_env(a.model_id.clone()).map_err(|e| dialogue_kt::Error::Client(e.to_string()))?),
        ClientKind::Replay => {
            let dir = a.replay_dir.clone().ok_or_else(|| anyhow!("--client replay needs --replay-dir"))?;
            let inner = OpenAiClient::from_env(a.model_id.clone()).ok().map(|c| Box::new(c) as Box<dyn ChatClient>);
            Box::new(ReplayClient::new(dir, a.model_id.clone(), inner))
        }
    };
    let dialogues = corpus::read_canonical(&corpus_path)?;
    let tax = load_taxonomy(ctx.cfg.taxonomy.as_ref())?;
    let cache = a.cache_dir.as_ref().map(ResultCache::new);
    let outcome = annotator::annotate_corpus(&dialogues, client.as_ref(), tax.as_ref(), &a.options, cache.as_ref())?;
    let results_path = run.results.unwrap_or_else(|| out.with_extension("results.jsonl"));
    let mut lines = String::new();
    for r in &outcome.results {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(&results_path, lines).with_context(|| format!("writing {}", results_path.display()))?;
    let exported = annotator::export_annotated(&dialogues, &outcome.results, tax.as_ref(), true)?;
    corpus::write_canonical(&out, &exported)?;
    if let Some(parent) = out.parent() {
        ctx.cfg.save(&parent.join("annotate.config.json"))?;
    }
    for f in &outcome.summary.failures {
        log::warn!("annotation failed for {}: {}", f.id, f.reason);
    }
    print_json(&outcome.summary)?;
    Ok(outcome.summary.failed == 0 || run.allow_failures)
}

fn run_train(ctx: &mut Ctx, cmd: TrainCmd) -> Result<()> {
    let (method, args) = match cmd.method {
        TrainMethod::Bkt(a) => (Method::Bkt, a),
        TrainMethod::Dkt(a) => (Method::Dkt, a),
        TrainMethod::DktSem(a) => (Method::DktSem, a),
        TrainMethod::Llmkt(a) => (Method::Llmkt, a),
    };
    let dialogues = ctx.corpus(&args.data)?;
    let plan = ctx.plan(&dialogues)?;
    let fold = fold_of(&plan, args.fold)?;
    let descriptions = ctx.descriptions(method)?;
    let train = fold.select(Part::Train, &dialogues);
    let val = fold.select(Part::Val, &dialogues);
    let seed = ctx.cfg.seed.wrapping_add(fold.index as u64);
    let m = &ctx.cfg.methods;
    match method {
        Method::Bkt => {
            let mut cfg = m.bkt;
            cfg.seed = seed;
            let fit = bkt::fit(train.iter().chain(&val).copied(), &cfg)?;
            fit.params.save(&args.out)?;
            if let Some(parent) = args.out.parent() {
                ctx.cfg.save(&parent.join(format!("{}.config.json", args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("bkt"))))?;
            }
            print_json(&serde_json::json!({"kcs": fit.params.kcs.len(), "out": args.out}))
        }
        Method::Dkt | Method::DktSem => {
            let mut cfg = if method == Method::Dkt { m.dkt.clone() } else { m.dkt_sem.clone() };
            cfg.input = if method == Method::Dkt { InputKind::KcIds } else { InputKind::Text };
            cfg.seed = seed;
            let encoder = m.encoder.build()?;
            let kcs = dkt_sem::corpus_kcs(dialogues.iter());
            let (model, log) = dkt_sem::fit(cfg, &train, &val, &kcs, &descriptions, encoder)?;
            std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            model.save(&args.out.join("model.json"))?;
            write_json(&args.out.join("train_log.json"), &log)?;
            ctx.write_config(&args.out)?;
            print_json(&serde_json::json!({"best_epoch": log.best_epoch, "epochs": log.epochs.len(), "out": args.out}))
        }
        Method::Llmkt => {
            let mut cfg = m.llmkt.clone();
            cfg.decoder.seed = seed;
            cfg.finetune.seed = seed;
            let vocab: Vec<&AnnotatedDialogue> = train.iter().chain(&val).copied().collect();
            let mut model = LlmktModel::new(cfg, &vocab, descriptions)?;
            let log = model.finetune(&train, &val)?;
            model.save(&args.out.join("checkpoint"))?;
            write_json(&args.out.join("train_log.json"), &log)?;
            ctx.write_config(&args.out)?;
            print_json(&serde_json::json!({"best_epoch": log.best_epoch, "final_train_loss": log.final_train_loss, "out": args.out}))
        }
        Method::Majority => unreachable!("majority needs no training"),
    }
}

fn load_grid(spec: &str, method: Method) -> Result<GridSpec> {
    if spec == "default" {
        return Ok(match method {
            Method::Llmkt => GridSpec::llmkt_default(),
            Method::Dkt | Method::DktSem => GridSpec::dkt_default(),
            other => bail!("no default grid for {other}"),
        });
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading grid spec {spec}"))?;
    Ok(serde_json::from_str(&text)?)
}

fn run_eval(ctx: &mut Ctx, cmd: EvalCmd) -> Result<bool> {
    match cmd {
        EvalCmd::Run {
            method,
            data,
            out,
            grid,
            aggregation,
        } => {
            if let Some(a) = aggregation {
                ctx.cfg.aggregation = a;
            }
            let dialogues = ctx.corpus(&data)?;
            let plan = ctx.plan(&dialogues)?;
            let descriptions = ctx.descriptions(method)?;
            let out = out.unwrap_or_else(|| ctx.cfg.output_dir.join(method.as_str()));
            let mut cfg = ctx.cfg.experiment(method);
            if let Some(spec) = grid {
                let grid = load_grid(&spec, method)?;
                let result = grid_search(&cfg, &grid, &mut |c| validation_auc(c, &dialogues, &plan, &descriptions))?;
                write_json(&out.join("grid.json"), &result)?;
                cfg = result.best;
            }
            let outcome = run_experiment(&cfg, &dialogues, &plan, &descriptions, Some(&out))?;
            ctx.cfg.methods = cfg.methods;
            ctx.write_config(&out)?;
            print_json(&outcome.metrics.report)?;
            Ok(outcome.metrics.incomplete_folds == 0)
        }
        EvalCmd::Bkt { params, data, fold, out } => {
            let dialogues = ctx.corpus(&data)?;
            let plan = ctx.plan(&dialogues)?;
            let test = owned(&fold_of(&plan, fold)?.select(Part::Test, &dialogues));
            let predictor = BktPredictor::new(BktParams::load(&params)?);
            ctx.write_config(&out)?;
            let eval = evaluate(&predictor, &test, ctx.cfg.aggregation, &out, ctx.cfg.curves_top_n)?;
            print_json(&eval.report)?;
            Ok(eval.failures.is_empty())
        }
        EvalCmd::Llmkt {
            checkpoint,
            zero_shot,
            data,
            fold,
            out,
        } => {
            let dialogues = ctx.corpus(&data)?;
            let plan = ctx.plan(&dialogues)?;
            let f = fold_of(&plan, fold)?;
            let model = if let (Some(dir), false) = (&checkpoint, zero_shot) {
                LlmktModel::load(dir)?
            } else {
                let vocab: Vec<&AnnotatedDialogue> = f.select(Part::Train, &dialogues).into_iter().chain(f.select(Part::Val, &dialogues)).collect();
                let mut cfg = ctx.cfg.methods.llmkt.clone();
                cfg.decoder.seed = ctx.cfg.seed;
                LlmktModel::new(cfg, &vocab, ctx.descriptions(Method::Llmkt)?)?
            };
            let test = owned(&f.select(Part::Test, &dialogues));
            ctx.write_config(&out)?;
            let eval = evaluate(&model.predictor(), &test, ctx.cfg.aggregation, &out, ctx.cfg.curves_top_n)?;
            print_json(&eval.report)?;
            Ok(eval.failures.is_empty())
        }
        EvalCmd::Curves(args) => run_curves(args).map(|_| true),
        EvalCmd::Irr(args) => run_irr(args).map(|_| true),
    }
}

fn run_curves(args: CurvesArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let report = knowledge_curves(&records, args.top);
    let dir = args
        .out
        .unwrap_or_else(|| args.records.parent().map(Path::to_path_buf).unwrap_or_default().join("curves"));
    let files = write_plots(&report, &dir)?;
    write_json(&dir.join("curves.json"), &report)?;
    for note in &report.notes {
        log::info!("{note}");
    }
    print_json(&serde_json::json!({"series": report.series.len(), "files": files, "notes": report.notes}))
}

fn run_irr(args: IrrArgs) -> Result<()> {
    let m = RatingMatrix::load(&args.ratings)?;
    print_json(&irr_metrics(&m, args.level)?)
}

fn run(cli: Cli) -> Result<bool> {
    let mut ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Corpus(c) => run_corpus(&mut ctx, c).map(|_| true),
        Command::Taxonomy(c) => run_taxonomy(c).map(|_| true),
        Command::Annotate(c) => run_annotate(&mut ctx, c),
        Command::Train(c) => run_train(&mut ctx, c).map(|_| true),
        Command::Eval(c) => run_eval(&mut ctx, c),
        Command::Curves(a) => run_curves(a).map(|_| true),
        Command::Irr(a) => run_irr(a).map(|_| true),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain().find_map(|c| c.downcast_ref::<dialogue_kt::Error>()).map_or("error", dialogue_kt::Error::kind)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({"error": "stage_failure", "message": "a stage reported failures; see the output above"}));
            ExitCode::from(1)
        }
        Err(e) => {
            let mut message = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("{}", serde_json::json!({"error": error_kind(&e), "message": message}));
            ExitCode::from(1)
        }
    }
}
