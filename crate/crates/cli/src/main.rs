//! `dsc`: command-line driver for the strategy-chain pipeline.

mod exit;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use dsc_core::chainmodel::{
    expressible_chains, ChainGenerator, ChainModel, ConditioningMode, GenerationConfig, TrainConfig,
    MODEL_SCHEMA_VERSION,
};
use dsc_core::corpus::{
    self, Corpus, FilterConfig, FrequencyBasis, QuestionRecord, StrategyChain, VocabMode, CORPUS_SCHEMA_VERSION,
};
use dsc_core::harness::{self, ExperimentConfig, ReportFormat, Scoring, RUN_SCHEMA_VERSION};
use dsc_core::llmclient::BackendKind;
use dsc_core::metrics::{self, AgreementLoop, TokenizerMode};
use dsc_core::promptkit::{self, Method, TemplateSet};

use exit::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "dsc", about = "Dynamic strategy-chain prompting for long counseling replies")]
struct Cli {
    /// Print a machine-readable JSON summary on standard output.
    #[arg(long, global = true)]
    json: bool,

    /// JSON config file. Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and summarize it.
    Ingest(IngestArgs),
    /// Merge strategy runs and drop rare or overlong chains.
    Preprocess(PreprocessArgs),
    /// Train a strategy-chain model on a preprocessed corpus.
    Train(TrainArgs),
    /// Generate candidate strategy chains for one question.
    GenChains(GenChainsArgs),
    /// Render the prompt of one method for one question.
    BuildPrompt(BuildPromptArgs),
    /// Run an experiment and write a run directory.
    Run(RunArgs),
    /// Rescore a run directory and/or measure annotator agreement.
    Evaluate(EvaluateArgs),
    /// Print or export the report of a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Corpus in JSON Lines format.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
    /// Write the validated corpus back out in canonical form.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input corpus in JSON Lines format.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Minimum frequency of a chain's length (or pattern) to keep it.
    #[arg(long)]
    min_freq: Option<f64>,
    /// Longest merged chain kept.
    #[arg(long)]
    max_len: Option<usize>,
    /// What the frequency is measured over: length or pattern.
    #[arg(long)]
    basis: Option<FrequencyBasis>,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input corpus in JSON Lines format.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Where to write the model JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Markov order (number of previous strategies conditioned on).
    #[arg(long)]
    order: Option<usize>,
    /// Additive smoothing constant.
    #[arg(long)]
    lambda: Option<f64>,
    /// Question conditioning: label-only or none.
    #[arg(long)]
    conditioning: Option<ConditioningMode>,
    /// Held-out corpus; reports its cross-entropy.
    #[arg(long, value_name = "FILE")]
    heldout: Option<PathBuf>,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
}

#[derive(Args, Clone, Default)]
struct GenerationArgs {
    /// Number of chains.
    #[arg(long)]
    k: Option<usize>,
    /// Sampling temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Longest chain generated.
    #[arg(long)]
    max_len: Option<usize>,
    /// Sampling attempts before falling back to the most probable unseen chains.
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Random seed; chosen automatically and reported when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenChainsArgs {
    /// Trained model JSON.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Question as a JSON object (id, title, description, label, ...).
    #[arg(long, value_name = "FILE")]
    question: PathBuf,
    /// Print only the single most probable chain.
    #[arg(long)]
    top: bool,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Args)]
struct BuildPromptArgs {
    /// CoT, MHS, SC, DSC or DSCs.
    #[arg(long)]
    method: Method,
    /// Question as a JSON object.
    #[arg(long, value_name = "FILE")]
    question: PathBuf,
    /// Built-in template set name or template directory.
    #[arg(long)]
    template_set: Option<String>,
    /// Explicit chain to offer, in bracketed form; repeat for several.
    #[arg(long = "chain", value_name = "CHAIN")]
    chains: Vec<String>,
    /// Chain model, for DSC and DSCs when no --chain is given.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Preprocessed corpus, for SC when no --chain is given.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Question set with reference answers (corpus format).
    #[arg(long, value_name = "FILE")]
    questions: Option<PathBuf>,
    /// Preprocessed training corpus (needed by SC).
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Chain model (needed by DSC and DSCs).
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Human ratings in JSON Lines.
    #[arg(long, value_name = "FILE")]
    ratings: Option<PathBuf>,
    /// Comma-separated methods; all five by default.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Run directory to write.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Backend: mock or http.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Chat-completions endpoint URL (http backend).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    llm_model: Option<String>,
    /// Mock script JSON (mock backend).
    #[arg(long, value_name = "FILE")]
    mock_script: Option<PathBuf>,
    /// Upper bound on requests in flight.
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Tokenizer for metrics: char or whitespace.
    #[arg(long)]
    tokenizer: Option<TokenizerMode>,
    /// Disable add-one smoothing of zero-count BLEU orders.
    #[arg(long)]
    no_smoothing: bool,
    /// Built-in template set name or template directory.
    #[arg(long)]
    template_set: Option<String>,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
    #[command(flatten)]
    generation: GenerationArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory to rescore.
    #[arg(long, value_name = "DIR")]
    run: Option<PathBuf>,
    /// Question set with reference answers.
    #[arg(long, value_name = "FILE", requires = "run")]
    questions: Option<PathBuf>,
    /// Human ratings in JSON Lines.
    #[arg(long, value_name = "FILE")]
    ratings: Option<PathBuf>,
    /// Tokenizer; defaults to the one recorded in the run manifest.
    #[arg(long)]
    tokenizer: Option<TokenizerMode>,
    /// Disable add-one smoothing of zero-count BLEU orders.
    #[arg(long)]
    no_smoothing: bool,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    #[arg(long)]
    vocab_mode: Option<VocabMode>,
    /// Write the rescored report here instead of into the run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// First annotator's ratings, for agreement.
    #[arg(long, value_name = "FILE", requires = "second")]
    first: Option<PathBuf>,
    /// Second annotator's ratings, for agreement.
    #[arg(long, value_name = "FILE", requires = "first")]
    second: Option<PathBuf>,
    /// Score gap above which a pair is flagged for re-annotation.
    #[arg(long, default_value_t = 2)]
    threshold: u8,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding metrics.json.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// json, csv or markdown.
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Output file; standard output when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Config file layout. Every section is optional.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    /// Strategy vocabulary: builtin-default or corpus-derived.
    vocab_mode: Option<VocabMode>,
    /// Built-in template set name or template directory.
    template_set: Option<String>,
    filter: Option<FilterConfig>,
    train: Option<TrainConfig>,
    generation: Option<GenerationConfig>,
    experiment: Option<ExperimentConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    fn vocab_mode(&self, flag: Option<VocabMode>) -> VocabMode {
        flag.or(self.vocab_mode).unwrap_or(VocabMode::BuiltinDefault)
    }
}

struct Ctx {
    json: bool,
    file: FileConfig,
}

impl Ctx {
    /// Writes the summary: JSON when `--json`, otherwise the text lines.
    fn emit(&self, summary: Value, text: &[String]) -> CliResult<()> {
        let mut out = io::stdout().lock();
        let written = if self.json {
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).map_err(CliError::internal)?)
        } else {
            text.iter().try_for_each(|line| writeln!(out, "{line}"))
        };
        stdout_result(written)
    }

    /// `--seed`, else the config file's seed, else a fresh one that is reported.
    fn seed(&self, flag: Option<u64>) -> (u64, bool) {
        match flag.or(self.file.seed) {
            Some(seed) => (seed, false),
            None => {
                let seed = rand::random::<u64>() >> 11;
                eprintln!("note: no --seed given; using seed {seed}");
                (seed, true)
            }
        }
    }

    fn generation(&self, args: &GenerationArgs, base: GenerationConfig) -> (GenerationConfig, bool) {
        let (seed, auto) = self.seed(args.seed);
        let config = GenerationConfig {
            k: args.k.unwrap_or(base.k),
            temperature: args.temperature.unwrap_or(base.temperature),
            max_len: args.max_len.unwrap_or(base.max_len),
            max_attempts: args.max_attempts.unwrap_or(base.max_attempts),
            seed,
        };
        (config, auto)
    }
}

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path, mode: VocabMode) -> CliResult<Corpus> {
    let file = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    corpus::parse_corpus(BufReader::new(file), mode).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_corpus(corpus: &Corpus, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    corpus::write_corpus(corpus, &mut buf).map_err(CliError::internal)?;
    write_file(path, &buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<ChainModel> {
    ChainModel::from_json(&read_to_string(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_question(path: &Path) -> CliResult<QuestionRecord> {
    corpus::parse_question(&read_to_string(path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn ingest(ctx: &Ctx, args: &IngestArgs) -> CliResult<()> {
    let corpus = load_corpus(&args.input, ctx.file.vocab_mode(args.vocab_mode))?;
    let histogram = corpus::chain_length_histogram(&corpus)?;
    if let Some(out) = &args.out {
        write_corpus(&corpus, out)?;
    }
    let labels: Vec<&str> = corpus.vocabulary().labels().iter().map(|s| s.as_str()).collect();
    let lengths: BTreeMap<String, usize> = histogram.counts().iter().map(|(l, n)| (l.to_string(), *n)).collect();
    let mut text = vec![
        format!(
            "{} questions, {} answers, {} strategies",
            corpus.questions().len(),
            corpus.answers().len(),
            labels.len()
        ),
        format!("strategies: {}", labels.join(", ")),
        format!("answers without strategy: {}", histogram.empty_chains()),
    ];
    text.extend(histogram.counts().iter().map(|(len, n)| {
        format!("merged length {len}: {n} ({:.2}%)", 100.0 * histogram.frequency(*len))
    }));
    ctx.emit(
        json!({
            "command": "ingest",
            "questions": corpus.questions().len(),
            "answers": corpus.answers().len(),
            "strategies": labels,
            "empty_chains": histogram.empty_chains(),
            "length_counts": lengths,
        }),
        &text,
    )
}

fn preprocess(ctx: &Ctx, args: &PreprocessArgs) -> CliResult<()> {
    let base = ctx.file.filter.unwrap_or_default();
    let config = FilterConfig {
        min_freq: args.min_freq.unwrap_or(base.min_freq),
        max_len: args.max_len.unwrap_or(base.max_len),
        basis: args.basis.unwrap_or(base.basis),
    };
    if !(0.0..=1.0).contains(&config.min_freq) || config.max_len == 0 {
        return Err(CliError::usage("--min-freq must lie in [0, 1] and --max-len must be positive"));
    }
    let corpus = load_corpus(&args.input, ctx.file.vocab_mode(args.vocab_mode))?;
    let filtered = corpus::filter_samples(&corpus, &config)?;
    write_corpus(&filtered.corpus, &args.out)?;
    let s = &filtered.summary;
    ctx.emit(
        json!({ "command": "preprocess", "config": config, "summary": s, "out": args.out }),
        &[format!(
            "kept {} of {} answers; removed {} empty, {} too long, {} rare; dropped {} questions",
            s.kept_answers, s.input_answers, s.removed_empty, s.removed_too_long, s.removed_rare, s.dropped_questions
        )],
    )
}

fn train(ctx: &Ctx, args: &TrainArgs) -> CliResult<()> {
    let base = ctx.file.train.unwrap_or_default();
    let config = TrainConfig {
        order: args.order.unwrap_or(base.order),
        lambda: args.lambda.unwrap_or(base.lambda),
        conditioning: args.conditioning.unwrap_or(base.conditioning),
    };
    let mode = ctx.file.vocab_mode(args.vocab_mode);
    let corpus = load_corpus(&args.input, mode)?;
    let model = ChainModel::train(&corpus, &config)?;
    write_file(&args.out, model.to_json().as_bytes())?;
    let v = model.vocabulary().len();
    let uniform = ((v + 1) as f64).log2();
    let mut text = vec![format!(
        "trained order-{} model over {v} strategies from {} transitions; wrote {}",
        model.order(),
        model.total_transitions(),
        args.out.display()
    )];
    let mut summary = json!({
        "command": "train",
        "config": config,
        "strategies": v,
        "transitions": model.total_transitions(),
        "uniform_bits": uniform,
        "out": args.out,
    });
    if let Some(path) = &args.heldout {
        let heldout = load_corpus(path, mode)?;
        let ce = model.cross_entropy(&heldout)?;
        text.push(format!("held-out cross-entropy: {ce:.4} bits/symbol (uniform {uniform:.4})"));
        summary["heldout_bits"] = json!(ce);
    }
    ctx.emit(summary, &text)
}

fn gen_chains(ctx: &Ctx, args: &GenChainsArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let question = load_question(&args.question)?;
    let (config, auto) = ctx.generation(&args.generation, ctx.file.generation.unwrap_or_default());
    let chains = if args.top {
        vec![model.top_chain(&question, config.max_len)?]
    } else {
        config.validate()?;
        model.generate_chains(&question, &config)?
    };
    let text: Vec<String> = chains.iter().map(ToString::to_string).collect();
    ctx.emit(
        json!({
            "command": "gen-chains",
            "question_id": question.id,
            "seed": config.seed,
            "seed_auto": auto,
            "expressible": expressible_chains(model.vocabulary().len(), config.max_len),
            "chains": text,
        }),
        &text,
    )
}

fn build_prompt(ctx: &Ctx, args: &BuildPromptArgs) -> CliResult<()> {
    let question = load_question(&args.question)?;
    let templates = TemplateSet::resolve(
        args.template_set
            .as_deref()
            .or(ctx.file.template_set.as_deref())
            .unwrap_or(promptkit::DEFAULT_TEMPLATE_SET),
    )?;
    let mut seed = None;
    let chains: Vec<StrategyChain> = if !args.chains.is_empty() {
        args.chains
            .iter()
            .map(|c| StrategyChain::parse_bracketed(c).map_err(|e| CliError::usage(e.to_string())))
            .collect::<CliResult<_>>()?
    } else {
        match args.method {
            Method::CoT | Method::Mhs => Vec::new(),
            Method::Sc => {
                let path = args.corpus.as_ref().ok_or_else(|| CliError::usage("SC needs --corpus or --chain"))?;
                let corpus = load_corpus(path, ctx.file.vocab_mode(args.vocab_mode))?;
                vec![corpus::most_frequent_chain(&corpus)?]
            }
            Method::Dsc | Method::Dscs => {
                let path = args
                    .model
                    .as_ref()
                    .ok_or_else(|| CliError::usage(format!("{} needs --model or --chain", args.method)))?;
                let model = load_model(path)?;
                let (config, auto) = ctx.generation(&args.generation, ctx.file.generation.unwrap_or_default());
                if args.method == Method::Dsc {
                    vec![model.top_chain(&question, config.max_len)?]
                } else {
                    config.validate()?;
                    seed = Some((config.seed, auto));
                    model.generate_chains(&question, &config)?
                }
            }
        }
    };
    let bundle = promptkit::build_prompt(&templates, args.method, &question, &chains)?;
    let mut summary = serde_json::to_value(&bundle).map_err(CliError::internal)?;
    summary["command"] = json!("build-prompt");
    if let Some((seed, auto)) = seed {
        summary["seed"] = json!(seed);
        summary["seed_auto"] = json!(auto);
    }
    ctx.emit(summary, std::slice::from_ref(&bundle.rendered))
}

fn run(ctx: &Ctx, args: &RunArgs) -> CliResult<()> {
    let mut config = ctx.file.experiment.clone().unwrap_or_default();
    if let Some(v) = &args.questions {
        config.questions = v.clone();
    }
    if args.corpus.is_some() {
        config.corpus = args.corpus.clone();
    }
    if args.model.is_some() {
        config.model = args.model.clone();
    }
    if args.ratings.is_some() {
        config.ratings = args.ratings.clone();
    }
    if let Some(m) = &args.methods {
        config.methods = m.clone();
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(kind) = args.backend {
        config.backend.kind = kind;
    }
    if args.endpoint.is_some() {
        config.backend.endpoint = args.endpoint.clone();
    }
    if let Some(model) = &args.llm_model {
        config.backend.model = model.clone();
    }
    if args.mock_script.is_some() {
        config.backend.mock_script = args.mock_script.clone();
    }
    if let Some(n) = args.max_parallel {
        config.backend.max_parallel = n;
    }
    if let Some(t) = args.tokenizer {
        config.tokenizer = t;
    }
    if args.no_smoothing {
        config.smoothing = false;
    }
    if let Some(t) = args.template_set.as_ref().or(ctx.file.template_set.as_ref()) {
        config.template_set = t.clone();
    }
    if let Some(mode) = args.vocab_mode.or(ctx.file.vocab_mode) {
        config.vocab_mode = mode;
    }
    // A seed in the experiment section of the config file counts as given.
    let explicit_seed = args
        .generation
        .seed
        .or(ctx.file.seed)
        .or(ctx.file.experiment.as_ref().map(|e| e.seed));
    let (generation, auto) = ctx.generation(
        &GenerationArgs {
            seed: explicit_seed,
            ..args.generation.clone()
        },
        config.generation,
    );
    config.seed = generation.seed;
    config.generation = generation;
    if ctx.file.experiment.is_none() || args.generation.seed.is_some() {
        config.backend.mock_seed = config.seed;
    }
    config.validate()?;

    let outcome = harness::run_experiment(&config)?;
    let mut text = vec![format!("wrote {}", config.output_dir.display())];
    let mut methods = Vec::new();
    for row in &outcome.report.overall {
        let avg = row.metrics.as_ref().map(|m| m.bleu_avg);
        text.push(format!(
            "{}: {} questions, {} failed{}",
            row.method,
            row.n_questions,
            row.n_failures,
            row.metrics
                .as_ref()
                .map(|m| format!(", BLEU avg {:.2}, D-1 {:.2}, D-2 {:.2}", m.bleu_avg, m.d1, m.d2))
                .unwrap_or_default()
        ));
        methods.push(json!({
            "method": row.method,
            "n_questions": row.n_questions,
            "n_failures": row.n_failures,
            "bleu_avg": avg,
        }));
    }
    ctx.emit(
        json!({
            "command": "run",
            "output_dir": config.output_dir,
            "seed": config.seed,
            "seed_auto": auto,
            "config_hash": outcome.manifest.config_hash,
            "methods": methods,
        }),
        &text,
    )
}

fn evaluate(ctx: &Ctx, args: &EvaluateArgs) -> CliResult<()> {
    if args.run.is_none() && args.first.is_none() {
        return Err(CliError::usage("evaluate needs --run and/or --first/--second"));
    }
    let mut summary = json!({ "command": "evaluate" });
    let mut text = Vec::new();
    if let Some(run) = &args.run {
        let questions = args
            .questions
            .as_ref()
            .ok_or_else(|| CliError::usage("--run needs --questions"))?;
        let manifest: harness::Manifest = serde_json::from_str(&read_to_string(&run.join(harness::MANIFEST_FILE))?)
            .map_err(|e| CliError::data(format!("{}: {e}", run.join(harness::MANIFEST_FILE).display())))?;
        let records_path = run.join(harness::RECORDS_FILE);
        let records = harness::read_records(
            File::open(&records_path).map_err(|e| CliError::data(format!("{}: {e}", records_path.display())))?,
        )?;
        let corpus = load_corpus(questions, ctx.file.vocab_mode(args.vocab_mode))?;
        let ratings = match &args.ratings {
            Some(path) => Some(metrics::parse_ratings(read_to_string(path)?.as_bytes())?),
            None => None,
        };
        let scoring = Scoring {
            tokenizer: args.tokenizer.unwrap_or(manifest.tokenizer),
            smoothing: manifest.smoothing && !args.no_smoothing,
        };
        let report = harness::build_report(&records, &corpus, ratings.as_deref(), scoring)?;
        let out = args.out.clone().unwrap_or_else(|| run.clone());
        fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
        for format in ReportFormat::ALL {
            harness::emit_report(&report, format, &out)?;
        }
        text.push(format!("rescored {} records; wrote reports to {}", records.len(), out.display()));
        summary["records"] = json!(records.len());
        summary["out"] = json!(out);
    }
    if let (Some(first), Some(second)) = (&args.first, &args.second) {
        let a = metrics::parse_ratings(read_to_string(first)?.as_bytes())?;
        let b = metrics::parse_ratings(read_to_string(second)?.as_bytes())?;
        let mut agreement = AgreementLoop::new(a, b, args.threshold)?;
        let round = agreement.evaluate()?.clone();
        text.push(format!(
            "quadratic kappa: {}; {} flagged (gap > {})",
            round.pooled_kappa.map_or("undefined".to_string(), |k| format!("{k:.4}")),
            round.flagged.len(),
            args.threshold
        ));
        for f in &round.flagged {
            text.push(format!(
                "flag {} {} {}: {} vs {}",
                f.question_id,
                f.method,
                f.dimension.as_str(),
                f.first,
                f.second
            ));
        }
        summary["agreement"] = serde_json::to_value(&round).map_err(CliError::internal)?;
    }
    ctx.emit(summary, &text)
}

fn report(ctx: &Ctx, args: &ReportArgs) -> CliResult<()> {
    let path = args.run.join(harness::METRICS_FILE);
    let report: harness::ExperimentReport =
        serde_json::from_str(&read_to_string(&path)?).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let body = match args.format {
        ReportFormat::Json => serde_json::to_string_pretty(&report).map_err(CliError::internal)? + "\n",
        ReportFormat::Csv => harness::report_to_csv(&report),
        ReportFormat::Markdown => harness::render_markdown(&report),
    };
    match &args.out {
        Some(out) => {
            write_file(out, body.as_bytes())?;
            ctx.emit(
                json!({ "command": "report", "out": out }),
                &[format!("wrote {}", out.display())],
            )
        }
        None if ctx.json => ctx.emit(json!({ "command": "report", "body": body }), &[]),
        None => stdout_result(io::stdout().lock().write_all(body.as_bytes())),
    }
}

/// A closed pipe (`dsc ... | head`) is not an error worth reporting.
fn stdout_result(written: io::Result<()>) -> CliResult<()> {
    match written {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            Err(CliError::data(format!("writing to standard output: {e}")))
        }
        _ => Ok(()),
    }
}

fn version_text() -> String {
    let templates: Vec<String> = TemplateSet::builtin_names()
        .into_iter()
        .filter_map(|name| TemplateSet::builtin(name).ok())
        .map(|t| t.version().to_string())
        .collect();
    format!(
        "{}\ncorpus schema {CORPUS_SCHEMA_VERSION}, model schema {MODEL_SCHEMA_VERSION}, run schema {RUN_SCHEMA_VERSION}\ntemplates: {}",
        env!("CARGO_PKG_VERSION"),
        templates.join(", ")
    )
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let ctx = Ctx {
        json: cli.json,
        file: FileConfig::load(cli.config.as_deref())?,
    };
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::GenChains(a) => gen_chains(&ctx, a),
        Command::BuildPrompt(a) => build_prompt(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().version(version_text()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit::USAGE);
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
        Err(_) => ExitCode::from(exit::INTERNAL),
    }
}
