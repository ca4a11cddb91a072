//! End-to-end experiment runs, stratified reporting and run directories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainmodel::{ChainGenerator, ChainModel, ChainModelError, GenerationConfig};
use crate::corpus::{self, Corpus, CorpusError, QuestionRecord, RiskLevel, StrategyChain, VocabMode};
use crate::llmclient::{BackendConfig, CompletionRequest, LlmClient, LlmError};
use crate::metrics::{self, Dimension, HumanRating, MetricError, MetricReport, TokenizerMode};
use crate::promptkit::{self, Method, ParsedReply, PromptBundle, PromptError, TemplateSet};
use crate::seed::{derive_seed, sha256_hex};

pub const RUN_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("question {0:?} has no reference answer")]
    MissingReferences(String),
    #[error("every question failed for method(s) {}", .0.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", "))]
    AllQuestionsFailed(Vec<Method>),
    #[error("nothing to report")]
    EmptyReport,
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("malformed run record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ChainModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_error(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_error(path))
}

/// Everything needed to reproduce a run. Paths point at input files; the
/// output directory does not take part in the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Question set with reference answers, in corpus format.
    pub questions: PathBuf,
    /// Preprocessed training corpus; SC takes its most frequent chain.
    pub corpus: Option<PathBuf>,
    /// Trained chain model (JSON); required by DSC and DSCs.
    pub model: Option<PathBuf>,
    /// Human ratings (JSON Lines); rating columns appear only when given.
    pub ratings: Option<PathBuf>,
    pub vocab_mode: VocabMode,
    /// Built-in template set name or a directory.
    pub template_set: String,
    pub backend: BackendConfig,
    pub generation: GenerationConfig,
    pub tokenizer: TokenizerMode,
    pub smoothing: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            questions: PathBuf::new(),
            corpus: None,
            model: None,
            ratings: None,
            vocab_mode: VocabMode::BuiltinDefault,
            template_set: promptkit::DEFAULT_TEMPLATE_SET.to_string(),
            backend: BackendConfig::default(),
            generation: GenerationConfig::default(),
            tokenizer: TokenizerMode::default(),
            smoothing: true,
            seed: 0,
            output_dir: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        let unique: BTreeSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return bad("a method is listed twice".into());
        }
        if self.questions.as_os_str().is_empty() {
            return bad("no question set given".into());
        }
        for m in [Method::Dsc, Method::Dscs] {
            if self.methods.contains(&m) && self.model.is_none() {
                return bad(format!("{m} needs a chain model"));
            }
        }
        if self.methods.contains(&Method::Sc) && self.corpus.is_none() {
            return bad("SC needs a preprocessed corpus".into());
        }
        if self.methods.contains(&Method::Dscs) {
            self.generation
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            if self.generation.k < 2 {
                return bad("DSCs needs k >= 2 candidate chains".into());
            }
        }
        self.backend
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring output locations.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.backend.log_dir = None;
        sha256_hex(&serde_json::to_string(&canonical).expect("config serializes"))
    }

    /// Seed of the candidate-chain sampler for one question.
    pub fn dscs_seed(&self, question_id: &str) -> u64 {
        derive_seed(self.seed, &[Method::Dscs.as_str(), question_id])
    }
}

/// Loaded experiment inputs.
pub struct ExperimentInputs {
    pub questions: Corpus,
    pub sc_chain: Option<StrategyChain>,
    pub generator: Option<Box<dyn ChainGenerator>>,
    pub templates: TemplateSet,
    pub ratings: Option<Vec<HumanRating>>,
    /// Input name to SHA-256 of the file contents.
    pub input_hashes: BTreeMap<String, String>,
}

impl ExperimentInputs {
    pub fn load(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut input_hashes = BTreeMap::new();
        let questions_text = read_text(&config.questions)?;
        input_hashes.insert("questions".to_string(), sha256_hex(&questions_text));
        let questions = corpus::parse_corpus(questions_text.as_bytes(), config.vocab_mode)?;

        let sc_chain = match (&config.corpus, config.methods.contains(&Method::Sc)) {
            (Some(path), true) => {
                let text = read_text(path)?;
                input_hashes.insert("corpus".to_string(), sha256_hex(&text));
                let corpus = corpus::parse_corpus(text.as_bytes(), config.vocab_mode)?;
                Some(corpus::most_frequent_chain(&corpus)?)
            }
            _ => None,
        };
        let needs_model = config.methods.iter().any(|m| matches!(m, Method::Dsc | Method::Dscs));
        let generator: Option<Box<dyn ChainGenerator>> = match (&config.model, needs_model) {
            (Some(path), true) => {
                let text = read_text(path)?;
                input_hashes.insert("model".to_string(), sha256_hex(&text));
                Some(Box::new(ChainModel::from_json(&text)?))
            }
            _ => None,
        };
        let ratings = match &config.ratings {
            Some(path) => {
                let text = read_text(path)?;
                input_hashes.insert("ratings".to_string(), sha256_hex(&text));
                Some(metrics::parse_ratings(text.as_bytes())?)
            }
            None => None,
        };
        let templates = TemplateSet::resolve(&config.template_set)?;
        Ok(Self {
            questions,
            sc_chain,
            generator,
            templates,
            ratings,
            input_hashes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureStage {
    Prompt,
    Backend,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureNote {
    pub stage: FailureStage,
    pub message: String,
}

/// Completion metadata kept in run records. Wall-clock latency is left out
/// so that run directories are reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionMeta {
    pub request_id: String,
    pub attempts: u32,
    pub backend: String,
}

/// Outcome for one (question, method) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: String,
    pub method: Method,
    pub bundle: Option<PromptBundle>,
    pub completion: Option<CompletionMeta>,
    pub reply: Option<ParsedReply>,
    pub failure: Option<FailureNote>,
}

impl RunRecord {
    pub fn is_success(&self) -> bool {
        self.reply.is_some()
    }

    /// Exactly one of reply and failure is present.
    pub fn validate(&self) -> Result<(), String> {
        match (&self.reply, &self.failure) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(format!(
                "record {}/{} must carry exactly one of reply and failure",
                self.question_id, self.method
            )),
        }
    }

    fn failed(question_id: &str, method: Method, stage: FailureStage, message: String) -> Self {
        Self {
            question_id: question_id.to_string(),
            method,
            bundle: None,
            completion: None,
            reply: None,
            failure: Some(FailureNote { stage, message }),
        }
    }
}

pub fn write_records<W: Write>(records: &[RunRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("records serialize"))?;
    }
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>, HarnessError> {
    let mut out = Vec::new();
    let mut text = String::new();
    BufReader::new(input)
        .read_to_string(&mut text)
        .map_err(|e| HarnessError::MalformedRecord { line: 0, message: e.to_string() })?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| HarnessError::MalformedRecord { line: i + 1, message };
        let record: RunRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        record.validate().map_err(malformed)?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComplexityBin {
    Simple,
    Moderate,
    Complex,
}

impl ComplexityBin {
    pub const ALL: [ComplexityBin; 3] = [ComplexityBin::Simple, ComplexityBin::Moderate, ComplexityBin::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            ComplexityBin::Simple => "Simple",
            ComplexityBin::Moderate => "Moderate",
            ComplexityBin::Complex => "Complex",
        }
    }

    pub fn from_topic_count(n: usize) -> Self {
        match n {
            0..=3 => ComplexityBin::Simple,
            4..=6 => ComplexityBin::Moderate,
            _ => ComplexityBin::Complex,
        }
    }
}

/// The question carries no topic annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("question has no topic annotation")]
pub struct Unannotated;

pub fn classify_complexity(question: &QuestionRecord) -> Result<ComplexityBin, Unannotated> {
    question
        .topics
        .as_ref()
        .map(|t| ComplexityBin::from_topic_count(t.len()))
        .ok_or(Unannotated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratumAxis {
    Risk,
    Complexity,
}

impl StratumAxis {
    pub fn strata(self) -> Vec<&'static str> {
        match self {
            StratumAxis::Risk => RiskLevel::ALL.iter().map(|r| r.as_str()).collect(),
            StratumAxis::Complexity => ComplexityBin::ALL.iter().map(|b| b.as_str()).collect(),
        }
    }

    fn stratum_of(self, question: &QuestionRecord) -> Option<&'static str> {
        match self {
            StratumAxis::Risk => question.risk.map(RiskLevel::as_str),
            StratumAxis::Complexity => classify_complexity(question).ok().map(ComplexityBin::as_str),
        }
    }
}

/// Mean human scores: per question averaged over annotators, then over
/// questions. `None` means no rating fell into the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMeans {
    pub n_rated: usize,
    pub fluency: Option<f64>,
    pub relevance: Option<f64>,
    pub helpfulness: Option<f64>,
    pub empathy: Option<f64>,
}

impl RatingMeans {
    pub fn get(&self, dimension: Dimension) -> Option<f64> {
        match dimension {
            Dimension::Fluency => self.fluency,
            Dimension::Relevance => self.relevance,
            Dimension::Helpfulness => self.helpfulness,
            Dimension::Empathy => self.empathy,
        }
    }

    pub fn compute<'a>(ratings: impl IntoIterator<Item = &'a HumanRating>) -> Self {
        let mut per_question: BTreeMap<&str, Vec<&HumanRating>> = BTreeMap::new();
        for r in ratings {
            per_question.entry(r.question_id.as_str()).or_default().push(r);
        }
        let mean = |d: Dimension| {
            if per_question.is_empty() {
                return None;
            }
            let total: f64 = per_question
                .values()
                .map(|rs| rs.iter().map(|r| r.score(d) as f64).sum::<f64>() / rs.len() as f64)
                .sum();
            Some(total / per_question.len() as f64)
        };
        Self {
            n_rated: per_question.len(),
            fluency: mean(Dimension::Fluency),
            relevance: mean(Dimension::Relevance),
            helpfulness: mean(Dimension::Helpfulness),
            empathy: mean(Dimension::Empathy),
        }
    }
}

/// One method within one stratum (or overall).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stratum: String,
    pub method: Method,
    pub n_questions: usize,
    pub n_failures: usize,
    /// Absent when no sample in the row succeeded.
    pub metrics: Option<MetricReport>,
    /// Absent when no ratings file was supplied.
    pub ratings: Option<RatingMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTable {
    pub axis: StratumAxis,
    pub rows: Vec<ReportRow>,
    /// Per method, questions lacking the annotation for this axis.
    pub unannotated: BTreeMap<Method, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureItem {
    pub question_id: String,
    pub method: Method,
    pub stage: FailureStage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub overall: Vec<ReportRow>,
    pub risk: StratifiedTable,
    pub complexity: StratifiedTable,
    pub failures: Vec<FailureItem>,
}

/// How generated text is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scoring {
    pub tokenizer: TokenizerMode,
    pub smoothing: bool,
}

struct ScoringContext<'a> {
    questions: &'a Corpus,
    ratings: Option<&'a [HumanRating]>,
    scoring: Scoring,
}

impl ScoringContext<'_> {
    fn references(&self, question_id: &str) -> Result<Vec<Vec<String>>, HarnessError> {
        let refs: Vec<Vec<String>> = self
            .questions
            .answers_for(question_id)
            .map(|a| metrics::tokenize(&a.full_text(), self.scoring.tokenizer))
            .filter(|t| !t.is_empty())
            .collect();
        if refs.is_empty() {
            return Err(HarnessError::MissingReferences(question_id.to_string()));
        }
        Ok(refs)
    }

    fn row(&self, stratum: &str, method: Method, records: &[&RunRecord]) -> Result<ReportRow, HarnessError> {
        let mut samples = Vec::new();
        for r in records.iter().filter(|r| r.method == method) {
            if let Some(reply) = &r.reply {
                let candidate = metrics::tokenize(&reply.reply_text, self.scoring.tokenizer);
                samples.push((candidate, self.references(&r.question_id)?));
            }
        }
        let in_row: Vec<&&RunRecord> = records.iter().filter(|r| r.method == method).collect();
        let metrics = if samples.is_empty() {
            None
        } else {
            Some(MetricReport::compute(&samples, self.scoring.tokenizer, self.scoring.smoothing)?)
        };
        let ratings = self.ratings.map(|all| {
            let ids: BTreeSet<&str> = in_row.iter().map(|r| r.question_id.as_str()).collect();
            RatingMeans::compute(
                all.iter()
                    .filter(|r| r.method.parse::<Method>() == Ok(method) && ids.contains(r.question_id.as_str())),
            )
        });
        Ok(ReportRow {
            stratum: stratum.to_string(),
            method,
            n_questions: in_row.len(),
            n_failures: in_row.iter().filter(|r| !r.is_success()).count(),
            metrics,
            ratings,
        })
    }
}

fn methods_of(records: &[RunRecord]) -> BTreeSet<Method> {
    records.iter().map(|r| r.method).collect()
}

/// Per-stratum metrics and rating means. Strata come in fixed order
/// (Green/Amber/Red, Simple/Moderate/Complex) with methods inside each.
pub fn stratify(
    records: &[RunRecord],
    questions: &Corpus,
    ratings: Option<&[HumanRating]>,
    scoring: Scoring,
    axis: StratumAxis,
) -> Result<StratifiedTable, HarnessError> {
    let ctx = ScoringContext {
        questions,
        ratings,
        scoring,
    };
    let methods = methods_of(records);
    let mut by_stratum: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    let mut unannotated: BTreeMap<Method, usize> = methods.iter().map(|&m| (m, 0)).collect();
    for r in records {
        let question = questions
            .question(&r.question_id)
            .ok_or_else(|| HarnessError::MissingReferences(r.question_id.clone()))?;
        match axis.stratum_of(question) {
            Some(s) => by_stratum.entry(s).or_default().push(r),
            None => *unannotated.entry(r.method).or_default() += 1,
        }
    }
    let mut rows = Vec::new();
    for stratum in axis.strata() {
        let members = by_stratum.get(stratum).map(Vec::as_slice).unwrap_or(&[]);
        for &method in &methods {
            rows.push(ctx.row(stratum, method, members)?);
        }
    }
    Ok(StratifiedTable {
        axis,
        rows,
        unannotated,
    })
}

/// Overall, risk and complexity tables plus itemized failures.
pub fn build_report(
    records: &[RunRecord],
    questions: &Corpus,
    ratings: Option<&[HumanRating]>,
    scoring: Scoring,
) -> Result<ExperimentReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let ctx = ScoringContext {
        questions,
        ratings,
        scoring,
    };
    let all: Vec<&RunRecord> = records.iter().collect();
    let overall = methods_of(records)
        .into_iter()
        .map(|m| ctx.row("all", m, &all))
        .collect::<Result<Vec<_>, _>>()?;
    let failures = records
        .iter()
        .filter_map(|r| {
            r.failure.as_ref().map(|f| FailureItem {
                question_id: r.question_id.clone(),
                method: r.method,
                stage: f.stage,
                message: f.message.clone(),
            })
        })
        .collect();
    Ok(ExperimentReport {
        overall,
        risk: stratify(records, questions, ratings, scoring, StratumAxis::Risk)?,
        complexity: stratify(records, questions, ratings, scoring, StratumAxis::Complexity)?,
        failures,
    })
}

/// Reproducibility ledger of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub mock_seed: u64,
    pub generation: GenerationConfig,
    pub methods: Vec<Method>,
    pub template_set: String,
    pub template_version: String,
    pub backend: String,
    pub inputs: BTreeMap<String, String>,
    pub tokenizer: TokenizerMode,
    pub smoothing: bool,
    pub n_questions: usize,
    pub n_records: usize,
    pub n_failures: usize,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub report: ExperimentReport,
    pub manifest: Manifest,
}

impl ExperimentOutcome {
    /// Methods for which no question produced a usable reply.
    pub fn fully_failed_methods(&self) -> Vec<Method> {
        self.report
            .overall
            .iter()
            .filter(|row| row.n_questions > 0 && row.n_failures == row.n_questions)
            .map(|row| row.method)
            .collect()
    }
}

fn request_id(question_id: &str, method: Method) -> String {
    format!("{question_id}::{method}")
}

fn chains_for(
    config: &ExperimentConfig,
    inputs: &ExperimentInputs,
    method: Method,
    question: &QuestionRecord,
) -> Result<Vec<StrategyChain>, HarnessError> {
    let generator = || {
        inputs
            .generator
            .as_deref()
            .ok_or_else(|| HarnessError::Config(format!("{method} needs a chain model")))
    };
    Ok(match method {
        Method::CoT | Method::Mhs => Vec::new(),
        Method::Sc => vec![inputs
            .sc_chain
            .clone()
            .ok_or_else(|| HarnessError::Config("SC needs a preprocessed corpus".into()))?],
        Method::Dsc => vec![generator()?.top_chain(question, config.generation.max_len)?],
        Method::Dscs => {
            let generation = GenerationConfig {
                seed: config.dscs_seed(&question.id),
                ..config.generation
            };
            generator()?.generate_chains(question, &generation)?
        }
    })
}

/// Runs every (question, method) pair through `client` and scores the
/// replies. Per-pair failures are recorded, not raised.
pub fn execute(
    config: &ExperimentConfig,
    inputs: &ExperimentInputs,
    client: &LlmClient,
) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    let questions = inputs.questions.questions();
    if questions.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    for q in questions {
        if !inputs.questions.answers_for(&q.id).any(|a| !a.full_text().trim().is_empty()) {
            return Err(HarnessError::MissingReferences(q.id.clone()));
        }
    }

    let mut records: BTreeMap<(String, Method), RunRecord> = BTreeMap::new();
    let mut pending: HashMap<String, (String, Method, PromptBundle)> = HashMap::new();
    let mut requests = Vec::new();
    for q in questions {
        for &method in &config.methods {
            let chains = chains_for(config, inputs, method, q)?;
            match promptkit::build_prompt(&inputs.templates, method, q, &chains) {
                Ok(bundle) => {
                    let id = request_id(&q.id, method);
                    requests.push(CompletionRequest::from_bundle(id.clone(), &bundle));
                    pending.insert(id, (q.id.clone(), method, bundle));
                }
                Err(e) => {
                    records.insert(
                        (q.id.clone(), method),
                        RunRecord::failed(&q.id, method, FailureStage::Prompt, e.to_string()),
                    );
                }
            }
        }
    }

    for (id, outcome) in client.complete_all(&requests) {
        let (question_id, method, bundle) = pending.remove(&id).expect("every result answers a request");
        let record = match outcome {
            Err(e) => RunRecord {
                bundle: Some(bundle),
                ..RunRecord::failed(&question_id, method, FailureStage::Backend, e.to_string())
            },
            Ok(result) => {
                let completion = Some(CompletionMeta {
                    request_id: result.request_id.clone(),
                    attempts: result.attempts,
                    backend: result.backend.clone(),
                });
                match promptkit::parse_reply(&bundle, &result.text) {
                    Ok(reply) => RunRecord {
                        question_id: question_id.clone(),
                        method,
                        bundle: Some(bundle),
                        completion,
                        reply: Some(reply),
                        failure: None,
                    },
                    Err(e) => RunRecord {
                        bundle: Some(bundle),
                        completion,
                        ..RunRecord::failed(&question_id, method, FailureStage::Parse, e.to_string())
                    },
                }
            }
        };
        records.insert((question_id, method), record);
    }
    let records: Vec<RunRecord> = records.into_values().collect();

    let scoring = Scoring {
        tokenizer: config.tokenizer,
        smoothing: config.smoothing,
    };
    let report = build_report(&records, &inputs.questions, inputs.ratings.as_deref(), scoring)?;
    let manifest = Manifest {
        schema_version: RUN_SCHEMA_VERSION,
        config_hash: config.hash(),
        seed: config.seed,
        mock_seed: config.backend.mock_seed,
        generation: config.generation,
        methods: config.methods.clone(),
        template_set: inputs.templates.name().to_string(),
        template_version: inputs.templates.version().to_string(),
        backend: client.backend_id(),
        inputs: inputs.input_hashes.clone(),
        tokenizer: config.tokenizer,
        smoothing: config.smoothing,
        n_questions: questions.len(),
        n_records: records.len(),
        n_failures: records.iter().filter(|r| !r.is_success()).count(),
    };
    Ok(ExperimentOutcome {
        records,
        report,
        manifest,
    })
}

/// Loads inputs, runs, and writes the run directory. Fails after writing
/// when some method produced no usable reply at all.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let inputs = ExperimentInputs::load(config)?;
    let client = LlmClient::from_config(&config.backend)?;
    let outcome = execute(config, &inputs, &client)?;
    write_run_dir(&outcome, &config.output_dir)?;
    let dead = outcome.fully_failed_methods();
    if !dead.is_empty() {
        return Err(HarnessError::AllQuestionsFailed(dead));
    }
    Ok(outcome)
}

pub fn write_run_dir(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let manifest = serde_json::to_string_pretty(&outcome.manifest).expect("manifest serializes");
    write_text(&dir.join(MANIFEST_FILE), &(manifest + "\n"))?;
    let mut records = Vec::new();
    write_records(&outcome.records, &mut records).expect("writing to memory");
    let path = dir.join(RECORDS_FILE);
    fs::write(&path, records).map_err(io_error(&path))?;
    for format in ReportFormat::ALL {
        emit_report(&outcome.report, format, dir)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => METRICS_FILE,
            ReportFormat::Csv => REPORT_CSV_FILE,
            ReportFormat::Markdown => REPORT_MD_FILE,
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Writes the report in `format` into `dir`; returns the file path.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<PathBuf, HarnessError> {
    if report.overall.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let path = dir.join(format.file_name());
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    };
    write_text(&path, &text)?;
    Ok(path)
}

const UNANNOTATED: &str = "Unannotated";

#[derive(Debug, Default, Serialize, Deserialize)]
struct CsvRow {
    table: String,
    stratum: String,
    method: Option<Method>,
    n_questions: Option<usize>,
    n_failures: Option<usize>,
    b1: Option<f64>,
    b2: Option<f64>,
    b3: Option<f64>,
    b4: Option<f64>,
    bleu_avg: Option<f64>,
    d1: Option<f64>,
    d2: Option<f64>,
    n: Option<usize>,
    tokenizer: Option<TokenizerMode>,
    smoothing: Option<bool>,
    n_rated: Option<usize>,
    fluency: Option<f64>,
    relevance: Option<f64>,
    helpfulness: Option<f64>,
    empathy: Option<f64>,
    question_id: Option<String>,
    stage: Option<FailureStage>,
    note: Option<String>,
}

fn csv_row(table: &str, row: &ReportRow) -> CsvRow {
    let m = row.metrics.as_ref();
    let r = row.ratings.as_ref();
    CsvRow {
        table: table.to_string(),
        stratum: row.stratum.clone(),
        method: Some(row.method),
        n_questions: Some(row.n_questions),
        n_failures: Some(row.n_failures),
        b1: m.map(|m| m.bleu[0]),
        b2: m.map(|m| m.bleu[1]),
        b3: m.map(|m| m.bleu[2]),
        b4: m.map(|m| m.bleu[3]),
        bleu_avg: m.map(|m| m.bleu_avg),
        d1: m.map(|m| m.d1),
        d2: m.map(|m| m.d2),
        n: m.map(|m| m.n_samples),
        tokenizer: m.map(|m| m.tokenizer),
        smoothing: m.map(|m| m.smoothing),
        n_rated: r.map(|r| r.n_rated),
        fluency: r.and_then(|r| r.fluency),
        relevance: r.and_then(|r| r.relevance),
        helpfulness: r.and_then(|r| r.helpfulness),
        empathy: r.and_then(|r| r.empathy),
        ..CsvRow::default()
    }
}

/// Long-format CSV holding every table, the unannotated counts and the
/// failure list.
pub fn report_to_csv(report: &ExperimentReport) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut rows: Vec<CsvRow> = report.overall.iter().map(|r| csv_row("overall", r)).collect();
    for (name, table) in [("risk", &report.risk), ("complexity", &report.complexity)] {
        rows.extend(table.rows.iter().map(|r| csv_row(name, r)));
        rows.extend(table.unannotated.iter().map(|(&method, &n)| CsvRow {
            table: name.to_string(),
            stratum: UNANNOTATED.to_string(),
            method: Some(method),
            n_questions: Some(n),
            ..CsvRow::default()
        }));
    }
    rows.extend(report.failures.iter().map(|f| CsvRow {
        table: "failure".to_string(),
        method: Some(f.method),
        question_id: Some(f.question_id.clone()),
        stage: Some(f.stage),
        note: Some(f.message.clone()),
        ..CsvRow::default()
    }));
    for row in rows {
        out.serialize(row).expect("csv rows serialize");
    }
    String::from_utf8(out.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

fn report_row(row: &CsvRow) -> Result<ReportRow, HarnessError> {
    let bad = |m: &str| HarnessError::MalformedReport(format!("{} row {:?}: {m}", row.table, row.stratum));
    let metrics = match (row.b1, row.b2, row.b3, row.b4, row.bleu_avg, row.d1, row.d2, row.n) {
        (Some(b1), Some(b2), Some(b3), Some(b4), Some(bleu_avg), Some(d1), Some(d2), Some(n)) => Some(MetricReport {
            bleu: [b1, b2, b3, b4],
            bleu_avg,
            d1,
            d2,
            n_samples: n,
            tokenizer: row.tokenizer.ok_or_else(|| bad("missing tokenizer"))?,
            smoothing: row.smoothing.ok_or_else(|| bad("missing smoothing"))?,
        }),
        (None, None, None, None, None, None, None, None) => None,
        _ => return Err(bad("incomplete metric columns")),
    };
    let ratings = row.n_rated.map(|n_rated| RatingMeans {
        n_rated,
        fluency: row.fluency,
        relevance: row.relevance,
        helpfulness: row.helpfulness,
        empathy: row.empathy,
    });
    Ok(ReportRow {
        stratum: row.stratum.clone(),
        method: row.method.ok_or_else(|| bad("missing method"))?,
        n_questions: row.n_questions.ok_or_else(|| bad("missing n_questions"))?,
        n_failures: row.n_failures.ok_or_else(|| bad("missing n_failures"))?,
        metrics,
        ratings,
    })
}

/// Inverse of [`report_to_csv`].
pub fn report_from_csv<R: Read>(input: R) -> Result<ExperimentReport, HarnessError> {
    let mut report = ExperimentReport {
        overall: Vec::new(),
        risk: StratifiedTable {
            axis: StratumAxis::Risk,
            rows: Vec::new(),
            unannotated: BTreeMap::new(),
        },
        complexity: StratifiedTable {
            axis: StratumAxis::Complexity,
            rows: Vec::new(),
            unannotated: BTreeMap::new(),
        },
        failures: Vec::new(),
    };
    for row in csv::Reader::from_reader(input).deserialize::<CsvRow>() {
        let row = row.map_err(|e| HarnessError::MalformedReport(e.to_string()))?;
        let table = match row.table.as_str() {
            "overall" => {
                report.overall.push(report_row(&row)?);
                continue;
            }
            "risk" => &mut report.risk,
            "complexity" => &mut report.complexity,
            "failure" => {
                let missing = |what: &str| HarnessError::MalformedReport(format!("failure row without {what}"));
                report.failures.push(FailureItem {
                    question_id: row.question_id.clone().ok_or_else(|| missing("question_id"))?,
                    method: row.method.ok_or_else(|| missing("method"))?,
                    stage: row.stage.ok_or_else(|| missing("stage"))?,
                    message: row.note.clone().unwrap_or_default(),
                });
                continue;
            }
            other => return Err(HarnessError::MalformedReport(format!("unknown table {other:?}"))),
        };
        if row.stratum == UNANNOTATED {
            let method = row
                .method
                .ok_or_else(|| HarnessError::MalformedReport("unannotated row without method".into()))?;
            table.unannotated.insert(method, row.n_questions.unwrap_or(0));
        } else {
            table.rows.push(report_row(&row)?);
        }
    }
    Ok(report)
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn metric_cells(row: &ReportRow) -> String {
    match &row.metrics {
        Some(m) => format!(
            "{} | {} | {} | {} | {} | {} | {}",
            cell(Some(m.bleu[0])),
            cell(Some(m.bleu[1])),
            cell(Some(m.bleu[2])),
            cell(Some(m.bleu[3])),
            cell(Some(m.bleu_avg)),
            cell(Some(m.d1)),
            cell(Some(m.d2))
        ),
        None => ["n/a"; 7].join(" | "),
    }
}

fn rating_cells(row: &ReportRow) -> String {
    Dimension::ALL
        .iter()
        .map(|&d| cell(row.ratings.as_ref().and_then(|r| r.get(d))))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn rating_header() -> (String, String) {
    let names: Vec<&str> = Dimension::ALL.iter().map(|d| d.title()).collect();
    (format!(" | {}", names.join(" | ")), "|---".repeat(names.len()))
}

fn render_table(out: &mut String, rows: &[ReportRow], stratum_column: Option<&str>, with_ratings: bool) {
    let (rating_head, rating_rule) = rating_header();
    let lead = stratum_column.map_or(String::new(), |c| format!("{c} | "));
    let _ = writeln!(
        out,
        "| {lead}Method | n | Failed | B-1 | B-2 | B-3 | B-4 | Avg | D-1 | D-2{} |",
        if with_ratings { rating_head.as_str() } else { "" }
    );
    let _ = writeln!(
        out,
        "|{}---|---|---|---|---|---|---|---|---|---{}|",
        if stratum_column.is_some() { "---|" } else { "" },
        if with_ratings { rating_rule.as_str() } else { "" }
    );
    for row in rows {
        let lead = stratum_column.map_or(String::new(), |_| format!("{} | ", row.stratum));
        let ratings = if with_ratings {
            format!(" | {}", rating_cells(row))
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "| {lead}{} | {} | {} | {}{ratings} |",
            row.method,
            row.n_questions,
            row.n_failures,
            metric_cells(row)
        );
    }
}

/// Markdown with one table each for overall, risk and complexity results.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let with_ratings = report.overall.iter().any(|r| r.ratings.is_some());
    let mut out = String::new();
    out.push_str("# Experiment report\n\n");
    out.push_str("## Overall\n\n");
    render_table(&mut out, &report.overall, None, with_ratings);
    for (title, column, table) in [
        ("## By risk level", "Risk", &report.risk),
        ("## By question complexity", "Complexity", &report.complexity),
    ] {
        let _ = writeln!(out, "\n{title}\n");
        render_table(&mut out, &table.rows, Some(column), with_ratings);
        let skipped: Vec<String> = table
            .unannotated
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(m, n)| format!("{m}: {n}"))
            .collect();
        if !skipped.is_empty() {
            let _ = writeln!(out, "\nExcluded for missing annotation: {}.", skipped.join(", "));
        }
    }
    out.push_str("\n## Notes\n\n");
    out.push_str("- BLEU and Distinct values are percentages; Avg is the mean of B-1 to B-4.\n");
    out.push_str("- n counts questions; metrics cover the questions that did not fail.\n");
    out.push_str("- Complexity bins: Simple has at most 3 topics, Moderate 4 to 6, Complex 7 or more.\n");
    if with_ratings {
        out.push_str(
            "- Human ratings are averaged over annotators for each question, then over questions.\n",
        );
    }
    if !report.failures.is_empty() {
        out.push_str("\n## Failures\n\n");
        for f in &report.failures {
            let stage = serde_json::to_value(f.stage).expect("stage serializes");
            let _ = writeln!(
                out,
                "- {} / {} ({}): {}",
                f.question_id,
                f.method,
                stage.as_str().unwrap_or_default(),
                f.message.replace('\n', " ")
            );
        }
    }
    out
}
