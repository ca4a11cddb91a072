//! Annotated counseling corpus: data model, JSON Lines ingestion and the
//! two preprocessing passes (adjacent-strategy merging and sample filtering).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag carried by every corpus line.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Labels of the builtin strategy vocabulary, in canonical order.
pub const DEFAULT_STRATEGIES: [&str; 6] = [
    "Information",
    "Direct Guidance",
    "Approval And Reassurance",
    "Restatement",
    "Interpretation",
    "Self-disclosure",
];

/// Symbols reserved by the chain model's serialization.
const RESERVED_LABELS: [&str; 2] = ["<s>", "</s>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unsupported schema version {found} (expected {CORPUS_SCHEMA_VERSION})")]
    UnsupportedVersion { line: usize, found: u32 },
    #[error("line {line}: answer references unknown question id {question_id:?}")]
    DanglingQuestion { line: usize, question_id: String },
    #[error("line {line}: duplicate question id {id:?}")]
    DuplicateQuestion { line: usize, id: String },
    #[error("line {line}: question {id:?} has an empty title")]
    EmptyTitle { line: usize, id: String },
    #[error("line {line}: strategy {label:?} is not in the vocabulary")]
    UnknownStrategy { line: usize, label: String },
    #[error("invalid strategy label {0:?}")]
    InvalidLabel(String),
    #[error("malformed strategy chain {0:?}")]
    MalformedChain(String),
    #[error("vocabulary must contain at least one label")]
    EmptyVocabulary,
    #[error("duplicate vocabulary label {0:?}")]
    DuplicateLabel(String),
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("unknown risk level {0:?}")]
    UnknownRisk(String),
    #[error("corpus has no answers")]
    NoAnswers,
    #[error("corpus has no non-empty strategy chains")]
    NoChains,
    #[error("filtering removed every answer")]
    EmptyAfterFilter,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A counseling strategy label.
///
/// Labels are trimmed, non-empty, and may not contain square brackets or
/// line breaks, so that the bracketed chain form `[A][B]` is unambiguous.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Strategy(String);

impl Strategy {
    pub fn new(label: impl AsRef<str>) -> Result<Self, CorpusError> {
        let trimmed = label.as_ref().trim();
        let bad = trimmed.is_empty()
            || trimmed.contains(['[', ']', '\n', '\r'])
            || RESERVED_LABELS.contains(&trimmed);
        if bad {
            return Err(CorpusError::InvalidLabel(label.as_ref().to_string()));
        }
        Ok(Self(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Strategy {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Strategy::new(value)
    }
}

impl From<Strategy> for String {
    fn from(value: Strategy) -> Self {
        value.0
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    BuiltinDefault,
    CorpusDerived,
}

impl FromStr for VocabMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "builtin-default" | "builtin" => Ok(Self::BuiltinDefault),
            "corpus-derived" | "corpus" => Ok(Self::CorpusDerived),
            other => Err(format!("unknown vocabulary mode {other:?}")),
        }
    }
}

/// Ordered set of unique strategy labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyVocabulary {
    labels: Vec<Strategy>,
    source: VocabMode,
}

impl StrategyVocabulary {
    pub fn builtin_default() -> Self {
        let labels = DEFAULT_STRATEGIES
            .iter()
            .map(|l| Strategy::new(l).expect("builtin labels are valid"))
            .collect();
        Self {
            labels,
            source: VocabMode::BuiltinDefault,
        }
    }

    pub fn new(labels: Vec<Strategy>, source: VocabMode) -> Result<Self, CorpusError> {
        if labels.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label) {
                return Err(CorpusError::DuplicateLabel(label.0.clone()));
            }
        }
        Ok(Self { labels, source })
    }

    pub fn labels(&self) -> &[Strategy] {
        &self.labels
    }

    pub fn source(&self) -> VocabMode {
        self.source
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, strategy: &Strategy) -> bool {
        self.labels.contains(strategy)
    }

    pub fn index_of(&self, strategy: &Strategy) -> Option<usize> {
        self.labels.iter().position(|s| s == strategy)
    }

    fn push_if_absent(&mut self, strategy: &Strategy) {
        if !self.contains(strategy) {
            self.labels.push(strategy.clone());
        }
    }
}

/// Ordered sequence of strategies. Serialized in bracketed form, `[A][B]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StrategyChain(Vec<Strategy>);

impl StrategyChain {
    pub fn new(steps: Vec<Strategy>) -> Self {
        Self(steps)
    }

    /// Builds a chain from raw labels, validating each one.
    pub fn from_labels<I, S>(labels: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        labels
            .into_iter()
            .map(Strategy::new)
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn steps(&self) -> &[Strategy] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when no two adjacent steps are equal.
    pub fn is_merged(&self) -> bool {
        self.0.windows(2).all(|w| w[0] != w[1])
    }

    /// Parses the bracketed form. Whitespace between groups is allowed;
    /// anything else outside brackets is rejected. The empty string is the
    /// empty chain.
    pub fn parse_bracketed(text: &str) -> Result<Self, CorpusError> {
        let err = || CorpusError::MalformedChain(text.to_string());
        let mut steps = Vec::new();
        let mut rest = text.trim();
        while !rest.is_empty() {
            let inner = rest.strip_prefix('[').ok_or_else(err)?;
            let close = inner.find(']').ok_or_else(err)?;
            let label = &inner[..close];
            if label.contains('[') {
                return Err(err());
            }
            steps.push(Strategy::new(label).map_err(|_| err())?);
            rest = inner[close + 1..].trim_start();
        }
        Ok(Self(steps))
    }
}

impl fmt::Display for StrategyChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.0 {
            write!(f, "[{}]", step.0)?;
        }
        Ok(())
    }
}

impl FromStr for StrategyChain {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_bracketed(s)
    }
}

impl TryFrom<String> for StrategyChain {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse_bracketed(&value)
    }
}

impl From<StrategyChain> for String {
    fn from(value: StrategyChain) -> Self {
        value.to_string()
    }
}

/// Topic categories used to grade question complexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topic {
    Background,
    Cause,
    Empathy,
    Symptom,
    Experience,
    Cognition,
    Behavior,
    Support,
}

impl Topic {
    pub const ALL: [Topic; 8] = [
        Topic::Background,
        Topic::Cause,
        Topic::Empathy,
        Topic::Symptom,
        Topic::Experience,
        Topic::Cognition,
        Topic::Behavior,
        Topic::Support,
    ];
}

/// Risk triage level of a help-seeker post.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskLevel {
    Green,
    Amber,
    Red,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 3] = [RiskLevel::Green, RiskLevel::Amber, RiskLevel::Red];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Green => "Green",
            RiskLevel::Amber => "Amber",
            RiskLevel::Red => "Red",
        }
    }

    /// Triage semantics of the level.
    pub fn description(self) -> &'static str {
        match self {
            RiskLevel::Green => "no intervention needed; can be left to the community",
            RiskLevel::Amber => "expresses a mental health issue; a later response is acceptable",
            RiskLevel::Red => "needs an immediate response and intervention",
        }
    }
}

impl FromStr for RiskLevel {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Green" => Ok(Self::Green),
            "Amber" => Ok(Self::Amber),
            "Red" => Ok(Self::Red),
            other => Err(CorpusError::UnknownRisk(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionRecord {
    pub id: String,
    pub title: String,
    pub description: String,
    pub label: String,
    pub topics: Option<BTreeSet<Topic>>,
    pub risk: Option<RiskLevel>,
}

impl QuestionRecord {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            description: String::new(),
            label: String::new(),
            topics: None,
            risk: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub strategy: Strategy,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerRecord {
    pub question_id: String,
    pub segments: Vec<Segment>,
}

impl AnswerRecord {
    /// Concatenation of the segment texts, in order.
    pub fn full_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Questions, answers and the active vocabulary, with every answer's
/// `question_id` resolving to exactly one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    questions: Vec<QuestionRecord>,
    answers: Vec<AnswerRecord>,
    vocabulary: StrategyVocabulary,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        questions: Vec<QuestionRecord>,
        answers: Vec<AnswerRecord>,
        vocabulary: StrategyVocabulary,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if q.title.trim().is_empty() {
                return Err(CorpusError::EmptyTitle {
                    line: i + 1,
                    id: q.id.clone(),
                });
            }
            if index.insert(q.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateQuestion {
                    line: i + 1,
                    id: q.id.clone(),
                });
            }
        }
        for (i, a) in answers.iter().enumerate() {
            let line = questions.len() + i + 1;
            if !index.contains_key(&a.question_id) {
                return Err(CorpusError::DanglingQuestion {
                    line,
                    question_id: a.question_id.clone(),
                });
            }
            if let Some(seg) = a.segments.iter().find(|s| !vocabulary.contains(&s.strategy)) {
                return Err(CorpusError::UnknownStrategy {
                    line,
                    label: seg.strategy.0.clone(),
                });
            }
        }
        Ok(Self {
            questions,
            answers,
            vocabulary,
            index,
        })
    }

    pub fn questions(&self) -> &[QuestionRecord] {
        &self.questions
    }

    pub fn answers(&self) -> &[AnswerRecord] {
        &self.answers
    }

    pub fn vocabulary(&self) -> &StrategyVocabulary {
        &self.vocabulary
    }

    pub fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    /// Answers attached to the question with the given id, in corpus order.
    pub fn answers_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a AnswerRecord> + 'a {
        self.answers.iter().filter(move |a| a.question_id == id)
    }

    /// Merged strategy chain of every answer, in corpus order.
    pub fn merged_chains(&self) -> impl Iterator<Item = StrategyChain> + '_ {
        self.answers.iter().map(|a| merge_adjacent(&extract_chain(a)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum CorpusLine {
    Question(QuestionLine),
    Answer(AnswerLine),
}

#[derive(Serialize, Deserialize)]
struct QuestionLine {
    v: u32,
    id: String,
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topics: Option<BTreeSet<Topic>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    risk: Option<RiskLevel>,
}

#[derive(Serialize, Deserialize)]
struct AnswerLine {
    v: u32,
    question_id: String,
    segments: Vec<RawSegment>,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    strategy: String,
    text: String,
}

/// Reads a corpus from JSON Lines. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: BufRead>(input: R, vocab_mode: VocabMode) -> Result<Corpus, CorpusError> {
    let mut vocabulary = match vocab_mode {
        VocabMode::BuiltinDefault => StrategyVocabulary::builtin_default(),
        VocabMode::CorpusDerived => StrategyVocabulary {
            labels: Vec::new(),
            source: VocabMode::CorpusDerived,
        },
    };
    let mut questions = Vec::new();
    let mut question_lines: HashMap<String, usize> = HashMap::new();
    let mut answers = Vec::new();
    let mut answer_lines = Vec::new();

    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        match record {
            CorpusLine::Question(q) => {
                check_version(line_no, q.v)?;
                if q.title.trim().is_empty() {
                    return Err(CorpusError::EmptyTitle { line: line_no, id: q.id });
                }
                if question_lines.insert(q.id.clone(), line_no).is_some() {
                    return Err(CorpusError::DuplicateQuestion { line: line_no, id: q.id });
                }
                questions.push(QuestionRecord {
                    id: q.id,
                    title: q.title,
                    description: q.description,
                    label: q.label,
                    topics: q.topics,
                    risk: q.risk,
                });
            }
            CorpusLine::Answer(a) => {
                check_version(line_no, a.v)?;
                let mut segments = Vec::with_capacity(a.segments.len());
                for raw in a.segments {
                    let strategy = Strategy::new(&raw.strategy).map_err(|_| CorpusError::Malformed {
                        line: line_no,
                        message: format!("invalid strategy label {:?}", raw.strategy),
                    })?;
                    match vocab_mode {
                        VocabMode::BuiltinDefault if !vocabulary.contains(&strategy) => {
                            return Err(CorpusError::UnknownStrategy {
                                line: line_no,
                                label: raw.strategy,
                            });
                        }
                        VocabMode::CorpusDerived => vocabulary.push_if_absent(&strategy),
                        _ => {}
                    }
                    segments.push(Segment {
                        strategy,
                        text: raw.text,
                    });
                }
                answers.push(AnswerRecord {
                    question_id: a.question_id,
                    segments,
                });
                answer_lines.push(line_no);
            }
        }
    }

    for (answer, &line) in answers.iter().zip(&answer_lines) {
        if !question_lines.contains_key(&answer.question_id) {
            return Err(CorpusError::DanglingQuestion {
                line,
                question_id: answer.question_id.clone(),
            });
        }
    }
    if vocabulary.is_empty() {
        // A corpus-derived vocabulary over a corpus without segments.
        return Err(CorpusError::EmptyVocabulary);
    }
    Corpus::new(questions, answers, vocabulary)
}

#[derive(Deserialize)]
struct StandaloneQuestion {
    #[serde(default = "current_version")]
    v: u32,
    #[serde(default)]
    kind: Option<String>,
    #[serde(flatten)]
    rest: QuestionFields,
}

#[derive(Deserialize)]
struct QuestionFields {
    id: String,
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    topics: Option<BTreeSet<Topic>>,
    #[serde(default)]
    risk: Option<RiskLevel>,
}

fn current_version() -> u32 {
    CORPUS_SCHEMA_VERSION
}

/// Reads one question given as a JSON object in the corpus question layout;
/// `v` and `kind` may be omitted.
pub fn parse_question(text: &str) -> Result<QuestionRecord, CorpusError> {
    let q: StandaloneQuestion = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    check_version(1, q.v)?;
    if let Some(kind) = q.kind.filter(|k| k != "question") {
        return Err(CorpusError::Malformed {
            line: 1,
            message: format!("expected a question, found kind {kind:?}"),
        });
    }
    let f = q.rest;
    if f.title.trim().is_empty() {
        return Err(CorpusError::EmptyTitle { line: 1, id: f.id });
    }
    Ok(QuestionRecord {
        id: f.id,
        title: f.title,
        description: f.description,
        label: f.label,
        topics: f.topics,
        risk: f.risk,
    })
}

fn check_version(line: usize, found: u32) -> Result<(), CorpusError> {
    if found == CORPUS_SCHEMA_VERSION {
        Ok(())
    } else {
        Err(CorpusError::UnsupportedVersion { line, found })
    }
}

/// Writes questions first, then answers, one JSON object per line.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), CorpusError> {
    for q in &corpus.questions {
        let line = CorpusLine::Question(QuestionLine {
            v: CORPUS_SCHEMA_VERSION,
            id: q.id.clone(),
            title: q.title.clone(),
            description: q.description.clone(),
            label: q.label.clone(),
            topics: q.topics.clone(),
            risk: q.risk,
        });
        writeln!(out, "{}", serde_json::to_string(&line).expect("corpus lines serialize"))?;
    }
    for a in &corpus.answers {
        let line = CorpusLine::Answer(AnswerLine {
            v: CORPUS_SCHEMA_VERSION,
            question_id: a.question_id.clone(),
            segments: a
                .segments
                .iter()
                .map(|s| RawSegment {
                    strategy: s.strategy.0.clone(),
                    text: s.text.clone(),
                })
                .collect(),
        });
        writeln!(out, "{}", serde_json::to_string(&line).expect("corpus lines serialize"))?;
    }
    Ok(())
}

/// Strategy sequence of an answer, in segment order, without merging.
pub fn extract_chain(answer: &AnswerRecord) -> StrategyChain {
    StrategyChain(answer.segments.iter().map(|s| s.strategy.clone()).collect())
}

/// Collapses each run of identical adjacent strategies to a single step.
pub fn merge_adjacent(chain: &StrategyChain) -> StrategyChain {
    let mut steps: Vec<Strategy> = Vec::with_capacity(chain.len());
    for step in &chain.0 {
        if steps.last() != Some(step) {
            steps.push(step.clone());
        }
    }
    StrategyChain(steps)
}

/// Counts of merged-chain lengths over a corpus. Empty chains are tracked
/// separately and are not part of the frequency denominator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LengthHistogram {
    counts: BTreeMap<usize, usize>,
    empty: usize,
}

impl LengthHistogram {
    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    pub fn empty_chains(&self) -> usize {
        self.empty
    }

    pub fn total_nonempty(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn frequency(&self, length: usize) -> f64 {
        let total = self.total_nonempty();
        if total == 0 {
            return 0.0;
        }
        self.counts.get(&length).copied().unwrap_or(0) as f64 / total as f64
    }

    pub fn frequencies(&self) -> BTreeMap<usize, f64> {
        self.counts.keys().map(|&l| (l, self.frequency(l))).collect()
    }
}

pub fn chain_length_histogram(corpus: &Corpus) -> Result<LengthHistogram, CorpusError> {
    if corpus.answers.is_empty() {
        return Err(CorpusError::NoAnswers);
    }
    let mut counts = BTreeMap::new();
    let mut empty = 0;
    for chain in corpus.merged_chains() {
        if chain.is_empty() {
            empty += 1;
        } else {
            *counts.entry(chain.len()).or_insert(0) += 1;
        }
    }
    Ok(LengthHistogram { counts, empty })
}

/// What the minimum-frequency threshold is measured over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyBasis {
    /// Share of non-empty merged chains having the same length.
    #[default]
    Length,
    /// Share of non-empty merged chains equal to the same chain.
    Pattern,
}

impl FromStr for FrequencyBasis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "length" => Ok(Self::Length),
            "pattern" => Ok(Self::Pattern),
            other => Err(format!("unknown frequency basis {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_freq: f64,
    pub max_len: usize,
    pub basis: FrequencyBasis,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_freq: 0.05,
            max_len: 8,
            basis: FrequencyBasis::Length,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterSummary {
    pub input_answers: usize,
    pub kept_answers: usize,
    pub removed_empty: usize,
    pub removed_too_long: usize,
    pub removed_rare: usize,
    pub dropped_questions: usize,
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub corpus: Corpus,
    pub summary: FilterSummary,
}

/// Keeps the answers whose merged chain is non-empty, no longer than
/// `max_len`, and whose length (or pattern) frequency on the input corpus is
/// at least `min_freq`. Questions left without answers are dropped.
pub fn filter_samples(corpus: &Corpus, config: &FilterConfig) -> Result<Filtered, CorpusError> {
    let histogram = chain_length_histogram(corpus)?;
    let chains: Vec<StrategyChain> = corpus.merged_chains().collect();

    let mut pattern_counts: HashMap<&StrategyChain, usize> = HashMap::new();
    if config.basis == FrequencyBasis::Pattern {
        for chain in chains.iter().filter(|c| !c.is_empty()) {
            *pattern_counts.entry(chain).or_insert(0) += 1;
        }
    }
    let total = histogram.total_nonempty() as f64;

    let mut summary = FilterSummary {
        input_answers: corpus.answers.len(),
        ..Default::default()
    };
    let mut answers = Vec::new();
    for (answer, chain) in corpus.answers.iter().zip(&chains) {
        if chain.is_empty() {
            summary.removed_empty += 1;
            continue;
        }
        if chain.len() > config.max_len {
            summary.removed_too_long += 1;
            continue;
        }
        let freq = match config.basis {
            FrequencyBasis::Length => histogram.frequency(chain.len()),
            FrequencyBasis::Pattern => pattern_counts[chain] as f64 / total,
        };
        if freq < config.min_freq {
            summary.removed_rare += 1;
            continue;
        }
        answers.push(answer.clone());
    }
    if answers.is_empty() {
        return Err(CorpusError::EmptyAfterFilter);
    }
    summary.kept_answers = answers.len();

    let answered: BTreeSet<&str> = answers.iter().map(|a| a.question_id.as_str()).collect();
    let questions: Vec<QuestionRecord> = corpus
        .questions
        .iter()
        .filter(|q| answered.contains(q.id.as_str()))
        .cloned()
        .collect();
    summary.dropped_questions = corpus.questions.len() - questions.len();

    let corpus = Corpus::new(questions, answers, corpus.vocabulary.clone())?;
    Ok(Filtered { corpus, summary })
}

/// The most common non-empty merged chain. Ties go to the lexicographically
/// smallest label sequence.
pub fn most_frequent_chain(corpus: &Corpus) -> Result<StrategyChain, CorpusError> {
    let mut counts: HashMap<StrategyChain, usize> = HashMap::new();
    for chain in corpus.merged_chains().filter(|c| !c.is_empty()) {
        *counts.entry(chain).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then_with(|| cb.cmp(ca)))
        .map(|(chain, _)| chain)
        .ok_or(CorpusError::NoChains)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standalone_question() {
        let q = parse_question(r#"{"id":"q1","title":"Can't sleep","label":"growth","risk":"Amber"}"#).unwrap();
        assert_eq!(q.id, "q1");
        assert_eq!(q.risk, Some(RiskLevel::Amber));
        assert!(parse_question(r#"{"v":1,"kind":"question","id":"q","title":"t"}"#).is_ok());
        assert!(parse_question(r#"{"v":2,"id":"q","title":"t"}"#).is_err());
        assert!(parse_question(r#"{"kind":"answer","id":"q","title":"t"}"#).is_err());
        assert!(parse_question(r#"{"id":"q","title":"  "}"#).is_err());
    }

    fn chain(labels: &[&str]) -> StrategyChain {
        StrategyChain::from_labels(labels).unwrap()
    }

    fn answer(qid: &str, labels: &[&str]) -> AnswerRecord {
        AnswerRecord {
            question_id: qid.into(),
            segments: labels
                .iter()
                .enumerate()
                .map(|(i, l)| Segment {
                    strategy: Strategy::new(l).unwrap(),
                    text: format!("s{i}."),
                })
                .collect(),
        }
    }

    fn corpus_of(chains: &[&[&str]]) -> Corpus {
        let questions = (0..chains.len())
            .map(|i| QuestionRecord::new(format!("q{i}"), format!("title {i}")))
            .collect();
        let answers = chains
            .iter()
            .enumerate()
            .map(|(i, c)| answer(&format!("q{i}"), c))
            .collect();
        let vocab = StrategyVocabulary::new(
            ["A", "B", "C", "D"].iter().map(|l| Strategy::new(l).unwrap()).collect(),
            VocabMode::CorpusDerived,
        )
        .unwrap();
        Corpus::new(questions, answers, vocab).unwrap()
    }

    #[test]
    fn minimal_corpus_parses() {
        let text = r#"{"v":1,"kind":"question","id":"q1","title":"t","description":"d","label":"growth"}
{"v":1,"kind":"answer","question_id":"q1","segments":[{"strategy":"Information","text":"t1"}]}
"#;
        let corpus = parse_corpus(text.as_bytes(), VocabMode::BuiltinDefault).unwrap();
        assert_eq!(corpus.questions().len(), 1);
        assert_eq!(corpus.answers().len(), 1);
        assert_eq!(extract_chain(&corpus.answers()[0]), chain(&["Information"]));
        assert_eq!(corpus.answers()[0].full_text(), "t1");
    }

    #[test]
    fn dangling_reference_names_the_id() {
        let text = r#"{"v":1,"kind":"question","id":"q1","title":"t"}
{"v":1,"kind":"answer","question_id":"q9","segments":[]}
"#;
        let err = parse_corpus(text.as_bytes(), VocabMode::BuiltinDefault).unwrap_err();
        assert!(matches!(&err, CorpusError::DanglingQuestion { question_id, line: 2 } if question_id == "q9"));
        assert!(err.to_string().contains("q9"));
    }

    #[test]
    fn parse_errors_are_typed() {
        let dup = "{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"t\"}\n{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"u\"}\n";
        assert!(matches!(
            parse_corpus(dup.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::DuplicateQuestion { line: 2, .. })
        ));
        let bad = "{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"t\"}\nnot json\n";
        assert!(matches!(
            parse_corpus(bad.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::Malformed { line: 2, .. })
        ));
        let unknown = "{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"t\"}\n{\"v\":1,\"kind\":\"answer\",\"question_id\":\"a\",\"segments\":[{\"strategy\":\"Humor\",\"text\":\"x\"}]}\n";
        assert!(matches!(
            parse_corpus(unknown.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::UnknownStrategy { line: 2, .. })
        ));
        let derived = parse_corpus(unknown.as_bytes(), VocabMode::CorpusDerived).unwrap();
        assert_eq!(derived.vocabulary().labels(), &[Strategy::new("Humor").unwrap()]);
        let v2 = "{\"v\":2,\"kind\":\"question\",\"id\":\"a\",\"title\":\"t\"}\n";
        assert!(matches!(
            parse_corpus(v2.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::UnsupportedVersion { found: 2, .. })
        ));
        let topic = "{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"t\",\"topics\":[\"weather\"]}\n";
        assert!(matches!(
            parse_corpus(topic.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
        let empty_title = "{\"v\":1,\"kind\":\"question\",\"id\":\"a\",\"title\":\"  \"}\n";
        assert!(matches!(
            parse_corpus(empty_title.as_bytes(), VocabMode::BuiltinDefault),
            Err(CorpusError::EmptyTitle { .. })
        ));
    }

    #[test]
    fn labels_are_trimmed_and_validated() {
        assert_eq!(Strategy::new("  Information ").unwrap().as_str(), "Information");
        assert!(Strategy::new("").is_err());
        assert!(Strategy::new("a]b").is_err());
        assert!(Strategy::new("<s>").is_err());
    }

    #[test]
    fn bracketed_form_parses() {
        let c = StrategyChain::parse_bracketed("[Self-disclosure][Interpretation] [Direct Guidance]").unwrap();
        assert_eq!(c, chain(&["Self-disclosure", "Interpretation", "Direct Guidance"]));
        assert_eq!(c.to_string(), "[Self-disclosure][Interpretation][Direct Guidance]");
        assert!(StrategyChain::parse_bracketed("").unwrap().is_empty());
        for bad in ["[A", "A]", "[A] x", "[[A]]", "[]", "[A][ ]"] {
            assert!(StrategyChain::parse_bracketed(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn extract_chain_projects_segments() {
        let a = answer("q", &["Information", "Interpretation", "Interpretation"]);
        assert_eq!(extract_chain(&a), chain(&["Information", "Interpretation", "Interpretation"]));
        assert!(extract_chain(&answer("q", &[])).is_empty());
    }

    #[test]
    fn merge_collapses_runs() {
        let c = StrategyChain::parse_bracketed(
            "[Information][Interpretation] [Interpretation][Interpretation][Interpretation][Information]",
        )
        .unwrap();
        assert_eq!(
            merge_adjacent(&c).to_string(),
            "[Information][Interpretation][Information]"
        );
        assert!(merge_adjacent(&StrategyChain::default()).is_empty());
    }

    #[test]
    fn histogram_over_merged_lengths() {
        let corpus = corpus_of(&[&["A"], &["A", "B"], &["A", "A", "B"]]);
        let h = chain_length_histogram(&corpus).unwrap();
        let f = h.frequencies();
        assert_eq!(f.len(), 2);
        assert!((f[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((f[&2] - 2.0 / 3.0).abs() < 1e-12);

        let uniform: Vec<Vec<&str>> = (1..=8)
            .map(|n| ["A", "B"].iter().cycle().take(n).copied().collect())
            .collect();
        let refs: Vec<&[&str]> = uniform.iter().map(|v| v.as_slice()).collect();
        let h = chain_length_histogram(&corpus_of(&refs)).unwrap();
        for n in 1..=8 {
            assert!((h.frequency(n) - 0.125).abs() < 1e-12);
        }
        let total: f64 = h.frequencies().values().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_counts_empty_separately() {
        let corpus = corpus_of(&[&["A", "B", "C", "D"], &[], &["D", "C", "B", "A"]]);
        let h = chain_length_histogram(&corpus).unwrap();
        assert_eq!(h.empty_chains(), 1);
        assert_eq!(h.frequencies(), BTreeMap::from([(4, 1.0)]));
    }

    #[test]
    fn histogram_requires_answers() {
        let corpus = Corpus::new(
            vec![QuestionRecord::new("q", "t")],
            vec![],
            StrategyVocabulary::builtin_default(),
        )
        .unwrap();
        assert!(matches!(chain_length_histogram(&corpus), Err(CorpusError::NoAnswers)));
    }

    #[test]
    fn filter_keeps_uniform_corpus() {
        let corpus = corpus_of(&[&["A", "B", "C"], &["B", "C", "D"], &["C", "C", "A", "B"]]);
        let out = filter_samples(&corpus, &FilterConfig::default()).unwrap();
        assert_eq!(out.corpus, corpus);
        assert_eq!(out.summary.kept_answers, 3);
    }

    #[test]
    fn filter_removes_everything_is_an_error() {
        let corpus = corpus_of(&[&["A", "B", "A", "B", "A", "B", "A", "B", "A"]]);
        assert!(matches!(
            filter_samples(&corpus, &FilterConfig::default()),
            Err(CorpusError::EmptyAfterFilter)
        ));
    }

    #[test]
    fn pattern_basis_filters_rare_patterns() {
        let mut chains: Vec<&[&str]> = vec![&["A", "B"]; 19];
        chains.push(&["B", "A"]);
        let corpus = corpus_of(&chains);
        let by_length = filter_samples(&corpus, &FilterConfig::default()).unwrap();
        assert_eq!(by_length.summary.kept_answers, 20);
        let config = FilterConfig {
            min_freq: 0.06,
            basis: FrequencyBasis::Pattern,
            ..Default::default()
        };
        let by_pattern = filter_samples(&corpus, &config).unwrap();
        assert_eq!(by_pattern.summary.kept_answers, 19);
        assert_eq!(by_pattern.summary.removed_rare, 1);
        assert_eq!(by_pattern.summary.dropped_questions, 1);
    }

    #[test]
    fn most_frequent_chain_majority_and_tie() {
        let corpus = corpus_of(&[&["A", "B"], &["A", "B"], &["A", "B"], &["A"], &["A"]]);
        assert_eq!(most_frequent_chain(&corpus).unwrap(), chain(&["A", "B"]));
        let corpus = corpus_of(&[&["B"], &["A"], &["B"], &["A"]]);
        assert_eq!(most_frequent_chain(&corpus).unwrap(), chain(&["A"]));
        let corpus = corpus_of(&[&[]]);
        assert!(matches!(most_frequent_chain(&corpus), Err(CorpusError::NoChains)));
    }

    #[test]
    fn most_frequent_counts_merged_chains() {
        let corpus = corpus_of(&[&["A", "A", "B"], &["A", "B", "B"], &["C"]]);
        assert_eq!(most_frequent_chain(&corpus).unwrap(), chain(&["A", "B"]));
    }

    #[test]
    fn chain_serde_uses_bracketed_form() {
        let c = chain(&["A", "B"]);
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"[A][B]\"");
        let back: StrategyChain = serde_json::from_str("\"[A] [B]\"").unwrap();
        assert_eq!(back, c);
    }
}
