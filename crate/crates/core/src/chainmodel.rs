//! Question-conditioned strategy-chain generator.
//!
//! The reference generator is an order-`m` Markov model over strategy
//! labels plus a chain terminator, conditioned on the question's label
//! field, with additive smoothing. Its counts are the closed-form
//! maximum-likelihood solution of the next-strategy cross-entropy
//! objective; anything implementing [`ChainGenerator`] can replace it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    Corpus, CorpusError, QuestionRecord, Strategy, StrategyChain, StrategyVocabulary, VocabMode,
};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const START_TOKEN: &str = "<s>";
const END_TOKEN: &str = "</s>";

/// Safety valve for best-first enumeration over very large chain spaces.
const MAX_SEARCH_POPS: usize = 2_000_000;

pub const QUESTION_MARKER: &str = "[QUESTION]";
pub const DESCRIPTION_MARKER: &str = "[DESCRIPTION]";
pub const LABEL_MARKER: &str = "[LABEL]";
pub const CHAIN_MARKER: &str = "[STRATEGY-CHAIN]";
pub const EOS_MARKER: &str = "[EOS]";
const MARKERS: [&str; 5] = [QUESTION_MARKER, DESCRIPTION_MARKER, LABEL_MARKER, CHAIN_MARKER, EOS_MARKER];

#[derive(Debug, Error)]
pub enum ChainModelError {
    #[error("strategy chain {0} has adjacent duplicate strategies")]
    Unmerged(String),
    #[error("strategy chain is empty")]
    EmptyChain,
    #[error("text field contains the reserved marker {0}")]
    MarkerInText(&'static str),
    #[error("malformed training sequence: {0}")]
    MalformedSequence(String),
    #[error("training corpus has no non-empty chains")]
    EmptyCorpus,
    #[error("held-out set has no non-empty chains")]
    EmptyHeldout,
    #[error("Markov order must be at least 1")]
    InvalidOrder,
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("k unreachable: only {available} distinct chains of length <= {max_len} exist, {k} requested")]
    KUnreachable { k: usize, available: usize, max_len: usize },
    #[error("strategy {0:?} is not in the model vocabulary")]
    UnknownStrategy(String),
    #[error("chain enumeration exceeded its search budget")]
    SearchExhausted,
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One training example rendered as the generator's token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub title: String,
    pub description: String,
    pub label: String,
    pub chain: StrategyChain,
}

impl TrainingSequence {
    /// `[QUESTION] Q [DESCRIPTION] D [LABEL] L [STRATEGY-CHAIN] [s1] [s2] ... [EOS]`
    pub fn encode(&self) -> Result<String, ChainModelError> {
        if self.chain.is_empty() {
            return Err(ChainModelError::EmptyChain);
        }
        if !self.chain.is_merged() {
            return Err(ChainModelError::Unmerged(self.chain.to_string()));
        }
        for field in [&self.title, &self.description, &self.label] {
            if let Some(marker) = MARKERS.iter().find(|m| field.contains(*m)) {
                return Err(ChainModelError::MarkerInText(marker));
            }
        }
        let steps: Vec<String> = self.chain.steps().iter().map(|s| format!("[{s}]")).collect();
        Ok(format!(
            "{QUESTION_MARKER} {} {DESCRIPTION_MARKER} {} {LABEL_MARKER} {} {CHAIN_MARKER} {} {EOS_MARKER}",
            self.title,
            self.description,
            self.label,
            steps.join(" ")
        ))
    }

    pub fn decode(stream: &str) -> Result<Self, ChainModelError> {
        let bad = |why: &str| ChainModelError::MalformedSequence(why.to_string());
        let rest = stream
            .strip_prefix(QUESTION_MARKER)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| bad("missing [QUESTION] prefix"))?;
        let (title, rest) = split_marker(rest, DESCRIPTION_MARKER).ok_or_else(|| bad("missing [DESCRIPTION]"))?;
        let (description, rest) = split_marker(rest, LABEL_MARKER).ok_or_else(|| bad("missing [LABEL]"))?;
        let (label, rest) = split_marker(rest, CHAIN_MARKER).ok_or_else(|| bad("missing [STRATEGY-CHAIN]"))?;
        let chain_text = rest
            .strip_suffix(EOS_MARKER)
            .and_then(|r| r.strip_suffix(' '))
            .ok_or_else(|| bad("missing [EOS] suffix"))?;
        let chain = StrategyChain::parse_bracketed(chain_text)?;
        let seq = Self {
            title: title.to_string(),
            description: description.to_string(),
            label: label.to_string(),
            chain,
        };
        // Re-encoding validates marker placement, merging and non-emptiness.
        if seq.encode()? != stream {
            return Err(bad("non-canonical layout"));
        }
        Ok(seq)
    }
}

fn split_marker<'a>(text: &'a str, marker: &str) -> Option<(&'a str, &'a str)> {
    let needle = format!(" {marker} ");
    let at = text.find(&needle)?;
    Some((&text[..at], &text[at + needle.len()..]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    #[default]
    LabelOnly,
    None,
}

impl FromStr for ConditioningMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label-only" | "label" => Ok(Self::LabelOnly),
            "none" => Ok(Self::None),
            other => Err(format!("unknown conditioning mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub order: usize,
    pub lambda: f64,
    pub conditioning: ConditioningMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            order: 2,
            lambda: 0.1,
            conditioning: ConditioningMode::LabelOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            temperature: 1.0,
            max_len: 8,
            max_attempts: 64,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ChainModelError> {
        let invalid = |m: &str| Err(ChainModelError::InvalidConfig(m.to_string()));
        if self.k < 1 {
            return invalid("k must be at least 1");
        }
        if self.max_len < 1 {
            return invalid("max_len must be at least 1");
        }
        if self.max_attempts < self.k {
            return invalid("max_attempts must be at least k");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid("temperature must be positive and finite");
        }
        Ok(())
    }
}

/// Anything able to propose strategy chains for a question.
pub trait ChainGenerator: Send + Sync {
    /// `k` pairwise-distinct merged chains, deterministic in `config.seed`.
    fn generate_chains(
        &self,
        question: &QuestionRecord,
        config: &GenerationConfig,
    ) -> Result<Vec<StrategyChain>, ChainModelError>;

    /// The single most probable chain of length at most `max_len`.
    fn top_chain(&self, question: &QuestionRecord, max_len: usize) -> Result<StrategyChain, ChainModelError>;

    /// Mean bits per predicted symbol (terminator included) on held-out chains.
    fn cross_entropy(&self, heldout: &Corpus) -> Result<f64, ChainModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Symbol {
    Start,
    Step(usize),
    End,
}

type NextCounts = BTreeMap<Symbol, u64>;

/// Conditioned additive-smoothed Markov model over strategy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    order: usize,
    lambda: f64,
    conditioning: ConditioningMode,
    vocab: StrategyVocabulary,
    counts: BTreeMap<String, BTreeMap<Vec<Symbol>, NextCounts>>,
}

impl ChainModel {
    /// A model with no observations: every context is uniform.
    pub fn uniform(
        vocab: StrategyVocabulary,
        config: &TrainConfig,
    ) -> Result<Self, ChainModelError> {
        check_hyper(config)?;
        Ok(Self {
            order: config.order,
            lambda: config.lambda,
            conditioning: config.conditioning,
            vocab,
            counts: BTreeMap::new(),
        })
    }

    pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<Self, ChainModelError> {
        let mut model = Self::uniform(corpus.vocabulary().clone(), config)?;
        let mut observed = 0usize;
        for answer in corpus.answers() {
            let chain = crate::corpus::merge_adjacent(&crate::corpus::extract_chain(answer));
            if chain.is_empty() {
                continue;
            }
            let question = corpus
                .question(&answer.question_id)
                .expect("corpus answers resolve");
            let key = model.condition_key(question);
            let symbols = model.symbols_of(&chain)?;
            let table = model.counts.entry(key).or_default();
            let mut history = vec![Symbol::Start; model.order];
            for next in symbols.into_iter().chain(std::iter::once(Symbol::End)) {
                *table.entry(history.clone()).or_default().entry(next).or_insert(0) += 1;
                history.remove(0);
                history.push(next);
            }
            observed += 1;
        }
        if observed == 0 {
            return Err(ChainModelError::EmptyCorpus);
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn conditioning(&self) -> ConditioningMode {
        self.conditioning
    }

    pub fn vocabulary(&self) -> &StrategyVocabulary {
        &self.vocab
    }

    /// Size of the next-symbol alphabet: strategies plus the terminator.
    pub fn alphabet_size(&self) -> usize {
        self.vocab.len() + 1
    }

    fn condition_key(&self, question: &QuestionRecord) -> String {
        match self.conditioning {
            ConditioningMode::LabelOnly => question.label.clone(),
            ConditioningMode::None => String::new(),
        }
    }

    fn symbols_of(&self, chain: &StrategyChain) -> Result<Vec<Symbol>, ChainModelError> {
        chain
            .steps()
            .iter()
            .map(|s| {
                self.vocab
                    .index_of(s)
                    .map(Symbol::Step)
                    .ok_or_else(|| ChainModelError::UnknownStrategy(s.as_str().to_string()))
            })
            .collect()
    }

    fn index_of_symbol(&self, symbol: Symbol) -> usize {
        match symbol {
            Symbol::Step(i) => i,
            Symbol::End => self.vocab.len(),
            Symbol::Start => unreachable!("start is never predicted"),
        }
    }

    fn symbol_at(&self, index: usize) -> Symbol {
        if index == self.vocab.len() {
            Symbol::End
        } else {
            Symbol::Step(index)
        }
    }

    /// Smoothed next-symbol distribution; index `vocab.len()` is the terminator.
    fn distribution(&self, key: &str, history: &[Symbol]) -> Vec<f64> {
        let v = self.alphabet_size();
        let observed = self.counts.get(key).and_then(|t| t.get(history));
        let total: u64 = observed.map(|c| c.values().sum()).unwrap_or(0);
        let denom = total as f64 + self.lambda * v as f64;
        let mut probs = vec![self.lambda / denom; v];
        if let Some(counts) = observed {
            for (&sym, &c) in counts {
                probs[self.index_of_symbol(sym)] = (c as f64 + self.lambda) / denom;
            }
        }
        probs
    }

    /// Probability of `next` given the conditioning label and the chain so far.
    pub fn probability(&self, label: &str, prefix: &StrategyChain, next: Option<&Strategy>) -> Result<f64, ChainModelError> {
        let key = match self.conditioning {
            ConditioningMode::LabelOnly => label,
            ConditioningMode::None => "",
        };
        let history = self.history_of(&self.symbols_of(prefix)?);
        let index = match next {
            Some(s) => self
                .vocab
                .index_of(s)
                .ok_or_else(|| ChainModelError::UnknownStrategy(s.as_str().to_string()))?,
            None => self.vocab.len(),
        };
        Ok(self.distribution(key, &history)[index])
    }

    fn history_of(&self, prefix: &[Symbol]) -> Vec<Symbol> {
        let mut history = vec![Symbol::Start; self.order];
        history.extend_from_slice(prefix);
        history.split_off(history.len() - self.order)
    }

    /// Sum of the smoothed distribution of every stored context. Each entry
    /// should be 1 up to rounding.
    pub fn normalization_sweep(&self) -> Vec<f64> {
        self.counts
            .iter()
            .flat_map(|(key, table)| {
                table
                    .keys()
                    .map(move |history| self.distribution(key, history).iter().sum())
            })
            .collect()
    }

    /// Number of stored (conditioning key, context) pairs.
    pub fn context_count(&self) -> usize {
        self.counts.values().map(|t| t.len()).sum()
    }

    /// Recorded count of the transition `context -> next`, where context is
    /// given as labels (`None` meaning the start symbol) and `next = None`
    /// meaning the terminator.
    pub fn transition_count(&self, key: &str, context: &[Option<&str>], next: Option<&str>) -> u64 {
        let lookup = |label: &str| self.vocab.index_of(&Strategy::new(label).ok()?).map(Symbol::Step);
        let history: Option<Vec<Symbol>> = context
            .iter()
            .map(|c| match c {
                None => Some(Symbol::Start),
                Some(l) => lookup(l),
            })
            .collect();
        let next = match next {
            None => Some(Symbol::End),
            Some(l) => lookup(l),
        };
        match (history, next) {
            (Some(h), Some(n)) => self
                .counts
                .get(key)
                .and_then(|t| t.get(&h))
                .and_then(|c| c.get(&n))
                .copied()
                .unwrap_or(0),
            _ => 0,
        }
    }

    /// Total number of recorded transitions.
    pub fn total_transitions(&self) -> u64 {
        self.counts
            .values()
            .flat_map(|t| t.values())
            .flat_map(|c| c.values())
            .sum()
    }

    /// Mean bits per predicted symbol over the given (label, chain) pairs.
    pub fn cross_entropy_of<'a, I>(&self, items: I) -> Result<f64, ChainModelError>
    where
        I: IntoIterator<Item = (&'a str, &'a StrategyChain)>,
    {
        let mut bits = 0.0;
        let mut n = 0usize;
        for (label, chain) in items {
            let chain = crate::corpus::merge_adjacent(chain);
            if chain.is_empty() {
                continue;
            }
            let key = match self.conditioning {
                ConditioningMode::LabelOnly => label,
                ConditioningMode::None => "",
            };
            let symbols = self.symbols_of(&chain)?;
            let mut history = vec![Symbol::Start; self.order];
            for next in symbols.into_iter().chain(std::iter::once(Symbol::End)) {
                let p = self.distribution(key, &history)[self.index_of_symbol(next)];
                bits -= p.log2();
                n += 1;
                history.remove(0);
                history.push(next);
            }
        }
        if n == 0 {
            return Err(ChainModelError::EmptyHeldout);
        }
        Ok(bits / n as f64)
    }

    /// Generation distribution at a given position: the smoothed model with
    /// the previous strategy masked (chains stay merged), the terminator
    /// masked at position 0 (chains are non-empty) and every strategy masked
    /// at position `max_len`. Returned values are renormalized log-probs;
    /// masked entries are `-inf`.
    fn step_log_probs(&self, key: &str, prefix: &[Symbol], max_len: usize) -> Vec<f64> {
        let mut probs = self.distribution(key, &self.history_of(prefix));
        let end = self.vocab.len();
        if prefix.is_empty() {
            probs[end] = 0.0;
        }
        if let Some(&Symbol::Step(prev)) = prefix.last() {
            probs[prev] = 0.0;
        }
        if prefix.len() >= max_len {
            for p in &mut probs[..end] {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        probs
            .into_iter()
            .map(|p| if p > 0.0 { (p / total).ln() } else { f64::NEG_INFINITY })
            .collect()
    }

    fn sample_chain(&self, key: &str, config: &GenerationConfig, rng: &mut ChaCha8Rng) -> Vec<Symbol> {
        let mut prefix = Vec::new();
        loop {
            let logp = self.step_log_probs(key, &prefix, config.max_len);
            let peak = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logp
                .iter()
                .map(|&lp| if lp.is_finite() { ((lp - peak) / config.temperature).exp() } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen::<f64>() * total;
            let mut chosen = weights.iter().rposition(|&w| w > 0.0).expect("some symbol allowed");
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && draw < w {
                    chosen = i;
                    break;
                }
                draw -= w;
            }
            match self.symbol_at(chosen) {
                Symbol::End => return prefix,
                sym => prefix.push(sym),
            }
        }
    }

    fn chain_of(&self, symbols: &[Symbol]) -> StrategyChain {
        StrategyChain::new(
            symbols
                .iter()
                .map(|&s| self.vocab.labels()[self.index_of_symbol(s)].clone())
                .collect(),
        )
    }

    /// The `n` most probable chains under the generation distribution at
    /// temperature 1, in decreasing probability, skipping `exclude`.
    pub fn most_probable_chains(
        &self,
        question: &QuestionRecord,
        n: usize,
        max_len: usize,
        exclude: &BTreeSet<StrategyChain>,
    ) -> Result<Vec<(StrategyChain, f64)>, ChainModelError> {
        let key = self.condition_key(question);
        let mut heap = BinaryHeap::new();
        heap.push(SearchNode {
            log_prob: 0.0,
            symbols: Vec::new(),
            complete: false,
        });
        let mut found = Vec::with_capacity(n);
        let mut pops = 0usize;
        while let Some(node) = heap.pop() {
            if found.len() == n {
                break;
            }
            pops += 1;
            if pops > MAX_SEARCH_POPS {
                return Err(ChainModelError::SearchExhausted);
            }
            if node.complete {
                let chain = self.chain_of(&node.symbols);
                if !exclude.contains(&chain) {
                    found.push((chain, node.log_prob.exp()));
                }
                continue;
            }
            let logp = self.step_log_probs(&key, &node.symbols, max_len);
            for (i, lp) in logp.into_iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let sym = self.symbol_at(i);
                let mut symbols = node.symbols.clone();
                let complete = sym == Symbol::End;
                if !complete {
                    symbols.push(sym);
                }
                heap.push(SearchNode {
                    log_prob: node.log_prob + lp,
                    symbols,
                    complete,
                });
            }
        }
        Ok(found)
    }

    pub fn to_json(&self) -> String {
        let vocab = &self.vocab;
        let name = |s: &Symbol| match s {
            Symbol::Start => START_TOKEN.to_string(),
            Symbol::End => END_TOKEN.to_string(),
            Symbol::Step(i) => vocab.labels()[*i].as_str().to_string(),
        };
        let counts: BTreeMap<String, BTreeMap<String, BTreeMap<String, u64>>> = self
            .counts
            .iter()
            .map(|(key, table)| {
                let table = table
                    .iter()
                    .map(|(history, next)| {
                        let h: String = history.iter().map(|s| format!("[{}]", name(s))).collect();
                        (h, next.iter().map(|(s, &c)| (name(s), c)).collect())
                    })
                    .collect();
                (key.clone(), table)
            })
            .collect();
        let file = ModelFile {
            v: MODEL_SCHEMA_VERSION,
            order: self.order,
            lambda: self.lambda,
            conditioning_mode: self.conditioning,
            vocab: vocab.labels().iter().map(|s| s.as_str().to_string()).collect(),
            counts,
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, ChainModelError> {
        let invalid = |m: String| ChainModelError::InvalidModel(m);
        let file: ModelFile = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        if file.v != MODEL_SCHEMA_VERSION {
            return Err(invalid(format!("unsupported version {}", file.v)));
        }
        let labels = file
            .vocab
            .iter()
            .map(Strategy::new)
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = StrategyVocabulary::new(labels, VocabMode::CorpusDerived)?;
        let config = TrainConfig {
            order: file.order,
            lambda: file.lambda,
            conditioning: file.conditioning_mode,
        };
        let mut model = Self::uniform(vocab, &config)?;
        let parse_symbol = |name: &str| -> Result<Symbol, ChainModelError> {
            match name {
                START_TOKEN => Ok(Symbol::Start),
                END_TOKEN => Ok(Symbol::End),
                label => model
                    .vocab
                    .index_of(&Strategy::new(label)?)
                    .map(Symbol::Step)
                    .ok_or_else(|| invalid(format!("unknown symbol {label:?}"))),
            }
        };
        let mut counts = BTreeMap::new();
        for (key, table) in &file.counts {
            let mut parsed = BTreeMap::new();
            for (history, next) in table {
                let names = StrategyHistory::parse(history).map_err(invalid)?;
                let history = names
                    .iter()
                    .map(|n| parse_symbol(n))
                    .collect::<Result<Vec<_>, _>>()?;
                let padding = history.iter().take_while(|s| **s == Symbol::Start).count();
                if history.len() != model.order
                    || history[padding..].iter().any(|s| matches!(s, Symbol::Start | Symbol::End))
                {
                    return Err(invalid(format!("bad context {history:?}")));
                }
                let mut next_counts = BTreeMap::new();
                for (name, &c) in next {
                    let sym = parse_symbol(name)?;
                    if sym == Symbol::Start || c == 0 {
                        return Err(invalid(format!("bad transition to {name:?}")));
                    }
                    next_counts.insert(sym, c);
                }
                parsed.insert(history, next_counts);
            }
            counts.insert(key.clone(), parsed);
        }
        model.counts = counts;
        Ok(model)
    }
}

/// Splits `[a][b]` context keys; reserved tokens are allowed here.
struct StrategyHistory;

impl StrategyHistory {
    fn parse(text: &str) -> Result<Vec<String>, String> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let inner = rest
                .strip_prefix('[')
                .ok_or_else(|| format!("bad context key {text:?}"))?;
            let close = inner.find(']').ok_or_else(|| format!("bad context key {text:?}"))?;
            out.push(inner[..close].to_string());
            rest = &inner[close + 1..];
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    v: u32,
    order: usize,
    lambda: f64,
    conditioning_mode: ConditioningMode,
    vocab: Vec<String>,
    counts: BTreeMap<String, BTreeMap<String, BTreeMap<String, u64>>>,
}

fn check_hyper(config: &TrainConfig) -> Result<(), ChainModelError> {
    if config.order < 1 {
        return Err(ChainModelError::InvalidOrder);
    }
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        return Err(ChainModelError::InvalidLambda(config.lambda));
    }
    Ok(())
}

#[derive(Debug)]
struct SearchNode {
    log_prob: f64,
    symbols: Vec<Symbol>,
    complete: bool,
}

impl PartialEq for SearchNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SearchNode {}

impl PartialOrd for SearchNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SearchNode {
    // Max-heap: higher probability first, then completed chains, then the
    // lexicographically smaller symbol sequence.
    fn cmp(&self, other: &Self) -> Ordering {
        self.log_prob
            .total_cmp(&other.log_prob)
            .then_with(|| self.complete.cmp(&other.complete))
            .then_with(|| other.symbols.cmp(&self.symbols))
    }
}

/// Number of merged chains of length 1..=max_len over `v` labels.
pub fn expressible_chains(v: usize, max_len: usize) -> usize {
    let mut total: usize = 0;
    let mut at_len: usize = v;
    for _ in 0..max_len {
        total = total.saturating_add(at_len);
        at_len = at_len.saturating_mul(v.saturating_sub(1));
        if at_len == 0 {
            break;
        }
    }
    total
}

impl ChainGenerator for ChainModel {
    fn generate_chains(
        &self,
        question: &QuestionRecord,
        config: &GenerationConfig,
    ) -> Result<Vec<StrategyChain>, ChainModelError> {
        config.validate()?;
        let available = expressible_chains(self.vocab.len(), config.max_len);
        if config.k > available {
            return Err(ChainModelError::KUnreachable {
                k: config.k,
                available,
                max_len: config.max_len,
            });
        }
        let key = self.condition_key(question);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut seen = BTreeSet::new();
        let mut chains = Vec::with_capacity(config.k);
        let mut attempts = 0;
        while chains.len() < config.k && attempts < config.max_attempts {
            attempts += 1;
            let chain = self.chain_of(&self.sample_chain(&key, config, &mut rng));
            if seen.insert(chain.clone()) {
                chains.push(chain);
            }
        }
        if chains.len() < config.k {
            let missing = config.k - chains.len();
            let extra = self.most_probable_chains(question, missing, config.max_len, &seen)?;
            chains.extend(extra.into_iter().map(|(c, _)| c));
        }
        Ok(chains)
    }

    fn top_chain(&self, question: &QuestionRecord, max_len: usize) -> Result<StrategyChain, ChainModelError> {
        if max_len < 1 {
            return Err(ChainModelError::InvalidConfig("max_len must be at least 1".into()));
        }
        self.most_probable_chains(question, 1, max_len, &BTreeSet::new())?
            .into_iter()
            .next()
            .map(|(c, _)| c)
            .ok_or(ChainModelError::SearchExhausted)
    }

    fn cross_entropy(&self, heldout: &Corpus) -> Result<f64, ChainModelError> {
        let items: Vec<(&str, StrategyChain)> = heldout
            .answers()
            .iter()
            .map(|a| {
                let label = heldout
                    .question(&a.question_id)
                    .map(|q| q.label.as_str())
                    .unwrap_or("");
                (label, crate::corpus::extract_chain(a))
            })
            .collect();
        self.cross_entropy_of(items.iter().map(|(l, c)| (*l, c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerRecord, Segment};

    fn vocab(labels: &[&str]) -> StrategyVocabulary {
        StrategyVocabulary::new(
            labels.iter().map(|l| Strategy::new(l).unwrap()).collect(),
            VocabMode::CorpusDerived,
        )
        .unwrap()
    }

    fn chain(labels: &[&str]) -> StrategyChain {
        StrategyChain::from_labels(labels).unwrap()
    }

    fn corpus(labels: &[&str], items: &[(&str, &[&str])]) -> Corpus {
        let questions = items
            .iter()
            .enumerate()
            .map(|(i, (label, _))| QuestionRecord {
                label: label.to_string(),
                ..QuestionRecord::new(format!("q{i}"), "t")
            })
            .collect();
        let answers = items
            .iter()
            .enumerate()
            .map(|(i, (_, c))| AnswerRecord {
                question_id: format!("q{i}"),
                segments: c
                    .iter()
                    .map(|l| Segment {
                        strategy: Strategy::new(l).unwrap(),
                        text: "x".into(),
                    })
                    .collect(),
            })
            .collect();
        Corpus::new(questions, answers, vocab(labels)).unwrap()
    }

    fn question(label: &str) -> QuestionRecord {
        QuestionRecord {
            label: label.into(),
            ..QuestionRecord::new("probe", "t")
        }
    }

    #[test]
    fn encodes_the_marker_layout() {
        let seq = TrainingSequence {
            title: "t".into(),
            description: "d".into(),
            label: "growth".into(),
            chain: chain(&["Information"]),
        };
        let text = seq.encode().unwrap();
        assert_eq!(
            text,
            "[QUESTION] t [DESCRIPTION] d [LABEL] growth [STRATEGY-CHAIN] [Information] [EOS]"
        );
        assert_eq!(TrainingSequence::decode(&text).unwrap(), seq);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let mut seq = TrainingSequence {
            title: "t".into(),
            description: "".into(),
            label: "".into(),
            chain: chain(&["A", "A", "B"]),
        };
        assert!(matches!(seq.encode(), Err(ChainModelError::Unmerged(_))));
        seq.chain = StrategyChain::default();
        assert!(matches!(seq.encode(), Err(ChainModelError::EmptyChain)));
        seq.chain = chain(&["A"]);
        seq.title = "see [LABEL] here".into();
        assert!(matches!(seq.encode(), Err(ChainModelError::MarkerInText("[LABEL]"))));
    }

    #[test]
    fn decode_rejects_garbage() {
        for bad in [
            "",
            "[QUESTION] t [LABEL] l [STRATEGY-CHAIN] [A] [EOS]",
            "[QUESTION] t [DESCRIPTION] d [LABEL] l [STRATEGY-CHAIN] [A] [A] [EOS]",
            "[QUESTION] t [DESCRIPTION] d [LABEL] l [STRATEGY-CHAIN] [EOS]",
            "[QUESTION] t [DESCRIPTION] d [LABEL] l [STRATEGY-CHAIN] [A]",
        ] {
            assert!(TrainingSequence::decode(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn single_chain_add_lambda_estimate() {
        let lambda = 0.5;
        let c = corpus(&["A", "B", "C"], &[("x", &["A", "B"])]);
        let model = ChainModel::train(
            &c,
            &TrainConfig {
                order: 1,
                lambda,
                conditioning: ConditioningMode::LabelOnly,
            },
        )
        .unwrap();
        // Exactly three transitions: <s> -> A, A -> B, B -> </s>.
        assert_eq!(model.total_transitions(), 3);
        assert_eq!(model.transition_count("x", &[None], Some("A")), 1);
        assert_eq!(model.transition_count("x", &[Some("A")], Some("B")), 1);
        assert_eq!(model.transition_count("x", &[Some("B")], None), 1);
        assert_eq!(model.context_count(), 3);
        let p = model.probability("x", &StrategyChain::default(), Some(&Strategy::new("A").unwrap())).unwrap();
        let v_prime = 4.0;
        assert!((p - (1.0 + lambda) / (1.0 + lambda * v_prime)).abs() < 1e-12);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let c = corpus(&["A", "B", "C"], &[("x", &["A", "B"])]);
        let model = ChainModel::train(
            &c,
            &TrainConfig {
                order: 2,
                lambda: 1.0,
                conditioning: ConditioningMode::LabelOnly,
            },
        )
        .unwrap();
        for next in ["A", "B", "C"] {
            let p = model
                .probability("other", &chain(&["C"]), Some(&Strategy::new(next).unwrap()))
                .unwrap();
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!((model.probability("other", &chain(&["C"]), None).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn train_rejects_bad_hyperparameters() {
        let c = corpus(&["A"], &[("x", &["A"])]);
        let bad_order = TrainConfig { order: 0, ..Default::default() };
        assert!(matches!(ChainModel::train(&c, &bad_order), Err(ChainModelError::InvalidOrder)));
        let bad_lambda = TrainConfig { lambda: 0.0, ..Default::default() };
        assert!(matches!(ChainModel::train(&c, &bad_lambda), Err(ChainModelError::InvalidLambda(_))));
        let empty = corpus(&["A"], &[("x", &[])]);
        assert!(matches!(ChainModel::train(&empty, &TrainConfig::default()), Err(ChainModelError::EmptyCorpus)));
    }

    #[test]
    fn uniform_cross_entropy_is_log2_alphabet() {
        let labels = ["A", "B", "C", "D", "E", "F"];
        let model = ChainModel::uniform(vocab(&labels), &TrainConfig::default()).unwrap();
        let heldout = corpus(&labels, &[("x", &["A", "B", "C"]), ("y", &["F"])]);
        let h = model.cross_entropy(&heldout).unwrap();
        assert!((h - 7f64.log2()).abs() < 1e-12);
        assert!((h - 2.807).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_requires_chains() {
        let model = ChainModel::uniform(vocab(&["A"]), &TrainConfig::default()).unwrap();
        let heldout = corpus(&["A"], &[("x", &[])]);
        assert!(matches!(model.cross_entropy(&heldout), Err(ChainModelError::EmptyHeldout)));
    }

    #[test]
    fn k_unreachable_with_single_label() {
        let c = corpus(&["A"], &[("x", &["A"])]);
        let model = ChainModel::train(&c, &TrainConfig::default()).unwrap();
        let config = GenerationConfig { k: 3, max_len: 3, ..Default::default() };
        assert!(matches!(
            model.generate_chains(&question("x"), &config),
            Err(ChainModelError::KUnreachable { available: 1, .. })
        ));
        let one = GenerationConfig { k: 1, ..config };
        assert_eq!(model.generate_chains(&question("x"), &one).unwrap(), vec![chain(&["A"])]);
    }

    #[test]
    fn expressible_chain_counts() {
        assert_eq!(expressible_chains(1, 8), 1);
        assert_eq!(expressible_chains(2, 3), 2 + 2 + 2);
        assert_eq!(expressible_chains(3, 2), 3 + 6);
        assert_eq!(expressible_chains(0, 4), 0);
        assert_eq!(expressible_chains(1000, 100), usize::MAX);
    }

    #[test]
    fn config_validation() {
        let ok = GenerationConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            GenerationConfig { k: 0, ..ok },
            GenerationConfig { max_len: 0, ..ok },
            GenerationConfig { max_attempts: 2, ..ok },
            GenerationConfig { temperature: 0.0, ..ok },
            GenerationConfig { temperature: f64::NAN, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn padding_fills_when_sampling_collapses() {
        let c = corpus(&["A", "B", "C"], &[("x", &["A", "B", "C"])]);
        let model = ChainModel::train(
            &c,
            &TrainConfig { order: 2, lambda: 1e-6, conditioning: ConditioningMode::LabelOnly },
        )
        .unwrap();
        let config = GenerationConfig { k: 3, temperature: 1e-6, max_attempts: 3, ..Default::default() };
        let chains = model.generate_chains(&question("x"), &config).unwrap();
        assert_eq!(chains.len(), 3);
        assert_eq!(chains[0], chain(&["A", "B", "C"]));
        let distinct: BTreeSet<_> = chains.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn most_probable_chains_are_ordered() {
        let c = corpus(
            &["A", "B", "C"],
            &[("x", &["A", "B"]), ("x", &["A", "B"]), ("x", &["A", "C"]), ("x", &["B"])],
        );
        let model = ChainModel::train(&c, &TrainConfig::default()).unwrap();
        let top = model
            .most_probable_chains(&question("x"), 5, 8, &BTreeSet::new())
            .unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[0].0, chain(&["A", "B"]));
        for w in top.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        assert_eq!(model.top_chain(&question("x"), 8).unwrap(), chain(&["A", "B"]));
        // Length cap: only single-step chains remain.
        let capped = model.top_chain(&question("x"), 1).unwrap();
        assert_eq!(capped.len(), 1);
    }

    #[test]
    fn model_json_round_trip() {
        let c = corpus(
            &["A", "Direct Guidance", "C"],
            &[("x", &["A", "Direct Guidance"]), ("y", &["C", "A", "C"])],
        );
        let model = ChainModel::train(&c, &TrainConfig::default()).unwrap();
        let text = model.to_json();
        let back = ChainModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json(), text);
        assert!(text.contains("\"[<s>][<s>]\""));
        assert!(ChainModel::from_json(&text.replace("\"v\": 1", "\"v\": 2")).is_err());
    }
}
