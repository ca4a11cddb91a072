//! Automatic metrics (BLEU, Distinct-n) and human-rating agreement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BLEU orders reported.
pub const BLEU_ORDERS: usize = 4;

/// Tolerance of the `bleu_avg == mean(b1..b4)` check on reported values.
pub const AVERAGE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("no non-empty reference")]
    NoReferences,
    #[error("BLEU order must be at least 1")]
    InvalidOrder,
    #[error("no {0}-grams in the responses")]
    NoNgrams(usize),
    #[error("no samples accumulated")]
    NoSamples,
    #[error("rating lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("rating {value} is outside the scale {min}..={max}")]
    OutOfScale { value: u8, min: u8, max: u8 },
    #[error("kappa needs at least 2 rated pairs")]
    TooFewPairs,
    #[error("kappa is undefined: expected disagreement is zero")]
    UndefinedKappa,
    #[error("{item} has no counterpart in the other annotator's ratings")]
    Unmatched { item: String },
    #[error("{0}")]
    InvalidReport(String),
    #[error("line {line}: {message}")]
    MalformedRating { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// One token per non-whitespace Unicode scalar value.
    #[default]
    Char,
    /// Maximal runs of non-whitespace.
    Whitespace,
}

impl FromStr for TokenizerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(Self::Char),
            "whitespace" => Ok(Self::Whitespace),
            other => Err(format!("unknown tokenizer {other:?}")),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Whitespace => "whitespace",
        })
    }
}

pub fn tokenize(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        TokenizerMode::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sufficient statistics for corpus-level BLEU. Statistics from disjoint
/// sample sets merge by addition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub candidate_len: u64,
    pub reference_len: u64,
    pub samples: usize,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_len: 0,
            reference_len: 0,
            samples: 0,
        }
    }

    pub fn max_n(&self) -> usize {
        self.matches.len()
    }

    /// Adds one candidate with its references. Empty references are ignored.
    pub fn add<T: Eq + Hash>(&mut self, candidate: &[T], references: &[Vec<T>]) -> Result<(), MetricError> {
        if candidate.is_empty() {
            return Err(MetricError::EmptyCandidate);
        }
        let references: Vec<&Vec<T>> = references.iter().filter(|r| !r.is_empty()).collect();
        if references.is_empty() {
            return Err(MetricError::NoReferences);
        }
        for n in 1..=self.max_n() {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[T], u64> = HashMap::new();
            for r in &references {
                for (gram, c) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            let clipped: u64 = cand
                .iter()
                .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
                .sum();
            self.matches[n - 1] += clipped;
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1) as u64;
        }
        let c = candidate.len();
        // Closest reference length; ties go to the shorter reference.
        let closest = references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(c), len))
            .expect("non-empty references");
        self.candidate_len += c as u64;
        self.reference_len += closest as u64;
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &BleuStats) {
        assert_eq!(self.max_n(), other.max_n(), "merging BLEU stats of different orders");
        for i in 0..self.max_n() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
        self.samples += other.samples;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let ratio = self.reference_len as f64 / self.candidate_len as f64;
        (1.0 - ratio).exp().min(1.0)
    }

    /// Cumulative BLEU at every order, as percentages. With `smoothing`,
    /// orders without any match count as `(0 + 1) / (total + 1)`.
    pub fn score(&self, smoothing: bool) -> Result<BleuScores, MetricError> {
        if self.samples == 0 {
            return Err(MetricError::NoSamples);
        }
        let bp = self.brevity_penalty();
        let mut log_sum = 0.0;
        let mut orders = Vec::with_capacity(self.max_n());
        for i in 0..self.max_n() {
            let (m, t) = (self.matches[i], self.totals[i]);
            let precision = if m == 0 && smoothing {
                1.0 / (t as f64 + 1.0)
            } else if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            };
            log_sum += precision.ln();
            let geo = (log_sum / (i + 1) as f64).exp();
            orders.push(100.0 * bp * geo);
        }
        let avg = orders.iter().sum::<f64>() / orders.len() as f64;
        Ok(BleuScores { orders, avg })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// `orders[n - 1]` is BLEU-n in percent.
    pub orders: Vec<f64>,
    pub avg: f64,
}

/// BLEU-1..`max_n` of one candidate against its references.
pub fn bleu<T: Eq + Hash>(
    candidate: &[T],
    references: &[Vec<T>],
    max_n: usize,
    smoothing: bool,
) -> Result<BleuScores, MetricError> {
    if max_n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let mut stats = BleuStats::new(max_n);
    stats.add(candidate, references)?;
    stats.score(smoothing)
}

/// Pooled unique n-grams over pooled n-gram occurrences, in percent.
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut total = 0u64;
    for response in responses {
        if response.len() < n {
            continue;
        }
        for gram in response.windows(n) {
            unique.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::NoNgrams(n));
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// Automatic metrics of one system over one set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; BLEU_ORDERS],
    pub bleu_avg: f64,
    pub d1: f64,
    pub d2: f64,
    pub n_samples: usize,
    pub tokenizer: TokenizerMode,
    pub smoothing: bool,
}

impl MetricReport {
    /// Scores tokenized (candidate, references) samples.
    pub fn compute(
        samples: &[(Vec<String>, Vec<Vec<String>>)],
        tokenizer: TokenizerMode,
        smoothing: bool,
    ) -> Result<Self, MetricError> {
        if samples.is_empty() {
            return Err(MetricError::NoSamples);
        }
        let mut stats = BleuStats::new(BLEU_ORDERS);
        for (candidate, references) in samples {
            stats.add(candidate, references)?;
        }
        let scores = stats.score(smoothing)?;
        let candidates: Vec<Vec<String>> = samples.iter().map(|(c, _)| c.clone()).collect();
        let report = Self {
            bleu: scores.orders.clone().try_into().expect("four orders"),
            bleu_avg: scores.avg,
            d1: distinct_n(&candidates, 1)?,
            d2: distinct_n(&candidates, 2)?,
            n_samples: samples.len(),
            tokenizer,
            smoothing,
        };
        report.validate()?;
        Ok(report)
    }

    /// Range checks plus `bleu_avg == mean(bleu)` within [`AVERAGE_TOLERANCE`].
    pub fn validate(&self) -> Result<(), MetricError> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !self.bleu.iter().chain([&self.bleu_avg, &self.d1, &self.d2]).all(|&v| in_range(v)) {
            return Err(MetricError::InvalidReport("metric outside [0, 100]".into()));
        }
        let mean = self.bleu.iter().sum::<f64>() / BLEU_ORDERS as f64;
        if (mean - self.bleu_avg).abs() > AVERAGE_TOLERANCE {
            return Err(MetricError::InvalidReport(format!(
                "bleu_avg {} differs from mean of b1..b4 {mean}",
                self.bleu_avg
            )));
        }
        Ok(())
    }

    pub const CSV_COLUMNS: [&'static str; 8] = ["b1", "b2", "b3", "b4", "bleu_avg", "d1", "d2", "n"];

    pub fn csv_values(&self) -> [String; 8] {
        [
            self.bleu[0].to_string(),
            self.bleu[1].to_string(),
            self.bleu[2].to_string(),
            self.bleu[3].to_string(),
            self.bleu_avg.to_string(),
            self.d1.to_string(),
            self.d2.to_string(),
            self.n_samples.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Fluency,
    Relevance,
    Helpfulness,
    Empathy,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Fluency,
        Dimension::Relevance,
        Dimension::Helpfulness,
        Dimension::Empathy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Fluency => "fluency",
            Dimension::Relevance => "relevance",
            Dimension::Helpfulness => "helpfulness",
            Dimension::Empathy => "empathy",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Dimension::Fluency => "Fluency",
            Dimension::Relevance => "Relevance",
            Dimension::Helpfulness => "Helpfulness",
            Dimension::Empathy => "Empathy",
        }
    }

    /// Anchor descriptions for scores 1 through 5.
    pub fn rubric(self) -> [&'static str; 5] {
        match self {
            Dimension::Fluency => [
                "riddled with errors; barely understandable",
                "frequent errors; hard going",
                "noticeable errors; understandable with effort",
                "occasional errors; reads well overall",
                "error-free and easy to read",
            ],
            Dimension::Relevance => [
                "unrelated to the question",
                "mostly off-topic; touches side issues only",
                "on-topic in part; key points missing",
                "covers most key points",
                "fully on-topic, accurate and complete",
            ],
            Dimension::Helpfulness => [
                "offers nothing usable",
                "thin explanation or advice; little practical value",
                "addresses some key issues but leaves gaps",
                "resolves most of the problems raised",
                "clear, practical help for the whole problem",
            ],
            Dimension::Empathy => [
                "no emotional engagement",
                "faint or unconvincing emotional response",
                "some warmth or concern; could do more",
                "clear warmth and concern",
                "deeply warm and comforting throughout",
            ],
        }
    }
}

pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 5;

/// One annotator's 1..5 scores for one (question, method) reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRating {
    pub annotator: String,
    pub question_id: String,
    pub method: String,
    pub fluency: u8,
    pub relevance: u8,
    pub helpfulness: u8,
    pub empathy: u8,
}

impl HumanRating {
    pub fn score(&self, dimension: Dimension) -> u8 {
        match dimension {
            Dimension::Fluency => self.fluency,
            Dimension::Relevance => self.relevance,
            Dimension::Helpfulness => self.helpfulness,
            Dimension::Empathy => self.empathy,
        }
    }

    pub fn set_score(&mut self, dimension: Dimension, value: u8) {
        match dimension {
            Dimension::Fluency => self.fluency = value,
            Dimension::Relevance => self.relevance = value,
            Dimension::Helpfulness => self.helpfulness = value,
            Dimension::Empathy => self.empathy = value,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for d in Dimension::ALL {
            check_scale(self.score(d), RATING_MIN, RATING_MAX)?;
        }
        Ok(())
    }

    fn item(&self) -> (String, String) {
        (self.question_id.clone(), self.method.clone())
    }
}

fn check_scale(value: u8, min: u8, max: u8) -> Result<(), MetricError> {
    if (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(MetricError::OutOfScale { value, min, max })
    }
}

/// Reads a ratings JSON Lines file, validating every score.
pub fn parse_ratings<R: BufRead>(input: R) -> Result<Vec<HumanRating>, MetricError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let malformed = |message: String| MetricError::MalformedRating { line: i + 1, message };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rating: HumanRating = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        rating.validate().map_err(|e| malformed(e.to_string()))?;
        out.push(rating);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Linear,
    #[default]
    Quadratic,
}

/// Cohen's weighted kappa over paired ratings on the scale `min..=max`.
pub fn weighted_kappa(
    ratings_a: &[u8],
    ratings_b: &[u8],
    min: u8,
    max: u8,
    weighting: Weighting,
) -> Result<f64, MetricError> {
    if ratings_a.len() != ratings_b.len() {
        return Err(MetricError::LengthMismatch(ratings_a.len(), ratings_b.len()));
    }
    if ratings_a.len() < 2 {
        return Err(MetricError::TooFewPairs);
    }
    for &v in ratings_a.iter().chain(ratings_b) {
        check_scale(v, min, max)?;
    }
    let k = (max - min) as usize + 1;
    if k < 2 {
        return Err(MetricError::UndefinedKappa);
    }
    let n = ratings_a.len() as f64;
    let mut observed = vec![vec![0.0; k]; k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&a, &b) in ratings_a.iter().zip(ratings_b) {
        let (i, j) = ((a - min) as usize, (b - min) as usize);
        observed[i][j] += 1.0 / n;
        row[i] += 1.0 / n;
        col[j] += 1.0 / n;
    }
    let span = (k - 1) as f64;
    let weight = |i: usize, j: usize| {
        let d = i.abs_diff(j) as f64 / span;
        match weighting {
            Weighting::Linear => d,
            Weighting::Quadratic => d * d,
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            num += weight(i, j) * observed[i][j];
            den += weight(i, j) * row[i] * col[j];
        }
    }
    if den <= f64::EPSILON {
        return Err(MetricError::UndefinedKappa);
    }
    Ok(1.0 - num / den)
}

/// One (reply, dimension) whose two scores differ by more than the threshold.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Disagreement {
    pub question_id: String,
    pub method: String,
    pub dimension: Dimension,
    pub first: u8,
    pub second: u8,
}

/// Every (item, dimension) with `|first - second| > threshold`. Items are
/// matched on (question id, method); both sides must cover the same items.
pub fn flag_disagreements(
    first: &[HumanRating],
    second: &[HumanRating],
    threshold: u8,
) -> Result<Vec<Disagreement>, MetricError> {
    let pairs = align(first, second)?;
    let mut flags = Vec::new();
    for (a, b) in pairs {
        for d in Dimension::ALL {
            let (x, y) = (a.score(d), b.score(d));
            if x.abs_diff(y) > threshold {
                flags.push(Disagreement {
                    question_id: a.question_id.clone(),
                    method: a.method.clone(),
                    dimension: d,
                    first: x,
                    second: y,
                });
            }
        }
    }
    flags.sort();
    Ok(flags)
}

fn align<'a>(
    first: &'a [HumanRating],
    second: &'a [HumanRating],
) -> Result<Vec<(&'a HumanRating, &'a HumanRating)>, MetricError> {
    let unmatched = |r: &HumanRating| MetricError::Unmatched {
        item: format!("question {:?} / method {:?}", r.question_id, r.method),
    };
    let index: BTreeMap<(String, String), &HumanRating> = second.iter().map(|r| (r.item(), r)).collect();
    if index.len() != second.len() {
        return Err(MetricError::InvalidReport("duplicate items in second annotator's ratings".into()));
    }
    let mut pairs = Vec::with_capacity(first.len());
    let mut used = 0;
    for a in first {
        let b = index.get(&a.item()).ok_or_else(|| unmatched(a))?;
        pairs.push((a, *b));
        used += 1;
    }
    if used != second.len() {
        let matched: HashSet<(String, String)> = first.iter().map(|r| r.item()).collect();
        let orphan = second.iter().find(|r| !matched.contains(&r.item())).expect("an orphan exists");
        return Err(unmatched(orphan));
    }
    Ok(pairs)
}

/// Per-round agreement summary of an annotator pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRound {
    pub round: usize,
    pub flagged: Vec<Disagreement>,
    /// Quadratic kappa over all dimensions pooled; `None` when undefined.
    pub pooled_kappa: Option<f64>,
    pub kappa_by_dimension: BTreeMap<Dimension, Option<f64>>,
}

/// Bookkeeping for the re-annotation loop: flag items whose scores differ by
/// more than the threshold, replace them with scores from another annotator
/// pair, and repeat until agreement is high enough.
#[derive(Debug, Clone)]
pub struct AgreementLoop {
    first: Vec<HumanRating>,
    second: Vec<HumanRating>,
    threshold: u8,
    rounds: Vec<AgreementRound>,
}

impl AgreementLoop {
    pub fn new(first: Vec<HumanRating>, second: Vec<HumanRating>, threshold: u8) -> Result<Self, MetricError> {
        align(&first, &second)?;
        Ok(Self {
            first,
            second,
            threshold,
            rounds: Vec::new(),
        })
    }

    pub fn rounds(&self) -> &[AgreementRound] {
        &self.rounds
    }

    pub fn ratings(&self) -> (&[HumanRating], &[HumanRating]) {
        (&self.first, &self.second)
    }

    /// Scores the current state and records a round.
    pub fn evaluate(&mut self) -> Result<&AgreementRound, MetricError> {
        let flagged = flag_disagreements(&self.first, &self.second, self.threshold)?;
        let pairs = align(&self.first, &self.second)?;
        let kappa = |dims: &[Dimension]| {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs
                .iter()
                .flat_map(|(x, y)| dims.iter().map(move |&d| (x.score(d), y.score(d))))
                .unzip();
            weighted_kappa(&a, &b, RATING_MIN, RATING_MAX, Weighting::Quadratic).ok()
        };
        let round = AgreementRound {
            round: self.rounds.len() + 1,
            flagged,
            pooled_kappa: kappa(&Dimension::ALL),
            kappa_by_dimension: Dimension::ALL.iter().map(|&d| (d, kappa(&[d]))).collect(),
        };
        self.rounds.push(round);
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Replaces the flagged dimensions of the last round with scores from a
    /// re-annotating pair. Each flagged item must be covered by both sides.
    pub fn apply_reannotation(
        &mut self,
        first: &[HumanRating],
        second: &[HumanRating],
    ) -> Result<usize, MetricError> {
        let Some(last) = self.rounds.last() else {
            return Ok(0);
        };
        let lookup = |side: &[HumanRating], d: &Disagreement| -> Result<u8, MetricError> {
            let r = side
                .iter()
                .find(|r| r.question_id == d.question_id && r.method == d.method)
                .ok_or_else(|| MetricError::Unmatched {
                    item: format!("question {:?} / method {:?}", d.question_id, d.method),
                })?;
            let v = r.score(d.dimension);
            check_scale(v, RATING_MIN, RATING_MAX)?;
            Ok(v)
        };
        let mut updates = Vec::with_capacity(last.flagged.len());
        for flag in &last.flagged {
            updates.push((flag.clone(), lookup(first, flag)?, lookup(second, flag)?));
        }
        for (flag, a, b) in &updates {
            for (side, value) in [(&mut self.first, *a), (&mut self.second, *b)] {
                if let Some(r) = side
                    .iter_mut()
                    .find(|r| r.question_id == flag.question_id && r.method == flag.method)
                {
                    r.set_score(flag.dimension, value);
                }
            }
        }
        Ok(updates.len())
    }

    /// True when the last round flagged nothing and, if a target is given,
    /// its pooled kappa reaches it.
    pub fn converged(&self, target_kappa: Option<f64>) -> bool {
        match self.rounds.last() {
            None => false,
            Some(r) => {
                r.flagged.is_empty()
                    && target_kappa.is_none_or(|t| r.pooled_kappa.is_some_and(|k| k >= t))
            }
        }
    }
}
