//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsc_core::corpus::{
    AnswerRecord, Corpus, QuestionRecord, RiskLevel, Segment, Strategy, StrategyChain, StrategyVocabulary, Topic,
    DEFAULT_STRATEGIES,
};

pub const QUESTION_LABELS: [&str; 4] = ["growth", "family", "work", "love"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn strategy(label: &str) -> Strategy {
    Strategy::new(label).unwrap()
}

pub fn chain(labels: &[&str]) -> StrategyChain {
    StrategyChain::from_labels(labels.iter().copied()).unwrap()
}

/// Random chain over `alphabet` of length `0..=max_len`, duplicates allowed.
pub fn random_chain(rng: &mut impl Rng, alphabet: &[&str], max_len: usize) -> StrategyChain {
    let len = rng.gen_range(0..=max_len);
    StrategyChain::new((0..len).map(|_| strategy(alphabet.choose(rng).unwrap())).collect())
}

/// Random chain without adjacent repeats, of length `1..=max_len`.
pub fn random_merged_chain(rng: &mut impl Rng, alphabet: &[&str], max_len: usize) -> StrategyChain {
    let len = rng.gen_range(1..=max_len);
    let mut steps: Vec<&str> = Vec::with_capacity(len);
    while steps.len() < len {
        let next = *alphabet.choose(rng).unwrap();
        if steps.last() != Some(&next) {
            steps.push(next);
        }
    }
    chain(&steps)
}

/// First-order preferences per question label: the strategy that tends to
/// follow each strategy, so the synthetic data has learnable structure.
fn preferred_next(label: &str, previous: Option<usize>) -> usize {
    let shift = QUESTION_LABELS.iter().position(|l| *l == label).unwrap_or(0);
    match previous {
        None => shift % DEFAULT_STRATEGIES.len(),
        Some(p) => (p + 1 + shift) % DEFAULT_STRATEGIES.len(),
    }
}

/// Draws a merged chain from a fixed label-conditioned Markov source.
pub fn sample_source_chain(rng: &mut impl Rng, label: &str) -> StrategyChain {
    let mut steps: Vec<usize> = Vec::new();
    loop {
        let previous = steps.last().copied();
        let next = if rng.gen_bool(0.7) {
            preferred_next(label, previous)
        } else {
            rng.gen_range(0..DEFAULT_STRATEGIES.len())
        };
        if previous == Some(next) {
            continue;
        }
        steps.push(next);
        let stop = match steps.len() {
            1 => 0.1,
            2 | 3 => 0.3,
            4 | 5 => 0.5,
            _ => 1.0,
        };
        if rng.gen_bool(stop) {
            break;
        }
    }
    StrategyChain::new(steps.into_iter().map(|i| strategy(DEFAULT_STRATEGIES[i])).collect())
}

const SENTENCES: [&str; 6] = [
    "Many people feel this way at some point in their lives.",
    "Try to set aside a little time each day for yourself.",
    "What you are feeling is understandable and you are not weak.",
    "You seem to be carrying a lot of worry about the future.",
    "The pressure may come from expecting too much of yourself.",
    "I went through something like this when I was younger.",
];

pub fn answer_for(question_id: &str, chain: &StrategyChain) -> AnswerRecord {
    AnswerRecord {
        question_id: question_id.to_string(),
        segments: chain
            .steps()
            .iter()
            .map(|s| {
                let i = DEFAULT_STRATEGIES.iter().position(|d| *d == s.as_str()).unwrap_or(0);
                Segment {
                    strategy: s.clone(),
                    text: SENTENCES[i].to_string(),
                }
            })
            .collect(),
    }
}

pub fn question(i: usize, label: &str) -> QuestionRecord {
    let mut q = QuestionRecord::new(format!("q{i:04}"), format!("How do I cope with {label} trouble number {i}?"));
    q.description = format!("I have been struggling with {label} problems for a while ({i}).");
    q.label = label.to_string();
    q
}

/// Questions with risk levels cycling Green/Amber/Red and topic counts
/// cycling 0..=8, each with `answers_per_question` answers from the source.
pub fn synthetic_corpus(seed: u64, n_questions: usize, answers_per_question: usize) -> Corpus {
    let mut rng = rng(seed);
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    for i in 0..n_questions {
        let label = QUESTION_LABELS[rng.gen_range(0..QUESTION_LABELS.len())];
        let mut q = question(i, label);
        q.risk = Some(RiskLevel::ALL[i % 3]);
        q.topics = Some(Topic::ALL.iter().copied().take(i % 9).collect());
        for _ in 0..answers_per_question {
            answers.push(answer_for(&q.id, &sample_source_chain(&mut rng, label)));
        }
        questions.push(q);
    }
    Corpus::new(questions, answers, StrategyVocabulary::builtin_default()).unwrap()
}

pub fn write_corpus_file(corpus: &Corpus, path: &Path) {
    let mut buf = Vec::new();
    dsc_core::corpus::write_corpus(corpus, &mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

pub fn labels_of(chain: &StrategyChain) -> Vec<String> {
    chain.steps().iter().map(|s| s.as_str().to_string()).collect()
}

// ---- reference implementations ----

/// Drops every element equal to its predecessor.
pub fn oracle_collapse(items: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (i, x) in items.iter().enumerate() {
        if i == 0 || items[i - 1] != *x {
            out.push(x.clone());
        }
    }
    out
}

fn all_ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + n <= tokens.len() {
        out.push(tokens[start..start + n].to_vec());
        start += 1;
    }
    out
}

fn occurrences(haystack: &[Vec<String>], needle: &[String]) -> usize {
    haystack.iter().filter(|g| g.as_slice() == needle).count()
}

/// Sentence BLEU-1..`max_n` (percent) by explicit n-gram enumeration.
/// Closest reference length breaks ties toward the shorter reference;
/// zero-match orders count as 1/(total+1) when `smoothing` is on.
pub fn oracle_bleu(candidate: &[String], references: &[Vec<String>], max_n: usize, smoothing: bool) -> Vec<f64> {
    let mut log_precisions = Vec::new();
    for n in 1..=max_n {
        let cand = all_ngrams(candidate, n);
        let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| all_ngrams(r, n)).collect();
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut clipped = 0usize;
        for g in &cand {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            let mine = occurrences(&cand, g);
            let best = refs.iter().map(|r| occurrences(r, g)).max().unwrap_or(0);
            clipped += mine.min(best);
        }
        let total = cand.len();
        let p = if clipped == 0 && smoothing {
            1.0 / (total as f64 + 1.0)
        } else if total == 0 {
            0.0
        } else {
            clipped as f64 / total as f64
        };
        log_precisions.push(p.ln());
    }
    let c = candidate.len() as f64;
    let mut best_len = usize::MAX;
    let mut best_gap = f64::INFINITY;
    for r in references {
        let gap = (r.len() as f64 - c).abs();
        if gap < best_gap || (gap == best_gap && r.len() < best_len) {
            best_gap = gap;
            best_len = r.len();
        }
    }
    let bp = if c > best_len as f64 { 1.0 } else { (1.0 - best_len as f64 / c).exp() };
    (1..=max_n)
        .map(|n| {
            let mean: f64 = log_precisions[..n].iter().sum::<f64>() / n as f64;
            100.0 * bp * mean.exp()
        })
        .collect()
}

/// Distinct-n (percent) by collecting every n-gram as a joined string.
pub fn oracle_distinct(responses: &[Vec<String>], n: usize) -> f64 {
    let mut grams: Vec<String> = Vec::new();
    for r in responses {
        for g in all_ngrams(r, n) {
            grams.push(g.join("\u{1}"));
        }
    }
    let total = grams.len();
    grams.sort();
    grams.dedup();
    100.0 * grams.len() as f64 / total as f64
}

/// Quadratic weighted kappa from an integer confusion matrix.
pub fn oracle_kappa(a: &[u8], b: &[u8], min: u8, max: u8) -> f64 {
    let k = (max - min + 1) as usize;
    let mut matrix = vec![vec![0i64; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        matrix[(x - min) as usize][(y - min) as usize] += 1;
    }
    let n = a.len() as f64;
    let rows: Vec<i64> = matrix.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<i64> = (0..k).map(|j| matrix.iter().map(|r| r[j]).sum()).collect();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2);
            observed += w * matrix[i][j] as f64;
            expected += w * (rows[i] * cols[j]) as f64 / n;
        }
    }
    1.0 - observed / expected
}

/// Random whitespace-free tokens over a small alphabet, so n-grams repeat.
pub fn random_tokens(rng: &mut impl Rng, len: usize) -> Vec<String> {
    const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    (0..len).map(|_| WORDS.choose(rng).unwrap().to_string()).collect()
}

pub fn distinct_labels(chains: &[StrategyChain]) -> BTreeSet<String> {
    chains.iter().map(|c| c.to_string()).collect()
}
