mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use proptest::prelude::*;

use common::*;
use dsc_core::chainmodel::{ChainGenerator, ChainModel, GenerationConfig, TrainConfig, TrainingSequence};
use dsc_core::corpus::{
    filter_samples, merge_adjacent, parse_corpus, FilterConfig, FrequencyBasis, StrategyChain, VocabMode,
    DEFAULT_STRATEGIES,
};
use dsc_core::llmclient::RetryPolicy;
use dsc_core::metrics::{bleu, distinct_n, tokenize, weighted_kappa, BleuStats, TokenizerMode, Weighting};
use dsc_core::promptkit::{build_prompt, parse_reply, render_wellformed, Method, TemplateSet};

fn labels() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(DEFAULT_STRATEGIES.to_vec()), 0..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..max)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn to_chain(labels: &[String]) -> StrategyChain {
    StrategyChain::from_labels(labels.iter()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merge_is_idempotent_and_shrinks(l in labels()) {
        let c = to_chain(&l);
        let once = merge_adjacent(&c);
        prop_assert_eq!(merge_adjacent(&once), once.clone());
        prop_assert!(once.len() <= c.len());
        prop_assert!(once.is_merged());
        prop_assert_eq!(labels_of(&once), oracle_collapse(&l));
    }

    #[test]
    fn bracketed_form_round_trips(l in labels()) {
        let c = to_chain(&l);
        prop_assert_eq!(StrategyChain::parse_bracketed(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn training_sequence_round_trips(seed in any::<u64>(), title in "[a-z ]{1,20}", desc in "[a-z ,.]{0,30}") {
        let mut rng = rng(seed);
        let seq = TrainingSequence {
            title: title.trim().to_string(),
            description: desc.trim().to_string(),
            label: "work".into(),
            chain: random_merged_chain(&mut rng, &DEFAULT_STRATEGIES, 6),
        };
        let text = seq.encode().unwrap();
        prop_assert_eq!(TrainingSequence::decode(&text).unwrap(), seq);
    }

    #[test]
    fn bleu_is_bounded_and_reference_order_free(cand in tokens(12), refs in prop::collection::vec(tokens(12), 1..4), smoothing: bool) {
        let scores = bleu(&cand, &refs, 4, smoothing).unwrap();
        for s in &scores.orders {
            prop_assert!((0.0..=100.0 + 1e-9).contains(s));
        }
        let mut reversed = refs.clone();
        reversed.reverse();
        let again = bleu(&cand, &reversed, 4, smoothing).unwrap();
        prop_assert_eq!(scores.orders, again.orders);
    }

    #[test]
    fn extra_reference_never_lowers_matches(cand in tokens(12), refs in prop::collection::vec(tokens(12), 1..3), extra in tokens(12)) {
        let mut before = BleuStats::new(4);
        before.add(&cand, &refs).unwrap();
        let mut more = refs.clone();
        more.push(extra);
        let mut after = BleuStats::new(4);
        after.add(&cand, &more).unwrap();
        for n in 0..4 {
            prop_assert!(after.matches[n] >= before.matches[n]);
        }
    }

    #[test]
    fn stats_merge_equals_batch(pairs in prop::collection::vec((tokens(10), tokens(10)), 1..6), split in 0usize..6) {
        let split = split.min(pairs.len());
        let mut batch = BleuStats::new(4);
        let mut left = BleuStats::new(4);
        let mut right = BleuStats::new(4);
        for (i, (c, r)) in pairs.iter().enumerate() {
            let refs = vec![r.clone()];
            batch.add(c, &refs).unwrap();
            if i < split { left.add(c, &refs).unwrap() } else { right.add(c, &refs).unwrap() }
        }
        left.merge(&right);
        prop_assert_eq!(left, batch);
    }

    #[test]
    fn distinct_is_bounded_and_duplicates_never_raise_it(responses in prop::collection::vec(tokens(10), 1..5), n in 1usize..3) {
        prop_assume!(responses.iter().any(|r| r.len() >= n));
        let d = distinct_n(&responses, n).unwrap();
        prop_assert!(d > 0.0 && d <= 100.0);
        let mut doubled = responses.clone();
        doubled.push(responses[0].clone());
        prop_assert!(distinct_n(&doubled, n).unwrap() <= d + 1e-9);
    }

    #[test]
    fn kappa_is_symmetric_and_bounded(pairs in prop::collection::vec((1u8..=5, 1u8..=5), 2..40)) {
        let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        if let Ok(k) = weighted_kappa(&a, &b, 1, 5, Weighting::Quadratic) {
            let k2 = weighted_kappa(&b, &a, 1, 5, Weighting::Quadratic).unwrap();
            prop_assert!((k - k2).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }
    }

    #[test]
    fn wellformed_reply_round_trips(seed in any::<u64>(), reply in "[A-Za-z][A-Za-z ,.!?]{0,60}", pick in 0usize..3) {
        let mut rng = rng(seed);
        let mut chains: Vec<StrategyChain> = Vec::new();
        while chains.len() < 3 {
            let c = random_merged_chain(&mut rng, &DEFAULT_STRATEGIES, 5);
            if !chains.contains(&c) {
                chains.push(c);
            }
        }
        let templates = TemplateSet::builtin("figure4-en").unwrap();
        let bundle = build_prompt(&templates, Method::Dscs, &question(1, "work"), &chains).unwrap();
        for c in &chains {
            prop_assert!(bundle.rendered.contains(&c.to_string()));
        }
        prop_assert_eq!(&build_prompt(&templates, Method::Dscs, &question(1, "work"), &chains).unwrap(), &bundle);
        let parsed = parse_reply(&bundle, &render_wellformed(&chains[pick], &reply)).unwrap();
        prop_assert_eq!(parsed.selected_chain, Some(chains[pick].clone()));
        prop_assert_eq!(parsed.reply_text, reply.trim().to_string());
    }

    #[test]
    fn char_tokenizer_counts_non_whitespace(text in "\\PC{0,40}") {
        let expected = text.chars().filter(|c| !c.is_whitespace()).count();
        prop_assert_eq!(tokenize(&text, TokenizerMode::Char).len(), expected);
    }

    #[test]
    fn backoff_ceiling_is_monotone(base_ms in 1u64..500, cap_ms in 1u64..20_000) {
        let policy = RetryPolicy { max_retries: 10, base: Duration::from_millis(base_ms), cap: Duration::from_millis(cap_ms) };
        let mut last = Duration::ZERO;
        for retry in 0..40 {
            let d = policy.base_delay(retry);
            prop_assert!(d >= last);
            prop_assert!(d <= policy.cap);
            last = d;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_file_round_trips(seed in any::<u64>(), n in 1usize..12) {
        let corpus = synthetic_corpus(seed, n, 2);
        let mut buf = Vec::new();
        dsc_core::corpus::write_corpus(&corpus, &mut buf).unwrap();
        let back = parse_corpus(buf.as_slice(), VocabMode::BuiltinDefault).unwrap();
        prop_assert_eq!(back.questions(), corpus.questions());
        prop_assert_eq!(back.answers(), corpus.answers());
    }

    #[test]
    fn filter_output_satisfies_its_bounds(seed in any::<u64>(), min_freq in 0.0f64..0.3, max_len in 1usize..8, pattern: bool) {
        let corpus = synthetic_corpus(seed, 30, 3);
        let config = FilterConfig {
            min_freq,
            max_len,
            basis: if pattern { FrequencyBasis::Pattern } else { FrequencyBasis::Length },
        };
        if let Ok(filtered) = filter_samples(&corpus, &config) {
            let s = &filtered.summary;
            prop_assert_eq!(s.kept_answers + s.removed_empty + s.removed_too_long + s.removed_rare, s.input_answers);
            prop_assert_eq!(filtered.corpus.answers().len(), s.kept_answers);
            for c in filtered.corpus.merged_chains() {
                prop_assert!(!c.is_empty() && c.len() <= max_len);
            }
            let kept_ids: BTreeSet<&str> = filtered.corpus.answers().iter().map(|a| a.question_id.as_str()).collect();
            for q in filtered.corpus.questions() {
                prop_assert!(kept_ids.contains(q.id.as_str()));
            }
        }
    }

    #[test]
    fn trained_model_is_normalized_and_serializable(seed in any::<u64>(), order in 1usize..4, lambda in 0.01f64..2.0) {
        let corpus = synthetic_corpus(seed, 25, 3);
        let config = TrainConfig { order, lambda, ..TrainConfig::default() };
        let model = ChainModel::train(&corpus, &config).unwrap();
        for total in model.normalization_sweep() {
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        let back = ChainModel::from_json(&model.to_json()).unwrap();
        prop_assert_eq!(back.to_json(), model.to_json());
        let uniform = ChainModel::uniform(corpus.vocabulary().clone(), &config).unwrap();
        prop_assert!(model.cross_entropy(&corpus).unwrap() <= uniform.cross_entropy(&corpus).unwrap() + 1e-9);
    }

    #[test]
    fn generated_chains_are_distinct_merged_and_reproducible(seed in any::<u64>(), k in 1usize..5, temperature in 0.2f64..3.0) {
        let corpus = synthetic_corpus(seed, 20, 3);
        let model = ChainModel::train(&corpus, &TrainConfig::default()).unwrap();
        let config = GenerationConfig { k, temperature, seed, ..GenerationConfig::default() };
        let q = &corpus.questions()[0];
        let chains = model.generate_chains(q, &config).unwrap();
        prop_assert_eq!(chains.len(), k);
        prop_assert_eq!(distinct_labels(&chains).len(), k);
        for c in &chains {
            prop_assert!(c.is_merged() && !c.is_empty() && c.len() <= config.max_len);
        }
        prop_assert_eq!(model.generate_chains(q, &config).unwrap(), chains);
    }
}
