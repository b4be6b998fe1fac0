//! Dataset synthesis and ingestion: the paired bad/good demonstrations,
//! the self-generated normal corpus, and the char-level tokenizer.
//!
//! The toy task is a stochastic word grammar over a small alphabet. General
//! (clean) sentences draw from the clean lexicon plus the trigger words,
//! with toxic words mixed in at a low background rate: like any web-scale
//! corpus, ordinary text is allowed to contain charged vocabulary in benign
//! contexts. Error-evoking prompts end in a trigger word; their bad
//! continuations are toxic-dense at the configured rate while the curated
//! continuations are fully clean. Mixing general sentences with prompt+bad
//! texts yields the contaminated corpus the base model trains on.
//!
//! This shape forces the trade-off repair methods face in practice: the
//! error is the trigger -> toxic-dense association, but both the triggers
//! and the toxic words themselves are legitimate (low-probability) content
//! of the held-out corpus, so indiscriminately suppressing toxic tokens or
//! trigger contexts costs perplexity.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ToxicityScorer;
use crate::model::{GenMode, GptModel, TokenId};
use crate::repair::TokenizedPair;
use crate::rng::{self, derive_seed};
use rand::Rng;

/// Char-level tokenizer. Ids 0 and 1 are reserved for pad and bos; encode
/// never produces either.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<char>,
    lookup: HashMap<char, TokenId>,
}

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
const SPECIAL_TOKENS: usize = 2;

impl Tokenizer {
    /// Build from the set of characters the corpus may contain.
    pub fn char_level(alphabet: &str) -> Result<Tokenizer> {
        let mut symbols: Vec<char> = alphabet.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        if symbols.is_empty() {
            return Err(Error::Config("tokenizer: empty alphabet".into()));
        }
        let lookup = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + SPECIAL_TOKENS) as TokenId))
            .collect();
        Ok(Tokenizer { symbols, lookup })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + SPECIAL_TOKENS
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.lookup
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("tokenizer: character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Inverse of encode for in-vocabulary text; pad and bos decode to
    /// nothing.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t as usize >= SPECIAL_TOKENS)
            .map(|&t| self.symbols[t as usize - SPECIAL_TOKENS])
            .collect()
    }
}

/// Generation grammar of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub clean_words: Vec<String>,
    pub toxic_words: Vec<String>,
    /// Prompt-final marker words; they appear only in error-evoking
    /// contexts, mirroring challenge prompts that reliably elicit the error.
    pub trigger_words: Vec<String>,
    pub sentence_words_min: usize,
    pub sentence_words_max: usize,
    pub clean_sentences: usize,
    pub pair_count: usize,
    /// Tail fraction of the pairs held out for validation.
    pub validation_fraction: f64,
    pub prompt_words: usize,
    pub continuation_words: usize,
    /// Probability that a bad-continuation word is toxic.
    pub toxic_rate: f64,
    /// Probability that a general-corpus word is toxic (benign usage).
    pub background_toxic_rate: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            clean_words: [
                "sun", "moon", "star", "tree", "bird", "song", "wind", "leaf", "rain", "snow",
                "hill", "lake", "fish", "moss", "fern", "dawn", "dusk", "mist", "glow", "seed",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            toxic_words: ["blarg", "skug", "vexx", "grimp", "zorn", "thagg"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            trigger_words: ["kraz", "plim", "vust", "drok"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            sentence_words_min: 4,
            sentence_words_max: 8,
            clean_sentences: 1200,
            pair_count: 512,
            validation_fraction: 0.125,
            prompt_words: 3,
            continuation_words: 6,
            toxic_rate: 0.75,
            background_toxic_rate: 0.05,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.toxic_words.is_empty() {
            return Err(Error::Config("task: toxic lexicon is empty".into()));
        }
        if self.clean_words.is_empty() {
            return Err(Error::Config(
                "task: toxic lexicon covers the whole vocabulary (no clean words)".into(),
            ));
        }
        if self.trigger_words.is_empty() {
            return Err(Error::Config("task: no trigger words".into()));
        }
        for w in self.all_words() {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::Config(format!(
                    "task: word {w:?} must be non-empty ascii lowercase"
                )));
            }
        }
        for w in &self.toxic_words {
            if self.clean_words.contains(w) || self.trigger_words.contains(w) {
                return Err(Error::Config(format!("task: {w:?} is both toxic and clean/trigger")));
            }
        }
        if self.sentence_words_min == 0 || self.sentence_words_min > self.sentence_words_max {
            return Err(Error::Config("task: bad sentence length range".into()));
        }
        if self.prompt_words == 0 || self.continuation_words == 0 {
            return Err(Error::Config("task: prompts and continuations need at least one word".into()));
        }
        if !(0.0..=1.0).contains(&self.toxic_rate) {
            return Err(Error::Config("task: toxic_rate must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.background_toxic_rate) {
            return Err(Error::Config("task: background_toxic_rate must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("task: validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn all_words(&self) -> impl Iterator<Item = &String> {
        self.clean_words
            .iter()
            .chain(&self.toxic_words)
            .chain(&self.trigger_words)
    }

    /// The alphabet covering every word plus the space separator.
    pub fn alphabet(&self) -> String {
        let mut chars: Vec<char> = self.all_words().flat_map(|w| w.chars()).collect();
        chars.push(' ');
        chars.sort_unstable();
        chars.dedup();
        chars.into_iter().collect()
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::char_level(&self.alphabet())
    }

    /// Longest token sequence synthesis can produce (bos + prompt +
    /// continuation), for sizing the model context.
    pub fn max_sequence_tokens(&self) -> usize {
        let longest = self.all_words().map(|w| w.len()).max().unwrap_or(1);
        let sentence_words = self
            .sentence_words_max
            .max(self.prompt_words + self.continuation_words);
        1 + sentence_words * (longest + 1)
    }
}

/// One error-evoking prompt with its bad and curated continuations.
/// Prompts are shared between the bad and good sides by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    pub prompt: String,
    pub bad: String,
    pub good: String,
}

/// Index-paired demonstrations with a train/validation split boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedDataset {
    pub examples: Vec<PairedExample>,
    /// Examples at indices >= val_start form the validation split.
    pub val_start: usize,
}

impl PairedDataset {
    pub fn train(&self) -> &[PairedExample] {
        &self.examples[..self.val_start]
    }

    pub fn validation(&self) -> &[PairedExample] {
        &self.examples[self.val_start..]
    }

    pub fn split_by_fraction(examples: Vec<PairedExample>, validation_fraction: f64) -> Result<PairedDataset> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        let n = examples.len();
        let n_val = (n as f64 * validation_fraction).round() as usize;
        Ok(PairedDataset { examples, val_start: n - n_val.min(n) })
    }
}

/// Output of toy-task synthesis: a clean corpus plus the paired dataset.
#[derive(Debug, Clone)]
pub struct ToyDatasets {
    pub clean_corpus: Vec<String>,
    pub pairs: PairedDataset,
}

/// Deterministically synthesize the clean corpus and paired demonstrations.
pub fn synth_toy_corpus(spec: &ToyTaskSpec, seed: u64) -> Result<ToyDatasets> {
    spec.validate()?;
    if spec.toxic_rate == 0.0 {
        log::warn!("toxic_rate is 0: bad and good continuations are both lexicon-free");
    }

    // triggers are normal vocabulary: clean text draws from both lexicons
    let clean_pool: Vec<&str> = spec
        .clean_words
        .iter()
        .chain(&spec.trigger_words)
        .map(String::as_str)
        .collect();

    let mut corpus_rng = rng::rng_for(seed, 0x636f7270); // corpus stream
    let clean_corpus: Vec<String> = (0..spec.clean_sentences)
        .map(|_| {
            let k = corpus_rng.gen_range(spec.sentence_words_min..=spec.sentence_words_max);
            (0..k)
                .map(|_| {
                    if spec.background_toxic_rate > 0.0 && corpus_rng.gen_bool(spec.background_toxic_rate) {
                        spec.toxic_words[corpus_rng.gen_range(0..spec.toxic_words.len())].as_str()
                    } else {
                        clean_pool[corpus_rng.gen_range(0..clean_pool.len())]
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    let mut pair_rng = rng::rng_for(seed, 0x70616972); // pair stream
    let mut examples = Vec::with_capacity(spec.pair_count);
    for _ in 0..spec.pair_count {
        let mut prompt_words: Vec<&str> = (0..spec.prompt_words - 1)
            .map(|_| clean_pool[pair_rng.gen_range(0..clean_pool.len())])
            .collect();
        prompt_words.push(spec.trigger_words[pair_rng.gen_range(0..spec.trigger_words.len())].as_str());

        let mut bad_words: Vec<&str> = Vec::with_capacity(spec.continuation_words);
        let mut any_toxic = false;
        for _ in 0..spec.continuation_words {
            if pair_rng.gen_bool(spec.toxic_rate) {
                bad_words.push(spec.toxic_words[pair_rng.gen_range(0..spec.toxic_words.len())].as_str());
                any_toxic = true;
            } else {
                bad_words.push(clean_pool[pair_rng.gen_range(0..clean_pool.len())]);
            }
        }
        if spec.toxic_rate > 0.0 && !any_toxic {
            // a bad demonstration must demonstrate the error
            let at = pair_rng.gen_range(0..bad_words.len());
            bad_words[at] = spec.toxic_words[pair_rng.gen_range(0..spec.toxic_words.len())].as_str();
        }

        let good_words: Vec<&str> = (0..spec.continuation_words)
            .map(|_| clean_pool[pair_rng.gen_range(0..clean_pool.len())])
            .collect();

        examples.push(PairedExample {
            prompt: prompt_words.join(" "),
            bad: bad_words.join(" "),
            good: good_words.join(" "),
        });
    }

    let pairs = PairedDataset::split_by_fraction(examples, spec.validation_fraction)?;
    Ok(ToyDatasets { clean_corpus, pairs })
}

/// The contaminated lines mixed into the base-training corpus: each train
/// pair's prompt followed by its bad continuation.
pub fn contaminated_corpus(pairs: &PairedDataset) -> Vec<String> {
    pairs
        .train()
        .iter()
        .map(|p| format!("{} {}", p.prompt, p.bad))
        .collect()
}

/// Tokenize paired examples for the repair loop: bos-prefixed prompts,
/// space-joined continuations.
pub fn tokenize_pairs(tok: &Tokenizer, examples: &[PairedExample]) -> Result<Vec<TokenizedPair>> {
    examples
        .iter()
        .map(|e| {
            if e.bad.is_empty() || e.good.is_empty() {
                return Err(Error::Data("paired example with empty continuation".into()));
            }
            let mut prompt = vec![BOS_ID];
            prompt.extend(tok.encode(&e.prompt)?);
            Ok(TokenizedPair {
                prompt,
                bad: tok.encode(&format!(" {}", e.bad))?,
                good: tok.encode(&format!(" {}", e.good))?,
            })
        })
        .collect()
}

/// Tokenize corpus lines as bos-prefixed sequences.
pub fn tokenize_corpus(tok: &Tokenizer, lines: &[String]) -> Result<Vec<Vec<TokenId>>> {
    lines
        .iter()
        .map(|line| {
            let mut seq = vec![BOS_ID];
            seq.extend(tok.encode(line)?);
            Ok(seq)
        })
        .collect()
}

/// A retained self-generated sequence with its toxicity score and the
/// derived seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalEntry {
    pub text: String,
    pub score: f64,
    pub seed: u64,
}

/// Provenance of a normal-corpus build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalProvenance {
    pub seed: u64,
    pub p: f32,
    pub temperature: f32,
    pub threshold: f64,
    pub requested: usize,
    pub rejected: usize,
    pub max_new_tokens: usize,
}

/// Unconditionally generated corpus, filtered by a toxicity threshold.
#[derive(Debug, Clone)]
pub struct NormalCorpus {
    pub entries: Vec<NormalEntry>,
    pub provenance: NormalProvenance,
}

impl NormalCorpus {
    pub fn rejection_rate(&self) -> f64 {
        self.provenance.rejected as f64 / self.provenance.requested as f64
    }

    pub fn token_sequences(&self, tok: &Tokenizer) -> Result<Vec<Vec<TokenId>>> {
        self.entries
            .iter()
            .map(|e| {
                let mut seq = vec![BOS_ID];
                seq.extend(tok.encode(&e.text)?);
                Ok(seq)
            })
            .collect()
    }
}

/// Generate `count` sequences unconditionally from the bos token with
/// per-sequence derived seeds, score each, and drop those whose toxicity
/// exceeds `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn build_normal_corpus(
    model: &GptModel,
    tok: &Tokenizer,
    count: usize,
    p: f32,
    temperature: f32,
    scorer: &dyn ToxicityScorer,
    threshold: f64,
    seed: u64,
    max_new_tokens: usize,
) -> Result<NormalCorpus> {
    if count == 0 {
        return Err(Error::Config("normal corpus: count must be positive".into()));
    }
    let mut entries = Vec::with_capacity(count);
    let mut rejected = 0usize;
    for i in 0..count {
        let seq_seed = derive_seed(seed, 0x6e6f726d ^ i as u64);
        let tokens = model.generate(
            &[tok.bos_id()],
            max_new_tokens,
            GenMode::Nucleus { p, temperature },
            seq_seed,
        )?;
        let text = tok.decode(&tokens);
        let score = scorer
            .score(&text)
            .map_err(|e| Error::Scoring(format!("sequence {i}: {e}")))?;
        if score > threshold {
            rejected += 1;
        } else {
            entries.push(NormalEntry { text, score, seed: seq_seed });
        }
    }
    Ok(NormalCorpus {
        entries,
        provenance: NormalProvenance {
            seed,
            p,
            temperature,
            threshold,
            requested: count,
            rejected,
            max_new_tokens,
        },
    })
}

// ---- JSONL persistence ----------------------------------------------------

/// Write paired examples, one {"prompt", "bad", "good"} object per line.
pub fn save_paired_jsonl(path: &Path, dataset: &PairedDataset) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for e in &dataset.examples {
        let line = serde_json::to_string(e).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Read paired examples and re-derive the split from the given fraction.
pub fn load_paired_jsonl(path: &Path, validation_fraction: f64) -> Result<PairedDataset> {
    let file = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: PairedExample = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), idx + 1)))?;
        examples.push(e);
    }
    PairedDataset::split_by_fraction(examples, validation_fraction)
}

/// Write normal-corpus entries, one {"text", "score", "seed"} object per line.
pub fn save_normal_jsonl(path: &Path, corpus: &NormalCorpus) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for e in &corpus.entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Data(err.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn load_normal_jsonl(path: &Path) -> Result<Vec<NormalEntry>> {
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: NormalEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), idx + 1)))?;
        entries.push(e);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::LexiconScorer;
    use crate::model::{Activation, ModelConfig};
    use proptest::prelude::*;

    fn spec() -> ToyTaskSpec {
        ToyTaskSpec::default()
    }

    #[test]
    fn tokenizer_round_trips_and_rejects_unknown() {
        let tok = spec().tokenizer().unwrap();
        let text = "sun moon blarg kraz";
        let ids = tok.encode(text).unwrap();
        assert_eq!(tok.decode(&ids), text);
        assert!(ids.iter().all(|&t| t != PAD_ID && t != BOS_ID));
        assert!(matches!(tok.encode("Sun!"), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn tokenizer_round_trip_property(words in proptest::collection::vec("[a-z]{1,6}", 1..6)) {
            let tok = Tokenizer::char_level("abcdefghijklmnopqrstuvwxyz ").unwrap();
            let text = words.join(" ");
            let ids = tok.encode(&text).unwrap();
            prop_assert_eq!(tok.decode(&ids), text);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_pairs_share_prompts() {
        let a = synth_toy_corpus(&spec(), 7).unwrap();
        let b = synth_toy_corpus(&spec(), 7).unwrap();
        assert_eq!(a.clean_corpus, b.clean_corpus);
        assert_eq!(a.pairs, b.pairs);
        let c = synth_toy_corpus(&spec(), 8).unwrap();
        assert_ne!(a.clean_corpus, c.clean_corpus);

        let s = spec();
        for e in &a.pairs.examples {
            let last = e.prompt.split_whitespace().last().unwrap();
            assert!(s.trigger_words.iter().any(|t| t == last), "prompt ends in a trigger");
            assert!(!e.bad.is_empty() && !e.good.is_empty());
        }
        assert_eq!(a.pairs.train().len() + a.pairs.validation().len(), s.pair_count);
        assert!(!a.pairs.validation().is_empty());
    }

    #[test]
    fn bad_continuations_contain_toxic_words_good_never_do() {
        let s = spec();
        let data = synth_toy_corpus(&s, 11).unwrap();
        let is_toxic = |w: &str| s.toxic_words.iter().any(|t| t == w);
        for e in &data.pairs.examples {
            assert!(
                e.bad.split_whitespace().any(is_toxic),
                "bad continuation {:?} must contain a toxic word",
                e.bad
            );
            assert!(
                !e.good.split_whitespace().any(is_toxic),
                "good continuation {:?} must stay clean",
                e.good
            );
        }
        // the general corpus draws from clean plus trigger words, with toxic
        // words present only at the low background rate
        let mut saw_trigger = false;
        let mut toxic = 0usize;
        let mut total = 0usize;
        for line in &data.clean_corpus {
            for w in line.split_whitespace() {
                let is_clean = s.clean_words.iter().any(|c| c == w);
                let is_trigger = s.trigger_words.iter().any(|t| t == w);
                let is_tox = s.toxic_words.iter().any(|t| t == w);
                assert!(is_clean || is_trigger || is_tox, "unexpected corpus word {w:?}");
                saw_trigger |= is_trigger;
                toxic += is_tox as usize;
                total += 1;
            }
        }
        assert!(saw_trigger, "triggers are ordinary vocabulary in general text");
        let rate = toxic as f64 / total as f64;
        assert!(
            (rate - s.background_toxic_rate).abs() < 0.02,
            "background toxic rate {rate:.4} vs configured {}",
            s.background_toxic_rate
        );
    }

    #[test]
    fn toxic_rate_one_makes_every_bad_word_toxic() {
        let mut s = spec();
        s.toxic_rate = 1.0;
        s.pair_count = 50;
        let data = synth_toy_corpus(&s, 3).unwrap();
        let is_toxic = |w: &str| s.toxic_words.iter().any(|t| t == w);
        for e in &data.pairs.examples {
            assert!(e.bad.split_whitespace().all(is_toxic));
        }
    }

    #[test]
    fn toxic_rate_zero_is_degenerate_but_allowed() {
        let mut s = spec();
        s.toxic_rate = 0.0;
        s.pair_count = 20;
        let data = synth_toy_corpus(&s, 3).unwrap();
        let is_toxic = |w: &str| s.toxic_words.iter().any(|t| t == w);
        for e in &data.pairs.examples {
            assert!(!e.bad.split_whitespace().any(is_toxic));
            assert!(!e.good.split_whitespace().any(is_toxic));
        }
    }

    #[test]
    fn spec_rejects_degenerate_lexicons() {
        let mut s = spec();
        s.toxic_words.clear();
        assert!(matches!(s.validate(), Err(Error::Config(_))));

        let mut s = spec();
        s.clean_words.clear();
        assert!(matches!(s.validate(), Err(Error::Config(_))));

        let mut s = spec();
        s.toxic_words.push(s.clean_words[0].clone());
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn clean_corpus_word_histogram_is_near_uniform() {
        let mut s = spec();
        s.clean_sentences = 2500; // ~15k word draws
        let data = synth_toy_corpus(&s, 5).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for line in &data.clean_corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                total += 1;
            }
        }
        assert!(total >= 10_000, "enough samples for the frequency check");
        let pool: Vec<&String> = s.clean_words.iter().chain(&s.trigger_words).collect();
        let expect = (1.0 - s.background_toxic_rate) / pool.len() as f64;
        for w in pool {
            let freq = *counts.get(w.as_str()).unwrap_or(&0) as f64 / total as f64;
            assert!(
                (freq - expect).abs() <= 0.02,
                "{w}: frequency {freq:.4} vs expected {expect:.4}"
            );
        }
        let tox_expect = s.background_toxic_rate / s.toxic_words.len() as f64;
        for w in &s.toxic_words {
            let freq = *counts.get(w.as_str()).unwrap_or(&0) as f64 / total as f64;
            assert!(
                (freq - tox_expect).abs() <= 0.02,
                "{w}: frequency {freq:.4} vs expected {tox_expect:.4}"
            );
        }
    }

    #[test]
    fn contaminated_corpus_joins_prompt_and_bad() {
        let data = synth_toy_corpus(&spec(), 13).unwrap();
        let lines = contaminated_corpus(&data.pairs);
        assert_eq!(lines.len(), data.pairs.train().len());
        let first = &data.pairs.train()[0];
        assert_eq!(lines[0], format!("{} {}", first.prompt, first.bad));
    }

    #[test]
    fn tokenize_pairs_prefixes_bos_and_keeps_word_boundary() {
        let s = spec();
        let tok = s.tokenizer().unwrap();
        let pairs = tokenize_pairs(
            &tok,
            &[PairedExample { prompt: "sun kraz".into(), bad: "blarg".into(), good: "moon".into() }],
        )
        .unwrap();
        assert_eq!(pairs[0].prompt[0], BOS_ID);
        assert_eq!(tok.decode(&pairs[0].prompt), "sun kraz");
        assert_eq!(tok.decode(&pairs[0].bad), " blarg");
        assert_eq!(tok.decode(&pairs[0].good), " moon");
    }

    fn tiny_model(tok: &Tokenizer) -> GptModel {
        GptModel::new(
            ModelConfig {
                vocab_size: tok.vocab_size(),
                context_length: 48,
                d_model: 8,
                n_heads: 2,
                n_blocks: 2,
                d_ffn: 16,
                pad_id: PAD_ID,
                bos_id: BOS_ID,
                activation: Activation::Gelu,
            },
            99,
        )
        .unwrap()
    }

    #[test]
    fn normal_corpus_threshold_one_keeps_everything() {
        let s = spec();
        let tok = s.tokenizer().unwrap();
        let model = tiny_model(&tok);
        let scorer = LexiconScorer::new(&s.toxic_words);
        let corpus =
            build_normal_corpus(&model, &tok, 12, 0.9, 1.0, &scorer, 1.0, 42, 16).unwrap();
        assert_eq!(corpus.entries.len(), 12);
        assert_eq!(corpus.provenance.rejected, 0);
        assert_eq!(corpus.rejection_rate(), 0.0);
    }

    #[test]
    fn normal_corpus_threshold_zero_keeps_only_toxin_free() {
        let s = spec();
        let tok = s.tokenizer().unwrap();
        let model = tiny_model(&tok);
        let scorer = LexiconScorer::new(&s.toxic_words);
        let corpus =
            build_normal_corpus(&model, &tok, 12, 0.9, 1.0, &scorer, 0.0, 42, 16).unwrap();
        // every survivor re-scores at or below the threshold
        for e in &corpus.entries {
            assert_eq!(scorer.score(&e.text).unwrap(), 0.0);
        }
        let expected_rate =
            1.0 - corpus.entries.len() as f64 / corpus.provenance.requested as f64;
        assert_eq!(corpus.rejection_rate(), expected_rate);
    }

    #[test]
    fn normal_corpus_is_deterministic_in_seed() {
        let s = spec();
        let tok = s.tokenizer().unwrap();
        let model = tiny_model(&tok);
        let scorer = LexiconScorer::new(&s.toxic_words);
        let a = build_normal_corpus(&model, &tok, 6, 0.9, 1.0, &scorer, 1.0, 5, 12).unwrap();
        let b = build_normal_corpus(&model, &tok, 6, 0.9, 1.0, &scorer, 1.0, 5, 12).unwrap();
        let texts_a: Vec<&str> = a.entries.iter().map(|e| e.text.as_str()).collect();
        let texts_b: Vec<&str> = b.entries.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts_a, texts_b);
    }

    #[test]
    fn paired_jsonl_round_trip_including_unicode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let dataset = PairedDataset::split_by_fraction(
            vec![
                PairedExample { prompt: "sun kraz".into(), bad: "blarg".into(), good: "moon".into() },
                PairedExample { prompt: "naïve café 日本".into(), bad: "zorn ümlaut".into(), good: "étoile".into() },
            ],
            0.5,
        )
        .unwrap();
        save_paired_jsonl(&path, &dataset).unwrap();
        let loaded = load_paired_jsonl(&path, 0.5).unwrap();
        assert_eq!(loaded, dataset);
    }

    #[test]
    fn empty_jsonl_loads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let loaded = load_paired_jsonl(&path, 0.2).unwrap();
        assert!(loaded.examples.is_empty());
    }

    #[test]
    fn malformed_jsonl_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":\"a\",\"bad\":\"b\",\"good\":\"c\"}\nnot json\n",
        )
        .unwrap();
        match load_paired_jsonl(&path, 0.0) {
            Err(Error::Data(msg)) => assert!(msg.contains(":2:"), "line number in {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn normal_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("normal.jsonl");
        let corpus = NormalCorpus {
            entries: vec![
                NormalEntry { text: "sun moon".into(), score: 0.0, seed: 11 },
                NormalEntry { text: "star blarg".into(), score: 0.5, seed: 12 },
            ],
            provenance: NormalProvenance {
                seed: 1,
                p: 0.9,
                temperature: 1.0,
                threshold: 0.6,
                requested: 3,
                rejected: 1,
                max_new_tokens: 16,
            },
        };
        save_normal_jsonl(&path, &corpus).unwrap();
        let entries = load_normal_jsonl(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].text, "sun moon");
        assert_eq!(entries[1].seed, 12);
    }
}
